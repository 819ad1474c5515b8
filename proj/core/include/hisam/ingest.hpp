// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace hisam::ingest {

/// Per-item raw multi-modal vectors; vector j has the corpus-wide
/// dimensionality of modality j.
struct RawItemRecord {
    std::string item_id;
    std::vector<Eigen::VectorXd> vectors;
};

struct Corpus {
    std::vector<int> dims;  // d_j per modality, fixed across items
    std::vector<RawItemRecord> items;
    std::unordered_map<std::string, int> index;  // item_id -> position

    int n_modalities() const { return static_cast<int>(dims.size()); }
    void rebuild_index();
};

struct Event {
    std::string item_id;
    int action_id = 0;
    int64_t timestamp = 0;
};

struct InteractionLog {
    std::string user_id;
    std::vector<Event> events;  // chronological
};

struct ActionVocab {
    std::vector<std::string> names;  // line index = action_id
    int id(const std::string& name) const;
    int size() const { return static_cast<int>(names.size()); }
};

struct SyntheticSpec {
    int n_items = 100;
    int n_users = 20;
    int n_modalities = 2;
    std::vector<int> dims = {16, 16};
    int cluster_count = 4;
    double noise_scale = 0.05;
    // Positive-action probability per cluster (recycled modulo its size).
    // The default plants a deterministic rule: even clusters positive.
    std::vector<double> action_rule = {1.0, 0.0};
    int events_per_user = 30;
    uint64_t seed = 1;
};

struct SyntheticData {
    Corpus corpus;
    std::vector<InteractionLog> logs;
    std::vector<int> item_cluster;  // planted labels, per item position
    ActionVocab actions;            // {"neg", "pos"}
};

struct LoadInteractionOptions {
    bool sort_by_timestamp = false;   // otherwise out-of-order is an error
    bool allow_unknown_items = false;
};

/// Loads the HISAM-EMB v1 format (binary or text body, auto-detected).
Corpus load_embeddings(const std::string& path);
void write_embeddings(const Corpus& corpus, const std::string& path,
                      bool binary = true);

std::vector<InteractionLog> load_interactions(
    const std::string& path, const ActionVocab& actions,
    const std::optional<std::unordered_set<std::string>>& known_items,
    const LoadInteractionOptions& opts = {});
void write_interactions(const std::vector<InteractionLog>& logs,
                        const ActionVocab& actions, const std::string& path);

ActionVocab load_action_vocab(const std::string& path);
void write_action_vocab(const ActionVocab& vocab, const std::string& path);

/// Deterministic cluster-structured corpus + interaction logs. Items are
/// drawn from latent clusters; per-modality vectors are unit-normalized
/// cluster centroids plus gaussian noise; actions follow the planted
/// cluster rule so downstream models can provably learn them.
SyntheticData synth_corpus(const SyntheticSpec& spec);

void validate_spec(const SyntheticSpec& spec);

}  // namespace hisam::ingest

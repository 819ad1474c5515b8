// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "hisam/cga.hpp"
#include "hisam/dmrq.hpp"
#include "hisam/hmat.hpp"
#include "hisam/ingest.hpp"
#include "hisam/seqstream.hpp"
#include "hisam/train_eval.hpp"

namespace hisam::cfg {

/// Whole-pipeline configuration, stored as `[section]` / `key = value`
/// text with strict unknown-key rejection and lossless round-trip.
struct PipelineConfig {
    uint64_t seed = 1;

    ingest::SyntheticSpec synth;

    // [align]
    int align_d = 256;
    double align_tau = 0.07;
    int align_anchor = 0;
    int align_batch = 16;
    double align_lr = 1e-3;
    int align_steps = 200;

    dmrq::DmrqConfig dmrq;

    // [model]
    int model_layers = 4;
    int model_width = 512;
    int model_n_q = 8;
    int model_n_kv = 2;
    int model_ffn_mult = 5;
    double model_b_inter = 10000.0;
    double model_b_intra = 100.0;
    int model_max_items = 50;
    int model_l_u = 6;
    int model_profile_buckets = 64;

    tev::Schedule train;
    tev::EvalOptions eval;

    // [serve]
    int serve_max_candidates = 64;
    int serve_max_tokens = 4096;
};

/// Propagates derived fields: every stage seed flows from the root seed,
/// the quantizer dimension tracks the aligned dimension, and eval inherits
/// the model's stream-shape limits. parse_config and run_pipeline both
/// apply this, so hand-built configs stay consistent too.
void apply_derived_fields(PipelineConfig& config);

PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::string& path);
std::string serialize_config(const PipelineConfig& config);
void save_config(const PipelineConfig& config, const std::string& path);

/// Cross-module invariant checks; returns human-readable violations
/// instead of throwing.
std::vector<std::string> validate_config(const PipelineConfig& config);

/// FNV-1a hash of the canonical serialization.
uint64_t config_hash(const PipelineConfig& config);

struct RunManifest {
    std::string version;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> artifacts;  // name, path
    std::string failed_stage;  // empty on success
};

void save_manifest(const RunManifest& manifest, const std::string& path);
RunManifest load_manifest(const std::string& path);

/// `item_id<TAB>sh,codes<TAB>sp,codes` per line. The loader recovers the
/// discrete codes only (not the quantized vectors).
void write_codes_tsv(const std::vector<dmrq::ItemCodes>& codes,
                     const std::string& path);
std::vector<dmrq::ItemCodes> load_codes_tsv(const std::string& path);

/// Token-id layout implied by a pipeline config (synthetic actions are
/// always {neg, pos}).
seq::Vocab vocab_from_config(const PipelineConfig& config);

/// One truncated training stream per user, profile from hashed user-id
/// buckets. Throws when a log references an item without codes.
std::vector<seq::TokenStream> build_streams(
    const PipelineConfig& config, const std::vector<dmrq::ItemCodes>& codes,
    const std::vector<ingest::InteractionLog>& logs);

/// align -> tokenize -> (pretrain?) -> sft -> eval over a synthetic
/// corpus, writing every artifact under `out_dir`. Re-runs with the same
/// config produce byte-identical artifacts. A stage failure persists a
/// partial manifest naming the stage, then rethrows.
RunManifest run_pipeline(const PipelineConfig& config,
                         const std::string& out_dir);

}  // namespace hisam::cfg

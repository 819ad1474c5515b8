// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "hisam/hmat.hpp"
#include "hisam/ingest.hpp"
#include "hisam/seqstream.hpp"

namespace hisam::tev {

/// One scored impression for AUC/GAUC.
struct EvalRecord {
    std::string user_id;
    double score = 0.0;
    int label = 0;
};

/// Probability a random positive outranks a random negative; rank-sum
/// with ties counted 0.5. Throws on single-class input.
double auc(const std::vector<EvalRecord>& records);

/// Mean per-user AUC over users having both classes, impression-weighted
/// by default. Throws when no user is eligible.
double gauc(const std::vector<EvalRecord>& records, bool weighted = true);

/// Streams plus supervision mode; padding-free representation (each
/// stream is forwarded at its natural length).
struct TrainBatch {
    std::vector<seq::TokenStream> streams;
    bool sft_mode = false;  // false: next-token over full vocab, causal mask
};

/// Mean NLL over all positions after the first, full vocab, causal mask.
ag::Var pt_loss_graph(const hmat::ModelState& model, const TrainBatch& batch);
double pt_loss(const hmat::ModelState& model, const TrainBatch& batch);

/// Mean NLL over the action-id range at Action positions, MA mask on.
ag::Var sft_loss_graph(const hmat::ModelState& model, const TrainBatch& batch,
                       const seq::Vocab& vocab);
double sft_loss(const hmat::ModelState& model, const TrainBatch& batch,
                const seq::Vocab& vocab);

struct Schedule {
    int pt_steps = 0;
    int sft_steps = 0;
    double pt_lr = 2e-4;
    double sft_lr = 1e-4;
    int batch = 8;  // streams per step
    uint64_t seed = 1;
};

struct TrainCurves {
    std::vector<double> pt;   // loss per PT step
    std::vector<double> sft;  // loss per SFT step
};

/// PT stage then SFT stage, in place. Deterministic under a fixed seed;
/// throws on a non-finite loss naming the offending step.
TrainCurves train(hmat::ModelState& model,
                  const std::vector<seq::TokenStream>& data,
                  const seq::Vocab& vocab, const Schedule& schedule);

/// `step,loss` CSV.
void write_curve_csv(const std::vector<double>& curve, const std::string& path);

struct EvalOptions {
    int max_items = 50;       // history truncation K
    int l_u = 6;              // profile length
    int positive_action = 1;  // action id counted as the positive class
    int min_history = 1;
    int cold_threshold = 10;  // users below this many events are cold-start
    bool negative_sampling = false;
    uint64_t seed = 1;
};

/// P(positive action) at the final position of `stream` (expected to end
/// at a candidate Anchor), from a full MA-masked forward.
double action_probability(const hmat::ModelState& model,
                          const seq::TokenStream& stream,
                          const seq::Vocab& vocab, int action);

/// History stream (truncated to K items) plus one candidate segment whose
/// tokens carry m = L_valid + 1 and which ends at its Anchor.
seq::TokenStream candidate_stream(const std::vector<int>& profile_ids,
                                  const std::vector<std::pair<dmrq::ItemCodes, int>>& history,
                                  const dmrq::ItemCodes& candidate,
                                  const seq::Vocab& vocab, int max_items);

/// Scores each held-out event (history = all earlier events) and labels
/// it by its observed action; optionally adds one sampled non-interacted
/// item per positive as a negative.
std::vector<EvalRecord> score_events(
    const hmat::ModelState& model,
    const std::map<std::string, dmrq::ItemCodes>& codes_by_item,
    const std::vector<ingest::InteractionLog>& logs, const seq::Vocab& vocab,
    const EvalOptions& opts);

struct Metrics {
    std::vector<std::pair<std::string, double>> values;  // metric, value
};

/// auc, gauc plus cold/warm-user AUC splits when computable.
Metrics compute_metrics(const std::vector<EvalRecord>& records,
                        const std::vector<ingest::InteractionLog>& logs,
                        int cold_threshold);

void write_metrics_csv(const Metrics& metrics, const std::string& path);

}  // namespace hisam::tev

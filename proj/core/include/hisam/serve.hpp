// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "hisam/hmat.hpp"
#include "hisam/seqstream.hpp"

namespace hisam::serve {

/// Per-layer cached keys/values. Keys are stored post-rotation; the
/// logical (m, n) coordinates in the shared meta list stay at their
/// original stream values across eviction compaction.
struct LayerCache {
    Eigen::MatrixXd k;  // entries x (n_kv * head_dim)
    Eigen::MatrixXd v;
};

struct CacheMeta {
    int m = 0;
    int n = 0;
    seq::TokenKind kind = seq::TokenKind::ItemCode;
};

struct AnchorCache {
    std::vector<LayerCache> layers;
    std::vector<CacheMeta> meta;  // shared across layers
    int last_m = -1;
    int last_n = 0;

    size_t entries() const { return meta.size(); }
    /// Bytes held by key/value storage across layers.
    size_t bytes() const;
};

AnchorCache make_cache(const hmat::ModelState& model);

/// Appends `tokens` to the decoding session: returns one logits row per
/// new token, identical (within fp error) to a full MA-masked forward.
/// Each consumed Action token triggers eviction of its segment's
/// non-anchor entries, so a completed history retains exactly
/// L_u profile entries + one anchor per item. Throws on coordinate
/// regression. When `score_pairs` is non-null, accumulates the number of
/// query-head/key score dot products performed.
Eigen::MatrixXd incremental_decode(const hmat::ModelState& model,
                                   AnchorCache& cache,
                                   const std::vector<seq::SemanticToken>& tokens,
                                   long* score_pairs = nullptr);

/// Scores every candidate in a single batched forward over a completed
/// history cache (profile + anchors only; anything else throws).
/// Candidate tokens all carry m = L_valid + 1 and attend the shared
/// history plus their own block (block-diagonal mask). The score is the
/// probability of `target_action` at each candidate's Anchor position.
/// Throws, advising chunking, when the block would exceed `max_tokens`.
std::vector<double> rank_one_pass(const hmat::ModelState& model,
                                  const AnchorCache& cache,
                                  const std::vector<dmrq::ItemCodes>& candidates,
                                  const seq::Vocab& vocab, int target_action,
                                  int max_tokens = 4096,
                                  long* score_pairs = nullptr);

/// Sequential oracle: one candidate appended and scored per forward.
double score_sequential(const hmat::ModelState& model, const AnchorCache& cache,
                        const dmrq::ItemCodes& candidate,
                        const seq::Vocab& vocab, int target_action);

struct WorkloadSpec {
    int l_u = 6;
    int k = 50;           // history items
    int l_i = 6;          // codes per item
    int n_candidates = 8;
    int repeats = 5;
    uint64_t seed = 1;
};

struct BenchReport {
    long ma_pairs_counted = 0;    // instrumented, anchored decode
    long ma_pairs_analytic = 0;   // closed-form visible-key count
    long flat_pairs_analytic = 0; // causal flat stream (no anchors/actions)
    // Historical keys for the first query of a fresh item after K items.
    long ma_hist_keys = 0;        // l_u + k
    long flat_hist_keys = 0;      // l_u + k * l_i
    double hist_ratio = 0.0;      // flat / ma, approaches l_i
    size_t cache_entries = 0;
    size_t cache_bytes = 0;
    size_t flat_entries = 0;
    size_t flat_bytes = 0;
    double decode_ms_median = 0.0;
    double decode_ms_p99 = 0.0;
    double full_ms_median = 0.0;
    double full_ms_p99 = 0.0;
};

BenchReport bench_serving(const hmat::ModelState& model,
                          const seq::Vocab& vocab, const WorkloadSpec& spec);

void write_bench_csv(const BenchReport& report, const WorkloadSpec& spec,
                     const std::string& path);

}  // namespace hisam::serve

// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0
//
// Microbenchmarks: rotary scoring, one decoder layer, and incremental
// decoding with anchor eviction vs a dense forward over the same stream.

#include <benchmark/benchmark.h>

#include <vector>

#include "hisam/hmat.hpp"
#include "hisam/rng.hpp"
#include "hisam/seqstream.hpp"
#include "hisam/serve.hpp"

using namespace hisam;

namespace {

seq::Vocab bench_vocab() {
    seq::Vocab v;
    v.n_sh = 3;
    v.n_m = 3;
    v.v = 64;
    v.n_actions = 2;
    v.profile_buckets = 32;
    return v;
}

hmat::ModelState bench_model(const seq::Vocab& vocab, int width, int layers) {
    hmat::ModelConfig cfg;
    cfg.width = width;
    cfg.n_layers = layers;
    cfg.n_q = width / 16;
    cfg.n_kv = cfg.n_q / 2;
    cfg.vocab_size = vocab.size();
    cfg.seed = 7;
    return hmat::init_model(cfg);
}

seq::TokenStream bench_stream(const seq::Vocab& vocab, int l_u, int k,
                              uint64_t seed) {
    Rng rng(seed);
    std::vector<int> profile;
    for (int i = 0; i < l_u; ++i)
        profile.push_back(vocab.profile_id(static_cast<int>(
            rng.uniform_int(static_cast<uint64_t>(vocab.profile_buckets)))));
    std::vector<std::pair<dmrq::ItemCodes, int>> hist;
    for (int t = 0; t < k; ++t) {
        dmrq::ItemCodes c;
        c.item_id = "i" + std::to_string(t);
        for (int j = 0; j < vocab.n_sh; ++j)
            c.c_sh.push_back(static_cast<int>(
                rng.uniform_int(static_cast<uint64_t>(vocab.v))));
        for (int j = 0; j < vocab.n_m; ++j)
            c.c_sp.push_back(static_cast<int>(
                rng.uniform_int(static_cast<uint64_t>(vocab.v))));
        hist.emplace_back(std::move(c), static_cast<int>(rng.uniform_int(2)));
    }
    return seq::build_stream(profile, hist, vocab);
}

void bm_hrope_score(benchmark::State& state) {
    const int d = static_cast<int>(state.range(0));
    hmat::HRopeTables t = hmat::make_hrope_tables(d);
    Rng rng(1);
    Eigen::VectorXd q(d), k(d);
    for (int i = 0; i < d; ++i) {
        q(i) = rng.gaussian();
        k(i) = rng.gaussian();
    }
    for (auto _ : state)
        benchmark::DoNotOptimize(hmat::hrope_score(q, k, 37, 3, 12, 5, t));
}
BENCHMARK(bm_hrope_score)->Arg(16)->Arg(64)->Arg(128);

void bm_layer_forward(benchmark::State& state) {
    const int tokens = static_cast<int>(state.range(0));
    seq::Vocab vocab = bench_vocab();
    hmat::ModelState model = bench_model(vocab, 64, 1);
    seq::TokenStream s =
        bench_stream(vocab, 6, (tokens - 6) / (vocab.n_sh + vocab.n_m + 2), 2);
    Eigen::MatrixXd mask = hmat::build_mask(s, true);
    for (auto _ : state)
        benchmark::DoNotOptimize(hmat::forward_values(model, s, mask));
    state.SetItemsProcessed(state.iterations() *
                            static_cast<long>(s.tokens.size()));
}
BENCHMARK(bm_layer_forward)->Arg(64)->Arg(256);

void bm_incremental_decode(benchmark::State& state) {
    const int k = static_cast<int>(state.range(0));
    seq::Vocab vocab = bench_vocab();
    hmat::ModelState model = bench_model(vocab, 64, 2);
    seq::TokenStream s = bench_stream(vocab, 6, k, 3);
    for (auto _ : state) {
        serve::AnchorCache cache = serve::make_cache(model);
        benchmark::DoNotOptimize(
            serve::incremental_decode(model, cache, s.tokens));
    }
    state.SetItemsProcessed(state.iterations() *
                            static_cast<long>(s.tokens.size()));
}
BENCHMARK(bm_incremental_decode)->Arg(10)->Arg(50);

void bm_dense_forward(benchmark::State& state) {
    const int k = static_cast<int>(state.range(0));
    seq::Vocab vocab = bench_vocab();
    hmat::ModelState model = bench_model(vocab, 64, 2);
    seq::TokenStream s = bench_stream(vocab, 6, k, 3);
    Eigen::MatrixXd mask = hmat::build_mask(s, true);
    for (auto _ : state)
        benchmark::DoNotOptimize(hmat::forward_values(model, s, mask));
    state.SetItemsProcessed(state.iterations() *
                            static_cast<long>(s.tokens.size()));
}
BENCHMARK(bm_dense_forward)->Arg(10)->Arg(50);

}  // namespace

BENCHMARK_MAIN();

// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "hisam/common.hpp"
#include "hisam/rng.hpp"

namespace hisam::tev {

using ag::Var;
using Eigen::MatrixXd;

double auc(const std::vector<EvalRecord>& records) {
    std::vector<double> pos, neg;
    for (const auto& r : records) {
        if (!std::isfinite(r.score)) throw Error("auc: non-finite score");
        (r.label ? pos : neg).push_back(r.score);
    }
    if (pos.empty() || neg.empty())
        throw Error("auc: need at least one positive and one negative");
    // Rank-sum with average ranks for ties.
    std::vector<std::pair<double, int>> all;
    for (double s : pos) all.emplace_back(s, 1);
    for (double s : neg) all.emplace_back(s, 0);
    std::sort(all.begin(), all.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double pos_rank_sum = 0.0;
    size_t i = 0;
    while (i < all.size()) {
        size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t t = i; t < j; ++t)
            if (all[t].second) pos_rank_sum += avg_rank;
        i = j;
    }
    double p = static_cast<double>(pos.size());
    double n = static_cast<double>(neg.size());
    return (pos_rank_sum - p * (p + 1) / 2.0) / (p * n);
}

double gauc(const std::vector<EvalRecord>& records, bool weighted) {
    std::map<std::string, std::vector<EvalRecord>> by_user;
    for (const auto& r : records) by_user[r.user_id].push_back(r);
    double num = 0.0, den = 0.0;
    for (const auto& [user, recs] : by_user) {
        bool has_pos = false, has_neg = false;
        for (const auto& r : recs) (r.label ? has_pos : has_neg) = true;
        if (!has_pos || !has_neg) continue;  // ineligible user
        double w = weighted ? static_cast<double>(recs.size()) : 1.0;
        num += w * auc(recs);
        den += w;
    }
    if (den == 0.0) throw Error("gauc: no user has both classes");
    return num / den;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

ag::Var pt_loss_graph(const hmat::ModelState& model, const TrainBatch& batch) {
    Var acc = ag::constant(0.0);
    long count = 0;
    for (const auto& stream : batch.streams) {
        if (stream.tokens.size() < 2) continue;
        MatrixXd mask = hmat::build_mask(stream, /*memory_anchor=*/false);
        Var lsm = ag::log_softmax_rows(hmat::forward(model, stream, mask));
        for (size_t j = 1; j < stream.tokens.size(); ++j) {
            acc = ag::add(acc, ag::pick(lsm, static_cast<int>(j) - 1,
                                        stream.tokens[j].vocab_id));
            ++count;
        }
    }
    if (count == 0) throw Error("pt_loss: no supervised positions");
    return ag::scale(acc, -1.0 / static_cast<double>(count));
}

double pt_loss(const hmat::ModelState& model, const TrainBatch& batch) {
    return pt_loss_graph(model, batch)->scalar();
}

ag::Var sft_loss_graph(const hmat::ModelState& model, const TrainBatch& batch,
                       const seq::Vocab& vocab) {
    Var acc = ag::constant(0.0);
    long count = 0;
    for (const auto& stream : batch.streams) {
        if (stream.action_positions.empty()) continue;
        MatrixXd mask = hmat::build_mask(stream, /*memory_anchor=*/true);
        Var logits = hmat::forward(model, stream, mask);
        Var action_logits =
            ag::slice_cols(logits, vocab.action_base(), vocab.n_actions);
        Var lsm = ag::log_softmax_rows(action_logits);
        for (int pos : stream.action_positions) {
            if (pos == 0) throw Error("sft_loss: action at position 0");
            int target =
                stream.tokens[static_cast<size_t>(pos)].vocab_id -
                vocab.action_base();
            if (target < 0 || target >= vocab.n_actions)
                throw Error("sft_loss: non-action token at action position");
            acc = ag::add(acc, ag::pick(lsm, pos - 1, target));
            ++count;
        }
    }
    if (count == 0) throw Error("sft_loss: batch has no action positions");
    return ag::scale(acc, -1.0 / static_cast<double>(count));
}

double sft_loss(const hmat::ModelState& model, const TrainBatch& batch,
                const seq::Vocab& vocab) {
    return sft_loss_graph(model, batch, vocab)->scalar();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

TrainBatch sample_batch(const std::vector<seq::TokenStream>& data, int n,
                        Rng& rng) {
    TrainBatch batch;
    for (int i = 0; i < n; ++i)
        batch.streams.push_back(data[rng.uniform_int(data.size())]);
    return batch;
}

}  // namespace

TrainCurves train(hmat::ModelState& model,
                  const std::vector<seq::TokenStream>& data,
                  const seq::Vocab& vocab, const Schedule& schedule) {
    if (data.empty() && (schedule.pt_steps > 0 || schedule.sft_steps > 0))
        throw Error("train: empty dataset");
    TrainCurves curves;
    auto params = model.params();
    const int b = std::max(1, std::min(schedule.batch,
                                       static_cast<int>(data.size())));

    {
        Rng rng(stage_seed(schedule.seed, "pt"));
        ag::Adam opt(schedule.pt_lr);
        for (int step = 0; step < schedule.pt_steps; ++step) {
            Var loss = pt_loss_graph(model, sample_batch(data, b, rng));
            double lv = loss->scalar();
            if (!std::isfinite(lv))
                throw Error("train: non-finite PT loss at step " +
                            std::to_string(step));
            curves.pt.push_back(lv);
            ag::Adam::zero_grad(params);
            ag::backward(loss);
            opt.step(params);
        }
    }
    {
        Rng rng(stage_seed(schedule.seed, "sft"));
        ag::Adam opt(schedule.sft_lr);
        for (int step = 0; step < schedule.sft_steps; ++step) {
            Var loss = sft_loss_graph(model, sample_batch(data, b, rng), vocab);
            double lv = loss->scalar();
            if (!std::isfinite(lv))
                throw Error("train: non-finite SFT loss at step " +
                            std::to_string(step));
            curves.sft.push_back(lv);
            ag::Adam::zero_grad(params);
            ag::backward(loss);
            opt.step(params);
        }
    }
    return curves;
}

void write_curve_csv(const std::vector<double>& curve,
                     const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write file: " + path);
    f << "step,loss\n";
    char buf[64];
    for (size_t i = 0; i < curve.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, curve[i]);
        f << buf;
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double action_probability(const hmat::ModelState& model,
                          const seq::TokenStream& stream,
                          const seq::Vocab& vocab, int action) {
    if (action < 0 || action >= vocab.n_actions)
        throw Error("action_probability: action id out of range");
    MatrixXd mask = hmat::build_mask(stream, /*memory_anchor=*/true);
    MatrixXd logits = hmat::forward_values(model, stream, mask);
    long last = logits.rows() - 1;
    Eigen::RowVectorXd a =
        logits.row(last).segment(vocab.action_base(), vocab.n_actions);
    Eigen::RowVectorXd e = (a.array() - a.maxCoeff()).exp();
    return e(action) / e.sum();
}

seq::TokenStream candidate_stream(
    const std::vector<int>& profile_ids,
    const std::vector<std::pair<dmrq::ItemCodes, int>>& history,
    const dmrq::ItemCodes& candidate, const seq::Vocab& vocab, int max_items) {
    seq::TokenStream s =
        seq::truncate(seq::build_stream(profile_ids, history, vocab),
                      max_items);
    int l_valid = 0;
    for (const auto& t : s.tokens) l_valid = std::max(l_valid, t.m);
    int m = l_valid + 1;
    int n = 1;
    for (int id : seq::item_token_ids(candidate, vocab))
        s.tokens.push_back({id, seq::TokenKind::ItemCode, m, n++});
    s.anchor_positions.push_back(static_cast<int>(s.tokens.size()));
    s.tokens.push_back({vocab.anchor_id(), seq::TokenKind::Anchor, m, n});
    return s;
}

std::vector<EvalRecord> score_events(
    const hmat::ModelState& model,
    const std::map<std::string, dmrq::ItemCodes>& codes_by_item,
    const std::vector<ingest::InteractionLog>& logs, const seq::Vocab& vocab,
    const EvalOptions& opts) {
    std::vector<std::string> all_items;
    all_items.reserve(codes_by_item.size());
    for (const auto& [id, c] : codes_by_item) all_items.push_back(id);
    Rng rng(stage_seed(opts.seed, "eval-negatives"));

    std::vector<EvalRecord> records;
    for (const auto& log : logs) {
        std::vector<std::pair<dmrq::ItemCodes, int>> history;
        std::unordered_set<std::string> interacted;
        for (const auto& e : log.events) interacted.insert(e.item_id);
        for (const auto& e : log.events) {
            auto it = codes_by_item.find(e.item_id);
            if (it == codes_by_item.end())
                throw Error("eval: no codes for item '" + e.item_id + "'");
            if (static_cast<int>(history.size()) >= opts.min_history) {
                auto profile =
                    seq::profile_bucket_ids(log.user_id, opts.l_u, vocab);
                seq::TokenStream s = candidate_stream(
                    profile, history, it->second, vocab, opts.max_items);
                double p = action_probability(model, s, vocab,
                                              opts.positive_action);
                records.push_back(
                    {log.user_id, p,
                     e.action_id == opts.positive_action ? 1 : 0});
                if (opts.negative_sampling &&
                    e.action_id == opts.positive_action &&
                    all_items.size() > interacted.size()) {
                    std::string neg_id;
                    do {
                        neg_id = all_items[rng.uniform_int(all_items.size())];
                    } while (interacted.count(neg_id));
                    seq::TokenStream ns = candidate_stream(
                        profile, history, codes_by_item.at(neg_id), vocab,
                        opts.max_items);
                    records.push_back(
                        {log.user_id,
                         action_probability(model, ns, vocab,
                                            opts.positive_action),
                         0});
                }
            }
            history.emplace_back(it->second, e.action_id);
        }
    }
    return records;
}

Metrics compute_metrics(const std::vector<EvalRecord>& records,
                        const std::vector<ingest::InteractionLog>& logs,
                        int cold_threshold) {
    Metrics m;
    m.values.emplace_back("auc", auc(records));
    m.values.emplace_back("gauc", gauc(records));
    std::unordered_map<std::string, int> n_events;
    for (const auto& log : logs)
        n_events[log.user_id] = static_cast<int>(log.events.size());
    std::vector<EvalRecord> cold, warm;
    for (const auto& r : records) {
        auto it = n_events.find(r.user_id);
        int n = it == n_events.end() ? 0 : it->second;
        (n < cold_threshold ? cold : warm).push_back(r);
    }
    auto try_metric = [&](const char* name, const std::vector<EvalRecord>& rs) {
        bool pos = false, neg = false;
        for (const auto& r : rs) (r.label ? pos : neg) = true;
        if (pos && neg) m.values.emplace_back(name, auc(rs));
    };
    try_metric("auc_cold", cold);
    try_metric("auc_warm", warm);
    return m;
}

void write_metrics_csv(const Metrics& metrics, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write file: " + path);
    f << "metric,value\n";
    char buf[80];
    for (const auto& [name, value] : metrics.values) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g\n", name.c_str(), value);
        f << buf;
    }
}

}  // namespace hisam::tev

// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0
//
// Unified command-line entry point: synthetic data generation, geometric
// alignment, disentangled quantization, training, evaluation, candidate
// scoring and serving benchmarks. Exit codes: 0 success, 1 validation
// error, 2 runtime failure.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>

#include "hisam/common.hpp"
#include "hisam/config.hpp"
#include "hisam/serve.hpp"

namespace fs = std::filesystem;
using namespace hisam;

namespace {

cfg::PipelineConfig load_checked(const std::string& path) {
    cfg::PipelineConfig c = cfg::load_config(path);
    auto violations = cfg::validate_config(c);
    if (!violations.empty()) {
        std::string msg = "invalid config:";
        for (const auto& v : violations) msg += "\n  - " + v;
        throw ConfigError(msg);
    }
    return c;
}

hmat::ModelConfig model_config(const cfg::PipelineConfig& c) {
    hmat::ModelConfig mc;
    mc.width = c.model_width;
    mc.n_layers = c.model_layers;
    mc.n_q = c.model_n_q;
    mc.n_kv = c.model_n_kv;
    mc.vocab_size = cfg::vocab_from_config(c).size();
    mc.ffn_mult = c.model_ffn_mult;
    mc.b_inter = c.model_b_inter;
    mc.b_intra = c.model_b_intra;
    mc.seed = c.seed;
    return mc;
}

std::vector<cga::ModalEmbeddingSet> aligned_corpus(const std::string& emb_path,
                                                   const std::string& heads_path) {
    ingest::Corpus corpus = ingest::load_embeddings(emb_path);
    cga::ProjectionHeads heads = cga::load_heads(heads_path);
    return cga::apply_heads(corpus, heads);
}

void run_training_stage(const cfg::PipelineConfig& c, bool pretrain_stage,
                        const std::string& codes_path,
                        const std::string& interactions_path,
                        const std::string& actions_path,
                        const std::string& model_in,
                        const std::string& model_out,
                        const std::string& curve_path) {
    auto codes = cfg::load_codes_tsv(codes_path);
    ingest::ActionVocab actions = ingest::load_action_vocab(actions_path);
    std::unordered_set<std::string> known;
    for (const auto& ic : codes) known.insert(ic.item_id);
    auto logs = ingest::load_interactions(interactions_path, actions, known);
    auto streams = cfg::build_streams(c, codes, logs);
    seq::Vocab vocab = cfg::vocab_from_config(c);

    hmat::ModelState model = model_in.empty()
                                 ? hmat::init_model(model_config(c))
                                 : hmat::load_model(model_in);
    tev::Schedule sched = c.train;
    (pretrain_stage ? sched.sft_steps : sched.pt_steps) = 0;
    tev::TrainCurves curves = tev::train(model, streams, vocab, sched);
    hmat::save_model(model, model_out);
    if (!curve_path.empty())
        tev::write_curve_csv(pretrain_stage ? curves.pt : curves.sft,
                             curve_path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hi-SAM semantic-ID recommendation pipeline"};
    app.require_subcommand(1);
    std::string config_path, out_dir, emb_path, heads_path, stack_path;
    std::string codes_path, interactions_path, actions_path;
    std::string model_in, model_out, curve_path, out_path;
    std::string user_id, candidates_path;
    bool sort_events = false;
    serve::WorkloadSpec workload;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
    synth->add_option("--config", config_path)->required();
    synth->add_option("--out", out_dir, "output directory")->required();

    auto* align = app.add_subcommand("align", "Train modality alignment heads");
    align->add_option("--config", config_path)->required();
    align->add_option("--embeddings", emb_path)->required();
    align->add_option("--heads-out", heads_path)->required();
    align->add_option("--curve", curve_path);

    auto* tokenize = app.add_subcommand(
        "tokenize", "Train the quantizer and emit item codes");
    tokenize->add_option("--config", config_path)->required();
    tokenize->add_option("--embeddings", emb_path)->required();
    tokenize->add_option("--heads", heads_path)->required();
    tokenize->add_option("--codebooks-out", stack_path)->required();
    tokenize->add_option("--codes-out", codes_path)->required();

    auto add_train_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path)->required();
        cmd->add_option("--codes", codes_path)->required();
        cmd->add_option("--interactions", interactions_path)->required();
        cmd->add_option("--actions", actions_path)->required();
        cmd->add_option("--model-in", model_in);
        cmd->add_option("--model-out", model_out)->required();
        cmd->add_option("--curve", curve_path);
    };
    auto* pretrain =
        app.add_subcommand("pretrain", "Next-token pre-training stage");
    add_train_opts(pretrain);
    auto* sft =
        app.add_subcommand("sft", "Action-token supervised fine-tuning");
    add_train_opts(sft);

    auto* eval = app.add_subcommand("eval", "AUC/GAUC evaluation");
    eval->add_option("--config", config_path)->required();
    eval->add_option("--codes", codes_path)->required();
    eval->add_option("--interactions", interactions_path)->required();
    eval->add_option("--actions", actions_path)->required();
    eval->add_option("--model", model_in)->required();
    eval->add_option("--out", out_path)->required();
    eval->add_flag("--sort", sort_events,
                   "sort out-of-order events by timestamp");

    auto* score = app.add_subcommand(
        "score", "Rank candidate items for one user's history");
    score->add_option("--config", config_path)->required();
    score->add_option("--codes", codes_path)->required();
    score->add_option("--interactions", interactions_path)->required();
    score->add_option("--actions", actions_path)->required();
    score->add_option("--model", model_in)->required();
    score->add_option("--user", user_id)->required();
    score->add_option("--candidates", candidates_path,
                      "file with one candidate item id per line")
        ->required();
    score->add_option("--out", out_path, "default: stdout");

    auto* bench = app.add_subcommand("bench", "Serving cost benchmark");
    bench->add_option("--config", config_path)->required();
    bench->add_option("--k", workload.k, "history items");
    bench->add_option("--l-i", workload.l_i, "codes per item");
    bench->add_option("--l-u", workload.l_u, "profile tokens");
    bench->add_option("--candidates", workload.n_candidates);
    bench->add_option("--repeats", workload.repeats);
    bench->add_option("--out", out_path)->required();

    auto* run = app.add_subcommand("run", "Full pipeline");
    run->add_option("--config", config_path)->required();
    run->add_option("--out", out_dir)->required();

    auto* validate = app.add_subcommand("validate", "Check a config file");
    validate->add_option("--config", config_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate->parsed()) {
            cfg::PipelineConfig c = cfg::load_config(config_path);
            auto violations = cfg::validate_config(c);
            if (violations.empty()) {
                std::cout << "ok\n";
                return 0;
            }
            for (const auto& v : violations) std::cout << v << '\n';
            return 1;
        }
        if (synth->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            ingest::SyntheticData data = ingest::synth_corpus(c.synth);
            fs::create_directories(out_dir);
            ingest::write_embeddings(data.corpus, out_dir + "/embeddings.emb");
            ingest::write_interactions(data.logs, data.actions,
                                       out_dir + "/interactions.tsv");
            ingest::write_action_vocab(data.actions, out_dir + "/actions.txt");
            std::ofstream cf(out_dir + "/clusters.tsv");
            for (size_t i = 0; i < data.corpus.items.size(); ++i)
                cf << data.corpus.items[i].item_id << '\t'
                   << data.item_cluster[i] << '\n';
            return 0;
        }
        if (align->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            cga::AlignConfig ac{c.align_d,     c.align_tau, c.align_anchor,
                                c.align_batch, c.align_lr,  c.align_steps,
                                c.seed};
            ingest::Corpus corpus = ingest::load_embeddings(emb_path);
            cga::AlignResult result = cga::train_alignment(corpus, ac);
            cga::save_heads(result.heads, heads_path);
            if (!curve_path.empty())
                tev::write_curve_csv(result.curve, curve_path);
            return 0;
        }
        if (tokenize->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            auto aligned = aligned_corpus(emb_path, heads_path);
            dmrq::TrainResult result = dmrq::train_dmrq(
                aligned, c.dmrq, static_cast<int>(aligned.front().z.size()));
            dmrq::save_stack(result.stack, stack_path);
            cfg::write_codes_tsv(dmrq::tokenize(aligned, result.stack),
                                 codes_path);
            return 0;
        }
        if (pretrain->parsed() || sft->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            run_training_stage(c, pretrain->parsed(), codes_path,
                               interactions_path, actions_path, model_in,
                               model_out, curve_path);
            return 0;
        }
        if (eval->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            auto codes = cfg::load_codes_tsv(codes_path);
            ingest::ActionVocab actions =
                ingest::load_action_vocab(actions_path);
            std::unordered_set<std::string> known;
            for (const auto& ic : codes) known.insert(ic.item_id);
            ingest::LoadInteractionOptions lio;
            lio.sort_by_timestamp = sort_events;
            auto logs = ingest::load_interactions(interactions_path, actions,
                                                  known, lio);
            hmat::ModelState model = hmat::load_model(model_in);
            seq::Vocab vocab = cfg::vocab_from_config(c);
            std::map<std::string, dmrq::ItemCodes> by_item;
            for (const auto& ic : codes) by_item[ic.item_id] = ic;
            auto records =
                tev::score_events(model, by_item, logs, vocab, c.eval);
            tev::Metrics metrics = tev::compute_metrics(
                records, logs, c.eval.cold_threshold);
            tev::write_metrics_csv(metrics, out_path);
            return 0;
        }
        if (score->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            auto codes = cfg::load_codes_tsv(codes_path);
            ingest::ActionVocab actions =
                ingest::load_action_vocab(actions_path);
            std::unordered_set<std::string> known;
            for (const auto& ic : codes) known.insert(ic.item_id);
            auto logs = ingest::load_interactions(interactions_path, actions,
                                                  known);
            hmat::ModelState model = hmat::load_model(model_in);
            seq::Vocab vocab = cfg::vocab_from_config(c);
            std::map<std::string, dmrq::ItemCodes> by_item;
            for (const auto& ic : codes) by_item[ic.item_id] = ic;

            const ingest::InteractionLog* log = nullptr;
            for (const auto& l : logs)
                if (l.user_id == user_id) log = &l;
            if (!log) throw Error("score: user '" + user_id + "' not found");

            std::vector<std::pair<dmrq::ItemCodes, int>> history;
            for (const auto& e : log->events)
                history.emplace_back(by_item.at(e.item_id), e.action_id);
            seq::TokenStream stream = seq::truncate(
                seq::build_stream(
                    seq::profile_bucket_ids(user_id, c.model_l_u, vocab),
                    history, vocab),
                c.model_max_items);
            serve::AnchorCache cache = serve::make_cache(model);
            serve::incremental_decode(model, cache, stream.tokens);

            std::ifstream cands(candidates_path);
            if (!cands)
                throw Error("cannot open file: " + candidates_path);
            std::vector<dmrq::ItemCodes> cand_codes;
            std::vector<std::string> cand_ids;
            std::string line;
            while (std::getline(cands, line)) {
                if (line.empty()) continue;
                auto it = by_item.find(line);
                if (it == by_item.end())
                    throw Error("score: no codes for candidate '" + line + "'");
                cand_codes.push_back(it->second);
                cand_ids.push_back(line);
            }
            std::vector<std::pair<std::string, double>> ranked;
            for (size_t start = 0; start < cand_codes.size();
                 start += static_cast<size_t>(c.serve_max_candidates)) {
                size_t end = std::min(
                    cand_codes.size(),
                    start + static_cast<size_t>(c.serve_max_candidates));
                std::vector<dmrq::ItemCodes> chunk(
                    cand_codes.begin() + static_cast<long>(start),
                    cand_codes.begin() + static_cast<long>(end));
                auto scores = serve::rank_one_pass(
                    model, cache, chunk, vocab, c.eval.positive_action,
                    c.serve_max_tokens);
                for (size_t i = 0; i < scores.size(); ++i)
                    ranked.emplace_back(cand_ids[start + i], scores[i]);
            }
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) {
                                 return a.second > b.second;
                             });
            std::ostream* os = &std::cout;
            std::ofstream fout;
            if (!out_path.empty()) {
                fout.open(out_path);
                if (!fout) throw Error("cannot write file: " + out_path);
                os = &fout;
            }
            char buf[64];
            for (const auto& [id, s] : ranked) {
                std::snprintf(buf, sizeof(buf), "%.9g", s);
                *os << id << '\t' << buf << '\n';
            }
            return 0;
        }
        if (bench->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            workload.seed = c.seed;
            hmat::ModelState model = hmat::init_model(model_config(c));
            seq::Vocab vocab = cfg::vocab_from_config(c);
            serve::BenchReport report =
                serve::bench_serving(model, vocab, workload);
            serve::write_bench_csv(report, workload, out_path);
            return 0;
        }
        if (run->parsed()) {
            cfg::PipelineConfig c = load_checked(config_path);
            cfg::RunManifest manifest = cfg::run_pipeline(c, out_dir);
            std::cout << "wrote " << manifest.artifacts.size()
                      << " artifacts to " << out_dir << '\n';
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

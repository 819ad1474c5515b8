// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <map>

#include "hisam/common.hpp"
#include "hisam/config.hpp"
#include "hisam/seqstream.hpp"
#include "hisam/serve.hpp"

namespace hisam::cfg {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "hisam 0.1.0";

}  // namespace

void write_codes_tsv(const std::vector<dmrq::ItemCodes>& codes,
                     const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write file: " + path);
    for (const auto& c : codes) {
        f << c.item_id << '\t';
        for (size_t k = 0; k < c.c_sh.size(); ++k)
            f << (k ? "," : "") << c.c_sh[k];
        f << '\t';
        for (size_t j = 0; j < c.c_sp.size(); ++j)
            f << (j ? "," : "") << c.c_sp[j];
        f << '\n';
    }
}

std::vector<dmrq::ItemCodes> load_codes_tsv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open file: " + path);
    std::vector<dmrq::ItemCodes> out;
    std::string line;
    int line_no = 0;
    auto parse_ints = [&](const std::string& field) {
        std::vector<int> v;
        if (field.empty()) return v;
        std::istringstream is(field);
        std::string p;
        while (std::getline(is, p, ',')) {
            try {
                v.push_back(std::stoi(p));
            } catch (const std::exception&) {
                throw ParseError(path + " line " + std::to_string(line_no) +
                                 ": bad code '" + p + "'");
            }
        }
        return v;
    };
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        size_t t1 = line.find('\t');
        size_t t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw ParseError(path + " line " + std::to_string(line_no) +
                             ": expected 3 tab-separated fields");
        dmrq::ItemCodes c;
        c.item_id = line.substr(0, t1);
        c.c_sh = parse_ints(line.substr(t1 + 1, t2 - t1 - 1));
        c.c_sp = parse_ints(line.substr(t2 + 1));
        out.push_back(std::move(c));
    }
    return out;
}

seq::Vocab vocab_from_config(const PipelineConfig& c) {
    seq::Vocab v;
    v.n_sh = c.dmrq.n_sh;
    v.n_m = c.synth.n_modalities;
    v.v = c.dmrq.v;
    v.n_actions = 2;  // synthetic corpus actions: {neg, pos}
    v.profile_buckets = c.model_profile_buckets;
    return v;
}

std::vector<seq::TokenStream> build_streams(
    const PipelineConfig& config, const std::vector<dmrq::ItemCodes>& codes,
    const std::vector<ingest::InteractionLog>& logs) {
    std::map<std::string, dmrq::ItemCodes> by_item;
    for (const auto& c : codes) by_item[c.item_id] = c;
    seq::Vocab vocab = vocab_from_config(config);
    std::vector<seq::TokenStream> streams;
    for (const auto& log : logs) {
        std::vector<std::pair<dmrq::ItemCodes, int>> history;
        for (const auto& e : log.events) {
            auto it = by_item.find(e.item_id);
            if (it == by_item.end())
                throw Error("build_streams: no codes for item '" + e.item_id +
                            "'");
            history.emplace_back(it->second, e.action_id);
        }
        streams.push_back(seq::truncate(
            seq::build_stream(
                seq::profile_bucket_ids(log.user_id, config.model_l_u, vocab),
                history, vocab),
            config.model_max_items));
    }
    return streams;
}

RunManifest run_pipeline(const PipelineConfig& caller_config,
                         const std::string& out_dir) {
    PipelineConfig config = caller_config;
    apply_derived_fields(config);
    auto violations = validate_config(config);
    if (!violations.empty()) {
        std::string msg = "run_pipeline: invalid config:";
        for (const auto& v : violations) msg += "\n  - " + v;
        throw ConfigError(msg);
    }
    fs::create_directories(out_dir);

    RunManifest manifest;
    manifest.version = kVersion;
    manifest.config_hash = config_hash(config);
    manifest.seed = config.seed;
    const std::string manifest_path = out_dir + "/manifest.txt";
    std::string stage = "synth";

    try {
        ingest::SyntheticData data = ingest::synth_corpus(config.synth);

        stage = "align";
        cga::AlignConfig ac;
        ac.d = config.align_d;
        ac.tau = config.align_tau;
        ac.anchor = config.align_anchor;
        ac.batch = config.align_batch;
        ac.lr = config.align_lr;
        ac.steps = config.align_steps;
        ac.seed = config.seed;
        cga::AlignResult align = cga::train_alignment(data.corpus, ac);
        const std::string heads_path = out_dir + "/align_heads.ckpt";
        cga::save_heads(align.heads, heads_path);
        manifest.artifacts.emplace_back("align_heads", heads_path);

        stage = "tokenize";
        dmrq::TrainResult dt = dmrq::train_dmrq(align.aligned, config.dmrq,
                                                config.synth.n_modalities);
        const std::string stack_path = out_dir + "/codebooks.cb";
        dmrq::save_stack(dt.stack, stack_path);
        manifest.artifacts.emplace_back("codebooks", stack_path);
        std::vector<dmrq::ItemCodes> codes =
            dmrq::tokenize(align.aligned, dt.stack);
        const std::string codes_path = out_dir + "/item_codes.tsv";
        write_codes_tsv(codes, codes_path);
        manifest.artifacts.emplace_back("item_codes", codes_path);

        stage = config.train.pt_steps > 0 ? "pretrain" : "sft";
        std::map<std::string, dmrq::ItemCodes> by_item;
        for (const auto& c : codes) by_item[c.item_id] = c;
        seq::Vocab vocab = vocab_from_config(config);
        std::vector<seq::TokenStream> streams =
            build_streams(config, codes, data.logs);
        hmat::ModelConfig mc;
        mc.width = config.model_width;
        mc.n_layers = config.model_layers;
        mc.n_q = config.model_n_q;
        mc.n_kv = config.model_n_kv;
        mc.vocab_size = vocab.size();
        mc.ffn_mult = config.model_ffn_mult;
        mc.b_inter = config.model_b_inter;
        mc.b_intra = config.model_b_intra;
        mc.seed = config.seed;
        hmat::ModelState model = hmat::init_model(mc);
        tev::TrainCurves curves =
            tev::train(model, streams, vocab, config.train);
        const std::string model_path = out_dir + "/model.ckpt";
        hmat::save_model(model, model_path);
        manifest.artifacts.emplace_back("model", model_path);
        if (!curves.pt.empty()) {
            const std::string p = out_dir + "/pt_curve.csv";
            tev::write_curve_csv(curves.pt, p);
            manifest.artifacts.emplace_back("pt_curve", p);
        }
        if (!curves.sft.empty()) {
            const std::string p = out_dir + "/sft_curve.csv";
            tev::write_curve_csv(curves.sft, p);
            manifest.artifacts.emplace_back("sft_curve", p);
        }

        stage = "eval";
        std::vector<tev::EvalRecord> records =
            tev::score_events(model, by_item, data.logs, vocab, config.eval);
        tev::Metrics metrics = tev::compute_metrics(
            records, data.logs, config.eval.cold_threshold);
        const std::string eval_path = out_dir + "/eval_metrics.csv";
        tev::write_metrics_csv(metrics, eval_path);
        manifest.artifacts.emplace_back("eval_metrics", eval_path);
    } catch (const std::exception& e) {
        manifest.failed_stage = stage;
        save_manifest(manifest, manifest_path);
        throw Error("pipeline stage '" + stage + "' failed: " + e.what());
    }

    save_manifest(manifest, manifest_path);
    return manifest;
}

}  // namespace hisam::cfg

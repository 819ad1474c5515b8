// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "hisam/common.hpp"

namespace hisam::cfg {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long to_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        long r = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" +
                          v + "'");
    }
}

double to_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" +
                          v + "'");
    }
}

bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" +
                      v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> parts;
    std::istringstream is(v);
    std::string p;
    while (std::getline(is, p, ',')) parts.push_back(trim(p));
    return parts;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
    PipelineConfig c;
    std::istringstream is(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": malformed section header '" + t + "'");
            section = t.substr(1, t.size() - 2);
            if (section != "run" && section != "synth" && section != "align" &&
                section != "dmrq" && section != "model" && section != "train" &&
                section != "eval" && section != "serve")
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": unknown section '" + section + "'");
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected 'key = value', got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        std::string full = section + "." + key;

        if (full == "run.seed") c.seed = static_cast<uint64_t>(to_int(val, full));
        else if (full == "synth.n_items") c.synth.n_items = static_cast<int>(to_int(val, full));
        else if (full == "synth.n_users") c.synth.n_users = static_cast<int>(to_int(val, full));
        else if (full == "synth.n_modalities") c.synth.n_modalities = static_cast<int>(to_int(val, full));
        else if (full == "synth.dims") {
            c.synth.dims.clear();
            for (const auto& p : split_commas(val))
                c.synth.dims.push_back(static_cast<int>(to_int(p, full)));
        } else if (full == "synth.cluster_count") c.synth.cluster_count = static_cast<int>(to_int(val, full));
        else if (full == "synth.noise_scale") c.synth.noise_scale = to_double(val, full);
        else if (full == "synth.action_rule") {
            c.synth.action_rule.clear();
            for (const auto& p : split_commas(val))
                c.synth.action_rule.push_back(to_double(p, full));
        } else if (full == "synth.events_per_user") c.synth.events_per_user = static_cast<int>(to_int(val, full));
        else if (full == "align.d") c.align_d = static_cast<int>(to_int(val, full));
        else if (full == "align.tau") c.align_tau = to_double(val, full);
        else if (full == "align.anchor") c.align_anchor = static_cast<int>(to_int(val, full));
        else if (full == "align.batch") c.align_batch = static_cast<int>(to_int(val, full));
        else if (full == "align.lr") c.align_lr = to_double(val, full);
        else if (full == "align.steps") c.align_steps = static_cast<int>(to_int(val, full));
        else if (full == "dmrq.n_sh") c.dmrq.n_sh = static_cast<int>(to_int(val, full));
        else if (full == "dmrq.v") c.dmrq.v = static_cast<int>(to_int(val, full));
        else if (full == "dmrq.h") c.dmrq.h = static_cast<int>(to_int(val, full));
        else if (full == "dmrq.beta") c.dmrq.beta = to_double(val, full);
        else if (full == "dmrq.lambda") c.dmrq.lambda = to_double(val, full);
        else if (full == "dmrq.gamma") c.dmrq.gamma = to_double(val, full);
        else if (full == "dmrq.learned_fuse") c.dmrq.learned_fuse = to_bool(val, full);
        else if (full == "dmrq.lr") c.dmrq.lr = to_double(val, full);
        else if (full == "dmrq.est_lr") c.dmrq.est_lr = to_double(val, full);
        else if (full == "dmrq.epochs") c.dmrq.epochs = static_cast<int>(to_int(val, full));
        else if (full == "dmrq.batch") c.dmrq.batch = static_cast<int>(to_int(val, full));
        else if (full == "dmrq.dead_reseed") c.dmrq.dead_reseed = to_bool(val, full);
        else if (full == "model.layers") c.model_layers = static_cast<int>(to_int(val, full));
        else if (full == "model.width") c.model_width = static_cast<int>(to_int(val, full));
        else if (full == "model.n_q") c.model_n_q = static_cast<int>(to_int(val, full));
        else if (full == "model.n_kv") c.model_n_kv = static_cast<int>(to_int(val, full));
        else if (full == "model.ffn_mult") c.model_ffn_mult = static_cast<int>(to_int(val, full));
        else if (full == "model.b_inter") c.model_b_inter = to_double(val, full);
        else if (full == "model.b_intra") c.model_b_intra = to_double(val, full);
        else if (full == "model.max_items") c.model_max_items = static_cast<int>(to_int(val, full));
        else if (full == "model.l_u") c.model_l_u = static_cast<int>(to_int(val, full));
        else if (full == "model.profile_buckets") c.model_profile_buckets = static_cast<int>(to_int(val, full));
        else if (full == "train.pt_steps") c.train.pt_steps = static_cast<int>(to_int(val, full));
        else if (full == "train.sft_steps") c.train.sft_steps = static_cast<int>(to_int(val, full));
        else if (full == "train.pt_lr") c.train.pt_lr = to_double(val, full);
        else if (full == "train.sft_lr") c.train.sft_lr = to_double(val, full);
        else if (full == "train.batch") c.train.batch = static_cast<int>(to_int(val, full));
        else if (full == "eval.positive_action") c.eval.positive_action = static_cast<int>(to_int(val, full));
        else if (full == "eval.min_history") c.eval.min_history = static_cast<int>(to_int(val, full));
        else if (full == "eval.cold_threshold") c.eval.cold_threshold = static_cast<int>(to_int(val, full));
        else if (full == "eval.negative_sampling") c.eval.negative_sampling = to_bool(val, full);
        else if (full == "serve.max_candidates") c.serve_max_candidates = static_cast<int>(to_int(val, full));
        else if (full == "serve.max_tokens") c.serve_max_tokens = static_cast<int>(to_int(val, full));
        else
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": unknown key '" + full + "'");
    }
    apply_derived_fields(c);
    return c;
}

void apply_derived_fields(PipelineConfig& c) {
    // All stage randomness flows from the single root seed.
    c.synth.seed = c.seed;
    c.dmrq.seed = c.seed;
    c.train.seed = c.seed;
    c.eval.seed = c.seed;
    // The quantizer operates in the aligned space.
    c.dmrq.d = c.align_d;
    c.eval.max_items = c.model_max_items;
    c.eval.l_u = c.model_l_u;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_config(os.str());
}

std::string serialize_config(const PipelineConfig& c) {
    std::ostringstream os;
    os << "[run]\n";
    os << "seed = " << c.seed << "\n\n";
    os << "[synth]\n";
    os << "n_items = " << c.synth.n_items << '\n';
    os << "n_users = " << c.synth.n_users << '\n';
    os << "n_modalities = " << c.synth.n_modalities << '\n';
    os << "dims = ";
    for (size_t i = 0; i < c.synth.dims.size(); ++i)
        os << (i ? "," : "") << c.synth.dims[i];
    os << '\n';
    os << "cluster_count = " << c.synth.cluster_count << '\n';
    os << "noise_scale = " << fmt_double(c.synth.noise_scale) << '\n';
    os << "action_rule = ";
    for (size_t i = 0; i < c.synth.action_rule.size(); ++i)
        os << (i ? "," : "") << fmt_double(c.synth.action_rule[i]);
    os << '\n';
    os << "events_per_user = " << c.synth.events_per_user << "\n\n";
    os << "[align]\n";
    os << "d = " << c.align_d << '\n';
    os << "tau = " << fmt_double(c.align_tau) << '\n';
    os << "anchor = " << c.align_anchor << '\n';
    os << "batch = " << c.align_batch << '\n';
    os << "lr = " << fmt_double(c.align_lr) << '\n';
    os << "steps = " << c.align_steps << "\n\n";
    os << "[dmrq]\n";
    os << "n_sh = " << c.dmrq.n_sh << '\n';
    os << "v = " << c.dmrq.v << '\n';
    os << "h = " << c.dmrq.h << '\n';
    os << "beta = " << fmt_double(c.dmrq.beta) << '\n';
    os << "lambda = " << fmt_double(c.dmrq.lambda) << '\n';
    os << "gamma = " << fmt_double(c.dmrq.gamma) << '\n';
    os << "learned_fuse = " << (c.dmrq.learned_fuse ? "true" : "false") << '\n';
    os << "lr = " << fmt_double(c.dmrq.lr) << '\n';
    os << "est_lr = " << fmt_double(c.dmrq.est_lr) << '\n';
    os << "epochs = " << c.dmrq.epochs << '\n';
    os << "batch = " << c.dmrq.batch << '\n';
    os << "dead_reseed = " << (c.dmrq.dead_reseed ? "true" : "false") << "\n\n";
    os << "[model]\n";
    os << "layers = " << c.model_layers << '\n';
    os << "width = " << c.model_width << '\n';
    os << "n_q = " << c.model_n_q << '\n';
    os << "n_kv = " << c.model_n_kv << '\n';
    os << "ffn_mult = " << c.model_ffn_mult << '\n';
    os << "b_inter = " << fmt_double(c.model_b_inter) << '\n';
    os << "b_intra = " << fmt_double(c.model_b_intra) << '\n';
    os << "max_items = " << c.model_max_items << '\n';
    os << "l_u = " << c.model_l_u << '\n';
    os << "profile_buckets = " << c.model_profile_buckets << "\n\n";
    os << "[train]\n";
    os << "pt_steps = " << c.train.pt_steps << '\n';
    os << "sft_steps = " << c.train.sft_steps << '\n';
    os << "pt_lr = " << fmt_double(c.train.pt_lr) << '\n';
    os << "sft_lr = " << fmt_double(c.train.sft_lr) << '\n';
    os << "batch = " << c.train.batch << "\n\n";
    os << "[eval]\n";
    os << "positive_action = " << c.eval.positive_action << '\n';
    os << "min_history = " << c.eval.min_history << '\n';
    os << "cold_threshold = " << c.eval.cold_threshold << '\n';
    os << "negative_sampling = "
       << (c.eval.negative_sampling ? "true" : "false") << "\n\n";
    os << "[serve]\n";
    os << "max_candidates = " << c.serve_max_candidates << '\n';
    os << "max_tokens = " << c.serve_max_tokens << '\n';
    return os.str();
}

void save_config(const PipelineConfig& config, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write file: " + path);
    f << serialize_config(config);
}

std::vector<std::string> validate_config(const PipelineConfig& c) {
    std::vector<std::string> v;
    auto bad = [&](const std::string& msg) { v.push_back(msg); };
    if (c.synth.n_modalities < 2) bad("synth.n_modalities must be >= 2");
    if (static_cast<int>(c.synth.dims.size()) != c.synth.n_modalities)
        bad("synth.dims must list one dimension per modality");
    for (int d : c.synth.dims)
        if (d < 1) bad("synth.dims entries must be >= 1");
    if (c.synth.cluster_count < 1) bad("synth.cluster_count must be >= 1");
    if (c.synth.action_rule.empty()) bad("synth.action_rule must be non-empty");
    for (double p : c.synth.action_rule)
        if (p < 0.0 || p > 1.0)
            bad("synth.action_rule entries must be probabilities in [0, 1]");
    if (c.synth.noise_scale < 0.0) bad("synth.noise_scale must be >= 0");
    if (c.align_tau <= 0.0) bad("align.tau must be > 0");
    if (c.align_d < 2) bad("align.d must be >= 2");
    if (c.align_anchor < 0 || c.align_anchor >= c.synth.n_modalities)
        bad("align.anchor must name a modality index");
    if (c.align_steps < 0) bad("align.steps must be >= 0");
    if (c.dmrq.n_sh < 1) bad("dmrq.n_sh must be >= 1");
    if (c.dmrq.v < 2) bad("dmrq.v must be >= 2");
    if (c.dmrq.h < 1 || c.align_d % c.dmrq.h != 0)
        bad("dmrq.h must divide align.d (H * d_h = d)");
    if (c.dmrq.beta < 0.0) bad("dmrq.beta must be >= 0");
    if (c.dmrq.lambda < 0.0) bad("dmrq.lambda must be >= 0");
    if (c.dmrq.gamma < 0.0) bad("dmrq.gamma must be >= 0");
    if (c.dmrq.epochs < 0) bad("dmrq.epochs must be >= 0");
    if (c.model_layers < 1) bad("model.layers must be >= 1");
    if (c.model_n_q < 1 || c.model_width % c.model_n_q != 0)
        bad("model.n_q must divide model.width");
    else if ((c.model_width / c.model_n_q) % 4 != 0)
        bad("head dim must be divisible by 4");
    if (c.model_n_kv < 1 || c.model_n_q % c.model_n_kv != 0)
        bad("model.n_kv must divide model.n_q");
    if (c.model_ffn_mult < 1) bad("model.ffn_mult must be >= 1");
    if (c.model_b_inter <= 0.0 || c.model_b_intra <= 0.0)
        bad("rotary bases must be > 0");
    if (c.model_max_items < 1) bad("model.max_items must be >= 1");
    if (c.model_l_u < 0) bad("model.l_u must be >= 0");
    if (c.model_profile_buckets < 1) bad("model.profile_buckets must be >= 1");
    if (c.train.pt_steps < 0 || c.train.sft_steps < 0)
        bad("train step counts must be >= 0");
    if (c.train.batch < 1) bad("train.batch must be >= 1");
    if (c.eval.min_history < 1) bad("eval.min_history must be >= 1");
    if (c.serve_max_candidates < 1) bad("serve.max_candidates must be >= 1");
    if (c.serve_max_tokens < 8) bad("serve.max_tokens must be >= 8");
    return v;
}

uint64_t config_hash(const PipelineConfig& config) {
    return fnv1a(serialize_config(config));
}

void save_manifest(const RunManifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write file: " + path);
    f << "HISAM-RUN v1\n";
    f << "version " << m.version << '\n';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(m.config_hash));
    f << "config_hash " << buf << '\n';
    f << "seed " << m.seed << '\n';
    if (!m.failed_stage.empty()) f << "failed_stage " << m.failed_stage << '\n';
    for (const auto& [name, p] : m.artifacts)
        f << "artifact " << name << ' ' << p << '\n';
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open file: " + path);
    std::string line;
    std::getline(f, line);
    if (line != "HISAM-RUN v1")
        throw ParseError(path + ": bad manifest magic");
    RunManifest m;
    while (std::getline(f, line)) {
        std::istringstream is(line);
        std::string tag;
        is >> tag;
        if (tag == "version") {
            std::string rest;
            std::getline(is, rest);
            m.version = trim(rest);
        } else if (tag == "config_hash") {
            std::string hex;
            is >> hex;
            m.config_hash = std::stoull(hex, nullptr, 16);
        } else if (tag == "seed") {
            is >> m.seed;
        } else if (tag == "failed_stage") {
            is >> m.failed_stage;
        } else if (tag == "artifact") {
            std::string name, p;
            is >> name >> p;
            m.artifacts.emplace_back(name, p);
        } else if (!tag.empty()) {
            throw ParseError(path + ": unknown manifest line '" + line + "'");
        }
    }
    return m;
}

}  // namespace hisam::cfg

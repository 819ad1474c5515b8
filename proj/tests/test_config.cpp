// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "hisam/common.hpp"
#include "hisam/config.hpp"
#include "test_util.hpp"

using namespace hisam;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
    fs::path dir = fs::temp_directory_path() / "hisam_config_tests";
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

// Small-but-complete configuration that runs the whole pipeline quickly.
cfg::PipelineConfig tiny_config() {
    cfg::PipelineConfig c;
    c.seed = 7;
    c.synth.n_items = 24;
    c.synth.n_users = 6;
    c.synth.dims = {8, 8};
    c.synth.events_per_user = 8;
    c.align_d = 8;
    c.align_batch = 8;
    c.align_steps = 8;
    c.dmrq.n_sh = 2;
    c.dmrq.v = 8;
    c.dmrq.h = 2;
    c.dmrq.lambda = 0.05;
    c.dmrq.epochs = 2;
    c.dmrq.batch = 16;
    c.model_layers = 1;
    c.model_width = 16;
    c.model_n_q = 2;
    c.model_n_kv = 1;
    c.model_ffn_mult = 2;
    c.model_max_items = 4;
    c.model_l_u = 2;
    c.model_profile_buckets = 8;
    c.train.pt_steps = 2;
    c.train.sft_steps = 2;
    c.train.batch = 4;
    return c;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("serialization round-trips losslessly") {
    cfg::PipelineConfig c = tiny_config();
    c.align_tau = 0.07;          // not exactly representable
    c.dmrq.gamma = 0.3333333333333333;
    std::string text = cfg::serialize_config(c);
    cfg::PipelineConfig parsed = cfg::parse_config(text);
    CHECK(cfg::serialize_config(parsed) == text);
    CHECK(cfg::config_hash(parsed) == cfg::config_hash(c));

    SUBCASE("derived fields flow from the root seed and aligned dim") {
        CHECK(parsed.synth.seed == c.seed);
        CHECK(parsed.dmrq.seed == c.seed);
        CHECK(parsed.train.seed == c.seed);
        CHECK(parsed.eval.seed == c.seed);
        CHECK(parsed.dmrq.d == c.align_d);
        CHECK(parsed.eval.max_items == c.model_max_items);
        CHECK(parsed.eval.l_u == c.model_l_u);
    }
    SUBCASE("different configs hash differently") {
        cfg::PipelineConfig c2 = c;
        c2.seed = 8;
        CHECK(cfg::config_hash(c2) != cfg::config_hash(c));
    }
}

TEST_CASE("parser rejects unknown content with line numbers") {
    SUBCASE("unknown key") {
        try {
            (void)cfg::parse_config("[run]\nseed = 1\nbogus_key = 3\n");
            FAIL("expected a config error");
        } catch (const ConfigError& e) {
            std::string msg = e.what();
            CHECK(msg.find("line 3") != std::string::npos);
            CHECK(msg.find("bogus_key") != std::string::npos);
        }
    }
    SUBCASE("unknown section") {
        CHECK_THROWS_AS((void)cfg::parse_config("[mystery]\nx = 1\n"),
                        ConfigError);
    }
    SUBCASE("malformed line and bad types") {
        CHECK_THROWS_AS((void)cfg::parse_config("[run]\nno equals sign\n"),
                        ConfigError);
        CHECK_THROWS_AS((void)cfg::parse_config("[run]\nseed = banana\n"),
                        ConfigError);
        CHECK_THROWS_AS(
            (void)cfg::parse_config("[dmrq]\nlearned_fuse = maybe\n"),
            ConfigError);
    }
    SUBCASE("comments and blank lines are fine") {
        cfg::PipelineConfig c =
            cfg::parse_config("# comment\n\n[run]\n; other comment\nseed = 5\n");
        CHECK(c.seed == 5);
    }
}

TEST_CASE("validation reports cross-module violations") {
    CHECK(cfg::validate_config(tiny_config()).empty());

    cfg::PipelineConfig bad = tiny_config();
    bad.model_width = 48;  // head dim 6 with n_q = 8
    bad.model_n_q = 8;
    bad.model_n_kv = 2;
    bad.dmrq.h = 5;        // does not divide align_d = 8
    bad.dmrq.beta = -1.0;
    bad.align_tau = 0.0;
    auto v = cfg::validate_config(bad);
    auto has = [&](const std::string& needle) {
        return std::any_of(v.begin(), v.end(), [&](const std::string& s) {
            return s.find(needle) != std::string::npos;
        });
    };
    CHECK(has("head dim must be divisible by 4"));
    CHECK(has("dmrq.h must divide align.d"));
    CHECK(has("dmrq.beta must be >= 0"));
    CHECK(has("align.tau must be > 0"));
}

TEST_CASE("manifests round-trip") {
    cfg::RunManifest m;
    m.version = "hisam 0.1.0";
    m.config_hash = 0xdeadbeefcafef00dULL;
    m.seed = 42;
    m.artifacts = {{"model", "/tmp/a/model.ckpt"}, {"codes", "/tmp/a/c.tsv"}};
    std::string path = (test_dir() / "manifest.txt").string();
    cfg::save_manifest(m, path);
    cfg::RunManifest l = cfg::load_manifest(path);
    CHECK(l.version == m.version);
    CHECK(l.config_hash == m.config_hash);
    CHECK(l.seed == m.seed);
    CHECK(l.artifacts == m.artifacts);
    CHECK(l.failed_stage.empty());

    m.failed_stage = "tokenize";
    cfg::save_manifest(m, path);
    CHECK(cfg::load_manifest(path).failed_stage == "tokenize");
}

TEST_CASE("item code tables round-trip through TSV") {
    std::vector<dmrq::ItemCodes> codes(2);
    codes[0].item_id = "alpha";
    codes[0].c_sh = {1, 2, 3};
    codes[0].c_sp = {4, 5};
    codes[1].item_id = "beta";
    codes[1].c_sh = {0, 0, 7};
    codes[1].c_sp = {1, 6};
    std::string path = (test_dir() / "codes.tsv").string();
    cfg::write_codes_tsv(codes, path);
    auto loaded = cfg::load_codes_tsv(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].item_id == "alpha");
    CHECK(loaded[0].c_sh == codes[0].c_sh);
    CHECK(loaded[0].c_sp == codes[0].c_sp);
    CHECK(loaded[1].c_sh == codes[1].c_sh);

    std::string bad = (test_dir() / "bad.tsv").string();
    std::ofstream(bad) << "only_one_field\n";
    CHECK_THROWS_AS((void)cfg::load_codes_tsv(bad), ParseError);
}

TEST_CASE("vocabulary layout follows the configuration") {
    cfg::PipelineConfig c = tiny_config();
    seq::Vocab v = cfg::vocab_from_config(c);
    CHECK(v.n_sh == c.dmrq.n_sh);
    CHECK(v.n_m == c.synth.n_modalities);
    CHECK(v.v == c.dmrq.v);
    CHECK(v.n_actions == 2);
    CHECK(v.profile_buckets == c.model_profile_buckets);
}

TEST_CASE("the full pipeline produces reproducible artifacts") {
    cfg::PipelineConfig c = tiny_config();
    fs::path d1 = test_dir() / "run1";
    fs::path d2 = test_dir() / "run2";
    fs::remove_all(d1);
    fs::remove_all(d2);

    cfg::RunManifest m1 = cfg::run_pipeline(c, d1.string());
    CHECK(m1.failed_stage.empty());
    CHECK(m1.config_hash == cfg::config_hash(c));
    std::vector<std::string> names;
    for (const auto& [name, path] : m1.artifacts) {
        names.push_back(name);
        CHECK(fs::exists(path));
    }
    for (const char* need : {"align_heads", "codebooks", "item_codes", "model",
                             "eval_metrics"})
        CHECK(std::find(names.begin(), names.end(), need) != names.end());
    CHECK(fs::exists(d1 / "manifest.txt"));

    SUBCASE("a second run with the same config is byte-identical") {
        cfg::RunManifest m2 = cfg::run_pipeline(c, d2.string());
        REQUIRE(m2.artifacts.size() == m1.artifacts.size());
        for (size_t i = 0; i < m1.artifacts.size(); ++i) {
            CHECK(m2.artifacts[i].first == m1.artifacts[i].first);
            CHECK(slurp(m2.artifacts[i].second) ==
                  slurp(m1.artifacts[i].second));
        }
    }
}

TEST_CASE("an untrained model evaluates near chance") {
    cfg::PipelineConfig c = tiny_config();
    c.synth.n_users = 24;
    c.synth.events_per_user = 12;
    c.train.pt_steps = 0;
    c.train.sft_steps = 0;
    fs::path d = test_dir() / "untrained";
    fs::remove_all(d);
    cfg::RunManifest m = cfg::run_pipeline(c, d.string());

    double auc_value = -1.0;
    std::ifstream f((d / "eval_metrics.csv").string());
    std::string line;
    while (std::getline(f, line))
        if (line.rfind("auc,", 0) == 0)
            auc_value = std::stod(line.substr(4));
    REQUIRE(auc_value >= 0.0);
    // An untrained model is an arbitrary fixed scorer, so its AUC sits in a
    // band around chance rather than at exactly 0.5.
    CHECK(auc_value > 0.25);
    CHECK(auc_value < 0.75);
    bool has_curve = false;
    for (const auto& [name, path] : m.artifacts)
        if (name == "pt_curve" || name == "sft_curve") has_curve = true;
    CHECK(!has_curve);
}

TEST_CASE("a failing stage is recorded in a partial manifest") {
    cfg::PipelineConfig c = tiny_config();
    c.synth.action_rule = {1.0, 1.0};  // every event gets the same action,
                                       // so AUC in the eval stage throws
    fs::path d = test_dir() / "failing";
    fs::remove_all(d);
    try {
        (void)cfg::run_pipeline(c, d.string());
        FAIL("expected the eval stage to fail");
    } catch (const Error& e) {
        std::string msg = e.what();
        CHECK(msg.find("pipeline stage 'eval' failed") != std::string::npos);
    }
    cfg::RunManifest m = cfg::load_manifest((d / "manifest.txt").string());
    CHECK(m.failed_stage == "eval");
    CHECK(!m.artifacts.empty());  // stages before the failure kept their output

    SUBCASE("invalid configs are rejected before any stage runs") {
        cfg::PipelineConfig bad = tiny_config();
        bad.dmrq.beta = -1.0;
        CHECK_THROWS_AS(
            (void)cfg::run_pipeline(bad, (test_dir() / "never").string()),
            ConfigError);
    }
}

}  // TEST_SUITE

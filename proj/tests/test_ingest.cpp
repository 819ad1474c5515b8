// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hisam/common.hpp"
#include "hisam/ingest.hpp"
#include "test_util.hpp"

using namespace hisam;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "hisam_ingest_tests";
    fs::create_directories(dir);
    return (dir / name).string();
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    f << body;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

ingest::Corpus small_corpus() {
    ingest::Corpus c;
    c.dims = {4, 8};
    for (int i = 0; i < 3; ++i) {
        ingest::RawItemRecord rec;
        rec.item_id = "item" + std::to_string(i);
        Eigen::VectorXd a(4), b(8);
        for (int j = 0; j < 4; ++j) a(j) = 0.25 * (i + 1) * (j + 1);
        for (int j = 0; j < 8; ++j) b(j) = -0.125 * (i + 1) * (j + 1);
        rec.vectors = {a, b};
        c.items.push_back(rec);
    }
    c.rebuild_index();
    return c;
}

}  // namespace

TEST_SUITE("ingest") {

TEST_CASE("embeddings binary round-trip is byte-exact") {
    ingest::Corpus c = small_corpus();
    auto p1 = tmp_path("rt1.emb");
    auto p2 = tmp_path("rt2.emb");
    ingest::write_embeddings(c, p1, /*binary=*/true);
    ingest::Corpus loaded = ingest::load_embeddings(p1);
    REQUIRE(loaded.items.size() == 3);
    CHECK(loaded.dims == std::vector<int>({4, 8}));
    CHECK(loaded.items[1].vectors[0].size() == 4);
    CHECK(loaded.items[1].vectors[1].size() == 8);
    ingest::write_embeddings(loaded, p2, /*binary=*/true);
    CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("embeddings text body loads identically to binary") {
    ingest::Corpus c = small_corpus();
    auto pb = tmp_path("fmt.bin.emb");
    auto pt = tmp_path("fmt.txt.emb");
    ingest::write_embeddings(c, pb, true);
    ingest::write_embeddings(c, pt, false);
    ingest::Corpus cb = ingest::load_embeddings(pb);
    ingest::Corpus ct = ingest::load_embeddings(pt);
    REQUIRE(cb.items.size() == ct.items.size());
    for (size_t i = 0; i < cb.items.size(); ++i)
        for (size_t j = 0; j < 2; ++j)
            CHECK((cb.items[i].vectors[j] - ct.items[i].vectors[j])
                      .cwiseAbs()
                      .maxCoeff() < 1e-6);
}

TEST_CASE("embeddings: empty body with valid header gives empty corpus") {
    auto p = tmp_path("empty.emb");
    write_text(p, "HISAM-EMB v1 0 2 4 8\n");
    ingest::Corpus c = ingest::load_embeddings(p);
    CHECK(c.items.empty());
    CHECK(c.dims == std::vector<int>({4, 8}));
}

TEST_CASE("embeddings: short row and bad header are parse errors") {
    auto p = tmp_path("short.emb");
    write_text(p, "HISAM-EMB v1 1 2 2 2\nitemA 1.0 2.0 3.0\n");
    CHECK_THROWS_AS((void)ingest::load_embeddings(p), ParseError);
    auto p2 = tmp_path("magic.emb");
    write_text(p2, "NOT-A-HEADER\n");
    CHECK_THROWS_AS((void)ingest::load_embeddings(p2), ParseError);
    auto p3 = tmp_path("nonfinite.emb");
    write_text(p3, "HISAM-EMB v1 1 2 2 2\nitemA 1.0 2.0 nan 4.0\n");
    CHECK_THROWS_AS((void)ingest::load_embeddings(p3), ParseError);
}

TEST_CASE("interactions: ordered load, sort flag, and rejection") {
    ingest::ActionVocab actions;
    actions.names = {"neg", "pos"};
    std::unordered_set<std::string> known = {"a", "b", "c"};

    auto p = tmp_path("inter.tsv");
    write_text(p, "u1\ta\tpos\t1\nu1\tb\tneg\t2\nu1\tc\tpos\t3\n");
    auto logs = ingest::load_interactions(p, actions, known);
    REQUIRE(logs.size() == 1);
    CHECK(logs[0].events.size() == 3);
    CHECK(logs[0].events[1].action_id == 0);

    auto p2 = tmp_path("ooo.tsv");
    write_text(p2, "u1\ta\tpos\t5\nu1\tb\tneg\t2\n");
    CHECK_THROWS_AS(
        (void)ingest::load_interactions(p2, actions, known), ParseError);
    ingest::LoadInteractionOptions opts;
    opts.sort_by_timestamp = true;
    auto sorted = ingest::load_interactions(p2, actions, known, opts);
    CHECK(sorted[0].events[0].item_id == "b");

    auto p3 = tmp_path("unknown_item.tsv");
    write_text(p3, "u1\tzz\tpos\t1\n");
    try {
        (void)ingest::load_interactions(p3, actions, known);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("zz") != std::string::npos);
    }

    auto p4 = tmp_path("unknown_action.tsv");
    write_text(p4, "u1\ta\tmaybe\t1\n");
    CHECK_THROWS_AS(
        (void)ingest::load_interactions(p4, actions, known), ParseError);
}

TEST_CASE("action vocab round-trips") {
    ingest::ActionVocab v;
    v.names = {"neg", "pos", "share"};
    auto p = tmp_path("actions.txt");
    ingest::write_action_vocab(v, p);
    ingest::ActionVocab l = ingest::load_action_vocab(p);
    CHECK(l.names == v.names);
    CHECK(l.id("share") == 2);
    CHECK(l.id("unknown") == -1);
}

TEST_CASE("synth corpus is deterministic") {
    ingest::SyntheticSpec spec;
    spec.n_items = 40;
    spec.n_users = 5;
    spec.seed = 99;
    ingest::SyntheticData d1 = ingest::synth_corpus(spec);
    ingest::SyntheticData d2 = ingest::synth_corpus(spec);
    REQUIRE(d1.corpus.items.size() == d2.corpus.items.size());
    for (size_t i = 0; i < d1.corpus.items.size(); ++i)
        for (int j = 0; j < 2; ++j)
            CHECK(d1.corpus.items[i].vectors[j] ==
                  d2.corpus.items[i].vectors[j]);
    CHECK(d1.item_cluster == d2.item_cluster);
    for (size_t u = 0; u < d1.logs.size(); ++u) {
        REQUIRE(d1.logs[u].events.size() == d2.logs[u].events.size());
        for (size_t e = 0; e < d1.logs[u].events.size(); ++e) {
            CHECK(d1.logs[u].events[e].item_id ==
                  d2.logs[u].events[e].item_id);
            CHECK(d1.logs[u].events[e].action_id ==
                  d2.logs[u].events[e].action_id);
        }
    }
}

TEST_CASE("zero noise collapses clusters; nearest centroid recovers labels") {
    ingest::SyntheticSpec spec;
    spec.n_items = 400;
    spec.n_users = 2;
    spec.cluster_count = 4;
    spec.noise_scale = 0.0;
    spec.seed = 3;
    ingest::SyntheticData d = ingest::synth_corpus(spec);

    // Identical vectors within a cluster.
    std::vector<int> first_of(4, -1);
    for (size_t i = 0; i < d.corpus.items.size(); ++i) {
        int c = d.item_cluster[i];
        if (first_of[static_cast<size_t>(c)] < 0) {
            first_of[static_cast<size_t>(c)] = static_cast<int>(i);
            continue;
        }
        const auto& ref =
            d.corpus.items[static_cast<size_t>(first_of[static_cast<size_t>(c)])];
        for (int j = 0; j < 2; ++j)
            CHECK((d.corpus.items[i].vectors[j] - ref.vectors[j])
                      .cwiseAbs()
                      .maxCoeff() < 1e-12);
    }

    // Nearest-centroid on modality 0 recovers every label.
    std::vector<Eigen::VectorXd> centroid(4, Eigen::VectorXd::Zero(16));
    std::vector<int> count(4, 0);
    for (size_t i = 0; i < d.corpus.items.size(); ++i) {
        centroid[static_cast<size_t>(d.item_cluster[i])] +=
            d.corpus.items[i].vectors[0];
        count[static_cast<size_t>(d.item_cluster[i])]++;
    }
    for (int c = 0; c < 4; ++c)
        if (count[static_cast<size_t>(c)])
            centroid[static_cast<size_t>(c)] /= count[static_cast<size_t>(c)];
    int correct = 0;
    for (size_t i = 0; i < d.corpus.items.size(); ++i) {
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < 4; ++c) {
            double dist =
                (d.corpus.items[i].vectors[0] - centroid[static_cast<size_t>(c)])
                    .squaredNorm();
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        if (best == d.item_cluster[i]) ++correct;
    }
    CHECK(correct == static_cast<int>(d.corpus.items.size()));
}

TEST_CASE("planted action rule is deterministic per cluster") {
    ingest::SyntheticSpec spec;
    spec.n_items = 60;
    spec.n_users = 6;
    spec.seed = 5;  // default rule: even clusters positive
    ingest::SyntheticData d = ingest::synth_corpus(spec);
    CHECK(d.actions.names == std::vector<std::string>({"neg", "pos"}));
    for (const auto& log : d.logs) {
        int64_t last_ts = -1;
        for (const auto& e : log.events) {
            CHECK(e.timestamp >= last_ts);
            last_ts = e.timestamp;
            int idx = d.corpus.index.at(e.item_id);
            int cluster = d.item_cluster[static_cast<size_t>(idx)];
            CHECK(e.action_id == (cluster % 2 == 0 ? 1 : 0));
        }
    }
}

TEST_CASE("interactions write/load round-trip") {
    ingest::ActionVocab actions;
    actions.names = {"neg", "pos"};
    std::vector<ingest::InteractionLog> logs(1);
    logs[0].user_id = "u7";
    logs[0].events = {{"a", 1, 10}, {"b", 0, 11}};
    auto p = tmp_path("rt_inter.tsv");
    ingest::write_interactions(logs, actions, p);
    std::unordered_set<std::string> known = {"a", "b"};
    auto loaded = ingest::load_interactions(p, actions, known);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].events[0].item_id == "a");
    CHECK(loaded[0].events[1].action_id == 0);
    CHECK(loaded[0].events[1].timestamp == 11);
}

}  // TEST_SUITE

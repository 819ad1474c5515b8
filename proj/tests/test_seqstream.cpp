// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sstream>

#include "hisam/common.hpp"
#include "hisam/seqstream.hpp"
#include "test_util.hpp"

using namespace hisam;

namespace {

seq::Vocab test_vocab() {
    seq::Vocab v;
    v.n_sh = 4;
    v.n_m = 2;
    v.v = 8;
    v.n_actions = 2;
    v.profile_buckets = 16;
    return v;
}

dmrq::ItemCodes item_with(std::vector<int> sh, std::vector<int> sp,
                          const std::string& id = "item") {
    dmrq::ItemCodes c;
    c.item_id = id;
    c.c_sh = std::move(sh);
    c.c_sp = std::move(sp);
    return c;
}

// L_u = 6 profile, two items of L_i = 6 codes each.
seq::TokenStream two_item_stream(const seq::Vocab& vocab) {
    std::vector<int> profile;
    for (int i = 0; i < 6; ++i) profile.push_back(vocab.profile_id(i));
    std::vector<std::pair<dmrq::ItemCodes, int>> hist;
    hist.emplace_back(item_with({1, 2, 3, 4}, {5, 6}, "a"), 1);
    hist.emplace_back(item_with({7, 0, 1, 2}, {3, 4}, "b"), 0);
    return seq::build_stream(profile, hist, vocab);
}

}  // namespace

TEST_SUITE("seqstream") {

TEST_CASE("vocabulary layout is disjoint and complete") {
    seq::Vocab v = test_vocab();
    CHECK(v.pad_id() == 0);
    CHECK(v.shared_id(0, 0) == 1);
    CHECK(v.shared_id(1, 0) == 1 + 8);
    CHECK(v.shared_id(3, 7) == 1 + 3 * 8 + 7);
    CHECK(v.specific_id(0, 0) == 1 + 4 * 8);
    CHECK(v.specific_id(1, 3) == 1 + 5 * 8 + 3);
    CHECK(v.anchor_id() == 1 + 6 * 8);
    CHECK(v.action_id(0) == v.anchor_id() + 1);
    CHECK(v.action_id(1) == v.anchor_id() + 2);
    CHECK(v.profile_id(0) == v.action_id(1) + 1);
    CHECK(v.size() == 1 + 6 * 8 + 1 + 2 + 16);
    CHECK(v.profile_id(15) == v.size() - 1);

    CHECK_THROWS_AS((void)v.shared_id(4, 0), Error);
    CHECK_THROWS_AS((void)v.shared_id(0, 8), Error);
    CHECK_THROWS_AS((void)v.specific_id(2, 0), Error);
    CHECK_THROWS_AS((void)v.action_id(2), Error);
    CHECK_THROWS_AS((void)v.profile_id(16), Error);
}

TEST_CASE("item token ids follow shared-then-specific order") {
    seq::Vocab v = test_vocab();
    auto ids = seq::item_token_ids(item_with({1, 2, 3, 4}, {5, 6}), v);
    REQUIRE(ids.size() == 6);
    CHECK(ids[0] == v.shared_id(0, 1));
    CHECK(ids[3] == v.shared_id(3, 4));
    CHECK(ids[4] == v.specific_id(0, 5));
    CHECK(ids[5] == v.specific_id(1, 6));

    CHECK_THROWS_AS((void)seq::item_token_ids(item_with({}, {}), v), Error);
    CHECK_THROWS_AS((void)seq::item_token_ids(item_with({99, 0, 0, 0}, {0, 0}), v),
                    Error);
}

TEST_CASE("profile buckets are deterministic and in range") {
    seq::Vocab v = test_vocab();
    auto a = seq::profile_bucket_ids("user-42", 6, v);
    auto b = seq::profile_bucket_ids("user-42", 6, v);
    auto c = seq::profile_bucket_ids("user-43", 6, v);
    REQUIRE(a.size() == 6);
    CHECK(a == b);
    CHECK(a != c);
    for (int id : a) {
        CHECK(id >= v.profile_base());
        CHECK(id < v.size());
    }
}

TEST_CASE("two-item stream has the documented shape") {
    seq::Vocab v = test_vocab();
    seq::TokenStream s = two_item_stream(v);

    REQUIRE(s.tokens.size() == 22);
    CHECK(s.anchor_positions == std::vector<int>({12, 20}));
    CHECK(s.action_positions == std::vector<int>({13, 21}));

    for (int i = 0; i < 6; ++i) {
        CHECK(s.tokens[static_cast<size_t>(i)].kind ==
              seq::TokenKind::ProfileCode);
        CHECK(s.tokens[static_cast<size_t>(i)].m == 0);
        CHECK(s.tokens[static_cast<size_t>(i)].n == i + 1);
    }
    // Item 1: codes at 6..11 (n = 1..6), anchor at (m,n) = (1,7).
    for (int i = 6; i < 12; ++i) {
        CHECK(s.tokens[static_cast<size_t>(i)].kind == seq::TokenKind::ItemCode);
        CHECK(s.tokens[static_cast<size_t>(i)].m == 1);
        CHECK(s.tokens[static_cast<size_t>(i)].n == i - 5);
    }
    CHECK(s.tokens[12].kind == seq::TokenKind::Anchor);
    CHECK(s.tokens[12].vocab_id == v.anchor_id());
    CHECK(s.tokens[12].m == 1);
    CHECK(s.tokens[12].n == 7);
    CHECK(s.tokens[13].kind == seq::TokenKind::Action);
    CHECK(s.tokens[13].vocab_id == v.action_id(1));
    CHECK(s.tokens[13].n == 8);
    CHECK(s.tokens[20].m == 2);
    CHECK(s.tokens[20].n == 7);
    CHECK(s.tokens[21].vocab_id == v.action_id(0));

    // Anchor and action counts both equal the item count.
    CHECK(s.anchor_positions.size() == 2);
    CHECK(s.action_positions.size() == 2);

    SUBCASE("empty history is a profile-only stream") {
        std::vector<int> profile = {v.profile_id(0), v.profile_id(1)};
        seq::TokenStream e = seq::build_stream(profile, {}, v);
        CHECK(e.tokens.size() == 2);
        CHECK(e.anchor_positions.empty());
        CHECK(e.action_positions.empty());
    }
    SUBCASE("an item with no codes is rejected") {
        std::vector<std::pair<dmrq::ItemCodes, int>> hist;
        hist.emplace_back(item_with({}, {}), 0);
        CHECK_THROWS_AS((void)seq::build_stream({v.profile_id(0)}, hist, v),
                        Error);
    }
}

TEST_CASE("truncation keeps the suffix and renumbers segments") {
    seq::Vocab v = test_vocab();
    seq::TokenStream s = two_item_stream(v);

    SUBCASE("large budget is a no-op") {
        seq::TokenStream t = seq::truncate(s, 2);
        CHECK(seq::dump_stream(t) == seq::dump_stream(s));
        seq::TokenStream t5 = seq::truncate(s, 5);
        CHECK(seq::dump_stream(t5) == seq::dump_stream(s));
    }
    SUBCASE("zero budget keeps only the profile") {
        seq::TokenStream t = seq::truncate(s, 0);
        CHECK(t.tokens.size() == 6);
        CHECK(t.anchor_positions.empty());
    }
    SUBCASE("budget of one keeps the last segment renumbered to m=1") {
        seq::TokenStream t = seq::truncate(s, 1);
        REQUIRE(t.tokens.size() == 14);
        CHECK(t.anchor_positions == std::vector<int>({12}));
        CHECK(t.action_positions == std::vector<int>({13}));
        for (size_t i = 6; i < 14; ++i) CHECK(t.tokens[i].m == 1);
        // Token identities are the second segment of the original stream.
        for (size_t i = 0; i < 8; ++i)
            CHECK(t.tokens[6 + i].vocab_id == s.tokens[14 + i].vocab_id);
        CHECK(t.tokens[12].n == 7);
    }
}

TEST_CASE("random histories survive a build/recover round trip") {
    seq::Vocab v = test_vocab();
    Rng rng(171);
    for (int trial = 0; trial < 20; ++trial) {
        int l_u = 1 + static_cast<int>(rng.uniform_int(6));
        int n_items = static_cast<int>(rng.uniform_int(6));
        std::vector<int> profile;
        for (int i = 0; i < l_u; ++i)
            profile.push_back(
                v.profile_id(static_cast<int>(rng.uniform_int(16))));
        std::vector<std::pair<dmrq::ItemCodes, int>> hist;
        for (int t = 0; t < n_items; ++t) {
            std::vector<int> sh, sp;
            for (int k = 0; k < 4; ++k)
                sh.push_back(static_cast<int>(rng.uniform_int(8)));
            for (int j = 0; j < 2; ++j)
                sp.push_back(static_cast<int>(rng.uniform_int(8)));
            hist.emplace_back(item_with(sh, sp),
                              static_cast<int>(rng.uniform_int(2)));
        }
        seq::TokenStream s = seq::build_stream(profile, hist, v);
        seq::RecoveredHistory r = seq::recover_history(s, v);
        CHECK(r.profile_ids == profile);
        REQUIRE(r.c_sh.size() == hist.size());
        for (size_t t = 0; t < hist.size(); ++t) {
            CHECK(r.c_sh[t] == hist[t].first.c_sh);
            CHECK(r.c_sp[t] == hist[t].first.c_sp);
            CHECK(r.actions[t] == hist[t].second);
        }
    }
}

TEST_CASE("stream dump is one `idx kind vocab_id m n` line per token") {
    seq::Vocab v = test_vocab();
    std::vector<std::pair<dmrq::ItemCodes, int>> hist;
    hist.emplace_back(item_with({1, 2, 3, 4}, {5, 6}), 1);
    seq::TokenStream s = seq::build_stream({v.profile_id(3)}, hist, v);
    std::istringstream in(seq::dump_stream(s));
    std::string line;
    REQUIRE(std::getline(in, line));
    std::ostringstream want;
    want << "0 profile " << v.profile_id(3) << " 0 1";
    CHECK(line == want.str());
    int count = 1;
    std::string last;
    while (std::getline(in, line))
        if (!line.empty()) {
            ++count;
            last = line;
        }
    CHECK(count == 9);
    std::ostringstream want_last;
    want_last << "8 action " << v.action_id(1) << " 1 8";
    CHECK(last == want_last.str());
}

}  // TEST_SUITE

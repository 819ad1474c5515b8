// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/seqstream.hpp"

#include <algorithm>
#include <sstream>

#include "hisam/common.hpp"

namespace hisam::seq {

const char* kind_name(TokenKind k) {
    switch (k) {
        case TokenKind::ProfileCode: return "profile";
        case TokenKind::ItemCode: return "code";
        case TokenKind::Anchor: return "anchor";
        case TokenKind::Action: return "action";
    }
    return "?";
}

namespace {

void check_code(int code, int v, const char* what) {
    if (code < 0 || code >= v)
        throw Error(std::string("vocab: ") + what + " code " +
                    std::to_string(code) + " out of range [0, " +
                    std::to_string(v) + ")");
}

}  // namespace

int Vocab::shared_id(int layer, int code) const {
    if (layer < 0 || layer >= n_sh)
        throw Error("vocab: shared layer out of range");
    check_code(code, v, "shared");
    return 1 + layer * v + code;
}

int Vocab::specific_id(int modality, int code) const {
    if (modality < 0 || modality >= n_m)
        throw Error("vocab: modality out of range");
    check_code(code, v, "specific");
    return 1 + (n_sh + modality) * v + code;
}

int Vocab::action_id(int action) const {
    if (action < 0 || action >= n_actions)
        throw Error("vocab: action id " + std::to_string(action) +
                    " out of range [0, " + std::to_string(n_actions) + ")");
    return action_base() + action;
}

int Vocab::profile_id(int bucket) const {
    if (bucket < 0 || bucket >= profile_buckets)
        throw Error("vocab: profile bucket out of range");
    return profile_base() + bucket;
}

std::vector<int> item_token_ids(const dmrq::ItemCodes& codes,
                                const Vocab& vocab) {
    if (codes.c_sh.empty() && codes.c_sp.empty())
        throw Error("build_stream: item '" + codes.item_id + "' has 0 codes");
    std::vector<int> ids;
    for (size_t k = 0; k < codes.c_sh.size(); ++k)
        ids.push_back(vocab.shared_id(static_cast<int>(k), codes.c_sh[k]));
    for (size_t j = 0; j < codes.c_sp.size(); ++j)
        ids.push_back(vocab.specific_id(static_cast<int>(j), codes.c_sp[j]));
    return ids;
}

std::vector<int> profile_bucket_ids(const std::string& user_id, int l_u,
                                    const Vocab& vocab) {
    std::vector<int> ids;
    for (int s = 0; s < l_u; ++s) {
        uint64_t h = fnv1a(user_id + "#" + std::to_string(s));
        ids.push_back(vocab.profile_id(
            static_cast<int>(h % static_cast<uint64_t>(vocab.profile_buckets))));
    }
    return ids;
}

TokenStream build_stream(
    const std::vector<int>& profile_ids,
    const std::vector<std::pair<dmrq::ItemCodes, int>>& history,
    const Vocab& vocab) {
    TokenStream s;
    int n = 1;
    for (int id : profile_ids)
        s.tokens.push_back({id, TokenKind::ProfileCode, 0, n++});
    int m = 1;
    for (const auto& [codes, action] : history) {
        auto ids = item_token_ids(codes, vocab);
        int local = 1;
        for (int id : ids)
            s.tokens.push_back({id, TokenKind::ItemCode, m, local++});
        s.anchor_positions.push_back(static_cast<int>(s.tokens.size()));
        s.tokens.push_back({vocab.anchor_id(), TokenKind::Anchor, m, local++});
        s.action_positions.push_back(static_cast<int>(s.tokens.size()));
        s.tokens.push_back(
            {vocab.action_id(action), TokenKind::Action, m, local});
        ++m;
    }
    return s;
}

TokenStream build_stream(
    const dmrq::ItemCodes& user_codes,
    const std::vector<std::pair<dmrq::ItemCodes, int>>& history,
    const Vocab& vocab) {
    std::vector<int> profile = item_token_ids(user_codes, vocab);
    TokenStream s = build_stream(profile, history, vocab);
    for (auto& t : s.tokens)
        if (t.m == 0) t.kind = TokenKind::ProfileCode;
    return s;
}

TokenStream truncate(const TokenStream& stream, int max_items) {
    if (max_items < 0) throw Error("truncate: max_items must be >= 0");
    int n_items = 0;
    for (const auto& t : stream.tokens) n_items = std::max(n_items, t.m);
    // Smallest original m kept; clamped so a generous budget is a no-op.
    int first_kept = std::max(1, n_items - max_items + 1);
    TokenStream out;
    for (const auto& t : stream.tokens) {
        if (t.m != 0 && t.m < first_kept) continue;
        SemanticToken nt = t;
        if (nt.m != 0) nt.m = nt.m - first_kept + 1;
        if (nt.kind == TokenKind::Anchor)
            out.anchor_positions.push_back(static_cast<int>(out.tokens.size()));
        if (nt.kind == TokenKind::Action)
            out.action_positions.push_back(static_cast<int>(out.tokens.size()));
        out.tokens.push_back(nt);
    }
    return out;
}

RecoveredHistory recover_history(const TokenStream& stream, const Vocab& vocab) {
    RecoveredHistory out;
    int cur_m = 0;
    for (const auto& t : stream.tokens) {
        switch (t.kind) {
            case TokenKind::ProfileCode:
                out.profile_ids.push_back(t.vocab_id);
                break;
            case TokenKind::ItemCode: {
                if (t.m != cur_m) {
                    out.c_sh.emplace_back();
                    out.c_sp.emplace_back();
                    cur_m = t.m;
                }
                int rel = t.vocab_id - 1;
                if (rel < 0 || rel >= (vocab.n_sh + vocab.n_m) * vocab.v)
                    throw Error("recover_history: id outside code ranges");
                int slot = rel / vocab.v;
                int code = rel % vocab.v;
                if (slot < vocab.n_sh)
                    out.c_sh.back().push_back(code);
                else
                    out.c_sp.back().push_back(code);
                break;
            }
            case TokenKind::Anchor:
                break;
            case TokenKind::Action:
                out.actions.push_back(t.vocab_id - vocab.action_base());
                break;
        }
    }
    return out;
}

std::string dump_stream(const TokenStream& stream) {
    std::ostringstream os;
    for (size_t i = 0; i < stream.tokens.size(); ++i) {
        const auto& t = stream.tokens[i];
        os << i << ' ' << kind_name(t.kind) << ' ' << t.vocab_id << ' ' << t.m
           << ' ' << t.n << '\n';
    }
    return os.str();
}

}  // namespace hisam::seq

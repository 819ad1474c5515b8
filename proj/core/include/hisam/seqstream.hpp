// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hisam/dmrq.hpp"

namespace hisam::seq {

enum class TokenKind { ProfileCode, ItemCode, Anchor, Action };

const char* kind_name(TokenKind k);

struct SemanticToken {
    int vocab_id = 0;
    TokenKind kind = TokenKind::ItemCode;
    int m = 0;  // global item order; 0 for profile tokens
    int n = 1;  // local position, 1-based, resets per segment
};

struct TokenStream {
    std::vector<SemanticToken> tokens;
    std::vector<int> action_positions;
    std::vector<int> anchor_positions;
};

/// Disjoint id layout over the full token vocabulary:
///   0                         padding
///   1 + k*v .. +v             shared-layer-k codes
///   1 + (n_sh+j)*v .. +v      specific-modality-j codes
///   anchor                    single id
///   actions                   n_actions ids
///   profile buckets           profile_buckets ids (user fallback)
struct Vocab {
    int n_sh = 3;
    int n_m = 2;
    int v = 512;
    int n_actions = 2;
    int profile_buckets = 64;

    int pad_id() const { return 0; }
    int shared_id(int layer, int code) const;
    int specific_id(int modality, int code) const;
    int anchor_id() const { return 1 + (n_sh + n_m) * v; }
    int action_id(int action) const;
    int profile_id(int bucket) const;
    int size() const { return 1 + (n_sh + n_m) * v + 1 + n_actions + profile_buckets; }

    int action_base() const { return anchor_id() + 1; }
    int profile_base() const { return action_base() + n_actions; }
};

/// Vocab ids for one item's codes, in stream order: shared layers then
/// specific modalities. Throws on out-of-range codes.
std::vector<int> item_token_ids(const dmrq::ItemCodes& codes, const Vocab& vocab);

/// Hash-bucket fallback profile ids when no user-side modalities exist.
std::vector<int> profile_bucket_ids(const std::string& user_id, int l_u,
                                    const Vocab& vocab);

/// Unified stream: profile tokens (m=0, n=1..L_u), then per history item t
/// its codes (n=1..L_i), an Anchor (n=L_i+1) and an Action (n=L_i+2), all
/// with m=t. Empty history yields a profile-only stream; a 0-code item is
/// an error.
TokenStream build_stream(const std::vector<int>& profile_ids,
                         const std::vector<std::pair<dmrq::ItemCodes, int>>& history,
                         const Vocab& vocab);
TokenStream build_stream(const dmrq::ItemCodes& user_codes,
                         const std::vector<std::pair<dmrq::ItemCodes, int>>& history,
                         const Vocab& vocab);

/// Keeps the profile plus the most recent K item segments, re-numbering m
/// to 1..K.
TokenStream truncate(const TokenStream& stream, int max_items);

struct RecoveredHistory {
    std::vector<int> profile_ids;
    std::vector<std::vector<int>> c_sh;  // per item
    std::vector<std::vector<int>> c_sp;  // per item
    std::vector<int> actions;
};

/// Inverts build_stream; used by the round-trip property checks.
RecoveredHistory recover_history(const TokenStream& stream, const Vocab& vocab);

/// One token per line: `idx kind vocab_id m n`.
std::string dump_stream(const TokenStream& stream);

}  // namespace hisam::seq

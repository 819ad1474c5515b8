// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hisam/common.hpp"
#include "hisam/rng.hpp"

namespace hisam::ingest {

namespace {

constexpr const char* kEmbMagic = "HISAM-EMB v1";

float to_f32(double v) { return static_cast<float>(v); }

uint32_t read_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) |
           (static_cast<uint32_t>(p[3]) << 24);
}

float read_f32le(const unsigned char* p) {
    uint32_t u = read_u32le(p);
    float f;
    std::memcpy(&f, &u, sizeof(f));
    return f;
}

void append_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void append_f32le(std::string& out, float f) {
    uint32_t u;
    std::memcpy(&u, &f, sizeof(u));
    append_u32le(out, u);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void Corpus::rebuild_index() {
    index.clear();
    for (size_t i = 0; i < items.size(); ++i) {
        auto [it, inserted] = index.emplace(items[i].item_id, static_cast<int>(i));
        if (!inserted)
            throw ParseError("duplicate item_id: " + items[i].item_id);
    }
}

int ActionVocab::id(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

Corpus load_embeddings(const std::string& path) {
    std::string data = read_file(path);
    size_t eol = data.find('\n');
    if (eol == std::string::npos)
        throw ParseError(path + ":1: missing header line");
    std::istringstream header(data.substr(0, eol));
    std::string magic, version;
    header >> magic >> version;
    if (magic + " " + version != kEmbMagic)
        throw ParseError(path + ":1: bad magic, expected '" +
                         std::string(kEmbMagic) + "'");
    long n_items = -1, n_modalities = -1;
    if (!(header >> n_items >> n_modalities) || n_items < 0 || n_modalities < 1)
        throw ParseError(path + ":1: malformed header counts");
    Corpus corpus;
    for (long j = 0; j < n_modalities; ++j) {
        int d;
        if (!(header >> d) || d < 1)
            throw ParseError(path + ":1: malformed modality dimension");
        corpus.dims.push_back(d);
    }
    {
        std::string extra;
        if (header >> extra)
            throw ParseError(path + ":1: trailing tokens in header");
    }
    size_t total_dim = 0;
    for (int d : corpus.dims) total_dim += static_cast<size_t>(d);

    size_t body_start = eol + 1;
    // Binary bodies length-prefix every id with a little-endian u32, so a
    // NUL appears within the first bytes; text bodies never contain NUL.
    bool binary = false;
    for (size_t i = body_start; i < std::min(data.size(), body_start + 16); ++i)
        if (data[i] == '\0') binary = true;

    if (binary) {
        size_t pos = body_start;
        for (long i = 0; i < n_items; ++i) {
            if (pos + 4 > data.size())
                throw ParseError(path + ": item " + std::to_string(i) +
                                 ": truncated id length");
            uint32_t idlen = read_u32le(
                reinterpret_cast<const unsigned char*>(data.data() + pos));
            pos += 4;
            if (pos + idlen > data.size())
                throw ParseError(path + ": item " + std::to_string(i) +
                                 ": truncated id");
            RawItemRecord rec;
            rec.item_id = data.substr(pos, idlen);
            pos += idlen;
            if (pos + 4 * total_dim > data.size())
                throw ParseError(path + ": item " + std::to_string(i) +
                                 ": truncated vector data");
            for (int d : corpus.dims) {
                Eigen::VectorXd v(d);
                for (int c = 0; c < d; ++c) {
                    float f = read_f32le(reinterpret_cast<const unsigned char*>(
                        data.data() + pos));
                    pos += 4;
                    if (!std::isfinite(f))
                        throw ParseError(path + ": item " + std::to_string(i) +
                                         " (" + rec.item_id +
                                         "): non-finite value");
                    v(c) = static_cast<double>(f);
                }
                rec.vectors.push_back(std::move(v));
            }
            corpus.items.push_back(std::move(rec));
        }
        if (pos != data.size())
            throw ParseError(path + ": trailing bytes after last item");
    } else {
        std::istringstream body(data.substr(body_start));
        std::string line;
        long line_no = 1;  // header was line 1
        while (std::getline(body, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::istringstream ls(line);
            RawItemRecord rec;
            if (!(ls >> rec.item_id))
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": missing item id");
            for (int d : corpus.dims) {
                Eigen::VectorXd v(d);
                for (int c = 0; c < d; ++c) {
                    double x;
                    if (!(ls >> x))
                        throw ParseError(path + ":" + std::to_string(line_no) +
                                         ": expected " +
                                         std::to_string(total_dim) +
                                         " floats, row is short");
                    if (!std::isfinite(x))
                        throw ParseError(path + ":" + std::to_string(line_no) +
                                         ": non-finite value");
                    v(c) = x;
                }
                rec.vectors.push_back(std::move(v));
            }
            double extra;
            if (ls >> extra)
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": row has more floats than declared");
            corpus.items.push_back(std::move(rec));
        }
        if (static_cast<long>(corpus.items.size()) != n_items)
            throw ParseError(path + ": header declares " +
                             std::to_string(n_items) + " items, found " +
                             std::to_string(corpus.items.size()));
    }
    corpus.rebuild_index();
    return corpus;
}

void write_embeddings(const Corpus& corpus, const std::string& path,
                      bool binary) {
    std::ostringstream header;
    header << kEmbMagic << ' ' << corpus.items.size() << ' '
           << corpus.dims.size();
    for (int d : corpus.dims) header << ' ' << d;
    header << '\n';

    std::string out = header.str();
    if (binary) {
        for (const auto& rec : corpus.items) {
            append_u32le(out, static_cast<uint32_t>(rec.item_id.size()));
            out += rec.item_id;
            for (const auto& v : rec.vectors)
                for (long c = 0; c < v.size(); ++c)
                    append_f32le(out, to_f32(v(c)));
        }
    } else {
        for (const auto& rec : corpus.items) {
            out += rec.item_id;
            char buf[32];
            for (const auto& v : rec.vectors)
                for (long c = 0; c < v.size(); ++c) {
                    std::snprintf(buf, sizeof(buf), " %.9g", v(c));
                    out += buf;
                }
            out += '\n';
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write file: " + path);
    f << out;
}

std::vector<InteractionLog> load_interactions(
    const std::string& path, const ActionVocab& actions,
    const std::optional<std::unordered_set<std::string>>& known_items,
    const LoadInteractionOptions& opts) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open file: " + path);
    std::unordered_map<std::string, size_t> user_index;
    std::vector<InteractionLog> logs;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        for (size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == '\t') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (fields.size() != 4)
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": expected 4 tab-separated fields");
        Event ev;
        ev.item_id = fields[1];
        int aid = actions.id(fields[2]);
        if (aid < 0)
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": unknown action_id '" + fields[2] + "'");
        ev.action_id = aid;
        try {
            ev.timestamp = std::stoll(fields[3]);
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": bad timestamp '" + fields[3] + "'");
        }
        if (known_items && !opts.allow_unknown_items &&
            !known_items->count(ev.item_id))
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": unknown item_id '" + ev.item_id + "'");
        auto [it, inserted] = user_index.emplace(fields[0], logs.size());
        if (inserted) logs.push_back(InteractionLog{fields[0], {}});
        logs[it->second].events.push_back(std::move(ev));
    }
    for (auto& log : logs) {
        bool sorted = std::is_sorted(
            log.events.begin(), log.events.end(),
            [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
        if (!sorted) {
            if (!opts.sort_by_timestamp)
                throw ParseError(path + ": user '" + log.user_id +
                                 "' has out-of-order timestamps (pass --sort "
                                 "to sort)");
            std::stable_sort(log.events.begin(), log.events.end(),
                             [](const Event& a, const Event& b) {
                                 return a.timestamp < b.timestamp;
                             });
        }
    }
    return logs;
}

void write_interactions(const std::vector<InteractionLog>& logs,
                        const ActionVocab& actions, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write file: " + path);
    for (const auto& log : logs)
        for (const auto& ev : log.events)
            f << log.user_id << '\t' << ev.item_id << '\t'
              << actions.names.at(static_cast<size_t>(ev.action_id)) << '\t'
              << ev.timestamp << '\n';
}

ActionVocab load_action_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open file: " + path);
    ActionVocab vocab;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) vocab.names.push_back(line);
    if (vocab.names.empty())
        throw ParseError(path + ": empty action vocabulary");
    return vocab;
}

void write_action_vocab(const ActionVocab& vocab, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write file: " + path);
    for (const auto& n : vocab.names) f << n << '\n';
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.cluster_count < 2)
        throw ConfigError("synth: cluster_count must be >= 2");
    if (spec.n_modalities < 2)
        throw ConfigError("synth: n_modalities must be >= 2");
    if (static_cast<int>(spec.dims.size()) != spec.n_modalities)
        throw ConfigError("synth: dims list must have one entry per modality");
    if (spec.noise_scale < 0.0)
        throw ConfigError("synth: noise_scale must be >= 0");
    if (spec.action_rule.empty())
        throw ConfigError("synth: action_rule must be non-empty");
    if (spec.n_items < 1 || spec.n_users < 1 || spec.events_per_user < 1)
        throw ConfigError("synth: counts must be positive");
}

SyntheticData synth_corpus(const SyntheticSpec& spec) {
    validate_spec(spec);
    Rng rng(stage_seed(spec.seed, "synth"));

    SyntheticData data;
    data.actions.names = {"neg", "pos"};
    data.corpus.dims = spec.dims;

    // Per-cluster, per-modality unit centroids.
    std::vector<std::vector<Eigen::VectorXd>> centroids(
        static_cast<size_t>(spec.cluster_count));
    for (auto& per_mod : centroids) {
        for (int j = 0; j < spec.n_modalities; ++j) {
            Eigen::VectorXd c(spec.dims[static_cast<size_t>(j)]);
            for (long k = 0; k < c.size(); ++k) c(k) = rng.gaussian();
            c.normalize();
            per_mod.push_back(std::move(c));
        }
    }

    for (int i = 0; i < spec.n_items; ++i) {
        int cluster = static_cast<int>(
            rng.uniform_int(static_cast<uint64_t>(spec.cluster_count)));
        data.item_cluster.push_back(cluster);
        RawItemRecord rec;
        rec.item_id = "item" + std::to_string(i);
        for (int j = 0; j < spec.n_modalities; ++j) {
            Eigen::VectorXd v = centroids[static_cast<size_t>(cluster)]
                                         [static_cast<size_t>(j)];
            for (long k = 0; k < v.size(); ++k)
                v(k) += spec.noise_scale * rng.gaussian();
            double n = v.norm();
            if (n < 1e-12) v(0) = 1.0;  // noise cancelled the centroid
            else v /= n;
            rec.vectors.push_back(std::move(v));
        }
        data.corpus.items.push_back(std::move(rec));
    }
    data.corpus.rebuild_index();

    for (int u = 0; u < spec.n_users; ++u) {
        InteractionLog log;
        log.user_id = "user" + std::to_string(u);
        for (int e = 0; e < spec.events_per_user; ++e) {
            int item = static_cast<int>(
                rng.uniform_int(static_cast<uint64_t>(spec.n_items)));
            int cluster = data.item_cluster[static_cast<size_t>(item)];
            double p = spec.action_rule[static_cast<size_t>(cluster) %
                                        spec.action_rule.size()];
            int action = rng.uniform() < p ? 1 : 0;
            log.events.push_back(Event{
                data.corpus.items[static_cast<size_t>(item)].item_id, action,
                static_cast<int64_t>(e)});
        }
        data.logs.push_back(std::move(log));
    }
    return data;
}

}  // namespace hisam::ingest

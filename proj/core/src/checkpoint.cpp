// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "hisam/common.hpp"

namespace hisam::ckpt {

void save(const std::string& path, const std::vector<NamedTensor>& tensors,
          const std::string& magic) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write file: " + path);
    f << magic << ' ' << tensors.size() << '\n';
    for (const auto& [name, m] : tensors) {
        f << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
        std::string buf;
        buf.reserve(static_cast<size_t>(m.size()) * 4);
        for (long r = 0; r < m.rows(); ++r)
            for (long c = 0; c < m.cols(); ++c) {
                float v = static_cast<float>(m(r, c));
                uint32_t u;
                std::memcpy(&u, &v, sizeof(u));
                buf.push_back(static_cast<char>(u & 0xFF));
                buf.push_back(static_cast<char>((u >> 8) & 0xFF));
                buf.push_back(static_cast<char>((u >> 16) & 0xFF));
                buf.push_back(static_cast<char>((u >> 24) & 0xFF));
            }
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
}

std::vector<NamedTensor> load(const std::string& path,
                              const std::string& magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open file: " + path);
    std::string header;
    std::getline(f, header);
    std::istringstream hs(header);
    std::string m1, m2;
    size_t count = 0;
    hs >> m1 >> m2 >> count;
    if (m1 + " " + m2 != magic)
        throw ParseError(path + ": bad magic, expected '" + magic + "'");
    std::vector<NamedTensor> tensors;
    for (size_t i = 0; i < count; ++i) {
        std::string line;
        if (!std::getline(f, line))
            throw ParseError(path + ": truncated tensor header " +
                             std::to_string(i));
        std::istringstream ls(line);
        std::string name;
        long rows = -1, cols = -1;
        if (!(ls >> name >> rows >> cols) || rows < 0 || cols < 0)
            throw ParseError(path + ": malformed tensor header '" + line + "'");
        Eigen::MatrixXd m(rows, cols);
        std::vector<char> buf(static_cast<size_t>(rows) *
                              static_cast<size_t>(cols) * 4);
        f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (static_cast<size_t>(f.gcount()) != buf.size())
            throw ParseError(path + ": truncated payload for tensor '" + name +
                             "'");
        size_t p = 0;
        for (long r = 0; r < rows; ++r)
            for (long c = 0; c < cols; ++c) {
                uint32_t u = static_cast<uint8_t>(buf[p]) |
                             (static_cast<uint32_t>(static_cast<uint8_t>(buf[p + 1])) << 8) |
                             (static_cast<uint32_t>(static_cast<uint8_t>(buf[p + 2])) << 16) |
                             (static_cast<uint32_t>(static_cast<uint8_t>(buf[p + 3])) << 24);
                p += 4;
                float v;
                std::memcpy(&v, &u, sizeof(v));
                m(r, c) = static_cast<double>(v);
            }
        tensors.emplace_back(std::move(name), std::move(m));
    }
    return tensors;
}

const Eigen::MatrixXd& find(const std::vector<NamedTensor>& tensors,
                            const std::string& name) {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw ParseError("checkpoint: missing tensor '" + name + "'");
}

}  // namespace hisam::ckpt

// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

namespace hisam::ckpt {

using NamedTensor = std::pair<std::string, Eigen::MatrixXd>;

/// HISAM-CKPT v1: text header per tensor (name rows cols), then row-major
/// little-endian float32 payload. Round-trips bit-exactly for values that
/// are float32-representable.
void save(const std::string& path, const std::vector<NamedTensor>& tensors,
          const std::string& magic = "HISAM-CKPT v1");
std::vector<NamedTensor> load(const std::string& path,
                              const std::string& magic = "HISAM-CKPT v1");

/// Lookup helper; throws if the name is absent.
const Eigen::MatrixXd& find(const std::vector<NamedTensor>& tensors,
                            const std::string& name);

}  // namespace hisam::ckpt

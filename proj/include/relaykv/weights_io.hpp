// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "json.hpp"
#include "relaykv/model.hpp"

namespace relaykv {

// Weight checkpoint: JSON manifest (spec fields + ordered tensor records)
// followed by a raw float32 blob. The same format round-trips through
// export and import, so small externally produced checkpoints load too.

void save_weights(const Weights& w, const std::filesystem::path& path);

// Validates that every manifest tensor matches the shape the spec implies;
// missing or extra tensors are rejected.
Weights load_weights(const std::filesystem::path& path);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

}  // namespace relaykv

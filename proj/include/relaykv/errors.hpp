// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace relaykv {

// File could not be opened / read / written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File or config contents violate the expected schema (bad magic, version,
// checksum, missing field, out-of-range value).
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace relaykv

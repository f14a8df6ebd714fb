// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "relaykv/errors.hpp"
#include "relaykv/tensor.hpp"

namespace relaykv {

// Container shared by the weight file and the relay-cache file:
//
//   magic(4) | version u32 LE | manifest_len u64 LE | manifest JSON | blob
//
// The manifest carries arbitrary metadata plus an ordered tensor table
// [{name, shape, offset}], the blob byte count and an FNV-1a 64 checksum
// of the blob. The blob is raw row-major little-endian float32.

inline constexpr std::uint32_t kBlobFormatVersion = 1;

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n);

class BlobWriter {
 public:
  // Appends tensor data to the blob and records a manifest entry.
  void add(const std::string& name, const Tensor& t);

  // extra: metadata merged into the manifest next to the tensor table.
  std::vector<std::uint8_t> finish(const std::string& magic, nlohmann::json extra) const;
  void write_file(const std::filesystem::path& path, const std::string& magic,
                  nlohmann::json extra) const;

 private:
  nlohmann::json records_ = nlohmann::json::array();
  std::vector<std::uint8_t> blob_;
};

class BlobReader {
 public:
  static BlobReader from_bytes(std::vector<std::uint8_t> bytes, const std::string& magic);
  static BlobReader from_file(const std::filesystem::path& path, const std::string& magic);

  const nlohmann::json& manifest() const { return manifest_; }
  bool has(const std::string& name) const;
  // Validates that the record's extent fits inside the blob.
  Tensor get(const std::string& name) const;
  std::vector<std::string> tensor_names() const;

 private:
  nlohmann::json manifest_;
  std::vector<std::uint8_t> blob_;
};

}  // namespace relaykv

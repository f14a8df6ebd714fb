// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "blob format is little-endian; big-endian hosts are not supported");

namespace relaykv {

namespace {

void append_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

std::uint64_t read_u64(const std::uint8_t* p) {
  std::uint64_t v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

std::uint32_t read_u32(const std::uint8_t* p) {
  std::uint32_t v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void BlobWriter::add(const std::string& name, const Tensor& t) {
  nlohmann::json rec;
  rec["name"] = name;
  rec["shape"] = t.shape;
  rec["offset"] = blob_.size();
  records_.push_back(std::move(rec));
  append_bytes(blob_, t.data.data(), t.data.size() * sizeof(float));
}

std::vector<std::uint8_t> BlobWriter::finish(const std::string& magic,
                                             nlohmann::json extra) const {
  if (magic.size() != 4) throw std::invalid_argument("blob magic must be 4 bytes");
  extra["tensors"] = records_;
  extra["blob_bytes"] = blob_.size();
  extra["blob_checksum"] = fnv1a64(blob_.data(), blob_.size());
  const std::string manifest = extra.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + manifest.size() + blob_.size());
  append_bytes(out, magic.data(), 4);
  const std::uint32_t version = kBlobFormatVersion;
  append_bytes(out, &version, sizeof(version));
  const std::uint64_t mlen = manifest.size();
  append_bytes(out, &mlen, sizeof(mlen));
  append_bytes(out, manifest.data(), manifest.size());
  append_bytes(out, blob_.data(), blob_.size());
  return out;
}

void BlobWriter::write_file(const std::filesystem::path& path, const std::string& magic,
                            nlohmann::json extra) const {
  const auto bytes = finish(magic, std::move(extra));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

BlobReader BlobReader::from_bytes(std::vector<std::uint8_t> bytes, const std::string& magic) {
  if (bytes.size() < 16) throw SchemaError("blob file truncated (header)");
  if (std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw SchemaError("bad magic, expected '" + magic + "'");
  }
  const std::uint32_t version = read_u32(bytes.data() + 4);
  if (version != kBlobFormatVersion) {
    throw SchemaError("unsupported format version " + std::to_string(version));
  }
  const std::uint64_t mlen = read_u64(bytes.data() + 8);
  if (16 + mlen > bytes.size()) throw SchemaError("blob file truncated (manifest)");

  BlobReader r;
  try {
    r.manifest_ = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + mlen);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("manifest parse error: ") + e.what());
  }
  r.blob_.assign(bytes.begin() + 16 + mlen, bytes.end());

  if (!r.manifest_.contains("blob_bytes") || !r.manifest_.contains("blob_checksum")) {
    throw SchemaError("manifest missing blob_bytes/blob_checksum");
  }
  if (r.manifest_["blob_bytes"].get<std::uint64_t>() != r.blob_.size()) {
    throw SchemaError("blob truncated: manifest declares " +
                      std::to_string(r.manifest_["blob_bytes"].get<std::uint64_t>()) +
                      " bytes, file has " + std::to_string(r.blob_.size()));
  }
  if (r.manifest_["blob_checksum"].get<std::uint64_t>() !=
      fnv1a64(r.blob_.data(), r.blob_.size())) {
    throw SchemaError("blob checksum mismatch");
  }
  return r;
}

BlobReader BlobReader::from_file(const std::filesystem::path& path, const std::string& magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return from_bytes(std::move(bytes), magic);
}

bool BlobReader::has(const std::string& name) const {
  for (const auto& rec : manifest_["tensors"]) {
    if (rec["name"] == name) return true;
  }
  return false;
}

Tensor BlobReader::get(const std::string& name) const {
  for (const auto& rec : manifest_["tensors"]) {
    if (rec["name"] != name) continue;
    Tensor t(rec["shape"].get<std::vector<std::size_t>>());
    const std::uint64_t offset = rec["offset"].get<std::uint64_t>();
    const std::uint64_t extent = t.numel() * sizeof(float);
    if (offset + extent > blob_.size()) {
      throw SchemaError("tensor '" + name + "' extends past end of blob");
    }
    std::memcpy(t.data.data(), blob_.data() + offset, extent);
    return t;
  }
  throw SchemaError("tensor '" + name + "' not found in manifest");
}

std::vector<std::string> BlobReader::tensor_names() const {
  std::vector<std::string> names;
  for (const auto& rec : manifest_["tensors"]) names.push_back(rec["name"].get<std::string>());
  return names;
}

}  // namespace relaykv

#pragma once

#include <algorithm>
#include <filesystem>
#include <string>

#include "icrl/common/binary_io.hpp"
#include "icrl/datagen/history.hpp"

namespace icrl::data {

// Dataset file, little-endian:
//   "ICRLDS1"
//   u8 env kind | u32 grid size | u32 action count | u32 history count
//   per history:
//     u32 task id | u8 generator | str config snapshot | u32 episode count
//     u32 transition count per episode
//     packed transitions: u32 obs | u8 action | f32 reward | u8 done
//     u32 CRC32 of the history bytes above
// Pixel datasets add a sidecar "<path>.img":
//   "ICRLIM1" | u32 count | u32 channels | u32 height | u32 width
//   per image: u64 content hash | channels*height*width bytes
//   u32 CRC32 of everything after the magic

inline constexpr const char* kDatasetMagic = "ICRLDS";
inline constexpr const char* kImageMagic = "ICRLIM";
inline constexpr char kFormatVersion = '1';

inline std::string image_sidecar_path(const std::string& path) { return path + ".img"; }

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.raw(kDatasetMagic, 6);
  w.u8(std::uint8_t(kFormatVersion));
  const std::size_t header = w.size();
  w.u8(std::uint8_t(ds.env_kind));
  w.u32(std::uint32_t(ds.grid_size));
  w.u32(std::uint32_t(ds.num_actions));
  w.u32(std::uint32_t(ds.histories.size()));
  w.u32(w.crc_since(header));
  for (const auto& h : ds.histories) {
    const std::size_t start = w.size();
    w.u32(std::uint32_t(h.task_id));
    w.u8(std::uint8_t(h.generator));
    w.str(h.config_snapshot);
    w.u32(std::uint32_t(h.episodes.size()));
    for (const auto& e : h.episodes) w.u32(std::uint32_t(e.size()));
    for (const auto& e : h.episodes)
      for (const auto& t : e) {
        w.u32(t.obs);
        w.u8(t.action);
        w.f32(t.reward);
        w.u8(t.done ? 1 : 0);
      }
    w.u32(w.crc_since(start));
  }
  return w.bytes();
}

inline std::vector<std::uint8_t> encode_images(const ImageStore& store) {
  io::ByteWriter w;
  w.raw(kImageMagic, 6);
  w.u8(std::uint8_t(kFormatVersion));
  const std::size_t start = w.size();
  w.u32(std::uint32_t(store.size()));
  const envs::Image first = store.empty() ? envs::Image{} : store.at(0);
  w.u32(std::uint32_t(first.channels));
  w.u32(std::uint32_t(first.height));
  w.u32(std::uint32_t(first.width));
  for (std::uint32_t i = 0; i < store.size(); ++i) {
    const auto& img = store.at(i);
    if (img.channels != first.channels || img.height != first.height || img.width != first.width) {
      throw io::FormatError(io::FormatError::Kind::Invalid, "image store holds mixed image sizes");
    }
    w.u64(store.hash_at(i));
    w.raw(img.bytes.data(), img.bytes.size());
  }
  w.u32(w.crc_since(start));
  return w.bytes();
}

inline Dataset decode_dataset(std::vector<std::uint8_t> bytes, const std::string& source = "dataset") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic(kDatasetMagic, kFormatVersion);
  Dataset ds;
  const std::size_t header = r.pos();
  std::uint8_t kind = r.u8();
  if (kind > std::uint8_t(envs::EnvKind::Pixel)) {
    throw io::FormatError(io::FormatError::Kind::Invalid, source + ": unknown env kind " + std::to_string(kind));
  }
  ds.env_kind = envs::EnvKind(kind);
  ds.grid_size = int(r.u32());
  ds.num_actions = int(r.u32());
  const std::uint32_t n = r.u32();
  r.expect_crc(header);
  // A history takes at least 17 bytes; bounds the reservation on corrupt counts.
  ds.histories.reserve(std::min<std::size_t>(n, r.remaining() / 17));
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t start = r.pos();
    LearningHistory h;
    h.task_id = int(r.u32());
    h.generator = GeneratorTag(r.u8());
    h.config_snapshot = r.str();
    const std::uint32_t n_eps = r.u32();
    if (std::uint64_t(n_eps) * 4 > r.remaining()) {
      throw io::FormatError(io::FormatError::Kind::Truncated, source + ": truncated episode table");
    }
    std::vector<std::uint32_t> lens(n_eps);
    for (auto& l : lens) l = r.u32();
    h.episodes.resize(n_eps);
    for (std::uint32_t e = 0; e < n_eps; ++e) {
      if (std::uint64_t(lens[e]) * 10 > r.remaining()) {
        throw io::FormatError(io::FormatError::Kind::Truncated, source + ": truncated transitions");
      }
      h.episodes[e].resize(lens[e]);
      for (auto& t : h.episodes[e]) {
        t.obs = r.u32();
        t.action = r.u8();
        t.reward = r.f32();
        t.done = r.u8() != 0;
      }
    }
    r.expect_crc(start);
    ds.histories.push_back(std::move(h));
  }
  if (r.remaining() != 0) {
    throw io::FormatError(io::FormatError::Kind::Invalid, source + ": trailing bytes after last history");
  }
  return ds;
}

inline ImageStore decode_images(std::vector<std::uint8_t> bytes, const std::string& source = "image store") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic(kImageMagic, kFormatVersion);
  const std::size_t start = r.pos();
  const std::uint32_t n = r.u32();
  envs::Image proto;
  proto.channels = int(r.u32());
  proto.height = int(r.u32());
  proto.width = int(r.u32());
  const std::size_t bytes_per = std::size_t(proto.channels) * std::size_t(proto.height) * std::size_t(proto.width);
  if ((n > 0 && bytes_per == 0) || (std::uint64_t(bytes_per) + 8) * n + 4 > r.remaining()) {
    throw io::FormatError(io::FormatError::Kind::Truncated, source + ": image table exceeds file");
  }
  ImageStore store;
  std::vector<std::uint64_t> stored_hashes;
  for (std::uint32_t i = 0; i < n; ++i) {
    stored_hashes.push_back(r.u64());
    envs::Image img = proto;
    img.bytes.resize(bytes_per);
    r.raw(img.bytes.data(), bytes_per);
    store.intern(img);
  }
  r.expect_crc(start);
  if (r.remaining() != 0) throw io::FormatError(io::FormatError::Kind::Invalid, source + ": trailing bytes after images");
  if (store.size() != n) throw io::FormatError(io::FormatError::Kind::Invalid, source + ": duplicate images");
  for (std::uint32_t i = 0; i < n; ++i) {
    if (store.hash_at(i) != stored_hashes[i]) {
      throw io::FormatError(io::FormatError::Kind::Checksum, source + ": image hash mismatch at " + std::to_string(i));
    }
  }
  return store;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  io::write_file(path, encode_dataset(ds));
  if (envs::has_images(ds.env_kind)) io::write_file(image_sidecar_path(path), encode_images(ds.images));
}

inline Dataset read_dataset(const std::string& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("dataset not found: " + path);
  Dataset ds = decode_dataset(io::read_file(path), path);
  if (envs::has_images(ds.env_kind)) {
    const auto side = image_sidecar_path(path);
    if (!std::filesystem::exists(side)) throw std::runtime_error("image store not found: " + side);
    ds.images = decode_images(io::read_file(side), side);
    for (const auto& h : ds.histories)
      for (const auto& e : h.episodes)
        for (const auto& t : e)
          if (t.obs >= ds.images.size()) {
            throw io::FormatError(io::FormatError::Kind::Invalid, path + ": observation refers to missing image");
          }
  }
  return ds;
}

}  // namespace icrl::data

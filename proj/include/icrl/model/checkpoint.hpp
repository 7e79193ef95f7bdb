#pragma once

#include <string>
#include <vector>

#include "icrl/common/binary_io.hpp"
#include "icrl/model/transformer.hpp"

namespace icrl::model {

// Model checkpoint, little-endian:
//   "ICRLMD1"
//   config: u32 layers | u32 hidden | u32 heads | u32 context | u32 mlp ratio
//           u8 pre norm | u8 qk norm | f64 embed dropout | f64 resid dropout
//           u32 #positions, u32 each | u32 ngram max | u8 match mode | u8 interior only
//           u32 actions | u8 obs input | u32 obs dim
//   str VQ checkpoint reference (empty for discrete models)
//   u32 parameter count; per parameter: str name | u32 rank | u32 dims | f32 values
//   u32 CRC32 of everything after the magic

inline constexpr const char* kModelMagic = "ICRLMD";
inline constexpr char kModelVersion = '1';

inline void write_config(io::ByteWriter& w, const TransformerConfig& c) {
  w.u32(std::uint32_t(c.layers));
  w.u32(std::uint32_t(c.hidden));
  w.u32(std::uint32_t(c.heads));
  w.u32(std::uint32_t(c.context_len));
  w.u32(std::uint32_t(c.mlp_ratio));
  w.u8(c.pre_norm);
  w.u8(c.qk_norm);
  w.f64(c.embed_dropout);
  w.f64(c.resid_dropout);
  w.u32(std::uint32_t(c.ngram_positions.size()));
  for (int p : c.ngram_positions) w.u32(std::uint32_t(p));
  w.u32(std::uint32_t(c.ngram_max));
  w.u8(std::uint8_t(c.match_mode));
  w.u8(c.interior_ngram_only);
  w.u32(std::uint32_t(c.num_actions));
  w.u8(std::uint8_t(c.obs_input));
  w.u32(std::uint32_t(c.obs_dim));
}

inline TransformerConfig read_config(io::ByteReader& r) {
  TransformerConfig c;
  c.layers = int(r.u32());
  c.hidden = int(r.u32());
  c.heads = int(r.u32());
  c.context_len = int(r.u32());
  c.mlp_ratio = int(r.u32());
  c.pre_norm = r.u8() != 0;
  c.qk_norm = r.u8() != 0;
  c.embed_dropout = r.f64();
  c.resid_dropout = r.f64();
  std::uint32_t np = r.u32();
  if (np > 4096) throw io::FormatError(io::FormatError::Kind::Invalid, "implausible ngram position count");
  c.ngram_positions.resize(np);
  for (auto& p : c.ngram_positions) p = int(r.u32());
  c.ngram_max = int(r.u32());
  std::uint8_t mm = r.u8();
  if (mm > 2) throw io::FormatError(io::FormatError::Kind::Invalid, "unknown match mode " + std::to_string(mm));
  c.match_mode = match::MatchMode(mm);
  c.interior_ngram_only = r.u8() != 0;
  c.num_actions = int(r.u32());
  std::uint8_t oi = r.u8();
  if (oi > 1) throw io::FormatError(io::FormatError::Kind::Invalid, "unknown observation input " + std::to_string(oi));
  c.obs_input = ObsInput(oi);
  c.obs_dim = int(r.u32());
  return c;
}

struct ModelCheckpoint {
  Transformer<float> model;
  std::string vq_reference;
};

inline std::vector<std::uint8_t> encode_model(const Transformer<float>& m, const std::string& vq_reference = "") {
  io::ByteWriter w;
  w.raw(kModelMagic, 6);
  w.u8(std::uint8_t(kModelVersion));
  const std::size_t start = w.size();
  write_config(w, m.config());
  w.str(vq_reference);
  w.u32(std::uint32_t(m.params().size()));
  for (const auto& p : m.params()) {
    w.str(p.name);
    w.u32(std::uint32_t(p.value.rank()));
    for (auto d : p.value.shape()) w.u32(std::uint32_t(d));
    for (float v : p.value.values()) w.f32(v);
  }
  w.u32(w.crc_since(start));
  return w.bytes();
}

inline ModelCheckpoint decode_model(std::vector<std::uint8_t> bytes, const std::string& source = "model") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic(kModelMagic, kModelVersion);
  const std::size_t start = r.pos();
  r.expect_tail_crc(start);
  auto cfg = read_config(r);
  std::string vq = r.str();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(io::FormatError::Kind::Invalid, source + ": " + e.what());
  }
  ModelCheckpoint ck{Transformer<float>(cfg, 0), vq};
  auto& params = ck.model.params();
  std::uint32_t n = r.u32();
  if (n != params.size()) {
    throw io::FormatError(io::FormatError::Kind::Invalid, source + ": " + std::to_string(n) + " parameters, config implies " +
                                                              std::to_string(params.size()));
  }
  for (auto& p : params) {
    std::string name = r.str();
    std::uint32_t rank = r.u32();
    Shape shape;
    if (rank > 8) throw io::FormatError(io::FormatError::Kind::Invalid, source + ": bad rank for " + name);
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    if (name != p.name || shape != p.value.shape()) {
      throw io::FormatError(io::FormatError::Kind::Invalid, source + ": parameter " + name + " " + diff::shape_str(shape) +
                                                                " does not match " + p.name + " " +
                                                                diff::shape_str(p.value.shape()));
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = r.f32();
  }
  r.expect_crc(start);
  if (r.remaining() != 0) throw io::FormatError(io::FormatError::Kind::Invalid, source + ": trailing bytes");
  return ck;
}

inline void save_model(const std::string& path, const Transformer<float>& m, const std::string& vq_reference = "") {
  io::write_file(path, encode_model(m, vq_reference));
}

inline ModelCheckpoint load_model(const std::string& path) { return decode_model(io::read_file(path), path); }

}  // namespace icrl::model

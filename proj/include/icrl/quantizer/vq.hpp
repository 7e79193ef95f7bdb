#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "icrl/common/binary_io.hpp"
#include "icrl/datagen/history.hpp"
#include "icrl/diffcore/ops.hpp"
#include "icrl/diffcore/optim.hpp"
#include "icrl/matcher/keys.hpp"

namespace icrl::vq {

using diff::Graph;
using diff::Parameter;
using diff::Shape;
using diff::Tensor;
using diff::Var;
using match::IndexMatrix;

struct VqConfig {
  int codebook_size = 64;
  int latent_dim = 32;
  int grid = 4;
  int image_size = 32;
  int channels = 32;
  double beta = 0.25;
  double lr = 1e-3;
  /// Codes unused for this many consecutive steps are reinitialized.
  int dead_after = 100;

  int downsamples() const {
    int n = 0;
    for (int s = image_size; s > grid; s /= 2) ++n;
    return n;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("vq config: " + m); };
    if (codebook_size < 2) fail("codebook_size must be >= 2");
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    if (channels < 1) fail("channels must be >= 1");
    if (grid < 1 || image_size < grid) fail("grid must be in [1, image_size]");
    if ((grid << downsamples()) != image_size) fail("image_size must be grid * 2^k");
    if (beta < 0) fail("beta must be >= 0");
    if (dead_after < 1) fail("dead_after must be >= 1");
  }
};

struct VqLosses {
  double reconstruction = 0;
  double codebook = 0;
  /// Already scaled by beta.
  double commitment = 0;
  double total = 0;
};

/// Encoder output for one image.
struct Encoded {
  /// Pre-quantization latents, cell-major [G*G*D].
  std::vector<float> latent;
  /// Codebook vectors at the chosen indices, same layout.
  std::vector<float> quantized;
  IndexMatrix index;
};

/// Image bytes scaled to [0, 1], CHW.
inline Tensor<float> image_tensor(const std::vector<const envs::Image*>& images, int size) {
  const std::size_t S = std::size_t(size);
  Tensor<float> x(Shape{images.size(), 3, S, S});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& im = *images[b];
    if (im.channels != 3 || im.height != size || im.width != size || im.bytes.size() != 3 * S * S) {
      throw std::invalid_argument("vq: image " + std::to_string(im.channels) + "x" + std::to_string(im.height) + "x" +
                                  std::to_string(im.width) + " does not match model input 3x" + std::to_string(size) +
                                  "x" + std::to_string(size));
    }
    for (std::size_t i = 0; i < im.bytes.size(); ++i) x[b * im.bytes.size() + i] = float(im.bytes[i]) / 255.f;
  }
  return x;
}

/// Index of the nearest row of `codebook` [K, D] to `z`; ties go to the
/// lowest index.
inline int nearest_code(const Tensor<float>& codebook, const float* z) {
  const std::size_t K = codebook.dim(0), D = codebook.dim(1);
  int best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    const float* e = codebook.data() + k * D;
    float d = 0;
    for (std::size_t i = 0; i < D; ++i) {
      float t = z[i] - e[i];
      d += t * t;
    }
    if (d < best_d) {
      best_d = d;
      best = int(k);
    }
  }
  return best;
}

/// Residual conv encoder/decoder with a vector-quantized bottleneck.
class VqModel {
 public:
  VqModel(VqConfig cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    const std::size_t C = std::size_t(cfg_.channels), D = std::size_t(cfg_.latent_dim);
    enc_in_ = conv("enc.in", C, 3, 3);
    for (int i = 0; i < cfg_.downsamples(); ++i) {
      std::string p = "enc.down" + std::to_string(i);
      enc_down_.push_back(conv(p, C, C, 3));
      enc_res_.push_back({conv(p + ".res_a", C, C, 3), conv(p + ".res_b", C, C, 1)});
    }
    enc_out_ = conv("enc.out", D, C, 1);
    dec_in_ = conv("dec.in", C, D, 1);
    dec_res_ = {conv("dec.res_a", C, C, 3), conv("dec.res_b", C, C, 1)};
    for (int i = 0; i < cfg_.downsamples(); ++i) dec_up_.push_back(conv("dec.up" + std::to_string(i), C, C, 3));
    dec_out_ = conv("dec.out", 3, C, 3);
    Tensor<float> cb(Shape{std::size_t(cfg_.codebook_size), D});
    std::uniform_real_distribution<float> u(-1.f / float(cfg_.codebook_size), 1.f / float(cfg_.codebook_size));
    for (std::size_t i = 0; i < cb.size(); ++i) cb[i] = u(rng_);
    codebook_ = int(params_.size());
    params_.emplace_back("codebook", std::move(cb), false);
    idle_.assign(std::size_t(cfg_.codebook_size), 0);
  }

  VqModel(const VqModel&) = default;
  VqModel& operator=(const VqModel&) = default;

  const VqConfig& config() const { return cfg_; }
  std::vector<Parameter<float>>& params() { return params_; }
  const std::vector<Parameter<float>>& params() const { return params_; }
  std::vector<Parameter<float>*> parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  const Tensor<float>& codebook() const { return params_[std::size_t(codebook_)].value; }
  Tensor<float>& codebook() { return params_[std::size_t(codebook_)].value; }
  /// Consecutive training steps each code has gone unused.
  const std::vector<std::int32_t>& idle_steps() const { return idle_; }
  std::vector<std::int32_t>& idle_steps() { return idle_; }
  std::mt19937_64& rng() { return rng_; }

  /// z_e [B, D, G, G]. Parameters enter as trainable nodes when `train` is
  /// set and as constants otherwise, so inference never touches the model.
  Var<float> encode(Graph<float>& g, Var<float> x, bool train) const {
    auto P = [&](int i) { return node(g, i, train); };
    auto c = [&](Var<float> h, Conv w, std::size_t stride, std::size_t pad) {
      return diff::conv2d(h, P(w.w), P(w.b), stride, pad);
    };
    Var<float> h = diff::relu(c(x, enc_in_, 1, 1));
    for (std::size_t i = 0; i < enc_down_.size(); ++i) {
      h = diff::relu(c(h, enc_down_[i], 2, 1));
      h = diff::add(h, c(diff::relu(c(h, enc_res_[i][0], 1, 1)), enc_res_[i][1], 1, 0));
    }
    return c(diff::relu(h), enc_out_, 1, 0);
  }

  /// Reconstruction [B, 3, S, S] from a latent grid [B, D, G, G].
  Var<float> decode(Graph<float>& g, Var<float> z, bool train) const {
    auto P = [&](int i) { return node(g, i, train); };
    auto c = [&](Var<float> h, Conv w, std::size_t stride, std::size_t pad) {
      return diff::conv2d(h, P(w.w), P(w.b), stride, pad);
    };
    Var<float> h = c(z, dec_in_, 1, 0);
    h = diff::add(h, c(diff::relu(c(h, dec_res_[0], 1, 1)), dec_res_[1], 1, 0));
    for (const auto& up : dec_up_) h = diff::relu(c(diff::upsample2x(h), up, 1, 1));
    return c(h, dec_out_, 1, 1);
  }

  Var<float> codebook_node(Graph<float>& g, bool train) const { return node(g, codebook_, train); }

 private:
  struct Conv {
    int w = -1;
    int b = -1;
  };

  Var<float> node(Graph<float>& g, int i, bool train) const {
    auto& p = const_cast<Parameter<float>&>(params_[std::size_t(i)]);
    return train ? g.parameter(p) : g.constant(p.value);
  }

  Conv conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    Tensor<float> w(Shape{out, in, k, k});
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / double(in * k * k)));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = float(nd(rng_));
    Conv c;
    c.w = int(params_.size());
    params_.emplace_back(name + ".w", std::move(w), true);
    c.b = int(params_.size());
    params_.emplace_back(name + ".b", Tensor<float>(Shape{out}), false);
    return c;
  }

  VqConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<Parameter<float>> params_;
  Conv enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<Conv> enc_down_, dec_up_;
  std::vector<std::array<Conv, 2>> enc_res_;
  std::array<Conv, 2> dec_res_;
  int codebook_ = -1;
  std::vector<std::int32_t> idle_;
};

namespace detail {

/// [B, D, G, G] -> rows [B*G*G, D] in cell-major order.
inline Var<float> latent_rows(Var<float> z) {
  const auto& s = z.shape();
  return diff::reshape(diff::permute(z, {0, 2, 3, 1}), Shape{s[0] * s[2] * s[3], s[1]});
}

inline Var<float> latent_grid(Var<float> rows, std::size_t B, std::size_t G, std::size_t D) {
  return diff::permute(diff::reshape(rows, Shape{B, G, G, D}), {0, 3, 1, 2});
}

inline std::vector<int> assign_codes(const Tensor<float>& codebook, const Tensor<float>& rows) {
  const std::size_t D = rows.dim(1);
  std::vector<int> ids(rows.dim(0));
  for (std::size_t r = 0; r < ids.size(); ++r) ids[r] = nearest_code(codebook, rows.data() + r * D);
  return ids;
}

}  // namespace detail

/// Forward-only encoding of image tensors [B, 3, S, S] in [0, 1].
inline std::vector<Encoded> vq_encode_tensor(const VqModel& m, Tensor<float> x) {
  const auto& cfg = m.config();
  const std::size_t G = std::size_t(cfg.grid), D = std::size_t(cfg.latent_dim), cells = G * G;
  const std::size_t B = x.dim(0);
  Graph<float> g;
  Var<float> rows = detail::latent_rows(m.encode(g, g.constant(std::move(x)), false));
  const auto& z = g.forward(rows);
  auto ids = detail::assign_codes(m.codebook(), z);
  std::vector<Encoded> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    auto& e = out[b];
    e.latent.assign(z.data() + b * cells * D, z.data() + (b + 1) * cells * D);
    e.index.assign(ids.begin() + std::ptrdiff_t(b * cells), ids.begin() + std::ptrdiff_t((b + 1) * cells));
    e.quantized.resize(cells * D);
    for (std::size_t c = 0; c < cells; ++c) {
      const float* row = m.codebook().data() + std::size_t(e.index[c]) * D;
      std::copy(row, row + D, e.quantized.begin() + std::ptrdiff_t(c * D));
    }
  }
  return out;
}

/// Forward-only encoding of a batch of images; the model is not modified.
inline std::vector<Encoded> vq_encode_batch(const VqModel& m, const std::vector<const envs::Image*>& images) {
  if (images.empty()) return {};
  return vq_encode_tensor(m, image_tensor(images, m.config().image_size));
}

inline Encoded vq_encode(const VqModel& m, const envs::Image& image) { return vq_encode_batch(m, {&image}).front(); }

/// Decodes quantized latents (cell-major [G*G*D]) to an image in [0, 1].
inline Tensor<float> vq_decode(const VqModel& m, const std::vector<float>& quantized) {
  const auto& cfg = m.config();
  const std::size_t G = std::size_t(cfg.grid), D = std::size_t(cfg.latent_dim);
  if (quantized.size() != G * G * D) throw std::invalid_argument("vq_decode: latent size mismatch");
  Graph<float> g;
  Var<float> rows = g.constant(Tensor<float>(Shape{G * G, D}, quantized));
  return g.forward(m.decode(g, detail::latent_grid(rows, 1, G, D), false));
}

/// Decodes quantized latents and encodes the reconstruction again.
inline Encoded vq_reencode(const VqModel& m, const std::vector<float>& quantized) {
  return vq_encode_tensor(m, vq_decode(m, quantized)).front();
}

/// Half the distance from code `k` to its nearest other code. A latent closer
/// than this to code k is assigned k.
inline float code_half_gap(const Tensor<float>& codebook, int k) {
  const std::size_t K = codebook.dim(0), D = codebook.dim(1);
  const float* e = codebook.data() + std::size_t(k) * D;
  float best = std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < K; ++j) {
    if (j == std::size_t(k)) continue;
    const float* o = codebook.data() + j * D;
    float d = 0;
    for (std::size_t i = 0; i < D; ++i) d += (o[i] - e[i]) * (o[i] - e[i]);
    best = std::min(best, d);
  }
  return 0.5f * std::sqrt(best);
}

/// Owns the optimizer state for training one VqModel.
class VqTrainer {
 public:
  explicit VqTrainer(VqModel& m) : m_(m), opt_(m.parameters(), diff::AdamWConfig{m.config().lr, 0.0}) {}

  /// One straight-through update; throws NumericError on a non-finite loss.
  VqLosses step(const std::vector<const envs::Image*>& images) {
    if (images.empty()) throw std::invalid_argument("vq_train_step: empty batch");
    const auto& cfg = m_.config();
    const std::size_t B = images.size(), G = std::size_t(cfg.grid), D = std::size_t(cfg.latent_dim);
    Graph<float> g;
    Var<float> x = g.constant(image_tensor(images, cfg.image_size));
    Var<float> ze = detail::latent_rows(m_.encode(g, x, true));
    auto ids = detail::assign_codes(m_.codebook(), g.forward(ze));
    Var<float> zq = diff::embedding(m_.codebook_node(g, true), ids, Shape{ids.size()});
    Var<float> st = diff::add(ze, diff::detach(diff::sub(zq, ze)));
    Var<float> recon = diff::mse(m_.decode(g, detail::latent_grid(st, B, G, D), true), x);
    Var<float> cb = diff::mse(diff::detach(ze), zq);
    Var<float> commit = diff::scale(diff::mse(ze, diff::detach(zq)), float(cfg.beta));
    Var<float> total = diff::add(diff::add(recon, cb), commit);
    VqLosses out;
    out.total = g.forward(total)[0];
    out.reconstruction = g.forward(recon)[0];
    out.codebook = g.forward(cb)[0];
    out.commitment = g.forward(commit)[0];
    if (!std::isfinite(out.total)) {
      throw diff::NumericError("vq_train_step: non-finite loss at step " + std::to_string(opt_.steps() + 1));
    }
    opt_.zero_grad();
    g.backward(total);
    opt_.step();
    revive_dead_codes(ids, g.node(ze.id).value);
    return out;
  }

  std::int64_t steps() const { return opt_.steps(); }

 private:
  void revive_dead_codes(const std::vector<int>& ids, const Tensor<float>& rows) {
    auto& idle = m_.idle_steps();
    std::vector<char> used(idle.size(), 0);
    for (int id : ids) used[std::size_t(id)] = 1;
    const std::size_t D = rows.dim(1);
    std::uniform_int_distribution<std::size_t> pick(0, rows.dim(0) - 1);
    auto& cb = m_.codebook();
    for (std::size_t k = 0; k < idle.size(); ++k) {
      if (used[k]) {
        idle[k] = 0;
        continue;
      }
      if (++idle[k] < m_.config().dead_after) continue;
      const float* src = rows.data() + pick(m_.rng()) * D;
      std::copy(src, src + D, cb.data() + k * D);
      idle[k] = 0;
    }
  }

  VqModel& m_;
  diff::AdamW<float> opt_;
};

inline VqLosses vq_train_step(VqTrainer& trainer, const std::vector<const envs::Image*>& images) {
  return trainer.step(images);
}

/// One index matrix and one quantized feature row per distinct image.
struct VqLabels {
  std::vector<IndexMatrix> index;
  /// [n_images, G*G*D]
  std::shared_ptr<const Tensor<float>> features;
};

/// Labels every image of `store` (ids follow the store). Labeling is a pure
/// function of image bytes and runs in `workers` threads.
inline VqLabels vq_label_images(const VqModel& m, const data::ImageStore& store, int workers = 1,
                                std::size_t batch = 64) {
  const std::size_t n = store.size();
  const auto& cfg = m.config();
  const std::size_t F = std::size_t(cfg.grid * cfg.grid * cfg.latent_dim);
  VqLabels out;
  out.index.resize(n);
  auto feats = std::make_shared<Tensor<float>>(Shape{n, F});
  const std::size_t chunks = (n + batch - 1) / batch;
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t c = next++; c < chunks; c = next++) {
      std::vector<const envs::Image*> imgs;
      for (std::size_t i = c * batch; i < std::min(n, (c + 1) * batch); ++i) imgs.push_back(&store.at(std::uint32_t(i)));
      auto enc = vq_encode_batch(m, imgs);
      for (std::size_t j = 0; j < enc.size(); ++j) {
        std::size_t i = c * batch + j;
        out.index[i] = std::move(enc[j].index);
        std::copy(enc[j].quantized.begin(), enc[j].quantized.end(), feats->data() + i * F);
      }
    }
  };
  const int w = std::max(1, std::min<int>(workers, int(chunks)));
  if (w == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < w; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  out.features = feats;
  return out;
}

inline VqLabels vq_label_dataset(const VqModel& m, const data::Dataset& ds, int workers = 1) {
  if (!envs::has_images(ds.env_kind)) throw std::invalid_argument("vq_label_dataset: dataset has no images");
  for (const auto& h : ds.histories)
    for (const auto& ep : h.episodes)
      for (const auto& t : ep) {
        if (t.obs >= ds.images.size()) {
          throw std::out_of_range("vq_label_dataset: observation " + std::to_string(t.obs) + " missing from image store");
        }
      }
  return vq_label_images(m, ds.images, workers);
}

// VQ checkpoint, little-endian:
//   "ICRLVQ1"
//   u32 K | u32 D | u32 G | u32 image size | u32 channels | f64 beta | f64 lr | u32 dead after
//   u32 parameter count; per parameter: str name | u32 rank | u32 dims | f32 values
//   u32 K idle counters
//   u32 CRC32 of everything after the magic
inline constexpr const char* kVqMagic = "ICRLVQ";
inline constexpr char kVqVersion = '1';

inline std::vector<std::uint8_t> encode_vq(const VqModel& m) {
  io::ByteWriter w;
  w.raw(kVqMagic, 6);
  w.u8(std::uint8_t(kVqVersion));
  const std::size_t start = w.size();
  const auto& c = m.config();
  for (int v : {c.codebook_size, c.latent_dim, c.grid, c.image_size, c.channels}) w.u32(std::uint32_t(v));
  w.f64(c.beta);
  w.f64(c.lr);
  w.u32(std::uint32_t(c.dead_after));
  w.u32(std::uint32_t(m.params().size()));
  for (const auto& p : m.params()) {
    w.str(p.name);
    w.u32(std::uint32_t(p.value.rank()));
    for (auto d : p.value.shape()) w.u32(std::uint32_t(d));
    for (float v : p.value.values()) w.f32(v);
  }
  for (auto v : m.idle_steps()) w.u32(std::uint32_t(v));
  w.u32(w.crc_since(start));
  return w.bytes();
}

inline VqModel decode_vq(std::vector<std::uint8_t> bytes, const std::string& source = "vq") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic(kVqMagic, kVqVersion);
  const std::size_t start = r.pos();
  r.expect_tail_crc(start);
  VqConfig c;
  c.codebook_size = int(r.u32());
  c.latent_dim = int(r.u32());
  c.grid = int(r.u32());
  c.image_size = int(r.u32());
  c.channels = int(r.u32());
  c.beta = r.f64();
  c.lr = r.f64();
  c.dead_after = int(r.u32());
  auto invalid = [&](const std::string& m) { return io::FormatError(io::FormatError::Kind::Invalid, source + ": " + m); };
  if (c.codebook_size > 1 << 16 || c.latent_dim > 1 << 12 || c.channels > 1 << 12 || c.image_size > 1 << 12) {
    throw invalid("implausible dimensions");
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw invalid(e.what());
  }
  VqModel m(c, 0);
  std::uint32_t n = r.u32();
  if (n != m.params().size()) throw invalid(std::to_string(n) + " parameters, config implies " + std::to_string(m.params().size()));
  for (auto& p : m.params()) {
    std::string name = r.str();
    std::uint32_t rank = r.u32();
    if (rank > 8) throw invalid("bad rank for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    if (name != p.name || shape != p.value.shape()) throw invalid("parameter " + name + " does not match " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = r.f32();
  }
  for (auto& v : m.idle_steps()) v = std::int32_t(r.u32());
  r.expect_crc(start);
  if (r.remaining() != 0) throw invalid("trailing bytes");
  for (const auto& p : m.params())
    if (!p.value.all_finite()) throw invalid("non-finite value in " + p.name);
  return m;
}

inline void save_vq(const std::string& path, const VqModel& m) { io::write_file(path, encode_vq(m)); }
inline VqModel load_vq(const std::string& path) { return decode_vq(io::read_file(path), path); }

}  // namespace icrl::vq

#pragma once

#include <memory>
#include <vector>

#include "icrl/harness/rollout.hpp"
#include "icrl/quantizer/vq.hpp"

namespace icrl::harness {

/// Model policy for image observations. Each new image is labeled by a
/// forward pass of the frozen VQ model and cached by content.
class PixelModelPolicy : public ModelPolicy {
 public:
  PixelModelPolicy(model::Transformer<float>& m, model::DecodeConfig decode, const vq::VqModel& vq)
      : ModelPolicy(m, decode), vq_(vq) {
    const auto& vc = vq.config();
    width_ = std::size_t(vc.grid * vc.grid * vc.latent_dim);
    if (m.config().obs_input != model::ObsInput::Latent || std::size_t(m.config().obs_dim) != width_) {
      throw std::invalid_argument("pixel policy: model must take latent observations of width " + std::to_string(width_));
    }
  }

  std::uint32_t encode(const envs::Observation& o) override {
    if (!o.has_image()) throw std::invalid_argument("pixel policy: observation has no image");
    std::uint32_t id = store_.intern(o.image);
    if (id == labels_.size()) {
      auto e = vq::vq_encode(vq_, o.image);
      labels_.push_back(std::move(e.index));
      rows_.insert(rows_.end(), e.quantized.begin(), e.quantized.end());
      table_.reset();
    }
    return id;
  }

  std::size_t distinct_images() const { return store_.size(); }

 protected:
  const std::vector<match::IndexMatrix>* labels() override { return &labels_; }

  std::shared_ptr<const diff::Tensor<float>> features() override {
    if (!table_) table_ = std::make_shared<diff::Tensor<float>>(diff::Shape{labels_.size(), width_}, rows_);
    return table_;
  }

 private:
  const vq::VqModel& vq_;
  std::size_t width_ = 0;
  data::ImageStore store_;
  std::vector<match::IndexMatrix> labels_;
  std::vector<float> rows_;
  std::shared_ptr<const diff::Tensor<float>> table_;
};

}  // namespace icrl::harness

#pragma once

#include <string>
#include <vector>

#include "mixsearch/tensor.hpp"

namespace mixsearch {

/// One image-label pair. Original samples carry weights {1} and a single
/// source (themselves); composites record the mixing weights and the ids of
/// the k samples they were built from.
struct Sample {
  Tensor image;  // (1, 1, H, W), values in [0, 1]
  Tensor label;  // (1, num_classes, H, W), per-pixel distribution
  /// Domain of the sample; composites drawn from several domains use kMixedDomain.
  int domain_id = 0;
  std::string sample_id;
  std::vector<double> weights{1.0};
  std::vector<std::string> sources;

  static constexpr int kMixedDomain = -1;

  bool is_composite() const { return weights.size() > 1; }
  int height() const { return image.shape().h; }
  int width() const { return image.shape().w; }
  int num_classes() const { return label.shape().c; }
};

struct Dataset {
  std::string name;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  const Sample& operator[](std::size_t i) const { return samples[i]; }
};

/// Stacks images and labels of the chosen samples into batch tensors.
struct Batch {
  Tensor images;
  Tensor labels;
};
Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices);

}  // namespace mixsearch

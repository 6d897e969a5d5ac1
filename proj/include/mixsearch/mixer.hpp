#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "mixsearch/dataset.hpp"
#include "mixsearch/rng.hpp"

namespace mixsearch::mixer {

struct MixConfig {
  int k = 2;
  double mu = 0.5;
  /// Number of virtual samples; unset means twice the union size.
  std::optional<int> m;
  std::uint64_t seed = 0;
  bool include_originals = true;
};

/// Draws k i.i.d. Beta(mu, mu) logits and returns their softmax.
/// Throws InvalidHyperparameter for k < 1 or mu <= 0.
std::vector<double> sample_mix_weights(int k, double mu, Rng& rng);

/// Convex combination of images and labels. Throws ShapeMismatch when the
/// samples disagree in size or class count and WeightSumViolation when the
/// weights are not a probability vector (tolerance 1e-12).
Sample make_composite(std::span<const Sample* const> samples, std::span<const double> weights);

/// Concatenation in argument order; domain ids are kept.
Dataset build_union(std::span<const Dataset> datasets);

/// cfg.m composites, each from k distinct samples drawn uniformly from the
/// union, optionally followed by the originals. Composite l uses its own
/// derived random stream, so the output depends only on (datasets, cfg).
/// Throws InsufficientSamples when the union holds fewer than k samples.
Dataset build_composite_dataset(std::span<const Dataset> datasets, const MixConfig& cfg);

}  // namespace mixsearch::mixer

#include "mixsearch/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mixsearch/error.hpp"

namespace mixsearch::mixer {

std::vector<double> sample_mix_weights(int k, double mu, Rng& rng) {
  if (k < 1) throw Error(Errc::InvalidHyperparameter, "k must be at least 1");
  if (!(mu > 0.0) || !std::isfinite(mu)) {
    throw Error(Errc::InvalidHyperparameter, "mu must be a positive finite number");
  }
  std::vector<double> w(k);
  for (double& v : w) v = rng.beta(mu, mu);
  const double top = *std::max_element(w.begin(), w.end());
  double total = 0.0;
  for (double& v : w) {
    v = std::exp(v - top);
    total += v;
  }
  for (double& v : w) v /= total;
  return w;
}

Sample make_composite(std::span<const Sample* const> samples, std::span<const double> weights) {
  if (samples.empty()) throw Error(Errc::EmptyInput, "make_composite of no samples");
  if (weights.size() != samples.size()) {
    throw Error(Errc::WeightSumViolation, "expected " + std::to_string(samples.size()) +
                                              " weights, got " + std::to_string(weights.size()));
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0 && w <= 1.0)) throw Error(Errc::WeightSumViolation, "weight outside [0, 1]");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw Error(Errc::WeightSumViolation, "weights sum to " + std::to_string(total));
  }
  const Sample& first = *samples[0];
  for (const Sample* s : samples) {
    if (!(s->image.shape() == first.image.shape()) || !(s->label.shape() == first.label.shape())) {
      throw Error(Errc::ShapeMismatch, "make_composite: " + s->sample_id + " has image " +
                                           s->image.shape().str() + ", label " +
                                           s->label.shape().str());
    }
  }

  Sample out;
  out.image = Tensor(first.image.shape());
  out.label = Tensor(first.label.shape());
  out.domain_id = first.domain_id;
  out.weights.assign(weights.begin(), weights.end());
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const Sample& s = *samples[j];
    const double w = weights[j];
    for (std::size_t i = 0; i < out.image.size(); ++i) out.image[i] += w * s.image[i];
    for (std::size_t i = 0; i < out.label.size(); ++i) out.label[i] += w * s.label[i];
    out.sources.push_back(s.sample_id);
    if (s.domain_id != out.domain_id) out.domain_id = Sample::kMixedDomain;
  }
  return out;
}

Dataset build_union(std::span<const Dataset> datasets) {
  if (datasets.empty()) throw Error(Errc::EmptyInput, "union of no datasets");
  Dataset out;
  const Sample* ref = nullptr;
  for (const Dataset& ds : datasets) {
    if (!out.name.empty()) out.name += "+";
    out.name += ds.name;
    for (const Sample& s : ds.samples) {
      if (ref && (!(s.image.shape() == ref->image.shape()) ||
                  !(s.label.shape() == ref->label.shape()))) {
        throw Error(Errc::ShapeMismatch, "union: " + s.sample_id + " differs in size or classes");
      }
      ref = ref ? ref : &s;
      out.samples.push_back(s);
    }
  }
  return out;
}

Dataset build_composite_dataset(std::span<const Dataset> datasets, const MixConfig& cfg) {
  if (cfg.k < 1 || !(cfg.mu > 0.0)) {
    throw Error(Errc::InvalidHyperparameter, "mix config needs k >= 1 and mu > 0");
  }
  Dataset pool = build_union(datasets);
  const std::size_t n = pool.size();
  if (n < static_cast<std::size_t>(cfg.k)) {
    throw Error(Errc::InsufficientSamples, "union has " + std::to_string(n) +
                                               " samples, mixing needs k = " +
                                               std::to_string(cfg.k));
  }
  const int m = cfg.m.value_or(static_cast<int>(2 * n));
  if (m < 0) throw Error(Errc::InvalidHyperparameter, "m must be non-negative");

  Dataset out;
  out.name = "mix(" + pool.name + ")";
  out.samples.reserve(m + (cfg.include_originals ? n : 0));
  std::vector<std::size_t> order(n);
  std::vector<const Sample*> chosen(cfg.k);
  for (int l = 0; l < m; ++l) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(l)));
    // Partial Fisher-Yates: the first k slots are a uniform draw without
    // replacement.
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int j = 0; j < cfg.k; ++j) {
      const std::size_t r = j + rng.index(n - j);
      std::swap(order[j], order[r]);
      chosen[j] = &pool.samples[order[j]];
    }
    const auto weights = sample_mix_weights(cfg.k, cfg.mu, rng);
    Sample s = make_composite(chosen, weights);
    char id[32];
    std::snprintf(id, sizeof id, "mix_%06d", l);
    s.sample_id = id;
    out.samples.push_back(std::move(s));
  }
  if (cfg.include_originals) {
    for (Sample& s : pool.samples) {
      if (s.sources.empty()) s.sources = {s.sample_id};
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace mixsearch::mixer

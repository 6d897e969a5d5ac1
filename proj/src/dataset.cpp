#include "mixsearch/dataset.hpp"

#include "mixsearch/error.hpp"

namespace mixsearch {

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error(Errc::EmptyInput, "make_batch with no indices");
  std::vector<const Tensor*> images, labels;
  images.reserve(indices.size());
  labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw Error(Errc::InvalidQuery, "make_batch index out of range");
    images.push_back(&ds.samples[i].image);
    labels.push_back(&ds.samples[i].label);
  }
  return {stack_batch(images), stack_batch(labels)};
}

}  // namespace mixsearch

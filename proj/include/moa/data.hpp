#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/tensor.hpp"

namespace moa {

// Images stored [N, H, W, 3] row-major, normalized floats; labels in
// [0, num_classes).
struct LabeledImageSet {
  int64_t height = 0, width = 0, channels = 3;
  int64_t num_classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t image_elems() const { return height * width * channels; }
};

enum class CifarVariant { Cifar10, Cifar100 };
enum class Split { Train, Test };

// Per-channel normalization constants applied after scaling bytes to [0,1].
struct Normalization {
  float mean[3];
  float std[3];
};
Normalization cifar_normalization(CifarVariant variant);

// Standard CIFAR binary batches: per record 1 (cifar10) or 2 (cifar100,
// coarse then fine) label bytes followed by 3072 channel-planar pixel bytes.
LabeledImageSet load_cifar(const std::string& dir, CifarVariant variant, Split split);

// Deterministic class-conditional gratings plus seeded noise; linearly
// separable in pixel space. Identity normalization.
LabeledImageSet synth_dataset(int64_t num_classes, int64_t n_per_class, int64_t height,
                              int64_t width, uint64_t seed);

// Batch index plan for one epoch: seeded permutation when shuffled, final
// partial batch included, every sample exactly once.
std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch_size, bool shuffle,
                                                uint64_t seed);

// Materializes one batch as a [b, H, W, 3] tensor plus its labels.
template <class S>
std::pair<Tensor<S>, std::vector<int>> make_batch(const LabeledImageSet& set,
                                                  const std::vector<int64_t>& indices) {
  int64_t elems = set.image_elems();
  std::vector<S> data(indices.size() * static_cast<size_t>(elems));
  std::vector<int> labels(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const float* src = set.images.data() + indices[i] * elems;
    S* dst = data.data() + static_cast<int64_t>(i) * elems;
    for (int64_t j = 0; j < elems; ++j) dst[j] = static_cast<S>(src[j]);
    labels[i] = set.labels[static_cast<size_t>(indices[i])];
  }
  Tensor<S> x = Tensor<S>::from(
      {static_cast<int64_t>(indices.size()), set.height, set.width, set.channels},
      std::move(data));
  return {std::move(x), std::move(labels)};
}

}  // namespace moa

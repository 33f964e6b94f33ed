#include "moa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "moa/errors.hpp"

namespace moa {

Normalization cifar_normalization(CifarVariant variant) {
  if (variant == CifarVariant::Cifar10)
    return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  return {{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}};
}

namespace {

void load_cifar_file(const std::string& path, int label_bytes, int num_classes,
                     const Normalization& norm, LabeledImageSet& out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cifar: cannot open " + path);
  constexpr int64_t kSide = 32;
  constexpr int64_t kPixels = kSide * kSide;
  const int64_t record = label_bytes + 3 * kPixels;
  std::vector<unsigned char> buf(static_cast<size_t>(record));
  int64_t offset = 0;
  while (true) {
    is.read(reinterpret_cast<char*>(buf.data()), record);
    std::streamsize got = is.gcount();
    if (got == 0) break;
    if (got != record)
      throw IoError("cifar: truncated record in " + path + " at byte offset " +
                    std::to_string(offset) + " (" + std::to_string(got) + " of " +
                    std::to_string(record) + " bytes)");
    int label = buf[static_cast<size_t>(label_bytes - 1)];  // fine label for cifar100
    if (label >= num_classes)
      throw FormatError("cifar: label " + std::to_string(label) + " out of range in " + path +
                        " at byte offset " + std::to_string(offset));
    out.labels.push_back(label);
    size_t base = out.images.size();
    out.images.resize(base + static_cast<size_t>(3 * kPixels));
    // channel-planar R,G,B in the file -> interleaved HWC here
    for (int64_t p = 0; p < kPixels; ++p)
      for (int64_t c = 0; c < 3; ++c) {
        float v = static_cast<float>(buf[static_cast<size_t>(label_bytes + c * kPixels + p)]) / 255.0f;
        out.images[base + static_cast<size_t>(p * 3 + c)] =
            (v - norm.mean[c]) / norm.std[c];
      }
    offset += record;
  }
  if (offset == 0) throw FormatError("cifar: empty file " + path);
}

}  // namespace

LabeledImageSet load_cifar(const std::string& dir, CifarVariant variant, Split split) {
  LabeledImageSet set;
  set.height = set.width = 32;
  set.channels = 3;
  Normalization norm = cifar_normalization(variant);
  if (variant == CifarVariant::Cifar10) {
    set.num_classes = 10;
    if (split == Split::Train)
      for (int i = 1; i <= 5; ++i)
        load_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin", 1, 10, norm, set);
    else
      load_cifar_file(dir + "/test_batch.bin", 1, 10, norm, set);
  } else {
    set.num_classes = 100;
    load_cifar_file(dir + (split == Split::Train ? "/train.bin" : "/test.bin"), 2, 100, norm, set);
  }
  return set;
}

LabeledImageSet synth_dataset(int64_t num_classes, int64_t n_per_class, int64_t height,
                              int64_t width, uint64_t seed) {
  if (num_classes < 1 || n_per_class < 1 || height < 1 || width < 1)
    throw ContractError("synth_dataset: all sizes must be positive");
  LabeledImageSet set;
  set.height = height;
  set.width = width;
  set.channels = 3;
  set.num_classes = num_classes;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  const double pi = 3.14159265358979323846;
  for (int64_t k = 0; k < num_classes; ++k) {
    // one grating per class: frequency from k, orientation alternating axes
    double freq = 1.0 + static_cast<double>(k / 2);
    bool horizontal = k % 2 == 0;
    for (int64_t n = 0; n < n_per_class; ++n) {
      set.labels.push_back(static_cast<int>(k));
      for (int64_t i = 0; i < height; ++i)
        for (int64_t j = 0; j < width; ++j) {
          double t = horizontal ? static_cast<double>(i) / height : static_cast<double>(j) / width;
          float base = static_cast<float>(std::sin(2.0 * pi * freq * t));
          for (int64_t c = 0; c < 3; ++c) {
            float phase = static_cast<float>(std::cos(2.0 * pi * (freq * t + 0.25 * c)));
            set.images.push_back(0.5f * base + 0.5f * phase + noise(rng));
          }
        }
    }
  }
  return set;
}

std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch_size, bool shuffle,
                                                uint64_t seed) {
  if (batch_size < 1) throw ContractError("batches: batch_size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t stop = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return batches;
}

}  // namespace moa

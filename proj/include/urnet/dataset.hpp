#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "urnet/tensor.hpp"

namespace urnet {

/// Per-channel normalization applied after scaling pixels to [0, 1].
struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;

  static Normalization identity(std::size_t channels);
  /// Widely used CIFAR-10 training-set statistics.
  static Normalization cifar10();
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// Images [M, C, H, W] plus integer labels. Immutable after construction.
class Dataset {
 public:
  Dataset(Tensor images, std::vector<int> labels, std::size_t num_classes, std::string split,
          Normalization normalization);

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t channels() const { return images_.dim(1); }
  std::size_t height() const { return images_.dim(2); }
  std::size_t width() const { return images_.dim(3); }
  const std::string& split() const noexcept { return split_; }
  const Normalization& normalization() const noexcept { return normalization_; }
  const Tensor& images() const noexcept { return images_; }
  std::span<const int> labels() const noexcept { return labels_; }

  Batch gather(std::span<const std::size_t> indices) const;
  /// Contiguous slice [begin, begin + count).
  Batch slice(std::size_t begin, std::size_t count) const;
  /// Pixel values of sample i, channel-major.
  std::span<const double> sample(std::size_t i) const;

 private:
  Tensor images_;
  std::vector<int> labels_;
  std::size_t num_classes_;
  std::string split_;
  Normalization normalization_;
};

inline constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
inline constexpr std::size_t kCifar10RecordBytes = 1 + kCifarImageBytes;
inline constexpr std::size_t kCifar100RecordBytes = 2 + kCifarImageBytes;

enum class CifarVariant { Cifar10, Cifar100 };

/// Reads the standard CIFAR binary layout: per record a label byte (CIFAR-100:
/// coarse then fine) followed by the R, G and B planes of a 32x32 image.
Dataset load_cifar_binary(const std::filesystem::path& path, const Normalization& normalization,
                          std::string split = "train", CifarVariant variant = CifarVariant::Cifar10);
/// Concatenates several batch files in order.
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths, const Normalization& normalization,
                          std::string split = "train", CifarVariant variant = CifarVariant::Cifar10);

struct SyntheticSpec {
  std::size_t size = 1024;
  std::size_t num_classes = 10;
  std::size_t image_size = 8;
  std::uint64_t seed = 7;
  double noise = 0.5;
  std::string split = "train";
};

/// Class templates shared by every split generated from the same seed: smooth
/// random 3xHxH patterns, [K, 3, H, H] flattened.
std::vector<std::vector<double>> synthetic_templates(std::size_t num_classes, std::size_t image_size,
                                                     std::uint64_t seed);

/// Each sample is its class template shifted by up to one pixel (circularly),
/// with random contrast, plus Gaussian pixel noise. The split name selects an
/// independent sample stream over the same templates.
Dataset make_synthetic(const SyntheticSpec& spec);
Dataset make_synthetic(std::size_t size, std::size_t num_classes, std::size_t image_size, std::uint64_t seed);

/// Zero-pad-and-crop, plus a random horizontal flip when `flip` is set, drawn
/// independently per sample.
Tensor augment_batch(const Tensor& images, std::size_t pad, bool flip, std::mt19937_64& rng);

}  // namespace urnet

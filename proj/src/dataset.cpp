#include "urnet/dataset.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "urnet/errors.hpp"

namespace urnet {

Normalization Normalization::identity(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

Normalization Normalization::cifar10() {
  return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
}

Dataset::Dataset(Tensor images, std::vector<int> labels, std::size_t num_classes, std::string split,
                 Normalization normalization)
    : images_(std::move(images)),
      labels_(std::move(labels)),
      num_classes_(num_classes),
      split_(std::move(split)),
      normalization_(std::move(normalization)) {
  if (images_.rank() != 4 || images_.dim(0) != labels_.size()) {
    throw DimensionError("dataset: images " + shape_to_string(images_.shape()) + " vs " +
                         std::to_string(labels_.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] < 0 || static_cast<std::size_t>(labels_[i]) >= num_classes_) {
      throw DataError("dataset: label " + std::to_string(labels_[i]) + " of sample " + std::to_string(i) +
                      " outside [0," + std::to_string(num_classes_) + ")");
    }
  }
}

std::span<const double> Dataset::sample(std::size_t i) const {
  const auto per = channels() * height() * width();
  return images_.data().subspan(i * per, per);
}

Batch Dataset::gather(std::span<const std::size_t> indices) const {
  const auto per = channels() * height() * width();
  std::vector<double> values;
  values.reserve(indices.size() * per);
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) {
    const auto s = sample(i);
    values.insert(values.end(), s.begin(), s.end());
    labels.push_back(labels_[i]);
  }
  return {Tensor::from({indices.size(), channels(), height(), width()}, std::move(values)), std::move(labels)};
}

Batch Dataset::slice(std::size_t begin, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather(idx);
}

namespace {

void read_cifar_file(const std::filesystem::path& path, const Normalization& norm, CifarVariant variant,
                     std::vector<double>& values, std::vector<int>& labels, std::size_t num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t record = variant == CifarVariant::Cifar10 ? kCifar10RecordBytes : kCifar100RecordBytes;
  const std::size_t label_bytes = record - kCifarImageBytes;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of the " + std::to_string(record) + "-byte record size");
  }
  const std::size_t plane = 32 * 32;
  for (std::size_t r = 0; r < bytes.size() / record; ++r) {
    const unsigned char* rec = bytes.data() + r * record;
    // CIFAR-100 stores coarse then fine label; the fine label is the class.
    const int label = rec[label_bytes - 1];
    if (static_cast<std::size_t>(label) >= num_classes) {
      throw DataError(path.string() + ": record " + std::to_string(r) + " has label " + std::to_string(label) +
                      " >= " + std::to_string(num_classes));
    }
    labels.push_back(label);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double pixel = rec[label_bytes + c * plane + p] / 255.0;
        values.push_back((pixel - norm.mean[c]) / norm.std[c]);
      }
    }
  }
}

}  // namespace

Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths, const Normalization& normalization,
                          std::string split, CifarVariant variant) {
  if (normalization.mean.size() != 3 || normalization.std.size() != 3) {
    throw ConfigError("CIFAR normalization needs 3 means and 3 standard deviations");
  }
  const std::size_t classes = variant == CifarVariant::Cifar10 ? 10 : 100;
  std::vector<double> values;
  std::vector<int> labels;
  for (const auto& p : paths) read_cifar_file(p, normalization, variant, values, labels, classes);
  const auto m = labels.size();
  return Dataset(Tensor::from({m, 3, 32, 32}, std::move(values)), std::move(labels), classes, std::move(split),
                 normalization);
}

Dataset load_cifar_binary(const std::filesystem::path& path, const Normalization& normalization, std::string split,
                          CifarVariant variant) {
  return load_cifar_binary(std::vector<std::filesystem::path>{path}, normalization, std::move(split), variant);
}

namespace {

constexpr std::size_t kSyntheticChannels = 3;
// Template contrast relative to unit pixel noise; sets the task difficulty.
constexpr double kTemplateAmplitude = 0.25;

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<double> circular_blur(const std::vector<double>& plane, std::size_t h) {
  std::vector<double> out(plane.size(), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < h; ++x) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < 3; ++dy) {
        for (std::size_t dx = 0; dx < 3; ++dx) acc += plane[((y + h + dy - 1) % h) * h + (x + h + dx - 1) % h];
      }
      out[y * h + x] = acc / 9.0;
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> synthetic_templates(std::size_t num_classes, std::size_t image_size,
                                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t plane = image_size * image_size;
  std::vector<std::vector<double>> templates(num_classes);
  for (auto& t : templates) {
    t.reserve(kSyntheticChannels * plane);
    for (std::size_t c = 0; c < kSyntheticChannels; ++c) {
      std::vector<double> field(plane);
      for (auto& v : field) v = normal(rng);
      field = circular_blur(circular_blur(field, image_size), image_size);
      double sq = 0.0;
      for (double v : field) sq += v * v;
      const double inv = 1.0 / std::sqrt(sq / static_cast<double>(plane));
      for (double v : field) t.push_back(v * inv);
    }
  }
  return templates;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.size == 0 || spec.image_size == 0) throw ConfigError("synthetic dataset sizes must be positive");
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic noise must be non-negative");
  const auto templates = synthetic_templates(spec.num_classes, spec.image_size, spec.seed);
  std::seed_seq seq{spec.seed, fnv1a(spec.split)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> label_draw(0, static_cast<int>(spec.num_classes) - 1);
  std::uniform_int_distribution<int> shift_draw(-1, 1);
  std::uniform_real_distribution<double> contrast_draw(0.7, 1.3);

  const std::size_t h = spec.image_size, plane = h * h;
  std::vector<double> values;
  values.reserve(spec.size * kSyntheticChannels * plane);
  std::vector<int> labels(spec.size);
  for (std::size_t i = 0; i < spec.size; ++i) {
    const int label = label_draw(rng);
    labels[i] = label;
    const auto sy = static_cast<std::size_t>(shift_draw(rng) + static_cast<int>(h));
    const auto sx = static_cast<std::size_t>(shift_draw(rng) + static_cast<int>(h));
    const double gain = kTemplateAmplitude * contrast_draw(rng);
    const auto& t = templates[static_cast<std::size_t>(label)];
    for (std::size_t c = 0; c < kSyntheticChannels; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < h; ++x) {
          const double base = t[c * plane + ((y + sy) % h) * h + (x + sx) % h];
          values.push_back(gain * base + spec.noise * normal(rng));
        }
      }
    }
  }
  return Dataset(Tensor::from({spec.size, kSyntheticChannels, h, h}, std::move(values)), std::move(labels),
                 spec.num_classes, spec.split, Normalization::identity(kSyntheticChannels));
}

Dataset make_synthetic(std::size_t size, std::size_t num_classes, std::size_t image_size, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.size = size;
  spec.num_classes = num_classes;
  spec.image_size = image_size;
  spec.seed = seed;
  return make_synthetic(spec);
}

Tensor augment_batch(const Tensor& images, std::size_t pad, bool flip, std::mt19937_64& rng) {
  const auto b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> out(images.numel(), 0.0);
  const auto in = images.data();
  for (std::size_t n = 0; n < b; ++n) {
    const auto oy = offset(rng), ox = offset(rng);
    const bool mirror = flip && coin(rng);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = in.data() + (n * c + ch) * h * w;
      double* dst = out.data() + (n * c + ch) * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        const auto sy = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad);
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t xx = mirror ? w - 1 - x : x;
          const auto sx = static_cast<std::ptrdiff_t>(xx + ox) - static_cast<std::ptrdiff_t>(pad);
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
          dst[y * w + x] = src[sy * static_cast<std::ptrdiff_t>(w) + sx];
        }
      }
    }
  }
  return Tensor::from(images.shape(), std::move(out));
}

}  // namespace urnet

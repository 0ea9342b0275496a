#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <variant>
#include <vector>

#include "urnet/dataset.hpp"
#include "urnet/model.hpp"

namespace urnet {

struct ConvLayer {
  std::size_t in_channels, out_channels, kernel, out_height, out_width;
};
struct LinearLayer {
  std::size_t in_features, out_features;
};
using LayerSpec = std::variant<ConvLayer, LinearLayer>;

/// Multiply-accumulate count. Normalization, activations and pooling count zero.
std::uint64_t count_macs(const LayerSpec& layer);

/// MAC budget of a gated network, split into always-paid and skippable parts.
struct FlopsModel {
  std::vector<std::uint64_t> block_macs;  // both convs of F, skippable
  std::vector<std::uint64_t> cgm_macs;
  std::uint64_t stem_macs = 0;
  std::uint64_t head_macs = 0;
  std::uint64_t shortcut_macs = 0;  // projection convs run even when a gate is closed

  static FlopsModel for_spec(const ModelSpec& spec);

  std::uint64_t fixed_macs() const;
  /// Backbone with every block open, CGMs excluded.
  std::uint64_t backbone_macs() const;
  std::uint64_t total_cgm_macs() const;
  /// Backbone plus CGMs with every block open.
  std::uint64_t full_macs() const;
  double cgm_overhead_ratio() const;
  /// fixed + sum_n gate_n * block_n.
  double sample_macs(std::span<const double> gates) const;
};

struct UsageStats {
  std::size_t count = 0;
  std::vector<double> block_mean;      // per block, in [0, 1]
  std::vector<double> block_variance;  // per block, over samples
  double usage_mean = 0.0;             // open blocks per sample
  double usage_std = 0.0;
  double flops_mean = 0.0;  // MACs
  double flops_std = 0.0;
};

/// Count / sum / sum-of-squares of values shifted by the first value seen, so
/// constant data yields a variance of exactly zero.
class Moments {
 public:
  void add(double x);
  void merge(const Moments& other);
  std::size_t count() const noexcept { return count_; }
  double mean() const;
  /// Population variance.
  double variance() const;

 private:
  std::size_t count_ = 0;
  double shift_ = 0.0;
  double sum_ = 0.0;
  double sq_ = 0.0;
};

/// Streams per-sample gate rows into usage and FLOPs moments.
class UsageAccumulator {
 public:
  explicit UsageAccumulator(std::size_t blocks);
  void add(std::span<const double> gates, double macs);
  void merge(const UsageAccumulator& other);
  UsageStats finish() const;
  std::size_t count() const noexcept { return usage_.count(); }

 private:
  std::vector<Moments> blocks_;
  Moments usage_;
  Moments flops_;
};

struct EvalOptions {
  std::size_t batch_size = 128;
  bool keep_per_sample = false;
};

struct EvalResult {
  double accuracy = 0.0;
  UsageStats stats;
  std::vector<std::vector<double>> gates;  // per sample, when kept
  std::vector<double> sample_macs;         // per sample, when kept
};

/// Top-1 accuracy and gate usage at scale S. `policy` must be Eval or Override.
EvalResult evaluate(UrnetModel& model, const Dataset& data, ScaleParam scale, const ModePolicy& policy,
                    const EvalOptions& options = {});

/// Random-drop baseline accuracy: CGMs ignored, a fresh random block subset of
/// size round(S * N) for every `batch_size` samples.
EvalResult evaluate_random_drop(UrnetModel& model, const Dataset& data, ScaleParam scale, Rng& rng,
                                std::size_t batch_size = 16);

/// Entry (n, j): mean binary gate of block n at grid[j].
using UsageMap = std::vector<std::vector<double>>;
UsageMap usage_map(UrnetModel& model, const Dataset& data, const std::vector<double>& grid);
void write_usage_map_csv(std::ostream& out, const UsageMap& map, const std::vector<double>& grid);

struct CalibrationPoint {
  double scale;
  double mean_flops;
};

/// Running maximum over flops so the table is non-decreasing in S. Returns
/// true when the input needed adjusting.
bool apply_monotone_envelope(std::vector<CalibrationPoint>& table);

/// Largest S whose piecewise-linear FLOPs estimate fits the budget, clamped to
/// the table endpoints.
ScaleParam budget_to_scale(const std::vector<CalibrationPoint>& table, double budget);

}  // namespace urnet

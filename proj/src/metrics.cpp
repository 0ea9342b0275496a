#include "urnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "urnet/errors.hpp"

namespace urnet {

std::uint64_t count_macs(const LayerSpec& layer) {
  return std::visit(
      [](const auto& l) -> std::uint64_t {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, ConvLayer>) {
          return static_cast<std::uint64_t>(l.in_channels) * l.out_channels * l.kernel * l.kernel * l.out_height *
                 l.out_width;
        } else {
          return static_cast<std::uint64_t>(l.in_features) * l.out_features;
        }
      },
      layer);
}

FlopsModel FlopsModel::for_spec(const ModelSpec& spec) {
  spec.validate();
  FlopsModel f;
  std::size_t size = spec.image_size;
  std::size_t channels = spec.stage_channels.front();
  f.stem_macs = count_macs(ConvLayer{spec.in_channels, channels, 3, size, size});
  for (std::size_t s = 0; s < spec.stage_channels.size(); ++s) {
    const auto out = spec.stage_channels[s];
    for (std::size_t i = 0; i < spec.blocks_per_stage; ++i) {
      const std::size_t stride = (s > 0 && i == 0) ? 2 : 1;
      const std::size_t out_size = (size - 1) / stride + 1;
      f.block_macs.push_back(count_macs(ConvLayer{channels, out, 3, out_size, out_size}) +
                             count_macs(ConvLayer{out, out, 3, out_size, out_size}));
      if (stride != 1 || channels != out) f.shortcut_macs += count_macs(ConvLayer{channels, out, 1, out_size, out_size});
      const auto hidden = cgm_hidden_size(channels, spec.reduction);
      f.cgm_macs.push_back(count_macs(LinearLayer{channels + 1, hidden}) + count_macs(LinearLayer{hidden, 1}));
      channels = out;
      size = out_size;
    }
  }
  f.head_macs = count_macs(LinearLayer{channels, spec.num_classes});
  return f;
}

std::uint64_t FlopsModel::total_cgm_macs() const {
  return std::accumulate(cgm_macs.begin(), cgm_macs.end(), std::uint64_t{0});
}

std::uint64_t FlopsModel::fixed_macs() const { return stem_macs + head_macs + shortcut_macs + total_cgm_macs(); }

std::uint64_t FlopsModel::backbone_macs() const {
  return stem_macs + head_macs + shortcut_macs + std::accumulate(block_macs.begin(), block_macs.end(), std::uint64_t{0});
}

std::uint64_t FlopsModel::full_macs() const { return backbone_macs() + total_cgm_macs(); }

double FlopsModel::cgm_overhead_ratio() const {
  return static_cast<double>(total_cgm_macs()) / static_cast<double>(backbone_macs());
}

double FlopsModel::sample_macs(std::span<const double> gates) const {
  if (gates.size() != block_macs.size()) {
    throw DimensionError("sample_macs: " + std::to_string(gates.size()) + " gates for " +
                         std::to_string(block_macs.size()) + " blocks");
  }
  double total = static_cast<double>(fixed_macs());
  for (std::size_t n = 0; n < gates.size(); ++n) total += gates[n] * static_cast<double>(block_macs[n]);
  return total;
}

void Moments::add(double x) {
  if (count_ == 0) shift_ = x;
  const double d = x - shift_;
  ++count_;
  sum_ += d;
  sq_ += d * d;
}

void Moments::merge(const Moments& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  // Re-express the other side's sums relative to this shift.
  const double delta = other.shift_ - shift_;
  const double n = static_cast<double>(other.count_);
  sq_ += other.sq_ + 2.0 * delta * other.sum_ + n * delta * delta;
  sum_ += other.sum_ + n * delta;
  count_ += other.count_;
}

double Moments::mean() const {
  return count_ ? shift_ + sum_ / static_cast<double>(count_) : 0.0;
}

double Moments::variance() const {
  if (count_ == 0) return 0.0;
  const double n = static_cast<double>(count_);
  return std::max(0.0, (n * sq_ - sum_ * sum_) / (n * n));
}

UsageAccumulator::UsageAccumulator(std::size_t blocks) : blocks_(blocks) {}

void UsageAccumulator::add(std::span<const double> gates, double macs) {
  if (gates.size() != blocks_.size()) throw DimensionError("UsageAccumulator: wrong number of gates");
  double usage = 0.0;
  for (std::size_t n = 0; n < gates.size(); ++n) {
    blocks_[n].add(gates[n]);
    usage += gates[n];
  }
  usage_.add(usage);
  flops_.add(macs);
}

void UsageAccumulator::merge(const UsageAccumulator& other) {
  if (other.blocks_.size() != blocks_.size()) throw DimensionError("UsageAccumulator: block count mismatch");
  for (std::size_t n = 0; n < blocks_.size(); ++n) blocks_[n].merge(other.blocks_[n]);
  usage_.merge(other.usage_);
  flops_.merge(other.flops_);
}

UsageStats UsageAccumulator::finish() const {
  UsageStats s;
  s.count = usage_.count();
  for (const auto& b : blocks_) {
    s.block_mean.push_back(b.mean());
    s.block_variance.push_back(b.variance());
  }
  s.usage_mean = usage_.mean();
  s.usage_std = std::sqrt(usage_.variance());
  s.flops_mean = flops_.mean();
  s.flops_std = std::sqrt(flops_.variance());
  return s;
}

namespace {

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

EvalResult evaluate(UrnetModel& model, const Dataset& data, ScaleParam scale, const ModePolicy& policy,
                    const EvalOptions& options) {
  if (std::holds_alternative<policy::Train>(policy)) {
    throw ContractError("evaluate: training policy is not an evaluation protocol");
  }
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  const auto flops = FlopsModel::for_spec(model.spec());
  const auto n = model.num_blocks();
  const auto classes = model.spec().num_classes;
  UsageAccumulator acc(n);
  EvalResult result;
  std::size_t correct = 0;
  const std::size_t step = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t begin = 0; begin < data.size(); begin += step) {
    const auto count = std::min(step, data.size() - begin);
    const auto batch = data.slice(begin, count);
    const auto out = urnet_forward(batch.images, scale, model, policy, {NormMode::Eval, true});
    const auto logits = out.logits.data();
    const auto gates = out.record.gates.data();
    for (std::size_t b = 0; b < count; ++b) {
      if (argmax(logits.subspan(b * classes, classes)) == static_cast<std::size_t>(batch.labels[b])) ++correct;
      const auto row = gates.subspan(b * n, n);
      const double macs = flops.sample_macs(row);
      acc.add(row, macs);
      if (options.keep_per_sample) {
        result.gates.emplace_back(row.begin(), row.end());
        result.sample_macs.push_back(macs);
      }
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  result.stats = acc.finish();
  return result;
}

EvalResult evaluate_random_drop(UrnetModel& model, const Dataset& data, ScaleParam scale, Rng& rng,
                                std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("evaluate_random_drop: empty dataset");
  const auto flops = FlopsModel::for_spec(model.spec());
  const auto n = model.num_blocks();
  const auto classes = model.spec().num_classes;
  UsageAccumulator acc(n);
  std::size_t correct = 0;
  const std::size_t step = std::max<std::size_t>(1, batch_size);
  for (std::size_t begin = 0; begin < data.size(); begin += step) {
    const auto count = std::min(step, data.size() - begin);
    const auto batch = data.slice(begin, count);
    const auto keep = sample_random_keep_mask(scale, n, rng);
    const auto logits = masked_forward(batch.images, model, keep, NormMode::Eval);
    std::vector<double> row(keep.begin(), keep.end());
    const double macs = flops.sample_macs(row);
    for (std::size_t b = 0; b < count; ++b) {
      if (argmax(logits.data().subspan(b * classes, classes)) == static_cast<std::size_t>(batch.labels[b])) ++correct;
      acc.add(row, macs);
    }
  }
  EvalResult result;
  result.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  result.stats = acc.finish();
  return result;
}

UsageMap usage_map(UrnetModel& model, const Dataset& data, const std::vector<double>& grid) {
  if (!std::is_sorted(grid.begin(), grid.end())) throw ContractError("usage_map: scale grid must be ascending");
  UsageMap map(model.num_blocks(), std::vector<double>(grid.size(), 0.0));
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const auto stats = evaluate(model, data, ScaleParam(grid[j]), policy::Eval{}).stats;
    for (std::size_t n = 0; n < map.size(); ++n) map[n][j] = stats.block_mean[n];
  }
  return map;
}

void write_usage_map_csv(std::ostream& out, const UsageMap& map, const std::vector<double>& grid) {
  out.precision(17);
  out << "block";
  for (double s : grid) out << ',' << s;
  out << '\n';
  for (std::size_t n = 0; n < map.size(); ++n) {
    out << n;
    for (double v : map[n]) out << ',' << v;
    out << '\n';
  }
}

bool apply_monotone_envelope(std::vector<CalibrationPoint>& table) {
  bool changed = false;
  for (std::size_t i = 1; i < table.size(); ++i) {
    if (table[i].mean_flops < table[i - 1].mean_flops) {
      table[i].mean_flops = table[i - 1].mean_flops;
      changed = true;
    }
  }
  return changed;
}

ScaleParam budget_to_scale(const std::vector<CalibrationPoint>& table, double budget) {
  if (table.empty()) throw ContractError("budget_to_scale: empty calibration table");
  for (std::size_t i = 1; i < table.size(); ++i) {
    if (table[i].scale < table[i - 1].scale || table[i].mean_flops < table[i - 1].mean_flops) {
      throw ContractError("budget_to_scale: calibration must be sorted with non-decreasing FLOPs");
    }
  }
  if (budget >= table.back().mean_flops) return ScaleParam(table.back().scale);
  if (budget < table.front().mean_flops) return ScaleParam(table.front().scale);
  // Scan from the top for the last segment whose lower end fits the budget.
  for (std::size_t i = table.size() - 1; i-- > 0;) {
    const auto& lo = table[i];
    const auto& hi = table[i + 1];
    if (lo.mean_flops > budget) continue;
    if (hi.mean_flops <= budget) return ScaleParam(hi.scale);
    const double t = (budget - lo.mean_flops) / (hi.mean_flops - lo.mean_flops);
    return ScaleParam(std::clamp(lo.scale + t * (hi.scale - lo.scale), lo.scale, hi.scale));
  }
  return ScaleParam(table.front().scale);
}

}  // namespace urnet

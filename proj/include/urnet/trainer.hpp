#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "urnet/dataset.hpp"
#include "urnet/model.hpp"
#include "urnet/objective.hpp"

namespace urnet {

/// S drawn uniformly from [min, max] once per iteration.
struct RangedScale {
  double min = 0.2;
  double max = 1.0;
};

/// Compression mode: S annealed from 1 down to `target` over `anneal_epochs`,
/// then perturbed by clamped Gaussian noise every iteration.
struct FixedScale {
  double target = 0.6;
  double sigma = 0.1;
  std::size_t anneal_epochs = 5;
};

using ScaleSchedule = std::variant<RangedScale, FixedScale>;

struct Sgd {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using OptimizerKind = std::variant<Sgd, Adam>;

enum class BaselineMode { None, RandomDrop };

struct LrStep {
  std::size_t epoch;
  double lr;
};

struct TrainConfig {
  double beta = 2.0;
  double p = 0.1;
  ScaleSchedule scale = RangedScale{};
  std::size_t epochs_total = 60;
  std::size_t epochs_cgm_only = 10;
  OptimizerKind optimizer = Adam{};
  /// Piecewise constant: the last entry whose epoch is <= the current epoch.
  std::vector<LrStep> lr_schedule{{0, 1e-3}, {36, 1e-4}, {48, 1e-5}};
  /// Multiplier on the learning rate of CGM parameters.
  double cgm_lr_scale = 1.0;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  BaselineMode baseline_mode = BaselineMode::None;
  /// Pad-and-crop margin; 0 disables augmentation.
  std::size_t augment_pad = 0;
  bool augment_flip = false;

  void validate() const;
  double lr_at(std::size_t epoch) const;
  /// Desk-scale default: lr 1e-3, divided by 10 at the 60% and 80% marks.
  static std::vector<LrStep> step_schedule(std::size_t epochs, double lr = 1e-3);
};

/// Uniform on [s_min, s_max].
ScaleParam sample_scale(double s_min, double s_max, Rng& rng);

/// Cosine anneal from 1 at epoch 0 to the target at anneal_epochs.
double annealed_base(std::size_t epoch, const FixedScale& cfg);
/// annealed_base plus N(0, sigma^2), clamped to [0, 1].
ScaleParam annealed_scale(std::size_t epoch, const FixedScale& cfg, Rng& rng);

/// Per-tensor optimizer memory.
struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const OptimizerKind& kind, double lr);

/// Optimizer state for every named parameter of a model.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind) : kind_(kind) {}

  /// Updates every parameter that currently requires a gradient. CGM
  /// parameters use lr * cgm_lr_scale.
  void step(std::vector<NamedParam>& params, double lr, double cgm_lr_scale = 1.0);
  const OptimizerKind& kind() const noexcept { return kind_; }
  std::map<std::string, OptimizerState>& states() noexcept { return states_; }
  const std::map<std::string, OptimizerState>& states() const noexcept { return states_; }

 private:
  OptimizerKind kind_;
  std::map<std::string, OptimizerState> states_;
};

enum class Phase { Pretrain, CgmOnly, Joint, Baseline };

const char* to_string(Phase phase);

struct EpochRecord {
  Phase phase = Phase::Joint;
  std::size_t epoch = 0;  // global, counted across phases
  double lr = 0.0;
  LossBreakdown loss;  // means over iterations
  double train_accuracy = 0.0;
  double val_accuracy = -1.0;  // -1 when no validation set
  double mean_usage = 0.0;     // mean gate value (or kept fraction) over samples and blocks
  std::vector<double> scales;  // S of every iteration
  double grad_norm_mean = 0.0;
  double grad_norm_max = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string checkpoint;

  void append(const TrainReport& other);
};

void write_report_csv_header(std::ostream& out);
void write_report_csv_row(std::ostream& out, const EpochRecord& record);

struct TrainHooks {
  const Dataset* validation = nullptr;
  /// Scale used for validation accuracy.
  double val_scale = 1.0;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Drives the training phases of one run. Keeps the optimizer state and the
/// seeded generators, so phases run back to back continue one stream.
class Trainer {
 public:
  Trainer(UrnetModel& model, TrainConfig cfg, TrainHooks hooks = {});

  /// Backbone only, every block kept and no gating.
  TrainReport pretrain(const Dataset& data, std::size_t epochs);
  /// Epochs [0, epochs_cgm_only): only CGM parameters move; batch norm in eval mode.
  TrainReport train_phase_cgm_only(const Dataset& data);
  /// Epochs [epochs_cgm_only, epochs_total): everything trains.
  TrainReport train_phase_joint(const Dataset& data);
  /// Random-drop finetuning over epochs [0, epochs_total).
  TrainReport train_baseline(const Dataset& data);

  Optimizer& optimizer() noexcept { return optimizer_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t next_epoch() const noexcept { return next_epoch_; }

 private:
  EpochRecord run_epoch(const Dataset& data, Phase phase, std::size_t epoch);
  ScaleParam draw_scale(Phase phase, std::size_t epoch);

  UrnetModel& model_;
  TrainConfig cfg_;
  TrainHooks hooks_;
  Optimizer optimizer_;
  Rng rng_;
  Rng augment_rng_;
  std::size_t next_epoch_ = 0;
};

/// One-shot wrappers over a fresh Trainer.
TrainReport train_phase_cgm_only(UrnetModel& model, const Dataset& data, const TrainConfig& cfg);
TrainReport train_phase_joint(UrnetModel& model, const Dataset& data, const TrainConfig& cfg);
TrainReport train_baseline(UrnetModel& model, const Dataset& data, const TrainConfig& cfg);

}  // namespace urnet

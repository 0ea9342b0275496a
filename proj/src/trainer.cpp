#include "urnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include "urnet/errors.hpp"

namespace urnet {

void TrainConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be a finite non-negative number");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("p must lie in [0, 1]");
  if (const auto* r = std::get_if<RangedScale>(&scale)) {
    if (!(0.0 <= r->min && r->min <= r->max && r->max <= 1.0)) {
      throw ConfigError("scale range must satisfy 0 <= S_min <= S_max <= 1");
    }
  } else {
    const auto& f = std::get<FixedScale>(scale);
    if (!(f.target >= 0.0 && f.target <= 1.0)) throw ConfigError("S_fixed must lie in [0, 1]");
    if (!(f.sigma >= 0.0) || !std::isfinite(f.sigma)) throw ConfigError("sigma must be non-negative");
    if (baseline_mode != BaselineMode::None) throw ConfigError("random-drop baseline needs a scale range");
  }
  if (epochs_cgm_only > epochs_total) throw ConfigError("epochs_cgm_only exceeds epochs_total");
  if (!(cgm_lr_scale >= 0.0) || !std::isfinite(cgm_lr_scale)) throw ConfigError("cgm_lr_scale must be non-negative");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (lr_schedule.empty() || lr_schedule.front().epoch != 0) {
    throw ConfigError("lr_schedule must start at epoch 0");
  }
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].lr >= 0.0) || !std::isfinite(lr_schedule[i].lr)) throw ConfigError("learning rates must be non-negative");
    if (i > 0 && lr_schedule[i].epoch <= lr_schedule[i - 1].epoch) {
      throw ConfigError("lr_schedule epochs must be strictly increasing");
    }
  }
  if (const auto* s = std::get_if<Sgd>(&optimizer)) {
    if (!(s->momentum >= 0.0 && s->momentum < 1.0) || !(s->weight_decay >= 0.0)) {
      throw ConfigError("sgd needs momentum in [0, 1) and non-negative weight decay");
    }
  } else {
    const auto& a = std::get<Adam>(optimizer);
    if (!(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0 && a.eps > 0.0)) {
      throw ConfigError("adam needs beta1, beta2 in [0, 1) and eps > 0");
    }
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double lr = lr_schedule.front().lr;
  for (const auto& s : lr_schedule) {
    if (s.epoch <= epoch) lr = s.lr;
  }
  return lr;
}

std::vector<LrStep> TrainConfig::step_schedule(std::size_t epochs, double lr) {
  std::vector<LrStep> steps{{0, lr}};
  const auto at60 = static_cast<std::size_t>(std::lround(0.6 * static_cast<double>(epochs)));
  const auto at80 = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(epochs)));
  if (at60 > 0) steps.push_back({at60, lr / 10.0});
  if (at80 > at60) steps.push_back({at80, lr / 100.0});
  return steps;
}

ScaleParam sample_scale(double s_min, double s_max, Rng& rng) {
  if (!(0.0 <= s_min && s_min <= s_max && s_max <= 1.0)) {
    throw ContractError("sample_scale: invalid range");
  }
  if (s_min == s_max) return ScaleParam(s_min);
  std::uniform_real_distribution<double> dist(s_min, s_max);
  return ScaleParam(dist(rng));
}

double annealed_base(std::size_t epoch, const FixedScale& cfg) {
  if (cfg.anneal_epochs == 0) return cfg.target;
  const double e = static_cast<double>(std::min(epoch, cfg.anneal_epochs));
  const double ea = static_cast<double>(cfg.anneal_epochs);
  return cfg.target + (1.0 - cfg.target) * (1.0 + std::cos(std::numbers::pi * e / ea)) / 2.0;
}

ScaleParam annealed_scale(std::size_t epoch, const FixedScale& cfg, Rng& rng) {
  double s = annealed_base(epoch, cfg);
  if (cfg.sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.sigma);
    s += noise(rng);
  }
  return ScaleParam(std::clamp(s, 0.0, 1.0));
}

void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const OptimizerKind& kind, double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("optimizer_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) state.m.assign(params.size(), 0.0);
  if (state.m.size() != params.size()) throw DimensionError("optimizer_step: state does not match parameters");
  ++state.step;
  if (const auto* sgd = std::get_if<Sgd>(&kind)) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i] + sgd->weight_decay * params[i];
      state.m[i] = sgd->momentum * state.m[i] + g;
      params[i] -= lr * state.m[i];
    }
    return;
  }
  const auto& adam = std::get<Adam>(kind);
  if (state.v.empty()) state.v.assign(params.size(), 0.0);
  if (state.v.size() != params.size()) throw DimensionError("optimizer_step: state does not match parameters");
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(adam.beta1, t);
  const double c2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * g;
    state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * g * g;
    params[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + adam.eps);
  }
}

void Optimizer::step(std::vector<NamedParam>& params, double lr, double cgm_lr_scale) {
  std::vector<double> zeros;
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    auto grads = p.tensor.grad_view();
    if (grads.empty()) {
      zeros.assign(p.tensor.numel(), 0.0);
      grads = zeros;
    }
    optimizer_step(p.tensor.mutable_data(), grads, states_[p.name], kind_,
                   p.group == ParamGroup::Cgm ? lr * cgm_lr_scale : lr);
  }
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Pretrain: return "pretrain";
    case Phase::CgmOnly: return "cgm_only";
    case Phase::Joint: return "joint";
    case Phase::Baseline: return "baseline";
  }
  return "?";
}

void TrainReport::append(const TrainReport& other) {
  epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
  if (!other.checkpoint.empty()) checkpoint = other.checkpoint;
}

void write_report_csv_header(std::ostream& out) {
  out << "phase,epoch,lr,loss,classification_loss,scale_loss,beta,train_accuracy,val_accuracy,mean_usage,"
         "scale_mean,scale_min,scale_max,grad_norm_mean,grad_norm_max\n";
}

void write_report_csv_row(std::ostream& out, const EpochRecord& r) {
  double mean = 0.0, lo = 0.0, hi = 0.0;
  if (!r.scales.empty()) {
    mean = std::accumulate(r.scales.begin(), r.scales.end(), 0.0) / static_cast<double>(r.scales.size());
    const auto [a, b] = std::minmax_element(r.scales.begin(), r.scales.end());
    lo = *a;
    hi = *b;
  }
  const auto old = out.precision(17);
  out << to_string(r.phase) << ',' << r.epoch << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.classification
      << ',' << r.loss.scale << ',' << r.loss.beta << ',' << r.train_accuracy << ',' << r.val_accuracy << ','
      << r.mean_usage << ',' << mean << ',' << lo << ',' << hi << ',' << r.grad_norm_mean << ',' << r.grad_norm_max
      << '\n';
  out.precision(old);
}

namespace {

constexpr std::uint64_t kAugmentStream = 0x9e3779b97f4a7c15ULL;

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const auto k = logits.dim(1);
  const auto v = logits.data();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = v.subspan(b * k, k);
    const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (arg == static_cast<std::size_t>(labels[b])) ++correct;
  }
  return correct;
}

double full_network_accuracy(UrnetModel& model, const Dataset& data) {
  const std::vector<bool> keep(model.num_blocks(), true);
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += 128) {
    const auto batch = data.slice(begin, std::min<std::size_t>(128, data.size() - begin));
    correct += count_correct(masked_forward(batch.images, model, keep, NormMode::Eval), batch.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double gated_accuracy(UrnetModel& model, const Dataset& data, double scale) {
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += 128) {
    const auto batch = data.slice(begin, std::min<std::size_t>(128, data.size() - begin));
    const auto out = urnet_forward(batch.images, ScaleParam(scale), model, policy::Eval{});
    correct += count_correct(out.logits, batch.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double grad_norm(const std::vector<NamedParam>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    for (double g : p.tensor.grad_view()) sq += g * g;
  }
  return std::sqrt(sq);
}

}  // namespace

Trainer::Trainer(UrnetModel& model, TrainConfig cfg, TrainHooks hooks)
    : model_(model), cfg_(std::move(cfg)), hooks_(std::move(hooks)), optimizer_(cfg_.optimizer) {
  cfg_.validate();
  rng_.seed(cfg_.seed);
  augment_rng_.seed(cfg_.seed ^ kAugmentStream);
  model_.set_gate_training_probability(cfg_.p);
}

ScaleParam Trainer::draw_scale(Phase phase, std::size_t epoch) {
  if (phase == Phase::Pretrain) return ScaleParam(1.0);
  if (const auto* r = std::get_if<RangedScale>(&cfg_.scale)) return sample_scale(r->min, r->max, rng_);
  return annealed_scale(epoch, std::get<FixedScale>(cfg_.scale), rng_);
}

EpochRecord Trainer::run_epoch(const Dataset& data, Phase phase, std::size_t epoch) {
  EpochRecord rec;
  rec.phase = phase;
  rec.epoch = epoch;
  rec.lr = cfg_.lr_at(epoch);
  rec.loss.beta = (phase == Phase::CgmOnly || phase == Phase::Joint) ? cfg_.beta : 0.0;

  const bool cgm_only = phase == Phase::CgmOnly;
  model_.set_trainable(ParamGroup::Backbone, !cgm_only);
  model_.set_trainable(ParamGroup::Cgm, phase == Phase::CgmOnly || phase == Phase::Joint);
  const NormMode norm = cgm_only ? NormMode::Eval : NormMode::Train;
  auto params = model_.parameters();
  const auto n = model_.num_blocks();

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng_);

  std::size_t iterations = 0, seen = 0, correct = 0;
  double usage_sum = 0.0, norm_sum = 0.0;
  for (std::size_t begin = 0; begin + 2 <= order.size(); begin += cfg_.batch_size) {
    const auto count = std::min(cfg_.batch_size, order.size() - begin);
    const auto batch = data.gather(std::span<const std::size_t>(order).subspan(begin, count));
    const Tensor images =
        cfg_.augment_pad > 0 || cfg_.augment_flip
            ? augment_batch(batch.images, cfg_.augment_pad, cfg_.augment_flip, augment_rng_)
            : batch.images;

    Tensor loss, logits;
    double usage = 0.0;
    try {
      if (phase == Phase::Pretrain || phase == Phase::Baseline) {
        std::vector<bool> keep(n, true);
        if (phase == Phase::Baseline) {
          const auto& r = std::get<RangedScale>(cfg_.scale);
          const auto s = sample_scale(r.min, r.max, rng_);
          rec.scales.push_back(s.value());
          keep = sample_random_keep_mask(s, n, rng_);
        }
        usage = static_cast<double>(std::count(keep.begin(), keep.end(), true)) / static_cast<double>(n);
        logits = masked_forward(images, model_, keep, norm);
        loss = softmax_cross_entropy(logits, batch.labels);
        rec.loss.classification += loss.item();
        rec.loss.total += loss.item();
      } else {
        const auto s = draw_scale(phase, epoch);
        rec.scales.push_back(s.value());
        const auto out = urnet_forward(images, s, model_, policy::Train{cfg_.p, &rng_}, {norm, true});
        const auto g = out.record.gates.data();
        usage = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
        auto tl = total_loss(out.logits, batch.labels, out.record, s, cfg_.beta);
        logits = out.logits;
        loss = tl.loss;
        rec.loss.total += tl.breakdown.total;
        rec.loss.classification += tl.breakdown.classification;
        rec.loss.scale += tl.breakdown.scale;
      }
      if (!std::isfinite(loss.item())) throw NonFiniteError("loss");
      backward(loss);
    } catch (const NonFiniteError& e) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", iteration " +
                            std::to_string(iterations) + ": " + e.what());
    }
    const double gn = grad_norm(params);
    if (!std::isfinite(gn)) {
      throw DivergenceError("non-finite gradient norm at epoch " + std::to_string(epoch) + ", iteration " +
                            std::to_string(iterations));
    }
    optimizer_.step(params, rec.lr, cfg_.cgm_lr_scale);
    model_.zero_grad();

    norm_sum += gn;
    rec.grad_norm_max = std::max(rec.grad_norm_max, gn);
    usage_sum += usage * static_cast<double>(count);
    correct += count_correct(logits, batch.labels);
    seen += count;
    ++iterations;
  }
  if (iterations > 0) {
    const double it = static_cast<double>(iterations);
    rec.loss.total /= it;
    rec.loss.classification /= it;
    rec.loss.scale /= it;
    rec.grad_norm_mean = norm_sum / it;
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.mean_usage = usage_sum / static_cast<double>(seen);
  }
  if (hooks_.validation != nullptr) {
    rec.val_accuracy = (phase == Phase::Pretrain || phase == Phase::Baseline)
                           ? full_network_accuracy(model_, *hooks_.validation)
                           : gated_accuracy(model_, *hooks_.validation, hooks_.val_scale);
  }
  model_.set_trainable(ParamGroup::Backbone, true);
  model_.set_trainable(ParamGroup::Cgm, true);
  if (hooks_.on_epoch) hooks_.on_epoch(rec);
  return rec;
}

TrainReport Trainer::pretrain(const Dataset& data, std::size_t epochs) {
  TrainReport report;
  for (std::size_t e = 0; e < epochs; ++e) report.epochs.push_back(run_epoch(data, Phase::Pretrain, e));
  // A fresh optimizer for the phases that follow.
  optimizer_ = Optimizer(cfg_.optimizer);
  return report;
}

TrainReport Trainer::train_phase_cgm_only(const Dataset& data) {
  if (model_.cgms().empty()) throw ContractError("train_phase_cgm_only: model has no CGMs");
  TrainReport report;
  for (std::size_t e = 0; e < cfg_.epochs_cgm_only; ++e) report.epochs.push_back(run_epoch(data, Phase::CgmOnly, e));
  next_epoch_ = cfg_.epochs_cgm_only;
  return report;
}

TrainReport Trainer::train_phase_joint(const Dataset& data) {
  TrainReport report;
  for (std::size_t e = std::max(next_epoch_, cfg_.epochs_cgm_only); e < cfg_.epochs_total; ++e) {
    report.epochs.push_back(run_epoch(data, Phase::Joint, e));
  }
  next_epoch_ = cfg_.epochs_total;
  return report;
}

TrainReport Trainer::train_baseline(const Dataset& data) {
  if (cfg_.baseline_mode != BaselineMode::RandomDrop) throw ConfigError("train_baseline needs baseline_mode random_drop");
  TrainReport report;
  for (std::size_t e = 0; e < cfg_.epochs_total; ++e) report.epochs.push_back(run_epoch(data, Phase::Baseline, e));
  next_epoch_ = cfg_.epochs_total;
  return report;
}

TrainReport train_phase_cgm_only(UrnetModel& model, const Dataset& data, const TrainConfig& cfg) {
  return Trainer(model, cfg).train_phase_cgm_only(data);
}

TrainReport train_phase_joint(UrnetModel& model, const Dataset& data, const TrainConfig& cfg) {
  return Trainer(model, cfg).train_phase_joint(data);
}

TrainReport train_baseline(UrnetModel& model, const Dataset& data, const TrainConfig& cfg) {
  return Trainer(model, cfg).train_baseline(data);
}

}  // namespace urnet

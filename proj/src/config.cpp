#include "urnet/config.hpp"

#include <fstream>
#include <set>
#include <type_traits>

#include "urnet/errors.hpp"

namespace urnet {

namespace {

// Reads keys out of one JSON object and remembers which were consumed.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) fail(key, "expected a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) fail(key, "expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) fail(key, "expected a number");
    }
    try {
      out = it->get<T>();
    } catch (const Json::exception& e) {
      fail(key, e.what());
    }
  }

  const Json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void done() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where_ + ": unknown key '" + item.key() + "'");
    }
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& why) const {
    throw ConfigError(path(key) + ": " + why);
  }

  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::string string_field(Fields& f, const std::string& key, std::string fallback) {
  f.get(key, fallback);
  return fallback;
}

}  // namespace

Json to_json(const ModelSpec& s) {
  return Json{{"in_channels", s.in_channels},
              {"image_size", s.image_size},
              {"stage_channels", s.stage_channels},
              {"blocks_per_stage", s.blocks_per_stage},
              {"num_classes", s.num_classes},
              {"reduction", s.reduction},
              {"use_feature_input", s.use_feature_input},
              {"gate_training_probability", s.gate_training_probability},
              {"cgm_init_bias", s.cgm_init_bias},
              {"init_seed", s.init_seed}};
}

ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec s;
  Fields f(j, "model");
  f.get("in_channels", s.in_channels);
  f.get("image_size", s.image_size);
  f.get("stage_channels", s.stage_channels);
  f.get("blocks_per_stage", s.blocks_per_stage);
  f.get("num_classes", s.num_classes);
  f.get("reduction", s.reduction);
  f.get("use_feature_input", s.use_feature_input);
  f.get("gate_training_probability", s.gate_training_probability);
  f.get("cgm_init_bias", s.cgm_init_bias);
  f.get("init_seed", s.init_seed);
  f.done();
  s.validate();
  return s;
}

Json to_json(const Normalization& n) { return Json{{"mean", n.mean}, {"std", n.std}}; }

Normalization normalization_from_json(const Json& j) {
  Normalization n;
  Fields f(j, "normalization");
  f.get("mean", n.mean);
  f.get("std", n.std);
  f.done();
  if (n.mean.size() != n.std.size()) throw ConfigError("normalization: mean and std differ in length");
  for (double s : n.std) {
    if (!(s > 0.0)) throw ConfigError("normalization: std must be positive");
  }
  return n;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["beta"] = c.beta;
  j["p"] = c.p;
  if (const auto* r = std::get_if<RangedScale>(&c.scale)) {
    j["scale"] = {{"mode", "range"}, {"min", r->min}, {"max", r->max}};
  } else {
    const auto& s = std::get<FixedScale>(c.scale);
    j["scale"] = {{"mode", "fixed"}, {"target", s.target}, {"sigma", s.sigma}, {"anneal_epochs", s.anneal_epochs}};
  }
  j["epochs_total"] = c.epochs_total;
  j["epochs_cgm_only"] = c.epochs_cgm_only;
  if (const auto* s = std::get_if<Sgd>(&c.optimizer)) {
    j["optimizer"] = {{"kind", "sgd"}, {"momentum", s->momentum}, {"weight_decay", s->weight_decay}};
  } else {
    const auto& a = std::get<Adam>(c.optimizer);
    j["optimizer"] = {{"kind", "adam"}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
  }
  Json sched = Json::array();
  for (const auto& s : c.lr_schedule) sched.push_back({{"epoch", s.epoch}, {"lr", s.lr}});
  j["lr_schedule"] = sched;
  j["cgm_lr_scale"] = c.cgm_lr_scale;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["baseline_mode"] = c.baseline_mode == BaselineMode::RandomDrop ? "random_drop" : "none";
  j["augment_pad"] = c.augment_pad;
  j["augment_flip"] = c.augment_flip;
  return j;
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  Fields f(j, "train");
  f.get("beta", c.beta);
  f.get("p", c.p);
  if (const auto* s = f.find("scale")) {
    Fields sf(*s, f.path("scale"));
    const auto mode = string_field(sf, "mode", "range");
    if (mode == "range") {
      RangedScale r;
      sf.get("min", r.min);
      sf.get("max", r.max);
      c.scale = r;
    } else if (mode == "fixed") {
      FixedScale x;
      sf.get("target", x.target);
      sf.get("sigma", x.sigma);
      sf.get("anneal_epochs", x.anneal_epochs);
      c.scale = x;
    } else {
      throw ConfigError("train.scale.mode: expected 'range' or 'fixed', got '" + mode + "'");
    }
    sf.done();
  }
  f.get("epochs_total", c.epochs_total);
  f.get("epochs_cgm_only", c.epochs_cgm_only);
  if (const auto* o = f.find("optimizer")) {
    Fields of(*o, f.path("optimizer"));
    const auto kind = string_field(of, "kind", "adam");
    if (kind == "adam") {
      Adam a;
      of.get("beta1", a.beta1);
      of.get("beta2", a.beta2);
      of.get("eps", a.eps);
      c.optimizer = a;
    } else if (kind == "sgd") {
      Sgd s;
      of.get("momentum", s.momentum);
      of.get("weight_decay", s.weight_decay);
      c.optimizer = s;
    } else {
      throw ConfigError("train.optimizer.kind: expected 'adam' or 'sgd', got '" + kind + "'");
    }
    of.done();
  }
  const Json* lr = f.find("lr");
  const Json* sched = f.find("lr_schedule");
  if (lr && sched) throw ConfigError("train: give either lr or lr_schedule, not both");
  if (sched) {
    if (!sched->is_array()) throw ConfigError("train.lr_schedule: expected an array");
    c.lr_schedule.clear();
    for (const auto& step : *sched) {
      Fields sf(step, "train.lr_schedule[]");
      LrStep s{0, 0.0};
      sf.get("epoch", s.epoch);
      sf.get("lr", s.lr);
      sf.done();
      c.lr_schedule.push_back(s);
    }
  } else {
    double base = 1e-3;
    if (lr) {
      if (!lr->is_number()) throw ConfigError("train.lr: expected a number");
      base = lr->get<double>();
    }
    c.lr_schedule = TrainConfig::step_schedule(c.epochs_total, base);
  }
  f.get("cgm_lr_scale", c.cgm_lr_scale);
  f.get("batch_size", c.batch_size);
  f.get("seed", c.seed);
  const auto baseline = string_field(f, "baseline_mode", "none");
  if (baseline == "none") {
    c.baseline_mode = BaselineMode::None;
  } else if (baseline == "random_drop") {
    c.baseline_mode = BaselineMode::RandomDrop;
  } else {
    throw ConfigError("train.baseline_mode: expected 'none' or 'random_drop', got '" + baseline + "'");
  }
  f.get("augment_pad", c.augment_pad);
  f.get("augment_flip", c.augment_flip);
  f.done();
  c.validate();
  return c;
}

Json to_json(const DataConfig& c) {
  Json j;
  if (c.kind == DataKind::Synthetic) {
    j = {{"kind", "synthetic"},
         {"train_size", c.synthetic.size},
         {"test_size", c.test_size},
         {"num_classes", c.synthetic.num_classes},
         {"image_size", c.synthetic.image_size},
         {"seed", c.synthetic.seed},
         {"noise", c.synthetic.noise}};
  } else {
    std::vector<std::string> train, test;
    for (const auto& p : c.train_files) train.push_back(p.string());
    for (const auto& p : c.test_files) test.push_back(p.string());
    j = {{"kind", "cifar10"}, {"train_files", train}, {"test_files", test}, {"normalization", to_json(c.normalization)}};
  }
  return j;
}

DataConfig data_config_from_json(const Json& j) {
  DataConfig c;
  Fields f(j, "data");
  const auto kind = string_field(f, "kind", "synthetic");
  if (kind == "synthetic") {
    c.kind = DataKind::Synthetic;
    f.get("train_size", c.synthetic.size);
    f.get("test_size", c.test_size);
    f.get("num_classes", c.synthetic.num_classes);
    f.get("image_size", c.synthetic.image_size);
    f.get("seed", c.synthetic.seed);
    f.get("noise", c.synthetic.noise);
  } else if (kind == "cifar10") {
    c.kind = DataKind::Cifar10;
    std::vector<std::string> train, test;
    f.get("train_files", train);
    f.get("test_files", test);
    c.train_files.assign(train.begin(), train.end());
    c.test_files.assign(test.begin(), test.end());
    if (const auto* n = f.find("normalization")) c.normalization = normalization_from_json(*n);
  } else {
    throw ConfigError("data.kind: expected 'synthetic' or 'cifar10', got '" + kind + "'");
  }
  f.done();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.kind == DataKind::Synthetic) {
    if (data.synthetic.num_classes != model.num_classes) {
      throw ConfigError("data.num_classes (" + std::to_string(data.synthetic.num_classes) +
                        ") differs from model.num_classes (" + std::to_string(model.num_classes) + ")");
    }
    if (data.synthetic.image_size != model.image_size) throw ConfigError("data.image_size differs from model.image_size");
    if (model.in_channels != 3) throw ConfigError("synthetic data has 3 channels");
    if (data.synthetic.size == 0 || data.test_size == 0) throw ConfigError("data: sizes must be positive");
  } else {
    if (data.train_files.empty() || data.test_files.empty()) throw ConfigError("data: cifar10 needs train_files and test_files");
    if (model.image_size != 32 || model.in_channels != 3) throw ConfigError("cifar10 images are 3x32x32");
    if (model.num_classes != 10) throw ConfigError("cifar10 has 10 classes");
    if (data.normalization.mean.size() != 3) throw ConfigError("data.normalization needs 3 channels");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)},
              {"pretrain_epochs", c.pretrain_epochs},
              {"output_dir", c.output_dir.string()},
              {"seed", c.seed}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Fields f(j, "config");
  if (const auto* m = f.find("model")) c.model = model_spec_from_json(*m);
  if (const auto* t = f.find("train")) c.train = train_config_from_json(*t);
  if (const auto* d = f.find("data")) c.data = data_config_from_json(*d);
  f.get("pretrain_epochs", c.pretrain_epochs);
  std::string out = c.output_dir.string();
  f.get("output_dir", out);
  c.output_dir = out;
  // The top-level seed drives both initialization and training.
  const bool has_seed = j.contains("seed");
  f.get("seed", c.seed);
  f.done();
  if (has_seed) {
    c.model.init_seed = c.seed;
    c.train.seed = c.seed;
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

Dataset load_train_set(const DataConfig& c) {
  if (c.kind == DataKind::Cifar10) return load_cifar_binary(c.train_files, c.normalization, "train");
  auto spec = c.synthetic;
  spec.split = "train";
  return make_synthetic(spec);
}

Dataset load_test_set(const DataConfig& c) {
  if (c.kind == DataKind::Cifar10) return load_cifar_binary(c.test_files, c.normalization, "test");
  auto spec = c.synthetic;
  spec.size = c.test_size;
  spec.split = "test";
  return make_synthetic(spec);
}

}  // namespace urnet

#pragma once

#include "tase/common.hpp"
#include "tase/datagen.hpp"
#include "tase/eval.hpp"
#include "tase/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace tase::config {

// Flat `key = value` experiment configuration. Every key has a documented
// default; unknown keys are rejected; the resolved snapshot is fully
// explicit.
class ExperimentConfig {
 public:
  struct Key {
    const char* name;
    const char* def;
    const char* doc;
  };

  static std::span<const Key> schema() {
    static const Key keys[] = {
        {"classes", "10", "number of classes C"},
        {"n_max", "500", "head-class training count"},
        {"imbalance", "100", "imbalance factor IF (head count / tail count)"},
        {"d_in", "32", "input feature dimension"},
        {"class_sep", "5.0", "radius of the class-mean hypersphere"},
        {"data_noise", "1.15", "isotropic sample noise around each class mean"},
        {"test_per_class", "100", "balanced test samples per class"},
        {"pool_per_class", "200", "balanced probe-pool samples per class"},
        {"aug_noise", "1.2", "augmentation Gaussian noise sigma"},
        {"aug_mask_prob", "0.15", "augmentation coordinate zero-mask probability"},
        {"aug_scale_jitter", "0.2", "augmentation global scale jitter"},
        {"encoder_dims", "128,128", "encoder widths after the input layer"},
        {"proj_dims", "128", "projector widths after the encoder feature"},
        {"epochs", "200", "total training epochs E"},
        {"warmup_epochs", "20", "plain-contrastive warmup epochs B"},
        {"cluster_period", "10", "pseudo-label refresh period F"},
        {"horizon", "80", "epoch S at which the temperature spread is full"},
        {"batch_size", "128", "samples per mini-batch (incomplete tail batch dropped)"},
        {"lr", "0.5", "peak learning rate"},
        {"momentum", "0.9", "SGD momentum"},
        {"weight_decay", "0.0001", "L2 weight decay"},
        {"tau_base", "0.3", "warmup / baseline temperature"},
        {"tau_min", "0.1", "lower temperature bound (tail end)"},
        {"tau_max", "0.6", "upper temperature bound (head end)"},
        {"mode", "full", "baseline | tau_only | weight_only | full"},
        {"seed", "1", "master seed"},
        {"checkpoint_period", "50", "epochs between checkpoints"},
        {"kmeans_k", "0", "cluster count K (0 means: equal to classes)"},
        {"kmeans_max_iter", "100", "Lloyd iteration cap"},
        {"kmeans_tol", "1e-6", "centroid-shift convergence threshold"},
        {"kmeans_restarts", "4", "k-means++ restarts, best inertia kept"},
        {"probe_fraction", "0.01", "pool share used by the balanced probes"},
        {"probe_iterations", "500", "linear-probe gradient steps"},
        {"probe_lr", "0.5", "linear-probe initial step size"},
        {"features", "encoder", "evaluation features: encoder | projection"},
        {"group_scheme", "auto", "auto | ratio:h,m,t | threshold:hi,lo"},
    };
    return keys;
  }

  ExperimentConfig() {
    for (const auto& k : schema()) values_[k.name] = k.def;
  }

  static ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    if (name == "desk") return c;
    if (name == "cifar10lt") {
      c.set_many({{"n_max", "4500"},
                  {"epochs", "2000"},
                  {"warmup_epochs", "50"},
                  {"horizon", "500"},
                  {"batch_size", "512"},
                  {"test_per_class", "1000"},
                  {"pool_per_class", "1000"}});
      return c;
    }
    if (name == "cifar100lt") {
      c.set_many({{"classes", "100"},
                  {"n_max", "450"},
                  {"epochs", "2000"},
                  {"warmup_epochs", "300"},
                  {"horizon", "1000"},
                  {"batch_size", "512"},
                  {"test_per_class", "100"},
                  {"pool_per_class", "100"}});
      return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected cifar10lt, cifar100lt, or desk)");
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  void set_many(std::initializer_list<std::pair<const char*, const char*>> kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  // Fully explicit echo of every key, in schema order.
  std::string snapshot() const {
    std::string out;
    for (const auto& k : schema()) out += std::string(k.name) + " = " + values_.at(k.name) + "\n";
    return out;
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  int64_t get_int(const std::string& key) const {
    try {
      size_t pos = 0;
      const int64_t v = std::stoll(raw(key), &pos);
      if (pos != raw(key).size()) throw std::invalid_argument("trail");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected integer, got '" + raw(key) + "'");
    }
  }

  double get_double(const std::string& key) const {
    try {
      size_t pos = 0;
      const double v = std::stod(raw(key), &pos);
      if (pos != raw(key).size()) throw std::invalid_argument("trail");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected number, got '" + raw(key) + "'");
    }
  }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected comma-separated integers");
      }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }

  // ---- typed builders -----------------------------------------------------

  datagen::LongTailProfile profile() const {
    datagen::LongTailProfile p;
    p.num_classes = static_cast<int>(get_int("classes"));
    p.n_max = static_cast<int>(get_int("n_max"));
    p.imbalance = get_double("imbalance");
    p.validate();
    return p;
  }

  datagen::GroupScheme group_scheme() const {
    const std::string& s = raw("group_scheme");
    if (s == "auto") return datagen::default_ratio(static_cast<int>(get_int("classes")));
    auto parse_pair_or_triple = [&](std::string_view body, int want) {
      std::vector<int> nums;
      std::stringstream ss{std::string(body)};
      std::string item;
      while (std::getline(ss, item, ',')) nums.push_back(std::stoi(item));
      if (static_cast<int>(nums.size()) != want) throw ConfigError("group_scheme: malformed '" + s + "'");
      return nums;
    };
    try {
      if (s.rfind("ratio:", 0) == 0) {
        const auto v = parse_pair_or_triple(std::string_view(s).substr(6), 3);
        return datagen::RatioSplit{v[0], v[1], v[2]};
      }
      if (s.rfind("threshold:", 0) == 0) {
        const auto v = parse_pair_or_triple(std::string_view(s).substr(10), 2);
        return datagen::ThresholdSplit{v[0], v[1]};
      }
    } catch (const std::exception&) {
      throw ConfigError("group_scheme: malformed '" + s + "'");
    }
    throw ConfigError("group_scheme: expected auto, ratio:h,m,t or threshold:hi,lo");
  }

  datagen::AugmentConfig augment() const {
    datagen::AugmentConfig a;
    a.noise_sigma = get_double("aug_noise");
    a.mask_prob = get_double("aug_mask_prob");
    a.scale_jitter = get_double("aug_scale_jitter");
    a.validate();
    return a;
  }

  model::MlpSpec mlp_spec() const {
    model::MlpSpec spec;
    spec.encoder_dims.push_back(static_cast<int>(get_int("d_in")));
    for (int w : get_int_list("encoder_dims")) spec.encoder_dims.push_back(w);
    spec.proj_dims.push_back(spec.encoder_dims.back());
    for (int w : get_int_list("proj_dims")) spec.proj_dims.push_back(w);
    spec.validate();
    return spec;
  }

  trainer::Mode mode() const {
    const std::string& m = raw("mode");
    if (m == "baseline") return trainer::Mode::Baseline;
    if (m == "tau_only") return trainer::Mode::TauOnly;
    if (m == "weight_only") return trainer::Mode::WeightOnly;
    if (m == "full") return trainer::Mode::Full;
    throw ConfigError("mode: expected baseline, tau_only, weight_only, or full");
  }

  eval::FeatureKind features() const {
    const std::string& f = raw("features");
    if (f == "encoder") return eval::FeatureKind::Encoder;
    if (f == "projection") return eval::FeatureKind::Projection;
    throw ConfigError("features: expected encoder or projection");
  }

  trainer::TrainConfig train_config() const {
    trainer::TrainConfig t;
    t.mlp = mlp_spec();
    t.augment = augment();
    t.schedule.tau_base = get_double("tau_base");
    t.schedule.tau_min = get_double("tau_min");
    t.schedule.tau_max = get_double("tau_max");
    t.schedule.warmup_epochs = static_cast<int>(get_int("warmup_epochs"));
    t.schedule.horizon = static_cast<int>(get_int("horizon"));
    t.schedule.refresh_period = static_cast<int>(get_int("cluster_period"));
    t.kmeans.k = static_cast<int>(get_int("kmeans_k"));
    if (t.kmeans.k == 0) t.kmeans.k = static_cast<int>(get_int("classes"));
    t.kmeans.max_iter = static_cast<int>(get_int("kmeans_max_iter"));
    t.kmeans.tol = get_double("kmeans_tol");
    t.kmeans.restarts = static_cast<int>(get_int("kmeans_restarts"));
    t.epochs = static_cast<int>(get_int("epochs"));
    t.batch_size = static_cast<int>(get_int("batch_size"));
    t.peak_lr = get_double("lr");
    t.momentum = get_double("momentum");
    t.weight_decay = get_double("weight_decay");
    t.seed = static_cast<uint64_t>(get_int("seed"));
    t.mode = mode();
    t.checkpoint_period = static_cast<int>(get_int("checkpoint_period"));
    t.validate();
    return t;
  }

  datagen::DatasetBundle make_bundle() const {
    return datagen::synthesize_bundle(profile(), static_cast<int>(get_int("d_in")), get_double("class_sep"),
                                      get_double("data_noise"), static_cast<uint64_t>(get_int("seed")),
                                      static_cast<int>(get_int("test_per_class")),
                                      static_cast<int>(get_int("pool_per_class")), group_scheme());
  }

  eval::BatterySettings battery_settings() const {
    eval::BatterySettings s;
    s.probe_fraction = get_double("probe_fraction");
    s.probe_iterations = static_cast<int>(get_int("probe_iterations"));
    s.probe_lr = get_double("probe_lr");
    s.seed = static_cast<uint64_t>(get_int("seed"));
    return s;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace tase::config

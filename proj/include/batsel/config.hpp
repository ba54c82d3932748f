#pragma once

#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "batsel/harness.hpp"
#include "batsel/selection.hpp"
#include "batsel/tasks.hpp"

namespace batsel {

/// Flat key = value configuration. Every key has a default; unknown keys are
/// rejected. Lines starting with '#' and blank lines are ignored.
class CliConfig {
 public:
  struct Key {
    std::string name;
    std::string fallback;
    std::string help;
  };

  static const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        {"dataset", "", "JSONL dataset (adaptation/backbone rows; validation rows are the test set)"},
        {"out", "out", "output directory"},
        {"seed", "0", "master seed; every stage derives its own stream from it"},
        {"seeds", "20", "number of seeds for run/sweeps (seed, seed+1, ...)"},
        {"task", "s1", "task preset: s1 | q1 | logistic-benchmark"},
        {"task_name", "", "overrides the preset's name"},
        {"dim", "", "feature dimension (preset default if empty)"},
        {"n_adaptation", "", "adaptation examples"},
        {"pool_size", "", "backbone pool size"},
        {"n_test", "", "held-out test examples"},
        {"class_sep", "", "class mean offset along e1"},
        {"shift", "", "pool shift (outward offset or covariate broadening)"},
        {"helpful_fraction", "", "pool share drawn from the adaptation law"},
        {"harmful_fraction", "", "pool share with offset labels (linear-gaussian)"},
        {"label_sigma", "", "response noise (linear-gaussian)"},
        {"weight_scale", "", "true weight scale (logistic-benchmark)"},
        {"noise_sigma", "0", "logit noise of the loss"},
        {"l2_lambda", "", "L2 weight (preset default if empty)"},
        {"head", "", "model head for dataset input: logistic-binary | softmax | linear"},
        {"classes", "2", "softmax classes"},
        {"hidden", "", "hidden layer widths, comma separated"},
        {"activation", "tanh", "identity | tanh | relu"},
        {"gamma", "0.9", "augmentation ratio in (0,1)"},
        {"sample_ratio", "1", "share of the pool exposed to scoring"},
        {"delta", "3", "noise draws averaged per loss"},
        {"damping_scale", "0.1", "lambda_l = scale * mean |g|^2 / D_l"},
        {"surrogate_steps", "400", "surrogate training steps"},
        {"adapter_steps", "400", "adapter training steps"},
        {"learning_rate", "0.5", "SGD step size"},
        {"batch_size", "0", "mini-batch size (0 = full batch)"},
        {"validation_fraction", "0.2", "hold-out share of D^A for Q"},
        {"quota", "", "backbone quota override"},
        {"score_mode", "bartlett", "bartlett | exact"},
        {"g_mode", "sm-implicit", "sm-implicit | exact-dense"},
        {"q_mode", "sm-implicit", "sm-implicit (Gram) | exact-dense (Hessian)"},
        {"moment", "model-expected", "model-expected | observed"},
        {"gammas", "0.5,0.7,0.9,0.95,0.99", "gamma grid for sweep-gamma"},
        {"ratios", "0.25,0.5,0.75,1", "ratio grid for sweep-ratio"},
        {"fractions", "0.25,0.5,1", "surrogate step fractions for sweep-surrogate"},
        {"rho_seeds", "20", "seeds per k for the rho estimate in oracle-check"},
        {"rho_grid", "256,512,1024,2048", "k grid for the rho estimate in oracle-check"},
        {"population", "200000", "population draw for theta* in oracle-check"},
    };
    return k;
  }

  CliConfig() {
    for (const auto& k : keys()) values_[k.name] = k.fallback;
  }

  static bool known(const std::string& key) {
    for (const auto& k : keys())
      if (k.name == key) return true;
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  void parse(std::istream& in, const std::string& origin = "config") {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    parse(in, path);
  }

  /// "key=value" override as given on the command line.
  void apply_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  bool has(const std::string& key) const { return !str(key).empty(); }

  double num(const std::string& key) const { return to_double(key, str(key)); }
  long integer(const std::string& key) const {
    const double v = num(key);
    if (v != std::floor(v)) throw ConfigError("'" + key + "' must be an integer");
    return static_cast<long>(v);
  }
  std::uint64_t u64(const std::string& key) const {
    const std::string& s = str(key);
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(s, &pos);
      if (pos != s.size() || s.front() == '-') throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' must be a non-negative integer, got '" + s + "'");
    }
  }
  std::vector<double> list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!trim(item).empty()) out.push_back(to_double(key, trim(item)));
    return out;
  }

  /// Effective configuration, one key per line in key order; loading it
  /// back reproduces this configuration.
  void echo(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

  TaskSpec task() const {
    TaskSpec t;
    const std::string& preset = str("task");
    if (preset == "s1") t = TaskSpec::s1();
    else if (preset == "q1") t = TaskSpec::q1();
    else if (preset == "logistic-benchmark") t = TaskSpec::logistic_benchmark();
    else throw ConfigError("unknown task preset '" + preset + "'");
    if (has("task_name")) t.name = str("task_name");
    auto opt_long = [&](const char* k, long& dst) { if (has(k)) dst = integer(k); };
    auto opt_num = [&](const char* k, double& dst) { if (has(k)) dst = num(k); };
    opt_long("dim", t.dim);
    opt_long("n_adaptation", t.n_adaptation);
    opt_long("pool_size", t.pool_size);
    opt_long("n_test", t.n_test);
    opt_num("class_sep", t.class_sep);
    opt_num("shift", t.shift);
    opt_num("helpful_fraction", t.helpful_fraction);
    opt_num("harmful_fraction", t.harmful_fraction);
    opt_num("label_sigma", t.label_sigma);
    opt_num("weight_scale", t.weight_scale);
    opt_num("noise_sigma", t.noise_sigma);
    opt_num("l2_lambda", t.l2_lambda);
    t.hidden = hidden();
    t.activation = activation();
    t.validate();
    return t;
  }

  std::vector<long> hidden() const {
    std::vector<long> h;
    for (double v : list("hidden")) {
      if (v < 1 || v != std::floor(v)) throw ConfigError("hidden widths must be positive integers");
      h.push_back(static_cast<long>(v));
    }
    return h;
  }

  Activation activation() const {
    const std::string& a = str("activation");
    if (a == "identity") return Activation::kIdentity;
    if (a == "tanh") return Activation::kTanh;
    if (a == "relu") return Activation::kRelu;
    throw ConfigError("unknown activation '" + a + "'");
  }

  /// Model for a dataset of the given input dimension.
  ModelSpec model(long input_dim) const {
    const std::string head = has("head") ? str("head") : "logistic-binary";
    Head h;
    if (head == "logistic-binary") h = Head::kLogisticBinary;
    else if (head == "softmax") h = Head::kSoftmax;
    else if (head == "linear") h = Head::kLinear;
    else throw ConfigError("unknown head '" + head + "'");
    ModelSpec s = ModelSpec::mlp(input_dim, hidden(), activation(), h, integer("classes"));
    if (hidden().empty()) s.activation = Activation::kIdentity;
    s.validate();
    return s;
  }

  LossSpec loss(const ModelSpec& spec) const {
    LossSpec ls{spec.classification() ? LossKind::kLogLoss : LossKind::kSquaredError, num("noise_sigma"),
                has("l2_lambda") ? num("l2_lambda") : 0.01};
    ls.validate(spec);
    return ls;
  }

  SelectionConfig selection() const {
    SelectionConfig c;
    c.gamma = num("gamma");
    c.sample_ratio = num("sample_ratio");
    c.delta = static_cast<int>(integer("delta"));
    c.damping_scale = num("damping_scale");
    c.surrogate_steps = static_cast<int>(integer("surrogate_steps"));
    c.adapter_steps = static_cast<int>(integer("adapter_steps"));
    c.learning_rate = num("learning_rate");
    const long bs = integer("batch_size");
    c.batch_size = bs <= 0 ? (1 << 30) : static_cast<int>(bs);
    c.validation_fraction = num("validation_fraction");
    if (has("quota")) c.quota_override = integer("quota");
    const std::string& sm = str("score_mode");
    if (sm == "bartlett") c.score_mode = ScoreMode::kBartlett;
    else if (sm == "exact") c.score_mode = ScoreMode::kExact;
    else throw ConfigError("unknown score_mode '" + sm + "'");
    c.g_mode = curvature_mode("g_mode");
    c.q_mode = curvature_mode("q_mode");
    const std::string& m = str("moment");
    if (m == "model-expected") c.moment = Moment::kModelExpected;
    else if (m == "observed") c.moment = Moment::kObserved;
    else throw ConfigError("unknown moment '" + m + "'");
    c.seed = u64("seed");
    c.validate();
    return c;
  }

 private:
  CurvatureMode curvature_mode(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "sm-implicit") return CurvatureMode::kSmImplicit;
    if (v == "exact-dense") return CurvatureMode::kExactDense;
    throw ConfigError("unknown " + key + " '" + v + "'");
  }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static double to_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' must be a number, got '" + s + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace batsel

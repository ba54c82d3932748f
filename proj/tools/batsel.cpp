// batsel command-line front end.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "batsel/batsel.hpp"

namespace fs = std::filesystem;
using namespace batsel;

namespace {

/// Exit code for oracle-check when a hard gate fails; disjoint from the
/// error classes 1-3.
constexpr int kGateFailed = 4;

/// Exclusive ownership of the output directory for the process lifetime.
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
    lock_ = (dir_ / ".batsel.lock").string();
    fd_ = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw ConfigError("output directory '" + dir + "' is locked by another run (" + lock_ + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) { /* informational only */ }
  }
  ~OutputDir() {
    ::close(fd_);
    std::remove(lock_.c_str());
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  template <class Fn>
  void write(const std::string& name, Fn&& fn) const {
    const std::string p = path(name);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + p + "'");
    fn(out);
    if (!out) throw ConfigError("write failed for '" + p + "'");
  }

 private:
  fs::path dir_;
  std::string lock_;
  int fd_ = -1;
};

struct Shared {
  std::string config_path;
  std::vector<std::string> assignments;
  std::string seed, out, gamma, sample_ratio, delta, dataset;
};

CliConfig resolve(const Shared& s) {
  CliConfig c;
  if (!s.config_path.empty()) c.load(s.config_path);
  for (const auto& a : s.assignments) c.apply_assignment(a);
  if (!s.dataset.empty()) c.set("dataset", s.dataset);
  if (!s.seed.empty()) c.set("seed", s.seed);
  if (!s.out.empty()) c.set("out", s.out);
  if (!s.gamma.empty()) c.set("gamma", s.gamma);
  if (!s.sample_ratio.empty()) c.set("sample_ratio", s.sample_ratio);
  if (!s.delta.empty()) c.set("delta", s.delta);
  return c;
}

void write_echo(const OutputDir& out, const CliConfig& c) {
  out.write("config.echo", [&](std::ostream& o) { c.echo(o); });
}

struct LoadedData {
  Dataset ds;
  std::vector<LabeledExample> adaptation, pool, test;
};

LoadedData load_dataset(const CliConfig& c) {
  if (!c.has("dataset")) throw ConfigError("missing dataset path (set dataset=PATH or --dataset)");
  const std::string path = c.str("dataset");
  if (!fs::exists(path)) throw ConfigError("dataset path '" + path + "' does not exist");
  LoadedData d;
  d.ds = read_jsonl(path);
  d.adaptation = d.ds.of_split(Split::kAdaptation);
  d.pool = d.ds.of_split(Split::kBackbone);
  d.test = d.ds.of_split(Split::kValidation);
  if (d.adaptation.empty()) throw InputError("dataset has no adaptation rows");
  if (d.pool.empty()) throw InputError("dataset has no backbone rows");
  return d;
}

int cmd_select(const CliConfig& c) {
  const LoadedData d = load_dataset(c);
  const ModelSpec spec = c.model(d.ds.dim());
  const LossSpec ls = c.loss(spec);
  const SelectionConfig sc = c.selection();
  OutputDir out(c.str("out"));
  const SelectionResult r = run_albat(d.adaptation, d.pool, spec, ls, sc);
  out.write("scores.csv", [&](std::ostream& o) { write_score_csv(o, r, sc); });
  out.write("manifest.json", [&](std::ostream& o) {
    nlohmann::json m = manifest_json(r, sc);
    m["dataset"] = c.str("dataset");
    o << m.dump(2) << '\n';
  });
  write_echo(out, c);
  long selected = 0;
  for (const auto& rec : r.score_records) selected += rec.selected ? 1 : 0;
  std::cout << "quota " << r.quota << ", selected " << selected << " of " << d.pool.size()
            << " backbone rows; eta " << (std::isfinite(r.eta) ? format_double(r.eta) : "n/a") << '\n';
  for (const auto& n : r.notices) std::cout << "notice: " << n << '\n';
  return 0;
}

void write_experiment(const OutputDir& out, const CliConfig& c, const ExperimentReport& rep) {
  out.write("report.csv", [&](std::ostream& o) { write_report_csv(o, rep); });
  nlohmann::json s = summary_json(rep);
  if (rep.protocol == "sweep-gamma") s["interior_peak"] = interior_peak(rep);
  std::vector<nlohmann::json> errors;
  for (const auto& r : rep.rows)
    if (!r.error.empty()) errors.push_back({{"arm", r.arm}, {"seed", r.seed}, {"error", r.error}});
  s["cell_errors"] = errors;
  out.write("summary.json", [&](std::ostream& o) { o << s.dump(2) << '\n'; });
  if (rep.protocol != "comparison")
    out.write("plot.csv", [&](std::ostream& o) { write_plot_csv(o, rep); });
  write_echo(out, c);
  for (const auto& cell : s["cells"]) {
    std::cout << cell["arm"].get<std::string>() << " gamma=" << cell["gamma"] << " ratio=" << cell["sample_ratio"]
              << " surrogate=" << cell["surrogate_fraction"] << " mean=" << cell["mean"];
    if (cell.contains("vs_random")) std::cout << " p(vs random)=" << cell["vs_random"]["sign_test_p"];
    if (cell.contains("vs_none")) std::cout << " p(vs none)=" << cell["vs_none"]["sign_test_p"];
    std::cout << '\n';
  }
}

std::vector<std::uint64_t> seeds_of(const CliConfig& c) {
  const long n = c.integer("seeds");
  if (n < 1) throw ConfigError("seeds must be >= 1");
  return seed_range(c.u64("seed"), static_cast<int>(n));
}

int cmd_run(const CliConfig& c) {
  const SelectionConfig sc = c.selection();
  const auto seeds = seeds_of(c);
  if (!c.has("dataset")) {
    const TaskSpec task = c.task();
    OutputDir out(c.str("out"));
    write_experiment(out, c, run_comparison(task, sc, seeds));
    return 0;
  }
  // Dataset mode: validation rows are the held-out test set; seeds vary the
  // adapter initialization and the random arm.
  const LoadedData d = load_dataset(c);
  if (d.test.empty()) throw InputError("run needs validation rows as a held-out test set");
  TaskSpec task = c.task();
  task.name = c.has("task_name") ? c.str("task_name") : fs::path(c.str("dataset")).stem().string();
  task.dim = d.ds.dim();
  const ModelSpec spec = c.model(task.dim);
  if (spec.head == Head::kSoftmax) throw ConfigError("run in dataset mode supports logistic-binary and linear heads");
  task.kind = spec.head == Head::kLinear ? TaskKind::kLinearGaussian : TaskKind::kGaussianClasses;
  task.hidden = c.hidden();
  task.l2_lambda = c.loss(spec).l2_lambda;
  TaskData data{d.adaptation, d.pool, d.test, {}};
  OutputDir out(c.str("out"));
  ExperimentReport rep{"comparison", {}, config_echo(task, sc, seeds)};
  rep.rows = over_seeds(seeds, thread_count(), [&](std::uint64_t seed) {
    SelectionConfig s = sc;
    s.seed = seed;
    const ArmContext ctx{task, data, s};
    return std::vector<ReportRow>{run_none_arm(ctx), run_random_arm(ctx), run_bat_arm(ctx)};
  });
  write_experiment(out, c, rep);
  return 0;
}

int cmd_sweep(const CliConfig& c, const std::string& which) {
  if (c.has("dataset")) throw ConfigError("sweeps run on generated tasks; unset dataset");
  const SelectionConfig sc = c.selection();
  const TaskSpec task = c.task();
  const auto seeds = seeds_of(c);
  OutputDir out(c.str("out"));
  ExperimentReport rep;
  if (which == "gamma") rep = sweep_gamma(task, sc, c.list("gammas"), seeds);
  else if (which == "ratio") rep = sweep_sample_ratio(task, sc, c.list("ratios"), seeds);
  else rep = compare_surrogates(task, sc, c.list("fractions"), seeds);
  write_experiment(out, c, rep);
  return 0;
}

int cmd_gen_task(const CliConfig& c) {
  const TaskSpec task = c.task();
  const std::uint64_t seed = c.u64("seed");
  const TaskData data = generate_task(task, seed);
  OutputDir out(c.str("out"));
  out.write("dataset.jsonl", [&](std::ostream& o) {
    write_jsonl(o, data.adaptation);
    write_jsonl(o, data.pool);
    write_jsonl(o, data.test);
  });
  nlohmann::json j{{"task", to_json(task)}, {"seed", seed}, {"checksum", task_checksum(data)}};
  std::vector<std::string> helpful;
  for (std::size_t i = 0; i < data.pool.size(); ++i)
    if (data.helpful[i]) helpful.push_back(data.pool[i].id);
  j["helpful_ids"] = helpful;
  out.write("task.json", [&](std::ostream& o) { o << j.dump(2) << '\n'; });
  write_echo(out, c);
  std::cout << "wrote " << data.adaptation.size() << " adaptation, " << data.pool.size() << " backbone, "
            << data.test.size() << " held-out rows; checksum " << task_checksum(data) << '\n';
  return 0;
}

struct Gate {
  std::string name;
  bool hard = true;
  bool pass = false;
  std::string detail;
};

Gate gate_sm_rank_one(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "oracle-sm"));
  std::normal_distribution<double> nd(0.0, 1.0);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const long d = 2 + static_cast<long>(rng() % 39);
    const double lam = std::exp(std::uniform_real_distribution<double>(std::log(1e-2), std::log(2.0))(rng));
    GradientBundle b;
    b.example_ids = {"g"};
    b.grads = {Eigen::MatrixXd(1, d)};
    b.num_examples = 1;
    for (long i = 0; i < d; ++i) b.grads[0](0, i) = nd(rng);
    Eigen::VectorXd v(d);
    for (long i = 0; i < d; ++i) v[i] = nd(rng);
    const auto op = CurvatureOperator::from_bundle(b, {lam}, CurvatureMode::kSmImplicit);
    Eigen::MatrixXd dense = b.grads[0].transpose() * b.grads[0];
    dense.diagonal().array() += lam;
    const Eigen::VectorXd ref = dense.fullPivLu().solve(v);
    worst = std::max(worst, (op.apply_inverse(0, v) - ref).norm() / ref.norm());
  }
  return {"sherman-morrison rank-one exactness", true, worst <= 1e-10,
          "max relative error " + format_double(worst) + " (limit 1e-10)"};
}

Gate gate_rank_agreement(std::uint64_t seed) {
  const TaskSpec task = TaskSpec::logistic_benchmark();
  const TaskSampler sampler(task, seed);
  Rng rng(derive_seed(seed, "oracle-benchmark"));
  const auto train = sampler.adaptation(rng, 200, "a");
  const auto val = sampler.adaptation(rng, 50, "v", Split::kValidation);
  const auto pool = sampler.pool(rng, 100, "b");
  const ModelSpec spec = task.model();
  const LossSpec ls = task.loss();
  const ModelParameters th = fit_convex(spec, refs_of(train), ls);
  ScoreConfig fast;
  fast.delta = 1;
  fast.seed = seed;
  const ScoreEngine engine(spec, th, refs_of(train), refs_of(val), ls, fast);
  const auto zf = engine.score_all(refs_of(pool));
  ExactScorer::Options o;
  o.seed = seed;
  const ExactScorer exact(spec, th, refs_of(train), refs_of(val), ls, o);
  std::vector<double> ze;
  for (const auto& e : pool) ze.push_back(exact(e));
  const double rho = spearman(zf, ze);
  return {"fast vs exact Z rank agreement", true, rho >= 0.9, "spearman " + format_double(rho) + " (limit 0.9)"};
}

Gate gate_contraction(std::uint64_t seed) {
  const TaskSpec task = TaskSpec::q1();
  const TaskSampler sampler(task, seed);
  Rng rng(derive_seed(seed, "oracle-contraction"));
  const auto a = sampler.adaptation(rng, 60);
  const auto b = sampler.pool(rng, 20);
  const ModelSpec spec = task.model();
  const LossSpec ls = task.loss();
  const ModelParameters p = single_layer_params(sampler.truth());
  const auto ra = refs_of(a), rb = refs_of(b);
  ExampleRefs all = ra;
  all.insert(all.end(), rb.begin(), rb.end());
  const Eigen::MatrixXd h_all = hessian_sum(spec, p, all, ls).matrix;
  const Eigen::MatrixXd h_b = hessian_sum(spec, p, rb, ls).matrix;
  const Eigen::MatrixXd h_a = hessian_sum(spec, p, ra, ls).matrix;
  const double ident = (h_all - h_b - h_a).norm() / h_a.norm();
  const ContractionReport empty = check_contraction(spec, ra, {}, p, 0.9, ls);
  const bool pass = ident < 1e-8 && empty.holds;
  return {"contraction identity and empty-selection case", true, pass,
          "identity residual " + format_double(ident) + ", empty selection holds=" + (empty.holds ? "true" : "false")};
}

std::pair<Gate, Gate> gate_rho(const CliConfig& c, nlohmann::json& dump) {
  RhoConfig rc;
  std::vector<long> grid;
  for (double k : c.list("rho_grid")) grid.push_back(static_cast<long>(k));
  rc.k_grid = grid;
  rc.seeds = static_cast<int>(c.integer("rho_seeds"));
  rc.base_seed = c.u64("seed");
  rc.population = c.integer("population");
  const TaskSpec task = TaskSpec::q1();
  const RhoEstimate plain = estimate_rho(task, RhoMethod::kPlain, rc);
  const RhoEstimate bat = estimate_rho(task, RhoMethod::kBat, rc);
  dump["rho_plain"] = to_json(plain);
  dump["rho_bat"] = to_json(bat);
  Gate g1{"rho_bat <= rho_plain (quadratic toy)", true, bat.rho_hat <= plain.rho_hat,
          "rho_bat " + format_double(bat.rho_hat) + ", rho_plain " + format_double(plain.rho_hat) +
              ", contraction holds on " + format_double(bat.contraction_fraction.back()) + " of seeds"};
  Gate g2{"rho curve plateau (diagnostic)", false, plain.plateau && bat.plateau,
          "last-octave slopes plain " + format_double(plain.last_slope) + ", bat " + format_double(bat.last_slope)};
  return {g1, g2};
}

int cmd_oracle_check(const CliConfig& c) {
  const std::uint64_t seed = c.u64("seed");
  OutputDir out(c.str("out"));
  nlohmann::json dump;
  std::vector<Gate> gates;
  gates.push_back({"quota arithmetic 57 @ 0.95 -> 3", true, backbone_quota(0.95, 57) == 3,
                   "quota " + std::to_string(backbone_quota(0.95, 57))});
  gates.push_back(gate_sm_rank_one(seed));
  gates.push_back(gate_rank_agreement(seed));
  gates.push_back(gate_contraction(seed));
  const auto [g1, g2] = gate_rho(c, dump);
  gates.push_back(g1);
  gates.push_back(g2);

  bool ok = true;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& g : gates) {
    std::cout << (g.pass ? "PASS" : "FAIL") << (g.hard ? "       " : " (soft)") << "  " << g.name << "  ["
              << g.detail << "]\n";
    if (g.hard && !g.pass) ok = false;
    table.push_back({{"name", g.name}, {"hard", g.hard}, {"pass", g.pass}, {"detail", g.detail}});
  }
  dump["gates"] = table;
  dump["task"] = "Q1";
  out.write("oracle.json", [&](std::ostream& o) { o << dump.dump(2) << '\n'; });
  write_echo(out, c);
  return ok ? 0 : kGateFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"batsel: backbone-augmented training data selection"};
  app.require_subcommand(1);
  Shared s;
  auto add_shared = [&](CLI::App* sub) {
    sub->add_option("--config", s.config_path, "flat key = value config file");
    sub->add_option("--set", s.assignments, "override any config key (key=value), repeatable");
    sub->add_option("--seed", s.seed, "master seed");
    sub->add_option("--out", s.out, "output directory");
    sub->add_option("--gamma", s.gamma, "augmentation ratio in (0,1)");
    sub->add_option("--sample-ratio", s.sample_ratio, "share of the pool scored");
    sub->add_option("--delta", s.delta, "noise draws per loss");
    sub->add_option("--dataset", s.dataset, "JSONL dataset");
  };
  struct Sub {
    const char* name;
    const char* help;
  };
  const std::vector<Sub> subs = {
      {"select", "score the backbone pool and write scores.csv + manifest.json"},
      {"run", "none / random / BAT comparison over seeds"},
      {"sweep-gamma", "BAT over a gamma grid"},
      {"sweep-ratio", "BAT over sample ratios at a fixed quota"},
      {"sweep-surrogate", "BAT with weakened surrogates"},
      {"oracle-check", "fast-path vs oracle hard gates"},
      {"gen-task", "write a synthetic task as JSONL"},
  };
  std::map<std::string, CLI::App*> cmds;
  for (const auto& sub : subs) {
    CLI::App* a = app.add_subcommand(sub.name, sub.help);
    add_shared(a);
    cmds[sub.name] = a;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ERROR 3: " << e.what() << '\n' << app.help();
    return 3;
  }

  std::string which;
  for (const auto& [name, a] : cmds)
    if (a->parsed()) which = name;
  try {
    const CliConfig c = resolve(s);
    if (which == "select") return cmd_select(c);
    if (which == "run") return cmd_run(c);
    if (which == "sweep-gamma") return cmd_sweep(c, "gamma");
    if (which == "sweep-ratio") return cmd_sweep(c, "ratio");
    if (which == "sweep-surrogate") return cmd_sweep(c, "surrogate");
    if (which == "oracle-check") return cmd_oracle_check(c);
    if (which == "gen-task") return cmd_gen_task(c);
  } catch (const Error& e) {
    const int code = static_cast<int>(e.code());
    std::cerr << "ERROR " << code << ": " << e.what() << '\n';
    if (e.code() == ErrorCode::kConfig) std::cerr << cmds[which]->help();
    return code;
  } catch (const std::exception& e) {
    std::cerr << "ERROR 2: " << e.what() << '\n';
    return 2;
  }
  return 3;
}

#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "batsel/selection.hpp"
#include "batsel/stats.hpp"
#include "batsel/tasks.hpp"
#include "json.hpp"

namespace batsel {

struct ReportRow {
  std::string task;
  std::string arm;  // none | random | bat
  double gamma = 0.0;
  double sample_ratio = 1.0;
  double surrogate_fraction = 1.0;
  std::uint64_t seed = 0;
  double heldout_logloss = std::numeric_limits<double>::quiet_NaN();
  long quota = 0;
  double runtime_ms = 0.0;
  std::string error;  // empty on success
  std::string note;
};

struct ExperimentReport {
  std::string protocol;
  std::vector<ReportRow> rows;
  nlohmann::json config;
};

/// Per-seed data and settings shared by every arm of a cell.
struct ArmContext {
  const TaskSpec& task;
  const TaskData& data;
  SelectionConfig cfg;
};

namespace detail {

template <class Fn>
ReportRow timed_cell(ReportRow row, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fn(row);
  } catch (const std::exception& e) {
    row.heldout_logloss = std::numeric_limits<double>::quiet_NaN();
    row.error = e.what();
  }
  row.runtime_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

inline ReportRow base_row(const ArmContext& c, std::string arm) {
  ReportRow r;
  r.task = c.task.name;
  r.arm = std::move(arm);
  r.gamma = c.cfg.gamma;
  r.sample_ratio = c.cfg.sample_ratio;
  r.seed = c.cfg.seed;
  return r;
}

}  // namespace detail

inline double heldout_loss(const TaskSpec& task, const ModelParameters& p, const TaskData& data) {
  return mean_data_loss(task.model(), p, data.test, task.loss());
}

/// Adapter trained on D^A alone.
inline ReportRow run_none_arm(const ArmContext& c) {
  return detail::timed_cell(detail::base_row(c, "none"), [&](ReportRow& row) {
    row.quota = 0;
    const auto r = train(c.task.model(), c.data.adaptation, c.task.loss(), c.cfg.adapter_train());
    row.heldout_logloss = heldout_loss(c.task, r.params, c.data);
  });
}

/// D^A plus `quota` pool rows drawn uniformly from the full pool.
inline ReportRow run_random_arm(const ArmContext& c) {
  return detail::timed_cell(detail::base_row(c, "random"), [&](ReportRow& row) {
    const long quota = c.cfg.quota_override
                           ? *c.cfg.quota_override
                           : backbone_quota(c.cfg.gamma, static_cast<long>(c.data.adaptation.size()));
    row.quota = quota;
    ExampleRefs bat = refs_of(c.data.adaptation);
    const ExampleRefs pool = refs_of(c.data.pool);
    Rng rng(derive_seed(c.cfg.seed, "random-arm"));
    std::sample(pool.begin(), pool.end(), std::back_inserter(bat),
                static_cast<std::size_t>(std::min<long>(quota, static_cast<long>(pool.size()))), rng);
    const auto r = train(c.task.model(), bat, c.task.loss(), c.cfg.adapter_train());
    row.heldout_logloss = heldout_loss(c.task, r.params, c.data);
  });
}

inline ReportRow run_bat_arm(const ArmContext& c, double surrogate_fraction = 1.0) {
  ReportRow base = detail::base_row(c, "bat");
  base.surrogate_fraction = surrogate_fraction;
  return detail::timed_cell(base, [&](ReportRow& row) {
    const auto res = run_albat(c.data.adaptation, c.data.pool, c.task.model(), c.task.loss(), c.cfg, 1);
    row.quota = res.quota;
    for (const auto& n : res.notices) row.note += (row.note.empty() ? "" : "; ") + n;
    row.heldout_logloss = heldout_loss(c.task, res.adapter_params, c.data);
  });
}

/// Runs `cell(seed_index)` for every seed in parallel and concatenates the
/// rows in seed order.
template <class Cell>
std::vector<ReportRow> over_seeds(const std::vector<std::uint64_t>& seeds, unsigned threads, Cell&& cell) {
  std::vector<std::vector<ReportRow>> per(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) { per[i] = cell(seeds[i]); });
  std::vector<ReportRow> rows;
  for (auto& v : per) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

inline std::vector<std::uint64_t> seed_range(std::uint64_t first, int count) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < count; ++i) s.push_back(first + static_cast<std::uint64_t>(i));
  return s;
}

inline nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j;
  j["name"] = t.name;
  j["kind"] = std::string(to_string(t.kind));
  j["dim"] = t.dim;
  j["n_adaptation"] = t.n_adaptation;
  j["pool_size"] = t.pool_size;
  j["n_test"] = t.n_test;
  j["class_sep"] = t.class_sep;
  j["shift"] = t.shift;
  j["helpful_fraction"] = t.helpful_fraction;
  j["label_sigma"] = t.label_sigma;
  j["harmful_fraction"] = t.harmful_fraction;
  j["weight_scale"] = t.weight_scale;
  j["noise_sigma"] = t.noise_sigma;
  j["l2_lambda"] = t.l2_lambda;
  j["hidden"] = t.hidden;
  return j;
}

inline nlohmann::json config_echo(const TaskSpec& t, const SelectionConfig& c,
                                  const std::vector<std::uint64_t>& seeds) {
  return {{"task", to_json(t)}, {"selection", to_json(c)}, {"seeds", seeds}};
}

/// none / random / bat on each seed; arms share the seed's data and the
/// adapter initialization.
inline ExperimentReport run_comparison(const TaskSpec& task, const SelectionConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds,
                                       unsigned threads = thread_count()) {
  if (seeds.size() < 2) throw ConfigError("comparison needs >= 2 seeds");
  task.validate();
  cfg.validate();
  ExperimentReport rep{"comparison", {}, config_echo(task, cfg, seeds)};
  rep.rows = over_seeds(seeds, threads, [&](std::uint64_t seed) {
    const TaskData data = generate_task(task, seed);
    SelectionConfig c = cfg;
    c.seed = seed;
    const ArmContext ctx{task, data, c};
    return std::vector<ReportRow>{run_none_arm(ctx), run_random_arm(ctx), run_bat_arm(ctx)};
  });
  return rep;
}

/// BAT at each sample ratio with the quota held fixed at its full-pool
/// value; a `none` baseline row per seed.
inline ExperimentReport sweep_sample_ratio(const TaskSpec& task, const SelectionConfig& cfg,
                                           const std::vector<double>& ratios,
                                           const std::vector<std::uint64_t>& seeds,
                                           unsigned threads = thread_count()) {
  task.validate();
  cfg.validate();
  if (ratios.empty()) throw ConfigError("ratio grid is empty");
  for (double r : ratios)
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sample ratios must lie in (0, 1]");
  ExperimentReport rep{"sweep-ratio", {}, config_echo(task, cfg, seeds)};
  rep.config["ratios"] = ratios;
  const long quota = cfg.quota_override ? *cfg.quota_override : backbone_quota(cfg.gamma, task.n_adaptation);
  rep.rows = over_seeds(seeds, threads, [&](std::uint64_t seed) {
    const TaskData data = generate_task(task, seed);
    SelectionConfig c = cfg;
    c.seed = seed;
    c.quota_override = quota;
    std::vector<ReportRow> rows{run_none_arm({task, data, c})};
    for (double r : ratios) {
      c.sample_ratio = r;
      ReportRow row = run_bat_arm({task, data, c});
      if (subsample_size(r, data.pool.size()) < static_cast<std::size_t>(quota))
        row.note += (row.note.empty() ? "" : "; ") + std::string("pool pressure: sample smaller than quota");
      rows.push_back(std::move(row));
    }
    return rows;
  });
  return rep;
}

/// BAT per γ (quota recomputed), plus none and random rows per seed and γ.
inline ExperimentReport sweep_gamma(const TaskSpec& task, const SelectionConfig& cfg,
                                    const std::vector<double>& gammas,
                                    const std::vector<std::uint64_t>& seeds,
                                    unsigned threads = thread_count()) {
  task.validate();
  cfg.validate();
  if (gammas.empty()) throw ConfigError("gamma grid is empty");
  for (double g : gammas)
    if (!(g > 0.0 && g < 1.0)) throw ConfigError("gammas must lie in (0, 1)");
  ExperimentReport rep{"sweep-gamma", {}, config_echo(task, cfg, seeds)};
  rep.config["gammas"] = gammas;
  rep.rows = over_seeds(seeds, threads, [&](std::uint64_t seed) {
    const TaskData data = generate_task(task, seed);
    SelectionConfig c = cfg;
    c.seed = seed;
    c.quota_override.reset();
    std::vector<ReportRow> rows;
    for (double g : gammas) {
      c.gamma = g;
      const ArmContext ctx{task, data, c};
      rows.push_back(run_none_arm(ctx));
      rows.push_back(run_random_arm(ctx));
      ReportRow bat = run_bat_arm(ctx);
      if (bat.quota > static_cast<long>(data.pool.size()))
        bat.note += (bat.note.empty() ? "" : "; ") + std::string("pool pressure: pool smaller than quota");
      rows.push_back(std::move(bat));
    }
    return rows;
  });
  return rep;
}

inline int surrogate_steps_for(double fraction, int full_steps) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("surrogate fractions must lie in (0, 1]");
  const long steps = round_half_up(fraction * static_cast<double>(full_steps));
  if (steps < 1) throw ConfigError("surrogate fraction " + format_double(fraction) + " trains 0 steps");
  return static_cast<int>(steps);
}

/// One BAT arm per surrogate strength (steps = round(fraction · surrogate
/// steps)) plus the none baseline; rows ordered by strength within a seed.
inline ExperimentReport compare_surrogates(const TaskSpec& task, const SelectionConfig& cfg,
                                           std::vector<double> fractions,
                                           const std::vector<std::uint64_t>& seeds,
                                           unsigned threads = thread_count()) {
  task.validate();
  cfg.validate();
  if (fractions.empty()) throw ConfigError("fraction grid is empty");
  for (double f : fractions) surrogate_steps_for(f, cfg.surrogate_steps);
  std::sort(fractions.begin(), fractions.end());
  ExperimentReport rep{"sweep-surrogate", {}, config_echo(task, cfg, seeds)};
  rep.config["fractions"] = fractions;
  rep.rows = over_seeds(seeds, threads, [&](std::uint64_t seed) {
    const TaskData data = generate_task(task, seed);
    SelectionConfig c = cfg;
    c.seed = seed;
    std::vector<ReportRow> rows{run_none_arm({task, data, c})};
    for (double f : fractions) {
      SelectionConfig cf = c;
      cf.surrogate_steps = surrogate_steps_for(f, cfg.surrogate_steps);
      rows.push_back(run_bat_arm({task, data, cf}, f));
    }
    return rows;
  });
  return rep;
}

inline void write_report_csv(std::ostream& out, const ExperimentReport& rep) {
  out << "task,arm,gamma,sample_ratio,surrogate_fraction,seed,heldout_logloss,quota,runtime_ms\n";
  for (const auto& r : rep.rows) {
    out << r.task << ',' << r.arm << ',' << format_double(r.gamma) << ','
        << format_double(r.sample_ratio) << ',' << format_double(r.surrogate_fraction) << ','
        << r.seed << ',' << (r.error.empty() ? format_double(r.heldout_logloss) : "error") << ','
        << r.quota << ',' << format_double(std::round(r.runtime_ms * 1000.0) / 1000.0) << '\n';
  }
}

/// Group key: (arm, γ, sample ratio, surrogate fraction).
using CellKey = std::tuple<std::string, double, double, double>;

struct CellSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<double> losses;  // successful cells only
  int errors = 0;
};

inline std::map<CellKey, CellSummary> group_rows(const ExperimentReport& rep) {
  std::map<CellKey, CellSummary> g;
  for (const auto& r : rep.rows) {
    auto& c = g[{r.arm, r.gamma, r.sample_ratio, r.surrogate_fraction}];
    if (r.error.empty()) {
      c.seeds.push_back(r.seed);
      c.losses.push_back(r.heldout_logloss);
    } else {
      ++c.errors;
    }
  }
  return g;
}

/// Paired losses of two arms over seeds present (and successful) in both.
inline std::pair<std::vector<double>, std::vector<double>> paired(const CellSummary& a, const CellSummary& b) {
  std::map<std::uint64_t, double> mb;
  for (std::size_t i = 0; i < b.seeds.size(); ++i) mb[b.seeds[i]] = b.losses[i];
  std::pair<std::vector<double>, std::vector<double>> out;
  for (std::size_t i = 0; i < a.seeds.size(); ++i) {
    auto it = mb.find(a.seeds[i]);
    if (it == mb.end()) continue;
    out.first.push_back(a.losses[i]);
    out.second.push_back(it->second);
  }
  return out;
}

/// Means, standard errors and one-sided sign tests of every BAT cell against
/// the none (and random) cell at the same γ.
inline nlohmann::json summary_json(const ExperimentReport& rep) {
  const auto groups = group_rows(rep);
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [key, c] : groups) {
    const auto& [arm, gamma, ratio, frac] = key;
    nlohmann::json j{{"arm", arm},
                     {"gamma", gamma},
                     {"sample_ratio", ratio},
                     {"surrogate_fraction", frac},
                     {"n", c.losses.size()},
                     {"errors", c.errors},
                     {"mean", c.losses.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean(c.losses))},
                     {"stderr", standard_error(c.losses)}};
    if (arm == "bat") {
      for (const char* other : {"none", "random"}) {
        // Baselines do not depend on the sample ratio or surrogate strength.
        for (const auto& [k2, c2] : groups) {
          if (std::get<0>(k2) != other || std::get<1>(k2) != gamma) continue;
          const auto [a, b] = paired(c, c2);
          const SignTest t = sign_test_less(a, b);
          std::vector<double> diff;
          for (std::size_t i = 0; i < a.size(); ++i) diff.push_back(a[i] - b[i]);
          j[std::string("vs_") + other] = {{"wins", t.wins},
                                           {"losses", t.losses},
                                           {"ties", t.ties},
                                           {"sign_test_p", t.p_value},
                                           {"mean_difference", mean(diff)},
                                           {"stderr_difference", standard_error(diff)}};
          break;
        }
      }
    }
    cells.push_back(std::move(j));
  }
  return {{"protocol", rep.protocol}, {"cells", cells}, {"config", rep.config}};
}

/// Plot data for the BAT arm: x is the swept quantity of the protocol.
inline void write_plot_csv(std::ostream& out, const ExperimentReport& rep) {
  out << "x,mean,stderr\n";
  for (const auto& [key, c] : group_rows(rep)) {
    const auto& [arm, gamma, ratio, frac] = key;
    if (arm != "bat" || c.losses.empty()) continue;
    const double x = rep.protocol == "sweep-ratio"       ? ratio
                     : rep.protocol == "sweep-surrogate" ? frac
                                                         : gamma;
    out << format_double(x) << ',' << format_double(mean(c.losses)) << ','
        << format_double(standard_error(c.losses)) << '\n';
  }
}

/// Diagnostic for the γ sweep: the best BAT mean sits strictly inside the grid.
inline bool interior_peak(const ExperimentReport& rep) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& [key, c] : group_rows(rep))
    if (std::get<0>(key) == "bat" && !c.losses.empty()) pts.emplace_back(std::get<1>(key), mean(c.losses));
  if (pts.size() < 3) return false;
  std::size_t best = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (pts[i].second < pts[best].second) best = i;
  return best > 0 && best + 1 < pts.size();
}

}  // namespace batsel

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "batsel/influence.hpp"
#include "batsel/train.hpp"
#include "json.hpp"

namespace batsel {

/// Round-half-up with a small tolerance so that values a few ulps below .5
/// (from the division) still round up.
inline long round_half_up(double v) { return static_cast<long>(std::floor(v + 0.5 + 1e-9)); }

/// Backbone quota m = round(n · (1 − γ) / γ).
inline long backbone_quota(double gamma, long n_adaptation) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (n_adaptation < 1) throw ConfigError("adaptation set must be nonempty");
  return std::max(0L, round_half_up(static_cast<double>(n_adaptation) * (1.0 - gamma) / gamma));
}

inline std::size_t subsample_size(double ratio, std::size_t pool) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("sample_ratio must lie in (0, 1]");
  if (pool == 0) return 0;
  const long n = round_half_up(ratio * static_cast<double>(pool));
  return static_cast<std::size_t>(std::clamp<long>(n, 1, static_cast<long>(pool)));
}

/// Uniform sample without replacement; survivors keep their pool order.
inline ExampleRefs subsample_pool(const ExampleRefs& pool, double ratio, std::uint64_t seed) {
  const std::size_t k = subsample_size(ratio, pool.size());
  if (k == pool.size()) return pool;
  ExampleRefs out;
  out.reserve(k);
  Rng rng(derive_seed(seed, "subsample"));
  std::sample(pool.begin(), pool.end(), std::back_inserter(out), k, rng);
  return out;
}

/// η with the number of candidates sitting exactly at η that are still
/// admitted (ascending id), so that the selection count equals the quota.
struct Threshold {
  double eta = 0.0;
  long quota = 0;
  long admitted_at_eta = 0;
  bool clamped = false;
};

namespace detail {

inline std::vector<std::size_t> score_order(const std::vector<double>& z,
                                            const std::vector<std::string>& ids) {
  std::vector<std::size_t> idx(z.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return ids[a] < ids[b];
  });
  return idx;
}

inline void check_scores(const std::vector<double>& z, const std::vector<std::string>& ids) {
  if (z.size() != ids.size()) throw InputError("scores and ids differ in length");
  for (std::size_t i = 0; i < z.size(); ++i)
    if (!std::isfinite(z[i])) throw InputError("non-finite score for '" + ids[i] + "'");
}

}  // namespace detail

/// η = midpoint of the quota-th and (quota+1)-th largest scores. Quota 0
/// puts η just above the maximum; quota = |scores| just below the minimum.
/// A quota above |scores| is clamped and flagged.
inline Threshold choose_eta(const std::vector<double>& z, const std::vector<std::string>& ids,
                            long quota) {
  detail::check_scores(z, ids);
  if (quota < 0) throw ConfigError("quota must be >= 0");
  Threshold t;
  t.quota = quota;
  if (quota > static_cast<long>(z.size())) {
    t.quota = static_cast<long>(z.size());
    t.clamped = true;
  }
  if (z.empty()) return t;
  const auto order = detail::score_order(z, ids);
  const auto at = [&](long rank) { return z[order[static_cast<std::size_t>(rank)]]; };
  const long n = static_cast<long>(z.size());
  if (t.quota == 0) {
    t.eta = std::nextafter(at(0), std::numeric_limits<double>::infinity());
  } else if (t.quota == n) {
    t.eta = std::nextafter(at(n - 1), -std::numeric_limits<double>::infinity());
  } else {
    const double hi = at(t.quota - 1), lo = at(t.quota);
    t.eta = lo + 0.5 * (hi - lo);
    if (hi == lo) {
      long above = 0;
      for (double v : z) above += v > t.eta ? 1 : 0;
      t.admitted_at_eta = t.quota - above;
    }
  }
  return t;
}

struct ScoreRecord {
  std::string candidate_id;
  double z = std::numeric_limits<double>::quiet_NaN();
  bool selected = false;
  long rank = 0;
  std::string note;  // tie-break or error annotation
};

/// Flags z > η. Candidates with z == η are admitted in ascending-id order
/// up to `admitted_at_eta`; the rest are recorded as tie-break losers.
/// Ranks follow (z descending, id ascending).
inline std::vector<ScoreRecord> select(const std::vector<double>& z,
                                       const std::vector<std::string>& ids, const Threshold& t) {
  detail::check_scores(z, ids);
  std::vector<ScoreRecord> recs(z.size());
  const auto order = detail::score_order(z, ids);
  long admitted = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t i = order[r];
    ScoreRecord& rec = recs[i];
    rec.candidate_id = ids[i];
    rec.z = z[i];
    rec.rank = static_cast<long>(r) + 1;
    if (z[i] > t.eta) {
      rec.selected = true;
    } else if (z[i] == t.eta) {
      rec.selected = admitted < t.admitted_at_eta;
      admitted += rec.selected ? 1 : 0;
      rec.note = rec.selected ? "tie at eta: admitted by id" : "tie at eta: rejected by id";
    }
  }
  return recs;
}

inline std::vector<ScoreRecord> select(const std::vector<double>& z,
                                       const std::vector<std::string>& ids, double eta) {
  Threshold t;
  t.eta = eta;
  return select(z, ids, t);
}

struct SelectionConfig {
  double gamma = 0.9;
  double sample_ratio = 1.0;
  int delta = 3;
  double damping_scale = 0.1;  // λ_l = scale · mean‖g‖² / D_l
  int surrogate_steps = 400;
  int adapter_steps = 400;
  double learning_rate = 0.5;
  int batch_size = 1 << 30;
  double validation_fraction = 0.2;
  std::optional<long> quota_override;
  ScoreMode score_mode = ScoreMode::kBartlett;
  CurvatureMode g_mode = CurvatureMode::kSmImplicit;
  CurvatureMode q_mode = CurvatureMode::kSmImplicit;
  Moment moment = Moment::kModelExpected;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
    if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) throw ConfigError("sample_ratio must lie in (0, 1]");
    if (delta < 1) throw ConfigError("delta must be >= 1");
    if (!(damping_scale > 0.0)) throw ConfigError("damping_scale must be > 0");
    if (surrogate_steps < 1) throw ConfigError("surrogate_steps must be >= 1");
    if (adapter_steps < 0) throw ConfigError("adapter_steps must be >= 0");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw ConfigError("validation_fraction must lie in (0, 1)");
    if (quota_override && *quota_override < 0) throw ConfigError("quota must be >= 0");
  }

  TrainConfig adapter_train() const {
    return {adapter_steps, learning_rate, batch_size, derive_seed(seed, "adapter")};
  }
  TrainConfig surrogate_train() const {
    return {surrogate_steps, learning_rate, batch_size, derive_seed(seed, "surrogate")};
  }
};

struct SelectionResult {
  double eta = std::numeric_limits<double>::quiet_NaN();
  long quota = 0;
  bool scored = false;
  std::vector<std::string> bat_dataset;
  std::vector<std::string> validation_ids;
  std::vector<ScoreRecord> score_records;  // pool order
  std::vector<std::string> notices;
  ModelParameters surrogate_params;
  ModelParameters adapter_params;
  std::vector<double> adapter_loss_trace;
  std::vector<double> damping;
};

/// Deterministic hold-out of round(fraction · n) examples (at least 1, at
/// most n − 1) chosen by a seeded hash of the id. Returns (train, validation)
/// in input order.
inline std::pair<ExampleRefs, ExampleRefs> split_validation(const ExampleRefs& xs, double fraction,
                                                            std::uint64_t seed) {
  if (xs.size() < 2) throw ConfigError("adaptation set needs >= 2 examples to hold out validation");
  const long n = static_cast<long>(xs.size());
  const long nv = std::clamp<long>(round_half_up(fraction * static_cast<double>(n)), 1, n - 1);
  const std::uint64_t salt = derive_seed(seed, "validation");
  std::vector<std::pair<std::uint64_t, std::size_t>> keys;
  for (std::size_t i = 0; i < xs.size(); ++i) keys.emplace_back(splitmix64(fnv1a(xs[i]->id) ^ salt), i);
  std::sort(keys.begin(), keys.end());
  std::vector<bool> held(xs.size(), false);
  for (long i = 0; i < nv; ++i) held[keys[static_cast<std::size_t>(i)].second] = true;
  std::pair<ExampleRefs, ExampleRefs> out;
  for (std::size_t i = 0; i < xs.size(); ++i) (held[i] ? out.second : out.first).push_back(xs[i]);
  return out;
}

inline void check_disjoint(const ExampleRefs& a, const ExampleRefs& b) {
  std::unordered_set<std::string> ids;
  for (const auto* e : a)
    if (!ids.insert(e->id).second) throw InputError("duplicate id '" + e->id + "'");
  for (const auto* e : b)
    if (!ids.insert(e->id).second) throw InputError("duplicate id '" + e->id + "' across adaptation and pool");
}

/// Algorithm: hold out validation from D^A, train the surrogate on the rest,
/// subsample the pool, score it against G/H/Q built at the surrogate, keep
/// the top `quota`, then train a fresh adapter on D^A followed by the
/// selected candidates. Stage failures are re-thrown with a stage tag.
inline SelectionResult run_albat(const ExampleRefs& adaptation, const ExampleRefs& pool,
                                 const ModelSpec& spec, const LossSpec& ls,
                                 const SelectionConfig& cfg, unsigned threads = thread_count()) {
  auto stage = [](std::string_view name, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      rethrow_with_stage(name, e);
    }
  };

  stage("config", [&] {
    cfg.validate();
    spec.validate();
    ls.validate(spec);
    return 0;
  });
  stage("input", [&] {
    if (adaptation.empty()) throw InputError("adaptation set is empty");
    check_disjoint(adaptation, pool);
    for (const auto* e : adaptation) check_label(spec, *e);
    for (const auto* e : pool) check_label(spec, *e);
    return 0;
  });

  SelectionResult res;
  res.quota = cfg.quota_override ? *cfg.quota_override
                                 : backbone_quota(cfg.gamma, static_cast<long>(adaptation.size()));

  if (res.quota == 0) {
    res.notices.push_back("quota is 0: trained plain adaptation, pool not scored");
    auto trained = stage("adapter", [&] { return train(spec, adaptation, ls, cfg.adapter_train()); });
    res.adapter_params = std::move(trained.params);
    res.adapter_loss_trace = std::move(trained.loss_trace);
    for (const auto* e : adaptation) res.bat_dataset.push_back(e->id);
    for (std::size_t i = 0; i < pool.size(); ++i)
      res.score_records.push_back({pool[i]->id, std::numeric_limits<double>::quiet_NaN(), false,
                                   static_cast<long>(i) + 1, "not scored: quota 0"});
    return res;
  }

  const auto [train_set, validation] =
      stage("validation-split", [&] { return split_validation(adaptation, cfg.validation_fraction, cfg.seed); });
  for (const auto* e : validation) res.validation_ids.push_back(e->id);

  res.surrogate_params = stage("surrogate", [&] {
    return train(spec, train_set, ls, cfg.surrogate_train()).params;
  });

  const ExampleRefs candidates =
      stage("subsample", [&] { return subsample_pool(pool, cfg.sample_ratio, cfg.seed); });

  std::vector<double> z;
  stage("score", [&] {
    ScoreConfig sc;
    sc.mode = cfg.score_mode;
    sc.g_mode = cfg.g_mode;
    sc.q_mode = cfg.q_mode;
    sc.moment = cfg.moment;
    sc.delta = cfg.delta;
    sc.seed = derive_seed(cfg.seed, "score");
    sc.damping_scale = cfg.damping_scale;
    const ScoreEngine engine(spec, res.surrogate_params, train_set, validation, ls, sc);
    res.damping = engine.damping();
    z = engine.score_all(candidates, threads);
    return 0;
  });

  std::vector<std::string> ids;
  for (const auto* c : candidates) ids.push_back(c->id);
  const Threshold t = stage("threshold", [&] { return choose_eta(z, ids, res.quota); });
  if (t.clamped) {
    res.notices.push_back("quota " + std::to_string(res.quota) + " exceeds " +
                          std::to_string(candidates.size()) + " scored candidates; clamped");
  }
  res.eta = t.eta;
  res.scored = true;
  const auto recs = select(z, ids, t);

  // Records in pool order; candidates dropped by subsampling are annotated.
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < recs.size(); ++i) pos.emplace(recs[i].candidate_id, i);
  long next_rank = static_cast<long>(recs.size());
  for (const auto* e : pool) {
    auto it = pos.find(e->id);
    if (it != pos.end()) {
      res.score_records.push_back(recs[it->second]);
    } else {
      res.score_records.push_back({e->id, std::numeric_limits<double>::quiet_NaN(), false,
                                   ++next_rank, "not scored: outside sample"});
    }
  }

  ExampleRefs bat = adaptation;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (recs[i].selected) bat.push_back(candidates[i]);
  for (const auto* e : bat) res.bat_dataset.push_back(e->id);

  auto trained = stage("adapter", [&] { return train(spec, bat, ls, cfg.adapter_train()); });
  res.adapter_params = std::move(trained.params);
  res.adapter_loss_trace = std::move(trained.loss_trace);
  return res;
}

inline SelectionResult run_albat(const std::vector<LabeledExample>& adaptation,
                                 const std::vector<LabeledExample>& pool, const ModelSpec& spec,
                                 const LossSpec& ls, const SelectionConfig& cfg,
                                 unsigned threads = thread_count()) {
  return run_albat(refs_of(adaptation), refs_of(pool), spec, ls, cfg, threads);
}

inline std::string_view to_string(ScoreMode m) { return m == ScoreMode::kBartlett ? "bartlett" : "exact"; }
inline std::string_view to_string(CurvatureMode m) {
  return m == CurvatureMode::kSmImplicit ? "sm-implicit" : "exact-dense";
}
inline std::string_view to_string(Moment m) {
  return m == Moment::kModelExpected ? "model-expected" : "observed";
}

inline nlohmann::json to_json(const SelectionConfig& c) {
  nlohmann::json j;
  j["gamma"] = c.gamma;
  j["sample_ratio"] = c.sample_ratio;
  j["delta"] = c.delta;
  j["damping_scale"] = c.damping_scale;
  j["surrogate_steps"] = c.surrogate_steps;
  j["adapter_steps"] = c.adapter_steps;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["validation_fraction"] = c.validation_fraction;
  j["quota"] = c.quota_override ? nlohmann::json(*c.quota_override) : nlohmann::json(nullptr);
  j["score_mode"] = std::string(to_string(c.score_mode));
  j["g_mode"] = std::string(to_string(c.g_mode));
  j["q_mode"] = std::string(to_string(c.q_mode));
  j["moment"] = std::string(to_string(c.moment));
  j["seed"] = c.seed;
  return j;
}

inline void write_score_csv(std::ostream& out, const SelectionResult& r, const SelectionConfig& c) {
  out << "candidate_id,z,rank,selected,eta,gamma,sample_ratio,seed\n";
  for (const auto& rec : r.score_records) {
    out << rec.candidate_id << ',' << (std::isfinite(rec.z) ? format_double(rec.z) : "nan") << ','
        << rec.rank << ',' << (rec.selected ? 1 : 0) << ','
        << (std::isfinite(r.eta) ? format_double(r.eta) : "nan") << ',' << format_double(c.gamma)
        << ',' << format_double(c.sample_ratio) << ',' << c.seed << '\n';
  }
}

inline nlohmann::json manifest_json(const SelectionResult& r, const SelectionConfig& c) {
  nlohmann::json j;
  j["bat_dataset"] = r.bat_dataset;
  std::vector<std::string> selected;
  for (const auto& rec : r.score_records)
    if (rec.selected) selected.push_back(rec.candidate_id);
  j["selected_backbone"] = selected;
  j["validation_ids"] = r.validation_ids;
  j["quota"] = r.quota;
  j["eta"] = std::isfinite(r.eta) ? nlohmann::json(r.eta) : nlohmann::json(nullptr);
  j["damping"] = r.damping;
  j["notices"] = r.notices;
  j["config"] = to_json(c);
  return j;
}

}  // namespace batsel

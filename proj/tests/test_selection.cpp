#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "batsel/batsel.hpp"
#include "test_util.hpp"

using namespace batsel;
using namespace batsel::testing;

namespace {

std::vector<std::string> ids_of(long n, const std::string& prefix = "c") {
  std::vector<std::string> out;
  for (long i = 0; i < n; ++i) out.push_back(prefix + std::to_string(1000 + i));
  return out;
}

long count_selected(const std::vector<ScoreRecord>& r) {
  return std::count_if(r.begin(), r.end(), [](const ScoreRecord& x) { return x.selected; });
}

TaskData small_task(std::uint64_t seed, long n_a = 40, long pool = 60) {
  TaskSpec t = TaskSpec::s1();
  t.n_adaptation = n_a;
  t.pool_size = pool;
  t.n_test = 10;
  return generate_task(t, seed);
}

SelectionConfig fast_config(std::uint64_t seed = 0) {
  SelectionConfig c;
  c.surrogate_steps = 60;
  c.adapter_steps = 60;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Quota, WorkedExamples) {
  EXPECT_EQ(backbone_quota(0.95, 57), 3);
  EXPECT_EQ(backbone_quota(0.5, 10), 10);
  EXPECT_EQ(backbone_quota(0.99, 10), 0);
  EXPECT_EQ(backbone_quota(0.9, 180), 20);
  EXPECT_EQ(backbone_quota(0.8, 2), 1);  // 0.5 rounds up
}

TEST(Quota, RejectsOutOfRange) {
  EXPECT_THROW(backbone_quota(0.0, 10), ConfigError);
  EXPECT_THROW(backbone_quota(1.0, 10), ConfigError);
  EXPECT_THROW(backbone_quota(0.5, 0), ConfigError);
}

TEST(QuotaProperty, NearestIntegerAndAntitone) {
  Rng rng(1);
  for (int c = 0; c < 50; ++c) {
    const long n = 1 + static_cast<long>(rng() % 5000);
    const double g1 = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
    const double g2 = std::uniform_real_distribution<double>(g1, 0.99)(rng);
    const long m = backbone_quota(g1, n);
    const double exact = static_cast<double>(n) * (1.0 - g1) / g1;
    EXPECT_LE(std::abs(static_cast<double>(m) - exact), 0.5 + 1e-8) << n << ' ' << g1;
    EXPECT_GE(m, backbone_quota(g2, n));
  }
}

TEST(Subsample, SizeRoundsHalfUp) {
  EXPECT_EQ(subsample_size(0.5, 2981), 1491u);
  EXPECT_EQ(subsample_size(1.0, 7), 7u);
  EXPECT_EQ(subsample_size(0.01, 7), 1u);
  EXPECT_EQ(subsample_size(0.3, 0), 0u);
  EXPECT_THROW(subsample_size(0.0, 5), ConfigError);
  EXPECT_THROW(subsample_size(1.5, 5), ConfigError);
}

TEST(Subsample, FullRatioIsIdentityAndPartialIsDeterministic) {
  const ModelSpec spec = ModelSpec::logistic(2);
  Rng rng(2);
  const auto pool = random_examples(spec, rng, 2981);
  const ExampleRefs refs = refs_of(pool);
  EXPECT_EQ(subsample_pool(refs, 1.0, 9), refs);
  const ExampleRefs a = subsample_pool(refs, 0.5, 9), b = subsample_pool(refs, 0.5, 9);
  EXPECT_EQ(a.size(), 1491u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, subsample_pool(refs, 0.5, 10));
  // Survivors keep pool order.
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LT(a[i - 1], a[i]);
}

TEST(ChooseEta, MidpointBetweenQuotaAndNext) {
  const std::vector<double> z{0.1, 0.9, 0.5, 0.3};
  const auto t = choose_eta(z, ids_of(4), 2);
  EXPECT_DOUBLE_EQ(t.eta, 0.4);
  const auto r = select(z, ids_of(4), t);
  EXPECT_TRUE(r[1].selected && r[2].selected);
  EXPECT_FALSE(r[0].selected || r[3].selected);
  EXPECT_EQ(r[1].rank, 1);
  EXPECT_EQ(r[0].rank, 4);
}

TEST(ChooseEta, ExtremeQuotas) {
  const std::vector<double> z{1.0, 2.0, 3.0};
  EXPECT_EQ(count_selected(select(z, ids_of(3), choose_eta(z, ids_of(3), 0))), 0);
  EXPECT_EQ(count_selected(select(z, ids_of(3), choose_eta(z, ids_of(3), 3))), 3);
  const auto t = choose_eta(z, ids_of(3), 5);
  EXPECT_TRUE(t.clamped);
  EXPECT_EQ(count_selected(select(z, ids_of(3), t)), 3);
  EXPECT_THROW(choose_eta(z, ids_of(3), -1), ConfigError);
}

TEST(ChooseEta, TiesAtEtaBrokenByAscendingId) {
  const std::vector<double> z{1.0, 1.0, 1.0, 1.0, 5.0};
  const std::vector<std::string> ids{"d", "b", "a", "c", "e"};
  const auto t = choose_eta(z, ids, 3);
  EXPECT_EQ(t.eta, 1.0);
  EXPECT_EQ(t.admitted_at_eta, 2);
  const auto r = select(z, ids, t);
  EXPECT_EQ(count_selected(r), 3);
  EXPECT_TRUE(r[4].selected);
  EXPECT_TRUE(r[2].selected);  // a
  EXPECT_TRUE(r[1].selected);  // b
  EXPECT_FALSE(r[3].selected);
  EXPECT_FALSE(r[0].selected);
  EXPECT_EQ(r[0].note, "tie at eta: rejected by id");
}

TEST(ChooseEta, SevenOfHundred) {
  Rng rng(3);
  std::vector<double> z(100);
  for (auto& v : z) v = standard_normal(rng);
  const auto r = select(z, ids_of(100), choose_eta(z, ids_of(100), 7));
  EXPECT_EQ(count_selected(r), 7);
  std::vector<double> sorted = z;
  std::sort(sorted.rbegin(), sorted.rend());
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(r[i].selected, z[i] >= sorted[6]);
}

TEST(Select, RejectsNonFiniteAndMismatchedScores) {
  EXPECT_THROW(select({1.0, std::nan("")}, ids_of(2), 0.0), InputError);
  EXPECT_THROW(choose_eta({1.0}, ids_of(2), 1), InputError);
}

TEST(SelectProperty, AntitoneInEta) {
  Rng rng(4);
  for (int c = 0; c < 40; ++c) {
    const long n = 1 + static_cast<long>(rng() % 60);
    std::vector<double> z(static_cast<std::size_t>(n));
    // Coarse values force ties.
    for (auto& v : z) v = std::round(4.0 * standard_normal(rng)) / 4.0;
    const double e1 = standard_normal(rng), e2 = e1 + std::abs(standard_normal(rng));
    const auto r1 = select(z, ids_of(n), e1), r2 = select(z, ids_of(n), e2);
    for (long i = 0; i < n; ++i) EXPECT_LE(r2[i].selected, r1[i].selected);
    const long q = static_cast<long>(rng() % (n + 1));
    EXPECT_EQ(count_selected(select(z, ids_of(n), choose_eta(z, ids_of(n), q))), q);
  }
}

TEST(SplitValidation, SizesDisjointAndDeterministic) {
  const ModelSpec spec = ModelSpec::logistic(2);
  Rng rng(5);
  const auto xs = random_examples(spec, rng, 57);
  const auto [tr, va] = split_validation(refs_of(xs), 0.2, 3);
  EXPECT_EQ(va.size(), 11u);
  EXPECT_EQ(tr.size() + va.size(), 57u);
  std::set<std::string> seen;
  for (const auto* e : tr) seen.insert(e->id);
  for (const auto* e : va) EXPECT_TRUE(seen.insert(e->id).second);
  EXPECT_EQ(split_validation(refs_of(xs), 0.2, 3).second, va);
  EXPECT_THROW(split_validation(ExampleRefs{&xs[0]}, 0.2, 3), ConfigError);
}

TEST(RunAlbat, QuotaZeroMatchesPlainAdaptationBitwise) {
  const TaskData d = small_task(6, 10, 30);
  TaskSpec t = TaskSpec::s1();
  SelectionConfig c = fast_config(11);
  c.gamma = 0.99;
  const auto res = run_albat(d.adaptation, d.pool, t.model(), t.loss(), c);
  EXPECT_EQ(res.quota, 0);
  EXPECT_FALSE(res.scored);
  const auto plain = train(t.model(), d.adaptation, t.loss(), c.adapter_train());
  EXPECT_EQ(res.adapter_params, plain.params);
  ASSERT_EQ(res.score_records.size(), d.pool.size());
  for (const auto& r : res.score_records) {
    EXPECT_FALSE(r.selected);
    EXPECT_EQ(r.note, "not scored: quota 0");
  }
}

TEST(RunAlbat, SingleCandidatePool) {
  const TaskData d = small_task(7, 40, 1);
  TaskSpec t = TaskSpec::s1();
  const auto res = run_albat(d.adaptation, d.pool, t.model(), t.loss(), fast_config());
  EXPECT_TRUE(res.scored);
  ASSERT_EQ(res.score_records.size(), 1u);
  EXPECT_TRUE(res.score_records[0].selected);
  EXPECT_EQ(res.bat_dataset.size(), 41u);
  ASSERT_FALSE(res.notices.empty());
  EXPECT_NE(res.notices[0].find("clamped"), std::string::npos);
}

TEST(RunAlbat, EmptyPoolTrainsOnAdaptationOnly) {
  const TaskData d = small_task(7, 40, 1);
  TaskSpec t = TaskSpec::s1();
  const auto res = run_albat(d.adaptation, {}, t.model(), t.loss(), fast_config());
  EXPECT_EQ(res.bat_dataset.size(), 40u);
  EXPECT_TRUE(res.score_records.empty());
}

TEST(RunAlbat, ProvenanceOfTheTrainingSet) {
  const TaskData d = small_task(8);
  TaskSpec t = TaskSpec::s1();
  SelectionConfig c = fast_config(2);
  c.sample_ratio = 0.5;
  const auto res = run_albat(d.adaptation, d.pool, t.model(), t.loss(), c);
  EXPECT_EQ(res.quota, 4);
  ASSERT_EQ(res.bat_dataset.size(), d.adaptation.size() + 4);
  for (std::size_t i = 0; i < d.adaptation.size(); ++i) EXPECT_EQ(res.bat_dataset[i], d.adaptation[i].id);
  std::set<std::string> pool_ids;
  for (const auto& e : d.pool) pool_ids.insert(e.id);
  for (std::size_t i = d.adaptation.size(); i < res.bat_dataset.size(); ++i)
    EXPECT_TRUE(pool_ids.count(res.bat_dataset[i]));
  long scored = 0, outside = 0;
  for (const auto& r : res.score_records) {
    if (std::isfinite(r.z)) ++scored;
    else if (r.note == "not scored: outside sample") ++outside;
    if (r.selected) {
      EXPECT_GE(r.z, res.eta);
    }
  }
  EXPECT_EQ(scored, 30);
  EXPECT_EQ(outside, 30);
  for (const auto& v : res.validation_ids) EXPECT_FALSE(pool_ids.count(v));
}

TEST(RunAlbat, DeterministicAcrossRunsAndThreadCounts) {
  const TaskData d = small_task(9);
  TaskSpec t = TaskSpec::s1();
  const auto a = run_albat(d.adaptation, d.pool, t.model(), t.loss(), fast_config(5), 1);
  const auto b = run_albat(d.adaptation, d.pool, t.model(), t.loss(), fast_config(5), 3);
  ASSERT_EQ(a.score_records.size(), b.score_records.size());
  for (std::size_t i = 0; i < a.score_records.size(); ++i) EXPECT_EQ(a.score_records[i].z, b.score_records[i].z);
  EXPECT_EQ(a.bat_dataset, b.bat_dataset);
  EXPECT_EQ(a.adapter_params, b.adapter_params);
  const auto c = run_albat(d.adaptation, d.pool, t.model(), t.loss(), fast_config(6), 1);
  EXPECT_NE(a.score_records[0].z, c.score_records[0].z);
}

TEST(RunAlbat, OverlapBetweenAdaptationAndPoolIsRejected) {
  const TaskData d = small_task(10);
  TaskSpec t = TaskSpec::s1();
  auto pool = d.pool;
  pool[3].id = d.adaptation[0].id;
  try {
    run_albat(d.adaptation, pool, t.model(), t.loss(), fast_config());
    FAIL() << "expected an input error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInput);
    EXPECT_NE(std::string(e.what()).find("[input]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(d.adaptation[0].id), std::string::npos);
  }
}

TEST(RunAlbat, FailuresCarryTheirStage) {
  const TaskData d = small_task(11);
  TaskSpec t = TaskSpec::s1();
  auto pool = d.pool;
  pool[0].y = 2.0;
  try {
    run_albat(d.adaptation, pool, t.model(), t.loss(), fast_config());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("[input]", 0), 0u);
  }
  // Squared error diverges under a huge step in the surrogate stage.
  const ModelSpec lin = ModelSpec::linear(t.dim);
  SelectionConfig c = fast_config();
  c.learning_rate = 1e3;
  try {
    run_albat(d.adaptation, d.pool, lin, loss_for(lin), c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumerical);
    EXPECT_EQ(std::string(e.what()).rfind("[surrogate]", 0), 0u);
  }
  // Bartlett scoring needs a log-likelihood.
  try {
    run_albat(d.adaptation, d.pool, lin, loss_for(lin), fast_config());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
    EXPECT_EQ(std::string(e.what()).rfind("[score]", 0), 0u);
  }
  SelectionConfig bad = fast_config();
  bad.gamma = 1.0;
  EXPECT_THROW(run_albat(d.adaptation, d.pool, t.model(), t.loss(), bad), Error);
}

TEST(RunAlbat, ScoreCsvAndManifest) {
  const TaskData d = small_task(12);
  TaskSpec t = TaskSpec::s1();
  const SelectionConfig c = fast_config(4);
  const auto res = run_albat(d.adaptation, d.pool, t.model(), t.loss(), c);
  std::ostringstream os;
  write_score_csv(os, res, c);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "candidate_id,z,rank,selected,eta,gamma,sample_ratio,seed");
  long rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, static_cast<long>(d.pool.size()));
  const auto m = manifest_json(res, c);
  EXPECT_EQ(m["selected_backbone"].size(), static_cast<std::size_t>(res.quota));
  EXPECT_EQ(m["config"]["gamma"], 0.9);
}

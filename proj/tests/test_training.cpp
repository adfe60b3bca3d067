#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "fcc/errors.hpp"
#include "fcc/training.hpp"
#include "model_fixtures.hpp"

using namespace fcc;
using fcc::testing::mini_config;
using fcc::testing::random_list;

namespace {

std::vector<RankingList> random_lists(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<RankingList> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_list(rng, cfg));
  return out;
}

struct SyntheticSetup {
  ModelConfig cfg;
  std::vector<RankingList> lists;
};

SyntheticSetup synthetic_setup(Variant variant, std::size_t n, std::uint64_t seed) {
  SyntheticOptions opt;
  opt.num_lists = n;
  opt.seed = seed;
  opt.min_turns = 1;
  opt.max_turns = 2;
  opt.num_keywords = 16;
  opt.num_fillers = 20;
  auto text = generate_synthetic(opt);
  auto vocab = Vocabulary::build(text);
  SyntheticSetup s{mini_config(variant, vocab.size()), encode_lists(text, vocab)};
  return s;
}

std::vector<std::vector<double>> snapshot(const ParamStore<double>& p) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : p.entries()) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

}  // namespace

TEST_CASE("pairwise losses on worked examples") {
  TrainConfig hinge;
  CHECK(pairwise_loss_value(2.0, 0.5, hinge) == 0.0);
  CHECK(pairwise_loss_value(0.2, 0.5, hinge) == doctest::Approx(1.3).epsilon(1e-15));
  TrainConfig logistic;
  logistic.loss = LossKind::kLogistic;
  CHECK(pairwise_loss_value(0.7, 0.7, logistic) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(pairwise_loss_value(0.0, 800.0, logistic) == doctest::Approx(800.0));
  CHECK(pairwise_loss_value(800.0, 0.0, logistic) >= 0.0);

  for (auto cfg : {hinge, logistic}) {
    auto l = pairwise_loss(Tensor<double>::scalar(0.2), Tensor<double>::scalar(0.5), cfg);
    CHECK(l.item() == doctest::Approx(pairwise_loss_value(0.2, 0.5, cfg)).epsilon(1e-15));
  }
  CHECK(parse_loss("logistic") == LossKind::kLogistic);
  CHECK_THROWS_AS(parse_loss("squared"), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.learning_rate = -1e-3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.beta2 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adam step matches the reference recurrence") {
  ParamStore<double> p;
  p.add("a", Tensor<double>::from_vector({5}, {0.1, -0.2, 0.3, 0.0, 2.0}, true));
  p.add("b", Tensor<double>::from_vector({2}, {1.0, -1.0}, true));
  TrainConfig cfg;
  cfg.clip_norm = 0.0;
  cfg.learning_rate = 3e-3;
  AdamState<double> state;

  std::vector<long double> theta, m, v;
  for (const auto& [n, t] : p.entries())
    for (double x : t.values()) theta.push_back(x);
  m.assign(theta.size(), 0.0L);
  v.assign(theta.size(), 0.0L);

  Rng rng(17);
  for (int step = 1; step <= 25; ++step) {
    Gradients<double> g{std::vector<double>(5), std::vector<double>(2)};
    std::vector<double> flat;
    for (auto& gi : g)
      for (auto& x : gi) {
        x = rng.uniform(-2.0, 2.0);
        flat.push_back(x);
      }
    adam_step(p, g, state, cfg);
    const long double b1 = cfg.beta1, b2 = cfg.beta2;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = b1 * m[j] + (1 - b1) * flat[j];
      v[j] = b2 * v[j] + (1 - b2) * flat[j] * flat[j];
      const long double mh = m[j] / (1 - std::pow(b1, static_cast<long double>(step)));
      const long double vh = v[j] / (1 - std::pow(b2, static_cast<long double>(step)));
      theta[j] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
  }
  CHECK(state.step == 25);
  std::size_t j = 0;
  for (const auto& [n, t] : p.entries())
    for (double x : t.values()) CHECK(std::abs(x - static_cast<double>(theta[j++])) < 1e-12);
}

TEST_CASE("adam step edge cases") {
  TrainConfig cfg;
  SUBCASE("zero gradients leave parameters unchanged") {
    ParamStore<double> p;
    p.add("w", Tensor<double>::from_vector({3}, {1.0, 2.0, 3.0}, true));
    AdamState<double> state;
    adam_step(p, {{0.0, 0.0, 0.0}}, state, cfg);
    CHECK(state.step == 1);
    CHECK(snapshot(p) == std::vector<std::vector<double>>{{1.0, 2.0, 3.0}});
  }
  SUBCASE("first step with unit gradient moves by the learning rate") {
    ParamStore<double> p;
    p.add("w", Tensor<double>::scalar(0.5, true));
    AdamState<double> state;
    adam_step(p, {{1.0}}, state, cfg);
    CHECK(p.get("w").item() - 0.5 == doctest::Approx(-cfg.learning_rate / (1.0 + cfg.epsilon)).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient names the tensor") {
    ParamStore<double> p;
    p.add("first", Tensor<double>::scalar(0.0, true));
    p.add("second.weight", Tensor<double>::from_vector({2}, {0.0, 0.0}, true));
    AdamState<double> state;
    try {
      adam_step(p, {{1.0}, {0.0, std::numeric_limits<double>::quiet_NaN()}}, state, cfg);
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("second.weight") != std::string::npos);
    }
    CHECK(p.get("first").item() == 0.0);
  }
  SUBCASE("frozen tensors are skipped") {
    ParamStore<double> p;
    p.add("frozen", Tensor<double>::scalar(1.0, false));
    AdamState<double> state;
    adam_step(p, {{5.0}}, state, cfg);
    CHECK(p.get("frozen").item() == 1.0);
  }
}

TEST_CASE("gradient clipping is invariant to scaling beyond the threshold") {
  Rng rng(3);
  Gradients<double> g{std::vector<double>(7), std::vector<double>(4)};
  for (auto& gi : g)
    for (auto& x : gi) x = rng.uniform(-4.0, 4.0);
  if (global_norm(g) <= 5.0) g[0][0] += 10.0;
  auto big = g;
  for (auto& gi : big)
    for (auto& x : gi) x *= 10.0;

  auto c1 = g, c2 = big;
  const double n1 = clip_by_global_norm(c1, 5.0);
  const double n2 = clip_by_global_norm(c2, 5.0);
  CHECK(n2 == doctest::Approx(10.0 * n1).epsilon(1e-14));
  CHECK(global_norm(c1) == doctest::Approx(5.0).epsilon(1e-14));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) CHECK(std::abs(c1[i][j] - c2[i][j]) < 1e-14);

  auto make = [] {
    ParamStore<double> p;
    p.add("a", Tensor<double>::zeros({7}, true));
    p.add("b", Tensor<double>::zeros({4}, true));
    return p;
  };
  auto p1 = make(), p2 = make();
  AdamState<double> s1, s2;
  TrainConfig cfg;
  adam_step(p1, g, s1, cfg);
  adam_step(p2, big, s2, cfg);
  const auto a = snapshot(p1), b = snapshot(p2);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) CHECK(std::abs(a[i][j] - b[i][j]) < 1e-14);

  auto untouched = g;
  for (auto& gi : untouched)
    for (auto& x : gi) x *= 1e-3;
  auto copy = untouched;
  clip_by_global_norm(copy, 5.0);
  CHECK(copy == untouched);
}

TEST_CASE("one small optimizer step decreases the batch loss") {
  for (auto loss : {LossKind::kHinge, LossKind::kLogistic}) {
    for (auto v : testing::all_variants()) {
      CAPTURE(variant_name(v));
      const auto cfg = mini_config(v);
      auto params = init_params<double>(cfg, 5);
      const auto lists = random_lists(cfg, 3, 11);
      const auto batches = make_batches(lists, 27, 1, cfg.limits);
      REQUIRE(batches.size() == 1);
      TrainConfig tc;
      tc.loss = loss;
      tc.learning_rate = 1e-4;
      auto before = batch_loss_and_grad(cfg, params, batches[0], tc);
      REQUIRE(before.loss > 0.0);
      AdamState<double> state;
      adam_step(params, before.grads, state, tc);
      auto after = batch_loss_and_grad(cfg, params, batches[0], tc);
      CHECK(after.loss < before.loss);
    }
  }
}

TEST_CASE("batch gradients do not depend on the thread count") {
  const auto cfg = mini_config(Variant::kFccAttention);
  const auto params = init_params<double>(cfg, 2);
  const auto lists = random_lists(cfg, 4, 8);
  const auto batch = make_batches(lists, 36, 3, cfg.limits).at(0);
  TrainConfig one;
  TrainConfig three;
  three.threads = 3;
  auto a = batch_loss_and_grad(cfg, params, batch, one);
  auto b = batch_loss_and_grad(cfg, params, batch, three);
  CHECK(a.loss == b.loss);
  CHECK(a.grads == b.grads);
}

TEST_CASE("training with a zero learning rate leaves parameters unchanged") {
  const auto cfg = mini_config(Variant::kFccGru);
  const auto params = init_params<double>(cfg, 4);
  const auto before = snapshot(params);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 1;
  tc.batch_size = 9;
  auto result = train(cfg, params.clone(), random_lists(cfg, 4, 2), {}, tc);
  CHECK(result.step_losses.size() == 4);
  CHECK(snapshot(result.best_params) == before);
}

TEST_CASE("training is reproducible and keeps the best checkpoint") {
  auto setup = synthetic_setup(Variant::kFccAttention, 12, 5);
  std::vector<RankingList> train_lists(setup.lists.begin(), setup.lists.begin() + 8);
  std::vector<RankingList> valid_lists(setup.lists.begin() + 8, setup.lists.end());
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 18;
  tc.eval_every = 2;
  tc.seed = 9;

  auto run = [&](std::size_t threads) {
    auto t = tc;
    t.threads = threads;
    std::ostringstream log;
    auto r = train(setup.cfg, init_params<float>(setup.cfg, 1), train_lists, valid_lists, t, &log);
    return std::make_pair(log.str(), std::move(r));
  };
  auto [log1, r1] = run(1);
  auto [log2, r2] = run(1);
  auto [log3, r3] = run(2);
  CHECK(log1 == log2);
  CHECK(log1 == log3);
  CHECK(r1.step_losses == r2.step_losses);
  CHECK(log1.find("kind=step step=1 epoch=1 loss=") == 0);
  CHECK(log1.find("kind=eval step=2 epoch=1") != std::string::npos);

  REQUIRE(!r1.evaluations.empty());
  double best = -1.0;
  for (const auto& e : r1.evaluations) best = std::max(best, e.metrics.r10_1);
  CHECK(r1.best_r10_1 == best);
  const auto rescored = compute_metrics(score_ranking_lists(setup.cfg, r1.best_params, valid_lists));
  CHECK(rescored.r10_1 == r1.best_r10_1);

  tc.seed = 10;
  std::ostringstream other;
  train(setup.cfg, init_params<float>(setup.cfg, 1), train_lists, valid_lists, tc, &other);
  CHECK(other.str() != log1);
}

TEST_CASE("non-finite loss aborts with the step number") {
  const auto cfg = mini_config(Variant::kDmnGru);
  auto params = init_params<double>(cfg, 1);
  params.get("mlp.layer0.bias").mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(cfg, params, random_lists(cfg, 2, 1), {}, tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  CHECK_THROWS_AS(train(cfg, init_params<double>(cfg, 1), {}, {}, tc), DataError);
}

TEST_CASE("overfitting a small synthetic set drives the loss down") {
  auto setup = synthetic_setup(Variant::kFccAttention, 20, 21);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 45;
  tc.learning_rate = 5e-3;
  auto r = train(setup.cfg, init_params<float>(setup.cfg, 3), setup.lists, setup.lists, tc);
  REQUIRE(r.evaluations.size() == 5);
  const std::size_t per_epoch = r.step_losses.size() / 5;
  std::vector<double> epoch_mean;
  for (std::size_t e = 0; e < 5; ++e) {
    double s = 0.0;
    for (std::size_t i = 0; i < per_epoch; ++i) s += r.step_losses[e * per_epoch + i];
    epoch_mean.push_back(s / static_cast<double>(per_epoch));
  }
  CAPTURE(epoch_mean);
  for (std::size_t e = 1; e < 5; ++e) CHECK(epoch_mean[e] < epoch_mean[e - 1]);
}

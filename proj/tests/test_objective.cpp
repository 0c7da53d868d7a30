#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "rgflow/objective.hpp"
#include "test_util.hpp"

using namespace rgflow;
using rgflow::testing::rel_err;
using rgflow::testing::uniform_tensor;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

MeraConfig tiny(std::size_t I, std::size_t n, std::size_t l, int steps,
                std::size_t hidden = 6) {
  MeraConfig c;
  c.seq_len = I;
  c.embed_dim = n;
  c.kernel = l;
  c.steps = steps;
  c.hidden_width = hidden;
  c.num_layers = 3;
  return c;
}

std::vector<Tensor> bimodal(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double s = rng.uniform() < 0.5 ? -1.2 : 1.2;
    out.push_back(Tensor::matrix(2, 1, {s + 0.4 * rng.normal(), s + 0.4 * rng.normal()}));
  }
  return out;
}

}  // namespace

TEST_CASE("prior_action") {
  CHECK(std::abs(prior_action(Tensor({1})) - 0.918938533204672742) <= 1e-15);
  CHECK(std::abs(prior_action(Tensor::vector({2.0})) - (2.0 + 0.5 * kLog2Pi)) <= 1e-15);
  Rng rng(1);
  const Tensor z = normal_sample(rng, {7});
  double neg_log_density = 0.0;
  for (double v : z.data())
    neg_log_density -= std::log(std::exp(-0.5 * v * v) / std::sqrt(2 * std::numbers::pi));
  CHECK(std::abs(prior_action(z) - neg_log_density) <= 1e-12);
}

TEST_CASE("total action and normalized log prob of a zero-weight model") {
  const MeraModel m(tiny(2, 1, 2, 4));
  CHECK(std::abs(normalized_log_prob(m, Tensor({2, 1})) +
                 std::log(std::sqrt(2 * std::numbers::pi))) <= 1e-15);
  const Tensor phi = Tensor::matrix(2, 1, {0.3, -1.4});
  const auto a = total_action(m, phi);
  CHECK(std::abs(a.total - (0.5 * (0.09 + 1.96) + kLog2Pi)) <= 1e-14);
  // Swapping the two sites preserves the measure.
  const Tensor swapped = Tensor::matrix(2, 1, {-1.4, 0.3});
  CHECK(total_action(m, swapped).total == a.total);
  CHECK(normalized_log_prob(1.0, 2, 1) > normalized_log_prob(2.0, 2, 1));
}

TEST_CASE("sampling") {
  const MeraModel m(tiny(4, 2, 2, 4));
  Rng a(9), b(9);
  const auto s1 = sample(m, a, 5);
  const auto s2 = sample(m, b, 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(s1[i] == s2[i]);
  Rng c(9);
  CHECK(sample(m, c, 2)[1] == s1[1]);
  Rng d(9);
  CHECK(sample(m, d, 0).empty());

  Rng rng(10);
  const auto many = sample(m, rng, 1000);
  double mean = 0.0, sq = 0.0, action = 0.0;
  for (const auto& phi : many) {
    for (double v : phi.data()) {
      mean += v;
      sq += v * v;
    }
    action += total_action(m, phi).total;
  }
  const double count = 8000.0;
  mean /= count;
  CHECK(std::abs(mean) <= 0.05);
  CHECK(std::abs(sq / count - 1.0) <= 0.05);
  const double entropy = 4.0 * (1.0 + kLog2Pi);
  CHECK(std::abs(action / 1000.0 - entropy) <= 0.02 * entropy);
}

TEST_CASE("full-loss gradient matches finite differences") {
  MeraModel m(tiny(4, 2, 2, 4));
  Rng rng(11);
  m.randomize_weights(rng, 0.3);
  const Tensor batch = uniform_tensor(rng, {3, 8}, -1.5, 1.5);
  TrainConfig cfg;
  const LossValue lv = evaluate_loss(m, batch, cfg, true);

  auto params = m.parameters();
  std::vector<double> g, fd;
  Rng pick(12);
  for (int s = 0; s < 24; ++s) {
    const std::size_t p = pick.below(params.size());
    const std::size_t i = pick.below(params[p]->size());
    const double keep = (*params[p])[i];
    (*params[p])[i] = keep + 1e-5;
    const double fp = evaluate_loss(m, batch, cfg, false).loss;
    (*params[p])[i] = keep - 1e-5;
    const double fm = evaluate_loss(m, batch, cfg, false).loss;
    (*params[p])[i] = keep;
    g.push_back(lv.grads[p][i]);
    fd.push_back((fp - fm) / 2e-5);
  }
  CHECK(rel_err(g, fd) <= 1e-4);
}

TEST_CASE("training runs") {
  const auto data = bimodal(120, 3);
  MeraConfig mc = tiny(2, 1, 2, 6, 12);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.seed = 4;

  SUBCASE("zero learning rate keeps the loss fixed") {
    MeraModel m(mc);
    Rng init(1);
    m.init_weights(init);
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    const auto r = train(m, data, cfg);
    REQUIRE(r.epochs.size() == 3);
    for (const auto& e : r.epochs)
      CHECK(e.mean_loss == doctest::Approx(r.epochs[0].mean_loss).epsilon(1e-12));
  }
  SUBCASE("loss decreases and runs are reproducible") {
    cfg.learning_rate = 0.02;
    cfg.epochs = 15;
    cfg.noise_sigma = 0.05;
    std::vector<double> first;
    for (int run = 0; run < 2; ++run) {
      MeraModel m(mc);
      Rng init(1);
      m.init_weights(init);
      std::size_t callbacks = 0;
      const auto r = train(m, data, cfg, [&](const EpochStats&, const MeraModel&) {
        ++callbacks;
      });
      CHECK(callbacks == 15);
      std::vector<double> loss;
      for (const auto& e : r.epochs) loss.push_back(e.mean_loss);
      if (run == 0) {
        first = loss;
        // Window-5 moving average is non-increasing.
        std::vector<double> smooth;
        for (std::size_t i = 0; i + 5 <= loss.size(); ++i) {
          double s = 0.0;
          for (std::size_t j = i; j < i + 5; ++j) s += loss[j];
          smooth.push_back(s / 5.0);
        }
        for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] <= smooth[i - 1]);
        CHECK(r.max_bulk_correlation >= 0.0);
      } else {
        CHECK(loss == first);
      }
    }
  }
  SUBCASE("divergence restores the last finite parameters") {
    MeraModel m(mc);
    Rng init(1);
    m.init_weights(init);
    const auto before = m.parameters();
    std::vector<Tensor> snapshot;
    for (const Tensor* p : before) snapshot.push_back(*p);
    std::vector<Tensor> huge = {Tensor::matrix(2, 1, {1e300, -1e300}),
                                Tensor::matrix(2, 1, {1e300, 1e300})};
    cfg.epochs = 1;
    CHECK_THROWS_AS(train(m, huge, cfg), DivergenceError);
    const auto after = m.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(*after[i] == snapshot[i]);
  }
  SUBCASE("invalid inputs") {
    MeraModel m(mc);
    CHECK_THROWS_AS(train(m, std::vector<Tensor>{}, cfg), DataError);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(m, data, cfg), ConfigError);
  }
}

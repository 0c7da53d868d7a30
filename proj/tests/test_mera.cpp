#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <set>

#include "rgflow/errors.hpp"
#include "rgflow/mera.hpp"
#include "test_util.hpp"

using namespace rgflow;
using rgflow::testing::uniform_tensor;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

MeraConfig small_config(std::size_t I, std::size_t n, std::size_t l,
                        int steps = 8) {
  MeraConfig c;
  c.seq_len = I;
  c.embed_dim = n;
  c.kernel = l;
  c.steps = steps;
  c.hidden_width = 8;
  c.num_layers = 3;
  return c;
}

MeraModel random_model(const MeraConfig& cfg, double scale, std::uint64_t seed) {
  MeraModel m(cfg);
  Rng rng(seed);
  m.randomize_weights(rng, scale);
  return m;
}

double sq_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(small_config(8, 2, 2).validate());
  CHECK_THROWS_AS(small_config(12, 2, 2).validate(), ConfigError);
  CHECK_THROWS_AS(small_config(8, 2, 3).validate(), ConfigError);
  CHECK_THROWS_AS(small_config(4, 2, 8).validate(), ConfigError);
  CHECK_THROWS_AS(small_config(8, 0, 2).validate(), ConfigError);
}

TEST_CASE("layer plan for I=4, l=2") {
  const MeraModel m(small_config(4, 1, 2));
  const auto& p = m.plan();
  REQUIRE(p.size() == 2);
  CHECK(p[0].dis_groups.size() == 2);
  CHECK(p[0].dec_groups.size() == 2);
  CHECK(p[0].relevant_slots.size() == 2);
  CHECK(p[0].bulk_slots.size() == 2);
  CHECK(p[0].dis_groups[0] == std::vector<std::size_t>{0, 1});
  CHECK(p[0].dec_groups[0] == std::vector<std::size_t>{1, 2});
  CHECK(p[0].dec_groups[1] == std::vector<std::size_t>{3, 0});
  CHECK(p[1].final);
  CHECK(p[1].dis_groups.empty());
  // Local parity inside the decimator groups {1, 2} and {3, 0}.
  CHECK(p[0].relevant_slots == std::vector<std::size_t>{1, 3});
  CHECK(p[0].bulk_slots == std::vector<std::size_t>{0, 2});
  CHECK(p[1].lattice == std::vector<std::size_t>{1, 3});
}

TEST_CASE("hierarchy bookkeeping") {
  for (std::size_t I : {2, 4, 8, 16, 32, 64}) {
    for (std::size_t l : {2, 4, 8}) {
      if (l > I) continue;
      const auto cfg = small_config(I, 3, l);
      const MeraModel m(cfg);
      CAPTURE(I);
      CAPTURE(l);
      CHECK(m.plan().size() == cfg.depth());
      CHECK(cfg.depth() ==
            static_cast<std::size_t>(std::log2(static_cast<double>(I / l))) + 1);
      CHECK(cfg.single_site_rg_steps() ==
            static_cast<std::size_t>(std::log2(static_cast<double>(I))));
      std::size_t bulk = 0;
      std::set<std::size_t> seen;
      for (const auto& p : m.plan()) {
        CHECK(p.sites == I >> p.layer);
        CHECK(p.relevant_slots.size() + p.bulk_slots.size() == p.sites);
        if (!p.final) {
          CHECK(p.dis_groups.size() == p.sites / l);
          CHECK(p.dec_groups.size() == p.sites / l);
        }
        for (const auto& g : p.dec_groups) CHECK(g.size() == l);
        for (std::size_t s : p.bulk_slots) seen.insert(p.lattice[s]);
        bulk += p.bulk_slots.size();
      }
      CHECK(bulk == I);
      CHECK(seen.size() == I);
      CHECK(bulk_sites_per_layer(m).back() == l);
    }
  }
}

TEST_CASE("I=16, l=4 block counts") {
  const MeraModel m(small_config(16, 2, 4));
  std::size_t dis[3] = {0, 0, 0}, dec[3] = {0, 0, 0};
  for (const auto& k : m.registry())
    (k.kind == BlockKind::Disentangler ? dis : dec)[k.layer]++;
  CHECK(dis[0] == 4);
  CHECK(dis[1] == 2);
  CHECK(dis[2] == 0);
  CHECK(dec[0] == 4);
  CHECK(dec[1] == 2);
  CHECK(dec[2] == 1);
  CHECK(bulk_sites_per_layer(m) == std::vector<std::size_t>{8, 4, 4});

  auto shared = small_config(16, 2, 4);
  shared.position_dependent = false;
  const MeraModel s(shared);
  CHECK(s.registry().size() == 5);
  CHECK(s.slot(0, BlockKind::Decimator, 3) == s.slot(0, BlockKind::Decimator, 0));
  CHECK_THROWS_AS(m.slot(2, BlockKind::Disentangler, 0), ShapeError);
}

TEST_CASE("zero-weight rg_step deinterleaves") {
  const MeraModel m(small_config(8, 2, 2));
  Rng rng(1);
  const Tensor phi = uniform_tensor(rng, {8, 2}, -1, 1);
  const auto r = rg_step(m, 0, initial_fields(m, phi));
  REQUIRE(r.coarse.fields.shape() == Shape{4, 2});
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(r.coarse.fields.at(j, c) == phi.at(2 * j + 1, c));
      CHECK(r.bulk.at(j, c) == phi.at(2 * j, c));
    }
  CHECK(r.coupling == 0.0);
  CHECK(r.coarse.lattice == std::vector<std::size_t>{1, 3, 5, 7});
  CHECK(r.bulk_sites == std::vector<std::size_t>{0, 2, 4, 6});

  // With l = 4 the groups start at even slots, so even slots stay relevant.
  const MeraModel m4(small_config(8, 1, 4));
  CHECK(m4.plan()[0].relevant_slots == std::vector<std::size_t>{0, 2, 4, 6});

  const auto back = g_step(m, 0, r.coarse, r.bulk);
  CHECK(back.fine.fields == phi);
  CHECK_THROWS_AS(rg_step(m, 1, initial_fields(m, phi)), ShapeError);
}

TEST_CASE("zero-weight rg_flow action") {
  const MeraModel m(small_config(8, 2, 4));
  const auto zero = rg_flow(m, Tensor({8, 2}));
  CHECK(std::abs(zero.action.total - 8.0 * kLog2Pi) <= 1e-12);
  for (const auto& z : zero.bulk.layers) CHECK(z.max_abs() == 0.0);

  Rng rng(2);
  const Tensor phi = uniform_tensor(rng, {8, 2}, -2, 2);
  const auto r = rg_flow(m, phi);
  CHECK(std::abs(r.action.total - (0.5 * sq_norm(phi) + 8.0 * kLog2Pi)) <= 1e-12);
  CHECK(r.bulk.total_coordinates() == 16);
  CHECK(g_flow(m, r.bulk) == phi);
}

TEST_CASE("rg_step and g_step invert each other") {
  const MeraModel m = random_model(small_config(8, 2, 2, 32), 0.3, 7);
  Rng rng(3);
  LayerFields f = initial_fields(m, uniform_tensor(rng, {8, 2}, -1.5, 1.5));
  for (std::size_t k = 0; k < m.plan().size(); ++k) {
    const auto r = rg_step(m, k, f);
    CHECK(r.coarse.fields.size() + r.bulk.size() == f.fields.size());
    const auto g = g_step(m, k, r.coarse, r.bulk);
    CHECK(max_abs_diff(g.fine.fields, f.fields) <= 1e-5);
    CHECK(std::abs(g.logdet + (-r.coupling)) <= 1e-8);
    f = r.coarse;
  }
}

TEST_CASE("rg_flow round trip, action recursion and sampling path") {
  const MeraModel m = random_model(small_config(16, 2, 4, 20), 0.3, 8);
  Rng rng(4);
  const Tensor phi = uniform_tensor(rng, {16, 2}, -1.5, 1.5);
  const auto r = rg_flow(m, phi);
  CHECK(max_abs_diff(g_flow(m, r.bulk), phi) <= 1e-4);

  double folded = r.action.prior_const;
  for (std::size_t k = 0; k < r.action.s_z.size(); ++k)
    folded += r.action.s_z[k] + r.action.s_coupling[k];
  CHECK(std::abs(folded - r.action.total) <= 1e-10);

  // -log p_Z(zeta) + log|det dG/dzeta| from the generation direction.
  std::vector<Tensor> rows;
  double neg_log_pz = 0.0;
  for (const auto& z : r.bulk.layers) {
    rows.push_back(z.reshaped({1, z.size()}));
    neg_log_pz += 0.5 * sq_norm(z) + 0.5 * static_cast<double>(z.size()) * kLog2Pi;
  }
  const auto gen = g_flow_batch(m, bind_constant(m), rows);
  CHECK(std::abs(neg_log_pz + gen.logdet[0] - r.action.total) <= 1e-10);

  BulkHierarchy sampled = r.bulk;
  Rng noise(5);
  for (auto& z : sampled.layers) z = normal_sample(noise, z.shape());
  CHECK(g_flow(m, sampled).all_finite());
}

TEST_CASE("batched flow agrees with the single-configuration flow") {
  const MeraModel m = random_model(small_config(8, 2, 2, 6), 0.4, 21);
  Rng rng(6);
  const Tensor batch = uniform_tensor(rng, {3, 16}, -1, 1);
  const auto f = rg_flow_batch(m, bind_constant(m), ad::Var::constant(batch));
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor phi({8, 2});
    for (std::size_t i = 0; i < 16; ++i) phi[i] = batch.at(b, i);
    CHECK(std::abs(rg_flow(m, phi).action.total - f.total.value()[b]) <= 1e-12);
  }
}

TEST_CASE("forgetful coarse graining") {
  const MeraModel m = random_model(small_config(8, 1, 2, 8), 0.3, 9);
  Rng rng(7);
  const Tensor phi = uniform_tensor(rng, {8, 1}, -1, 1);
  CHECK(forgetful_coarse_grain(m, phi, 0) == phi);
  LayerFields f = initial_fields(m, phi);
  for (std::size_t k = 1; k <= m.plan().size(); ++k) {
    f = rg_step(m, k - 1, f).coarse;
    const Tensor c = forgetful_coarse_grain(m, phi, k);
    CHECK(c == f.fields);
  }
  CHECK(forgetful_coarse_grain(m, phi, m.plan().size()).shape() == Shape{0, 1});
  CHECK_THROWS_AS(forgetful_coarse_grain(m, phi, m.plan().size() + 1), ShapeError);
}

TEST_CASE("locality with zero-weight disentanglers") {
  MeraModel m = random_model(small_config(16, 1, 2, 6), 0.4, 10);
  for (std::size_t i = 0; i < m.registry().size(); ++i)
    if (m.registry()[i].kind == BlockKind::Disentangler)
      for (Tensor* p : parameters(m.block(i).func))
        for (auto& v : p->data()) v = 0.0;
  Rng rng(8);
  const Tensor phi = uniform_tensor(rng, {16, 1}, -1, 1);
  const auto base = rg_step(m, 0, initial_fields(m, phi));
  const std::size_t site = 5;
  Tensor moved = phi;
  moved[site] += 0.3;
  const auto pert = rg_step(m, 0, initial_fields(m, moved));
  // Only the decimator holding the site can respond.
  std::set<std::size_t> cone;
  for (const auto& g : m.plan()[0].dec_groups)
    if (std::find(g.begin(), g.end(), site) != g.end()) cone.insert(g.begin(), g.end());
  for (std::size_t j = 0; j < base.bulk_sites.size(); ++j) {
    if (cone.count(base.bulk_sites[j])) continue;
    CHECK(base.bulk[j] == pert.bulk[j]);
  }
}

TEST_CASE("effective action: constructed couplings") {
  SUBCASE("zero coupling") {
    const MeraModel m(small_config(4, 1, 2));
    const Tensor coarse = Tensor::matrix(2, 1, {0.4, -0.7});
    CHECK(std::abs(effective_action_perturbative(m, 0, coarse) -
                   partial_action(m, 1, coarse)) <= 1e-12);
    CHECK(std::abs(partial_action(m, 1, coarse) -
                   (0.5 * (0.16 + 0.49) + kLog2Pi)) <= 1e-12);
  }
  SUBCASE("generation scales the bulk by e^c") {
    const double c = 0.37;
    const std::size_t bulk = 6;
    auto coupling = [&](const Tensor&) { return c * static_cast<double>(bulk); };
    CHECK(std::abs(effective_action_perturbative(coupling, 1.25, bulk) -
                   (1.25 + c * static_cast<double>(bulk))) <= 1e-9);
  }
  SUBCASE("non-finite estimates are reported") {
    auto coupling = [](const Tensor& z) { return z[0] > 0 ? NAN : 0.0; };
    CHECK_THROWS_AS(effective_action_perturbative(coupling, 0.0, 1), NumericError);
  }
}

TEST_CASE("effective action against quadrature on a two-coordinate block") {
  FlowBlock block{OdeFunc::zeros(2, 6, 3), 10};
  Rng rng(12);
  randomize_weights(block.func, rng, 0.15);
  for (double phi : {-1.0, 0.0, 0.8}) {
    auto coupling = [&](const Tensor& z) {
      return block_inverse(block, Tensor::vector({phi, z[0]})).logdet;
    };
    const double coarse = 0.5 * phi * phi + 0.5 * kLog2Pi;
    const double approx = effective_action_perturbative(coupling, coarse, 1);
    const int points = 801;
    const double lo = -8.0, hi = 8.0, h = (hi - lo) / (points - 1);
    double integral = 0.0;
    for (int i = 0; i < points; ++i) {
      const double z = lo + i * h;
      const double w = (i == 0 || i == points - 1) ? 0.5 : 1.0;
      integral += w * h * std::exp(-0.5 * z * z - coupling(Tensor::vector({z}))) /
                  std::sqrt(2.0 * std::numbers::pi);
    }
    CAPTURE(phi);
    CHECK(std::abs(approx - (coarse - std::log(integral))) <= 5e-2);
  }
}

TEST_CASE("bulk correlation diagnostic") {
  SUBCASE("independent normals") {
    Rng rng(13);
    const auto c = bulk_correlation(normal_sample(rng, {1000, 6}));
    CHECK(c.max_offdiag <= 0.1);
    CHECK_FALSE(c.degenerate);
    for (std::size_t i = 0; i < 6; ++i) CHECK(c.matrix.at(i, i) == 1.0);
  }
  SUBCASE("duplicated coordinate") {
    Rng rng(14);
    Tensor rows = normal_sample(rng, {50, 3});
    for (std::size_t r = 0; r < 50; ++r) rows.at(r, 2) = rows.at(r, 0);
    const auto c = bulk_correlation(rows);
    CHECK(c.matrix.at(0, 2) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c.matrix.at(0, 2) == c.matrix.at(2, 0));
  }
  SUBCASE("degenerate coordinate") {
    Tensor rows({4, 2});
    for (std::size_t r = 0; r < 4; ++r) rows.at(r, 0) = static_cast<double>(r);
    const auto c = bulk_correlation(rows);
    CHECK(c.degenerate);
    CHECK(c.matrix.at(0, 1) == 0.0);
  }
  SUBCASE("single sample") {
    const MeraModel m(small_config(2, 1, 2));
    const std::vector<Tensor> one = {Tensor({2, 1})};
    CHECK_THROWS_AS(bulk_independence_diagnostic(m, one), DataError);
  }
  SUBCASE("zero-weight model passes fields through") {
    const MeraModel m(small_config(4, 1, 2));
    Rng rng(15);
    std::vector<Tensor> phis;
    for (int i = 0; i < 1000; ++i) phis.push_back(normal_sample(rng, {4, 1}));
    CHECK(bulk_independence_diagnostic(m, phis).max_offdiag <= 0.1);
  }
}

// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "matml/tasks.hpp"

using namespace matml;
using namespace matml::testing;

namespace {

EGNNConfig tiny_config() {
  EGNNConfig c;
  c.embed_dim = 4;
  c.message_dim = 4;
  c.num_layers = 1;
  c.node_mlp_dims = {6};
  c.edge_mlp_dims = {6};
  c.pos_mlp_dims = {6};
  c.node_proj_depth = 1;
  c.node_proj_hidden = 8;
  c.out_depth = 1;
  c.out_hidden = 8;
  return c;
}

// constant predictor on the normalized scale
class ConstantModel : public EnergyModel {
 public:
  explicit ConstantModel(double value) : value_(value) {}
  Tensor forward(const FeatureGraph& batch, const ParamMap&) const override {
    return Tensor::full({batch.num_graphs}, value_);
  }
  const ParamMap& parameters() const override { return params_; }
  void set_parameters(ParamMap p) override { params_ = std::move(p); }
  std::string architecture() const override { return "constant"; }
  std::string config_json() const override { return "{}"; }

 private:
  double value_;
  ParamMap params_;
};

}  // namespace

TEST_CASE("is2re loss basics") {
  CHECK(is2re_loss(Tensor::vec({1, 2, 3}), Tensor::vec({1, 2, 3})).item() == 0.0);
  CHECK(is2re_loss(Tensor::vec({0, 0}), Tensor::vec({1, -1})).item() == 1.0);
  CHECK_THROWS_WITH_AS((void)is2re_loss(Tensor::vec({1}), Tensor::vec({1, 2})),
                       doctest::Contains("is2re_loss"), Error);

  Rng rng(3);
  Tensor pred = random_tensor(rng, {100});
  Tensor target = random_tensor(rng, {100});
  double brute = 0;
  for (std::size_t i = 0; i < 100; ++i) brute += std::fabs(pred.data[i] - target.data[i]);
  brute /= 100.0;
  CHECK(std::fabs(is2re_loss(pred, target).item() - brute) < 1e-12);
}

TEST_CASE("loss is zero iff predictions equal targets") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = random_tensor(rng, {8});
    CHECK(is2re_loss(t, t).item() == 0.0);
    Tensor off = t.detached();
    off.data[rng.index(8)] += 0.5;
    CHECK(is2re_loss(off, t).item() > 0.0);
  }
}

TEST_CASE("s2ef loss additivity and decomposition") {
  Tensor e0 = Tensor::vec({1, 2});
  Tensor f0 = Tensor::zeros({4, 3});
  CHECK(s2ef_loss(e0, e0, f0, f0).item() == 0.0);

  Tensor e_off = Tensor::vec({2, 3});  // energy MAE 1
  CHECK(s2ef_loss(e_off, e0, f0, f0).item() == doctest::Approx(1.0).epsilon(1e-12));
  Tensor f_off = Tensor::full({4, 3}, 0.5);  // force MAE 0.5
  CHECK(s2ef_loss(e0, e0, f_off, f0).item() == doctest::Approx(0.5).epsilon(1e-12));

  Rng rng(7);
  Tensor pe = random_tensor(rng, {6});
  Tensor te = random_tensor(rng, {6});
  Tensor pf = random_tensor(rng, {10, 3});
  Tensor tf = random_tensor(rng, {10, 3});
  double fmae = 0;
  for (std::size_t i = 0; i < pf.numel(); ++i) fmae += std::fabs(pf.data[i] - tf.data[i]);
  fmae /= static_cast<double>(pf.numel());
  CHECK(std::fabs(s2ef_loss(pe, te, pf, tf).item() - (is2re_loss(pe, te).item() + fmae)) < 1e-12);

  CHECK_THROWS_AS((void)s2ef_loss(pe, te, pf, Tensor::zeros({9, 3})), Error);
}

TEST_CASE("predicted forces match finite differences of the predicted energy") {
  EGNN model(tiny_config(), 21);
  auto data = generate_synthetic(1, 6, 6, 22);
  FeatureGraph g = radius_graph(data[0], 6.0, 50);
  Tensor pos0 = feature(g, FeatureDomain::node, "pos").detached();

  Tape tape;
  FeatureGraph gt = set_feature(g, FeatureDomain::node, "pos", tape.leaf(pos0));
  Tensor forces = predict_forces(model, gt, model.parameters(), false);
  REQUIRE(forces.shape == std::vector<std::size_t>{6, 3});

  Tensor fd = finite_difference(
      [&](const Tensor& q) {
        FeatureGraph gq = set_feature(g, FeatureDomain::node, "pos", q);
        return sum(model.forward(gq, model.parameters())).item();
      },
      pos0, 1e-6);
  for (std::size_t i = 0; i < forces.numel(); ++i)
    CHECK(close(forces.data[i], -fd.data[i], 1e-4, 1e-8));
}

TEST_CASE("forces sum to zero and rotate covariantly") {
  EGNN model(tiny_config(), 23);
  Rng rng(24);
  auto data = generate_synthetic(5, 5, 8, 25);
  for (const auto& s : data) {
    FeatureGraph g = radius_graph(s, 6.0, 50);
    Tensor pos0 = feature(g, FeatureDomain::node, "pos").detached();

    Tape tape;
    FeatureGraph gt = set_feature(g, FeatureDomain::node, "pos", tape.leaf(pos0));
    Tensor f = predict_forces(model, gt, model.parameters(), false);

    for (std::size_t c = 0; c < 3; ++c) {
      double total = 0;
      for (std::size_t i = 0; i < f.shape[0]; ++i) total += f.at(i, c);
      CHECK(std::fabs(total) < 1e-6);
    }

    Tensor r = random_rotation(rng);
    Tape tape2;
    FeatureGraph gr = set_feature(g, FeatureDomain::node, "pos", tape2.leaf(matmul(pos0, r)));
    Tensor fr = predict_forces(model, gr, model.parameters(), false);
    CHECK(max_abs_diff(fr, matmul(f, r)) < 1e-6);
  }
}

TEST_CASE("positions must be on a tape") {
  EGNN model(tiny_config(), 27);
  auto data = generate_synthetic(1, 5, 5, 28);
  FeatureGraph g = radius_graph(data[0], 6.0, 50);
  CHECK_THROWS_WITH_AS((void)predict_forces(model, g, model.parameters(), false),
                       doctest::Contains("tape"), Error);
}

TEST_CASE("s2ef parameter gradient through forces matches finite differences") {
  // reverse-over-reverse end to end on a tiny model
  EGNN model(tiny_config(), 31);
  auto data = generate_synthetic(2, 5, 6, 32);
  TaskBatch tb = make_task_batch(std::span<const AtomicStructure>(data), TaskKind::s2ef, {});

  auto loss_for = [&](const ParamMap& params) {
    Tape tape;
    ParamMap live;
    for (const auto& [name, t] : params) live.emplace(name, tape.leaf(t));
    FeatureGraph g = set_feature(tb.graph, FeatureDomain::node, "pos",
                                 tape.leaf(feature(tb.graph, FeatureDomain::node, "pos")));
    EnergyForces ef = predict_energy_forces(model, g, live, true);
    Tensor loss = s2ef_loss(ef.energies, tb.target_energies, ef.forces, tb.target_forces);
    return std::make_tuple(loss.item(), std::move(live), std::move(loss));
  };

  // analytic gradient
  Tape tape;
  ParamMap live;
  for (const auto& [name, t] : model.parameters()) live.emplace(name, tape.leaf(t));
  FeatureGraph g = set_feature(tb.graph, FeatureDomain::node, "pos",
                               tape.leaf(feature(tb.graph, FeatureDomain::node, "pos")));
  EnergyForces ef = predict_energy_forces(model, g, live, true);
  Tensor loss = s2ef_loss(ef.energies, tb.target_energies, ef.forces, tb.target_forces);
  std::vector<Tensor> wrt;
  std::vector<std::string> names;
  for (const auto& [name, t] : live) {
    names.push_back(name);
    wrt.push_back(t);
  }
  auto gs = grad(loss, std::span<const Tensor>(wrt));

  for (std::size_t k = 0; k < names.size(); ++k) {
    const Tensor& base = model.parameters().at(names[k]);
    Tensor fd = finite_difference(
        [&](const Tensor& probe) {
          ParamMap params = model.parameters();
          params.at(names[k]) = probe;
          Tape inner;
          ParamMap live2;
          for (const auto& [n2, t2] : params) live2.emplace(n2, inner.leaf(t2));
          FeatureGraph g2 = set_feature(tb.graph, FeatureDomain::node, "pos",
                                        inner.leaf(feature(tb.graph, FeatureDomain::node, "pos")));
          EnergyForces ef2 = predict_energy_forces(model, g2, live2, false);
          return s2ef_loss(ef2.energies, tb.target_energies, ef2.forces, tb.target_forces).item();
        },
        base, 1e-6);
    CHECK(all_close(gs[k], fd, 1e-4, 1e-7));
  }
}

TEST_CASE("normalizer round trip and force scaling") {
  auto data = generate_synthetic(50, 4, 8, 33);
  Normalizer n = fit_normalizer(std::span<const AtomicStructure>(data));
  CHECK(n.std > 0.0);
  for (const auto& s : data) {
    const double z = normalize_energy(n, *s.energy);
    CHECK(std::fabs(denormalize_energy(n, z) - *s.energy) < 1e-12);
  }
}

TEST_CASE("evaluate with a constant predictor gives mean absolute deviation") {
  auto data = generate_synthetic(40, 4, 8, 35);
  Normalizer n = fit_normalizer(std::span<const AtomicStructure>(data));
  ConstantModel model(0.0);  // denormalizes to the training mean
  MetricsRecord rec = evaluate(model, std::span<const AtomicStructure>(data), TaskKind::is2re, n);

  double want = 0;
  for (const auto& s : data) want += std::fabs(*s.energy - n.mean);
  want /= static_cast<double>(data.size());
  CHECK(std::fabs(rec.energy_mae_ev - want) < 1e-10);
  CHECK_FALSE(rec.force_mae_ev_per_ang.has_value());
}

TEST_CASE("evaluate is pure and matches a reference loop") {
  EGNN model(tiny_config(), 37);
  auto data = generate_synthetic(17, 4, 7, 38);
  Normalizer n = fit_normalizer(std::span<const AtomicStructure>(data));

  auto a = evaluate(model, std::span<const AtomicStructure>(data), TaskKind::s2ef, n, {}, 5);
  auto b = evaluate(model, std::span<const AtomicStructure>(data), TaskKind::s2ef, n, {}, 5);
  CHECK(a.energy_mae_ev == b.energy_mae_ev);
  CHECK(*a.force_mae_ev_per_ang == *b.force_mae_ev_per_ang);

  // reference loop, one structure at a time
  double e_sum = 0, f_sum = 0;
  std::size_t f_count = 0;
  for (const auto& s : data) {
    FeatureGraph g = radius_graph(s, 6.0, 50);
    Tape tape;
    FeatureGraph gt = set_feature(g, FeatureDomain::node, "pos",
                                  tape.leaf(feature(g, FeatureDomain::node, "pos")));
    EnergyForces ef = predict_energy_forces(model, gt, model.parameters(), false);
    e_sum += std::fabs(denormalize_energy(n, ef.energies.item()) - *s.energy);
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        f_sum += std::fabs(ef.forces.at(i, c) * n.std - (*s.forces)[i][c]);
        ++f_count;
      }
  }
  CHECK(std::fabs(a.energy_mae_ev - e_sum / static_cast<double>(data.size())) < 1e-10);
  CHECK(std::fabs(*a.force_mae_ev_per_ang - f_sum / static_cast<double>(f_count)) < 1e-10);

  CHECK_THROWS_AS((void)evaluate(model, {}, TaskKind::is2re, n), Error);
}

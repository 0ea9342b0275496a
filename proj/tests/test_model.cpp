#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "doctest.h"
#include "test_support.hpp"
#include "urnet/errors.hpp"
#include "urnet/grad_check.hpp"
#include "urnet/model.hpp"
#include "urnet/objective.hpp"

using namespace urnet;
using urnet::testing::random_tensor;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.image_size = 6;
  s.stage_channels = {4, 6};
  s.blocks_per_stage = 2;
  s.num_classes = 3;
  return s;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void zero_cgms(UrnetModel& m) {
  for (auto& c : m.cgms()) {
    for (Tensor* t : {&c.w1, &c.b1, &c.w2, &c.b2}) {
      for (auto& v : t->mutable_data()) v = 0.0;
    }
  }
}

// Non-negative input, as every block sees after the stem relu.
Tensor block_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return relu(random_tensor(std::move(shape), rng));
}

}  // namespace

TEST_CASE("scale parameter range") {
  CHECK(ScaleParam(0.0).value() == 0.0);
  CHECK(ScaleParam(1.0).value() == 1.0);
  CHECK_THROWS_AS(ScaleParam(-0.01), ContractError);
  CHECK_THROWS_AS(ScaleParam(1.01), ContractError);
  CHECK_THROWS_AS(ScaleParam(std::numeric_limits<double>::quiet_NaN()), ContractError);
}

TEST_CASE("model spec validation") {
  ModelSpec s;
  CHECK(s.num_blocks() == 12);
  s.num_classes = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = ModelSpec{};
  s.stage_channels = {};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = ModelSpec{};
  s.gate_training_probability = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("cgm hidden size is ceil((C + 1) / r)") {
  for (std::size_t c : {1u, 4u, 16u, 31u, 64u}) {
    for (std::size_t r : {1u, 2u, 3u, 16u}) {
      const auto expected = static_cast<std::size_t>(std::ceil(static_cast<double>(c + 1) / static_cast<double>(r)));
      CHECK(cgm_hidden_size(c, r) == expected);
    }
  }
  CHECK(cgm_hidden_size(16, 2) == 9);
}

TEST_CASE("model structure and initialization") {
  ModelSpec spec;
  UrnetModel m(spec);
  REQUIRE(m.blocks().size() == 12);
  REQUIRE(m.cgms().size() == 12);
  std::size_t projections = 0;
  for (auto& b : m.blocks()) projections += b.projection.has_value();
  CHECK(projections == 2);
  const std::size_t in_channels[] = {16, 16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64};
  for (std::size_t n = 0; n < 12; ++n) {
    const auto& c = m.cgms()[n];
    CHECK(c.channels() == in_channels[n]);
    CHECK(c.b2.item() == 1.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(c.channels() + 1));
    for (double v : c.w1.data()) CHECK(std::abs(v) <= bound);
    for (double v : c.w2.data()) CHECK(std::abs(v) < 0.06);
    for (double v : c.b1.data()) CHECK(v == 0.0);
  }
  for (auto& p : m.parameters()) {
    for (double v : p.tensor.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("gate activation") {
  const auto z = Tensor::from({3}, {0.0, 20.0, -20.0});
  const auto s = gate_activation(z, GateMode::Sigmoid);
  const auto b = gate_activation(z, GateMode::Binary);
  CHECK(s.at(0) == 0.5);
  CHECK(b.at(0) == 0.0);
  CHECK(1.0 - s.at(1) < 1e-8);
  CHECK(b.at(1) == 1.0);
  CHECK(b.at(2) == 0.0);
  CHECK(s.at(2) < 1e-8);
  // oracle: 1 / (1 + e^-20)
  CHECK(std::abs(s.at(1) - 1.0 / (1.0 + std::exp(-20.0))) < 1e-15);
}

TEST_CASE("property: sigmoid and binary gates agree once |z| > 20") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> mag(20.0 + 1e-9, 700.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> zs(500);
  for (auto& z : zs) z = sign(rng) ? mag(rng) : -mag(rng);
  const auto z = Tensor::from({zs.size()}, zs);
  const auto s = gate_activation(z, GateMode::Sigmoid);
  const auto b = gate_activation(z, GateMode::Binary);
  for (std::size_t i = 0; i < zs.size(); ++i) CHECK(std::abs(s.at(i) - b.at(i)) < 1e-8);
}

TEST_CASE("binary gate passes no gradient") {
  auto z = Tensor::from({2}, {0.3, -0.4}, true);
  auto g = gate_activation(z, GateMode::Binary);
  CHECK_FALSE(g.requires_grad());
}

TEST_CASE("sample_gate_modes") {
  Rng rng(5);
  for (auto m : sample_gate_modes(1.0, 20, rng)) CHECK(m == GateMode::Sigmoid);
  for (auto m : sample_gate_modes(0.0, 20, rng)) CHECK(m == GateMode::Binary);
  CHECK_THROWS_AS(sample_gate_modes(1.2, 3, rng), ContractError);
  // Monte-Carlo: 54 modes per trial, sigmoid fraction near p
  std::size_t sigmoid = 0, total = 0;
  for (int t = 0; t < 20000; ++t) {
    for (auto m : sample_gate_modes(0.1, 54, rng)) {
      sigmoid += m == GateMode::Sigmoid;
      ++total;
    }
  }
  CHECK(std::abs(static_cast<double>(sigmoid) / static_cast<double>(total) - 0.1) < 0.01);
  Rng a(9), b(9);
  CHECK(sample_gate_modes(0.3, 40, a) == sample_gate_modes(0.3, 40, b));
}

TEST_CASE("cgm forward") {
  UrnetModel m(small_spec());
  auto& cgm = m.cgms()[0];
  const auto x = block_input({3, 4, 6, 6}, 1);

  SUBCASE("zero parameters give z = 0") {
    zero_cgms(m);
    const auto s = cgm_forward(x, ScaleParam(0.7), cgm, GateMode::Sigmoid, true);
    const auto b = cgm_forward(x, ScaleParam(0.7), cgm, GateMode::Binary, true);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(s.at(i) == 0.5);
      CHECK(b.at(i) == 0.0);
    }
  }
  SUBCASE("feature-free gate is shared across the batch") {
    const auto g = cgm_forward(x, ScaleParam(0.4), cgm, GateMode::Sigmoid, false);
    CHECK(g.at(0) == g.at(1));
    CHECK(g.at(1) == g.at(2));
  }
  SUBCASE("direct evaluation oracle") {
    const auto g = cgm_forward(x, ScaleParam(0.3), cgm, GateMode::Sigmoid, true);
    const auto C = cgm.channels(), H = cgm.hidden();
    for (std::size_t b = 0; b < 3; ++b) {
      std::vector<double> in(C + 1);
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < 36; ++k) s += x.at((b * C + c) * 36 + k);
        in[c] = s / 36.0;
      }
      in[C] = 0.3;
      double z = cgm.b2.item();
      for (std::size_t h = 0; h < H; ++h) {
        double a = cgm.b1.at(h);
        for (std::size_t c = 0; c <= C; ++c) a += in[c] * cgm.w1.at(c * H + h);
        z += std::max(a, 0.0) * cgm.w2.at(h);
      }
      CHECK(std::abs(g.at(b) - 1.0 / (1.0 + std::exp(-z))) < 1e-12);
    }
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(cgm_forward(block_input({2, 5, 6, 6}, 2), ScaleParam(0.5), cgm, GateMode::Binary, true),
                    DimensionError);
  }
  SUBCASE("sigmoid-mode gradients pass grad_check") {
    for (Tensor* t : {&cgm.w1, &cgm.b1, &cgm.w2, &cgm.b2}) {
      std::vector<ParamCoordinate> coords;
      for (std::size_t i = 0; i < t->numel(); i += 3) coords.push_back({*t, i});
      const double err = grad_check_params(
          [&] {
            const auto g = cgm_forward(x, ScaleParam(0.6), cgm, GateMode::Sigmoid, true);
            return scale_loss(GateRecord{Tensor::make_result({3, 1}, std::vector<double>(g.data().begin(), g.data().end()),
                                                             "reshape", {g},
                                                             [g](std::span<const double> d) { g.accumulate_grad(d); }),
                                         {GateMode::Sigmoid}},
                              ScaleParam(0.2));
          },
          coords);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("gated block identities") {
  UrnetModel m(small_spec());
  auto& plain = m.blocks()[1];   // identity shortcut
  auto& proj = m.blocks()[2];    // projection shortcut
  const auto x = block_input({2, 4, 6, 6}, 3);
  const auto zeros = Tensor::zeros({2});
  const auto ones = Tensor::filled({2}, 1.0);

  SUBCASE("gate 0 returns the input bitwise, skip and masked paths alike") {
    const auto skip = gated_block_forward(x, plain, zeros, GateMode::Binary, true, NormMode::Eval);
    const auto masked = gated_block_forward(x, plain, zeros, GateMode::Binary, false, NormMode::Eval);
    CHECK(bitwise_equal(skip.data(), x.data()));
    CHECK(bitwise_equal(masked.data(), x.data()));
  }
  SUBCASE("gate 1 agrees between skip and masked paths to the bit") {
    for (auto* block : {&plain, &proj}) {
      const auto in = block == &plain ? x : block_input({2, 4, 6, 6}, 4);
      const auto a = gated_block_forward(in, *block, ones, GateMode::Binary, true, NormMode::Eval);
      const auto b = gated_block_forward(in, *block, ones, GateMode::Binary, false, NormMode::Eval);
      CHECK(bitwise_equal(a.data(), b.data()));
      const auto ref = relu(add(block->shortcut(in, NormMode::Eval), block->residual(in, NormMode::Eval)));
      CHECK(bitwise_equal(a.data(), ref.data()));
    }
  }
  SUBCASE("closed projection block equals relu of the projection") {
    const auto skip = gated_block_forward(x, proj, zeros, GateMode::Binary, true, NormMode::Eval);
    const auto masked = gated_block_forward(x, proj, zeros, GateMode::Binary, false, NormMode::Eval);
    CHECK(bitwise_equal(skip.data(), masked.data()));
    CHECK(bitwise_equal(skip.data(), relu(proj.shortcut(x, NormMode::Eval)).data()));
  }
  SUBCASE("mixed gates fall back to masking") {
    const auto gate = Tensor::from({2}, {1.0, 0.0});
    const auto y = gated_block_forward(x, plain, gate, GateMode::Binary, true, NormMode::Eval);
    const auto full = gated_block_forward(x, plain, ones, GateMode::Binary, false, NormMode::Eval);
    const std::size_t per = 4 * 36;
    CHECK(bitwise_equal(y.data().subspan(0, per), full.data().subspan(0, per)));
    CHECK(bitwise_equal(y.data().subspan(per, per), x.data().subspan(per, per)));
  }
  SUBCASE("sigmoid gate 0.5 matches direct evaluation") {
    const auto half = Tensor::filled({2}, 0.5);
    const auto y = gated_block_forward(x, plain, half, GateMode::Sigmoid, false, NormMode::Eval);
    const auto f = plain.residual(x, NormMode::Eval);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      CHECK(std::abs(y.at(i) - std::max(0.0, x.at(i) + 0.5 * f.at(i))) < 1e-12);
    }
  }
  SUBCASE("skip with sigmoid gates is a contract violation") {
    CHECK_THROWS_AS(gated_block_forward(x, plain, ones, GateMode::Sigmoid, true, NormMode::Eval), ContractError);
  }
}

TEST_CASE("binary gates give cgm parameters exactly zero gradient") {
  UrnetModel m(small_spec());
  const auto x = block_input({3, 3, 6, 6}, 5);
  const std::vector<int> labels{0, 1, 2};
  const auto out = urnet_forward(x, ScaleParam(0.5), m, policy::Override{GateMode::Binary}, {NormMode::Train, false});
  auto loss = total_loss(out.logits, labels, out.record, ScaleParam(0.5), 2.0);
  backward(loss.loss);
  for (auto& p : m.parameters()) {
    if (p.group != ParamGroup::Cgm) continue;
    for (double g : p.tensor.grad()) REQUIRE(g == 0.0);
  }
  // b2 = +1 opens every gate, so block weights do receive gradient.
  double norm = 0.0;
  for (double g : m.blocks()[0].conv1.weight.grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("urnet forward") {
  SUBCASE("zero-initialized CGMs close every block") {
    ModelSpec spec = small_spec();
    spec.stage_channels = {4};
    spec.blocks_per_stage = 3;
    UrnetModel m(spec);
    zero_cgms(m);
    std::mt19937_64 rng(7);
    const auto x = random_tensor({2, 3, 6, 6}, rng);
    const auto out = urnet_forward(x, ScaleParam(0.9), m, policy::Override{GateMode::Binary});
    for (double g : out.record.gates.data()) CHECK(g == 0.0);
    const auto h = relu(m.stem().forward(x, NormMode::Eval));
    const auto ref = affine(global_avg_pool(h), m.head_weight(), m.head_bias());
    CHECK(bitwise_equal(out.logits.data(), ref.data()));
  }
  SUBCASE("deterministic and well-formed") {
    UrnetModel m(small_spec());
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
      const auto x = random_tensor({4, 3, 6, 6}, rng);
      Rng r1(trial), r2(trial);
      const auto a = urnet_forward(x, ScaleParam(0.5), m, policy::Train{0.5, &r1}, {NormMode::Eval, false});
      const auto b = urnet_forward(x, ScaleParam(0.5), m, policy::Train{0.5, &r2}, {NormMode::Eval, false});
      CHECK(bitwise_equal(a.logits.data(), b.logits.data()));
      CHECK(bitwise_equal(a.record.gates.data(), b.record.gates.data()));
      CHECK(a.record.modes == b.record.modes);
      CHECK(a.record.gates.shape() == Shape{4, 4});
      const auto e = urnet_forward(x, ScaleParam(0.5), m, policy::Eval{});
      for (double g : e.record.gates.data()) CHECK((g == 0.0 || g == 1.0));
      for (std::size_t n = 0; n < 4; ++n) {
        for (std::size_t s = 0; s < 4; ++s) {
          const double g = a.record.gates.at(s * 4 + n);
          if (a.record.modes[n] == GateMode::Binary) {
            CHECK((g == 0.0 || g == 1.0));
          } else {
            CHECK((g > 0.0 && g < 1.0));
          }
        }
      }
    }
  }
  SUBCASE("input checks") {
    UrnetModel m(small_spec());
    CHECK_THROWS_AS(urnet_forward(Tensor::zeros({1, 2, 6, 6}), ScaleParam(0.5), m, policy::Eval{}), DimensionError);
    CHECK_THROWS_AS(urnet_forward(Tensor::zeros({1, 3, 6, 6}), ScaleParam(0.5), m, policy::Fixed{{GateMode::Binary}}),
                    ContractError);
  }
}

TEST_CASE("random drop") {
  UrnetModel m(small_spec());
  Rng rng(3);
  const auto keep = sample_random_keep_mask(ScaleParam(0.5), 54, rng);
  CHECK(std::count(keep.begin(), keep.end(), true) == 27);

  std::vector<int> counts(12, 0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    const auto k = sample_random_keep_mask(ScaleParam(0.25), 12, rng);
    for (std::size_t i = 0; i < 12; ++i) counts[i] += k[i];
  }
  for (int c : counts) CHECK(std::abs(static_cast<double>(c) / draws - 0.25) < 0.02);

  std::mt19937_64 r(9);
  const auto x = random_tensor({2, 3, 6, 6}, r);
  const auto all = random_drop_forward(x, ScaleParam(1.0), m, rng);
  const auto plain = masked_forward(x, m, std::vector<bool>(4, true), NormMode::Eval);
  CHECK(bitwise_equal(all.data(), plain.data()));
  CHECK_THROWS_AS(masked_forward(x, m, std::vector<bool>(3, true), NormMode::Eval), ContractError);
}

TEST_CASE("trainable groups") {
  UrnetModel m(small_spec());
  m.set_trainable(ParamGroup::Backbone, false);
  for (auto& p : m.parameters()) CHECK(p.tensor.requires_grad() == (p.group == ParamGroup::Cgm));
  m.set_trainable(ParamGroup::Backbone, true);
  m.set_trainable(ParamGroup::Cgm, false);
  for (auto& p : m.parameters()) CHECK(p.tensor.requires_grad() == (p.group == ParamGroup::Backbone));
  CHECK_THROWS_AS(m.set_gate_training_probability(-0.1), ConfigError);
}

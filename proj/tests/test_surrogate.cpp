#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "mfsurro/checkpoint.hpp"
#include "mfsurro/train.hpp"
#include "mfsurro/unet.hpp"

using namespace mfsurro;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny_config() {
  UNetConfig c;
  c.base_width = 4;
  c.input_size = 9;
  c.padded_size = 16;
  return c;
}

UNetConfig small_config() {
  UNetConfig c;
  c.base_width = 4;
  return c;
}

template <class T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(s);
  for (T& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace

TEST(Checkpoint, RoundTripAndErrors) {
  Checkpoint ck;
  ck.meta = {{"head", "lf"}, {"note", "a b c"}};
  ck.arrays.push_back({"w", random_tensor<float>({2, 3, 3, 3}, 1)});
  ck.arrays.push_back({"empty", Tensor<float>({0, 1, 1, 1})});
  const auto bytes = encode_checkpoint(ck);
  EXPECT_EQ(decode_checkpoint(bytes, "mem"), ck);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad, "mem"), BadMagicError);
  bad = bytes;
  bad[4] = 7;
  EXPECT_THROW(decode_checkpoint(bad, "mem"), VersionError);
  bad = bytes;
  bad[bad.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(bad, "mem"), ChecksumError);
  bad = bytes;
  bad.resize(10);
  EXPECT_THROW(decode_checkpoint(bad, "mem"), TruncatedError);

  Checkpoint reserved;
  reserved.meta["a=b"] = "c";
  EXPECT_THROW(encode_checkpoint(reserved), DataError);
}

TEST(Checkpoint, FileRoundTrip) {
  const fs::path p = fs::temp_directory_path() / ("mfsurro_ck_" + std::to_string(::getpid()) + ".mfwt");
  std::mt19937_64 rng(3);
  Network<float> net(small_config(), HeadKind::hf, rng);
  write_checkpoint(p, net.to_checkpoint({{"seed", "3"}}));
  const Checkpoint back = read_checkpoint(p);
  EXPECT_EQ(back.meta.at("head"), "hf");
  EXPECT_EQ(back.meta.at("seed"), "3");
  Network<float> loaded = Network<float>::from_checkpoint(back);
  EXPECT_EQ(loaded.config(), net.config());
  EXPECT_EQ(loaded.state_arrays(), net.state_arrays());
  fs::remove(p);
}

TEST(Network, OutputShapes) {
  std::mt19937_64 rng(1);
  Network<float> net(small_config(), HeadKind::lf, rng);
  const auto x = random_tensor<float>({2, 1, 50, 50}, 2);
  EXPECT_EQ(net.predict(x).shape, (Shape{2, 1, 50, 50}));
  net.swap_head(HeadKind::hf, rng);
  EXPECT_EQ(net.predict(x).shape, (Shape{2, 1, 200, 200}));
  Tape<float> tape;
  EXPECT_THROW(net.forward(tape, tape.constant(Tensor<float>({1, 1, 40, 40})), NormMode::eval), ShapeError);
}

TEST(Network, ConfigValidation) {
  UNetConfig c;
  c.padded_size = 60;
  std::mt19937_64 rng(1);
  EXPECT_THROW(Network<float>(c, HeadKind::lf, rng), ConfigError);
  c = UNetConfig{};
  c.base_width = 0;
  EXPECT_THROW(Network<float>(c, HeadKind::lf, rng), ConfigError);
}

TEST(Network, DeterministicInit) {
  auto a = build_network<float>(small_config(), 9);
  auto b = build_network<float>(small_config(), 9);
  auto c = build_network<float>(small_config(), 10);
  EXPECT_EQ(a.state_arrays(), b.state_arrays());
  EXPECT_NE(a.state_arrays(), c.state_arrays());
}

TEST(Network, KaimingStatistics) {
  std::mt19937_64 rng(5);
  const Tensor<double> w = kaiming_normal<double>({64, 32, 3, 3}, rng);  // 18432 draws, fan-in 288
  double s = 0.0, s2 = 0.0;
  for (double v : w.data) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(w.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_NEAR(sd / std::sqrt(2.0 / 288.0), 1.0, 0.05);
}

TEST(Network, ZeroInputFiniteAndRowwiseIdentical) {
  std::mt19937_64 rng(2);
  Network<float> net(UNetConfig{}, HeadKind::hf, rng);
  const Tensor<float> y0 = net.predict(Tensor<float>({1, 1, 50, 50}));
  EXPECT_TRUE(y0.all_finite());

  Tensor<float> x({2, 1, 50, 50});
  const auto one = random_tensor<float>({1, 1, 50, 50}, 4);
  std::copy(one.data.begin(), one.data.end(), x.data.begin());
  std::copy(one.data.begin(), one.data.end(), x.data.begin() + one.size());
  const Tensor<float> y = net.predict(x);
  const std::size_t plane = y.shape.plane();
  EXPECT_TRUE(std::equal(y.data.begin(), y.data.begin() + plane, y.data.begin() + plane));
}

TEST(Network, SwapHeadPreservesBackbone) {
  std::mt19937_64 rng(7);
  Network<float> net(small_config(), HeadKind::lf, rng);
  const std::uint32_t h0 = net.backbone_hash();
  const std::size_t count0 = net.parameter_count(true);
  net.swap_head(HeadKind::hf, rng);
  EXPECT_EQ(net.backbone_hash(), h0);
  EXPECT_EQ(net.parameter_count(true), count0);
  const auto head1 = net.head_parameters().front()->value;
  net.swap_head(HeadKind::lf, rng);
  net.swap_head(HeadKind::hf, rng);
  EXPECT_EQ(net.backbone_hash(), h0);
  EXPECT_NE(net.head_parameters().front()->value, head1);
  EXPECT_EQ(net.output_size(), 200);
}

TEST(Network, EveryParameterGetsGradient) {
  for (HeadKind head : {HeadKind::lf, HeadKind::hf}) {
    std::mt19937_64 rng(11);
    Network<double> net(small_config(), head, rng);
    Tape<double> tape;
    const Var out = net.forward(tape, tape.constant(random_tensor<double>({2, 1, 50, 50}, 12)), NormMode::train);
    const int side = net.output_size();
    const Var loss = loss_mae(tape, out, random_tensor<double>({2, 1, side, side}, 13, -1.0, 1.0));
    tape.backward(loss);
    for (auto* p : net.parameters()) {
      double m = 0.0;
      for (double g : p->grad.data) m = std::max(m, std::abs(g));
      EXPECT_GT(m, 0.0) << p->name;
    }
  }
}

TEST(Network, TinyUNetGradCheck) {
  for (HeadKind head : {HeadKind::lf, HeadKind::hf}) {
    for (NormMode mode : {NormMode::train, NormMode::eval}) {
      std::mt19937_64 rng(21);
      Network<double> net(tiny_config(), head, rng);
      const int side = net.output_size();
      const Tensor<double> x = random_tensor<double>({3, 1, 9, 9}, 22);
      const Tensor<double> weights = random_tensor<double>({3, 1, side, side}, 23, -1.0, 1.0);
      if (mode == NormMode::eval)
        for (auto* s : net.norm_states())
          for (auto& v : s->running_var) v = 0.5;

      const GradCheckResult rx = grad_check(
          [&](Tape<double>& t, Var in) { return weighted_sum(t, net.forward(t, in, mode), weights); }, x);
      EXPECT_LT(rx.max_rel_error, 1e-4) << "input, head " << to_string(head);
      EXPECT_GT(rx.checked, 0u);

      // every parameter, up to 12 spread coordinates each
      for (auto* p : net.parameters()) {
        std::vector<std::size_t> coords;
        const std::size_t n = p->value.size(), step = std::max<std::size_t>(1, n / 12);
        for (std::size_t i = 0; i < n; i += step) coords.push_back(i);
        const GradCheckResult rp = grad_check_parameter(
            [&](Tape<double>& t) { return weighted_sum(t, net.forward(t, t.constant(x), mode), weights); }, *p,
            1e-5, coords);
        EXPECT_LT(rp.max_rel_error, 1e-4) << p->name << ", head " << to_string(head);
      }
    }
  }
}

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "dispatcher/msa.hpp"
#include "test_util.hpp"

using namespace dispatcher;
using testutil::expect_gradients_match;
using testutil::random_tensor;

namespace {

MsaParams params(std::size_t d, std::size_t heads, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return MsaParams::init(d, heads, 0.3, 0.3, rng);
}

}  // namespace

TEST(Msa, SingleTokenAttendsToItself) {
  std::mt19937_64 rng(1);
  Tensor w = msa_attention_weights(random_tensor({1, 1, 4}, rng, false), params(4, 1, 1));
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0], 1.0);
}

TEST(Msa, AttentionRowsSumToOneAndAreCausal) {
  std::mt19937_64 rng(2);
  const std::size_t n = 9, heads = 2;
  Tensor w = msa_attention_weights(random_tensor({2, n, 4}, rng, false), params(4, heads, 2));
  ASSERT_EQ(w.shape(), (Shape{2, heads, n, n}));
  for (std::size_t m = 0; m < 2 * heads; ++m)
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p = w[(m * n + i) * n + j];
        if (j > i) EXPECT_EQ(p, 0.0);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Msa, MatchesDirectAttentionFormula) {
  std::mt19937_64 rng(3);
  const std::size_t n = 5, d = 4;
  const MsaParams p = params(d, 1, 3);
  Tensor x = random_tensor({n, d}, rng, false);
  Tensor q = p.query(x), k = p.key(x), v = p.value(x);
  std::vector<double> ctx(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(i + 1);
    double mx = -INFINITY, z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      for (std::size_t c = 0; c < d; ++c) s[j] += q[i * d + c] * k[j * d + c];
      s[j] /= std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j <= i; ++j)
      for (std::size_t c = 0; c < d; ++c) ctx[i * d + c] += s[j] / z * v[j * d + c];
  }
  Tensor expect = p.output(Tensor({n, d}, ctx));
  Tensor got = msa_forward(x, p);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
}

TEST(Msa, CausalPerturbation) {
  std::mt19937_64 rng(4);
  const MsaParams p = params(6, 2, 4);
  for (std::size_t n : {1, 2, 5, 16, 33}) {
    for (std::size_t j = 0; j < n; j += std::max<std::size_t>(1, n / 4)) {
      Tensor x = random_tensor({1, n, 6}, rng, false);
      Tensor x2({1, n, 6}, Buffer(x.data().begin(), x.data().end()));
      for (std::size_t c = 0; c < 6; ++c) x2.mutable_data()[j * 6 + c] += 3.0;
      Tensor y = msa_forward(x, p), y2 = msa_forward(x2, p);
      for (std::size_t i = 0; i < j * 6; ++i) ASSERT_EQ(y[i], y2[i]);
    }
  }
}

TEST(Msa, MixingMacsAreQuadratic) {
  std::mt19937_64 rng(5);
  const MsaParams p = params(8, 2, 5);
  for (std::size_t n : {4, 8, 16}) {
    reset_op_counters();
    msa_forward(random_tensor({3, n, 8}, rng, false), p);
    EXPECT_EQ(op_counters().mixing_macs, 3u * 2 * n * n * 8) << n;
  }
}

TEST(Msa, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  const MsaParams p = params(4, 2, 6);
  expect_gradients_match(
      [&](const std::vector<Tensor>& in) {
        MsaParams q = p;
        q.query = {in[0], in[1]};
        q.key = {in[2], in[3]};
        q.value = {in[4], in[5]};
        q.output = {in[6], in[7]};
        return msa_forward(in[8], q);
      },
      {p.query.weight, p.query.bias, p.key.weight, p.key.bias, p.value.weight, p.value.bias, p.output.weight,
       p.output.bias, random_tensor({2, 5, 4}, rng)});
}

TEST(Msa, RejectsWrongWidth) {
  EXPECT_THROW(msa_forward(Tensor::zeros({1, 3, 5}), params(4, 1, 7)), DimensionError);
}

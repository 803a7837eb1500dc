#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "oracles.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"
#include "vlp/tensor_io.hpp"

using namespace vlp;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Reduces an op's output to a scalar through fixed random weights, then
// compares the tape's gradient of every input against central differences.
double op_gradient_error(const std::vector<Tensor>& inputs, const std::function<Tensor(Tape&)>& op,
                         std::uint64_t seed = 5) {
  Rng rng(seed);
  Tensor probe;
  auto scalar = [&](Tape& tape) {
    Tensor out = op(tape);
    if (!probe.defined()) {
      probe = Tensor::zeros(out.shape());
      for (auto& v : probe.data()) v = rng.normal();
    }
    return weighted_sum(tape, out, probe);
  };
  for (const auto& t : inputs) t.zero_grad();
  {
    Tape tape;
    tape.backward(scalar(tape));
  }
  std::vector<double> analytic, numeric;
  for (const auto& t : inputs) {
    const auto g = t.grad();
    for (std::size_t k = 0; k < t.numel(); ++k) {
      analytic.push_back(g[k]);
      numeric.push_back(oracle::central_difference(t, k, [&] {
        Tape tape = Tape::inference();
        return scalar(tape).item();
      }));
    }
  }
  return oracle::relative_error(analytic, numeric);
}

}  // namespace

TEST(Tensor, ConstructionChecksShape) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  EXPECT_THROW(Tensor::zeros({0, 3}), DimensionError);
  EXPECT_THROW((Tensor::matrix({{1.0, 2.0}, {3.0}})), DimensionError);
  Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, HandlesAliasAndDetachCopies) {
  Tensor a = Tensor::vector({1, 2});
  Tensor b = a;
  b[0] = 7;
  EXPECT_EQ(a[0], 7);
  Tensor c = a.detach();
  c[1] = 9;
  EXPECT_EQ(a[1], 2);
}

TEST(Matmul, IdentityAndHandValues) {
  Tape tape;
  Tensor x = Tensor::matrix({{1.5, -2}, {0.25, 4}});
  EXPECT_EQ(matmul(tape, Tensor::identity(2), x).values(), x.values());
  Tensor r = matmul(tape, Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.values(), (std::vector<double>{17, 39}));
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  EXPECT_THROW(add(tape, Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW(add_row_bias(tape, Tensor::zeros({2, 3}), Tensor::zeros({1, 2})), DimensionError);
}

TEST(Softmax, HandValues) {
  Tape tape;
  Tensor a = softmax_rows(tape, Tensor::matrix({{0, 0}}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  Tensor b = softmax_rows(tape, Tensor::matrix({{std::log(1.0), std::log(3.0)}}));
  EXPECT_NEAR(b[0], 0.25, 1e-15);
  EXPECT_NEAR(b[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneForFiniteInputs) {
  Rng rng(3);
  Tape tape = Tape::inference();
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = trial % 4 == 0 ? 800.0 : 5.0;  // large magnitudes exercise the max shift
    Tensor x = random_tensor({1 + rng.uniform_index(6), 1 + rng.uniform_index(9)}, rng, scale);
    Tensor s = softmax_rows(tape, x);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < s.cols(); ++j) {
        EXPECT_GE(s.at(i, j), 0.0);
        sum += s.at(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, NaNInputIsNumericError) {
  Tape tape;
  EXPECT_THROW(softmax_rows(tape, Tensor::matrix({{0.0, std::nan("")}})), NumericError);
}

TEST(LayerNorm, ConstantRowCollapsesToZero) {
  Tape tape;
  Tensor y = layer_norm(tape, Tensor::matrix({{3, 3, 3, 3}}), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementHandValue) {
  Tape tape;
  Tensor y = layer_norm(tape, Tensor::matrix({{1, -1}}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], expected, 1e-15);
  EXPECT_NEAR(y[1], -expected, 1e-15);
}

TEST(Gelu, KnownValues) {
  Tape tape;
  Tensor y = gelu(tape, Tensor::vector({0.0, 1.0, -1.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.8411919906, 1e-9);
  EXPECT_NEAR(y[2], -0.1588080094, 1e-9);
}

TEST(CrossEntropy, UniformLogits) {
  Tape tape;
  Tensor l = cross_entropy_rows(tape, Tensor::zeros({1, 10}), {3});
  EXPECT_NEAR(l.item(), std::log(10.0), 1e-15);
  EXPECT_THROW(cross_entropy_rows(tape, Tensor::zeros({1, 10}), {10}), ContractError);
}

TEST(CosineDistance, HandValuesAndZeroNorm) {
  Tape tape;
  Tensor d = cosine_distance_matrix(tape, Tensor::matrix({{1, 0}, {1, 1}}), Tensor::matrix({{0, 2}, {3, 0}}));
  EXPECT_NEAR(d.at(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(d.at(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(d.at(1, 0), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine_distance_matrix(tape, Tensor::matrix({{0, 0}}), Tensor::matrix({{1, 0}})), NumericError);
}

// Every differentiable op against central differences.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) + 100);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng);
  const Tensor bias = random_tensor({5}, rng), row = random_tensor({1, 4}, rng), gain = random_tensor({4}, rng);
  const Tensor s1 = random_tensor({1}, rng), s2 = random_tensor({1}, rng), shift = random_tensor({4}, rng);
  const Tensor pos = Tensor({3, 4}, [&] {
    std::vector<double> v(12);
    for (auto& x : v) x = 0.1 + rng.uniform();
    return v;
  }(), true);
  const Tensor plan = Tensor::full({3, 3}, 1.0 / 9.0);
  const Tensor a2 = random_tensor({3, 4}, rng);

  const std::vector<std::pair<std::string, std::pair<std::vector<Tensor>, std::function<Tensor(Tape&)>>>> ops = {
      {"matmul", {{a, w}, [&](Tape& t) { return matmul(t, a, w); }}},
      {"transpose", {{a}, [&](Tape& t) { return transpose(t, a); }}},
      {"add", {{a, b}, [&](Tape& t) { return add(t, a, b); }}},
      {"sub", {{a, b}, [&](Tape& t) { return sub(t, a, b); }}},
      {"mul", {{a, b}, [&](Tape& t) { return mul(t, a, b); }}},
      {"scale", {{a}, [&](Tape& t) { return scale(t, a, -1.7); }}},
      {"add_row_bias", {{a, row}, [&](Tape& t) { return add_row_bias(t, a, row); }}},
      {"linear", {{a, w, bias}, [&](Tape& t) { return linear(t, a, w, bias); }}},
      {"softmax_rows", {{a}, [&](Tape& t) { return softmax_rows(t, a); }}},
      {"log_softmax_rows", {{a}, [&](Tape& t) { return log_softmax_rows(t, a); }}},
      {"layer_norm", {{a, gain, shift}, [&](Tape& t) { return layer_norm(t, a, gain, shift); }}},
      {"gelu", {{a}, [&](Tape& t) { return gelu(t, a); }}},
      {"slice_cols", {{a}, [&](Tape& t) { return slice_cols(t, a, 1, 3); }}},
      {"concat_cols", {{a, b}, [&](Tape& t) { return concat_cols(t, {a, b}); }}},
      {"concat_rows", {{a, row, b}, [&](Tape& t) { return concat_rows(t, {a, row, b}); }}},
      {"gather_rows", {{a}, [&](Tape& t) { return gather_rows(t, a, {2, 0, 2}); }}},
      {"sum", {{a}, [&](Tape& t) { return sum(t, a); }}},
      {"sum_squares", {{a}, [&](Tape& t) { return sum_squares(t, a); }}},
      {"combine_scalars", {{s1, s2}, [&](Tape& t) { return combine_scalars(t, {s1, s2}, {0.3, -2.0}); }}},
      {"cross_entropy_rows", {{a}, [&](Tape& t) { return cross_entropy_rows(t, a, {0, 3, 1}); }}},
      {"cosine_distance", {{pos, a2}, [&](Tape& t) { return cosine_distance_matrix(t, pos, a2); }}},
      {"weighted_sum", {{pos, a2}, [&](Tape& t) { return weighted_sum(t, cosine_distance_matrix(t, pos, a2), plan); }}},
      {"attention_chain",
       {{a, b}, [&](Tape& t) { return matmul(t, softmax_rows(t, matmul(t, a, transpose(t, b))), b); }}},
  };
  for (const auto& [name, op] : ops) {
    const double err = op_gradient_error(op.first, op.second);
    EXPECT_LT(err, 1e-4) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Values(0, 1, 2));

TEST(Tape, BackwardRejectsNonScalarAndForeignLoss) {
  Tape tape;
  Tensor x = Tensor::matrix({{1, 2}}, true);
  Tensor y = scale(tape, x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
  Tape other;
  Tensor z = sum(other, x);
  EXPECT_THROW(tape.backward(z), ContractError);
}

TEST(Tape, LeafGradientsAccumulateAndReset) {
  Tensor x = Tensor::vector({1.0, -2.0}, true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    tape.backward(sum_squares(tape, x));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tape, InferenceTapeRecordsNothing) {
  Tape tape = Tape::inference();
  Tensor x = Tensor::vector({1.0}, true);
  Tensor y = sum(tape, x);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, ConstantsDoNotReceiveGradients) {
  Tape tape;
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  Tensor c = Tensor::vector({3.0, 4.0});
  tape.backward(sum(tape, mul(tape, x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Determinism, RepeatedComputationIsBitIdentical) {
  auto run = [] {
    Rng rng(9);
    Tensor a = random_tensor({5, 6}, rng), w = random_tensor({6, 6}, rng);
    Tape tape;
    Tensor l = sum_squares(tape, gelu(tape, softmax_rows(tape, matmul(tape, a, w))));
    tape.backward(l);
    std::vector<double> out{l.item()};
    for (double g : w.grad()) out.push_back(g);
    return out;
  };
  const auto x = run(), y = run();
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(x[i]), std::bit_cast<std::uint64_t>(y[i]));
}

TEST(Rng, DeterministicAndForksIndependent) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng root(42);
  Rng f1 = root.fork(1), f2 = root.fork(2), f1b = Rng(42).fork(1);
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  Rng f1c = Rng(42).fork(1);
  EXPECT_EQ(f1b.next_u64(), f1c.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const auto k = a.uniform_index(7);
    EXPECT_LT(k, 7u);
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(TensorDump, HeaderAndBitExactRoundTrip) {
  Tensor t({2, 3}, {1.0, -0.0, std::numeric_limits<double>::denorm_min(), 1e308, -3.25,
                    std::numeric_limits<double>::infinity()});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  const auto newline = bytes.find('\n');
  ASSERT_NE(newline, std::string::npos);
  const auto header = nlohmann::json::parse(bytes.substr(0, newline));
  EXPECT_EQ(header.at("shape"), (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(header.at("count"), 6);
  EXPECT_EQ(bytes.size() - newline - 1, 6 * sizeof(double));

  std::stringstream in(bytes);
  Tensor r = read_tensor(in);
  EXPECT_EQ(r.shape(), t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(r[i]), std::bit_cast<std::uint64_t>(t[i]));
}

TEST(TensorDump, PayloadIsLittleEndian) {
  std::stringstream ss;
  write_tensor(ss, Tensor::vector({1.0}));
  const std::string bytes = ss.str();
  const std::string payload = bytes.substr(bytes.find('\n') + 1);
  ASSERT_EQ(payload.size(), 8u);
  // 1.0 = 0x3FF0000000000000
  for (int i = 0; i < 6; ++i) EXPECT_EQ(static_cast<unsigned char>(payload[i]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(payload[6]), 0xF0);
  EXPECT_EQ(static_cast<unsigned char>(payload[7]), 0x3F);
}

TEST(TensorDump, TruncatedPayloadIsIoError) {
  std::stringstream ss;
  write_tensor(ss, Tensor::vector({1.0, 2.0}));
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream in(bytes);
  EXPECT_THROW(read_tensor(in), IoError);
  std::stringstream garbage("not json\n");
  EXPECT_THROW(read_tensor(garbage), IoError);
}

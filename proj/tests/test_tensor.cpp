#include <doctest.h>

#include <cstring>

#include "pear/errors.hpp"
#include "pear/tensor.hpp"
#include "testutil.hpp"

using namespace pear;
using testutil::max_rel_error;
using testutil::numeric_gradient;
using testutil::random_tensor;

namespace {

void reset_tape() { tape<double>().clear(); }

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  reset_tape();
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor zero({2, 2});
  CHECK(matmul(a, eye).data() == std::vector<double>{1, 2, 3, 4});
  CHECK(matmul(a, zero).data() == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("matmul rejects mismatched inner dimensions, naming both shapes") {
  Tensor a({2, 3});
  Tensor b({2, 2});
  try {
    matmul(a, b);
    FAIL("expected shape_error");
  } catch (const shape_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    reset_tape();
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4, 2}, rng, true);
    backward(sum(matmul(a, b)));

    auto eval = [&] { return sum(matmul(a, b)).value(); };
    CHECK(max_rel_error(a.grad(), numeric_gradient(eval, a)) < 1e-6);
    CHECK(max_rel_error(b.grad(), numeric_gradient(eval, b)) < 1e-6);
  }
}

TEST_CASE("add broadcasts a row vector over the batch dimension") {
  reset_tape();
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b({3}, {10, 20, 30}, true);
  Tensor out = add(a, b);
  CHECK(out.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

  backward(sum(out));
  CHECK(b.grad() == std::vector<double>{2, 2, 2});  // column sums of ones

  Tensor bad({2});
  CHECK_THROWS_AS(add(a, bad), shape_error);
}

TEST_CASE("elementwise square: loss = sum(x*x) has gradient 2x") {
  reset_tape();
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("scale and relu gradients") {
  reset_tape();
  Tensor x({4}, {-2, -0.5, 0.5, 2}, true);
  backward(sum(scale(relu(x), 3.0)));
  CHECK(x.grad() == std::vector<double>{0, 0, 3, 3});
}

TEST_CASE("gelu gradient vs finite differences on 100 random scalars") {
  Rng rng(7);
  reset_tape();
  Tensor x = random_tensor({100}, rng, true, 1.5);
  backward(sum(gelu(x)));
  auto eval = [&] { return sum(gelu(x)).value(); };
  CHECK(max_rel_error(x.grad(), numeric_gradient(eval, x)) < 1e-6);
}

TEST_CASE("layer_norm forward normalizes rows and gradients match finite differences") {
  Rng rng(3);
  reset_tape();
  Tensor x = random_tensor({4, 6}, rng, true);
  Tensor g = random_tensor({6}, rng, true, 0.5);
  Tensor b = random_tensor({6}, rng, true, 0.5);
  Tensor out = layer_norm(x, g, b, 1e-5);
  CHECK(out.shape() == std::vector<Index>{4, 6});

  backward(sum(mul(out, out)));
  auto eval = [&] {
    Tensor o = layer_norm(x, g, b, 1e-5);
    return sum(mul(o, o)).value();
  };
  CHECK(max_rel_error(x.grad(), numeric_gradient(eval, x)) < 1e-6);
  CHECK(max_rel_error(g.grad(), numeric_gradient(eval, g)) < 1e-6);
  CHECK(max_rel_error(b.grad(), numeric_gradient(eval, b)) < 1e-6);

  CHECK_THROWS_AS(layer_norm(x, g, b, 0.0), usage_error);
}

TEST_CASE("softmax_rows on a symmetric row and its gradient") {
  reset_tape();
  Tensor flat({1, 2}, {0, 0});
  CHECK(softmax_rows(flat).data() == std::vector<double>{0.5, 0.5});

  Rng rng(5);
  Tensor x = random_tensor({3, 5}, rng, true);
  Tensor w = random_tensor({3, 5}, rng);
  reset_tape();
  backward(sum(mul(softmax_rows(x), w)));
  auto eval = [&] { return sum(mul(softmax_rows(x), w)).value(); };
  CHECK(max_rel_error(x.grad(), numeric_gradient(eval, x)) < 1e-6);
}

TEST_CASE("cross_entropy over uniform logits equals ln(k)") {
  reset_tape();
  for (int k = 2; k <= 6; ++k) {
    Tensor logits({2, k}, 0.7);  // any constant row is uniform after softmax
    Tensor loss = cross_entropy(logits, {0, k - 1});
    CHECK(loss.value() == doctest::Approx(std::log(double(k))).epsilon(1e-12));
  }
}

TEST_CASE("cross_entropy rejects out-of-range labels and wrong label counts") {
  Tensor logits({2, 3});
  CHECK_THROWS_AS(cross_entropy(logits, {0, 3}), usage_error);
  CHECK_THROWS_AS(cross_entropy(logits, {0, -1}), usage_error);
  CHECK_THROWS_AS(cross_entropy(logits, {0}), shape_error);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
  Rng rng(9);
  reset_tape();
  Tensor logits = random_tensor({4, 3}, rng, true);
  std::vector<int> labels = {0, 2, 1, 2};
  backward(cross_entropy(logits, labels));
  auto eval = [&] { return cross_entropy(logits, labels).value(); };
  CHECK(max_rel_error(logits.grad(), numeric_gradient(eval, logits)) < 1e-6);
}

TEST_CASE("attention_core gradients match finite differences") {
  Rng rng(13);
  const Index batch = 2, seq = 3, heads = 2, dim = 4;
  reset_tape();
  Tensor q = random_tensor({batch * seq, dim}, rng, true);
  Tensor k = random_tensor({batch * seq, dim}, rng, true);
  Tensor v = random_tensor({batch * seq, dim}, rng, true);
  Tensor w = random_tensor({batch * seq, dim}, rng);

  backward(sum(mul(attention_core(q, k, v, batch, seq, heads), w)));
  auto eval = [&] { return sum(mul(attention_core(q, k, v, batch, seq, heads), w)).value(); };
  CHECK(max_rel_error(q.grad(), numeric_gradient(eval, q)) < 1e-6);
  CHECK(max_rel_error(k.grad(), numeric_gradient(eval, k)) < 1e-6);
  CHECK(max_rel_error(v.grad(), numeric_gradient(eval, v)) < 1e-6);
}

TEST_CASE("sequence_mean pools each sequence and distributes gradient") {
  reset_tape();
  Tensor x({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);  // batch 2, seq 2
  Tensor out = sequence_mean(x, 2, 2);
  CHECK(out.data() == std::vector<double>{2, 3, 6, 7});
  backward(sum(out));
  CHECK(x.grad() == std::vector<double>(8, 0.5));
}

TEST_CASE("gradients accumulate across backward calls until zero_grad") {
  reset_tape();
  Tensor x({3}, {1, 2, 3}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  const std::vector<double> once = x.grad();
  backward(loss);
  for (size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * once[i]));

  zero_grad(std::vector<Tensor>{x});
  CHECK(x.grad() == std::vector<double>{0, 0, 0});
  zero_grad(std::vector<Tensor>{x});  // idempotent
  CHECK(x.grad() == std::vector<double>{0, 0, 0});

  Tensor untouched({2}, 0.0, true);
  zero_grad(std::vector<Tensor>{untouched});
  CHECK_FALSE(untouched.has_grad());  // absent reads as zero
}

TEST_CASE("backward rejects non-scalar losses and empty tapes") {
  reset_tape();
  Tensor x({2, 2}, 1.0, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), usage_error);

  reset_tape();
  Tensor z = Tensor::scalar(1.0);
  CHECK_THROWS_AS(backward(z), usage_error);
}

TEST_CASE("no tape nodes are recorded when nothing requires gradients") {
  reset_tape();
  Rng rng(21);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  Tensor g = random_tensor({4}, rng);
  Tensor bias = random_tensor({4}, rng);
  (void)sum(gelu(layer_norm(add(matmul(a, b), bias), g, bias, 1e-5)));
  CHECK(tape<double>().size() == 0);
}

TEST_CASE("NoGradGuard suspends recording for parameters that require gradients") {
  reset_tape();
  Tensor w({2, 2}, 1.0, true);
  {
    NoGradGuard ng;
    (void)matmul(w, w);
  }
  CHECK(tape<double>().size() == 0);
  (void)matmul(w, w);
  CHECK(tape<double>().size() == 1);
  reset_tape();
}

TEST_CASE("identical inputs produce bit-identical outputs and gradients") {
  auto run = [](uint64_t seed) {
    reset_tape();
    Rng rng(seed);
    Tensor a = random_tensor({5, 4}, rng, true);
    Tensor b = random_tensor({4, 3}, rng, true);
    Tensor g = random_tensor({3}, rng);
    Tensor out = softmax_rows(add(matmul(gelu(a), b), g));
    backward(sum(mul(out, out)));
    std::vector<double> all = out.data();
    all.insert(all.end(), a.grad().begin(), a.grad().end());
    all.insert(all.end(), b.grad().begin(), b.grad().end());
    reset_tape();
    return all;
  };
  const auto first = run(42);
  const auto second = run(42);
  REQUIRE(first.size() == second.size());
  CHECK(std::memcmp(first.data(), second.data(), first.size() * sizeof(double)) == 0);
}

TEST_CASE("all data and gradients stay finite through a realistic composite") {
  reset_tape();
  Rng rng(33);
  Tensor x = random_tensor({6, 8}, rng, true, 3.0);
  Tensor g({8}, 1.0, true);
  Tensor b({8}, 0.0, true);
  Tensor out = softmax_rows(layer_norm(gelu(x), g, b, 1e-5));
  backward(sum(out));
  CHECK(all_finite(out));
  CHECK(all_finite(x));
  CHECK(all_finite(g));
  reset_tape();
}

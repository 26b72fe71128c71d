#include "doctest.h"

#include <cmath>
#include <limits>

#include "cause/error.hpp"
#include "cause/seg_head.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cause;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = static_cast<float>(scale * rng.normal());
  return m;
}

oracle::Head to_oracle(const MlpHead& h) {
  oracle::Head o;
  const auto src = h.params.tensors();
  auto dst = o.tensors();
  for (std::size_t t = 0; t < src.size(); ++t) *dst[t] = oracle::to_mat(*src[t]);
  o.relu = h.activation == Activation::Relu;
  return o;
}

// Randomised small head with nonzero biases.
MlpHead random_head(std::size_t c, std::size_t r, std::uint64_t seed) {
  MlpHead h = init_head(c, r, seed);
  Rng rng(seed, "bias");
  for (auto* b : {&h.params.b1, &h.params.b2, &h.params.bp}) {
    for (auto& v : b->data()) v = static_cast<float>(0.1 * rng.normal());
  }
  return h;
}

}  // namespace

TEST_CASE("init is deterministic with the documented shapes") {
  const MlpHead a = init_head(384, 90, 5), b = init_head(384, 90, 5);
  CHECK(a.params == b.params);
  CHECK(a.params.w1.rows() == 384);
  CHECK(a.params.w1.cols() == 384);
  CHECK(a.params.w2.rows() == 384);
  CHECK(a.params.w2.cols() == 90);
  CHECK(a.params.wp.rows() == 90);
  CHECK(a.params.wp.cols() == 90);
  const float bound = 1.0f / std::sqrt(384.0f);
  for (float v : a.params.w1.data()) CHECK(std::abs(v) <= bound);
  for (float v : a.params.b1.data()) CHECK(v == 0.0f);
  CHECK_FALSE(init_head(384, 90, 6).params == a.params);
  CHECK_THROWS_AS(init_head(0, 3, 1), Error);
}

TEST_CASE("forward shapes and zero cases") {
  const MlpHead h = init_head(384, 90, 1);
  Rng rng(1, "x");
  const HeadOutput out = head_forward(random_matrix(256, 384, rng), h, HeadMode::Train);
  CHECK(out.y.rows() == 256);
  CHECK(out.y.cols() == 90);
  CHECK(out.projected.rows() == 256);
  CHECK(head_forward(Matrix(3, 384), h, HeadMode::Infer).y == Matrix(3, 90));
  const MlpHead z = zero_head(5, 4);
  CHECK(head_forward(random_matrix(7, 5, rng), z, HeadMode::Train).y == Matrix(7, 4));
}

TEST_CASE("forward matches the reference") {
  const MlpHead h = random_head(6, 4, 3);
  Rng rng(3, "x");
  const Matrix t = random_matrix(5, 6, rng);
  const HeadOutput out = head_forward(t, h, HeadMode::Train);
  const auto [y, z] = oracle::head_forward(to_oracle(h), oracle::to_mat(t));
  CHECK(oracle::relative_error(oracle::to_mat(out.y), y) < 1e-6);
  CHECK(oracle::relative_error(oracle::to_mat(out.projected), z) < 1e-6);
}

TEST_CASE("linear head without bias is homogeneous") {
  MlpHead h = init_head(6, 3, 2);
  h.activation = Activation::Identity;
  Rng rng(2, "x");
  const Matrix t = random_matrix(4, 6, rng);
  Matrix t2 = t;
  for (auto& v : t2.data()) v *= 2.5f;
  const Matrix y1 = head_forward(t, h, HeadMode::Infer).y;
  const Matrix y2 = head_forward(t2, h, HeadMode::Infer).y;
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y2.data()[i] == doctest::Approx(2.5 * y1.data()[i]).epsilon(1e-5));
}

TEST_CASE("infer mode never reads the projection") {
  MlpHead h = random_head(5, 3, 4);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (auto& v : h.params.wp.data()) v = nan;
  for (auto& v : h.params.bp.data()) v = nan;
  Rng rng(4, "x");
  const HeadOutput out = head_forward(random_matrix(6, 5, rng), h, HeadMode::Infer);
  CHECK(all_finite(out.y));
  CHECK(out.projected.empty());
}

TEST_CASE("non-finite input and bad dims are rejected") {
  const MlpHead h = init_head(3, 2, 0);
  Matrix t(2, 3);
  t(1, 1) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(head_forward(t, h, HeadMode::Infer), Error);
  CHECK_THROWS_AS(head_forward(Matrix(2, 4), h, HeadMode::Infer), Error);
}

TEST_CASE("backward matches central differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MlpHead h = random_head(6, 4, seed);
    Rng rng(seed, "bw");
    const Matrix t = random_matrix(5, 6, rng);
    const Matrix gz = random_matrix(5, 4, rng), gy = random_matrix(5, 4, rng);
    const HeadOutput out = head_forward(t, h, HeadMode::Train);
    const HeadGradients g = head_backward(h, out.cache, gz, gy);

    const auto go = oracle::to_mat(gz), gyo = oracle::to_mat(gy);
    oracle::Head base = to_oracle(h);
    const auto objective = [&](const oracle::Head& head, const oracle::Mat& tt) {
      const auto [y, z] = oracle::head_forward(head, tt);
      return oracle::frobenius_dot(z, go) + oracle::frobenius_dot(y, gyo);
    };
    const auto analytic = g.params.tensors();
    for (std::size_t k = 0; k < HeadParams::kTensors; ++k) {
      const auto fd = oracle::central_gradient(*base.tensors()[k], [&](const oracle::Mat& p) {
        oracle::Head probe = base;
        *probe.tensors()[k] = p;
        return objective(probe, oracle::to_mat(t));
      });
      INFO("tensor " << HeadParams::tensor_name(k) << " seed " << seed);
      CHECK(oracle::relative_error(oracle::to_mat(*analytic[k]), fd) < 1e-3);
    }
    const auto fd_in = oracle::central_gradient(oracle::to_mat(t), [&](const oracle::Mat& tt) { return objective(base, tt); });
    CHECK(oracle::relative_error(oracle::to_mat(g.input), fd_in) < 1e-3);
  }
}

TEST_CASE("zero upstream gradient gives zero gradients") {
  const MlpHead h = random_head(4, 3, 1);
  Rng rng(1, "z");
  const HeadOutput out = head_forward(random_matrix(3, 4, rng), h, HeadMode::Train);
  const HeadGradients g = head_backward(h, out.cache, Matrix(3, 3));
  for (const Matrix* m : g.params.tensors()) {
    for (float v : m->data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("dead relu unit passes no gradient to its first-layer weights") {
  MlpHead h = random_head(3, 2, 2);
  for (std::size_t q = 0; q < 3; ++q) h.params.w1(q, 1) = 0.0f;
  h.params.b1(0, 1) = -1.0f;
  Rng rng(2, "d");
  const HeadOutput out = head_forward(random_matrix(4, 3, rng), h, HeadMode::Train);
  const HeadGradients g = head_backward(h, out.cache, random_matrix(4, 2, rng));
  for (std::size_t q = 0; q < 3; ++q) CHECK(g.params.w1(q, 1) == 0.0f);
  CHECK(g.params.b1(0, 1) == 0.0f);
}

TEST_CASE("ema endpoints and geometric contraction") {
  const MlpHead student = random_head(4, 3, 1);
  const MlpHead start = random_head(4, 3, 2);
  TeacherHead t{start, 0.99};
  ema_update(t, student, 1.0);
  CHECK(t.head.params == start.params);
  ema_update(t, student, 0.0);
  CHECK(t.head.params == student.params);

  TeacherHead t2{start, 0.99};
  const double d0 = std::sqrt(parameter_distance_sq(t2.head.params, student.params));
  for (int i = 0; i < 10; ++i) ema_update(t2, student);
  const double d10 = std::sqrt(parameter_distance_sq(t2.head.params, student.params));
  CHECK(d10 / d0 == doctest::Approx(std::pow(0.99, 10)).epsilon(1e-5));
  CHECK_THROWS_AS(ema_update(t2, student, 1.5), Error);
}

TEST_CASE("head optimizer moves only with gradient") {
  MlpHead h = random_head(3, 2, 5);
  const MlpHead before = h;
  HeadOptimizer opt(h, 0.001);
  HeadParams zero = zero_head(3, 2).params;
  opt.step(h, zero);
  CHECK(h.params == before.params);
  zero.w1(0, 0) = 1.0f;
  opt.step(h, zero);
  CHECK(h.params.w1(0, 0) == doctest::Approx(before.params.w1(0, 0) - 0.001).epsilon(1e-3));
  CHECK(h.params.w2 == before.params.w2);
}

TEST_CASE("head file round trip") {
  TempDir dir;
  const MlpHead s = random_head(5, 3, 1);
  const TeacherHead t{random_head(5, 3, 2), 0.95};
  save_heads(s, t, dir.path() / "h.causehead");
  MlpHead s2;
  TeacherHead t2;
  load_heads(dir.path() / "h.causehead", s2, t2);
  CHECK(s2.params == s.params);
  CHECK(t2.head.params == t.head.params);
  CHECK(t2.lambda == 0.95);
  CHECK(s2.c == 5);
  CHECK(s2.r == 3);
  CHECK_THROWS_AS(load_heads(dir.path() / "none.causehead", s2, t2), Error);
}

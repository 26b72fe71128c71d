#include "cause/tensor_math.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>

#include "cause/error.hpp"

namespace cause {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw validation_error("matrix data length " + std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Tensor3 Tensor3::from_rows(const Matrix& m, std::size_t h, std::size_t w) {
  if (m.rows() != h * w) {
    throw validation_error("grid " + std::to_string(h) + "x" + std::to_string(w) +
                           " does not match " + std::to_string(m.rows()) + " rows");
  }
  Tensor3 t;
  t.h = h;
  t.w = w;
  t.d = m.cols();
  t.data = m.data();
  return t;
}

Matrix Tensor3::to_rows() const { return Matrix(h * w, d, data); }

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

namespace {

std::vector<double> row_norms(const Matrix& m, const char* name) {
  std::vector<double> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out[r] = norm(m.row(r));
    if (!(out[r] > 1e-12)) {
      throw numeric_error(std::string("zero-norm row ") + std::to_string(r) + " in " + name);
    }
  }
  return out;
}

}  // namespace

Matrix cosine_matrix(const Matrix& a, const Matrix& b, bool clamp_nonneg) {
  if (a.cols() != b.cols()) {
    throw validation_error("cosine_matrix: dimension mismatch " + std::to_string(a.cols()) +
                           " vs " + std::to_string(b.cols()));
  }
  const auto na = row_norms(a, "lhs");
  const auto nb = row_norms(b, "rhs");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double c = dot(ai, b.row(j)) / (na[i] * nb[j]);
      c = std::clamp(c, clamp_nonneg ? 0.0 : -1.0, 1.0);
      out(i, j) = static_cast<float>(c);
    }
  }
  return out;
}

Matrix normalize_rows(const Matrix& m) {
  const auto n = row_norms(m, "input");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = static_cast<float>(m(r, c) / n[r]);
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw validation_error("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto bk = b.row(k);
      for (std::size_t j = 0; j < bk.size(); ++j) acc[j] += aik * bk[j];
    }
    for (std::size_t j = 0; j < acc.size(); ++j) out(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw validation_error("matmul_bt: inner dimension mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = static_cast<float>(dot(a.row(i), b.row(j)));
  }
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw validation_error("matmul_at: inner dimension mismatch");
  std::vector<double> acc(a.cols() * b.cols(), 0.0);
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto ak = a.row(k);
    const auto bk = b.row(k);
    for (std::size_t i = 0; i < ak.size(); ++i) {
      const double v = ak[i];
      if (v == 0.0) continue;
      double* dst = acc.data() + i * b.cols();
      for (std::size_t j = 0; j < bk.size(); ++j) dst[j] += v * bk[j];
    }
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i]);
  return out;
}

void adam_step(Matrix& params, const Matrix& grads, AdamState& state, double lr) {
  if (!params.same_shape(grads)) throw validation_error("adam_step: gradient shape mismatch");
  if (!(lr > 0.0)) throw validation_error("adam_step: lr must be > 0");
  if (!all_finite(grads)) throw numeric_error("adam_step: non-finite gradient");
  if (!state.first_moment.same_shape(params)) state = AdamState(params);

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  auto& m = state.first_moment.data();
  auto& v = state.second_moment.data();
  auto& p = params.data();
  const auto& g = grads.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
    const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    p[i] = static_cast<float>(p[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed, std::string_view stream) : seed_(seed) {
  std::uint64_t x = seed ^ fnv1a64(stream);
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw validation_error("Rng::below: empty range");
  // Lemire's nearly-divisionless bounded draw.
  unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next_u64()) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double rad = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  spare_ = rad * std::sin(ang);
  has_spare_ = true;
  return rad * std::cos(ang);
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) {
    throw validation_error("sample_without_replacement: k=" + std::to_string(k) + " > n=" +
                           std::to_string(n));
  }
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

Tensor3 bilinear_upsample(const Tensor3& grid, std::size_t out_h, std::size_t out_w) {
  if (grid.h == 0 || grid.w == 0) throw validation_error("bilinear_upsample: empty grid");
  if (out_h < grid.h || out_w < grid.w) {
    throw validation_error("bilinear_upsample: downscaling from " + std::to_string(grid.h) + "x" +
                           std::to_string(grid.w) + " to " + std::to_string(out_h) + "x" +
                           std::to_string(out_w) + " is not supported");
  }
  Tensor3 out(out_h, out_w, grid.d);
  const double sy = out_h > 1 ? static_cast<double>(grid.h - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(grid.w - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), grid.h - 1);
    const std::size_t y1 = std::min(y0 + 1, grid.h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), grid.w - 1);
      const std::size_t x1 = std::min(x0 + 1, grid.w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < grid.d; ++c) {
        const double top = (1.0 - tx) * grid.at(y0, x0, c) + tx * grid.at(y0, x1, c);
        const double bot = (1.0 - tx) * grid.at(y1, x0, c) + tx * grid.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1.0 - ty) * top + ty * bot);
      }
    }
  }
  return out;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace cause

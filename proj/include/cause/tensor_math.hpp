#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace cause {

/// Row-major float32 matrix. Reductions that feed it are accumulated in double.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// h x w x d grid, channels innermost.
struct Tensor3 {
  std::size_t h = 0, w = 0, d = 0;
  std::vector<float> data;

  Tensor3() = default;
  Tensor3(std::size_t h_, std::size_t w_, std::size_t d_, float fill = 0.0f)
      : h(h_), w(w_), d(d_), data(h_ * w_ * d_, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch) { return data[(y * w + x) * d + ch]; }
  float at(std::size_t y, std::size_t x, std::size_t ch) const { return data[(y * w + x) * d + ch]; }

  /// View an (h*w) x d matrix as a grid.
  static Tensor3 from_rows(const Matrix& m, std::size_t h, std::size_t w);
  Matrix to_rows() const;
};

bool all_finite(std::span<const float> values);
inline bool all_finite(const Matrix& m) { return all_finite(std::span<const float>(m.data())); }

double dot(std::span<const float> a, std::span<const float> b);
double norm(std::span<const float> a);

/// Pairwise cosine similarity between the rows of `a` and `b`.
/// Zero-norm rows (<= 1e-12) are rejected with an error naming the row.
Matrix cosine_matrix(const Matrix& a, const Matrix& b, bool clamp_nonneg = false);

/// Copy of `m` with every row scaled to unit L2 norm.
Matrix normalize_rows(const Matrix& m);

/// C = A * B, double accumulation.
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T, double accumulation.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// C = A^T * B, double accumulation.
Matrix matmul_at(const Matrix& a, const Matrix& b);

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const Matrix& like)
      : first_moment(like.rows(), like.cols()), second_moment(like.rows(), like.cols()) {}
};

/// One bias-corrected Adam descent step. Ascent callers negate `grads`.
void adam_step(Matrix& params, const Matrix& grads, AdamState& state, double lr);

/// xoshiro256** seeded through splitmix64 from (seed, stream label).
/// The stream label is hashed with 64-bit FNV-1a so independent consumers of
/// one run seed never share a sequence. Output is identical on every platform:
/// no std:: distribution objects are involved.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (both halves used).
  double normal();

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull);

/// k distinct indices in [0, n), uniform over subsets, in draw order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng);

/// Channelwise bilinear interpolation with the align-corners convention:
/// output pixel (0,0) samples input (0,0), output (H-1,W-1) samples (h-1,w-1).
Tensor3 bilinear_upsample(const Tensor3& grid, std::size_t out_h, std::size_t out_w);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index must
/// write only its own outputs; results are then independent of scheduling.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace cause

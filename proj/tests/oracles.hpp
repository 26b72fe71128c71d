#pragma once
// Independent double-precision reference implementations used by the unit
// tests and the acceptance binary. Deliberately naive.

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "cause/tensor_math.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const cause::Matrix& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  }
  return out;
}

inline cause::Matrix to_matrix(const Mat& m) {
  cause::Matrix out(m.size(), m.empty() ? 0 : m[0].size());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = static_cast<float>(m[i][j]);
  }
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

/// Tanh modularity as a plain double sum over patch pairs, no trace exchange.
/// C = max(0, cos(T, M)); A = clamped cosine with zero diagonal.
inline double modularity_naive(const Mat& t, const Mat& m, double tau, bool use_tanh = true) {
  const std::size_t n = t.size(), k = m.size();
  Mat c(n, std::vector<double>(k));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) c[i][a] = std::max(0.0, cosine(t[i], m[a]));
  }
  Mat adj(n, std::vector<double>(n, 0.0));
  std::vector<double> d(n, 0.0);
  double two_e = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) adj[i][j] = std::max(0.0, cosine(t[i], t[j]));
      d[i] += adj[i][j];
    }
    two_e += d[i];
  }
  double h = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double g = 0;
      for (std::size_t a = 0; a < k; ++a) g += c[i][a] * c[j][a];
      const double x = use_tanh ? std::tanh(g / tau) : g;
      h += x * (adj[i][j] - d[i] * d[j] / two_e);
    }
  }
  return h / two_e;
}

/// Classical community modularity with hard labels: (1/2e) sum_ij B_ij delta(g_i, g_j).
inline double modularity_delta(const Mat& adj, const std::vector<int>& group) {
  const std::size_t n = adj.size();
  std::vector<double> d(n, 0.0);
  double two_e = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) d[i] += adj[i][j];
    two_e += d[i];
  }
  double h = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (group[i] == group[j]) h += adj[i][j] - d[i] * d[j] / two_e;
    }
  }
  return h / two_e;
}

/// Central differences of f over every entry of x.
inline Mat central_gradient(Mat x, const std::function<double(const Mat&)>& f, double step = 1e-4) {
  Mat g(x.size(), std::vector<double>(x.empty() ? 0 : x[0].size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double keep = x[i][j];
      x[i][j] = keep + step;
      const double up = f(x);
      x[i][j] = keep - step;
      const double down = f(x);
      x[i][j] = keep;
      g[i][j] = (up - down) / (2 * step);
    }
  }
  return g;
}

/// ||a - b|| / max(||b||, floor), Frobenius.
inline double relative_error(const Mat& a, const Mat& b, double floor = 1e-8) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      num += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
      den += b[i][j] * b[i][j];
    }
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

/// Best total of a square profit matrix over all permutations.
inline double assignment_brute_force(const Mat& profit) {
  std::vector<std::size_t> p(profit.size());
  std::iota(p.begin(), p.end(), 0);
  double best = -1e300;
  do {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += profit[i][p[i]];
    best = std::max(best, s);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

/// Gibbs marginals of a fully connected pairwise Potts field over n nodes and
/// L labels by enumerating all L^n labelings:
///   E(x) = sum_i U_i(x_i) + sum_{i<j} K_ij [x_i != x_j]
inline Mat potts_exact_marginals(const Mat& unary, const Mat& kernel) {
  const std::size_t n = unary.size(), labels = unary[0].size();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= labels;
  std::vector<double> energy(total);
  std::vector<std::size_t> x(n);
  double lowest = 1e300;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = c % labels;
      c /= labels;
    }
    double e = 0;
    for (std::size_t i = 0; i < n; ++i) {
      e += unary[i][x[i]];
      for (std::size_t j = i + 1; j < n; ++j) {
        if (x[i] != x[j]) e += kernel[i][j];
      }
    }
    energy[code] = e;
    lowest = std::min(lowest, e);
  }
  Mat marg(n, std::vector<double>(labels, 0.0));
  double z = 0;
  for (std::size_t code = 0; code < total; ++code) {
    const double w = std::exp(-(energy[code] - lowest));
    z += w;
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i) {
      marg[i][c % labels] += w;
      c /= labels;
    }
  }
  for (auto& row : marg) {
    for (auto& v : row) v /= z;
  }
  return marg;
}

struct Head {
  Mat w1, b1, w2, b2, wp, bp;
  bool relu = true;
  std::vector<Mat*> tensors() { return {&w1, &b1, &w2, &b2, &wp, &bp}; }
};

inline Mat affine(const Mat& x, const Mat& w, const Mat& b) {
  Mat out(x.size(), std::vector<double>(w[0].size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < w[0].size(); ++o) {
      double s = b[0][o];
      for (std::size_t q = 0; q < w.size(); ++q) s += x[i][q] * w[q][o];
      out[i][o] = s;
    }
  }
  return out;
}

/// Y = act(T W1 + b1) W2 + b2, Z = Y Wp + bp.
inline std::pair<Mat, Mat> head_forward(const Head& h, const Mat& t) {
  Mat hidden = affine(t, h.w1, h.b1);
  if (h.relu) {
    for (auto& row : hidden) {
      for (auto& v : row) v = std::max(0.0, v);
    }
  }
  Mat y = affine(hidden, h.w2, h.b2);
  Mat z = affine(y, h.wp, h.bp);
  return {y, z};
}

inline double frobenius_dot(const Mat& a, const Mat& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) s += a[i][j] * b[i][j];
  }
  return s;
}

/// One anchor: log of the mean over positives of
/// exp(cos+/tau) / (exp(cos+/tau) + sum_neg exp(cos-/tau)).
inline double infonce_log_p(const std::vector<double>& anchor, const Mat& pos, const Mat& neg, double tau) {
  double negsum = 0;
  for (const auto& n : neg) negsum += std::exp(cosine(anchor, n) / tau);
  double p = 0;
  for (const auto& q : pos) {
    const double e = std::exp(cosine(anchor, q) / tau);
    p += e / (e + negsum);
  }
  return std::log(p / static_cast<double>(pos.size()));
}

/// Bilateral + spatial Gaussian kernel between the pixels of a row-major
/// H x W RGB image, zero diagonal.
inline Mat crf_kernel(const std::vector<std::uint8_t>& rgb, std::size_t h, std::size_t w, double w_a, double t_a,
                      double t_b, double w_s, double t_g) {
  const std::size_t n = h * w;
  Mat k(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dy = double(i / w) - double(j / w), dx = double(i % w) - double(j % w);
      double dc = 0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double d = double(rgb[i * 3 + ch]) - double(rgb[j * 3 + ch]);
        dc += d * d;
      }
      const double p2 = dy * dy + dx * dx;
      k[i][j] = w_a * std::exp(-p2 / (2 * t_a * t_a) - dc / (2 * t_b * t_b)) + w_s * std::exp(-p2 / (2 * t_g * t_g));
    }
  }
  return k;
}

/// Mean softmax cross-entropy of X W + b against integer labels.
inline double softmax_ce(const Mat& x, const Mat& w, const std::vector<double>& b, const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> logit(b);
    for (std::size_t c = 0; c < b.size(); ++c) {
      for (std::size_t q = 0; q < w.size(); ++q) logit[c] += x[i][q] * w[q][c];
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0;
    for (double v : logit) z += std::exp(v - mx);
    total += -(logit[labels[i]] - mx - std::log(z));
  }
  return total / static_cast<double>(x.size());
}

}  // namespace oracle

#include "cause/inference_eval.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "cause/error.hpp"
#include "cause/spherical_kmeans.hpp"
#include "json.hpp"

namespace cause {

// ---------------------------------------------------------------------------
// Cluster probe

ClusterProbe fit_cluster_probe(const Matrix& pooled_outputs, std::size_t classes, std::size_t iters,
                               std::uint64_t seed, std::vector<double>* objective_trace, std::size_t restarts) {
  if (classes < 2) throw validation_error("cluster probe needs at least 2 classes");
  if (pooled_outputs.rows() < classes) {
    throw validation_error("cluster probe: " + std::to_string(pooled_outputs.rows()) + " rows for " +
                           std::to_string(classes) + " classes");
  }
  if (restarts < 1) throw validation_error("cluster probe: restarts must be >= 1");
  Rng rng(seed, "probe.kmeans");
  KMeansResult best = spherical_kmeans(pooled_outputs, classes, iters, rng);
  for (std::size_t r = 1; r < restarts; ++r) {
    KMeansResult km = spherical_kmeans(pooled_outputs, classes, iters, rng);
    if (km.objective.back() < best.objective.back()) best = std::move(km);
  }
  if (objective_trace) *objective_trace = best.objective;
  return ClusterProbe{std::move(best.centroids)};
}

std::vector<std::uint16_t> nearest_centroid(const Matrix& rows, const ClusterProbe& probe) {
  if (rows.cols() != probe.centroids.cols()) throw validation_error("nearest_centroid: dimension mismatch");
  const std::size_t k = probe.classes();
  std::vector<double> cnorm(k);
  for (std::size_t j = 0; j < k; ++j) cnorm[j] = norm(probe.centroids.row(j));
  std::vector<std::uint16_t> out(rows.rows(), 0);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const auto r = rows.row(i);
    const double rn = norm(r);
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double denom = rn * cnorm[j];
      const double s = denom > 0.0 ? dot(r, probe.centroids.row(j)) / denom : 0.0;
      if (s > best) {
        best = s;
        arg = j;
      }
    }
    out[i] = static_cast<std::uint16_t>(arg);
  }
  return out;
}

LabelMap predict_labels(const Matrix& outputs, std::size_t h, std::size_t w, const ClusterProbe& probe,
                        std::size_t out_h, std::size_t out_w) {
  if (outputs.rows() != h * w) throw validation_error("predict_labels: output rows != h*w");
  if (out_h < h || out_w < w) throw validation_error("predict_labels: image smaller than the patch grid");
  const Tensor3 up = bilinear_upsample(Tensor3::from_rows(outputs, h, w), out_h, out_w);
  const auto ids = nearest_centroid(up.to_rows(), probe);
  LabelMap m(out_h, out_w);
  m.values = ids;
  return m;
}

// ---------------------------------------------------------------------------
// Dense CRF

void check_crf_params(const CrfParams& p) {
  if (!(p.w_appearance >= 0.0) || !(p.w_smoothness >= 0.0)) throw validation_error("CRF weights must be >= 0");
  if (!(p.theta_alpha > 0.0) || !(p.theta_beta > 0.0) || !(p.theta_gamma > 0.0)) {
    throw validation_error("CRF standard deviations must be > 0");
  }
  if (p.steps < 1) throw validation_error("CRF steps must be >= 1");
  if (!(p.confidence > 0.0 && p.confidence < 1.0)) throw validation_error("CRF confidence must lie in (0,1)");
  if (p.max_pixels < 1) throw validation_error("CRF max_pixels must be >= 1");
  if (p.tile < 1) throw validation_error("CRF tile must be >= 1");
  if ((p.tile + 2 * p.halo) * (p.tile + 2 * p.halo) > p.max_pixels) {
    throw validation_error("CRF tile plus halo exceeds max_pixels");
  }
}

Matrix label_unaries(const LabelMap& labels, std::size_t classes, double confidence) {
  if (classes < 2) throw validation_error("CRF needs at least 2 classes");
  const float on = static_cast<float>(-std::log(confidence));
  const float off = static_cast<float>(-std::log((1.0 - confidence) / static_cast<double>(classes - 1)));
  Matrix u(labels.values.size(), classes, off);
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    const std::uint16_t l = labels.values[i];
    if (l == kIgnoreLabel) {
      for (auto& v : u.row(i)) v = 0.0f;
    } else if (l >= classes) {
      throw validation_error("CRF: label " + std::to_string(l) + " outside [0," + std::to_string(classes) + ")");
    } else {
      u(i, l) = on;
    }
  }
  return u;
}

namespace {

/// exp(-d^2 / 2 theta^2) for integer d in [0, n).
std::vector<float> gaussian_table(std::size_t n, double theta) {
  std::vector<float> t(n);
  for (std::size_t d = 0; d < n; ++d) {
    const double dd = static_cast<double>(d);
    t[d] = static_cast<float>(std::exp(-dd * dd / (2.0 * theta * theta)));
  }
  return t;
}

/// Dense N x N pairwise kernel with a zero diagonal. Pixel coordinates and
/// colour differences are integers, so every factor comes from a table.
std::vector<float> pairwise_kernel(const RgbImage& rgb, const CrfParams& p) {
  const std::size_t H = rgb.height, W = rgb.width, N = H * W;
  const std::size_t span = std::max(H, W);
  const auto pos_a = gaussian_table(span, p.theta_alpha);
  const auto pos_g = gaussian_table(span, p.theta_gamma);
  constexpr std::size_t kMaxColourSq = 3 * 255 * 255 + 1;
  std::vector<float> col(kMaxColourSq);
  for (std::size_t d = 0; d < kMaxColourSq; ++d) {
    col[d] = static_cast<float>(std::exp(-static_cast<double>(d) / (2.0 * p.theta_beta * p.theta_beta)));
  }
  const float wa = static_cast<float>(p.w_appearance);
  const float ws = static_cast<float>(p.w_smoothness);

  std::vector<float> k(N * N, 0.0f);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t yi = i / W, xi = i % W;
    const std::uint8_t* ci = &rgb.pixels[i * 3];
    float* row = &k[i * N];
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      const std::size_t yj = j / W, xj = j % W;
      const std::size_t dy = yi > yj ? yi - yj : yj - yi;
      const std::size_t dx = xi > xj ? xi - xj : xj - xi;
      const std::uint8_t* cj = &rgb.pixels[j * 3];
      const int d0 = int(ci[0]) - cj[0], d1 = int(ci[1]) - cj[1], d2 = int(ci[2]) - cj[2];
      const std::size_t dc = static_cast<std::size_t>(d0 * d0 + d1 * d1 + d2 * d2);
      row[j] = wa * pos_a[dy] * pos_a[dx] * col[dc] + ws * pos_g[dy] * pos_g[dx];
    }
  }
  return k;
}

float dense_dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t u = 0; u < 8; ++u) acc[u] += a[j + u] * b[j + u];
  }
  float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; j < n; ++j) s += a[j] * b[j];
  return s;
}

Matrix mean_field(const std::vector<float>& kernel, const Matrix& unaries, std::size_t steps,
                  const std::function<void(std::size_t, const Matrix&)>& on_step) {
  const std::size_t N = unaries.rows(), L = unaries.cols();
  Matrix q(N, L);
  std::vector<double> e(L);
  auto normalize_row = [&](std::size_t i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < L; ++l) mx = std::max(mx, e[l]);
    double z = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      e[l] = std::exp(e[l] - mx);
      z += e[l];
    }
    for (std::size_t l = 0; l < L; ++l) q(i, l) = static_cast<float>(e[l] / z);
  };
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t l = 0; l < L; ++l) e[l] = -static_cast<double>(unaries(i, l));
    normalize_row(i);
  }
  // Label-major copy of Q so each message is one contiguous dot product.
  std::vector<float> qt(L * N);
  for (std::size_t s = 1; s <= steps; ++s) {
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t l = 0; l < L; ++l) qt[l * N + i] = q(i, l);
    }
    // Potts: the penalty sum_j k_ij (1 - Q_j(l)) differs from -sum_j k_ij Q_j(l)
    // by a constant per pixel, which the normalization removes.
    for (std::size_t i = 0; i < N; ++i) {
      const float* krow = &kernel[i * N];
      for (std::size_t l = 0; l < L; ++l) {
        e[l] = -static_cast<double>(unaries(i, l)) + dense_dot(krow, &qt[l * N], N);
      }
      normalize_row(i);
    }
    if (on_step) on_step(s, q);
  }
  return q;
}

std::vector<std::uint16_t> argmax_rows(const Matrix& q) {
  std::vector<std::uint16_t> out(q.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto r = q.row(i);
    out[i] = static_cast<std::uint16_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

void check_crf_inputs(const RgbImage& rgb, std::size_t n, std::size_t classes) {
  if (classes < 2) throw validation_error("CRF needs at least 2 classes");
  if (rgb.height * rgb.width != n || rgb.pixels.size() != n * 3) {
    throw validation_error("CRF: image and labels differ in shape");
  }
}

/// Dense CRF on one window, skipped entirely when both weights are zero.
LabelMap refine_dense(const RgbImage& rgb, const LabelMap& labels, std::size_t classes, const CrfParams& p) {
  if (p.pairwise_disabled()) return labels;
  const Matrix u = label_unaries(labels, classes, p.confidence);
  const Matrix q = mean_field(pairwise_kernel(rgb, p), u, p.steps, {});
  LabelMap out(labels.height, labels.width);
  out.values = argmax_rows(q);
  return out;
}

}  // namespace

Matrix crf_mean_field(const RgbImage& rgb, const Matrix& unaries, const CrfParams& params,
                      const std::function<void(std::size_t, const Matrix&)>& on_step) {
  check_crf_params(params);
  check_crf_inputs(rgb, unaries.rows(), unaries.cols());
  if (unaries.rows() > params.max_pixels) {
    throw validation_error("CRF: " + std::to_string(unaries.rows()) + " pixels exceed the dense budget of " +
                           std::to_string(params.max_pixels) + "; use the tiled CRF (crf_refine_tiled)");
  }
  if (!all_finite(unaries)) throw numeric_error("CRF: non-finite unary");
  return mean_field(pairwise_kernel(rgb, params), unaries, params.steps, on_step);
}

LabelMap crf_refine(const RgbImage& rgb, const LabelMap& labels, std::size_t classes, const CrfParams& params) {
  check_crf_params(params);
  check_crf_inputs(rgb, labels.values.size(), classes);
  if (labels.values.size() > params.max_pixels) {
    throw validation_error("CRF: " + std::to_string(labels.values.size()) + " pixels exceed the dense budget of " +
                           std::to_string(params.max_pixels) + "; use the tiled CRF (crf_refine_tiled)");
  }
  return refine_dense(rgb, labels, classes, params);
}

LabelMap crf_refine_tiled(const RgbImage& rgb, const LabelMap& labels, std::size_t classes, const CrfParams& params) {
  check_crf_params(params);
  check_crf_inputs(rgb, labels.values.size(), classes);
  if (params.pairwise_disabled()) return labels;
  const std::size_t H = labels.height, W = labels.width;
  LabelMap out(H, W);
  for (std::size_t y0 = 0; y0 < H; y0 += params.tile) {
    for (std::size_t x0 = 0; x0 < W; x0 += params.tile) {
      const std::size_t y1 = std::min(H, y0 + params.tile), x1 = std::min(W, x0 + params.tile);
      const std::size_t wy0 = y0 > params.halo ? y0 - params.halo : 0;
      const std::size_t wx0 = x0 > params.halo ? x0 - params.halo : 0;
      const std::size_t wy1 = std::min(H, y1 + params.halo), wx1 = std::min(W, x1 + params.halo);
      const std::size_t wh = wy1 - wy0, ww = wx1 - wx0;
      RgbImage crop(wh, ww);
      LabelMap lab(wh, ww);
      for (std::size_t y = 0; y < wh; ++y) {
        for (std::size_t x = 0; x < ww; ++x) {
          lab.at(y, x) = labels.at(wy0 + y, wx0 + x);
          for (std::size_t ch = 0; ch < 3; ++ch) crop.at(y, x, ch) = rgb.at(wy0 + y, wx0 + x, ch);
        }
      }
      const LabelMap refined = refine_dense(crop, lab, classes, params);
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) out.at(y, x) = refined.at(y - wy0, x - wx0);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hungarian

std::vector<std::size_t> hungarian_match(const std::vector<std::vector<double>>& weights) {
  const std::size_t n = weights.size();
  for (const auto& row : weights) {
    if (row.size() != n) throw validation_error("hungarian_match: matrix must be square");
    for (double v : row) {
      if (!std::isfinite(v)) throw numeric_error("hungarian_match: non-finite weight");
    }
  }
  if (n == 0) return {};
  // Minimize the negated weights with row/column potentials (1-based e-maxx form).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -weights[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> sigma(n);
  for (std::size_t j = 1; j <= n; ++j) sigma[p[j] - 1] = j - 1;
  return sigma;
}

std::vector<std::size_t> hungarian_match(const Matrix& weights) {
  if (weights.rows() != weights.cols()) throw validation_error("hungarian_match: matrix must be square");
  std::vector<std::vector<double>> w(weights.rows(), std::vector<double>(weights.cols()));
  for (std::size_t i = 0; i < weights.rows(); ++i) {
    for (std::size_t j = 0; j < weights.cols(); ++j) w[i][j] = weights(i, j);
  }
  return hungarian_match(w);
}

// ---------------------------------------------------------------------------
// Metrics

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

void ConfusionMatrix::add(std::span<const std::uint16_t> pred, std::span<const std::uint16_t> truth) {
  if (pred.size() != truth.size()) throw validation_error("confusion: prediction and ground truth differ in size");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == kIgnoreLabel) {
      ++ignored_pixels;
      continue;
    }
    if (truth[i] >= classes) throw validation_error("confusion: label " + std::to_string(truth[i]) + " out of range");
    if (pred[i] >= classes) throw validation_error("confusion: prediction " + std::to_string(pred[i]) + " out of range");
    ++at(pred[i], truth[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& o) {
  if (o.classes != classes) throw validation_error("confusion: class count mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  ignored_pixels += o.ignored_pixels;
}

EvalResult score_confusion(const ConfusionMatrix& confusion, bool align, std::span<const std::size_t> excluded_classes) {
  const std::size_t n = confusion.classes;
  EvalResult r;
  r.confusion = confusion;
  r.n_pixels = confusion.total();
  r.permutation.resize(n);
  std::iota(r.permutation.begin(), r.permutation.end(), std::size_t{0});
  if (align) {
    std::vector<std::vector<double>> w(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) w[i][j] = static_cast<double>(confusion.at(i, j));
    }
    r.permutation = hungarian_match(w);
  }
  // Aligned counts: aligned(c_pred, c_true) = confusion(cluster mapped to c_pred, c_true).
  std::vector<std::uint64_t> tp(n, 0), pred_total(n, 0), true_total(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = r.permutation[i];
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint64_t c = confusion.at(i, j);
      pred_total[cls] += c;
      true_total[j] += c;
      if (j == cls) tp[cls] += c;
    }
  }
  std::uint64_t correct = 0;
  for (std::size_t c = 0; c < n; ++c) correct += tp[c];
  r.pacc = r.n_pixels ? static_cast<double>(correct) / static_cast<double>(r.n_pixels) : 0.0;
  r.per_class_iou.assign(n, std::nullopt);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const std::uint64_t uni = pred_total[c] + true_total[c] - tp[c];
    if (uni == 0) continue;
    if (std::find(excluded_classes.begin(), excluded_classes.end(), c) != excluded_classes.end()) continue;
    const double iou = static_cast<double>(tp[c]) / static_cast<double>(uni);
    r.per_class_iou[c] = iou;
    sum += iou;
    ++counted;
  }
  r.miou = counted ? sum / static_cast<double>(counted) : 0.0;
  return r;
}

EvalResult evaluate(std::span<const LabelMap> predictions, std::span<const LabelMap> ground_truth,
                    std::size_t classes) {
  if (predictions.size() != ground_truth.size()) throw validation_error("evaluate: prediction/ground-truth count mismatch");
  if (classes < 2) throw validation_error("evaluate needs at least 2 classes");
  ConfusionMatrix conf(classes);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].height != ground_truth[i].height || predictions[i].width != ground_truth[i].width) {
      throw validation_error("evaluate: map " + std::to_string(i) + " differs in shape from its ground truth");
    }
    conf.add(predictions[i].values, ground_truth[i].values);
  }
  return score_confusion(conf, true);
}

std::string metrics_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["mIoU"] = r.miou;
  j["pAcc"] = r.pacc;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) {
    if (v) {
      per.push_back(*v);
    } else {
      per.push_back(nullptr);
    }
  }
  j["per_class_iou"] = per;
  j["matched_permutation"] = r.permutation;
  j["n_pixels"] = r.n_pixels;
  return j.dump(2) + "\n";
}

std::string metrics_tsv(const EvalResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "metric\tvalue\n";
  os << "mIoU\t" << r.miou << "\n";
  os << "pAcc\t" << r.pacc << "\n";
  os << "n_pixels\t" << r.n_pixels << "\n";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    os << "iou_class_" << c << "\t";
    if (r.per_class_iou[c]) {
      os << *r.per_class_iou[c];
    } else {
      os << "NA";
    }
    os << "\n";
  }
  for (std::size_t c = 0; c < r.permutation.size(); ++c) {
    os << "match_cluster_" << c << "\t" << r.permutation[c] << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Linear probe

double softmax_cross_entropy(const LinearProbe& probe, const Matrix& inputs, std::span<const std::uint16_t> labels,
                             LinearProbe* grad) {
  const std::size_t n = inputs.rows(), d = inputs.cols(), k = probe.weights.cols();
  if (probe.weights.rows() != d || probe.bias.cols() != k) throw validation_error("linear probe: shape mismatch");
  if (labels.size() != n) throw validation_error("linear probe: label count != input rows");
  std::vector<double> gw, gb;
  if (grad) {
    gw.assign(d * k, 0.0);
    gb.assign(k, 0.0);
  }
  std::vector<double> z(k);
  double loss = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint16_t y = labels[i];
    if (y == kIgnoreLabel) continue;
    if (y >= k) throw validation_error("linear probe: label " + std::to_string(y) + " out of range");
    const auto x = inputs.row(i);
    for (std::size_t c = 0; c < k; ++c) z[c] = probe.bias(0, c);
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x[a];
      for (std::size_t c = 0; c < k; ++c) z[c] += xa * probe.weights(a, c);
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(z[c] - mx);
    const double lse = mx + std::log(s);
    loss += lse - z[y];
    ++used;
    if (grad) {
      for (std::size_t c = 0; c < k; ++c) {
        const double g = std::exp(z[c] - lse) - (c == y ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t a = 0; a < d; ++a) gw[a * k + c] += x[a] * g;
      }
    }
  }
  if (used == 0) throw validation_error("linear probe: no labelled rows");
  const double inv = 1.0 / static_cast<double>(used);
  if (grad) {
    grad->weights = Matrix(d, k);
    grad->bias = Matrix(1, k);
    for (std::size_t i = 0; i < d * k; ++i) grad->weights.data()[i] = static_cast<float>(gw[i] * inv);
    for (std::size_t c = 0; c < k; ++c) grad->bias(0, c) = static_cast<float>(gb[c] * inv);
  }
  return loss * inv;
}

LinearProbe fit_linear_probe(const Matrix& inputs, std::span<const std::uint16_t> labels, std::size_t classes,
                             const LinearProbeConfig& cfg, std::vector<double>* loss_trace) {
  if (classes < 2) throw validation_error("linear probe needs at least 2 classes");
  if (!(cfg.lr > 0.0)) throw validation_error("linear probe lr must be > 0");
  LinearProbe probe{Matrix(inputs.cols(), classes), Matrix(1, classes)};
  AdamState sw(probe.weights), sb(probe.bias);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    LinearProbe g;
    const double loss = softmax_cross_entropy(probe, inputs, labels, &g);
    if (!std::isfinite(loss)) throw numeric_error("linear probe: non-finite loss at epoch " + std::to_string(e));
    if (loss_trace) loss_trace->push_back(loss);
    adam_step(probe.weights, g.weights, sw, cfg.lr);
    adam_step(probe.bias, g.bias, sb, cfg.lr);
  }
  return probe;
}

std::vector<std::uint16_t> linear_probe_predict(const LinearProbe& probe, const Matrix& inputs) {
  if (probe.weights.rows() != inputs.cols()) throw validation_error("linear probe: input dimension mismatch");
  const std::size_t k = probe.weights.cols();
  std::vector<std::uint16_t> out(inputs.rows());
  std::vector<double> z(k);
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    const auto x = inputs.row(i);
    for (std::size_t c = 0; c < k; ++c) z[c] = probe.bias(0, c);
    for (std::size_t a = 0; a < x.size(); ++a) {
      for (std::size_t c = 0; c < k; ++c) z[c] += static_cast<double>(x[a]) * probe.weights(a, c);
    }
    out[i] = static_cast<std::uint16_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

EvalResult linear_probe(const Matrix& train_inputs, std::span<const std::uint16_t> train_labels,
                        const Matrix& val_inputs, std::span<const std::uint16_t> val_labels, std::size_t classes,
                        const LinearProbeConfig& cfg, std::vector<std::size_t>* excluded) {
  std::vector<char> seen(classes, 0);
  for (std::uint16_t y : train_labels) {
    if (y != kIgnoreLabel && y < classes) seen[y] = 1;
  }
  std::vector<std::size_t> missing;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!seen[c]) {
      missing.push_back(c);
      std::cerr << "warning: class " << c << " absent from linear-probe training labels; excluded from mIoU\n";
    }
  }
  if (excluded) *excluded = missing;
  const LinearProbe probe = fit_linear_probe(train_inputs, train_labels, classes, cfg);
  const auto pred = linear_probe_predict(probe, val_inputs);
  ConfusionMatrix conf(classes);
  conf.add(pred, val_labels);
  return score_confusion(conf, false, missing);
}

// ---------------------------------------------------------------------------
// PNG

void write_label_png(const LabelMap& labels, const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw io_error("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("PNG encoding failed for '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(labels.width), static_cast<png_uint_32>(labels.height), 8,
               PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Bit-interleaved palette shifted by one so no class is black; index 255 is IGNORE.
  std::vector<png_color> palette(256);
  for (int i = 0; i < 256; ++i) {
    int r = 0, g = 0, b = 0, c = i + 1;
    for (int j = 0; j < 8; ++j) {
      r |= ((c >> 0) & 1) << (7 - j);
      g |= ((c >> 1) & 1) << (7 - j);
      b |= ((c >> 2) & 1) << (7 - j);
      c >>= 3;
    }
    palette[i] = png_color{static_cast<png_byte>(r), static_cast<png_byte>(g), static_cast<png_byte>(b)};
  }
  palette[255] = png_color{0, 0, 0};
  png_set_PLTE(png, info, palette.data(), 256);
  png_write_info(png, info);
  std::vector<png_byte> row(labels.width);
  for (std::size_t y = 0; y < labels.height; ++y) {
    for (std::size_t x = 0; x < labels.width; ++x) {
      const std::uint16_t v = labels.at(y, x);
      row[x] = static_cast<png_byte>(v == kIgnoreLabel || v > 254 ? 255 : v);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw io_error("write failed for '" + path.string() + "'");
}

}  // namespace cause

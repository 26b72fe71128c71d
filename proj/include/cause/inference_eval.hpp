#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cause/feature_io.hpp"
#include "cause/tensor_math.hpp"

namespace cause {

// ---------------------------------------------------------------------------
// Cluster probe

struct ClusterProbe {
  Matrix centroids;  ///< classes x r, unit rows
  std::size_t classes() const noexcept { return centroids.rows(); }
};

/// Spherical k-means (k-means++ seeding) over pooled head outputs. With
/// restarts > 1 the run with the lowest final objective is kept; the trace
/// is that run's.
ClusterProbe fit_cluster_probe(const Matrix& pooled_outputs, std::size_t classes, std::size_t iters,
                               std::uint64_t seed, std::vector<double>* objective_trace = nullptr,
                               std::size_t restarts = 1);

/// Nearest centroid by cosine for each row, lowest index on ties.
std::vector<std::uint16_t> nearest_centroid(const Matrix& rows, const ClusterProbe& probe);

/// Upsample the h x w x r head output to out_h x out_w (align-corners
/// bilinear) and label each pixel with its nearest centroid.
LabelMap predict_labels(const Matrix& outputs, std::size_t h, std::size_t w, const ClusterProbe& probe,
                        std::size_t out_h, std::size_t out_w);

// ---------------------------------------------------------------------------
// Dense CRF

struct CrfParams {
  double w_appearance = 10.0;  ///< bilateral (position + colour) kernel weight
  double theta_alpha = 80.0;   ///< px
  double theta_beta = 13.0;    ///< intensity units
  double w_smoothness = 3.0;   ///< spatial kernel weight
  double theta_gamma = 3.0;    ///< px
  std::size_t steps = 10;
  double confidence = 0.9;     ///< probability mass the unary puts on the given label
  std::size_t max_pixels = 4096;  ///< dense messages cost max_pixels^2 per label per step
  std::size_t tile = 16;       ///< core tile side for crf_refine_tiled
  std::size_t halo = 4;        ///< context margin around each tile

  bool pairwise_disabled() const noexcept { return w_appearance == 0.0 && w_smoothness == 0.0; }
};

void check_crf_params(const CrfParams& p);

/// Unary energies (N x classes) for a hard label map: -log(confidence) on the
/// given label, -log((1-confidence)/(classes-1)) elsewhere. IGNORE pixels get
/// a flat unary.
Matrix label_unaries(const LabelMap& labels, std::size_t classes, double confidence);

/// Mean-field inference for
///   E(x) = sum_i U_i(x_i) + sum_{i<j} k(i,j) [x_i != x_j]
///   k(i,j) = w_a exp(-|p_i-p_j|^2/2ta^2 - |I_i-I_j|^2/2tb^2) + w_s exp(-|p_i-p_j|^2/2tg^2)
/// with exactly params.steps synchronous updates over all N^2 pairs. Returns
/// the final marginals (N x classes). `on_step(step, marginals)` runs after each update.
Matrix crf_mean_field(const RgbImage& rgb, const Matrix& unaries, const CrfParams& params,
                      const std::function<void(std::size_t, const Matrix&)>& on_step = {});

/// Dense CRF over the whole image; throws when H*W exceeds params.max_pixels.
LabelMap crf_refine(const RgbImage& rgb, const LabelMap& labels, std::size_t classes, const CrfParams& params);

/// Dense CRF on overlapping windows (tile + halo on each side); only each
/// window's core is written back.
LabelMap crf_refine_tiled(const RgbImage& rgb, const LabelMap& labels, std::size_t classes, const CrfParams& params);

// ---------------------------------------------------------------------------
// Matching and metrics

/// Permutation sigma maximizing sum_i weights(i, sigma(i)) (Kuhn-Munkres, O(n^3)).
std::vector<std::size_t> hungarian_match(const Matrix& weights);
std::vector<std::size_t> hungarian_match(const std::vector<std::vector<double>>& weights);

/// Counts: rows = predicted cluster, cols = true class.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t ignored_pixels = 0;

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n, 0) {}
  std::uint64_t& at(std::size_t pred, std::size_t truth) { return counts[pred * classes + truth]; }
  std::uint64_t at(std::size_t pred, std::size_t truth) const { return counts[pred * classes + truth]; }
  std::uint64_t total() const;
  void add(std::span<const std::uint16_t> pred, std::span<const std::uint16_t> truth);
  void merge(const ConfusionMatrix& o);
};

struct EvalResult {
  double miou = 0.0;
  double pacc = 0.0;
  std::vector<std::optional<double>> per_class_iou;  ///< empty optional: class absent from both
  std::vector<std::size_t> permutation;             ///< predicted cluster -> class
  ConfusionMatrix confusion;
  std::uint64_t n_pixels = 0;
};

/// Scores an accumulated confusion. With `align`, cluster ids are first
/// matched to classes by the Hungarian method; otherwise the identity is used.
EvalResult score_confusion(const ConfusionMatrix& confusion, bool align,
                           std::span<const std::size_t> excluded_classes = {});

EvalResult evaluate(std::span<const LabelMap> predictions, std::span<const LabelMap> ground_truth,
                    std::size_t classes);

std::string metrics_json(const EvalResult& r);
std::string metrics_tsv(const EvalResult& r);

// ---------------------------------------------------------------------------
// Linear probe

struct LinearProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

struct LinearProbe {
  Matrix weights;  ///< r x classes
  Matrix bias;     ///< 1 x classes
};

/// Mean softmax cross-entropy over rows whose label is not IGNORE. Fills
/// `grad` (same shapes as the probe) when non-null.
double softmax_cross_entropy(const LinearProbe& probe, const Matrix& inputs, std::span<const std::uint16_t> labels,
                             LinearProbe* grad = nullptr);

LinearProbe fit_linear_probe(const Matrix& inputs, std::span<const std::uint16_t> labels, std::size_t classes,
                             const LinearProbeConfig& cfg, std::vector<double>* loss_trace = nullptr);

std::vector<std::uint16_t> linear_probe_predict(const LinearProbe& probe, const Matrix& inputs);

/// Fits on the training rows and scores the validation rows without
/// alignment. Classes missing from the training labels are excluded from the
/// mean IoU and reported through `excluded`.
EvalResult linear_probe(const Matrix& train_inputs, std::span<const std::uint16_t> train_labels,
                        const Matrix& val_inputs, std::span<const std::uint16_t> val_labels, std::size_t classes,
                        const LinearProbeConfig& cfg, std::vector<std::size_t>* excluded = nullptr);

// ---------------------------------------------------------------------------
// Output

/// 8-bit palette PNG; IGNORE pixels map to palette index 255 (black).
void write_label_png(const LabelMap& labels, const std::filesystem::path& path);

}  // namespace cause

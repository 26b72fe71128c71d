#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cause/feature_io.hpp"
#include "cause/tensor_math.hpp"

namespace cause {

/// Concept prototypes plus their pairwise (unclamped) cosine matrix.
struct Clusterbook {
  Matrix prototypes;  ///< k x c
  Matrix distances;   ///< k x k, recomputed from prototypes on load
  double tau_mod = 0.1;
  std::string builder = "modularity";  ///< "modularity" | "kmeanspp"
  std::uint64_t seed = 0;

  std::size_t k() const noexcept { return prototypes.rows(); }
  std::size_t dim() const noexcept { return prototypes.cols(); }
};

/// Clamped-cosine patch graph of one image.
struct AffinityStats {
  Matrix adjacency;             ///< hw x hw, entries in [0,1]
  std::vector<double> degree;   ///< row sums
  double edges = 0.0;           ///< half the total weight
};

/// A_ij = max(0, cos(t_i, t_j)); the diagonal is zeroed unless disabled.
/// Throws a numeric error when the graph has no positive edge.
AffinityStats affinity(const Matrix& features, bool zero_diagonal = true);

enum class ModularityForm {
  Tanh,    ///< (1/2e) Tr(tanh(C C^T / tau) B)
  Linear,  ///< (1/2e) Tr(C C^T B), equal to (1/2e) Tr(C^T B C)
};

struct ModularityOptions {
  double tau = 0.1;
  ModularityForm form = ModularityForm::Tanh;
  bool zero_diagonal = true;
};

/// Modularity of an arbitrary assignment matrix C (hw x k) on a given graph,
/// evaluated in the hw x hw exchanged-trace form. B = A - d d^T / 2e.
double modularity_from_assignment(const AffinityStats& graph, const Matrix& assignment,
                                  const ModularityOptions& opts = {});

/// Soft assignment C = max(0, cos(T, M)).
Matrix soft_assignment(const Matrix& features, const Matrix& prototypes);

double modularity(const Matrix& features, const Matrix& prototypes, const ModularityOptions& opts = {});

struct ModularityValue {
  double value = 0.0;
  Matrix gradient;  ///< dH/dM, k x c (ascent direction)
};

/// H and its gradient with respect to the prototypes. The clamp contributes
/// a zero subgradient wherever cos(t_i, m_a) <= 0.
ModularityValue modularity_with_gradient(const Matrix& features, const Matrix& prototypes,
                                         const ModularityOptions& opts = {});
ModularityValue modularity_with_gradient(const AffinityStats& graph, const Matrix& features,
                                         const Matrix& prototypes, const ModularityOptions& opts = {});

inline Matrix modularity_gradient(const Matrix& features, const Matrix& prototypes,
                                  const ModularityOptions& opts = {}) {
  return modularity_with_gradient(features, prototypes, opts).gradient;
}

enum class BookOptimizer { Adam, AdamW };

struct BookFitOptions {
  std::size_t k = 2048;
  double tau_mod = 0.1;
  double lr = 0.001;
  BookOptimizer optimizer = BookOptimizer::Adam;
  double weight_decay = 0.01;  ///< AdamW only
  bool zero_diagonal = true;
  std::uint64_t seed = 0;
};

struct BookFitReport {
  std::size_t records_used = 0;
  std::size_t records_skipped = 0;
  std::vector<double> modularity;  ///< H before each update
};

/// One pass over `records` in order, one Adam ascent step on M per record.
Clusterbook fit_clusterbook(std::span<const FeatureRecord> records, const BookFitOptions& opts,
                            BookFitReport* report = nullptr);
Clusterbook fit_clusterbook(const DatasetManifest& manifest, const BookFitOptions& opts,
                            BookFitReport* report = nullptr);

/// Spherical k-means book over the pooled, unit-normalized training patches.
Clusterbook fit_clusterbook_kmeanspp(std::span<const FeatureRecord> records, std::size_t k, std::size_t iters,
                                     std::uint64_t seed, std::vector<double>* objective_trace = nullptr);
Clusterbook fit_clusterbook_kmeanspp(const DatasetManifest& manifest, std::size_t k, std::size_t iters,
                                     std::uint64_t seed, std::vector<double>* objective_trace = nullptr);

struct QuantizedAssignment {
  std::vector<std::size_t> indices;  ///< argmax_m cos(t_i, m), lowest index on ties
  Matrix quantized;                  ///< rows copied from the prototypes
};

QuantizedAssignment vector_quantize(const Matrix& features, const Matrix& prototypes);
inline QuantizedAssignment vector_quantize(const Matrix& features, const Clusterbook& book) {
  return vector_quantize(features, book.prototypes);
}

/// cos(M, M), unclamped.
Matrix distance_matrix(const Matrix& prototypes);

// .causebook: "CAUB" u32 version u32 k u32 c f64 tau_mod u32 builder_len builder u64 seed f32[k*c]
void save_clusterbook(const Clusterbook& book, const std::filesystem::path& path);
Clusterbook load_clusterbook(const std::filesystem::path& path);

/// Reads every record of one split, in manifest order.
std::vector<FeatureRecord> load_records(const DatasetManifest& manifest, Split split);

}  // namespace cause

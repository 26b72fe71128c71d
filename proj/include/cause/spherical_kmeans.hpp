#pragma once

#include <cstddef>
#include <vector>

#include "cause/tensor_math.hpp"

namespace cause {

struct KMeansResult {
  Matrix centroids;                   ///< k x d, unit rows
  std::vector<std::size_t> assignment;
  std::vector<double> objective;      ///< sum of (1 - cos) after each assignment pass
  std::size_t iterations = 0;
  std::size_t reseeds = 0;
};

/// Spherical k-means on the rows of `points` (normalized internally):
/// k-means++ seeding with (1 - cos) weights, Lloyd passes under cosine
/// similarity, centroids renormalized every pass. An emptied cluster is
/// reseeded at the point farthest from its current centroid. Ties go to the
/// lowest centroid index.
KMeansResult spherical_kmeans(const Matrix& points, std::size_t k, std::size_t max_iters, Rng& rng);

}  // namespace cause

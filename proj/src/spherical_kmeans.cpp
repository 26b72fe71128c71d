#include "cause/spherical_kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cause/error.hpp"

namespace cause {

namespace {

using Row = std::vector<double>;

double cosine_unit(std::span<const float> x, const Row& c) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * c[i];
  return s;
}

Row to_row(std::span<const float> x) { return Row(x.begin(), x.end()); }

}  // namespace

KMeansResult spherical_kmeans(const Matrix& points_in, std::size_t k, std::size_t max_iters, Rng& rng) {
  const std::size_t n = points_in.rows();
  const std::size_t d = points_in.cols();
  if (k == 0) throw validation_error("spherical_kmeans: k must be >= 1");
  if (n < k) {
    throw validation_error("spherical_kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) +
                           " clusters");
  }
  const Matrix points = normalize_rows(points_in);

  // k-means++ seeding.
  std::vector<Row> centroids;
  centroids.reserve(k);
  centroids.push_back(to_row(points.row(static_cast<std::size_t>(rng.below(n)))));
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = std::max(0.0, 1.0 - cosine_unit(points.row(i), centroids[0]));
  while (centroids.size() < k) {
    double total = 0.0;
    for (double v : dist) total += v;
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.below(n));
    } else {
      double target = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= dist[i];
        if (target < 0.0 && dist[i] > 0.0) {
          pick = i;
          break;
        }
      }
      while (dist[pick] <= 0.0 && pick > 0) --pick;
    }
    centroids.push_back(to_row(points.row(pick)));
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], std::max(0.0, 1.0 - cosine_unit(points.row(i), centroids.back())));
    }
  }

  KMeansResult res;
  res.assignment.assign(n, 0);
  std::vector<double> best_cos(n, 0.0);
  auto assign = [&] {
    bool changed = false;
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = points.row(i);
      std::size_t best = 0;
      double bc = -2.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double cj = cosine_unit(x, centroids[j]);
        if (cj > bc) {
          bc = cj;
          best = j;
        }
      }
      if (best != res.assignment[i]) changed = true;
      res.assignment[i] = best;
      best_cos[i] = bc;
      objective += 1.0 - bc;
    }
    res.objective.push_back(objective);
    return changed;
  };

  assign();
  for (std::size_t it = 0; it < max_iters; ++it) {
    res.iterations = it + 1;
    // Centroid update: normalized sum of members.
    std::vector<Row> sums(k, Row(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = points.row(i);
      auto& s = sums[res.assignment[i]];
      for (std::size_t c = 0; c < d; ++c) s[c] += x[c];
      counts[res.assignment[i]] += 1;
    }
    for (std::size_t j = 0; j < k; ++j) {
      double nn = 0.0;
      for (double v : sums[j]) nn += v * v;
      nn = std::sqrt(nn);
      if (counts[j] == 0 || nn < 1e-12) {
        counts[j] = 0;
        continue;
      }
      for (std::size_t c = 0; c < d; ++c) centroids[j][c] = sums[j][c] / nn;
    }
    // Empty clusters move to the point farthest from its own centroid; that
    // point's cost drops to zero, so the objective cannot rise.
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      std::size_t far = n;
      double worst = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[res.assignment[i]] <= 1) continue;
        const double cost = 1.0 - cosine_unit(points.row(i), centroids[res.assignment[i]]);
        if (cost > worst) {
          worst = cost;
          far = i;
        }
      }
      if (far == n) break;
      counts[res.assignment[far]] -= 1;
      centroids[j] = to_row(points.row(far));
      res.assignment[far] = j;
      counts[j] = 1;
      res.reseeds += 1;
    }
    if (!assign()) break;
  }

  res.centroids = Matrix(k, d);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t c = 0; c < d; ++c) res.centroids(j, c) = static_cast<float>(centroids[j][c]);
  }
  return res;
}

}  // namespace cause

#include "cause/clusterbook.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "binary_io.hpp"
#include "cause/error.hpp"
#include "cause/spherical_kmeans.hpp"

namespace cause {

namespace fs = std::filesystem;

AffinityStats affinity(const Matrix& features, bool zero_diagonal) {
  if (features.rows() < 2) throw validation_error("affinity: need at least 2 patches");
  AffinityStats g;
  g.adjacency = cosine_matrix(features, features, /*clamp_nonneg=*/true);
  const std::size_t n = features.rows();
  g.degree.assign(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (zero_diagonal) g.adjacency(i, i) = 0.0f;
    double di = 0.0;
    for (std::size_t j = 0; j < n; ++j) di += g.adjacency(i, j);
    g.degree[i] = di;
    total += di;
  }
  g.edges = 0.5 * total;
  if (!(g.edges > 1e-12)) throw numeric_error("affinity: degenerate graph (no positive edges)");
  return g;
}

Matrix soft_assignment(const Matrix& features, const Matrix& prototypes) {
  return cosine_matrix(features, prototypes, /*clamp_nonneg=*/true);
}

namespace {

void check_graph(const AffinityStats& g, std::size_t n) {
  if (g.adjacency.rows() != n || g.adjacency.cols() != n || g.degree.size() != n) {
    throw validation_error("modularity: graph size does not match the assignment rows");
  }
  if (!(g.edges > 1e-12)) throw numeric_error("modularity: degenerate graph (no positive edges)");
}

/// Walks the hw x hw modularity matrix once. Returns H and, when `weights` is
/// non-null, fills weights_ij = dH/dG_ij.
double modularity_core(const AffinityStats& g, const Matrix& assignment, const ModularityOptions& opts,
                       std::vector<double>* weights) {
  const std::size_t n = assignment.rows();
  check_graph(g, n);
  if (opts.form == ModularityForm::Tanh && !(opts.tau > 0.0)) throw validation_error("modularity: tau must be > 0");
  const double two_e = 2.0 * g.edges;
  if (weights) weights->assign(n * n, 0.0);
  double h = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ci = assignment.row(i);
    for (std::size_t j = i; j < n; ++j) {
      const double gij = dot(ci, assignment.row(j));
      const double bij = g.adjacency(i, j) - g.degree[i] * g.degree[j] / two_e;
      double x = gij, dx = 1.0;
      if (opts.form == ModularityForm::Tanh) {
        x = std::tanh(gij / opts.tau);
        dx = (1.0 - x * x) / opts.tau;
      }
      const double mult = (i == j) ? 1.0 : 2.0;  // B and G are symmetric
      h += mult * x * bij;
      if (weights) {
        const double wij = bij * dx / two_e;
        (*weights)[i * n + j] = wij;
        (*weights)[j * n + i] = wij;
      }
    }
  }
  return h / two_e;
}

}  // namespace

double modularity_from_assignment(const AffinityStats& graph, const Matrix& assignment, const ModularityOptions& opts) {
  return modularity_core(graph, assignment, opts, nullptr);
}

double modularity(const Matrix& features, const Matrix& prototypes, const ModularityOptions& opts) {
  const AffinityStats g = affinity(features, opts.zero_diagonal);
  return modularity_from_assignment(g, soft_assignment(features, prototypes), opts);
}

ModularityValue modularity_with_gradient(const Matrix& features, const Matrix& prototypes,
                                         const ModularityOptions& opts) {
  return modularity_with_gradient(affinity(features, opts.zero_diagonal), features, prototypes, opts);
}

ModularityValue modularity_with_gradient(const AffinityStats& graph, const Matrix& features,
                                         const Matrix& prototypes, const ModularityOptions& opts) {
  const std::size_t n = features.rows();
  const std::size_t k = prototypes.rows();
  const std::size_t c = features.cols();
  const Matrix cosines = cosine_matrix(features, prototypes, /*clamp_nonneg=*/false);
  Matrix assignment = cosines;
  for (auto& v : assignment.data()) v = std::max(v, 0.0f);

  std::vector<double> weights;
  ModularityValue out;
  out.value = modularity_core(graph, assignment, opts, &weights);

  // dH/dC = (W + W^T) C = 2 W C, masked by the clamp.
  std::vector<double> dcos(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* wi = weights.data() + i * n;
    double* di = dcos.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double wij = 2.0 * wi[j];
      if (wij == 0.0) continue;
      const auto cj = assignment.row(j);
      for (std::size_t a = 0; a < k; ++a) di[a] += wij * cj[a];
    }
    for (std::size_t a = 0; a < k; ++a) {
      if (!(cosines(i, a) > 0.0f)) di[a] = 0.0;
    }
  }

  // Through cos(t_i, m_a) = <t_i/|t_i|, m_a>/|m_a|.
  std::vector<double> tnorm(n), mnorm(k);
  for (std::size_t i = 0; i < n; ++i) tnorm[i] = norm(features.row(i));
  for (std::size_t a = 0; a < k; ++a) mnorm[a] = norm(prototypes.row(a));
  out.gradient = Matrix(k, c);
  std::vector<double> acc(c);
  for (std::size_t a = 0; a < k; ++a) {
    std::fill(acc.begin(), acc.end(), 0.0);
    double along = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = dcos[i * k + a];
      if (g == 0.0) continue;
      const auto ti = features.row(i);
      const double s = g / tnorm[i];
      for (std::size_t q = 0; q < c; ++q) acc[q] += s * ti[q];
      along += g * cosines(i, a);
    }
    const auto ma = prototypes.row(a);
    for (std::size_t q = 0; q < c; ++q) {
      out.gradient(a, q) = static_cast<float>((acc[q] - along * ma[q] / mnorm[a]) / mnorm[a]);
    }
  }
  return out;
}

std::vector<FeatureRecord> load_records(const DatasetManifest& manifest, Split split) {
  std::vector<FeatureRecord> out;
  for (const auto& p : manifest.paths(split)) {
    out.push_back(read_feature_file(p));
    if (out.back().c != manifest.feature_dim) {
      throw validation_error(p.string() + ": feature dim " + std::to_string(out.back().c) +
                             " != manifest feature_dim " + std::to_string(manifest.feature_dim));
    }
  }
  return out;
}

Clusterbook fit_clusterbook(std::span<const FeatureRecord> records, const BookFitOptions& opts,
                            BookFitReport* report) {
  if (opts.k < 2) throw validation_error("fit_clusterbook: k must be >= 2");
  if (records.empty()) throw validation_error("fit_clusterbook: empty training split");
  const std::size_t c = records.front().c;

  // Initial prototypes: distinct patches drawn from the whole training split,
  // padded with Gaussian rows when there are fewer than k patches.
  Rng rng(opts.seed, "clusterbook.init");
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t r = 0; r < records.size(); ++r) {
    for (std::size_t i = 0; i < records[r].features.rows(); ++i) slots.emplace_back(r, i);
  }
  Matrix proto(opts.k, c);
  const std::size_t take = std::min(opts.k, slots.size());
  const auto picks = sample_without_replacement(slots.size(), take, rng);
  for (std::size_t a = 0; a < take; ++a) {
    const auto [r, i] = slots[picks[a]];
    if (records[r].c != c) throw validation_error("fit_clusterbook: record '" + records[r].image_id + "' has a different dim");
    const auto src = records[r].features.row(i);
    std::copy(src.begin(), src.end(), proto.row(a).begin());
  }
  for (std::size_t a = take; a < opts.k; ++a) {
    for (auto& v : proto.row(a)) v = static_cast<float>(rng.normal());
  }
  proto = normalize_rows(proto);

  ModularityOptions mopts;
  mopts.tau = opts.tau_mod;
  mopts.zero_diagonal = opts.zero_diagonal;
  AdamState adam(proto);
  BookFitReport local;
  for (const auto& rec : records) {
    if (rec.c != c) throw validation_error("fit_clusterbook: record '" + rec.image_id + "' has a different dim");
    ModularityValue mv;
    try {
      mv = modularity_with_gradient(rec.features, proto, mopts);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) throw;
      local.records_skipped += 1;
      continue;
    }
    local.modularity.push_back(mv.value);
    for (auto& g : mv.gradient.data()) g = -g;  // ascent
    if (opts.optimizer == BookOptimizer::AdamW) {
      const double shrink = 1.0 - opts.lr * opts.weight_decay;
      for (auto& p : proto.data()) p = static_cast<float>(p * shrink);
    }
    adam_step(proto, mv.gradient, adam, opts.lr);
    local.records_used += 1;
  }
  if (local.records_used == 0) throw numeric_error("fit_clusterbook: every training record is degenerate");
  if (local.records_skipped > 0) {
    std::cerr << "fit_clusterbook: skipped " << local.records_skipped << " degenerate record(s)\n";
  }
  if (report) *report = std::move(local);

  Clusterbook book;
  book.prototypes = normalize_rows(proto);
  book.distances = distance_matrix(book.prototypes);
  book.tau_mod = opts.tau_mod;
  book.builder = "modularity";
  book.seed = opts.seed;
  return book;
}

Clusterbook fit_clusterbook(const DatasetManifest& manifest, const BookFitOptions& opts, BookFitReport* report) {
  const auto records = load_records(manifest, Split::Train);
  return fit_clusterbook(records, opts, report);
}

Clusterbook fit_clusterbook_kmeanspp(std::span<const FeatureRecord> records, std::size_t k, std::size_t iters,
                                     std::uint64_t seed, std::vector<double>* objective_trace) {
  if (records.empty()) throw validation_error("fit_clusterbook_kmeanspp: empty training split");
  std::size_t total = 0;
  for (const auto& r : records) total += r.features.rows();
  if (total < k) {
    throw validation_error("fit_clusterbook_kmeanspp: " + std::to_string(total) + " patches < k=" + std::to_string(k));
  }
  const std::size_t c = records.front().c;
  Matrix pooled(total, c);
  std::size_t at = 0;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.features.rows(); ++i, ++at) {
      const auto src = r.features.row(i);
      std::copy(src.begin(), src.end(), pooled.row(at).begin());
    }
  }
  Rng rng(seed, "clusterbook.kmeanspp");
  KMeansResult km = spherical_kmeans(pooled, k, iters, rng);
  if (objective_trace) *objective_trace = km.objective;
  Clusterbook book;
  book.prototypes = std::move(km.centroids);
  book.distances = distance_matrix(book.prototypes);
  book.builder = "kmeanspp";
  book.seed = seed;
  return book;
}

Clusterbook fit_clusterbook_kmeanspp(const DatasetManifest& manifest, std::size_t k, std::size_t iters,
                                     std::uint64_t seed, std::vector<double>* objective_trace) {
  const auto records = load_records(manifest, Split::Train);
  return fit_clusterbook_kmeanspp(records, k, iters, seed, objective_trace);
}

QuantizedAssignment vector_quantize(const Matrix& features, const Matrix& prototypes) {
  const Matrix cos = cosine_matrix(features, prototypes);
  QuantizedAssignment q;
  q.indices.resize(features.rows());
  q.quantized = Matrix(features.rows(), prototypes.cols());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t a = 1; a < prototypes.rows(); ++a) {
      if (cos(i, a) > cos(i, best)) best = a;
    }
    q.indices[i] = best;
    const auto src = prototypes.row(best);
    std::copy(src.begin(), src.end(), q.quantized.row(i).begin());
  }
  return q;
}

Matrix distance_matrix(const Matrix& prototypes) {
  Matrix d = cosine_matrix(prototypes, prototypes);
  // Exact symmetry and unit diagonal regardless of summation order.
  for (std::size_t i = 0; i < d.rows(); ++i) {
    d(i, i) = 1.0f;
    for (std::size_t j = i + 1; j < d.cols(); ++j) d(j, i) = d(i, j);
  }
  return d;
}

namespace {
constexpr char kBookMagic[4] = {'C', 'A', 'U', 'B'};
constexpr std::uint32_t kBookVersion = 1;
}  // namespace

void save_clusterbook(const Clusterbook& book, const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("cannot open '" + path.string() + "' for writing");
  detail::LeWriter wr(os);
  wr.put_bytes(kBookMagic, 4);
  wr.put(kBookVersion);
  wr.put(static_cast<std::uint32_t>(book.k()));
  wr.put(static_cast<std::uint32_t>(book.dim()));
  wr.put(book.tau_mod);
  wr.put_string(book.builder);
  wr.put(book.seed);
  wr.put_array(std::span<const float>(book.prototypes.data()));
  if (!wr.ok()) throw io_error("write failed for '" + path.string() + "'");
}

Clusterbook load_clusterbook(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open '" + path.string() + "' for reading");
  detail::LeReader rd(is);
  char magic[4] = {};
  if (!rd.get_bytes(magic, 4)) throw FormatError(FormatFault::Truncated, path.string());
  if (!std::equal(magic, magic + 4, kBookMagic)) throw FormatError(FormatFault::BadMagic, path.string());
  std::uint32_t version = 0, k = 0, c = 0;
  if (!rd.get(version)) throw FormatError(FormatFault::Truncated, path.string());
  if (version != kBookVersion) throw FormatError(FormatFault::VersionMismatch, path.string());
  Clusterbook book;
  if (!rd.get(k) || !rd.get(c) || !rd.get(book.tau_mod) || !rd.get_string(book.builder) || !rd.get(book.seed)) {
    throw FormatError(FormatFault::Truncated, path.string());
  }
  std::vector<float> data;
  if (!rd.get_array(data, std::size_t{k} * c)) throw FormatError(FormatFault::Truncated, path.string());
  book.prototypes = Matrix(k, c, std::move(data));
  book.distances = distance_matrix(book.prototypes);
  return book;
}

}  // namespace cause

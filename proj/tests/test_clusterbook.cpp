#include "doctest.h"

#include <cmath>
#include <fstream>
#include <map>

#include "cause/clusterbook.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cause;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = static_cast<float>(rng.normal());
  return m;
}

bool near_clamp_boundary(const Matrix& t, const Matrix& m) {
  const Matrix cs = cosine_matrix(t, m);
  for (float v : cs.data()) {
    if (std::abs(v) < 1e-3f) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("affinity of two identical features") {
  const AffinityStats g = affinity(Matrix(2, 3, {1, 0, 0, 1, 0, 0}));
  CHECK(g.adjacency == Matrix(2, 2, {0, 1, 1, 0}));
  CHECK(g.degree == std::vector<double>{1.0, 1.0});
  CHECK(g.edges == doctest::Approx(1.0));
}

TEST_CASE("orthogonal features form a degenerate graph") {
  try {
    modularity(Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Matrix(2, 3, 1.0f));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("affinity matches the clamped pairwise cosine") {
  Rng rng(2, "aff");
  const Matrix t = random_matrix(10, 8, rng);
  const AffinityStats g = affinity(t);
  const auto tt = oracle::to_mat(t);
  double two_e = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    double d = 0;
    for (std::size_t j = 0; j < 10; ++j) {
      const double want = i == j ? 0.0 : std::max(0.0, oracle::cosine(tt[i], tt[j]));
      CHECK(g.adjacency(i, j) == doctest::Approx(want).epsilon(1e-6).scale(1.0));
      d += want;
    }
    CHECK(g.degree[i] == doctest::Approx(d).epsilon(1e-6));
    two_e += d;
  }
  CHECK(2 * g.edges == doctest::Approx(two_e).epsilon(1e-6));
}

TEST_CASE("constant assignment has zero modularity") {
  Rng rng(4, "c");
  const Matrix t = random_matrix(12, 5, rng);
  const AffinityStats g = affinity(t);
  for (auto form : {ModularityForm::Tanh, ModularityForm::Linear}) {
    ModularityOptions o;
    o.form = form;
    CHECK(std::abs(modularity_from_assignment(g, Matrix(12, 4, 0.3f), o)) < 1e-9);
  }
}

TEST_CASE("two disconnected cliques under hard assignment") {
  // Binary graph {0,1} and {2,3}; one-hot C in the linear form is the delta form.
  AffinityStats g;
  g.adjacency = Matrix(4, 4, {0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0});
  g.degree = {1, 1, 1, 1};
  g.edges = 2;
  const Matrix hard(4, 2, {1, 0, 1, 0, 0, 1, 0, 1});
  ModularityOptions o;
  o.form = ModularityForm::Linear;
  o.zero_diagonal = false;
  const double h = modularity_from_assignment(g, hard, o);
  const double want = oracle::modularity_delta(oracle::to_mat(g.adjacency), {0, 0, 1, 1});
  CHECK(want == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(h == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("trace form equals the naive double sum") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, "naive");
    const Matrix t = random_matrix(12, 6, rng);
    const Matrix m = random_matrix(5, 6, rng);
    CHECK(modularity(t, m) == doctest::Approx(oracle::modularity_naive(oracle::to_mat(t), oracle::to_mat(m), 0.1))
                                  .epsilon(1e-6).scale(1.0));
    ModularityOptions lin;
    lin.form = ModularityForm::Linear;
    CHECK(modularity(t, m, lin) ==
          doctest::Approx(oracle::modularity_naive(oracle::to_mat(t), oracle::to_mat(m), 0.1, false))
              .epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("gradient matches central differences") {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, "grad");
    const Matrix t = random_matrix(10, 6, rng);
    const Matrix m = random_matrix(4, 6, rng);
    if (near_clamp_boundary(t, m)) continue;
    const auto tt = oracle::to_mat(t);
    const auto fd = oracle::central_gradient(oracle::to_mat(m), [&](const oracle::Mat& mm) {
      return oracle::modularity_naive(tt, mm, 0.1);
    });
    CHECK(oracle::relative_error(oracle::to_mat(modularity_gradient(t, m)), fd) < 1e-3);
    ++checked;
  }
  CHECK(checked >= 5);
}

TEST_CASE("dead prototype gets a zero gradient row") {
  Rng rng(1, "dead");
  Matrix t(8, 4);
  for (auto& v : t.data()) v = static_cast<float>(std::abs(rng.normal()) + 0.1);
  Matrix m(3, 4);
  for (auto& v : m.data()) v = static_cast<float>(std::abs(rng.normal()) + 0.1);
  for (std::size_t q = 0; q < 4; ++q) m(2, q) = -1.0f;
  const Matrix g = modularity_gradient(t, m);
  for (std::size_t q = 0; q < 4; ++q) CHECK(g(2, q) == 0.0f);
}

TEST_CASE("small-step ascent increases H") {
  Rng rng(11, "asc");
  const Matrix t = random_matrix(30, 8, rng);
  Matrix m = random_matrix(6, 8, rng);
  AdamState st(m);
  int up = 0;
  double prev = modularity(t, m);
  for (int s = 0; s < 20; ++s) {
    Matrix g = modularity_gradient(t, m);
    for (auto& v : g.data()) v = -v;
    adam_step(m, g, st, 1e-3);
    const double now = modularity(t, m);
    up += now > prev;
    prev = now;
  }
  CHECK(up >= 18);
}

TEST_CASE("fitted book recovers well separated prototypes") {
  SynthSpec spec;
  spec.n_classes = 4;
  spec.subconcepts_per_class = 1;
  spec.c = 16;
  spec.noise_sigma = 0.02;
  spec.cross_class_cos = 0.0;
  const SynthWorld w = make_synth_world(spec);
  std::vector<FeatureRecord> recs;
  std::vector<std::vector<std::size_t>> truth;
  for (std::size_t i = 0; i < 30; ++i) {
    auto img = make_synth_image(spec, w, i);
    recs.push_back(img.record);
    truth.push_back(img.patch_prototype);
  }
  BookFitOptions o;
  o.k = 8;
  BookFitReport rep;
  const Clusterbook book = fit_clusterbook(recs, o, &rep);
  CHECK(rep.records_used == 30);
  CHECK(book.k() == 8);
  // purity: each concept's majority prototype
  std::map<std::size_t, std::map<std::size_t, std::size_t>> counts;
  std::size_t total = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto q = vector_quantize(recs[i].features, book);
    for (std::size_t p = 0; p < q.indices.size(); ++p) counts[q.indices[p]][truth[i][p]] += 1;
    total += q.indices.size();
  }
  std::size_t majority = 0;
  for (const auto& [concept_id, by_proto] : counts) {
    std::size_t best = 0;
    for (const auto& [proto, n] : by_proto) best = std::max(best, n);
    majority += best;
  }
  CHECK(double(majority) / double(total) >= 0.95);
  for (std::size_t a = 0; a < book.k(); ++a) CHECK(norm(book.prototypes.row(a)) > 1e-8);
}

TEST_CASE("identical features quantize to one concept") {
  std::vector<FeatureRecord> recs;
  for (int i = 0; i < 3; ++i) {
    FeatureRecord r;
    r.image_id = "r" + std::to_string(i);
    r.h = 2;
    r.w = 2;
    r.c = 3;
    r.features = Matrix(4, 3);
    for (std::size_t p = 0; p < 4; ++p) {
      r.features(p, 0) = 0.6f;
      r.features(p, 1) = 0.8f;
    }
    recs.push_back(r);
  }
  BookFitOptions o;
  o.k = 6;
  const Clusterbook book = fit_clusterbook(recs, o);
  const auto first = vector_quantize(recs[0].features, book).indices[0];
  for (const auto& r : recs) {
    for (auto idx : vector_quantize(r.features, book).indices) CHECK(idx == first);
  }
}

TEST_CASE("degenerate records are skipped and all-degenerate fails") {
  FeatureRecord ortho;
  ortho.image_id = "ortho";
  ortho.h = 1;
  ortho.w = 3;
  ortho.c = 3;
  ortho.features = Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  FeatureRecord ok = ortho;
  ok.image_id = "ok";
  ok.features = Matrix(3, 3, {1, 0.2f, 0, 1, 0, 0.1f, 0.9f, 0.1f, 0.1f});
  BookFitOptions o;
  o.k = 2;
  BookFitReport rep;
  std::vector<FeatureRecord> mixed{ortho, ok};
  fit_clusterbook(mixed, o, &rep);
  CHECK(rep.records_skipped == 1);
  CHECK(rep.records_used == 1);
  std::vector<FeatureRecord> bad{ortho};
  try {
    fit_clusterbook(bad, o);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
  o.k = 1;
  CHECK_THROWS_AS(fit_clusterbook(mixed, o), Error);
}

TEST_CASE("kmeans++ book recovers distinct values exactly") {
  FeatureRecord r;
  r.image_id = "x";
  r.h = 2;
  r.w = 3;
  r.c = 3;
  r.features = Matrix(6, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::vector<FeatureRecord> recs{r};
  std::vector<double> trace;
  const Clusterbook book = fit_clusterbook_kmeanspp(recs, 3, 10, 0, &trace);
  CHECK(book.builder == "kmeanspp");
  CHECK(trace.back() == doctest::Approx(0.0).scale(1.0));
  for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-12);
  CHECK_THROWS_AS(fit_clusterbook_kmeanspp(recs, 7, 10, 0), Error);
}

TEST_CASE("vector quantization") {
  Rng rng(8, "vq");
  const Matrix m = random_matrix(7, 5, rng);
  Matrix t(1, 5);
  std::copy(m.row(3).begin(), m.row(3).end(), t.row(0).begin());
  CHECK(vector_quantize(t, m).indices[0] == 3);

  const Matrix feats = random_matrix(50, 5, rng);
  const auto q = vector_quantize(feats, m);
  const auto ff = oracle::to_mat(feats), mm = oracle::to_mat(m);
  for (std::size_t i = 0; i < 50; ++i) {
    std::size_t best = 0;
    for (std::size_t a = 1; a < 7; ++a) {
      if (oracle::cosine(ff[i], mm[a]) > oracle::cosine(ff[i], mm[best])) best = a;
    }
    CHECK(q.indices[i] == best);
    CHECK(std::equal(q.quantized.row(i).begin(), q.quantized.row(i).end(), m.row(best).begin()));
  }
  CHECK(vector_quantize(q.quantized, m).indices == q.indices);

  Matrix scaled = feats;
  for (std::size_t i = 0; i < 50; ++i) {
    for (auto& v : scaled.row(i)) v *= static_cast<float>(0.5 + i);
  }
  CHECK(vector_quantize(scaled, m).indices == q.indices);

  Matrix tie(2, 2, {1, 0, 1, 0});
  CHECK(vector_quantize(Matrix(1, 2, {1, 0}), tie).indices[0] == 0);
}

TEST_CASE("distance matrix") {
  Rng rng(6, "dm");
  const Matrix m = random_matrix(9, 4, rng);
  const Matrix d = distance_matrix(m);
  const auto mm = oracle::to_mat(m);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(d(i, i) == doctest::Approx(1.0).epsilon(1e-6));
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(d(i, j) == d(j, i));
      CHECK(d(i, j) == doctest::Approx(oracle::cosine(mm[i], mm[j])).epsilon(1e-6).scale(1.0));
    }
  }
  Matrix scaled = m;
  for (auto& v : scaled.row(2)) v *= 3.0f;
  const Matrix d2 = distance_matrix(scaled);
  for (std::size_t j = 0; j < 9; ++j) CHECK(d2(2, j) == doctest::Approx(d(2, j)).epsilon(1e-6));
}

TEST_CASE("clusterbook file round trip") {
  TempDir dir;
  Rng rng(3, "io");
  Clusterbook b;
  b.prototypes = normalize_rows(random_matrix(5, 4, rng));
  b.distances = distance_matrix(b.prototypes);
  b.tau_mod = 0.2;
  b.builder = "kmeanspp";
  b.seed = 77;
  save_clusterbook(b, dir.path() / "b.causebook");
  const Clusterbook l = load_clusterbook(dir.path() / "b.causebook");
  CHECK(l.prototypes == b.prototypes);
  CHECK(l.distances == b.distances);
  CHECK(l.tau_mod == 0.2);
  CHECK(l.builder == "kmeanspp");
  CHECK(l.seed == 77);
  {
    std::ofstream out(dir.path() / "bad.causebook", std::ios::binary);
    out << "NOPE0000";
  }
  CHECK_THROWS_AS(load_clusterbook(dir.path() / "bad.causebook"), Error);
}

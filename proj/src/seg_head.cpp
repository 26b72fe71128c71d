#include "cause/seg_head.hpp"

#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "cause/error.hpp"
#include "cause/feature_io.hpp"

namespace cause {

const char* HeadParams::tensor_name(std::size_t i) {
  static constexpr const char* kNames[kTensors] = {"w1", "b1", "w2", "b2", "wp", "bp"};
  return i < kTensors ? kNames[i] : "?";
}

MlpHead zero_head(std::size_t c, std::size_t r) {
  if (c == 0 || r == 0) throw validation_error("head dims must be >= 1");
  MlpHead h;
  h.c = c;
  h.r = r;
  h.params.w1 = Matrix(c, c);
  h.params.b1 = Matrix(1, c);
  h.params.w2 = Matrix(c, r);
  h.params.b2 = Matrix(1, r);
  h.params.wp = Matrix(r, r);
  h.params.bp = Matrix(1, r);
  return h;
}

MlpHead init_head(std::size_t c, std::size_t r, std::uint64_t seed) {
  MlpHead h = zero_head(c, r);
  Rng rng(seed, "head.init");
  auto fill = [&](Matrix& w) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  };
  fill(h.params.w1);
  fill(h.params.w2);
  fill(h.params.wp);
  return h;
}

namespace {

void add_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias(0, j);
  }
}

Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) acc[j] += row[j];
  }
  for (std::size_t j = 0; j < acc.size(); ++j) out(0, j) = static_cast<float>(acc[j]);
  return out;
}

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace

HeadOutput head_forward(const Matrix& features, const MlpHead& head, HeadMode mode) {
  if (features.cols() != head.c) {
    throw validation_error("head_forward: feature dim " + std::to_string(features.cols()) + " != head input " +
                           std::to_string(head.c));
  }
  if (!all_finite(features)) throw numeric_error("head_forward: non-finite input");
  HeadOutput out;
  out.cache.input = features;
  out.cache.pre_activation = matmul(features, head.params.w1);
  add_bias(out.cache.pre_activation, head.params.b1);
  out.cache.hidden = out.cache.pre_activation;
  if (head.activation == Activation::Relu) {
    for (auto& v : out.cache.hidden.data()) v = std::max(v, 0.0f);
  }
  out.y = matmul(out.cache.hidden, head.params.w2);
  add_bias(out.y, head.params.b2);
  out.cache.output = out.y;
  if (mode == HeadMode::Train) {
    out.projected = matmul(out.y, head.params.wp);
    add_bias(out.projected, head.params.bp);
  }
  return out;
}

HeadGradients head_backward(const MlpHead& head, const ForwardCache& cache, const Matrix& grad_projected,
                            const Matrix& grad_y) {
  const std::size_t n = cache.input.rows();
  HeadGradients g;
  g.params = zero_head(head.c, head.r).params;

  Matrix dy(n, head.r);
  if (!grad_projected.empty()) {
    if (grad_projected.rows() != n || grad_projected.cols() != head.r) {
      throw validation_error("head_backward: projected gradient shape mismatch");
    }
    g.params.wp = matmul_at(cache.output, grad_projected);
    g.params.bp = column_sums(grad_projected);
    dy = matmul_bt(grad_projected, head.params.wp);
  }
  if (!grad_y.empty()) {
    if (grad_y.rows() != n || grad_y.cols() != head.r) throw validation_error("head_backward: output gradient shape mismatch");
    add_into(dy, grad_y);
  }

  g.params.w2 = matmul_at(cache.hidden, dy);
  g.params.b2 = column_sums(dy);
  Matrix dpre = matmul_bt(dy, head.params.w2);
  if (head.activation == Activation::Relu) {
    for (std::size_t i = 0; i < dpre.size(); ++i) {
      if (!(cache.pre_activation.data()[i] > 0.0f)) dpre.data()[i] = 0.0f;
    }
  }
  g.params.w1 = matmul_at(cache.input, dpre);
  g.params.b1 = column_sums(dpre);
  g.input = matmul_bt(dpre, head.params.w1);
  return g;
}

void ema_update(TeacherHead& teacher, const MlpHead& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw validation_error("ema_update: lambda must lie in [0,1]");
  auto dst = teacher.head.params.tensors();
  const auto src = student.params.tensors();
  for (std::size_t t = 0; t < HeadParams::kTensors; ++t) {
    if (!dst[t]->same_shape(*src[t])) throw validation_error("ema_update: parameter shape mismatch");
    auto& d = dst[t]->data();
    const auto& s = src[t]->data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = static_cast<float>(lambda * d[i] + (1.0 - lambda) * s[i]);
    }
  }
}

double parameter_distance_sq(const HeadParams& a, const HeadParams& b) {
  double s = 0.0;
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t t = 0; t < HeadParams::kTensors; ++t) {
    for (std::size_t i = 0; i < ta[t]->size(); ++i) {
      const double d = static_cast<double>(ta[t]->data()[i]) - tb[t]->data()[i];
      s += d * d;
    }
  }
  return s;
}

HeadOptimizer::HeadOptimizer(const MlpHead& head, double lr_) : lr(lr_) {
  const auto ts = head.params.tensors();
  for (std::size_t t = 0; t < HeadParams::kTensors; ++t) states[t] = AdamState(*ts[t]);
}

void HeadOptimizer::step(MlpHead& head, const HeadParams& grads) {
  auto ps = head.params.tensors();
  const auto gs = grads.tensors();
  for (std::size_t t = 0; t < HeadParams::kTensors; ++t) adam_step(*ps[t], *gs[t], states[t], lr);
}

namespace {

constexpr char kHeadMagic[4] = {'C', 'A', 'U', 'H'};
constexpr std::uint32_t kHeadVersion = 1;

void put_params(detail::LeWriter& wr, const HeadParams& p) {
  for (const Matrix* m : p.tensors()) wr.put_array(std::span<const float>(m->data()));
}

bool get_params(detail::LeReader& rd, HeadParams& p) {
  for (Matrix* m : p.tensors()) {
    std::vector<float> data;
    if (!rd.get_array(data, m->size())) return false;
    *m = Matrix(m->rows(), m->cols(), std::move(data));
  }
  return true;
}

}  // namespace

void save_heads(const MlpHead& student, const TeacherHead& teacher, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("cannot open '" + path.string() + "' for writing");
  detail::LeWriter wr(os);
  wr.put_bytes(kHeadMagic, 4);
  wr.put(kHeadVersion);
  wr.put(static_cast<std::uint32_t>(student.c));
  wr.put(static_cast<std::uint32_t>(student.r));
  wr.put(static_cast<std::uint8_t>(student.activation == Activation::Relu ? 0 : 1));
  wr.put(teacher.lambda);
  put_params(wr, student.params);
  put_params(wr, teacher.head.params);
  if (!wr.ok()) throw io_error("write failed for '" + path.string() + "'");
}

void load_heads(const std::filesystem::path& path, MlpHead& student, TeacherHead& teacher) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open '" + path.string() + "' for reading");
  detail::LeReader rd(is);
  char magic[4] = {};
  if (!rd.get_bytes(magic, 4)) throw FormatError(FormatFault::Truncated, path.string());
  if (!std::equal(magic, magic + 4, kHeadMagic)) throw FormatError(FormatFault::BadMagic, path.string());
  std::uint32_t version = 0, c = 0, r = 0;
  std::uint8_t act = 0;
  double lambda = 0.0;
  if (!rd.get(version)) throw FormatError(FormatFault::Truncated, path.string());
  if (version != kHeadVersion) throw FormatError(FormatFault::VersionMismatch, path.string());
  if (!rd.get(c) || !rd.get(r) || !rd.get(act) || !rd.get(lambda)) throw FormatError(FormatFault::Truncated, path.string());
  if (c == 0 || r == 0) throw FormatError(FormatFault::DimMismatch, path.string());
  student = zero_head(c, r);
  student.activation = act == 0 ? Activation::Relu : Activation::Identity;
  teacher.head = student;
  teacher.lambda = lambda;
  if (!get_params(rd, student.params) || !get_params(rd, teacher.head.params)) {
    throw FormatError(FormatFault::Truncated, path.string());
  }
}

}  // namespace cause

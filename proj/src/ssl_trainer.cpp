#include "cause/ssl_trainer.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace cause {

void check_train_config(const TrainConfig& cfg) {
  if (!(cfg.phi_neg >= -1.0 && cfg.phi_neg < cfg.phi_pos && cfg.phi_pos <= 1.0)) {
    throw validation_error("train config: need -1 <= phi_neg < phi_pos <= 1");
  }
  if (!(cfg.tau_nce > 0.0)) throw validation_error("train config: tau_nce must be > 0");
  if (!(cfg.lr > 0.0)) throw validation_error("train config: lr must be > 0");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw validation_error("train config: lambda must lie in [0,1]");
  if (cfg.epochs == 0) throw validation_error("train config: epochs must be >= 1");
  if (cfg.bank_capacity == 0) throw validation_error("train config: bank_capacity must be >= 1");
  if (cfg.window == 0 || cfg.stride == 0) throw validation_error("train config: window and stride must be >= 1");
}

TrainConfig parse_train_config(std::string_view json_text, const TrainConfig& base) {
  TrainConfig cfg = base;
  try {
    const auto j = nlohmann::json::parse(json_text);
    cfg.phi_pos = j.value("phi_pos", cfg.phi_pos);
    cfg.phi_neg = j.value("phi_neg", cfg.phi_neg);
    cfg.tau_nce = j.value("tau_nce", cfg.tau_nce);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.bank_capacity = j.value("bank_capacity", cfg.bank_capacity);
    cfg.window = j.value("window", cfg.window);
    cfg.stride = j.value("stride", cfg.stride);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("train config: ") + e.what());
  }
  check_train_config(cfg);
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot read train config '" + path.string() + "'");
  std::ostringstream text;
  text << is.rdbuf();
  return parse_train_config(text.str());
}

std::string train_config_json(const TrainConfig& cfg) {
  nlohmann::json j = {{"phi_pos", cfg.phi_pos}, {"phi_neg", cfg.phi_neg},     {"tau_nce", cfg.tau_nce},
                      {"lr", cfg.lr},           {"lambda", cfg.lambda},       {"epochs", cfg.epochs},
                      {"bank_capacity", cfg.bank_capacity}, {"window", cfg.window}, {"stride", cfg.stride},
                      {"seed", cfg.seed}};
  return j.dump(2);
}

std::vector<std::size_t> sample_anchors(std::size_t h, std::size_t w, std::size_t window, std::size_t stride,
                                        Rng& rng) {
  if (window == 0 || stride == 0) throw validation_error("sample_anchors: window and stride must be >= 1");
  if (h < window || w < window) {
    throw validation_error("sample_anchors: grid " + std::to_string(h) + "x" + std::to_string(w) +
                           " is smaller than the " + std::to_string(window) + "x" + std::to_string(window) + " window");
  }
  std::vector<std::size_t> out;
  for (std::size_t y0 = 0; y0 + window <= h; y0 += stride) {
    for (std::size_t x0 = 0; x0 + window <= w; x0 += stride) {
      const auto cell = static_cast<std::size_t>(rng.below(window * window));
      out.push_back((y0 + cell / window) * w + x0 + cell % window);
    }
  }
  return out;
}

AnchorSelection select_pos_neg(std::size_t anchor_position, std::size_t anchor_concept,
                               std::span<const std::size_t> batch_concepts, const Matrix& distances, double phi_pos,
                               double phi_neg) {
  if (anchor_concept >= distances.rows()) throw validation_error("select_pos_neg: anchor concept out of range");
  AnchorSelection sel;
  sel.position = anchor_position;
  sel.concept_id = anchor_concept;
  for (std::size_t j = 0; j < batch_concepts.size(); ++j) {
    if (j == anchor_position) continue;
    const std::size_t id = batch_concepts[j];
    if (id >= distances.cols()) throw validation_error("select_pos_neg: concept id out of range");
    const double d = distances(anchor_concept, id);
    if (d > phi_pos) {
      sel.positives.push_back({Source::Batch, id, j});
    } else if (d < phi_neg) {
      sel.negatives.push_back({Source::Batch, id, j});
    }
  }
  return sel;
}

namespace {

struct UnitView {
  std::vector<double> unit;
  double norm = 0.0;
};

UnitView unit_of(std::span<const float> v) {
  UnitView u;
  u.norm = cause::norm(v);
  u.unit.resize(v.size());
  if (u.norm > 0.0) {
    for (std::size_t i = 0; i < v.size(); ++i) u.unit[i] = v[i] / u.norm;
  }
  return u;
}

double cos_with(const UnitView& a, std::span<const float> b) {
  double d = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    d += a.unit[i] * b[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return nb > 0.0 ? d / std::sqrt(nb) : 0.0;
}

}  // namespace

InfoNceResult infonce(std::span<const float> anchor, const std::vector<std::span<const float>>& positives,
                      const std::vector<std::span<const float>>& negatives, double tau) {
  InfoNceResult res;
  if (positives.empty() || negatives.empty()) return res;
  if (!(tau > 0.0)) throw validation_error("infonce: tau must be > 0");
  const UnitView y = unit_of(anchor);
  if (!(y.norm > 1e-12)) return res;

  const std::size_t np = positives.size(), nn = negatives.size();
  std::vector<double> sp(np), sn(nn);
  double smax = -1.0;
  for (std::size_t j = 0; j < np; ++j) smax = std::max(smax, sp[j] = cos_with(y, positives[j]));
  for (std::size_t n = 0; n < nn; ++n) smax = std::max(smax, sn[n] = cos_with(y, negatives[n]));

  // Shifted exponentials keep every term in range for small tau.
  std::vector<double> ep(np), en(nn);
  double neg_sum = 0.0;
  for (std::size_t n = 0; n < nn; ++n) neg_sum += (en[n] = std::exp((sn[n] - smax) / tau));
  std::vector<double> p(np), denom(np);
  double p_sum = 0.0;
  for (std::size_t j = 0; j < np; ++j) {
    ep[j] = std::exp((sp[j] - smax) / tau);
    denom[j] = ep[j] + neg_sum;
    p[j] = ep[j] / denom[j];
    p_sum += p[j];
  }
  res.usable = true;
  res.log_p = std::log(p_sum / static_cast<double>(np));

  // d log p / d s, then through s = <y/|y|, v/|v|>.
  std::vector<double> ds_pos(np), ds_neg(nn, 0.0);
  double neg_coeff = 0.0;
  for (std::size_t j = 0; j < np; ++j) {
    const double weight = p[j] / p_sum;  // d log(mean p) / d log p_j
    ds_pos[j] = weight * (1.0 - p[j]) / tau;
    neg_coeff += weight / denom[j];
  }
  for (std::size_t n = 0; n < nn; ++n) ds_neg[n] = -neg_coeff * en[n] / tau;

  const std::size_t d = anchor.size();
  std::vector<double> g(d, 0.0);
  double radial = 0.0;  // coefficient of y_hat
  auto accumulate = [&](std::span<const float> v, double coeff, double s) {
    if (coeff == 0.0) return;
    const double nv = cause::norm(v);
    if (!(nv > 0.0)) return;
    for (std::size_t i = 0; i < d; ++i) g[i] += coeff * v[i] / nv;
    radial += coeff * s;
  };
  for (std::size_t j = 0; j < np; ++j) accumulate(positives[j], ds_pos[j], sp[j]);
  for (std::size_t n = 0; n < nn; ++n) accumulate(negatives[n], ds_neg[n], sn[n]);
  res.grad.resize(d);
  for (std::size_t i = 0; i < d; ++i) res.grad[i] = (g[i] - radial * y.unit[i]) / y.norm;
  return res;
}

ConceptBank::ConceptBank(std::size_t concepts, std::size_t dim, std::size_t capacity)
    : dim_(dim), capacity_(capacity), slots_(concepts) {
  if (dim == 0) throw validation_error("ConceptBank: dim must be >= 1");
}

std::size_t ConceptBank::total() const {
  std::size_t t = 0;
  for (const auto& s : slots_) t += s.size() / dim_;
  return t;
}

void ConceptBank::update(const Matrix& features, std::span<const std::size_t> concept_ids, Rng& rng) {
  if (features.rows() != concept_ids.size()) throw validation_error("ConceptBank::update: id count != feature rows");
  if (features.cols() != dim_) throw validation_error("ConceptBank::update: feature dim mismatch");
  std::vector<std::vector<std::size_t>> members(slots_.size());
  for (std::size_t i = 0; i < concept_ids.size(); ++i) {
    if (concept_ids[i] >= slots_.size()) throw validation_error("ConceptBank::update: concept id out of range");
    members[concept_ids[i]].push_back(i);
  }
  for (std::size_t id = 0; id < slots_.size(); ++id) {
    auto& slot = slots_[id];
    const std::size_t occ = slot.size() / dim_;
    if (occ > 0) {
      const auto drop = sample_without_replacement(occ, occ / 2, rng);
      std::vector<char> dropped(occ, 0);
      for (auto i : drop) dropped[i] = 1;
      std::vector<float> kept;
      kept.reserve(slot.size());
      for (std::size_t i = 0; i < occ; ++i) {
        if (!dropped[i]) kept.insert(kept.end(), slot.begin() + i * dim_, slot.begin() + (i + 1) * dim_);
      }
      slot = std::move(kept);
    }
    const auto& m = members[id];
    const auto picks = sample_without_replacement(m.size(), m.size() / 2, rng);
    for (auto pi : picks) {
      if (slot.size() / dim_ >= capacity_) break;
      const auto src = features.row(m[pi]);
      slot.insert(slot.end(), src.begin(), src.end());
    }
    assert(slot.size() / dim_ <= capacity_);
  }
}

SslTrainer::SslTrainer(const Clusterbook& book, MlpHead student, TeacherHead teacher, const TrainConfig& cfg)
    : book_(book),
      student_(std::move(student)),
      teacher_(std::move(teacher)),
      cfg_(cfg),
      optimizer_(student_, cfg.lr),
      bank_(book.k(), student_.r, cfg.bank_capacity),
      anchor_rng_(cfg.seed, "train.anchors"),
      bank_rng_(cfg.seed, "train.bank") {
  check_train_config(cfg_);
  teacher_.lambda = cfg_.lambda;
  if (student_.c != book.dim()) {
    throw validation_error("trainer: head input dim " + std::to_string(student_.c) + " != clusterbook dim " +
                           std::to_string(book.dim()));
  }
  if (teacher_.head.c != student_.c || teacher_.head.r != student_.r) {
    throw validation_error("trainer: teacher and student shapes differ");
  }
}

StepResult SslTrainer::update_student(const FeatureRecord& record, StepContext& ctx) {
  StepResult res;
  ctx.concepts = vector_quantize(record.features, book_).indices;
  const HeadOutput s_out = head_forward(record.features, student_, HeadMode::Train);
  ctx.teacher_projected = head_forward(record.features, teacher_.head, HeadMode::Train).projected;

  const auto anchors = sample_anchors(record.h, record.w, cfg_.window, cfg_.stride, anchor_rng_);
  res.anchors = anchors.size();

  const Matrix& D = book_.distances;
  const std::size_t r = student_.r;
  Matrix grad_z(record.features.rows(), r);
  std::vector<std::size_t> usable_positions;
  std::vector<std::vector<double>> grads;

  std::vector<std::span<const float>> pos, neg;
  for (const std::size_t a : anchors) {
    const std::size_t q = ctx.concepts[a];
    const AnchorSelection sel = select_pos_neg(a, q, ctx.concepts, D, cfg_.phi_pos, cfg_.phi_neg);
    pos.clear();
    neg.clear();
    for (const auto& cand : sel.positives) pos.push_back(ctx.teacher_projected.row(cand.index));
    for (const auto& cand : sel.negatives) neg.push_back(ctx.teacher_projected.row(cand.index));
    for (std::size_t m = 0; m < bank_.concepts(); ++m) {
      const std::size_t occ = bank_.occupancy(m);
      if (occ == 0) continue;
      const double d = D(q, m);
      auto* dst = d > cfg_.phi_pos ? &pos : (d < cfg_.phi_neg ? &neg : nullptr);
      if (!dst) continue;
      for (std::size_t s = 0; s < occ; ++s) dst->push_back(bank_.row(m, s));
    }
    InfoNceResult nce = infonce(s_out.projected.row(a), pos, neg, cfg_.tau_nce);
    if (!nce.usable) continue;
    res.usable += 1;
    res.loss_sum += -nce.log_p;
    usable_positions.push_back(a);
    grads.push_back(std::move(nce.grad));
  }

  if (res.usable == 0) return res;
  // Loss = mean(-log p) over usable anchors.
  const double scale = -1.0 / static_cast<double>(res.usable);
  for (std::size_t u = 0; u < usable_positions.size(); ++u) {
    auto row = grad_z.row(usable_positions[u]);
    for (std::size_t i = 0; i < r; ++i) row[i] += static_cast<float>(scale * grads[u][i]);
  }
  const HeadGradients hg = head_backward(student_, s_out.cache, grad_z);
  optimizer_.step(student_, hg.params);
  return res;
}

void SslTrainer::update_teacher() { ema_update(teacher_, student_, cfg_.lambda); }

void SslTrainer::update_bank(const StepContext& ctx) { bank_.update(ctx.teacher_projected, ctx.concepts, bank_rng_); }

StepResult SslTrainer::step(const FeatureRecord& record) {
  StepContext ctx;
  const StepResult res = update_student(record, ctx);
  update_teacher();
  update_bank(ctx);
  return res;
}

EpochStats SslTrainer::run_epoch(std::span<const FeatureRecord> records, std::size_t epoch) {
  EpochStats st;
  st.epoch = epoch;
  double loss = 0.0;
  for (const auto& rec : records) {
    if (rec.c != student_.c) throw validation_error("trainer: record '" + rec.image_id + "' has a different dim");
    StepResult r;
    try {
      r = step(rec);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) throw;
      st.records_skipped += 1;
      continue;
    }
    st.anchors += r.anchors;
    st.usable += r.usable;
    loss += r.loss_sum;
  }
  if (st.usable == 0) {
    throw numeric_error("trainer: zero usable anchors in epoch " + std::to_string(epoch) +
                        " (no anchor had both positives and negatives)");
  }
  st.mean_loss = loss / static_cast<double>(st.usable);
  st.usable_fraction = static_cast<double>(st.usable) / static_cast<double>(st.anchors);
  if (st.records_skipped > 0) std::cerr << "trainer: skipped " << st.records_skipped << " degenerate record(s)\n";
  return st;
}

TrainResult train(std::span<const FeatureRecord> records, const Clusterbook& book, MlpHead student,
                  TeacherHead teacher, const TrainConfig& cfg) {
  if (records.empty()) throw validation_error("train: empty training split");
  SslTrainer trainer(book, std::move(student), std::move(teacher), cfg);
  TrainResult out;
  for (std::size_t e = 0; e < cfg.epochs; ++e) out.trace.push_back(trainer.run_epoch(records, e));
  out.student = trainer.student();
  out.teacher = trainer.teacher();
  out.bank = trainer.bank();
  return out;
}

TrainResult train(const DatasetManifest& manifest, const Clusterbook& book, MlpHead student, TeacherHead teacher,
                  const TrainConfig& cfg) {
  if (manifest.feature_dim != book.dim()) throw validation_error("train: manifest and clusterbook dims differ");
  const auto records = load_records(manifest, Split::Train);
  return train(records, book, std::move(student), std::move(teacher), cfg);
}

void write_loss_trace(const std::vector<EpochStats>& trace, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot write '" + path.string() + "'");
  os << "epoch\tmean_loss\tusable_anchor_fraction\n";
  char buf[96];
  for (const auto& e : trace) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.9g\n", e.epoch, e.mean_loss, e.usable_fraction);
    os << buf;
  }
}

}  // namespace cause

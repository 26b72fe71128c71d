#include "cause/feature_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "json.hpp"

#include "binary_io.hpp"

namespace cause {

namespace fs = std::filesystem;
using detail::LeReader;
using detail::LeWriter;

const char* to_string(FormatFault f) {
  switch (f) {
    case FormatFault::BadMagic: return "bad magic";
    case FormatFault::VersionMismatch: return "version mismatch";
    case FormatFault::Truncated: return "truncated payload";
    case FormatFault::DimMismatch: return "dimension inconsistency";
  }
  return "format error";
}

void check_record(const FeatureRecord& r) {
  auto fail = [&](const std::string& why) {
    throw FormatError(FormatFault::DimMismatch, "record '" + r.image_id + "': " + why);
  };
  if (r.h == 0 || r.w == 0 || r.c == 0) fail("empty patch grid or feature dim");
  if (r.features.rows() != r.h * r.w) {
    fail("features have " + std::to_string(r.features.rows()) + " rows, expected h*w=" +
         std::to_string(r.h * r.w));
  }
  if (r.features.cols() != r.c) fail("features have " + std::to_string(r.features.cols()) + " cols, expected c");
  if (r.rgb) {
    if (r.rgb->height < r.h || r.rgb->width < r.w) fail("rgb smaller than the patch grid");
    if (r.rgb->pixels.size() != r.rgb->height * r.rgb->width * 3) fail("rgb payload size");
  }
  if (r.labels) {
    if (r.labels->height < r.h || r.labels->width < r.w) fail("labels smaller than the patch grid");
    if (r.labels->values.size() != r.labels->height * r.labels->width) fail("label payload size");
    if (r.rgb && (r.rgb->height != r.labels->height || r.rgb->width != r.labels->width)) {
      fail("rgb and labels differ in size");
    }
  }
}

namespace {

constexpr char kFeatMagic[4] = {'C', 'A', 'U', 'F'};
constexpr char kLabelMagic[4] = {'C', 'A', 'U', 'L'};

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("cannot open '" + path.string() + "' for writing");
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open '" + path.string() + "' for reading");
  return is;
}

void expect_magic(LeReader& rd, const char (&magic)[4], const fs::path& path) {
  char got[4] = {};
  if (!rd.get_bytes(got, 4)) throw FormatError(FormatFault::Truncated, path.string());
  if (!std::equal(got, got + 4, magic)) throw FormatError(FormatFault::BadMagic, path.string());
}

}  // namespace

void write_feature_file(const FeatureRecord& record, const fs::path& path) {
  check_record(record);
  auto os = open_out(path);
  LeWriter wr(os);
  wr.put_bytes(kFeatMagic, 4);
  wr.put(kFeatureFileVersion);
  wr.put(static_cast<std::uint32_t>(record.h));
  wr.put(static_cast<std::uint32_t>(record.w));
  wr.put(static_cast<std::uint32_t>(record.c));
  wr.put_string(record.image_id);
  wr.put_array(std::span<const float>(record.features.data()));
  wr.put(static_cast<std::uint8_t>(record.rgb.has_value()));
  if (record.rgb) {
    wr.put(static_cast<std::uint32_t>(record.rgb->height));
    wr.put(static_cast<std::uint32_t>(record.rgb->width));
    wr.put_array(std::span<const std::uint8_t>(record.rgb->pixels));
  }
  wr.put(static_cast<std::uint8_t>(record.labels.has_value()));
  if (record.labels) {
    wr.put(static_cast<std::uint32_t>(record.labels->height));
    wr.put(static_cast<std::uint32_t>(record.labels->width));
    wr.put_array(std::span<const std::uint16_t>(record.labels->values));
  }
  if (!wr.ok()) throw io_error("write failed for '" + path.string() + "'");
}

FeatureRecord read_feature_file(const fs::path& path) {
  auto is = open_in(path);
  LeReader rd(is);
  expect_magic(rd, kFeatMagic, path);
  auto truncated = [&] { return FormatError(FormatFault::Truncated, path.string()); };

  std::uint32_t version = 0, h = 0, w = 0, c = 0;
  if (!rd.get(version)) throw truncated();
  if (version != kFeatureFileVersion) {
    throw FormatError(FormatFault::VersionMismatch,
                      path.string() + " has version " + std::to_string(version));
  }
  FeatureRecord r;
  if (!rd.get(h) || !rd.get(w) || !rd.get(c) || !rd.get_string(r.image_id)) throw truncated();
  if (h == 0 || w == 0 || c == 0) throw FormatError(FormatFault::DimMismatch, path.string() + ": zero dimension");
  r.h = h;
  r.w = w;
  r.c = c;
  std::vector<float> feats;
  if (!rd.get_array(feats, std::size_t{h} * w * c)) throw truncated();
  r.features = Matrix(std::size_t{h} * w, c, std::move(feats));

  std::uint8_t flag = 0;
  if (!rd.get(flag)) throw truncated();
  if (flag) {
    std::uint32_t H = 0, W = 0;
    if (!rd.get(H) || !rd.get(W)) throw truncated();
    RgbImage img;
    img.height = H;
    img.width = W;
    if (!rd.get_array(img.pixels, std::size_t{H} * W * 3)) throw truncated();
    r.rgb = std::move(img);
  }
  if (!rd.get(flag)) throw truncated();
  if (flag) {
    std::uint32_t H = 0, W = 0;
    if (!rd.get(H) || !rd.get(W)) throw truncated();
    LabelMap lm;
    lm.height = H;
    lm.width = W;
    if (!rd.get_array(lm.values, std::size_t{H} * W)) throw truncated();
    r.labels = std::move(lm);
  }
  check_record(r);
  return r;
}

void write_label_file(const LabelMap& labels, const fs::path& path) {
  if (labels.values.size() != labels.height * labels.width) {
    throw FormatError(FormatFault::DimMismatch, "label map payload size");
  }
  auto os = open_out(path);
  LeWriter wr(os);
  wr.put_bytes(kLabelMagic, 4);
  wr.put(std::uint32_t{1});
  wr.put(static_cast<std::uint32_t>(labels.height));
  wr.put(static_cast<std::uint32_t>(labels.width));
  wr.put_array(std::span<const std::uint16_t>(labels.values));
  if (!wr.ok()) throw io_error("write failed for '" + path.string() + "'");
}

LabelMap read_label_file(const fs::path& path) {
  auto is = open_in(path);
  LeReader rd(is);
  expect_magic(rd, kLabelMagic, path);
  std::uint32_t version = 0, H = 0, W = 0;
  if (!rd.get(version)) throw FormatError(FormatFault::Truncated, path.string());
  if (version != 1) throw FormatError(FormatFault::VersionMismatch, path.string());
  if (!rd.get(H) || !rd.get(W)) throw FormatError(FormatFault::Truncated, path.string());
  LabelMap lm;
  lm.height = H;
  lm.width = W;
  if (!rd.get_array(lm.values, std::size_t{H} * W)) throw FormatError(FormatFault::Truncated, path.string());
  return lm;
}

// ---------------------------------------------------------------------------
// Manifest

fs::path DatasetManifest::resolve(const ManifestEntry& e) const {
  fs::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<fs::path> DatasetManifest::paths(Split split) const {
  std::vector<fs::path> out;
  for (const auto& e : records) {
    if (e.split == split) out.push_back(resolve(e));
  }
  return out;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot read manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.classes = j.at("classes").get<std::size_t>();
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    const auto& grid = j.at("patch_grid");
    m.patch_h = grid.at(0).get<std::size_t>();
    m.patch_w = grid.at(1).get<std::size_t>();
    for (const auto& rec : j.at("records")) {
      ManifestEntry e;
      e.path = rec.at("path").get<std::string>();
      const auto split = rec.at("split").get<std::string>();
      if (split == "train") {
        e.split = Split::Train;
      } else if (split == "val") {
        e.split = Split::Val;
      } else {
        throw validation_error("manifest record '" + e.path + "' has unknown split '" + split + "'");
      }
      m.records.push_back(std::move(e));
    }
    m.base_dir = path.parent_path();
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw io_error("unreadable manifest '" + path.string() + "': " + ex.what());
  }
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  nlohmann::json j;
  j["name"] = m.name;
  j["classes"] = m.classes;
  j["feature_dim"] = m.feature_dim;
  j["patch_grid"] = {m.patch_h, m.patch_w};
  j["records"] = nlohmann::json::array();
  for (const auto& e : m.records) {
    j["records"].push_back({{"path", e.path}, {"split", e.split == Split::Train ? "train" : "val"}});
  }
  std::ofstream os(path);
  if (!os) throw io_error("cannot write manifest '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

std::vector<std::string> validate_manifest(const DatasetManifest& m) {
  std::vector<std::string> failures;
  if (m.classes < 2) failures.push_back("manifest declares fewer than 2 classes");
  if (m.records.empty()) failures.push_back("manifest has no records");
  for (const auto& e : m.records) {
    const auto p = m.resolve(e);
    if (!fs::exists(p)) {
      failures.push_back(p.string() + ": file does not exist");
      continue;
    }
    FeatureRecord r;
    try {
      r = read_feature_file(p);
    } catch (const Error& ex) {
      failures.push_back(p.string() + ": " + ex.what());
      continue;
    }
    if (r.c != m.feature_dim) {
      failures.push_back(p.string() + ": feature dimension " + std::to_string(r.c) +
                         " != manifest feature_dim " + std::to_string(m.feature_dim));
    }
    if (r.h != m.patch_h || r.w != m.patch_w) {
      failures.push_back(p.string() + ": patch grid " + std::to_string(r.h) + "x" + std::to_string(r.w) +
                         " != manifest " + std::to_string(m.patch_h) + "x" + std::to_string(m.patch_w));
    }
    if (r.labels) {
      const bool bad = std::any_of(r.labels->values.begin(), r.labels->values.end(), [&](std::uint16_t v) {
        return v != kIgnoreLabel && v >= m.classes;
      });
      if (bad) failures.push_back(p.string() + ": label value outside [0, classes)");
    }
  }
  return failures;
}

// ---------------------------------------------------------------------------
// Synthetic data

void check_synth_spec(const SynthSpec& s) {
  if (s.n_classes < 1 || s.subconcepts_per_class < 1) throw validation_error("synth: need >= 1 class and sub-concept");
  if (s.c < 2) throw validation_error("synth: feature dim must be >= 2");
  if (s.grid_h == 0 || s.grid_w == 0) throw validation_error("synth: empty patch grid");
  if (s.n_images == 0 || s.n_val > s.n_images) throw validation_error("synth: n_val must be <= n_images > 0");
  if (!(s.noise_sigma >= 0.0)) throw validation_error("synth: noise_sigma must be >= 0");
  if (!(s.prototype_separation_deg >= 0.0 && s.prototype_separation_deg <= 90.0)) {
    throw validation_error("synth: prototype_separation_deg must lie in [0, 90]");
  }
  if (!(s.subconcept_angle_deg >= 0.0 && s.subconcept_angle_deg <= 90.0)) {
    throw validation_error("synth: subconcept_angle_deg must lie in [0, 90]");
  }
  if (!(s.cross_class_cos >= 0.0 && s.cross_class_cos < 1.0)) throw validation_error("synth: cross_class_cos must lie in [0, 1)");
  if (!(s.style_strength >= 0.0)) throw validation_error("synth: style_strength must be >= 0");
  if (s.style_axes == 0) throw validation_error("synth: style_axes must be >= 1");
  if (s.regions_per_image == 0 || s.pixel_scale == 0) throw validation_error("synth: regions and pixel_scale must be > 0");
  if (s.n_classes >= kIgnoreLabel) throw validation_error("synth: too many classes");
}

namespace {

std::vector<double> random_unit(std::size_t c, Rng& rng) {
  std::vector<double> v(c);
  double n = 0.0;
  while (n < 1e-6) {
    n = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      n += x * x;
    }
    n = std::sqrt(n);
  }
  for (auto& x : v) x /= n;
  return v;
}

double dotd(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// `count` orthonormal directions by Gram-Schmidt over Gaussian draws.
std::vector<std::vector<double>> orthonormal_set(std::size_t count, std::size_t c, Rng& rng) {
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    auto v = random_unit(c, rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double p = dotd(v, b);
        for (std::size_t i = 0; i < c; ++i) v[i] -= p * b[i];
      }
    }
    const double n = std::sqrt(dotd(v, v));
    if (n < 1e-3) continue;
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

std::array<std::uint8_t, 3> hue_color(double hue) {
  const double s = 0.8, v = 0.9;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  auto to8 = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  return {to8(r), to8(g), to8(b)};
}

}  // namespace

SynthWorld make_synth_world(const SynthSpec& spec) {
  check_synth_spec(spec);
  Rng rng(spec.seed, "synth.prototypes");
  const std::size_t n_proto = spec.n_classes * spec.subconcepts_per_class;
  const bool single = spec.subconcepts_per_class == 1;
  const std::size_t directions = n_proto + spec.style_axes;
  const double min_angle = spec.prototype_separation_deg * std::numbers::pi / 180.0;
  const double max_cos = std::cos(min_angle);

  std::vector<std::vector<double>> protos;
  std::vector<std::vector<double>> style_dirs;
  if (directions <= spec.c) {
    // Target Gram matrix: cos^2(angle) between sub-concepts of one class,
    // cross_class_cos between sub-concept s of class i and sub-concept s of
    // every class within cross_class_span of i (cyclically), zero elsewhere. Rows of its Cholesky factor
    // give coordinates, which are then placed on random orthonormal axes.
    const double theta = spec.subconcept_angle_deg * std::numbers::pi / 180.0;
    const double within = single ? 0.0 : std::cos(theta) * std::cos(theta);
    const std::size_t S = spec.subconcepts_per_class;
    Eigen::MatrixXd gram = Eigen::MatrixXd::Identity(n_proto, n_proto);
    for (std::size_t i = 0; i < n_proto; ++i) {
      for (std::size_t j = 0; j < n_proto; ++j) {
        if (i == j) continue;
        const std::size_t ci = i / S, cj = j / S;
        if (ci == cj) {
          gram(i, j) = within;
        } else if (i % S == j % S) {
          const std::size_t gap = (ci + spec.n_classes - cj) % spec.n_classes;
          if (std::min(gap, spec.n_classes - gap) > spec.cross_class_span) continue;
          gram(i, j) = spec.cross_class_cos;
        }
      }
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(gram);
    if (llt.info() != Eigen::Success) {
      throw validation_error("synth: sub-concept angle and cross_class_cos give no realizable prototype layout");
    }
    const Eigen::MatrixXd coords = llt.matrixL();
    const auto basis = orthonormal_set(n_proto + spec.style_axes, spec.c, rng);
    style_dirs.assign(basis.begin() + static_cast<std::ptrdiff_t>(n_proto), basis.end());
    for (std::size_t i = 0; i < n_proto; ++i) {
      std::vector<double> p(spec.c, 0.0);
      for (std::size_t a = 0; a <= i; ++a) {
        for (std::size_t k = 0; k < spec.c; ++k) p[k] += coords(i, a) * basis[a][k];
      }
      protos.push_back(std::move(p));
    }
  } else {
    // Too many directions for the structured layout: plain rejection sampling.
    constexpr std::size_t kMaxAttempts = 10000;
    while (protos.size() < n_proto) {
      std::size_t attempts = 0;
      for (;;) {
        auto v = random_unit(spec.c, rng);
        const bool ok = std::all_of(protos.begin(), protos.end(), [&](const auto& p) { return dotd(p, v) <= max_cos; });
        if (ok) {
          protos.push_back(std::move(v));
          break;
        }
        if (++attempts >= kMaxAttempts) {
          throw validation_error("synth: separation of " + std::to_string(spec.prototype_separation_deg) +
                                 " degrees unachievable for " + std::to_string(n_proto) + " prototypes in dimension " +
                                 std::to_string(spec.c));
        }
      }
    }
  }
  for (std::size_t i = 0; i < protos.size(); ++i) {
    for (std::size_t j = i + 1; j < protos.size(); ++j) {
      if (dotd(protos[i], protos[j]) > max_cos + 1e-12) {
        throw validation_error("synth: prototypes " + std::to_string(i) + " and " + std::to_string(j) +
                               " violate the minimum separation of " + std::to_string(spec.prototype_separation_deg) +
                               " degrees");
      }
    }
  }

  if (style_dirs.empty()) style_dirs = orthonormal_set(std::min(spec.style_axes, spec.c), spec.c, rng);

  SynthWorld world;
  world.style_axes = Matrix(style_dirs.size(), spec.c);
  for (std::size_t a = 0; a < style_dirs.size(); ++a) {
    for (std::size_t k = 0; k < spec.c; ++k) world.style_axes(a, k) = static_cast<float>(style_dirs[a][k]);
  }
  world.prototypes = Matrix(n_proto, spec.c);
  for (std::size_t i = 0; i < n_proto; ++i) {
    for (std::size_t k = 0; k < spec.c; ++k) world.prototypes(i, k) = static_cast<float>(protos[i][k]);
    world.prototype_class.push_back(i / spec.subconcepts_per_class);
  }
  for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
    world.class_colors.push_back(hue_color(static_cast<double>(cls) / static_cast<double>(spec.n_classes)));
  }
  return world;
}

SynthImage make_synth_image(const SynthSpec& spec, const SynthWorld& world, std::size_t index) {
  Rng rng(spec.seed, "synth.image." + std::to_string(index));
  const std::size_t h = spec.grid_h, w = spec.grid_w, c = spec.c;

  struct Seed {
    double y, x;
    std::size_t cls;
  };
  const std::size_t style = static_cast<std::size_t>(rng.below(2 * world.style_axes.rows()));
  const auto axis = world.style_axes.row(style / 2);
  const double shift = (style % 2 ? -1.0 : 1.0) * spec.style_strength;
  std::vector<Seed> seeds(spec.regions_per_image);
  for (auto& s : seeds) {
    s.y = rng.uniform(0.0, static_cast<double>(h));
    s.x = rng.uniform(0.0, static_cast<double>(w));
    s.cls = static_cast<std::size_t>(rng.below(spec.n_classes));
  }

  SynthImage img;
  img.patch_class.resize(h * w);
  img.patch_prototype.resize(h * w);
  img.style = style;
  FeatureRecord& r = img.record;
  r.image_id = spec.name + "_" + std::to_string(index);
  r.h = h;
  r.w = w;
  r.c = c;
  r.features = Matrix(h * w, c);

  std::vector<double> f(c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        const double d = (seeds[s].y - py) * (seeds[s].y - py) + (seeds[s].x - px) * (seeds[s].x - px);
        if (d < best_d) {
          best_d = d;
          best = s;
        }
      }
      const std::size_t p = y * w + x;
      const std::size_t cls = seeds[best].cls;
      const std::size_t proto = cls * spec.subconcepts_per_class +
                                static_cast<std::size_t>(rng.below(spec.subconcepts_per_class));
      img.patch_class[p] = cls;
      img.patch_prototype[p] = proto;
      double n2 = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        f[k] = world.prototypes(proto, k) + shift * axis[k] + spec.noise_sigma * rng.normal();
        n2 += f[k] * f[k];
      }
      const double n = std::sqrt(n2);
      for (std::size_t k = 0; k < c; ++k) r.features(p, k) = static_cast<float>(n > 0 ? f[k] / n : f[k]);
    }
  }

  const std::size_t H = h * spec.pixel_scale, W = w * spec.pixel_scale;
  LabelMap labels(H, W);
  RgbImage rgb(H, W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t cls = img.patch_class[(y / spec.pixel_scale) * w + x / spec.pixel_scale];
      labels.at(y, x) = static_cast<std::uint16_t>(cls);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = world.class_colors[cls][ch] + spec.rgb_noise * rng.normal();
        rgb.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  r.labels = std::move(labels);
  r.rgb = std::move(rgb);
  return img;
}

DatasetManifest generate_synthetic_dataset(const SynthSpec& spec, const fs::path& out_dir) {
  const SynthWorld world = make_synth_world(spec);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw io_error("cannot create '" + out_dir.string() + "': " + ec.message());

  DatasetManifest m;
  m.name = spec.name;
  m.classes = spec.n_classes;
  m.feature_dim = spec.c;
  m.patch_h = spec.grid_h;
  m.patch_w = spec.grid_w;
  m.base_dir = out_dir;
  const std::size_t n_train = spec.n_images - spec.n_val;
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    const SynthImage img = make_synth_image(spec, world, i);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.causefeat", i);
    write_feature_file(img.record, out_dir / name);
    m.records.push_back({name, i < n_train ? Split::Train : Split::Val});
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

std::vector<std::uint16_t> downsample_labels(const LabelMap& labels, std::size_t h, std::size_t w) {
  std::vector<std::vector<std::size_t>> counts(h * w);
  std::uint16_t max_label = 0;
  for (auto v : labels.values) {
    if (v != kIgnoreLabel) max_label = std::max(max_label, v);
  }
  for (auto& c : counts) c.assign(std::size_t{max_label} + 1, 0);
  for (std::size_t y = 0; y < labels.height; ++y) {
    const std::size_t py = y * h / labels.height;
    for (std::size_t x = 0; x < labels.width; ++x) {
      const auto v = labels.at(y, x);
      if (v == kIgnoreLabel) continue;
      counts[py * w + x * w / labels.width][v] += 1;
    }
  }
  std::vector<std::uint16_t> out(h * w, kIgnoreLabel);
  for (std::size_t p = 0; p < out.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t l = 0; l < counts[p].size(); ++l) {
      if (counts[p][l] > best) {
        best = counts[p][l];
        out[p] = static_cast<std::uint16_t>(l);
      }
    }
  }
  return out;
}

}  // namespace cause

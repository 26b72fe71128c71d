#include "cause/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cause/error.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace cause {

Matrix head_outputs(const FeatureRecord& record, const MlpHead& head) {
  return head_forward(record.features, head, HeadMode::Infer).y;
}

namespace {

std::pair<std::size_t, std::size_t> output_size(const FeatureRecord& r) {
  if (r.rgb) return {r.rgb->height, r.rgb->width};
  if (r.labels) return {r.labels->height, r.labels->width};
  return {r.h, r.w};
}

}  // namespace

InferenceOutput run_inference(std::span<const FeatureRecord> records, const MlpHead& head, const InferOptions& opts) {
  if (records.empty()) throw validation_error("inference: no records");
  if (opts.use_crf) check_crf_params(opts.crf);
  std::vector<Matrix> outputs(records.size());
  parallel_for(records.size(), opts.threads, [&](std::size_t i) { outputs[i] = head_outputs(records[i], head); });

  std::size_t total = 0;
  for (const auto& y : outputs) total += y.rows();
  Matrix pooled(total, head.r);
  std::size_t at = 0;
  for (const auto& y : outputs) {
    std::copy(y.data().begin(), y.data().end(), pooled.data().begin() + static_cast<std::ptrdiff_t>(at * head.r));
    at += y.rows();
  }

  InferenceOutput out;
  out.probe = fit_cluster_probe(pooled, opts.classes, opts.probe_iters, opts.seed, nullptr, opts.probe_restarts);
  out.predictions.resize(records.size());
  bool missing_rgb = false;
  for (const auto& r : records) missing_rgb = missing_rgb || !r.rgb;
  if (opts.use_crf && missing_rgb) std::cerr << "warning: records without RGB are not CRF-refined\n";
  parallel_for(records.size(), opts.threads, [&](std::size_t i) {
    const auto& rec = records[i];
    const auto [oh, ow] = output_size(rec);
    LabelMap m = predict_labels(outputs[i], rec.h, rec.w, out.probe, oh, ow);
    if (opts.use_crf && rec.rgb) m = crf_refine_tiled(*rec.rgb, m, opts.classes, opts.crf);
    out.predictions[i] = std::move(m);
  });
  return out;
}

EvalResult evaluate_records(std::span<const LabelMap> predictions, std::span<const FeatureRecord> records,
                            std::size_t classes) {
  if (predictions.size() != records.size()) throw validation_error("evaluate: prediction count != record count");
  std::vector<LabelMap> truth;
  truth.reserve(records.size());
  for (const auto& r : records) {
    if (!r.labels) throw validation_error("evaluate: record '" + r.image_id + "' has no labels");
    truth.push_back(*r.labels);
  }
  return evaluate(predictions, truth, classes);
}

std::vector<std::uint16_t> patch_labels(std::span<const FeatureRecord> records) {
  std::vector<std::uint16_t> out;
  for (const auto& r : records) {
    if (!r.labels) throw validation_error("record '" + r.image_id + "' has no labels");
    if (r.labels->height == r.h && r.labels->width == r.w) {
      out.insert(out.end(), r.labels->values.begin(), r.labels->values.end());
    } else {
      const auto d = downsample_labels(*r.labels, r.h, r.w);
      out.insert(out.end(), d.begin(), d.end());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

void check_pipeline_config(const PipelineConfig& cfg) {
  if (cfg.builder != "modularity" && cfg.builder != "kmeanspp") {
    throw validation_error("pipeline: builder must be 'modularity' or 'kmeanspp', got '" + cfg.builder + "'");
  }
  if (cfg.book.k < 2) throw validation_error("pipeline: k must be >= 2");
  if (!(cfg.book.tau_mod > 0.0)) throw validation_error("pipeline: tau_mod must be > 0");
  if (cfg.r < 1) throw validation_error("pipeline: r must be >= 1");
  if (cfg.threads < 1) throw validation_error("pipeline: threads must be >= 1");
  check_train_config(cfg.train);
  if (cfg.infer.use_crf) check_crf_params(cfg.infer.crf);
  if (cfg.manifest.empty()) check_synth_spec(cfg.synth);
}

void set_seed(PipelineConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.synth.seed = seed;
  cfg.book.seed = seed;
  cfg.train.seed = seed;
  cfg.infer.seed = seed;
}

void apply_seed_env(PipelineConfig& cfg) {
  const char* env = std::getenv("CAUSE_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw validation_error(std::string("CAUSE_SEED is not an unsigned integer: '") + env + "'");
  set_seed(cfg, v);
}

PipelineConfig parse_pipeline_config(std::string_view json_text, const fs::path& base_dir) {
  PipelineConfig cfg;
  try {
    const auto j = nlohmann::json::parse(json_text);
    set_seed(cfg, j.value("seed", cfg.seed));
    if (j.contains("manifest")) {
      fs::path m = j.at("manifest").get<std::string>();
      cfg.manifest = m.is_absolute() || base_dir.empty() ? m : base_dir / m;
    }
    if (j.contains("output_dir")) {
      fs::path o = j.at("output_dir").get<std::string>();
      cfg.output_dir = o.is_absolute() || base_dir.empty() ? o : base_dir / o;
    }
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      auto& sp = cfg.synth;
      sp.n_classes = s.value("n_classes", sp.n_classes);
      sp.subconcepts_per_class = s.value("subconcepts_per_class", sp.subconcepts_per_class);
      sp.c = s.value("c", sp.c);
      sp.grid_h = s.value("grid_h", sp.grid_h);
      sp.grid_w = s.value("grid_w", sp.grid_w);
      sp.n_images = s.value("n_images", sp.n_images);
      sp.n_val = s.value("n_val", sp.n_val);
      sp.noise_sigma = s.value("noise_sigma", sp.noise_sigma);
      sp.prototype_separation_deg = s.value("prototype_separation_deg", sp.prototype_separation_deg);
      sp.subconcept_angle_deg = s.value("subconcept_angle_deg", sp.subconcept_angle_deg);
      sp.cross_class_cos = s.value("cross_class_cos", sp.cross_class_cos);
      sp.cross_class_span = s.value("cross_class_span", sp.cross_class_span);
      sp.style_axes = s.value("style_axes", sp.style_axes);
      sp.style_strength = s.value("style_strength", sp.style_strength);
      sp.regions_per_image = s.value("regions_per_image", sp.regions_per_image);
      sp.pixel_scale = s.value("pixel_scale", sp.pixel_scale);
      sp.rgb_noise = s.value("rgb_noise", sp.rgb_noise);
      sp.name = s.value("name", sp.name);
    }
    cfg.builder = j.value("builder", cfg.builder);
    cfg.book.k = j.value("k", cfg.book.k);
    cfg.book.tau_mod = j.value("tau_mod", cfg.book.tau_mod);
    cfg.book.lr = j.value("book_lr", cfg.book.lr);
    const std::string opt = j.value("book_optimizer", std::string("adam"));
    if (opt != "adam" && opt != "adamw") throw validation_error("pipeline: book_optimizer must be adam or adamw");
    cfg.book.optimizer = opt == "adamw" ? BookOptimizer::AdamW : BookOptimizer::Adam;
    cfg.book.weight_decay = j.value("weight_decay", cfg.book.weight_decay);
    cfg.kmeans_iters = j.value("kmeans_iters", cfg.kmeans_iters);
    cfg.r = j.value("r", cfg.r);
    cfg.train_head = j.value("train_head", cfg.train_head);
    if (j.contains("train")) {
      auto t = j.at("train");
      if (!t.contains("seed")) t["seed"] = cfg.seed;
      cfg.train = parse_train_config(t.dump());
    }
    cfg.infer.classes = j.value("classes", cfg.infer.classes);
    cfg.infer.probe_iters = j.value("probe_iters", cfg.infer.probe_iters);
    cfg.infer.probe_restarts = j.value("probe_restarts", cfg.infer.probe_restarts);
    if (j.contains("crf")) {
      const auto& c = j.at("crf");
      auto& p = cfg.infer.crf;
      cfg.infer.use_crf = c.value("enabled", cfg.infer.use_crf);
      p.w_appearance = c.value("w_appearance", p.w_appearance);
      p.theta_alpha = c.value("theta_alpha", p.theta_alpha);
      p.theta_beta = c.value("theta_beta", p.theta_beta);
      p.w_smoothness = c.value("w_smoothness", p.w_smoothness);
      p.theta_gamma = c.value("theta_gamma", p.theta_gamma);
      p.steps = c.value("steps", p.steps);
      p.confidence = c.value("confidence", p.confidence);
      p.max_pixels = c.value("max_pixels", p.max_pixels);
      p.tile = c.value("tile", p.tile);
      p.halo = c.value("halo", p.halo);
    }
    cfg.threads = j.value("threads", cfg.threads);
    cfg.write_png = j.value("write_png", cfg.write_png);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("pipeline config: ") + e.what());
  }
  cfg.infer.threads = cfg.threads;
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot read pipeline config '" + path.string() + "'");
  std::ostringstream text;
  text << is.rdbuf();
  return parse_pipeline_config(text.str(), path.parent_path());
}

std::string pipeline_config_json(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  if (!cfg.manifest.empty()) j["manifest"] = cfg.manifest.string();
  const auto& s = cfg.synth;
  j["synth"] = {{"n_classes", s.n_classes},
                {"subconcepts_per_class", s.subconcepts_per_class},
                {"c", s.c},
                {"grid_h", s.grid_h},
                {"grid_w", s.grid_w},
                {"n_images", s.n_images},
                {"n_val", s.n_val},
                {"noise_sigma", s.noise_sigma},
                {"prototype_separation_deg", s.prototype_separation_deg},
                {"subconcept_angle_deg", s.subconcept_angle_deg},
                {"cross_class_cos", s.cross_class_cos},
                {"cross_class_span", s.cross_class_span},
                {"style_axes", s.style_axes},
                {"style_strength", s.style_strength},
                {"regions_per_image", s.regions_per_image},
                {"pixel_scale", s.pixel_scale},
                {"rgb_noise", s.rgb_noise},
                {"name", s.name}};
  j["builder"] = cfg.builder;
  j["k"] = cfg.book.k;
  j["tau_mod"] = cfg.book.tau_mod;
  j["book_lr"] = cfg.book.lr;
  j["book_optimizer"] = cfg.book.optimizer == BookOptimizer::AdamW ? "adamw" : "adam";
  j["weight_decay"] = cfg.book.weight_decay;
  j["kmeans_iters"] = cfg.kmeans_iters;
  j["r"] = cfg.r;
  j["train_head"] = cfg.train_head;
  j["train"] = nlohmann::ordered_json::parse(train_config_json(cfg.train));
  j["classes"] = cfg.infer.classes;
  j["probe_iters"] = cfg.infer.probe_iters;
  j["probe_restarts"] = cfg.infer.probe_restarts;
  const auto& p = cfg.infer.crf;
  j["crf"] = {{"enabled", cfg.infer.use_crf}, {"w_appearance", p.w_appearance}, {"theta_alpha", p.theta_alpha},
              {"theta_beta", p.theta_beta},   {"w_smoothness", p.w_smoothness}, {"theta_gamma", p.theta_gamma},
              {"steps", p.steps},             {"confidence", p.confidence},     {"max_pixels", p.max_pixels},
              {"tile", p.tile},               {"halo", p.halo}};
  j["output_dir"] = cfg.output_dir.string();
  j["threads"] = cfg.threads;
  j["write_png"] = cfg.write_png;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Run manifest

std::uint64_t hash_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot read '" + path.string() + "'");
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(is.gcount())), h);
  }
  return h;
}

void write_run_manifest(const fs::path& path, const std::string& command, const std::string& config_json,
                        std::uint64_t seed, const std::vector<fs::path>& inputs) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = nlohmann::ordered_json::parse(config_json);
  nlohmann::ordered_json in = nlohmann::ordered_json::array();
  for (const auto& p : inputs) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash_file(p)));
    in.push_back({{"path", p.string()}, {"fnv1a64", hex}});
  }
  j["inputs"] = in;
  std::ofstream os(path);
  if (!os) throw io_error("cannot write '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

template <class F>
auto stage(const char* name, F&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("stage '") + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Io, std::string("stage '") + name + "': " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw io_error("write failed for '" + path.string() + "'");
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg_in) {
  PipelineConfig cfg = cfg_in;
  check_pipeline_config(cfg);
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw io_error("cannot create output dir '" + cfg.output_dir.string() + "': " + ec.message());

  PipelineResult result;
  fs::path manifest_path = cfg.manifest;
  const DatasetManifest manifest = stage("load", [&] {
    if (manifest_path.empty()) {
      manifest_path = cfg.output_dir / "data" / "manifest.json";
      return generate_synthetic_dataset(cfg.synth, cfg.output_dir / "data");
    }
    DatasetManifest m = load_manifest(manifest_path);
    const auto problems = validate_manifest(m);
    if (!problems.empty()) throw validation_error("manifest: " + problems.front());
    return m;
  });
  if (cfg.infer.classes == 0) cfg.infer.classes = manifest.classes;

  const auto train_records = stage("load", [&] { return load_records(manifest, Split::Train); });
  const auto val_records = stage("load", [&] { return load_records(manifest, Split::Val); });
  if (train_records.empty()) throw validation_error("stage 'load': no training records");
  if (val_records.empty()) throw validation_error("stage 'load': no validation records");

  const Clusterbook book = stage("build-book", [&] {
    BookFitOptions opts = cfg.book;
    Clusterbook b = cfg.builder == "kmeanspp"
                        ? fit_clusterbook_kmeanspp(train_records, opts.k, cfg.kmeans_iters, opts.seed)
                        : fit_clusterbook(train_records, opts, &result.book_report);
    save_clusterbook(b, cfg.output_dir / "book.causebook");
    return b;
  });

  const MlpHead initial = init_head(manifest.feature_dim, cfg.r, cfg.seed);
  const TeacherHead teacher = stage("train", [&] {
    TeacherHead t{initial, cfg.train.lambda};
    MlpHead student = initial;
    if (cfg.train_head) {
      TrainResult tr = train(train_records, book, initial, t, cfg.train);
      result.trace = tr.trace;
      student = tr.student;
      t = tr.teacher;
      write_loss_trace(tr.trace, cfg.output_dir / "loss_trace.tsv");
    }
    save_heads(student, t, cfg.output_dir / "head.causehead");
    return t;
  });

  const InferenceOutput inf = stage("infer", [&] {
    InferenceOutput o = run_inference(val_records, teacher.head, cfg.infer);
    if (cfg.write_png) {
      const fs::path dir = cfg.output_dir / "pred";
      fs::create_directories(dir);
      for (std::size_t i = 0; i < o.predictions.size(); ++i) {
        write_label_png(o.predictions[i], dir / (val_records[i].image_id + ".png"));
        write_label_file(o.predictions[i], dir / (val_records[i].image_id + ".causelabel"));
      }
    }
    return o;
  });

  result.eval = stage("eval", [&] {
    EvalResult r = evaluate_records(inf.predictions, val_records, cfg.infer.classes);
    result.metrics_json_path = cfg.output_dir / "metrics.json";
    write_text(result.metrics_json_path, metrics_json(r));
    write_text(cfg.output_dir / "metrics.tsv", metrics_tsv(r));
    return r;
  });

  std::vector<fs::path> inputs;
  if (!cfg.manifest.empty()) {
    inputs.push_back(manifest_path);
    for (const auto& e : manifest.records) inputs.push_back(manifest.resolve(e));
  }
  write_run_manifest(cfg.output_dir / "run_manifest.json", "pipeline", pipeline_config_json(cfg), cfg.seed, inputs);
  return result;
}

}  // namespace cause

// cause: command-line front end for the segmentation pipeline.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "cause/clusterbook.hpp"
#include "cause/error.hpp"
#include "cause/feature_io.hpp"
#include "cause/inference_eval.hpp"
#include "cause/pipeline.hpp"
#include "cause/seg_head.hpp"
#include "cause/ssl_trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cause;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Validation: return 2;
    case ErrorKind::Io: return 3;
    case ErrorKind::Numeric: return 4;
  }
  return 1;
}

/// Flag beats CAUSE_SEED, which beats the configured value.
std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t flag_value, std::uint64_t configured) {
  if (flag && flag->count() > 0) return flag_value;
  PipelineConfig probe;
  probe.seed = configured;
  apply_seed_env(probe);
  return probe.seed;
}

DatasetManifest checked_manifest(const fs::path& path) {
  DatasetManifest m = load_manifest(path);
  const auto problems = validate_manifest(m);
  if (!problems.empty()) {
    for (const auto& p : problems) std::cerr << "manifest: " << p << "\n";
    throw validation_error("manifest '" + path.string() + "' failed validation");
  }
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot write '" + path.string() + "'");
  os << text;
}

std::vector<fs::path> manifest_inputs(const fs::path& manifest_path, const DatasetManifest& m, Split split) {
  std::vector<fs::path> in{manifest_path};
  for (const auto& p : m.paths(split)) in.push_back(p);
  return in;
}

fs::path sibling(const fs::path& artifact, const std::string& suffix) {
  fs::path p = artifact;
  p += suffix;
  return p;
}

struct CrfFlags {
  CrfParams p;
  bool no_crf = false;
  void add(CLI::App* app) {
    app->add_option("--crf-steps", p.steps, "mean-field steps (reference value 10)")->capture_default_str();
    app->add_option("--crf-w1", p.w_appearance, "appearance kernel weight")->capture_default_str();
    app->add_option("--crf-theta-alpha", p.theta_alpha, "appearance spatial std, px")->capture_default_str();
    app->add_option("--crf-theta-beta", p.theta_beta, "appearance colour std")->capture_default_str();
    app->add_option("--crf-w2", p.w_smoothness, "smoothness kernel weight")->capture_default_str();
    app->add_option("--crf-theta-gamma", p.theta_gamma, "smoothness spatial std, px")->capture_default_str();
    app->add_option("--crf-confidence", p.confidence, "unary confidence of the input label")->capture_default_str();
    app->add_option("--crf-max-pixels", p.max_pixels, "dense CRF pixel budget per window")->capture_default_str();
    app->add_option("--crf-tile", p.tile, "tile side for the tiled CRF")->capture_default_str();
    app->add_option("--crf-halo", p.halo, "context margin around each tile")->capture_default_str();
    app->add_flag("--no-crf", no_crf, "skip CRF refinement");
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cause: clusterbook construction, concept-wise head training and evaluation on patch features"};
  app.require_subcommand(1);
  unsigned threads = 1;
  app.add_option("--threads", threads, "worker cap for per-image parallel work")->capture_default_str()->check(CLI::PositiveNumber);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "write a synthetic feature dataset and manifest");
  SynthSpec spec;
  fs::path gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--classes", spec.n_classes, "number of classes")->capture_default_str();
  gen->add_option("--subconcepts", spec.subconcepts_per_class, "sub-concepts per class")->capture_default_str();
  gen->add_option("--dim", spec.c, "feature dimension c")->capture_default_str();
  gen->add_option("--grid-h", spec.grid_h, "patch grid height")->capture_default_str();
  gen->add_option("--grid-w", spec.grid_w, "patch grid width")->capture_default_str();
  gen->add_option("--images", spec.n_images, "total images")->capture_default_str();
  gen->add_option("--val", spec.n_val, "images tagged val (the last ones)")->capture_default_str();
  gen->add_option("--sigma", spec.noise_sigma, "feature noise std")->capture_default_str();
  gen->add_option("--separation-deg", spec.prototype_separation_deg, "minimum prototype angle")->capture_default_str();
  gen->add_option("--subconcept-angle-deg", spec.subconcept_angle_deg, "tilt of sub-concepts from their class")->capture_default_str();
  gen->add_option("--cross-class-cos", spec.cross_class_cos, "cosine between matching sub-concepts of neighbouring classes")->capture_default_str();
  gen->add_option("--cross-class-span", spec.cross_class_span, "how many classes on each side count as neighbours")->capture_default_str();
  gen->add_option("--regions", spec.regions_per_image, "Voronoi regions per image")->capture_default_str();
  gen->add_option("--pixel-scale", spec.pixel_scale, "pixels per patch side")->capture_default_str();
  gen->add_option("--rgb-noise", spec.rgb_noise, "RGB noise std")->capture_default_str();
  gen->add_option("--name", spec.name, "dataset name")->capture_default_str();
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "run seed (CAUSE_SEED when omitted)")->capture_default_str();

  // build-book
  auto* bb = app.add_subcommand("build-book", "construct the concept clusterbook from training features");
  fs::path bb_manifest, bb_out;
  BookFitOptions bopts;
  std::string builder = "modularity", optimizer = "adam";
  std::size_t kmeans_iters = 20;
  std::uint64_t bb_seed = 0;
  bb->add_option("--manifest", bb_manifest, "dataset manifest")->required();
  bb->add_option("--out", bb_out, "output .causebook")->required();
  bb->add_option("-k,--k", bopts.k, "number of concept prototypes (reference value 2048)")->capture_default_str();
  bb->add_option("--tau", bopts.tau_mod, "modularity temperature (reference value 0.1)")->capture_default_str();
  bb->add_option("--lr", bopts.lr, "Adam learning rate (reference value 0.001)")->capture_default_str();
  bb->add_option("--builder", builder, "modularity | kmeanspp")->capture_default_str()->check(CLI::IsMember({"modularity", "kmeanspp"}));
  bb->add_option("--optimizer", optimizer, "adam | adamw")->capture_default_str()->check(CLI::IsMember({"adam", "adamw"}));
  bb->add_option("--weight-decay", bopts.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
  bb->add_option("--kmeans-iters", kmeans_iters, "Lloyd passes for the kmeanspp builder")->capture_default_str();
  auto* bb_seed_opt = bb->add_option("--seed", bb_seed, "run seed (CAUSE_SEED when omitted)")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "concept-wise contrastive training of the segmentation head");
  fs::path tr_manifest, tr_book, tr_out, tr_config;
  TrainConfig tcfg;
  std::size_t r_dim = 90;
  std::uint64_t tr_seed = 0;
  tr->add_option("--manifest", tr_manifest, "dataset manifest")->required();
  tr->add_option("--book", tr_book, ".causebook")->required();
  tr->add_option("--out", tr_out, "output .causehead")->required();
  tr->add_option("--config", tr_config, "train config JSON (flags override it)");
  tr->add_option("-r,--r", r_dim, "head output dimension (reference value 90)")->capture_default_str();
  auto* o_phip = tr->add_option("--phi-pos", tcfg.phi_pos, "positive threshold on D_M (reference value 0.3)")->capture_default_str();
  auto* o_phin = tr->add_option("--phi-neg", tcfg.phi_neg, "negative threshold on D_M (reference value 0.1)")->capture_default_str();
  auto* o_tau = tr->add_option("--tau-nce", tcfg.tau_nce, "contrastive temperature")->capture_default_str();
  auto* o_lr = tr->add_option("--lr", tcfg.lr, "Adam learning rate (reference value 0.001)")->capture_default_str();
  auto* o_lam = tr->add_option("--lambda", tcfg.lambda, "EMA rate (reference value 0.99)")->capture_default_str();
  auto* o_ep = tr->add_option("--epochs", tcfg.epochs, "passes over the training split")->capture_default_str();
  auto* o_bank = tr->add_option("--bank-capacity", tcfg.bank_capacity, "rows per concept in the bank (reference value 100)")->capture_default_str();
  auto* o_win = tr->add_option("--window", tcfg.window, "anchor window side (reference value 4)")->capture_default_str();
  auto* o_str = tr->add_option("--stride", tcfg.stride, "anchor window stride (reference value 4)")->capture_default_str();
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "run seed (CAUSE_SEED when omitted)")->capture_default_str();

  // infer
  auto* inf = app.add_subcommand("infer", "cluster probe, upsampling, nearest centroid and CRF on one split");
  fs::path inf_manifest, inf_head, inf_out;
  std::size_t inf_classes = 0, probe_iters = 50, probe_restarts = 10;
  std::string inf_split = "val";
  bool png = false;
  CrfFlags crf;
  std::uint64_t inf_seed = 0;
  inf->add_option("--manifest", inf_manifest, "dataset manifest")->required();
  inf->add_option("--head", inf_head, ".causehead (the teacher is used)")->required();
  inf->add_option("--out-dir", inf_out, "directory for label maps")->required();
  inf->add_option("--classes", inf_classes, "cluster count; 0 uses the manifest's")->capture_default_str();
  inf->add_option("--probe-iters", probe_iters, "spherical k-means passes")->capture_default_str();
  inf->add_option("--probe-restarts", probe_restarts, "k-means restarts, lowest objective kept")->capture_default_str();
  inf->add_option("--split", inf_split, "train | val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));
  inf->add_flag("--png", png, "also write palette PNGs");
  crf.add(inf);
  auto* inf_seed_opt = inf->add_option("--seed", inf_seed, "run seed (CAUSE_SEED when omitted)")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "Hungarian matching and mIoU/pAcc for predicted label maps");
  fs::path ev_manifest, ev_pred, ev_out;
  std::size_t ev_classes = 0;
  std::string ev_split = "val";
  ev->add_option("--manifest", ev_manifest, "dataset manifest")->required();
  ev->add_option("--pred-dir", ev_pred, "directory with <image_id>.causelabel files")->required();
  ev->add_option("--out", ev_out, "metrics path prefix (writes .json and .tsv)")->required();
  ev->add_option("--classes", ev_classes, "class count; 0 uses the manifest's")->capture_default_str();
  ev->add_option("--split", ev_split, "train | val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));

  // probe
  auto* pr = app.add_subcommand("probe", "linear probe on frozen head outputs");
  fs::path pr_manifest, pr_head, pr_out;
  LinearProbeConfig pcfg;
  std::uint64_t pr_seed = 0;
  pr->add_option("--manifest", pr_manifest, "dataset manifest")->required();
  pr->add_option("--head", pr_head, ".causehead (the teacher is used)")->required();
  pr->add_option("--out", pr_out, "metrics path prefix (writes .json and .tsv)")->required();
  pr->add_option("--epochs", pcfg.epochs, "full-batch Adam steps")->capture_default_str();
  pr->add_option("--lr", pcfg.lr, "Adam learning rate")->capture_default_str();
  auto* pr_seed_opt = pr->add_option("--seed", pr_seed, "run seed (CAUSE_SEED when omitted)")->capture_default_str();

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "gen/load, build-book, train, infer and eval in one run");
  fs::path pl_config, pl_out;
  std::uint64_t pl_seed = 0;
  pl->add_option("--config", pl_config, "pipeline config JSON")->required();
  pl->add_option("--out-dir", pl_out, "override the config's output directory");
  auto* pl_seed_opt = pl->add_option("--seed", pl_seed, "override the seed (beats CAUSE_SEED)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      spec.seed = resolve_seed(gen_seed_opt, gen_seed, 0);
      const DatasetManifest m = generate_synthetic_dataset(spec, gen_out);
      std::cout << "wrote " << m.records.size() << " records to " << gen_out.string() << "\n";
    } else if (*bb) {
      bopts.seed = resolve_seed(bb_seed_opt, bb_seed, 0);
      bopts.optimizer = optimizer == "adamw" ? BookOptimizer::AdamW : BookOptimizer::Adam;
      const DatasetManifest m = checked_manifest(bb_manifest);
      const auto records = load_records(m, Split::Train);
      BookFitReport report;
      const Clusterbook book = builder == "kmeanspp" ? fit_clusterbook_kmeanspp(records, bopts.k, kmeans_iters, bopts.seed)
                                                     : fit_clusterbook(records, bopts, &report);
      save_clusterbook(book, bb_out);
      nlohmann::ordered_json cfg = {{"k", bopts.k},         {"tau_mod", bopts.tau_mod}, {"lr", bopts.lr},
                                    {"builder", builder},   {"optimizer", optimizer},   {"weight_decay", bopts.weight_decay},
                                    {"kmeans_iters", kmeans_iters}};
      write_run_manifest(sibling(bb_out, ".run.json"), "build-book", cfg.dump(), bopts.seed,
                         manifest_inputs(bb_manifest, m, Split::Train));
      std::cout << "clusterbook k=" << book.k() << " c=" << book.dim() << " (" << report.records_used << " records used, "
                << report.records_skipped << " skipped)\n";
    } else if (*tr) {
      if (!tr_config.empty()) {
        // Config file first, explicitly given flags on top.
        const TrainConfig flags = tcfg;
        tcfg = load_train_config(tr_config);
        if (o_phip->count()) tcfg.phi_pos = flags.phi_pos;
        if (o_phin->count()) tcfg.phi_neg = flags.phi_neg;
        if (o_tau->count()) tcfg.tau_nce = flags.tau_nce;
        if (o_lr->count()) tcfg.lr = flags.lr;
        if (o_lam->count()) tcfg.lambda = flags.lambda;
        if (o_ep->count()) tcfg.epochs = flags.epochs;
        if (o_bank->count()) tcfg.bank_capacity = flags.bank_capacity;
        if (o_win->count()) tcfg.window = flags.window;
        if (o_str->count()) tcfg.stride = flags.stride;
      }
      tcfg.seed = resolve_seed(tr_seed_opt, tr_seed, tr_config.empty() ? 0 : tcfg.seed);
      check_train_config(tcfg);
      const DatasetManifest m = checked_manifest(tr_manifest);
      const Clusterbook book = load_clusterbook(tr_book);
      if (book.dim() != m.feature_dim) throw validation_error("clusterbook dim differs from the manifest's feature_dim");
      const auto records = load_records(m, Split::Train);
      const MlpHead init = init_head(m.feature_dim, r_dim, tcfg.seed);
      TrainResult res = train(records, book, init, TeacherHead{init, tcfg.lambda}, tcfg);
      save_heads(res.student, res.teacher, tr_out);
      write_loss_trace(res.trace, sibling(tr_out, ".loss.tsv"));
      auto in = manifest_inputs(tr_manifest, m, Split::Train);
      in.push_back(tr_book);
      auto cfg = nlohmann::ordered_json::parse(train_config_json(tcfg));
      cfg["r"] = r_dim;
      write_run_manifest(sibling(tr_out, ".run.json"), "train", cfg.dump(), tcfg.seed, in);
      for (const auto& e : res.trace) {
        std::cout << "epoch " << e.epoch << " mean_loss " << e.mean_loss << " usable " << e.usable_fraction << "\n";
      }
    } else if (*inf) {
      const DatasetManifest m = checked_manifest(inf_manifest);
      MlpHead student;
      TeacherHead teacher;
      load_heads(inf_head, student, teacher);
      InferOptions io;
      io.classes = inf_classes ? inf_classes : m.classes;
      io.probe_iters = probe_iters;
      io.probe_restarts = probe_restarts;
      io.use_crf = !crf.no_crf;
      io.crf = crf.p;
      io.seed = resolve_seed(inf_seed_opt, inf_seed, 0);
      io.threads = threads;
      const Split split = inf_split == "train" ? Split::Train : Split::Val;
      const auto records = load_records(m, split);
      const InferenceOutput out = run_inference(records, teacher.head, io);
      fs::create_directories(inf_out);
      for (std::size_t i = 0; i < records.size(); ++i) {
        write_label_file(out.predictions[i], inf_out / (records[i].image_id + ".causelabel"));
        if (png) write_label_png(out.predictions[i], inf_out / (records[i].image_id + ".png"));
      }
      nlohmann::ordered_json cfg = {{"classes", io.classes}, {"probe_iters", io.probe_iters}, {"probe_restarts", io.probe_restarts}, {"split", inf_split},
                                    {"crf_enabled", io.use_crf}, {"crf_steps", io.crf.steps},
                                    {"crf_w1", io.crf.w_appearance}, {"crf_theta_alpha", io.crf.theta_alpha},
                                    {"crf_theta_beta", io.crf.theta_beta}, {"crf_w2", io.crf.w_smoothness},
                                    {"crf_theta_gamma", io.crf.theta_gamma}, {"crf_confidence", io.crf.confidence},
                                    {"crf_tile", io.crf.tile}, {"crf_halo", io.crf.halo}};
      auto in = manifest_inputs(inf_manifest, m, split);
      in.push_back(inf_head);
      write_run_manifest(inf_out / "run_manifest.json", "infer", cfg.dump(), io.seed, in);
      std::cout << "wrote " << records.size() << " label maps to " << inf_out.string() << "\n";
    } else if (*ev) {
      const DatasetManifest m = checked_manifest(ev_manifest);
      const Split split = ev_split == "train" ? Split::Train : Split::Val;
      const auto records = load_records(m, split);
      std::vector<LabelMap> preds;
      std::vector<fs::path> in = manifest_inputs(ev_manifest, m, split);
      for (const auto& r : records) {
        const fs::path p = ev_pred / (r.image_id + ".causelabel");
        preds.push_back(read_label_file(p));
        in.push_back(p);
      }
      const EvalResult res = evaluate_records(preds, records, ev_classes ? ev_classes : m.classes);
      write_text(sibling(ev_out, ".json"), metrics_json(res));
      write_text(sibling(ev_out, ".tsv"), metrics_tsv(res));
      nlohmann::ordered_json cfg = {{"classes", ev_classes ? ev_classes : m.classes}, {"split", ev_split}};
      write_run_manifest(sibling(ev_out, ".run.json"), "eval", cfg.dump(), 0, in);
      std::cout << metrics_json(res);
    } else if (*pr) {
      pcfg.seed = resolve_seed(pr_seed_opt, pr_seed, 0);
      const DatasetManifest m = checked_manifest(pr_manifest);
      MlpHead student;
      TeacherHead teacher;
      load_heads(pr_head, student, teacher);
      auto outputs = [&](Split s, std::vector<std::uint16_t>& labels) {
        const auto recs = load_records(m, s);
        std::vector<Matrix> ys;
        std::size_t rows = 0;
        for (const auto& r : recs) {
          ys.push_back(head_outputs(r, teacher.head));
          rows += ys.back().rows();
        }
        Matrix x(rows, teacher.head.r);
        std::size_t at = 0;
        for (const auto& y : ys) {
          std::copy(y.data().begin(), y.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(at * y.cols()));
          at += y.rows();
        }
        labels = patch_labels(recs);
        return x;
      };
      std::vector<std::uint16_t> ytr, yva;
      const Matrix xtr = outputs(Split::Train, ytr);
      const Matrix xva = outputs(Split::Val, yva);
      const EvalResult res = linear_probe(xtr, ytr, xva, yva, m.classes, pcfg);
      write_text(sibling(pr_out, ".json"), metrics_json(res));
      write_text(sibling(pr_out, ".tsv"), metrics_tsv(res));
      nlohmann::ordered_json cfg = {{"epochs", pcfg.epochs}, {"lr", pcfg.lr}};
      auto in = manifest_inputs(pr_manifest, m, Split::Train);
      for (const auto& p : m.paths(Split::Val)) in.push_back(p);
      in.push_back(pr_head);
      write_run_manifest(sibling(pr_out, ".run.json"), "probe", cfg.dump(), pcfg.seed, in);
      std::cout << metrics_json(res);
    } else if (*pl) {
      PipelineConfig cfg = load_pipeline_config(pl_config);
      apply_seed_env(cfg);
      if (pl_seed_opt->count()) set_seed(cfg, pl_seed);
      if (!pl_out.empty()) cfg.output_dir = pl_out;
      if (app.get_option("--threads")->count()) {
        cfg.threads = threads;
        cfg.infer.threads = threads;
      }
      const PipelineResult res = run_pipeline(cfg);
      std::cout << metrics_json(res.eval);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cause/clusterbook.hpp"
#include "cause/feature_io.hpp"
#include "cause/inference_eval.hpp"
#include "cause/seg_head.hpp"
#include "cause/ssl_trainer.hpp"

namespace cause {

/// Pre-projection head output Y (hw x r).
Matrix head_outputs(const FeatureRecord& record, const MlpHead& head);

struct InferOptions {
  std::size_t classes = 0;  ///< 0: take the manifest's class count
  std::size_t probe_iters = 50;
  std::size_t probe_restarts = 10;
  bool use_crf = true;
  CrfParams crf;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct InferenceOutput {
  ClusterProbe probe;
  std::vector<LabelMap> predictions;  ///< image resolution, one per record
};

/// Cluster probe over the pooled outputs of `records`, upsampling,
/// nearest centroid, tiled dense CRF. Output resolution follows the record's
/// RGB, else its labels, else the patch grid. The CRF needs RGB.
InferenceOutput run_inference(std::span<const FeatureRecord> records, const MlpHead& head, const InferOptions& opts);

/// Hungarian matching and metrics against the records' image-resolution labels.
EvalResult evaluate_records(std::span<const LabelMap> predictions, std::span<const FeatureRecord> records,
                            std::size_t classes);

/// Patch-level ground truth of every labelled record, concatenated.
std::vector<std::uint16_t> patch_labels(std::span<const FeatureRecord> records);

struct PipelineConfig {
  std::filesystem::path manifest;  ///< empty: generate `synth` under output_dir/data
  SynthSpec synth;
  std::string builder = "modularity";  ///< "modularity" | "kmeanspp"
  BookFitOptions book;
  std::size_t kmeans_iters = 20;
  std::size_t r = 90;
  bool train_head = true;  ///< false: evaluate the freshly initialized head
  TrainConfig train;
  InferOptions infer;
  std::filesystem::path output_dir = "cause_run";
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool write_png = false;
};

void check_pipeline_config(const PipelineConfig& cfg);
/// Missing keys keep their defaults. Relative paths resolve against the file's directory.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
PipelineConfig parse_pipeline_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
std::string pipeline_config_json(const PipelineConfig& cfg);

/// Sets the run seed everywhere it is consumed.
void set_seed(PipelineConfig& cfg, std::uint64_t seed);
/// CAUSE_SEED, when set, replaces the configured seed.
void apply_seed_env(PipelineConfig& cfg);

struct PipelineResult {
  EvalResult eval;
  BookFitReport book_report;
  std::vector<EpochStats> trace;
  std::filesystem::path metrics_json_path;
};

/// gen/load -> build-book -> train -> infer -> eval. A failure is rethrown
/// with the stage name prefixed and its kind preserved.
PipelineResult run_pipeline(const PipelineConfig& cfg);

/// JSON record of a command: its name, configuration, seed and the FNV-1a
/// hash of each input file.
void write_run_manifest(const std::filesystem::path& path, const std::string& command, const std::string& config_json,
                        std::uint64_t seed, const std::vector<std::filesystem::path>& inputs);
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace cause

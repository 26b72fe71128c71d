#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cause/clusterbook.hpp"
#include "cause/feature_io.hpp"
#include "cause/seg_head.hpp"

namespace cause {

struct TrainConfig {
  double phi_pos = 0.3;   ///< D_M above this -> positive
  double phi_neg = 0.1;   ///< D_M below this -> negative
  double tau_nce = 0.1;
  double lr = 0.001;
  double lambda = 0.99;   ///< EMA rate
  std::size_t epochs = 1;
  std::size_t bank_capacity = 100;
  std::size_t window = 4;
  std::size_t stride = 4;
  std::uint64_t seed = 0;
};

void check_train_config(const TrainConfig& cfg);
/// JSON keys: phi_pos, phi_neg, tau_nce, lr, lambda, epochs, bank_capacity, seed
/// (plus optional window, stride). Missing keys keep their defaults.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig parse_train_config(std::string_view json_text, const TrainConfig& base = {});
std::string train_config_json(const TrainConfig& cfg);

/// One uniformly drawn position (flat index y*w+x) per window as a
/// window x window kernel slides over the grid with the given stride.
std::vector<std::size_t> sample_anchors(std::size_t h, std::size_t w, std::size_t window, std::size_t stride,
                                        Rng& rng);

enum class Source { Batch, Bank };

struct Candidate {
  Source source = Source::Batch;
  std::size_t concept_id = 0;
  std::size_t index = 0;  ///< batch position, or slot within the concept's bank list
};

struct AnchorSelection {
  std::size_t position = 0;
  std::size_t concept_id = 0;
  std::vector<Candidate> positives;
  std::vector<Candidate> negatives;
};

/// In-batch positives (D_M[anchor, id] > phi_pos) and negatives (< phi_neg),
/// excluding the anchor's own position.
AnchorSelection select_pos_neg(std::size_t anchor_position, std::size_t anchor_concept,
                               std::span<const std::size_t> batch_concepts, const Matrix& distances, double phi_pos,
                               double phi_neg);

struct InfoNceResult {
  bool usable = false;        ///< false when positives or negatives are empty
  double log_p = 0.0;
  std::vector<double> grad;   ///< d log p / d anchor
};

/// log of the mean over positives of
///   exp(cos(y,y+)/tau) / (exp(cos(y,y+)/tau) + sum_neg exp(cos(y,y-)/tau))
/// and its gradient with respect to the anchor. Positives and negatives are
/// constants.
InfoNceResult infonce(std::span<const float> anchor, const std::vector<std::span<const float>>& positives,
                      const std::vector<std::span<const float>>& negatives, double tau);

/// Per-concept store of past teacher features, at most `capacity` rows each.
class ConceptBank {
 public:
  ConceptBank() = default;
  ConceptBank(std::size_t concepts, std::size_t dim, std::size_t capacity);

  std::size_t concepts() const noexcept { return slots_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t occupancy(std::size_t id) const { return slots_.at(id).size() / dim_; }
  std::size_t total() const;
  std::span<const float> row(std::size_t id, std::size_t slot) const {
    return {slots_[id].data() + slot * dim_, dim_};
  }

  /// Per concept: drop floor(occupancy/2) uniformly chosen rows, then append
  /// floor(n/2) uniformly chosen rows among the n batch rows tagged with that
  /// concept, truncated at capacity.
  void update(const Matrix& features, std::span<const std::size_t> concept_ids, Rng& rng);

  friend bool operator==(const ConceptBank&, const ConceptBank&) = default;

 private:
  std::size_t dim_ = 0;
  std::size_t capacity_ = 0;
  std::vector<std::vector<float>> slots_;
};

struct StepResult {
  std::size_t anchors = 0;
  std::size_t usable = 0;
  double loss_sum = 0.0;  ///< sum of -log p over usable anchors
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double usable_fraction = 0.0;
  std::size_t anchors = 0;
  std::size_t usable = 0;
  std::size_t records_skipped = 0;
};

/// Teacher outputs and concept ids of the record being processed; produced by
/// update_student and consumed by update_bank.
struct StepContext {
  Matrix teacher_projected;
  std::vector<std::size_t> concepts;
};

/// Concept-wise contrastive training of the student head. One record is one
/// iteration: update_student (anchors, selection, loss, Adam), then
/// update_teacher (EMA), then update_bank.
class SslTrainer {
 public:
  SslTrainer(const Clusterbook& book, MlpHead student, TeacherHead teacher, const TrainConfig& cfg);

  StepResult update_student(const FeatureRecord& record, StepContext& ctx);
  void update_teacher();
  void update_bank(const StepContext& ctx);

  /// All three phases.
  StepResult step(const FeatureRecord& record);
  /// One pass over the records; throws when no anchor in the epoch was usable.
  EpochStats run_epoch(std::span<const FeatureRecord> records, std::size_t epoch);

  const MlpHead& student() const noexcept { return student_; }
  const TeacherHead& teacher() const noexcept { return teacher_; }
  const ConceptBank& bank() const noexcept { return bank_; }
  const TrainConfig& config() const noexcept { return cfg_; }

 private:
  const Clusterbook& book_;
  MlpHead student_;
  TeacherHead teacher_;
  TrainConfig cfg_;
  HeadOptimizer optimizer_;
  ConceptBank bank_;
  Rng anchor_rng_;
  Rng bank_rng_;
};

struct TrainResult {
  MlpHead student;
  TeacherHead teacher;
  ConceptBank bank;
  std::vector<EpochStats> trace;
};

TrainResult train(std::span<const FeatureRecord> records, const Clusterbook& book, MlpHead student,
                  TeacherHead teacher, const TrainConfig& cfg);
TrainResult train(const DatasetManifest& manifest, const Clusterbook& book, MlpHead student, TeacherHead teacher,
                  const TrainConfig& cfg);

/// TSV with header "epoch\tmean_loss\tusable_anchor_fraction".
void write_loss_trace(const std::vector<EpochStats>& trace, const std::filesystem::path& path);

}  // namespace cause

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "symkfcv/datagen.hpp"
#include "symkfcv/model.hpp"

namespace symkfcv {

/// Seeded partition of 0..n-1 into k folds whose sizes differ by at most one.
struct FoldAssignment {
  int k = 0;
  std::vector<int> fold_of;  // fold id per dataset index
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(int fold) const;
  /// Every index outside `fold`: the training union for that round.
  std::vector<std::size_t> complement(int fold) const;
};

/// Shuffles 0..n-1 with `seed` and slices the result into k contiguous blocks;
/// the first n % k folds get one extra index. Throws std::invalid_argument
/// unless 2 <= k <= n.
FoldAssignment make_folds(std::size_t n, int k, std::uint64_t seed);

enum class LossUnit { Epoch, Fold };

struct LossRecord {
  int unit = 0;  // 1-based epoch or fold number
  double train_loss = 0.0;
  double val_loss = 0.0;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct LossSummary {
  LossUnit unit = LossUnit::Epoch;
  std::vector<LossRecord> records;
  double avg_train = 0.0;
  double avg_val = 0.0;
  /// Per-fold epoch curves (k-fold runs only).
  std::vector<std::vector<LossRecord>> trajectories;
  /// Fold whose model represents the run downstream (k-fold runs only).
  std::optional<int> representative_fold;
};

/// Arithmetic means of the train and validation columns. Throws
/// std::invalid_argument on an empty record list.
std::pair<double, double> average_losses(std::span<const LossRecord> records);

LossSummary summarize(LossUnit unit, std::vector<LossRecord> records);

/// ((old - new) / old) * 100. Negative when the new loss is worse. Throws
/// std::invalid_argument unless old_val_loss > 0.
double relative_improvement(double old_val_loss, double new_val_loss);

enum class Protocol { Baseline, Kfcv };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& name);

struct ExperimentConfig {
  Protocol protocol = Protocol::Kfcv;
  int k = 5;
  double train_fraction = 0.8;
  ModelConfig model = ModelConfig::desk();
  std::uint64_t master_seed = 0;
  std::filesystem::path dataset_path;
  std::filesystem::path output_dir;
  /// After k-fold, train one more model on every index and use it downstream.
  bool retrain_all = false;

  void validate() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

/// Seeds used by the protocols, all derived from the master seed.
std::uint64_t partition_seed(std::uint64_t master_seed);
std::uint64_t model_seed(std::uint64_t master_seed, std::uint64_t ordinal);

struct ExperimentResult {
  LossSummary summary;
  /// Model used for downstream evaluation: the baseline model, the k-fold
  /// representative fold, or the retrain-all model.
  std::optional<ModelParams> model;
  /// One trained model per fold (k-fold runs).
  std::vector<ModelParams> fold_models;
  /// Train/validation membership per round, as dataset ordinals.
  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> rounds;
};

/// k rounds; round i trains a freshly initialized model on every fold but i
/// for cfg.model.epochs epochs and validates on fold i after every epoch. The
/// fold's record is (final-epoch train loss, final validation loss).
ExperimentResult run_kfcv(std::span<const DatasetIndex> dataset, const ExperimentConfig& cfg);

/// Seeded shuffle, first train_fraction for training, the rest for
/// validation after every epoch; one record per epoch.
ExperimentResult run_baseline(std::span<const DatasetIndex> dataset, const ExperimentConfig& cfg);

ExperimentResult run_experiment(std::span<const DatasetIndex> dataset, const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Files

nlohmann::ordered_json summary_to_json(const LossSummary& summary);
LossSummary summary_from_json(const nlohmann::json& j);

class SummaryFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads `summary.json`; rejects missing fields and averages that do not
/// recompute from the records to 1e-12.
LossSummary read_summary(const std::filesystem::path& path);
void write_summary(const LossSummary& summary, const std::filesystem::path& path,
                   const nlohmann::ordered_json& extra = nlohmann::ordered_json::object());

/// Header `unit,train_loss,val_loss`, full-precision values.
std::string loss_csv(std::span<const LossRecord> records);
std::vector<LossRecord> parse_loss_csv(const std::string& text);

/// Writes summary.json, epochs.csv, and the checkpoints (plus fold_<i>/ for
/// k-fold runs) into cfg.output_dir.
void write_experiment(const ExperimentResult& result, const ExperimentConfig& cfg);

}  // namespace symkfcv

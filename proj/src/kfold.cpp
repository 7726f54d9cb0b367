#include "symkfcv/kfold.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "symkfcv/checkpoint.hpp"
#include "symkfcv/io.hpp"
#include "symkfcv/random.hpp"

namespace symkfcv {

std::vector<std::size_t> FoldAssignment::members(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldAssignment::complement(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] != fold) out.push_back(i);
  }
  return out;
}

FoldAssignment make_folds(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("k must be at least 2, got " + std::to_string(k));
  if (n < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("cannot split " + std::to_string(n) + " indices into " + std::to_string(k) + " folds");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  FoldAssignment a;
  a.k = k;
  a.seed = seed;
  a.fold_of.assign(n, -1);
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t extra = n % static_cast<std::size_t>(k);
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) a.fold_of[order[pos++]] = f;
  }
  return a;
}

std::pair<double, double> average_losses(std::span<const LossRecord> records) {
  if (records.empty()) throw std::invalid_argument("cannot average an empty record list");
  double train = 0.0;
  double val = 0.0;
  for (const auto& r : records) {
    train += r.train_loss;
    val += r.val_loss;
  }
  const auto n = static_cast<double>(records.size());
  return {train / n, val / n};
}

LossSummary summarize(LossUnit unit, std::vector<LossRecord> records) {
  LossSummary s;
  s.unit = unit;
  std::tie(s.avg_train, s.avg_val) = average_losses(records);
  s.records = std::move(records);
  return s;
}

double relative_improvement(double old_val_loss, double new_val_loss) {
  if (!(old_val_loss > 0.0)) throw std::invalid_argument("old validation loss must be positive");
  return (old_val_loss - new_val_loss) / old_val_loss * 100.0;
}

std::string to_string(Protocol p) { return p == Protocol::Baseline ? "baseline" : "kfcv"; }

Protocol protocol_from_string(const std::string& name) {
  if (name == "baseline") return Protocol::Baseline;
  if (name == "kfcv") return Protocol::Kfcv;
  throw std::invalid_argument("unknown protocol '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (k < 2) throw std::invalid_argument("k must be at least 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must be in (0, 1)");
  model.validate();
}

nlohmann::ordered_json to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["protocol"] = to_string(cfg.protocol);
  if (cfg.protocol == Protocol::Kfcv) {
    j["k"] = cfg.k;
    j["retrain_all"] = cfg.retrain_all;
  } else {
    j["train_fraction"] = cfg.train_fraction;
  }
  j["master_seed"] = cfg.master_seed;
  j["dataset"] = cfg.dataset_path.generic_string();
  j["model"] = to_json(cfg.model);
  j["model_config_hash"] = hash_hex(config_hash(cfg.model));
  return j;
}

std::uint64_t partition_seed(std::uint64_t master_seed) { return derive_seed(master_seed, 0x9a27'0001ULL); }

std::uint64_t model_seed(std::uint64_t master_seed, std::uint64_t ordinal) {
  return derive_seed(derive_seed(master_seed, 0x9a27'0002ULL), ordinal);
}

namespace {

std::vector<Example> gather(std::span<const Example> all, const std::vector<std::size_t>& which) {
  std::vector<Example> out;
  out.reserve(which.size());
  for (std::size_t i : which) out.push_back(all[i]);
  return out;
}

struct Trained {
  ModelParams params;
  std::vector<LossRecord> epochs;
};

// Fresh model, cfg.epochs epochs on train, validation on val after each epoch
// (skipped when val is empty).
Trained train_model(const std::vector<Example>& train, const std::vector<Example>& val, const ModelConfig& cfg,
                    std::uint64_t seed) {
  TrainState state(ModelParams::initialize(cfg, seed));
  std::vector<LossRecord> epochs;
  for (int e = 0; e < cfg.epochs; ++e) {
    double train_loss = 0.0;
    try {
      train_loss = train_epoch(state, train, cfg, derive_seed(seed, static_cast<std::uint64_t>(e) + 1));
    } catch (const TrainingFault& f) {
      throw TrainingFault("epoch " + std::to_string(e + 1) + ": " + f.what());
    }
    const double val_loss = val.empty() ? 0.0 : validate(state.params, val, cfg);
    epochs.push_back({e + 1, train_loss, val_loss});
  }
  return {std::move(state.params), std::move(epochs)};
}

}  // namespace

ExperimentResult run_kfcv(std::span<const DatasetIndex> dataset, const ExperimentConfig& cfg) {
  cfg.validate();
  const std::vector<Example> examples = make_examples(dataset, cfg.model);
  const FoldAssignment folds = make_folds(examples.size(), cfg.k, partition_seed(cfg.master_seed));
  ExperimentResult result;
  std::vector<LossRecord> records;
  for (int f = 0; f < cfg.k; ++f) {
    std::vector<std::size_t> val_ids = folds.members(f);
    std::vector<std::size_t> train_ids = folds.complement(f);
    // Protocol isolation: no validation index may be trained on in its round.
    std::vector<std::size_t> overlap;
    std::set_intersection(train_ids.begin(), train_ids.end(), val_ids.begin(), val_ids.end(),
                          std::back_inserter(overlap));
    if (!overlap.empty() || train_ids.size() + val_ids.size() != examples.size()) {
      throw std::logic_error("fold " + std::to_string(f + 1) + " leaks validation indices into training");
    }
    try {
      Trained t = train_model(gather(examples, train_ids), gather(examples, val_ids), cfg.model,
                              model_seed(cfg.master_seed, static_cast<std::uint64_t>(f)));
      records.push_back({f + 1, t.epochs.back().train_loss, t.epochs.back().val_loss});
      result.summary.trajectories.push_back(std::move(t.epochs));
      result.fold_models.push_back(std::move(t.params));
    } catch (const TrainingFault& e) {
      throw TrainingFault("fold " + std::to_string(f + 1) + ": " + e.what());
    }
    result.rounds.emplace_back(std::move(train_ids), std::move(val_ids));
  }
  auto trajectories = std::move(result.summary.trajectories);
  result.summary = summarize(LossUnit::Fold, std::move(records));
  result.summary.trajectories = std::move(trajectories);

  std::size_t best = 0;
  for (std::size_t i = 1; i < result.summary.records.size(); ++i) {
    if (result.summary.records[i].val_loss < result.summary.records[best].val_loss) best = i;
  }
  if (cfg.retrain_all) {
    std::vector<std::size_t> all(examples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    try {
      Trained t = train_model(gather(examples, all), {}, cfg.model,
                              model_seed(cfg.master_seed, static_cast<std::uint64_t>(cfg.k)));
      result.model = std::move(t.params);
    } catch (const TrainingFault& e) {
      throw TrainingFault(std::string("retrain-all: ") + e.what());
    }
  } else {
    result.summary.representative_fold = static_cast<int>(best) + 1;
    result.model = result.fold_models[best];
  }
  return result;
}

ExperimentResult run_baseline(std::span<const DatasetIndex> dataset, const ExperimentConfig& cfg) {
  cfg.validate();
  const std::vector<Example> examples = make_examples(dataset, cfg.model);
  if (examples.size() < 2) throw std::invalid_argument("baseline split needs at least 2 indices");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(partition_seed(cfg.master_seed));
  rng.shuffle(std::span<std::size_t>(order));
  auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(order.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, order.size() - 1);
  std::vector<std::size_t> train_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val_ids(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  Trained t = train_model(gather(examples, train_ids), gather(examples, val_ids), cfg.model,
                          model_seed(cfg.master_seed, 0));
  ExperimentResult result;
  result.summary = summarize(LossUnit::Epoch, std::move(t.epochs));
  result.model = std::move(t.params);
  result.rounds.emplace_back(std::move(train_ids), std::move(val_ids));
  return result;
}

ExperimentResult run_experiment(std::span<const DatasetIndex> dataset, const ExperimentConfig& cfg) {
  return cfg.protocol == Protocol::Kfcv ? run_kfcv(dataset, cfg) : run_baseline(dataset, cfg);
}

// ---------------------------------------------------------------------------
// Files

namespace {

nlohmann::ordered_json records_json(std::span<const LossRecord> records) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    arr.push_back({{"unit", r.unit}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}});
  }
  return arr;
}

std::vector<LossRecord> records_from_json(const nlohmann::json& arr) {
  std::vector<LossRecord> out;
  for (const auto& r : arr) {
    out.push_back({r.at("unit").get<int>(), r.at("train_loss").get<double>(), r.at("val_loss").get<double>()});
  }
  return out;
}

bool close(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)); }

}  // namespace

nlohmann::ordered_json summary_to_json(const LossSummary& s) {
  nlohmann::ordered_json j;
  j["unit"] = s.unit == LossUnit::Fold ? "fold" : "epoch";
  j["records"] = records_json(s.records);
  j["avg_train"] = s.avg_train;
  j["avg_val"] = s.avg_val;
  if (!s.trajectories.empty()) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& t : s.trajectories) arr.push_back(records_json(t));
    j["fold_trajectories"] = std::move(arr);
  }
  if (s.representative_fold) j["representative_fold"] = *s.representative_fold;
  return j;
}

LossSummary summary_from_json(const nlohmann::json& j) {
  LossSummary s;
  try {
    for (const char* key : {"unit", "records", "avg_train", "avg_val"}) {
      if (!j.contains(key)) throw SummaryFormatError(std::string("summary missing field '") + key + "'");
    }
    const auto unit = j.at("unit").get<std::string>();
    if (unit != "fold" && unit != "epoch") throw SummaryFormatError("summary unit must be 'fold' or 'epoch'");
    s.unit = unit == "fold" ? LossUnit::Fold : LossUnit::Epoch;
    s.records = records_from_json(j.at("records"));
    s.avg_train = j.at("avg_train").get<double>();
    s.avg_val = j.at("avg_val").get<double>();
    if (j.contains("fold_trajectories")) {
      for (const auto& t : j.at("fold_trajectories")) s.trajectories.push_back(records_from_json(t));
    }
    if (j.contains("representative_fold")) s.representative_fold = j.at("representative_fold").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw SummaryFormatError(std::string("malformed summary: ") + e.what());
  }
  if (s.records.empty()) throw SummaryFormatError("summary has no records");
  const auto [train, val] = average_losses(s.records);
  if (!close(train, s.avg_train) || !close(val, s.avg_val)) {
    throw SummaryFormatError("summary averages do not match its records");
  }
  return s;
}

LossSummary read_summary(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SummaryFormatError(path.string() + ": " + e.what());
  }
  if (j.contains("summary")) return summary_from_json(j.at("summary"));
  return summary_from_json(j);
}

void write_summary(const LossSummary& summary, const std::filesystem::path& path,
                   const nlohmann::ordered_json& extra) {
  nlohmann::ordered_json j;
  j["summary"] = summary_to_json(summary);
  for (const auto& [key, value] : extra.items()) j[key] = value;
  write_file(path, j.dump(2) + "\n");
}

std::string loss_csv(std::span<const LossRecord> records) {
  std::string out = "unit,train_loss,val_loss\n";
  for (const auto& r : records) {
    out += std::to_string(r.unit) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "\n";
  }
  return out;
}

std::vector<LossRecord> parse_loss_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "unit,train_loss,val_loss") {
    throw std::runtime_error("loss CSV header must be 'unit,train_loss,val_loss'");
  }
  std::vector<LossRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRecord r;
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw std::runtime_error("bad loss CSV row: " + line);
    r.unit = std::stoi(line.substr(0, a));
    r.train_loss = std::stod(line.substr(a + 1, b - a - 1));
    r.val_loss = std::stod(line.substr(b + 1));
    out.push_back(r);
  }
  return out;
}

void write_experiment(const ExperimentResult& result, const ExperimentConfig& cfg) {
  const auto& dir = cfg.output_dir;
  nlohmann::ordered_json extra;
  extra["protocol"] = to_string(cfg.protocol);
  extra["config"] = to_json(cfg);
  auto notes = nlohmann::ordered_json::array();
  if (cfg.protocol == Protocol::Kfcv) {
    notes.push_back("per-fold train loss is the fold's final-epoch training loss");
    notes.push_back("epochs apply per fold: k x epochs training passes in total");
    notes.push_back(cfg.retrain_all ? "downstream checkpoint: model retrained on all folds"
                                    : "downstream checkpoint: fold with the lowest validation loss");
  } else {
    notes.push_back("validation split is evaluated after every epoch");
  }
  notes.push_back("losses are token-mean cross-entropy");
  extra["notes"] = std::move(notes);
  write_summary(result.summary, dir / "summary.json", extra);
  write_file(dir / "epochs.csv", loss_csv(result.summary.records));
  for (std::size_t f = 0; f < result.summary.trajectories.size(); ++f) {
    const auto fold_dir = dir / ("fold_" + std::to_string(f + 1));
    write_file(fold_dir / "epochs.csv", loss_csv(result.summary.trajectories[f]));
    if (f < result.fold_models.size()) save_checkpoint(result.fold_models[f], fold_dir / "checkpoint");
  }
  if (result.model) save_checkpoint(*result.model, dir / "checkpoint");
}

}  // namespace symkfcv

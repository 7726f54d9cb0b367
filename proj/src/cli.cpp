#include "symkfcv/cli.hpp"

#include <chrono>
#include <ctime>
#include <functional>
#include <map>
#include <ostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "symkfcv/checkpoint.hpp"
#include "symkfcv/datagen.hpp"
#include "symkfcv/eval.hpp"
#include "symkfcv/io.hpp"
#include "symkfcv/kfold.hpp"
#include "symkfcv/model.hpp"

namespace symkfcv {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class F>
auto usage_checked(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Options of one subcommand, each also settable from the --config JSON object.
// Keys use the flag spelling, with '_' accepted for '-'.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON object of flag values; explicit flags win");
  }

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    CLI::Option* opt = app_->add_option("--" + name, var, desc);
    bindings_[name] = {opt, [&var](const json& j) { var = j.get<T>(); }};
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    CLI::Option* opt = app_->add_flag("--" + name, var, desc);
    bindings_[name] = {opt, [&var](const json& j) { var = j.get<bool>(); }};
    return opt;
  }

  void require(std::initializer_list<const char*> names) { required_.insert(required_.end(), names.begin(), names.end()); }

  bool given(const std::string& name) const {
    return bindings_.at(name).opt->count() > 0 || from_config_.count(name) > 0;
  }

  /// Applies --config and checks required flags. Throws UsageError.
  void finish() {
    if (!config_path_.empty()) {
      json j;
      try {
        j = json::parse(read_file(config_path_));
      } catch (const json::parse_error& e) {
        throw UsageError("--config " + config_path_ + ": " + e.what());
      }
      if (!j.is_object()) throw UsageError("--config must hold a JSON object");
      for (const auto& [raw, value] : j.items()) {
        std::string key = raw;
        std::replace(key.begin(), key.end(), '_', '-');
        auto it = bindings_.find(key);
        if (it == bindings_.end()) throw UsageError("--config: unknown key '" + raw + "'");
        if (it->second.opt->count() > 0) continue;
        try {
          it->second.set(value);
        } catch (const json::exception& e) {
          throw UsageError("--config: bad value for '" + raw + "': " + e.what());
        }
        from_config_.insert(key);
      }
    }
    for (const auto& name : required_) {
      if (!given(name)) throw UsageError("--" + name + " is required");
    }
  }

  const std::string& config_path() const { return config_path_; }

 private:
  struct Binding {
    CLI::Option* opt = nullptr;
    std::function<void(const json&)> set;
  };
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, Binding> bindings_;
  std::vector<std::string> required_;
  std::set<std::string> from_config_;
};

// Written before long-running work and rewritten with the finish time.
class Manifest {
 public:
  Manifest(fs::path path, const std::string& command, const std::vector<std::string>& args) : path_(std::move(path)) {
    std::string line = "symkfcv";
    for (const auto& a : args) line += " " + a;
    j_["command"] = command;
    j_["command_line"] = line;
    j_["argv"] = args;
    j_["tool_version"] = kToolVersion;
  }

  ordered_json& operator[](const char* key) { return j_[key]; }

  void start() {
    j_["started_at"] = utc_now();
    write_file(path_, j_.dump(2) + "\n");
  }

  void finish() {
    j_["finished_at"] = utc_now();
    write_file(path_, j_.dump(2) + "\n");
  }

 private:
  fs::path path_;
  ordered_json j_;
};

struct ModelOverrides {
  std::string preset = "desk";
  int k = 5;
  int epochs = 0, batch_size = 0, embed_dim = 0, layers = 0, heads = 0, context = 0;
  double lr = 0.0, dropout = 0.0;
  std::string optimizer;

  void attach(Flags& f) {
    f.add("preset", preset, "model preset: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    f.add("epochs", epochs, "training epochs (per fold under kfcv)");
    f.add("batch-size", batch_size, "minibatch size");
    f.add("embed-dim", embed_dim, "embedding width");
    f.add("layers", layers, "decoder layers");
    f.add("heads", heads, "attention heads");
    f.add("context", context, "decoder context length");
    f.add("lr", lr, "learning rate");
    f.add("dropout", dropout, "dropout rate");
    f.add("optimizer", optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  }

  ModelConfig build(const Flags& f) const {
    if (preset != "desk" && preset != "paper") throw UsageError("--preset must be desk or paper");
    ModelConfig cfg = preset == "paper" ? ModelConfig::paper() : ModelConfig::desk();
    if (f.given("epochs")) cfg.epochs = epochs;
    if (f.given("batch-size")) cfg.batch_size = batch_size;
    if (f.given("embed-dim")) cfg.embed_dim = embed_dim;
    if (f.given("layers")) cfg.layers = layers;
    if (f.given("heads")) cfg.heads = heads;
    if (f.given("context")) cfg.context = context;
    if (f.given("lr")) cfg.learning_rate = lr;
    if (f.given("dropout")) cfg.dropout = dropout;
    if (f.given("optimizer")) {
      if (optimizer != "adam" && optimizer != "sgd") throw UsageError("--optimizer must be adam or sgd");
      cfg.optimizer = optimizer == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
    }
    usage_checked([&] { cfg.validate(); });
    return cfg;
  }
};

// ---------------------------------------------------------------------------

struct GenerateCmd {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string out;
  GrammarConfig grammar;

  void attach(Flags& f) {
    f.add("count", count, "number of indices");
    f.add("seed", seed, "master seed");
    f.add("out", out, "output JSONL path");
    f.add("max-depth", grammar.max_depth, "maximum expression depth");
    f.add("min-points", grammar.min_points, "fewest points per index");
    f.add("max-points", grammar.max_points, "most points per index");
    f.add("x-min", grammar.x_lo, "lower end of the x range");
    f.add("x-max", grammar.x_hi, "upper end of the x range");
    f.add("const-min", grammar.const_lo, "lower end of the constant range");
    f.add("const-max", grammar.const_hi, "upper end of the constant range");
    f.add("decimals", grammar.constant_decimals, "decimals kept on sampled constants (-1 keeps all)");
    f.require({"count", "seed", "out"});
  }

  int run(const std::vector<std::string>& args, std::ostream& out_stream) {
    usage_checked([&] { grammar.validate(); });
    Manifest m(fs::path(out + ".manifest.json"), "generate", args);
    ordered_json g;
    g["max_depth"] = grammar.max_depth;
    g["weights"] = grammar.weights;
    g["const_range"] = {grammar.const_lo, grammar.const_hi};
    g["constant_decimals"] = grammar.constant_decimals;
    g["points"] = {grammar.min_points, grammar.max_points};
    g["x_range"] = {grammar.x_lo, grammar.x_hi};
    g["variable_count"] = grammar.variable_count;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : g.dump()) h = (h ^ c) * 0x100000001b3ULL;
    m["config"] = g;
    m["config_hash"] = hash_hex(h);
    m["seed"] = seed;
    m["inputs"] = ordered_json::array();
    m["outputs"] = {out};
    m.start();
    const GeneratedDataset data = generate_dataset(grammar, count, seed);
    write_dataset(data.indices, out);
    const double attempts = static_cast<double>(data.indices.size() + data.rejected);
    const double rate = attempts > 0 ? static_cast<double>(data.rejected) / attempts : 0.0;
    m["rejected"] = data.rejected;
    m.finish();
    out_stream << "wrote " << data.indices.size() << " indices to " << out << " (rejected " << data.rejected
               << ", rejection rate " << rate << ")\n";
    return kExitOk;
  }
};

struct SubsampleCmd {
  std::string data, out;
  std::size_t count = 0;
  std::uint64_t seed = 0;

  void attach(Flags& f) {
    f.add("data", data, "source JSONL dataset");
    f.add("count", count, "indices to keep");
    f.add("seed", seed, "sampling seed");
    f.add("out", out, "output JSONL path");
    f.require({"data", "count", "seed", "out"});
  }

  int run(const std::vector<std::string>& args, std::ostream& out_stream) {
    Manifest m(fs::path(out + ".manifest.json"), "subsample", args);
    m["seed"] = seed;
    m["inputs"] = {data};
    m["outputs"] = {out};
    m.start();
    const auto source = read_dataset(data);
    const auto kept = usage_checked([&] { return subsample(source, count, seed); });
    write_dataset(kept, out);
    m.finish();
    out_stream << "kept " << kept.size() << " of " << source.size() << " indices in " << out << "\n";
    return kExitOk;
  }
};

struct TrainCmd {
  std::string protocol, data, out;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  bool retrain_all = false;
  ModelOverrides model;

  void attach(Flags& f) {
    f.add("protocol", protocol, "baseline (80/20 split) or kfcv")->check(CLI::IsMember({"baseline", "kfcv"}));
    f.add("data", data, "JSONL dataset");
    f.add("seed", seed, "master seed");
    f.add("out", out, "output directory");
    f.add("k", model.k, "number of folds (kfcv)");
    f.add("train-fraction", train_fraction, "training share of the baseline split");
    f.flag("retrain-all", retrain_all, "after kfcv, train one model on every index for downstream use");
    model.attach(f);
    f.require({"protocol", "data", "seed", "out"});
  }

  int run(const Flags& f, const std::vector<std::string>& args, std::ostream& out_stream) {
    ExperimentConfig cfg;
    cfg.protocol = usage_checked([&] { return protocol_from_string(protocol); });
    cfg.k = model.k;
    cfg.train_fraction = train_fraction;
    cfg.retrain_all = retrain_all;
    cfg.model = model.build(f);
    cfg.master_seed = seed;
    cfg.dataset_path = data;
    cfg.output_dir = out;
    usage_checked([&] { cfg.validate(); });

    fs::create_directories(out);
    Manifest m(fs::path(out) / "manifest.json", "train", args);
    m["config"] = to_json(cfg.model);
    m["config_hash"] = hash_hex(config_hash(cfg.model));
    m["experiment"] = to_json(cfg);
    m["seed"] = seed;
    m["inputs"] = {data};
    m["outputs"] = {out};
    m.start();

    const auto dataset = read_dataset(data);
    const ExperimentResult result = run_experiment(dataset, cfg);
    write_experiment(result, cfg);
    write_file(fs::path(out) / "learning_curve.csv", learning_curve_csv(result.summary));
    m.finish();
    out_stream << to_string(cfg.protocol) << ": " << result.summary.records.size() << " records, avg train "
               << format_double(result.summary.avg_train) << ", avg val " << format_double(result.summary.avg_val)
               << "\n";
    return kExitOk;
  }
};

struct EvaluateCmd {
  std::string checkpoint, data, out, baseline_summary, kfcv_summary;
  std::uint64_t seed = 0;
  std::size_t limit = 0;
  bool plots = false;
  FitBudget budget;
  ModelOverrides model;

  void attach(Flags& f) {
    f.add("checkpoint", checkpoint, "model checkpoint");
    f.add("data", data, "JSONL dataset to score");
    f.add("out", out, "output directory");
    f.add("seed", seed, "seed for constant-fitting restarts");
    f.add("limit", limit, "score only the first N indices (0 = all)");
    f.add("restarts", budget.restarts, "random restarts for constant fitting");
    f.add("max-iterations", budget.max_iterations, "iterations per fitting start");
    f.add("baseline-summary", baseline_summary, "baseline summary.json to include in the report");
    f.add("kfcv-summary", kfcv_summary, "kfcv summary.json to include in the report");
    f.flag("plots", plots, "also write SVG plots");
    model.attach(f);
    f.require({"checkpoint", "data", "out", "seed"});
  }

  int run(const Flags& f, const std::vector<std::string>& args, std::ostream& out_stream) {
    // A preset (plus overrides) turns on the config-hash check.
    std::optional<std::uint64_t> expected;
    const bool check = f.given("preset") || f.given("epochs") || f.given("batch-size") || f.given("embed-dim") ||
                       f.given("layers") || f.given("heads") || f.given("context") || f.given("lr") ||
                       f.given("dropout") || f.given("optimizer");
    if (check) expected = config_hash(model.build(f));
    if (budget.restarts < 0 || budget.max_iterations < 1) throw UsageError("invalid fitting budget");

    fs::create_directories(out);
    Manifest m(fs::path(out) / "manifest.json", "evaluate", args);
    m["seed"] = seed;
    ordered_json inputs = {checkpoint, data};
    if (!baseline_summary.empty()) inputs.push_back(baseline_summary);
    if (!kfcv_summary.empty()) inputs.push_back(kfcv_summary);
    m["inputs"] = inputs;
    m["outputs"] = {out};
    m.start();

    const ModelParams params = load_checkpoint(checkpoint, expected);
    m["config"] = to_json(params.config());
    m["config_hash"] = hash_hex(config_hash(params.config()));
    auto dataset = read_dataset(data, params.config().variable_count);
    if (limit > 0 && limit < dataset.size()) dataset.resize(limit);
    if (dataset.empty()) throw std::runtime_error("no indices to evaluate in " + data);

    ReportInputs report;
    report.scores = score_dataset(params, dataset, budget, seed);
    report.curve = cumulative_curve(report.scores);
    report.plots = plots;
    if (!baseline_summary.empty()) report.baseline = read_summary(baseline_summary);
    if (!kfcv_summary.empty()) report.kfcv = read_summary(kfcv_summary);
    emit_report(report, out);
    m.finish();

    std::size_t faulted = 0;
    for (const auto& s : report.scores) faulted += s.faulted;
    out_stream << "scored " << report.scores.size() << " indices (" << faulted << " faulted); report in " << out
               << "\n";
    return kExitOk;
  }
};

struct CompareCmd {
  std::string old_path, new_path, out;

  void attach(Flags& f) {
    f.add("old", old_path, "summary.json of the reference run");
    f.add("new", new_path, "summary.json of the candidate run");
    f.add("out", out, "output JSON path");
    f.require({"old", "new", "out"});
  }

  int run(std::ostream& out_stream) {
    const LossSummary a = read_summary(old_path);
    const LossSummary b = read_summary(new_path);
    if (!(a.avg_val > 0.0)) throw SummaryFormatError(old_path + ": average validation loss must be positive");
    auto block = [](const LossSummary& s, const std::string& path) {
      ordered_json j;
      j["path"] = path;
      j["unit"] = s.unit == LossUnit::Epoch ? "epoch" : "fold";
      j["records"] = s.records.size();
      j["avg_train_loss"] = s.avg_train;
      j["avg_val_loss"] = s.avg_val;
      return j;
    };
    ordered_json j;
    j["old"] = block(a, old_path);
    j["new"] = block(b, new_path);
    const double improvement = relative_improvement(a.avg_val, b.avg_val);
    j["relative_improvement_percent"] = improvement;
    j["formula"] = "(old_avg_val - new_avg_val) / old_avg_val * 100";
    write_file(out, j.dump(2) + "\n");
    out_stream << "relative improvement " << format_double(improvement) << "%\n";
    return kExitOk;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"k-fold cross-validation workbench for transformer symbolic regression", "symkfcv"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GenerateCmd gen;
  SubsampleCmd sub;
  TrainCmd train;
  EvaluateCmd eval;
  CompareCmd cmp;
  auto* gen_app = app.add_subcommand("generate", "sample a synthetic JSONL dataset");
  auto* sub_app = app.add_subcommand("subsample", "draw a seeded subset of a dataset");
  auto* train_app = app.add_subcommand("train", "train under the baseline or k-fold protocol");
  auto* eval_app = app.add_subcommand("evaluate", "score a checkpoint and write curves and report.json");
  auto* cmp_app = app.add_subcommand("compare", "relative improvement between two summary.json files");
  Flags gen_f(gen_app), sub_f(sub_app), train_f(train_app), eval_f(eval_app), cmp_f(cmp_app);
  gen.attach(gen_f);
  sub.attach(sub_f);
  train.attach(train_f);
  eval.attach(eval_f);
  cmp.attach(cmp_f);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_app->parsed()) {
      gen_f.finish();
      return gen.run(args, out);
    }
    if (sub_app->parsed()) {
      sub_f.finish();
      return sub.run(args, out);
    }
    if (train_app->parsed()) {
      train_f.finish();
      return train.run(train_f, args, out);
    }
    if (eval_app->parsed()) {
      eval_f.finish();
      return eval.run(eval_f, args, out);
    }
    cmp_f.finish();
    return cmp.run(out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFault;
  }
}

}  // namespace symkfcv

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "symkfcv/datagen.hpp"
#include "symkfcv/vocabulary.hpp"

namespace symkfcv {

enum class OptimizerKind { Sgd, Adam };

struct ModelConfig {
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int context = 32;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 10;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  int vocab_size = static_cast<int>(Vocabulary::standard().size());
  int variable_count = 1;
  /// Point sets longer than this are truncated to their first max_points points.
  int max_points = 200;
  int ffn_mult = 4;
  OptimizerKind optimizer = OptimizerKind::Adam;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;

  /// Workstation-scale preset used by tests and the acceptance suite.
  static ModelConfig desk();
  /// Embedding 512, batch 128, 20 epochs.
  static ModelConfig paper();

  int point_features() const { return variable_count + 1; }
  int head_dim() const { return embed_dim / heads; }

  /// Throws std::invalid_argument on non-positive counts or embed_dim % heads != 0.
  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
/// FNV-1a over the canonical JSON serialization of the config.
std::uint64_t config_hash(const ModelConfig& cfg);
std::string hash_hex(std::uint64_t hash);

/// Offsets of every tensor inside the flat parameter vector. Weight matrices
/// are stored input-major ([in][out]).
struct ParamLayout {
  struct Tensor {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;
    std::size_t size() const;
  };
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
  };

  std::size_t enc_w1, enc_b1, enc_w2, enc_b2, enc_proj_w, enc_proj_b;
  std::size_t tok_emb, pos_emb;
  std::vector<Layer> layers;
  std::size_t lnf_g, lnf_b, out_w, out_b;
  std::size_t total = 0;
  std::vector<Tensor> tensors;

  explicit ParamLayout(const ModelConfig& cfg);
};

/// Stage-1 and stage-2 weights in one flat vector.
class ModelParams {
 public:
  /// All-zero parameters (layer-norm gains included).
  explicit ModelParams(const ModelConfig& cfg);

  /// Weights and embeddings ~ U(-0.08, 0.08); biases zero; layer-norm gain 1;
  /// output projection zero so the initial next-token distribution is uniform.
  static ModelParams initialize(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> values_;
};

/// Model-ready form of a dataset index: per-point features (x..., asinh(y))
/// and the skeleton's prefix token ids.
struct Example {
  std::vector<double> features;  // [points][point_features]
  std::size_t point_count = 0;
  std::vector<int> tokens;
};

/// Encoder input rows (x..., asinh(y)) for at most cfg.max_points points.
std::vector<double> point_features(std::span<const Point> points, const ModelConfig& cfg);

Example make_example(const DatasetIndex& index, const ModelConfig& cfg);
std::vector<Example> make_examples(std::span<const DatasetIndex> indices, const ModelConfig& cfg);

/// Padded batch. Row b of `targets` holds the skeleton tokens followed by the
/// end marker, then pad; `target_mask` flags the positions that count in the loss.
struct Batch {
  std::size_t size = 0;
  int max_points = 0;
  int point_features = 0;
  int max_len = 0;
  std::vector<double> points;               // [size][max_points][point_features]
  std::vector<unsigned char> point_mask;    // [size][max_points]
  std::vector<int> targets;                 // [size][max_len]
  std::vector<unsigned char> target_mask;   // [size][max_len]
};

/// Throws std::invalid_argument when a skeleton needs more than context - 1 tokens.
Batch make_batch(std::span<const Example> examples, const ModelConfig& cfg);

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Permutation-invariant embedding: shared per-point MLP, max-pool over the
/// valid points, linear projection. `points` is [n][point_features]; rows with
/// mask 0 are ignored. Throws ModelError when no point is valid.
std::vector<double> encode(const ModelParams& params, std::span<const double> points,
                           std::span<const unsigned char> mask);
std::vector<double> encode(const ModelParams& params, const Example& example);

/// Logits for every position of [embedding, tokens...]; row t predicts token t+1.
/// Returns a (tokens.size()+1) x vocab row-major matrix.
std::vector<double> logits(const ModelParams& params, std::span<const double> embedding,
                           std::span<const int> tokens);

/// Next-token distribution after `prefix`. Throws ModelError when
/// prefix.size() >= context.
std::vector<double> decode_step(const ModelParams& params, std::span<const double> embedding,
                                std::span<const int> prefix);

struct GenerateMode {
  bool greedy = true;
  std::uint64_t seed = 0;
  static GenerateMode sample(std::uint64_t seed) { return {false, seed}; }
};

/// Token ids up to (excluding) the end marker, at most max_length long.
std::vector<int> generate(const ModelParams& params, std::span<const double> embedding, int max_length,
                          GenerateMode mode = {});

/// Mean token cross-entropy over the unmasked targets of the batch.
double loss(const ModelParams& params, const Batch& batch);

struct LossSums {
  double total = 0.0;     // summed token cross-entropy
  std::size_t tokens = 0; // unmasked targets
  double mean() const { return tokens ? total / static_cast<double>(tokens) : 0.0; }
};

/// Mean loss plus its gradient (same layout as the parameters). Dropout, when
/// configured, is driven by dropout_seed; pass nullopt for deterministic
/// evaluation-mode gradients.
LossSums loss_and_gradient(const ModelParams& params, const Batch& batch, std::span<double> gradient,
                           std::optional<std::uint64_t> dropout_seed = std::nullopt);

class TrainingFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainState {
  ModelParams params;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;

  explicit TrainState(ModelParams p);
};

/// One pass over `shard` in a seeded shuffled order. Returns the epoch's
/// token-weighted mean batch loss (measured before each update).
double train_epoch(TrainState& state, std::span<const Example> shard, const ModelConfig& cfg,
                   std::uint64_t seed);

/// Token-mean cross-entropy over the shard, no updates.
double validate(const ModelParams& params, std::span<const Example> shard, const ModelConfig& cfg);

}  // namespace symkfcv

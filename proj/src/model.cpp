#include "symkfcv/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "symkfcv/parallel.hpp"
#include "symkfcv/random.hpp"

namespace symkfcv {

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig cfg;
  cfg.embed_dim = 512;
  cfg.batch_size = 128;
  cfg.epochs = 20;
  cfg.layers = 8;
  cfg.heads = 8;
  return cfg;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  positive(embed_dim, "embed_dim");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(context, "context");
  positive(batch_size, "batch_size");
  positive(epochs, "epochs");
  positive(vocab_size, "vocab_size");
  positive(variable_count, "variable_count");
  positive(max_points, "max_points");
  positive(ffn_mult, "ffn_mult");
  if (embed_dim % heads != 0) throw std::invalid_argument("embed_dim must be divisible by heads");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be >= 0");
}

nlohmann::ordered_json to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["embed_dim"] = cfg.embed_dim;
  j["layers"] = cfg.layers;
  j["heads"] = cfg.heads;
  j["context"] = cfg.context;
  j["learning_rate"] = cfg.learning_rate;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["dropout"] = cfg.dropout;
  j["seed"] = cfg.seed;
  j["vocab_size"] = cfg.vocab_size;
  j["variable_count"] = cfg.variable_count;
  j["max_points"] = cfg.max_points;
  j["ffn_mult"] = cfg.ffn_mult;
  j["optimizer"] = cfg.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  j["grad_clip"] = cfg.grad_clip;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  auto read = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  read("embed_dim", cfg.embed_dim);
  read("layers", cfg.layers);
  read("heads", cfg.heads);
  read("context", cfg.context);
  read("learning_rate", cfg.learning_rate);
  read("batch_size", cfg.batch_size);
  read("epochs", cfg.epochs);
  read("dropout", cfg.dropout);
  read("seed", cfg.seed);
  read("vocab_size", cfg.vocab_size);
  read("variable_count", cfg.variable_count);
  read("max_points", cfg.max_points);
  read("ffn_mult", cfg.ffn_mult);
  read("grad_clip", cfg.grad_clip);
  if (j.contains("optimizer")) {
    const auto name = j.at("optimizer").get<std::string>();
    if (name == "adam") cfg.optimizer = OptimizerKind::Adam;
    else if (name == "sgd") cfg.optimizer = OptimizerKind::Sgd;
    else throw std::invalid_argument("unknown optimizer '" + name + "'");
  }
  return cfg;
}

std::uint64_t config_hash(const ModelConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << hash;
  return out.str();
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t ParamLayout::Tensor::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto in = static_cast<std::size_t>(cfg.point_features());
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto t = static_cast<std::size_t>(cfg.context);
  const auto f = d * static_cast<std::size_t>(cfg.ffn_mult);
  auto add = [this](std::string name, std::vector<std::size_t> shape) {
    Tensor tensor{std::move(name), total, std::move(shape)};
    total += tensor.size();
    tensors.push_back(tensor);
    return tensor.offset;
  };
  enc_w1 = add("encoder.w1", {in, d});
  enc_b1 = add("encoder.b1", {d});
  enc_w2 = add("encoder.w2", {d, d});
  enc_b2 = add("encoder.b2", {d});
  enc_proj_w = add("encoder.proj_w", {d, d});
  enc_proj_b = add("encoder.proj_b", {d});
  tok_emb = add("decoder.token_embedding", {v, d});
  pos_emb = add("decoder.position_embedding", {t, d});
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(p + "ln1_gain", {d});
    L.ln1_b = add(p + "ln1_bias", {d});
    L.wq = add(p + "wq", {d, d});
    L.bq = add(p + "bq", {d});
    L.wk = add(p + "wk", {d, d});
    L.bk = add(p + "bk", {d});
    L.wv = add(p + "wv", {d, d});
    L.bv = add(p + "bv", {d});
    L.wo = add(p + "wo", {d, d});
    L.bo = add(p + "bo", {d});
    L.ln2_g = add(p + "ln2_gain", {d});
    L.ln2_b = add(p + "ln2_bias", {d});
    L.w_ff1 = add(p + "ff1_w", {d, f});
    L.b_ff1 = add(p + "ff1_b", {f});
    L.w_ff2 = add(p + "ff2_w", {f, d});
    L.b_ff2 = add(p + "ff2_b", {d});
    layers.push_back(L);
  }
  lnf_g = add("decoder.final_ln_gain", {d});
  lnf_b = add("decoder.final_ln_bias", {d});
  out_w = add("decoder.out_w", {d, v});
  out_b = add("decoder.out_b", {v});
}

ModelParams::ModelParams(const ModelConfig& cfg) : config_(cfg), layout_(cfg), values_(layout_.total, 0.0) {}

ModelParams ModelParams::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p(cfg);
  Rng rng(seed);
  for (const auto& t : p.layout_.tensors) {
    const bool gain = t.name.ends_with("_gain");
    const bool bias = t.shape.size() == 1 && !gain;
    const bool output = t.name.starts_with("decoder.out_");
    for (std::size_t i = 0; i < t.size(); ++i) {
      double& v = p.values_[t.offset + i];
      if (gain) v = 1.0;
      else if (bias || output) v = 0.0;
      else v = rng.uniform(-0.08, 0.08);
    }
  }
  return p;
}

std::span<double> ModelParams::tensor(std::string_view name) {
  for (const auto& t : layout_.tensors) {
    if (t.name == name) return std::span<double>(values_).subspan(t.offset, t.size());
  }
  throw std::out_of_range("no tensor named " + std::string(name));
}

std::span<const double> ModelParams::tensor(std::string_view name) const {
  return const_cast<ModelParams*>(this)->tensor(name);
}

// ---------------------------------------------------------------------------
// Examples and batches

std::vector<double> point_features(std::span<const Point> points, const ModelConfig& cfg) {
  const std::size_t count = std::min(points.size(), static_cast<std::size_t>(cfg.max_points));
  std::vector<double> out;
  out.reserve(count * static_cast<std::size_t>(cfg.point_features()));
  for (std::size_t p = 0; p < count; ++p) {
    const Point& pt = points[p];
    if (pt.x.size() != static_cast<std::size_t>(cfg.variable_count)) {
      throw std::invalid_argument("point dimension does not match variable_count");
    }
    out.insert(out.end(), pt.x.begin(), pt.x.end());
    out.push_back(std::asinh(pt.y));
  }
  return out;
}

Example make_example(const DatasetIndex& index, const ModelConfig& cfg) {
  Example ex;
  ex.features = point_features(index.points, cfg);
  ex.point_count = ex.features.size() / static_cast<std::size_t>(cfg.point_features());
  ex.tokens = tokenize(parse_skeleton(index.skeleton, cfg.variable_count), Vocabulary::standard(cfg.variable_count));
  return ex;
}

std::vector<Example> make_examples(std::span<const DatasetIndex> indices, const ModelConfig& cfg) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (const auto& idx : indices) out.push_back(make_example(idx, cfg));
  return out;
}

Batch make_batch(std::span<const Example> examples, const ModelConfig& cfg) {
  Batch b;
  b.size = examples.size();
  b.max_points = cfg.max_points;
  b.point_features = cfg.point_features();
  b.max_len = cfg.context;
  const auto mp = static_cast<std::size_t>(b.max_points);
  const auto nf = static_cast<std::size_t>(b.point_features);
  const auto ml = static_cast<std::size_t>(b.max_len);
  b.points.assign(b.size * mp * nf, 0.0);
  b.point_mask.assign(b.size * mp, 0);
  b.targets.assign(b.size * ml, Vocabulary::kPad);
  b.target_mask.assign(b.size * ml, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    const Example& ex = examples[i];
    if (ex.tokens.size() + 1 > ml) {
      throw std::invalid_argument("skeleton of " + std::to_string(ex.tokens.size()) +
                                  " tokens does not fit context " + std::to_string(ml));
    }
    const std::size_t np = std::min(ex.point_count, mp);
    std::copy_n(ex.features.begin(), np * nf, b.points.begin() + static_cast<std::ptrdiff_t>(i * mp * nf));
    std::fill_n(b.point_mask.begin() + static_cast<std::ptrdiff_t>(i * mp), np, 1);
    for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
      b.targets[i * ml + t] = ex.tokens[t];
      b.target_mask[i * ml + t] = 1;
    }
    b.targets[i * ml + ex.tokens.size()] = Vocabulary::kEnd;
    b.target_mask[i * ml + ex.tokens.size()] = 1;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Kernels. Matrices are row-major; weights are [in][out].

namespace {

constexpr double kLayerNormEps = 1e-5;

// out[r][o] = b[o] + sum_i in[r][i] * w[i][o]
void linear(const double* in, std::size_t rows, std::size_t in_dim, const double* w, const double* b,
            std::size_t out_dim, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * out_dim;
    if (b) std::copy_n(b, out_dim, o);
    else std::fill_n(o, out_dim, 0.0);
    const double* x = in + r * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) {
      const double a = x[i];
      const double* wi = w + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += a * wi[j];
    }
  }
}

// Accumulates dw, db and (if din != nullptr) din from dout.
void linear_backward(const double* in, std::size_t rows, std::size_t in_dim, const double* w,
                     std::size_t out_dim, const double* dout, double* dw, double* db, double* din) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = dout + r * out_dim;
    const double* x = in + r * in_dim;
    if (db) {
      for (std::size_t j = 0; j < out_dim; ++j) db[j] += g[j];
    }
    for (std::size_t i = 0; i < in_dim; ++i) {
      const double a = x[i];
      double* dwi = dw + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) dwi[j] += a * g[j];
    }
    if (din) {
      double* dx = din + r * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) {
        const double* wi = w + i * out_dim;
        double s = 0.0;
        for (std::size_t j = 0; j < out_dim; ++j) s += wi[j] * g[j];
        dx[i] += s;
      }
    }
  }
}

void layer_norm(const double* x, std::size_t rows, std::size_t dim, const double* gain, const double* bias,
                double* xhat, double* rstd, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * dim;
    double mean = 0.0;
    for (std::size_t j = 0; j < dim; ++j) mean += xr[j];
    mean /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t j = 0; j < dim; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(dim);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < dim; ++j) {
      const double h = (xr[j] - mean) * rs;
      xhat[r * dim + j] = h;
      out[r * dim + j] = h * gain[j] + bias[j];
    }
  }
}

// Accumulates dgain, dbias and dx.
void layer_norm_backward(const double* xhat, const double* rstd, std::size_t rows, std::size_t dim,
                         const double* gain, const double* dout, double* dgain, double* dbias, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = dout + r * dim;
    const double* h = xhat + r * dim;
    double mean_d = 0.0;
    double mean_dh = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      dgain[j] += g[j] * h[j];
      dbias[j] += g[j];
      const double dh = g[j] * gain[j];
      mean_d += dh;
      mean_dh += dh * h[j];
    }
    mean_d /= static_cast<double>(dim);
    mean_dh /= static_cast<double>(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      const double dh = g[j] * gain[j];
      dx[r * dim + j] += rstd[r] * (dh - mean_d - h[j] * mean_dh);
    }
  }
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluK * (u + kGeluC * u * u * u))); }

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluK * (u + kGeluC * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * u * u);
}

void softmax_inplace(double* v, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - m);
    s += v[i];
  }
  for (std::size_t i = 0; i < n; ++i) v[i] /= s;
}

// ---------------------------------------------------------------------------
// Forward/backward for one sample, with cached activations.

struct Dims {
  std::size_t d, h, dh, f, v, t, in;
  explicit Dims(const ModelConfig& c)
      : d(static_cast<std::size_t>(c.embed_dim)),
        h(static_cast<std::size_t>(c.heads)),
        dh(static_cast<std::size_t>(c.head_dim())),
        f(static_cast<std::size_t>(c.embed_dim * c.ffn_mult)),
        v(static_cast<std::size_t>(c.vocab_size)),
        t(static_cast<std::size_t>(c.context)),
        in(static_cast<std::size_t>(c.point_features())) {}
};

struct EncoderCache {
  std::size_t rows = 0;
  std::vector<double> feats, pre1, act1, pre2, act2, pooled;
  std::vector<std::size_t> argmax;
};

struct LayerCache {
  std::vector<double> x_in, ln1_hat, ln1_rstd, a, q, k, v, probs, ctx, drop1;
  std::vector<double> x_mid, ln2_hat, ln2_rstd, b, ff_pre, ff_act, drop2;
};

struct DecoderCache {
  std::size_t len = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, lnf_hat, lnf_rstd, z, logits;
};

class Engine {
 public:
  Engine(const ModelParams& params) : p_(params.values().data()), L_(params.layout()), cfg_(params.config()), D_(cfg_) {}

  // ---- encoder ----
  void encode(const double* points, const unsigned char* mask, std::size_t n, EncoderCache& c,
              double* embedding) const {
    c.rows = 0;
    c.feats.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (mask && !mask[i]) continue;
      c.feats.insert(c.feats.end(), points + i * D_.in, points + (i + 1) * D_.in);
      ++c.rows;
    }
    if (c.rows == 0) throw ModelError("cannot encode an empty point set");
    const std::size_t r = c.rows, d = D_.d;
    c.pre1.resize(r * d);
    c.act1.resize(r * d);
    c.pre2.resize(r * d);
    c.act2.resize(r * d);
    linear(c.feats.data(), r, D_.in, p_ + L_.enc_w1, p_ + L_.enc_b1, d, c.pre1.data());
    for (std::size_t i = 0; i < r * d; ++i) c.act1[i] = gelu(c.pre1[i]);
    linear(c.act1.data(), r, d, p_ + L_.enc_w2, p_ + L_.enc_b2, d, c.pre2.data());
    for (std::size_t i = 0; i < r * d; ++i) c.act2[i] = gelu(c.pre2[i]);
    c.pooled.assign(d, -std::numeric_limits<double>::infinity());
    c.argmax.assign(d, 0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        if (c.act2[i * d + j] > c.pooled[j]) {
          c.pooled[j] = c.act2[i * d + j];
          c.argmax[j] = i;
        }
      }
    }
    linear(c.pooled.data(), 1, d, p_ + L_.enc_proj_w, p_ + L_.enc_proj_b, d, embedding);
  }

  void encode_backward(const EncoderCache& c, const double* d_embedding, double* g) const {
    const std::size_t d = D_.d;
    std::vector<double> d_pooled(d, 0.0);
    linear_backward(c.pooled.data(), 1, d, p_ + L_.enc_proj_w, d, d_embedding, g + L_.enc_proj_w,
                    g + L_.enc_proj_b, d_pooled.data());
    // Only the argmax entry of each channel receives gradient.
    std::vector<std::size_t> rows;
    std::vector<double> d_pre2_sparse(d);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = c.argmax[j];
      d_pre2_sparse[j] = d_pooled[j] * gelu_grad(c.pre2[i * d + j]);
      rows.push_back(i);
    }
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    double* dw2 = g + L_.enc_w2;
    double* db2 = g + L_.enc_b2;
    const double* w2 = p_ + L_.enc_w2;
    std::vector<double> d_act1(d);
    std::vector<double> d_pre1(d);
    for (std::size_t row : rows) {
      std::fill(d_act1.begin(), d_act1.end(), 0.0);
      const double* a1 = c.act1.data() + row * d;
      for (std::size_t j = 0; j < d; ++j) {
        if (c.argmax[j] != row) continue;
        const double gj = d_pre2_sparse[j];
        db2[j] += gj;
        for (std::size_t i = 0; i < d; ++i) {
          dw2[i * d + j] += a1[i] * gj;
          d_act1[i] += w2[i * d + j] * gj;
        }
      }
      for (std::size_t i = 0; i < d; ++i) d_pre1[i] = d_act1[i] * gelu_grad(c.pre1[row * d + i]);
      linear_backward(c.feats.data() + row * D_.in, 1, D_.in, p_ + L_.enc_w1, d, d_pre1.data(), g + L_.enc_w1,
                      g + L_.enc_b1, nullptr);
    }
  }

  // ---- decoder ----
  void decode(const double* embedding, const int* tokens, std::size_t len, DecoderCache& c, Rng* dropout) const {
    const std::size_t d = D_.d, S = len;
    if (S > D_.t) throw ModelError("sequence of " + std::to_string(S) + " exceeds context " + std::to_string(D_.t));
    c.len = S;
    c.layers.resize(L_.layers.size());
    std::vector<double> x(S * d);
    for (std::size_t j = 0; j < d; ++j) x[j] = embedding[j] + p_[L_.pos_emb + j];
    for (std::size_t s = 1; s < S; ++s) {
      const auto tok = static_cast<std::size_t>(tokens[s - 1]);
      if (tok >= D_.v) throw ModelError("token id " + std::to_string(tok) + " outside vocabulary");
      for (std::size_t j = 0; j < d; ++j) x[s * d + j] = p_[L_.tok_emb + tok * d + j] + p_[L_.pos_emb + s * d + j];
    }
    const double keep = 1.0 - cfg_.dropout;
    const bool use_dropout = dropout != nullptr && cfg_.dropout > 0.0;
    for (std::size_t l = 0; l < L_.layers.size(); ++l) {
      const auto& P = L_.layers[l];
      LayerCache& lc = c.layers[l];
      lc.x_in = x;
      lc.ln1_hat.resize(S * d);
      lc.ln1_rstd.resize(S);
      lc.a.resize(S * d);
      layer_norm(x.data(), S, d, p_ + P.ln1_g, p_ + P.ln1_b, lc.ln1_hat.data(), lc.ln1_rstd.data(), lc.a.data());
      lc.q.resize(S * d);
      lc.k.resize(S * d);
      lc.v.resize(S * d);
      linear(lc.a.data(), S, d, p_ + P.wq, p_ + P.bq, d, lc.q.data());
      linear(lc.a.data(), S, d, p_ + P.wk, p_ + P.bk, d, lc.k.data());
      linear(lc.a.data(), S, d, p_ + P.wv, p_ + P.bv, d, lc.v.data());
      attention(lc, S);
      std::vector<double> attn(S * d);
      linear(lc.ctx.data(), S, d, p_ + P.wo, p_ + P.bo, d, attn.data());
      apply_dropout(attn, lc.drop1, use_dropout, keep, dropout);
      for (std::size_t i = 0; i < S * d; ++i) x[i] += attn[i];
      lc.x_mid = x;
      lc.ln2_hat.resize(S * d);
      lc.ln2_rstd.resize(S);
      lc.b.resize(S * d);
      layer_norm(x.data(), S, d, p_ + P.ln2_g, p_ + P.ln2_b, lc.ln2_hat.data(), lc.ln2_rstd.data(), lc.b.data());
      lc.ff_pre.resize(S * D_.f);
      lc.ff_act.resize(S * D_.f);
      linear(lc.b.data(), S, d, p_ + P.w_ff1, p_ + P.b_ff1, D_.f, lc.ff_pre.data());
      for (std::size_t i = 0; i < S * D_.f; ++i) lc.ff_act[i] = gelu(lc.ff_pre[i]);
      std::vector<double> ff(S * d);
      linear(lc.ff_act.data(), S, D_.f, p_ + P.w_ff2, p_ + P.b_ff2, d, ff.data());
      apply_dropout(ff, lc.drop2, use_dropout, keep, dropout);
      for (std::size_t i = 0; i < S * d; ++i) x[i] += ff[i];
    }
    c.x_final = x;
    c.lnf_hat.resize(S * d);
    c.lnf_rstd.resize(S);
    c.z.resize(S * d);
    layer_norm(x.data(), S, d, p_ + L_.lnf_g, p_ + L_.lnf_b, c.lnf_hat.data(), c.lnf_rstd.data(), c.z.data());
    c.logits.resize(S * D_.v);
    linear(c.z.data(), S, d, p_ + L_.out_w, p_ + L_.out_b, D_.v, c.logits.data());
  }

  // d_logits: [S][V]. Accumulates parameter gradients into g and writes the
  // gradient of the position-0 input into d_embedding.
  void decode_backward(const DecoderCache& c, const int* tokens, const double* d_logits, double* g,
                       double* d_embedding) const {
    const std::size_t d = D_.d, S = c.len;
    std::vector<double> dz(S * d, 0.0);
    linear_backward(c.z.data(), S, d, p_ + L_.out_w, D_.v, d_logits, g + L_.out_w, g + L_.out_b, dz.data());
    std::vector<double> dx(S * d, 0.0);
    layer_norm_backward(c.lnf_hat.data(), c.lnf_rstd.data(), S, d, p_ + L_.lnf_g, dz.data(), g + L_.lnf_g,
                        g + L_.lnf_b, dx.data());
    for (std::size_t l = L_.layers.size(); l-- > 0;) {
      const auto& P = L_.layers[l];
      const LayerCache& lc = c.layers[l];
      // feed-forward branch
      std::vector<double> dff(dx);
      if (!lc.drop2.empty()) {
        for (std::size_t i = 0; i < S * d; ++i) dff[i] *= lc.drop2[i];
      }
      std::vector<double> d_act(S * D_.f, 0.0);
      linear_backward(lc.ff_act.data(), S, D_.f, p_ + P.w_ff2, d, dff.data(), g + P.w_ff2, g + P.b_ff2,
                      d_act.data());
      for (std::size_t i = 0; i < S * D_.f; ++i) d_act[i] *= gelu_grad(lc.ff_pre[i]);
      std::vector<double> db(S * d, 0.0);
      linear_backward(lc.b.data(), S, d, p_ + P.w_ff1, D_.f, d_act.data(), g + P.w_ff1, g + P.b_ff1, db.data());
      layer_norm_backward(lc.ln2_hat.data(), lc.ln2_rstd.data(), S, d, p_ + P.ln2_g, db.data(), g + P.ln2_g,
                          g + P.ln2_b, dx.data());
      // attention branch
      std::vector<double> dattn(dx);
      if (!lc.drop1.empty()) {
        for (std::size_t i = 0; i < S * d; ++i) dattn[i] *= lc.drop1[i];
      }
      std::vector<double> dctx(S * d, 0.0);
      linear_backward(lc.ctx.data(), S, d, p_ + P.wo, d, dattn.data(), g + P.wo, g + P.bo, dctx.data());
      std::vector<double> dq(S * d, 0.0), dk(S * d, 0.0), dv(S * d, 0.0);
      attention_backward(lc, S, dctx, dq, dk, dv);
      std::vector<double> da(S * d, 0.0);
      linear_backward(lc.a.data(), S, d, p_ + P.wq, d, dq.data(), g + P.wq, g + P.bq, da.data());
      linear_backward(lc.a.data(), S, d, p_ + P.wk, d, dk.data(), g + P.wk, g + P.bk, da.data());
      linear_backward(lc.a.data(), S, d, p_ + P.wv, d, dv.data(), g + P.wv, g + P.bv, da.data());
      layer_norm_backward(lc.ln1_hat.data(), lc.ln1_rstd.data(), S, d, p_ + P.ln1_g, da.data(), g + P.ln1_g,
                          g + P.ln1_b, dx.data());
    }
    for (std::size_t j = 0; j < d; ++j) {
      g[L_.pos_emb + j] += dx[j];
      d_embedding[j] = dx[j];
    }
    for (std::size_t s = 1; s < S; ++s) {
      const auto tok = static_cast<std::size_t>(tokens[s - 1]);
      for (std::size_t j = 0; j < d; ++j) {
        g[L_.pos_emb + s * d + j] += dx[s * d + j];
        g[L_.tok_emb + tok * d + j] += dx[s * d + j];
      }
    }
  }

  const Dims& dims() const { return D_; }

 private:
  void attention(LayerCache& lc, std::size_t S) const {
    const std::size_t d = D_.d, H = D_.h, dh = D_.dh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    lc.probs.assign(H * S * S, 0.0);
    lc.ctx.assign(S * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < S; ++i) {
        double* row = lc.probs.data() + (h * S + i) * S;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += lc.q[i * d + off + c] * lc.k[j * d + off + c];
          row[j] = s * scale;
        }
        softmax_inplace(row, i + 1);
        double* out = lc.ctx.data() + i * d + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double pj = row[j];
          const double* vj = lc.v.data() + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) out[c] += pj * vj[c];
        }
      }
    }
  }

  void attention_backward(const LayerCache& lc, std::size_t S, const std::vector<double>& dctx,
                          std::vector<double>& dq, std::vector<double>& dk, std::vector<double>& dv) const {
    const std::size_t d = D_.d, H = D_.h, dh = D_.dh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dp(S);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < S; ++i) {
        const double* row = lc.probs.data() + (h * S + i) * S;
        const double* go = dctx.data() + i * d + off;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lc.v.data() + j * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += go[c] * vj[c];
            dv[j * d + off + c] += row[j] * go[c];
          }
          dp[j] = s;
          dot += row[j] * s;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = row[j] * (dp[j] - dot) * scale;
          for (std::size_t c = 0; c < dh; ++c) {
            dq[i * d + off + c] += ds * lc.k[j * d + off + c];
            dk[j * d + off + c] += ds * lc.q[i * d + off + c];
          }
        }
      }
    }
  }

  static void apply_dropout(std::vector<double>& values, std::vector<double>& mask, bool enabled, double keep,
                            Rng* rng) {
    if (!enabled) {
      mask.clear();
      return;
    }
    mask.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
      values[i] *= mask[i];
    }
  }

  const double* p_;
  const ParamLayout& L_;
  const ModelConfig& cfg_;
  Dims D_;
};

struct SampleWorkspace {
  EncoderCache enc;
  DecoderCache dec;
  std::vector<double> embedding, d_embedding, d_logits;
};

// Adds the sample's summed cross-entropy to sums and, if g != nullptr, its
// gradient scaled by `scale` into g.
void run_sample(const Engine& engine, const Batch& batch, std::size_t b, SampleWorkspace& ws, double* g,
                double scale, Rng* dropout, LossSums& sums) {
  const Dims& D = engine.dims();
  const auto mp = static_cast<std::size_t>(batch.max_points);
  const auto ml = static_cast<std::size_t>(batch.max_len);
  const int* targets = batch.targets.data() + b * ml;
  const unsigned char* tmask = batch.target_mask.data() + b * ml;
  std::size_t len = 0;
  for (std::size_t t = 0; t < ml; ++t) {
    if (tmask[t]) len = t + 1;
  }
  if (len == 0) return;
  ws.embedding.resize(D.d);
  engine.encode(batch.points.data() + b * mp * D.in, batch.point_mask.data() + b * mp, mp, ws.enc,
                ws.embedding.data());
  engine.decode(ws.embedding.data(), targets, len, ws.dec, dropout);
  ws.d_logits.assign(len * D.v, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    if (!tmask[t]) continue;
    double* row = ws.dec.logits.data() + t * D.v;
    const auto target = static_cast<std::size_t>(targets[t]);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < D.v; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < D.v; ++j) s += std::exp(row[j] - m);
    const double log_z = m + std::log(s);
    sums.total += log_z - row[target];
    ++sums.tokens;
    if (g) {
      double* dl = ws.d_logits.data() + t * D.v;
      for (std::size_t j = 0; j < D.v; ++j) dl[j] = std::exp(row[j] - log_z) * scale;
      dl[target] -= scale;
    }
  }
  if (!g) return;
  ws.d_embedding.assign(D.d, 0.0);
  engine.decode_backward(ws.dec, targets, ws.d_logits.data(), g, ws.d_embedding.data());
  engine.encode_backward(ws.enc, ws.d_embedding.data(), g);
}

std::size_t unmasked_targets(const Batch& batch) {
  return static_cast<std::size_t>(std::count(batch.target_mask.begin(), batch.target_mask.end(), 1));
}

// Fixed partition of a batch into chunks, independent of the thread count, so
// the reduction order (and therefore every bit of the result) is stable.
std::size_t chunk_count(std::size_t batch, std::size_t params) {
  constexpr std::size_t kMaxChunks = 8;
  constexpr std::size_t kBufferBudget = std::size_t{1} << 25;  // doubles across all chunk buffers
  const std::size_t by_memory = std::max<std::size_t>(1, kBufferBudget / std::max<std::size_t>(params, 1));
  return std::max<std::size_t>(1, std::min({batch, kMaxChunks, by_memory}));
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

std::vector<double> encode(const ModelParams& params, std::span<const double> points,
                           std::span<const unsigned char> mask) {
  const Engine engine(params);
  const auto nf = static_cast<std::size_t>(params.config().point_features());
  if (points.size() % nf != 0) throw ModelError("point buffer is not a whole number of points");
  const std::size_t n = points.size() / nf;
  if (!mask.empty() && mask.size() != n) throw ModelError("mask length does not match point count");
  EncoderCache cache;
  std::vector<double> out(static_cast<std::size_t>(params.config().embed_dim));
  engine.encode(points.data(), mask.empty() ? nullptr : mask.data(), n, cache, out.data());
  return out;
}

std::vector<double> encode(const ModelParams& params, const Example& example) {
  return encode(params, example.features, {});
}

std::vector<double> logits(const ModelParams& params, std::span<const double> embedding,
                           std::span<const int> tokens) {
  const Engine engine(params);
  if (embedding.size() != static_cast<std::size_t>(params.config().embed_dim)) {
    throw ModelError("embedding has wrong dimension");
  }
  DecoderCache cache;
  engine.decode(embedding.data(), tokens.data(), tokens.size() + 1, cache, nullptr);
  return cache.logits;
}

std::vector<double> decode_step(const ModelParams& params, std::span<const double> embedding,
                                std::span<const int> prefix) {
  if (prefix.size() >= static_cast<std::size_t>(params.config().context)) {
    throw ModelError("prefix of " + std::to_string(prefix.size()) + " tokens overflows context " +
                     std::to_string(params.config().context));
  }
  const auto all = logits(params, embedding, prefix);
  const auto v = static_cast<std::size_t>(params.config().vocab_size);
  std::vector<double> probs(all.end() - static_cast<std::ptrdiff_t>(v), all.end());
  softmax_inplace(probs.data(), v);
  return probs;
}

std::vector<int> generate(const ModelParams& params, std::span<const double> embedding, int max_length,
                          GenerateMode mode) {
  if (max_length > params.config().context) throw ModelError("max_length exceeds context");
  Rng rng(mode.seed);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_length) {
    const auto probs = decode_step(params, embedding, out);
    int next = 0;
    if (mode.greedy) {
      next = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    } else {
      double r = rng.uniform();
      next = static_cast<int>(probs.size()) - 1;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        if (r < probs[i]) {
          next = static_cast<int>(i);
          break;
        }
        r -= probs[i];
      }
    }
    if (next == Vocabulary::kEnd) break;
    out.push_back(next);
  }
  return out;
}

double loss(const ModelParams& params, const Batch& batch) {
  const Engine engine(params);
  LossSums sums;
  SampleWorkspace ws;
  for (std::size_t b = 0; b < batch.size; ++b) run_sample(engine, batch, b, ws, nullptr, 0.0, nullptr, sums);
  return sums.mean();
}

LossSums loss_and_gradient(const ModelParams& params, const Batch& batch, std::span<double> gradient,
                           std::optional<std::uint64_t> dropout_seed) {
  if (gradient.size() != params.values().size()) throw ModelError("gradient buffer has wrong size");
  std::fill(gradient.begin(), gradient.end(), 0.0);
  const std::size_t tokens = unmasked_targets(batch);
  if (tokens == 0) return {};
  const double scale = 1.0 / static_cast<double>(tokens);
  const Engine engine(params);
  const std::size_t chunks = chunk_count(batch.size, gradient.size());
  std::vector<std::vector<double>> buffers(chunks);
  std::vector<LossSums> partial(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * batch.size / chunks;
    const std::size_t end = (c + 1) * batch.size / chunks;
    double* g = gradient.data();
    if (c > 0) {
      buffers[c].assign(gradient.size(), 0.0);
      g = buffers[c].data();
    }
    SampleWorkspace ws;
    for (std::size_t b = begin; b < end; ++b) {
      std::optional<Rng> rng;
      if (dropout_seed) rng.emplace(derive_seed(*dropout_seed, b));
      run_sample(engine, batch, b, ws, g, scale, rng ? &*rng : nullptr, partial[c]);
    }
  });
  LossSums sums;
  for (std::size_t c = 0; c < chunks; ++c) {
    sums.total += partial[c].total;
    sums.tokens += partial[c].tokens;
    if (c > 0) {
      for (std::size_t i = 0; i < gradient.size(); ++i) gradient[i] += buffers[c][i];
    }
  }
  return sums;
}

TrainState::TrainState(ModelParams p) : params(std::move(p)) {
  first_moment.assign(params.values().size(), 0.0);
  second_moment.assign(params.values().size(), 0.0);
}

namespace {

void apply_update(TrainState& state, std::span<double> grad, const ModelConfig& cfg) {
  if (cfg.grad_clip > 0.0) {
    double norm = 0.0;
    for (double g : grad) norm += g * g;
    norm = std::sqrt(norm);
    if (norm > cfg.grad_clip) {
      const double s = cfg.grad_clip / norm;
      for (double& g : grad) g *= s;
    }
  }
  auto values = state.params.values();
  const double lr = cfg.learning_rate;
  ++state.step;
  if (cfg.optimizer == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grad[i];
    return;
  }
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < values.size(); ++i) {
    state.first_moment[i] = kBeta1 * state.first_moment[i] + (1.0 - kBeta1) * grad[i];
    state.second_moment[i] = kBeta2 * state.second_moment[i] + (1.0 - kBeta2) * grad[i] * grad[i];
    const double mhat = state.first_moment[i] / c1;
    const double vhat = state.second_moment[i] / c2;
    values[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
  }
}

}  // namespace

double train_epoch(TrainState& state, std::span<const Example> shard, const ModelConfig& cfg, std::uint64_t seed) {
  if (shard.empty()) throw TrainingFault("cannot train on an empty shard");
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<double> grad(state.params.values().size());
  std::vector<Example> members;
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0, batch_no = 0; start < order.size(); start += bs, ++batch_no) {
    members.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) members.push_back(shard[order[i]]);
    const Batch batch = make_batch(members, cfg);
    std::optional<std::uint64_t> dropout_seed;
    if (cfg.dropout > 0.0) dropout_seed = derive_seed(seed, batch_no + 1);
    const LossSums sums = loss_and_gradient(state.params, batch, grad, dropout_seed);
    if (!std::isfinite(sums.total)) {
      throw TrainingFault("non-finite loss in batch " + std::to_string(batch_no) + " (step " +
                          std::to_string(state.step) + ")");
    }
    for (double g : grad) {
      if (!std::isfinite(g)) {
        throw TrainingFault("non-finite gradient in batch " + std::to_string(batch_no) + " (step " +
                            std::to_string(state.step) + ")");
      }
    }
    apply_update(state, grad, cfg);
    total += sums.total;
    tokens += sums.tokens;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

double validate(const ModelParams& params, std::span<const Example> shard, const ModelConfig& cfg) {
  if (shard.empty()) throw TrainingFault("cannot validate on an empty shard");
  const Engine engine(params);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t batches = (shard.size() + bs - 1) / bs;
  std::vector<LossSums> partial(batches);
  parallel_for(batches, [&](std::size_t k) {
    const std::size_t begin = k * bs;
    const std::size_t end = std::min(shard.size(), begin + bs);
    const Batch batch = make_batch(shard.subspan(begin, end - begin), cfg);
    SampleWorkspace ws;
    for (std::size_t b = 0; b < batch.size; ++b) run_sample(engine, batch, b, ws, nullptr, 0.0, nullptr, partial[k]);
  });
  LossSums sums;
  for (const auto& p : partial) {
    sums.total += p.total;
    sums.tokens += p.tokens;
  }
  return sums.mean();
}

}  // namespace symkfcv

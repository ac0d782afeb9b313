#pragma once

// Toy transformer encoders for images, text and multi-spectral rasters.
//
// Architecture: input embedding (linear over patch pixels, or a one-hot token
// lookup) plus a learned positional table, `depth` pre-norm blocks of
// single-head self-attention and a 2-layer GELU MLP (hidden = 2 * width),
// each with a residual connection, then a (masked) mean pool over tokens, a
// final layer norm and a linear map to the embedding dimension. Outputs are
// never L2-normalized here.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpatch/autodiff.hpp"
#include "mpatch/checkpoint.hpp"
#include "mpatch/rng.hpp"
#include "mpatch/tensor.hpp"
#include "mpatch/tokenizer.hpp"

namespace mpatch {

enum class EncoderKind { Image, Text, Modality };

inline const char* to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::Image: return "image";
    case EncoderKind::Text: return "text";
    case EncoderKind::Modality: return "modality";
  }
  return "?";
}

inline EncoderKind encoder_kind_from(const std::string& s) {
  if (s == "image") return EncoderKind::Image;
  if (s == "text") return EncoderKind::Text;
  if (s == "modality") return EncoderKind::Modality;
  throw Error(ErrorKind::InvalidArgument, "unknown encoder kind '" + s + "'");
}

// ln(1/0.07); the CLIP initial temperature, used as a fixed constant.
inline constexpr double kDefaultLogLogitScale = 2.6592600369327779;

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Image;
  std::size_t channels = 3;    // image/modality bands, or vocabulary size
  std::size_t patch = 4;
  std::size_t image_size = 16;  // H = W
  std::size_t seq_len = 16;     // text only
  std::size_t width = 64;
  std::size_t depth = 2;
  std::size_t embed_dim = 32;
  std::uint64_t seed = 0;

  static EncoderConfig image_default(std::uint64_t seed = 0) {
    EncoderConfig c;
    c.kind = EncoderKind::Image;
    c.seed = seed;
    return c;
  }
  static EncoderConfig text_default(std::size_t vocab, std::uint64_t seed = 0) {
    EncoderConfig c;
    c.kind = EncoderKind::Text;
    c.channels = vocab;
    c.seed = seed;
    return c;
  }
  static EncoderConfig modality_default(std::size_t bands = 8,
                                        std::uint64_t seed = 0) {
    EncoderConfig c;
    c.kind = EncoderKind::Modality;
    c.channels = bands;
    c.width = 48;
    c.embed_dim = 24;
    c.seed = seed;
    return c;
  }

  void validate() const {
    if (!channels || !patch || !width || !depth || !embed_dim ||
        (kind == EncoderKind::Text ? !seq_len : !image_size)) {
      throw Error(ErrorKind::InvalidArgument, "encoder sizes must be positive");
    }
    if (kind != EncoderKind::Text && image_size % patch) {
      throw Error(ErrorKind::InvalidArgument,
                  "image size " + std::to_string(image_size) +
                      " is not divisible by patch size " + std::to_string(patch));
    }
    if (kind == EncoderKind::Text && channels < 2) {
      throw Error(ErrorKind::InvalidArgument, "text vocabulary is too small");
    }
  }

  std::size_t tokens() const {
    return kind == EncoderKind::Text ? seq_len
                                     : (image_size / patch) * (image_size / patch);
  }
  std::size_t token_dim() const {
    return kind == EncoderKind::Text ? channels : channels * patch * patch;
  }
  std::size_t mlp_hidden() const { return 2 * width; }

  // Canonical architecture id; seeds are not part of it.
  std::string arch_id() const {
    std::ostringstream os;
    os << to_string(kind) << "/c" << channels << "-w" << width << "-d" << depth
       << "-e" << embed_dim;
    if (kind == EncoderKind::Text) {
      os << "-l" << seq_len;
    } else {
      os << "-p" << patch << "-s" << image_size;
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)}, {"channels", channels},
            {"patch", patch},          {"image_size", image_size},
            {"seq_len", seq_len},      {"width", width},
            {"depth", depth},          {"embed_dim", embed_dim},
            {"seed", seed}};
  }
  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.kind = encoder_kind_from(j.at("kind").get<std::string>());
    c.channels = j.at("channels").get<std::size_t>();
    c.patch = j.value("patch", c.patch);
    c.image_size = j.value("image_size", c.image_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.width = j.value("width", c.width);
    c.depth = j.value("depth", c.depth);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Closed-form parameter count for a config.
inline std::size_t parameter_count(const EncoderConfig& c) {
  const std::size_t w = c.width, h = c.mlp_hidden();
  std::size_t n = c.kind == EncoderKind::Text ? c.channels * w
                                              : c.token_dim() * w + w;
  n += c.tokens() * w;
  const std::size_t block = 2 * w + 3 * (w * w + w) + (w * w + w) + 2 * w +
                            (w * h + h) + (h * w + w);
  n += c.depth * block;
  n += 2 * w + w * c.embed_dim + c.embed_dim;
  if (c.kind == EncoderKind::Image) n += 1;  // logit_scale
  return n;
}

namespace detail {

inline Tensor random_normal(Shape shape, double stddev, CounterRng rng) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(stddev * rng.normal());
  return t;
}

}  // namespace detail

// Seeded initialization; identical across runs and platforms.
inline Checkpoint init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  const CounterRng root = CounterRng(cfg.seed).stream("encoder-init");
  const std::size_t w = cfg.width, h = cfg.mlp_hidden();
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.depth));
  Checkpoint ck;
  auto normal = [&](const std::string& name, Shape shape, double stddev) {
    ck.add(name, detail::random_normal(std::move(shape), stddev, root.stream(name)));
  };
  auto fill = [&](const std::string& name, std::size_t n, float v) {
    ck.add(name, Tensor({n}, v));
  };
  if (cfg.kind == EncoderKind::Text) {
    normal("embed.weight", {cfg.channels, w}, 1.0);
  } else {
    normal("embed.weight", {cfg.token_dim(), w},
           1.0 / std::sqrt(static_cast<double>(cfg.token_dim())));
    fill("embed.bias", w, 0.0f);
  }
  normal("pos_embed", {cfg.tokens(), w}, 0.1);
  const double sw = 1.0 / std::sqrt(static_cast<double>(w));
  const double sh = 1.0 / std::sqrt(static_cast<double>(h));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    fill(p + "ln1.gamma", w, 1.0f);
    fill(p + "ln1.beta", w, 0.0f);
    for (const char* m : {"attn.q", "attn.k", "attn.v"}) {
      normal(p + m + ".weight", {w, w}, sw);
      fill(p + m + ".bias", w, 0.0f);
    }
    normal(p + "attn.out.weight", {w, w}, sw * resid);
    fill(p + "attn.out.bias", w, 0.0f);
    fill(p + "ln2.gamma", w, 1.0f);
    fill(p + "ln2.beta", w, 0.0f);
    normal(p + "mlp.fc1.weight", {w, h}, sw);
    fill(p + "mlp.fc1.bias", h, 0.0f);
    normal(p + "mlp.fc2.weight", {h, w}, sh * resid);
    fill(p + "mlp.fc2.bias", w, 0.0f);
  }
  fill("ln_final.gamma", w, 1.0f);
  fill("ln_final.beta", w, 0.0f);
  normal("head.weight", {w, cfg.embed_dim}, sw);
  fill("head.bias", cfg.embed_dim, 0.0f);
  if (cfg.kind == EncoderKind::Image) {
    ck.add("logit_scale", Tensor::scalar(static_cast<float>(kDefaultLogLogitScale)));
  }
  ck.meta()["arch"] = cfg.arch_id();
  ck.meta()["embed_dim"] = std::to_string(cfg.embed_dim);
  ck.meta()["kind"] = to_string(cfg.kind);
  ck.meta()["config"] = cfg.to_json().dump();
  ck.meta()["seed"] = std::to_string(cfg.seed);
  ck.meta()["stage"] = "init";
  return ck;
}

inline EncoderConfig config_of(const Checkpoint& params) {
  const auto it = params.meta().find("config");
  if (it == params.meta().end()) {
    throw Error(ErrorKind::ArchitectureMismatch,
                "checkpoint has no encoder config in its metadata");
  }
  EncoderConfig cfg = EncoderConfig::from_json(nlohmann::json::parse(it->second));
  if (params.meta_or("arch", "") != cfg.arch_id()) {
    throw Error(ErrorKind::ArchitectureMismatch,
                "checkpoint arch id '" + params.meta_or("arch", "") +
                    "' does not match its config '" + cfg.arch_id() + "'");
  }
  return cfg;
}

// Checks that a checkpoint carries exactly the tensors `cfg` needs.
inline void validate_params(const Checkpoint& params, const EncoderConfig& cfg) {
  if (params.meta_or("arch", "") != cfg.arch_id()) {
    throw Error(ErrorKind::ArchitectureMismatch,
                "expected architecture '" + cfg.arch_id() + "', checkpoint has '" +
                    params.meta_or("arch", "") + "'");
  }
  const Checkpoint reference = init_encoder(cfg);
  for (const auto& [name, t] : reference.entries()) {
    if (!params.contains(name) || params.tensor(name).shape() != t.shape()) {
      throw Error(ErrorKind::ArchitectureMismatch,
                  "checkpoint tensor '" + name + "' is missing or misshapen");
    }
  }
}

// ---- projection head -------------------------------------------------------

struct ProjectionHead {
  Tensor weight;  // [D_s, D]
  Tensor bias;    // [D]

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  static ProjectionHead random(std::size_t in, std::size_t out, std::uint64_t seed) {
    const CounterRng rng = CounterRng(seed).stream("projection-init");
    return {detail::random_normal({in, out}, 1.0 / std::sqrt(double(in)), rng),
            Tensor({out}, 0.0f)};
  }

  // Identity on the first min(in, out) coordinates, zeros elsewhere.
  static ProjectionHead identity(std::size_t in, std::size_t out) {
    Tensor w({in, out}, 0.0f);
    for (std::size_t i = 0; i < std::min(in, out); ++i) w.at(i, i) = 1.0f;
    return {std::move(w), Tensor({out}, 0.0f)};
  }

  static std::optional<ProjectionHead> from(const Checkpoint& ck) {
    if (!ck.contains("proj.weight")) return std::nullopt;
    return ProjectionHead{ck.tensor("proj.weight"), ck.tensor("proj.bias")};
  }

  void store(Checkpoint& ck) const {
    if (ck.contains("proj.weight")) {
      ck.set("proj.weight", weight);
      ck.set("proj.bias", bias);
    } else {
      ck.add("proj.weight", weight);
      ck.add("proj.bias", bias);
    }
    ck.meta()["projected_dim"] = std::to_string(out_dim());
  }
};

// ---- input preparation -----------------------------------------------------

// [N, C, H, W] -> [N * T, C * p * p]; token t = py * (W / p) + px, columns
// ordered (channel, dy, dx).
inline Tensor patchify(const Tensor& images, const EncoderConfig& cfg) {
  if (images.rank() != 4 || images.dim(1) != cfg.channels ||
      images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
    throw Error(ErrorKind::ShapeMismatch,
                "expected images [N," + std::to_string(cfg.channels) + "," +
                    std::to_string(cfg.image_size) + "," +
                    std::to_string(cfg.image_size) + "], got " +
                    shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0), c = cfg.channels, s = cfg.image_size;
  const std::size_t p = cfg.patch, g = s / p, t = g * g, d = c * p * p;
  Tensor out({n * t, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t py = 0; py < g; ++py) {
      for (std::size_t px = 0; px < g; ++px) {
        float* row = out.data().data() + ((i * t) + py * g + px) * d;
        std::size_t col = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t dy = 0; dy < p; ++dy) {
            const float* src = images.data().data() +
                               ((i * c + ch) * s + py * p + dy) * s + px * p;
            for (std::size_t dx = 0; dx < p; ++dx) row[col++] = src[dx];
          }
        }
      }
    }
  }
  return out;
}

struct TextInputs {
  Tensor one_hot;                    // [N * L, V]
  std::vector<double> pool_weights;  // 1 for real tokens, 0 for padding
  Tensor attention_mask;             // [N * L, L], additive
};

inline TextInputs prepare_text(const Tensor& tokens, const EncoderConfig& cfg) {
  if (tokens.rank() != 2 || tokens.dim(1) != cfg.seq_len) {
    throw Error(ErrorKind::ShapeMismatch,
                "expected token ids [N," + std::to_string(cfg.seq_len) +
                    "], got " + shape_str(tokens.shape()));
  }
  const std::size_t n = tokens.dim(0), l = cfg.seq_len, v = cfg.channels;
  TextInputs in{Tensor({n * l, v}), std::vector<double>(n * l, 0.0),
                Tensor({n * l, l})};
  for (std::size_t i = 0; i < n; ++i) {
    bool any_real = false;
    for (std::size_t t = 0; t < l; ++t) {
      const float idf = tokens.at(i, t);
      const auto id = static_cast<std::size_t>(idf);
      if (idf < 0 || id >= v || static_cast<float>(id) != idf) {
        throw Error(ErrorKind::InvalidArgument,
                    "token id " + std::to_string(idf) + " out of range");
      }
      in.one_hot.at(i * l + t, id) = 1.0f;
      if (idf != TextTokenizer::kPadId) {
        in.pool_weights[i * l + t] = 1.0;
        any_real = true;
      }
    }
    // A padding-only sequence attends and pools over every position.
    if (!any_real) continue;
    for (std::size_t q = 0; q < l; ++q) {
      for (std::size_t k = 0; k < l; ++k) {
        if (tokens.at(i, k) == TextTokenizer::kPadId) {
          in.attention_mask.at(i * l + q, k) = -1e9f;
        }
      }
    }
  }
  return in;
}

// ---- graph construction ----------------------------------------------------

struct EncoderBinding {
  Var embedding;             // [N, D]
  std::string prefix;        // graph parameter prefix
  std::vector<std::string> names;  // checkpoint tensor names bound
};

// Adds the encoder to `g`, registering its tensors as parameters named
// prefix + tensor name. `tokens` is the prepared [N*T, token_dim] input.
inline EncoderBinding build_encoder(Graph& g, const EncoderConfig& cfg,
                                    const Checkpoint& params,
                                    const std::string& prefix, Var tokens,
                                    std::size_t batch, bool trainable,
                                    std::vector<double> pool_weights = {},
                                    std::optional<Var> attention_mask = {}) {
  EncoderBinding binding;
  binding.prefix = prefix;
  auto param = [&](const std::string& name) {
    binding.names.push_back(name);
    return g.parameter(prefix + name, params.tensor(name), trainable);
  };
  const std::size_t t = cfg.tokens();
  Var x = g.matmul(tokens, param("embed.weight"));
  if (cfg.kind != EncoderKind::Text) x = g.add(x, param("embed.bias"));
  x = g.add(x, param("pos_embed"));
  const double inv_sqrt_w = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    auto linear = [&](Var in, const std::string& name) {
      return g.add(g.matmul(in, param(p + name + ".weight")),
                   param(p + name + ".bias"));
    };
    const Var h = g.layer_norm(x, param(p + "ln1.gamma"), param(p + "ln1.beta"));
    const Var q = linear(h, "attn.q");
    const Var k = linear(h, "attn.k");
    const Var v = linear(h, "attn.v");
    Var scores = g.scale(g.matmul(q, k, true, batch), inv_sqrt_w);
    if (attention_mask) scores = g.add(scores, *attention_mask);
    const Var ctx = g.matmul(g.softmax(scores), v, false, batch);
    x = g.add(x, linear(ctx, "attn.out"));
    const Var h2 = g.layer_norm(x, param(p + "ln2.gamma"), param(p + "ln2.beta"));
    const Var mlp = linear(g.gelu(linear(h2, "mlp.fc1")), "mlp.fc2");
    x = g.add(x, mlp);
  }
  Var pooled = g.mean_pool(x, t, std::move(pool_weights));
  pooled = g.layer_norm(pooled, param("ln_final.gamma"), param("ln_final.beta"));
  binding.embedding =
      g.add(g.matmul(pooled, param("head.weight")), param("head.bias"));
  return binding;
}

// Builds the encoder over a raw batch (images [N,C,H,W] or token ids [N,L]).
inline EncoderBinding build_encoder_on(Graph& g, const EncoderConfig& cfg,
                                       const Checkpoint& params,
                                       const std::string& prefix,
                                       const Tensor& batch, bool trainable) {
  if (cfg.kind == EncoderKind::Text) {
    TextInputs in = prepare_text(batch, cfg);
    const Var tokens = g.constant(prefix + "tokens", in.one_hot);
    const Var mask = g.constant(prefix + "mask", in.attention_mask);
    return build_encoder(g, cfg, params, prefix, tokens, batch.dim(0), trainable,
                         std::move(in.pool_weights), mask);
  }
  const Var tokens = g.constant(prefix + "patches", patchify(batch, cfg));
  return build_encoder(g, cfg, params, prefix, tokens, batch.dim(0), trainable);
}

inline Var add_projection(Graph& g, const ProjectionHead& proj,
                          const std::string& prefix, Var x, bool trainable) {
  const Var w = g.parameter(prefix + "proj.weight", proj.weight, trainable);
  const Var b = g.parameter(prefix + "proj.bias", proj.bias, trainable);
  return g.add(g.matmul(x, w), b);
}

// ---- inference -------------------------------------------------------------

inline constexpr std::size_t kInferenceChunk = 128;

namespace detail {

inline Tensor slice_batch(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = end - begin;
  return Tensor(std::move(shape),
                std::vector<float>(t.vec().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                   t.vec().begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

inline Tensor run_encoder(const Checkpoint& params, const EncoderConfig& cfg,
                          const Tensor& batch, const ProjectionHead* proj) {
  validate_params(params, cfg);
  const std::size_t n = batch.dim(0);
  const std::size_t out_dim = proj ? proj->out_dim() : cfg.embed_dim;
  Tensor out({n, out_dim});
  for (std::size_t begin = 0; begin < n; begin += kInferenceChunk) {
    const std::size_t end = std::min(n, begin + kInferenceChunk);
    Graph g;
    const Tensor chunk = slice_batch(batch, begin, end);
    EncoderBinding enc = build_encoder_on(g, cfg, params, "", chunk, false);
    Var emb = enc.embedding;
    if (proj) emb = add_projection(g, *proj, "", emb, false);
    g.forward();
    const auto& v = g.raw_value(emb);
    std::copy(v.begin(), v.end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * out_dim));
  }
  if (!out.all_finite()) {
    throw Error(ErrorKind::NonFinite, "encoder produced non-finite embeddings");
  }
  return out;
}

inline void expect_kind(const EncoderConfig& cfg, EncoderKind kind) {
  if (cfg.kind != kind) {
    throw Error(ErrorKind::ArchitectureMismatch,
                std::string("expected a ") + to_string(kind) +
                    " encoder checkpoint, got " + to_string(cfg.kind));
  }
}

}  // namespace detail

// [N,3,H,W] -> [N,D]
inline Tensor encode_image(const Checkpoint& params, const Tensor& images) {
  const EncoderConfig cfg = config_of(params);
  detail::expect_kind(cfg, EncoderKind::Image);
  return detail::run_encoder(params, cfg, images, nullptr);
}

// [N,L] token ids -> [N,D]
inline Tensor encode_text(const Checkpoint& params, const Tensor& tokens) {
  const EncoderConfig cfg = config_of(params);
  detail::expect_kind(cfg, EncoderKind::Text);
  return detail::run_encoder(params, cfg, tokens, nullptr);
}

// [N,C_ms,H,W] -> [N,D]. The projection must be given exactly when the
// encoder's own dimension differs from `target_dim`.
inline Tensor encode_modality(const Checkpoint& params, const Tensor& rasters,
                              const ProjectionHead* proj, std::size_t target_dim) {
  const EncoderConfig cfg = config_of(params);
  detail::expect_kind(cfg, EncoderKind::Modality);
  if (cfg.embed_dim != target_dim && !proj) {
    throw Error(ErrorKind::ShapeMismatch,
                "student dimension " + std::to_string(cfg.embed_dim) +
                    " differs from teacher dimension " + std::to_string(target_dim) +
                    " but no projection head was given");
  }
  if (cfg.embed_dim == target_dim && proj) {
    throw Error(ErrorKind::InvalidArgument,
                "projection head given although dimensions already match");
  }
  if (proj && (proj->in_dim() != cfg.embed_dim || proj->out_dim() != target_dim)) {
    throw Error(ErrorKind::ShapeMismatch, "projection head has the wrong shape");
  }
  return detail::run_encoder(params, cfg, rasters, proj);
}

inline TextTokenizer tokenizer_of(const Checkpoint& text_params) {
  auto it = text_params.meta().find("tokenizer");
  if (it == text_params.meta().end()) {
    throw Error(ErrorKind::ArchitectureMismatch,
                "text checkpoint carries no tokenizer");
  }
  return TextTokenizer::from_json(it->second);
}

}  // namespace mpatch

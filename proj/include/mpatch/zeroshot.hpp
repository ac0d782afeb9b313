#pragma once

// Frozen classification heads built from prompt ensembles, and zero-shot
// classification by scaled cosine similarity.

#include <cmath>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpatch/autodiff.hpp"
#include "mpatch/checkpoint.hpp"
#include "mpatch/encoder.hpp"
#include "mpatch/tensor.hpp"

namespace mpatch {

inline constexpr const char* kSlot = "{}";

// e^2.659, the fixed reporting temperature; every decision metric is
// invariant to it.
inline const double kDefaultLogitScale = std::exp(kDefaultLogLogitScale);

struct PromptSet {
  std::vector<std::string> classnames;
  std::vector<std::string> templates;

  void validate() const {
    if (classnames.empty() || templates.empty()) {
      throw Error(ErrorKind::InvalidArgument,
                  "prompt set needs at least one class and one template");
    }
    for (const auto& t : templates) {
      const auto first = t.find(kSlot);
      if (first == std::string::npos || t.find(kSlot, first + 2) != std::string::npos) {
        throw Error(ErrorKind::InvalidArgument,
                    "template '" + t + "' must contain exactly one {} slot");
      }
    }
  }

  static std::string fill(const std::string& tmpl, const std::string& cls) {
    std::string out = tmpl;
    out.replace(out.find(kSlot), 2, cls);
    return out;
  }

  nlohmann::json to_json() const {
    return {{"classes", classnames}, {"templates", templates}};
  }
  static PromptSet from_json(const nlohmann::json& j) {
    PromptSet p{j.at("classes").get<std::vector<std::string>>(),
                j.at("templates").get<std::vector<std::string>>()};
    p.validate();
    return p;
  }
  static PromptSet load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open prompt file '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidArgument,
                  "bad prompt file '" + path + "': " + e.what());
    }
  }
};

class ClassificationHead {
 public:
  ClassificationHead(Tensor weights, double logit_scale)
      : weights_(std::move(weights)), logit_scale_(logit_scale) {
    if (weights_.rank() != 2) {
      throw Error(ErrorKind::ShapeMismatch, "head weights must be [D, C]");
    }
    if (!(logit_scale_ > 0.0) || !std::isfinite(logit_scale_)) {
      throw Error(ErrorKind::InvalidArgument, "logit scale must be positive");
    }
    for (std::size_t c = 0; c < num_classes(); ++c) {
      double sq = 0.0;
      for (std::size_t d = 0; d < dim(); ++d) {
        sq += double(weights_.at(d, c)) * weights_.at(d, c);
      }
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
        throw Error(ErrorKind::InvalidArgument,
                    "head column " + std::to_string(c) + " is not unit norm");
      }
    }
  }

  const Tensor& weights() const noexcept { return weights_; }
  double logit_scale() const noexcept { return logit_scale_; }
  bool frozen() const noexcept { return true; }
  std::size_t dim() const { return weights_.dim(0); }
  std::size_t num_classes() const { return weights_.dim(1); }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.add("weights", weights_);
    ck.meta()["arch"] = "head/d" + std::to_string(dim()) + "-c" +
                        std::to_string(num_classes());
    ck.meta()["embed_dim"] = std::to_string(dim());
    ck.meta()["logit_scale"] = format_alpha(logit_scale_);
    ck.meta()["kind"] = "head";
    return ck;
  }
  static ClassificationHead from_checkpoint(const Checkpoint& ck) {
    if (ck.meta_or("kind", "") != "head") {
      throw Error(ErrorKind::ArchitectureMismatch, "checkpoint is not a head");
    }
    return ClassificationHead(ck.tensor("weights"),
                              std::stod(ck.meta().at("logit_scale")));
  }

 private:
  Tensor weights_;
  double logit_scale_;
};

namespace detail {

// Unit-normalizes rows in double precision; returns false on a zero row.
inline bool normalize_rows(std::vector<double>& m, std::size_t cols) {
  for (std::size_t r = 0; r < m.size() / cols; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += m[r * cols + c] * m[r * cols + c];
    if (sq == 0.0) return false;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] *= inv;
  }
  return true;
}

}  // namespace detail

// Class embedding = normalize(mean over templates of normalize(text(prompt))).
inline ClassificationHead build_head(const Checkpoint& text_params,
                                     const PromptSet& prompts,
                                     double logit_scale = kDefaultLogitScale) {
  prompts.validate();
  if (!(logit_scale > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "logit scale must be positive");
  }
  const TextTokenizer tok = tokenizer_of(text_params);
  std::vector<std::string> texts;
  for (const auto& cls : prompts.classnames) {
    for (const auto& t : prompts.templates) texts.push_back(PromptSet::fill(t, cls));
  }
  const Tensor emb = encode_text(text_params, tok.encode_batch(texts));
  const std::size_t d = emb.dim(1), np = prompts.templates.size();
  const std::size_t nc = prompts.classnames.size();
  std::vector<double> rows(emb.data().begin(), emb.data().end());
  if (!detail::normalize_rows(rows, d)) {
    throw Error(ErrorKind::DegenerateEmbedding,
                "a prompt embedded to the zero vector");
  }
  std::vector<double> cols(nc * d, 0.0);
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t p = 0; p < np; ++p) {
      for (std::size_t k = 0; k < d; ++k) cols[c * d + k] += rows[(c * np + p) * d + k];
    }
    for (std::size_t k = 0; k < d; ++k) cols[c * d + k] /= static_cast<double>(np);
  }
  if (!detail::normalize_rows(cols, d)) {
    throw Error(ErrorKind::DegenerateEmbedding,
                "class '" + prompts.classnames[0] + "' averaged to the zero vector");
  }
  Tensor w({d, nc});
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t k = 0; k < d; ++k) w.at(k, c) = static_cast<float>(cols[c * d + k]);
  }
  return ClassificationHead(std::move(w), logit_scale);
}

// logits[n, c] = scale * <normalize(e_n), column c>.
inline Tensor classify(const Tensor& embeddings, const ClassificationHead& head) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != head.dim()) {
    throw Error(ErrorKind::ShapeMismatch,
                "embeddings " + shape_str(embeddings.shape()) +
                    " do not match head dimension " + std::to_string(head.dim()));
  }
  const std::size_t n = embeddings.dim(0), d = head.dim(), nc = head.num_classes();
  Tensor logits({n, nc});
  const Tensor& w = head.weights();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += double(embeddings.at(i, k)) * embeddings.at(i, k);
    const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
    for (std::size_t c = 0; c < nc; ++c) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += double(embeddings.at(i, k)) * w.at(k, c);
      logits.at(i, c) = static_cast<float>(head.logit_scale() * dot * inv);
    }
  }
  return logits;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  std::vector<std::size_t> out(scores.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = scores.row(i);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[i] = best;
  }
  return out;
}

// Differentiable head for training graphs: scale * normalize(x) * W, with W
// registered as a frozen parameter.
inline Var add_head(Graph& g, const ClassificationHead& head, Var embeddings,
                    const std::string& name = "head.frozen") {
  const Var w = g.parameter(name, head.weights(), false);
  return g.scale(g.matmul(g.l2_normalize(embeddings), w), head.logit_scale());
}

}  // namespace mpatch

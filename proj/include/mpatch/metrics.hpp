#pragma once

// Evaluation metrics: accuracy, macro mAP, cross-modal Recall@K, paired
// cosine-similarity statistics and linear probing.
//
// mAP is macro-averaged: AP is computed per class from that class's score
// ranking and averaged over classes with at least one positive. Ranks are
// 1-based and ties in score go to the lower sample index. Retrieval ties go
// to the lower gallery index.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpatch/autodiff.hpp"
#include "mpatch/data.hpp"
#include "mpatch/encoder.hpp"
#include "mpatch/optim.hpp"
#include "mpatch/tensor.hpp"
#include "mpatch/zeroshot.hpp"

namespace mpatch {

enum class Metric { Accuracy, MeanAveragePrecision };

inline const char* to_string(Metric m) {
  return m == Metric::Accuracy ? "accuracy" : "mAP";
}

struct MetricsReport {
  std::string task;
  std::string metric;
  double value = 0.0;
  std::vector<double> per_class;
  nlohmann::json extra = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j{{"task", task}, {"metric", metric}, {"value", value},
                     {"config", config}};
    if (!per_class.empty()) j["per_class"] = per_class;
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return j;
  }
};

inline double accuracy(const std::vector<std::size_t>& predictions,
                       const std::vector<std::size_t>& labels) {
  if (predictions.empty()) {
    throw Error(ErrorKind::InvalidArgument, "accuracy of an empty set");
  }
  if (predictions.size() != labels.size()) {
    throw Error(ErrorKind::ShapeMismatch, "prediction and label counts differ");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// AP of one column; NaN when the column has no positives.
inline double average_precision(const Tensor& scores, const Tensor& labels,
                                std::size_t c) {
  const std::size_t n = scores.dim(0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.at(a, c) > scores.at(b, c);
  });
  double sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t rank = 0; rank < n; ++rank) {
    if (labels.at(order[rank], c) > 0.5f) {
      ++positives;
      sum += static_cast<double>(positives) / static_cast<double>(rank + 1);
    }
  }
  return positives ? sum / static_cast<double>(positives)
                   : std::numeric_limits<double>::quiet_NaN();
}

inline std::vector<double> per_class_ap(const Tensor& scores, const Tensor& labels) {
  if (scores.shape() != labels.shape() || scores.rank() != 2) {
    throw Error(ErrorKind::ShapeMismatch,
                "scores " + shape_str(scores.shape()) + " vs labels " +
                    shape_str(labels.shape()));
  }
  std::vector<double> out(scores.dim(1));
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = average_precision(scores, labels, c);
  return out;
}

inline double mean_average_precision(const Tensor& scores, const Tensor& labels) {
  const auto aps = per_class_ap(scores, labels);
  double sum = 0.0;
  std::size_t used = 0;
  for (double ap : aps) {
    if (std::isnan(ap)) continue;
    sum += ap;
    ++used;
  }
  if (!used) {
    throw Error(ErrorKind::InvalidArgument, "mAP needs at least one positive label");
  }
  return sum / static_cast<double>(used);
}

// ---- retrieval -------------------------------------------------------------

struct EmbeddingSet {
  Tensor matrix;  // [N, D]
  std::vector<std::string> ids;
  bool normalized = false;

  EmbeddingSet() = default;
  EmbeddingSet(Tensor m, std::vector<std::string> i, bool normalize_rows = false)
      : matrix(std::move(m)), ids(std::move(i)) {
    if (matrix.rank() != 2 || matrix.dim(0) != ids.size()) {
      throw Error(ErrorKind::ShapeMismatch, "embedding rows and ids differ");
    }
    if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
      throw Error(ErrorKind::InvalidArgument, "embedding ids must be unique");
    }
    if (normalize_rows) {
      std::vector<double> rows(matrix.data().begin(), matrix.data().end());
      detail::normalize_rows(rows, matrix.dim(1));
      for (std::size_t i = 0; i < rows.size(); ++i) matrix[i] = static_cast<float>(rows[i]);
      normalized = true;
    }
  }
};

// Cosine similarity matrix [Na, Nb] in double precision.
inline std::vector<double> cosine_matrix(const Tensor& a, const Tensor& b) {
  if (a.dim(1) != b.dim(1)) {
    throw Error(ErrorKind::ShapeMismatch, "embedding dimensions differ");
  }
  const std::size_t na = a.dim(0), nb = b.dim(0), d = a.dim(1);
  auto norms = [d](const Tensor& t) {
    std::vector<double> out(t.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) sq += double(t.at(i, k)) * t.at(i, k);
      out[i] = std::sqrt(sq);
    }
    return out;
  };
  const auto na_ = norms(a), nb_ = norms(b);
  std::vector<double> sim(na * nb);
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += double(a.at(i, k)) * b.at(j, k);
      const double den = na_[i] * nb_[j];
      sim[i * nb + j] = den > 0.0 ? dot / den : 0.0;
    }
  }
  return sim;
}

struct SimilarityMatrix {
  std::vector<double> values;  // row-major [rows, cols]
  std::size_t rows = 0, cols = 0;

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  SimilarityMatrix transposed() const {
    SimilarityMatrix t{std::vector<double>(values.size()), cols, rows};
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) t.values[j * rows + i] = at(i, j);
    }
    return t;
  }
};

inline SimilarityMatrix similarity(const EmbeddingSet& a, const EmbeddingSet& b) {
  return {cosine_matrix(a.matrix, b.matrix), a.matrix.dim(0), b.matrix.dim(0)};
}

// Fraction of queries whose paired gallery row ranks within the top k.
// `target[i]` is the gallery row paired with query row i.
inline double recall_from_similarity(const SimilarityMatrix& sim,
                                     const std::vector<std::size_t>& target,
                                     std::size_t k) {
  if (k < 1 || k > sim.cols) {
    throw Error(ErrorKind::InvalidArgument,
                "k=" + std::to_string(k) + " outside [1, gallery size " +
                    std::to_string(sim.cols) + "]");
  }
  if (target.size() != sim.rows) {
    throw Error(ErrorKind::ShapeMismatch, "pairing does not cover every query");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < sim.rows; ++i) {
    const std::size_t p = target[i];
    const double sp = sim.at(i, p);
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < sim.cols && ahead < k; ++j) {
      const double s = sim.at(i, j);
      if (s > sp || (s == sp && j < p)) ++ahead;
    }
    hits += ahead < k;
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows);
}

inline std::vector<std::size_t> resolve_pairing(
    const EmbeddingSet& query, const EmbeddingSet& gallery,
    const std::map<std::string, std::string>& pairing) {
  std::map<std::string, std::size_t> gallery_row;
  for (std::size_t j = 0; j < gallery.ids.size(); ++j) gallery_row[gallery.ids[j]] = j;
  std::vector<std::size_t> target(query.ids.size());
  for (std::size_t i = 0; i < query.ids.size(); ++i) {
    auto it = pairing.find(query.ids[i]);
    if (it == pairing.end()) {
      throw Error(ErrorKind::InvalidArgument,
                  "query '" + query.ids[i] + "' has no paired gallery id");
    }
    auto g = gallery_row.find(it->second);
    if (g == gallery_row.end()) {
      throw Error(ErrorKind::InvalidArgument,
                  "paired id '" + it->second + "' is not in the gallery");
    }
    target[i] = g->second;
  }
  return target;
}

inline double recall_at_k(const EmbeddingSet& query, const EmbeddingSet& gallery,
                          const std::map<std::string, std::string>& pairing,
                          std::size_t k) {
  return recall_from_similarity(similarity(query, gallery),
                                resolve_pairing(query, gallery, pairing), k);
}

inline std::map<std::string, std::string> identity_pairing(
    const std::vector<std::string>& ids) {
  std::map<std::string, std::string> out;
  for (const auto& id : ids) out[id] = id;
  return out;
}

// ---- similarity drift ------------------------------------------------------

struct CosineStats {
  double mean = 0.0;
  double median = 0.0;
  std::vector<std::size_t> histogram;  // 20 bins over [-1, 1]

  static constexpr std::size_t kBins = 20;

  nlohmann::json to_json() const {
    return {{"mean", mean}, {"median", median}, {"histogram", histogram},
            {"bins", kBins}, {"range", {-1.0, 1.0}}};
  }
};

inline std::vector<double> paired_cosines(const EmbeddingSet& a, const EmbeddingSet& b) {
  if (a.ids != b.ids) {
    throw Error(ErrorKind::InvalidArgument,
                "paired embedding sets must list the same ids in the same order");
  }
  if (a.matrix.dim(1) != b.matrix.dim(1)) {
    throw Error(ErrorKind::ShapeMismatch, "embedding dimensions differ");
  }
  const std::size_t n = a.ids.size(), d = a.matrix.dim(1);
  std::vector<double> cos(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double x = a.matrix.at(i, k), y = b.matrix.at(i, k);
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    const double den = std::sqrt(na) * std::sqrt(nb);
    cos[i] = den > 0.0 ? std::clamp(dot / den, -1.0, 1.0) : 0.0;
  }
  return cos;
}

inline CosineStats cosine_similarity_stats(const EmbeddingSet& a, const EmbeddingSet& b) {
  std::vector<double> cos = paired_cosines(a, b);
  if (cos.empty()) throw Error(ErrorKind::InvalidArgument, "empty embedding sets");
  CosineStats s;
  s.histogram.assign(CosineStats::kBins, 0);
  double sum = 0.0;
  for (double c : cos) {
    sum += c;
    auto bin = static_cast<std::size_t>((c + 1.0) / 2.0 * CosineStats::kBins);
    s.histogram[std::min(bin, CosineStats::kBins - 1)]++;
  }
  s.mean = sum / static_cast<double>(cos.size());
  std::sort(cos.begin(), cos.end());
  const std::size_t n = cos.size();
  s.median = n % 2 ? cos[n / 2] : 0.5 * (cos[n / 2 - 1] + cos[n / 2]);
  return s;
}

// ---- zero-shot evaluation ---------------------------------------------------

// Accuracy (argmax) for single-label data, macro mAP for multi-label data.
inline double task_metric(const Tensor& logits, const Tensor& labels, bool multilabel) {
  if (multilabel) return mean_average_precision(logits, labels);
  std::vector<std::size_t> truth(labels.dim(0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < labels.dim(1); ++c) {
      if (labels.at(i, c) > labels.at(i, best)) best = c;
    }
    truth[i] = best;
  }
  return accuracy(argmax_rows(logits), truth);
}

inline Metric metric_for(const MultiModalDataset& ds) {
  return ds.multilabel() ? Metric::MeanAveragePrecision : Metric::Accuracy;
}

inline double zero_shot_metric(const Tensor& embeddings, const ClassificationHead& head,
                               const Tensor& labels, bool multilabel) {
  return task_metric(classify(embeddings, head), labels, multilabel);
}

// ---- linear probing -----------------------------------------------------------

struct LinearProbe {
  Tensor weight;  // [D, C]
  Tensor bias;    // [C]

  Tensor scores(const Tensor& x) const {
    const std::size_t n = x.dim(0), d = weight.dim(0), c = weight.dim(1);
    Tensor out({n, c});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double acc = bias[j];
        for (std::size_t k = 0; k < d; ++k) acc += double(x.at(i, k)) * weight.at(k, j);
        out.at(i, j) = static_cast<float>(acc);
      }
    }
    return out;
  }
};

// Trains a linear layer (with bias) on fixed features. Softmax cross-entropy
// for single-label targets, per-class logistic loss for multi-label ones.
inline LinearProbe train_linear_probe(const Tensor& features, const Tensor& labels,
                                      bool multilabel, const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t n = features.dim(0), d = features.dim(1), c = labels.dim(1);
  if (labels.dim(0) != n) throw Error(ErrorKind::ShapeMismatch, "feature/label rows differ");
  {
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (labels.at(i, j) > 0.5f) seen.insert(j);
      }
    }
    if (seen.size() < 2) {
      throw Error(ErrorKind::InvalidArgument,
                  "linear probe needs at least two classes present in training data");
    }
  }
  const CounterRng rng = CounterRng(cfg.seed).stream("probe-init");
  Checkpoint probe;
  probe.add("weight", detail::random_normal({d, c}, 0.01, rng));
  probe.add("bias", Tensor({c}, 0.0f));
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  const BatchPlan plan = BatchPlan::make(n, cfg);
  AdamW opt(cfg.weight_decay);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(rows, cfg.seed, epoch);
    for (std::size_t s = 0; s < plan.steps_per_epoch; ++s, ++t) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s * plan.batch),
                                   order.begin() + static_cast<std::ptrdiff_t>((s + 1) * plan.batch));
      Graph g;
      const Var x = g.constant("x", gather_rows(features, idx));
      const Var w = g.parameter("weight", probe.tensor("weight"), true);
      const Var b = g.parameter("bias", probe.tensor("bias"), true);
      const Var logits = g.add(g.matmul(x, w), b);
      const Tensor y = gather_rows(labels, idx);
      Var loss;
      if (multilabel) {
        loss = g.binary_cross_entropy(logits, g.constant("y", y));
      } else {
        Tensor ids({idx.size()});
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::size_t best = 0;
          for (std::size_t j = 1; j < c; ++j) {
            if (y.at(i, j) > y.at(i, best)) best = j;
          }
          ids[i] = static_cast<float>(best);
        }
        loss = g.softmax_cross_entropy(logits, g.constant("y", ids));
      }
      g.forward();
      opt.step(probe, g.backward(loss), plan.lr(t, cfg));
    }
  }
  return {probe.tensor("weight"), probe.tensor("bias")};
}

}  // namespace mpatch

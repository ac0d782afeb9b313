#pragma once

// Optimization loops: contrastive image-text pretraining, frozen-head
// fine-tuning, the alpha sweep over interpolated checkpoints, and
// cross-modal alignment of a student encoder to a frozen teacher.

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mpatch/autodiff.hpp"
#include "mpatch/checkpoint.hpp"
#include "mpatch/data.hpp"
#include "mpatch/encoder.hpp"
#include "mpatch/metrics.hpp"
#include "mpatch/optim.hpp"
#include "mpatch/zeroshot.hpp"

namespace mpatch {

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double mse = 0.0;  // alignment only
  double ce = 0.0;   // alignment only
};

struct TrainLog {
  std::string stage;
  std::vector<StepRecord> steps;
  std::size_t steps_per_epoch = 0;

  // Mean loss over the final epoch.
  double final_epoch_loss() const {
    if (steps.empty() || !steps_per_epoch) return 0.0;
    const std::size_t n = std::min(steps_per_epoch, steps.size());
    double sum = 0.0;
    for (std::size_t i = steps.size() - n; i < steps.size(); ++i) sum += steps[i].loss;
    return sum / static_cast<double>(n);
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : steps) {
      nlohmann::json r{{"step", s.step}, {"lr", s.lr}, {"loss", s.loss}};
      if (stage == "align") {
        r["mse"] = s.mse;
        r["ce"] = s.ce;
        r["total"] = s.loss;
      }
      rows.push_back(std::move(r));
    }
    return {{"stage", stage}, {"steps_per_epoch", steps_per_epoch}, {"steps", rows}};
  }
};

namespace detail {

inline std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

inline std::vector<std::size_t> batch_rows(const std::vector<std::size_t>& order,
                                           std::size_t step, std::size_t batch) {
  return {order.begin() + static_cast<std::ptrdiff_t>(step * batch),
          order.begin() + static_cast<std::ptrdiff_t>((step + 1) * batch)};
}

inline Tensor class_id_targets(const Tensor& labels) {
  Tensor ids({labels.dim(0)});
  for (std::size_t i = 0; i < labels.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < labels.dim(1); ++c) {
      if (labels.at(i, c) > labels.at(i, best)) best = c;
    }
    ids[i] = static_cast<float>(best);
  }
  return ids;
}

inline Tensor augmented(const Tensor& images, std::uint64_t seed, std::size_t step) {
  Tensor out = images;
  const std::size_t n = images.dim(0), stride = images.size() / n;
  const CounterRng root = CounterRng(seed).stream("augment", step);
  for (std::size_t i = 0; i < n; ++i) {
    augment_rgb(out.data().subspan(i * stride, stride), images.dim(3), root.stream(i));
  }
  return out;
}

inline Var task_loss(Graph& g, Var logits, const Tensor& labels, bool multilabel) {
  if (multilabel) return g.binary_cross_entropy(logits, g.constant("labels", labels));
  return g.softmax_cross_entropy(logits, g.constant("labels", class_id_targets(labels)));
}

inline double step_scalar(const Graph& g, Var v) { return static_cast<double>(g.scalar(v)); }

// Symmetric in-batch contrastive loss; row i of each side is a positive pair.
inline Var contrastive_loss(Graph& g, Var image_emb, Var text_emb, double scale) {
  const std::size_t n = g.shape(image_emb).at(0);
  Tensor diag({n});
  for (std::size_t i = 0; i < n; ++i) diag[i] = static_cast<float>(i);
  const Var zi = g.l2_normalize(image_emb);
  const Var zt = g.l2_normalize(text_emb);
  const Var targets = g.constant("targets", diag);
  const Var i2t = g.softmax_cross_entropy(g.scale(g.matmul(zi, zt, true), scale), targets);
  const Var t2i = g.softmax_cross_entropy(g.scale(g.matmul(zt, zi, true), scale), targets);
  return g.scale(g.add(i2t, t2i), 0.5);
}

struct AlignLoss {
  Var mse, ce, total;
};

inline AlignLoss align_loss(Graph& g, Var student_emb, const Tensor& teacher_emb,
                            const ClassificationHead& head, const Tensor& labels,
                            bool multilabel, double mse_weight, double lambda) {
  AlignLoss l;
  l.mse = g.mse_loss(student_emb, g.constant("teacher", teacher_emb));
  l.ce = task_loss(g, add_head(g, head, student_emb), labels, multilabel);
  l.total = g.add(g.scale(l.mse, mse_weight), g.scale(l.ce, lambda));
  return l;
}

}  // namespace detail

// ---- contrastive pretraining ----------------------------------------------

// Symmetric in-batch contrastive objective over image/caption pairs of the
// train split, with cosine logits at the fixed scale stored in the image
// checkpoint. Returns (image, text) checkpoints tagged "zeroshot".
inline std::pair<Checkpoint, Checkpoint> pretrain_contrastive(
    const EncoderConfig& img_cfg, const EncoderConfig& txt_cfg,
    const MultiModalDataset& pairs, const TrainConfig& cfg, TrainLog* log = nullptr) {
  cfg.validate();
  img_cfg.validate();
  txt_cfg.validate();
  if (img_cfg.kind != EncoderKind::Image || txt_cfg.kind != EncoderKind::Text) {
    throw Error(ErrorKind::ArchitectureMismatch, "pretraining needs image and text configs");
  }
  if (img_cfg.embed_dim != txt_cfg.embed_dim) {
    throw Error(ErrorKind::ShapeMismatch, "image and text embedding dims differ");
  }
  if (txt_cfg.channels != pairs.tokenizer.vocab_size()) {
    throw Error(ErrorKind::ShapeMismatch, "text encoder vocabulary does not match tokenizer");
  }
  const auto& rows = pairs.splits.train;
  const BatchPlan plan = BatchPlan::make(rows.size(), cfg);
  if (plan.batch < 2) {
    throw Error(ErrorKind::InvalidArgument,
                "contrastive pretraining needs a batch of at least 2 pairs");
  }
  Checkpoint img = init_encoder(img_cfg);
  Checkpoint txt = init_encoder(txt_cfg);
  const double scale = std::exp(static_cast<double>(img.tensor("logit_scale")[0]));
  AdamW img_opt(cfg.weight_decay), txt_opt(cfg.weight_decay);
  if (log) {
    log->stage = "pretrain";
    log->steps_per_epoch = plan.steps_per_epoch;
  }

  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(rows, cfg.seed, epoch);
    for (std::size_t s = 0; s < plan.steps_per_epoch; ++s, ++t) {
      const auto idx = detail::batch_rows(order, s, plan.batch);
      Tensor images = gather_rows(pairs.rgb, idx);
      if (cfg.augment) images = detail::augmented(images, cfg.seed, t);
      Graph g;
      const auto ie = build_encoder_on(g, img_cfg, img, "img.", images, true);
      const auto te = build_encoder_on(g, txt_cfg, txt, "txt.",
                                       gather_rows(pairs.caption_tokens, idx), true);
      const Var loss = detail::contrastive_loss(g, ie.embedding, te.embedding, scale);
      g.forward();
      const auto grads = g.backward(loss);
      const double lr = plan.lr(t, cfg);
      img_opt.step(img, grads_with_prefix(grads, "img."), lr);
      txt_opt.step(txt, grads_with_prefix(grads, "txt."), lr);
      if (log) log->steps.push_back({t, lr, detail::step_scalar(g, loss)});
    }
  }
  img.meta()["stage"] = stage::kZeroshot;
  txt.meta()["stage"] = stage::kZeroshot;
  txt.meta()["tokenizer"] = pairs.tokenizer.to_json();
  return {std::move(img), std::move(txt)};
}

// ---- tasks -----------------------------------------------------------------

enum class TaskRole { Supported, Patching };

inline const char* to_string(TaskRole r) {
  return r == TaskRole::Supported ? "supported" : "patching";
}

// One dataset evaluated through the image encoder on its RGB composites.
struct TaskSpec {
  std::string name;
  TaskRole role = TaskRole::Patching;
  const MultiModalDataset* dataset = nullptr;
  const ClassificationHead* head = nullptr;
  std::string split = "val";

  Metric metric() const { return metric_for(*dataset); }

  void validate() const {
    if (!dataset || !head) {
      throw Error(ErrorKind::InvalidArgument, "task '" + name + "' needs a dataset and a head");
    }
    if (head->num_classes() != dataset->classes.size()) {
      throw Error(ErrorKind::ShapeMismatch,
                  "task '" + name + "' head classes differ from dataset classes");
    }
  }

  nlohmann::json to_json() const {
    return {{"name", name}, {"role", to_string(role)}, {"split", split},
            {"metric", to_string(metric())}};
  }
};

inline double evaluate_image_task(const Checkpoint& image_params, const TaskSpec& task) {
  task.validate();
  const auto& rows = task.dataset->splits.get(task.split);
  const Tensor emb = encode_image(image_params, gather_rows(task.dataset->rgb, rows));
  return zero_shot_metric(emb, *task.head, gather_rows(task.dataset->labels, rows),
                          task.dataset->multilabel());
}

// ---- frozen-head fine-tuning ----------------------------------------------

// Trains every image-encoder tensor against the frozen head on the task's
// train split. Softmax cross-entropy for single-label data, per-class
// logistic loss for multi-label data.
inline Checkpoint finetune_frozen_head(const Checkpoint& image_params,
                                       const ClassificationHead& head,
                                       const TaskSpec& task, const TrainConfig& cfg,
                                       TrainLog* log = nullptr) {
  cfg.validate();
  task.validate();
  const EncoderConfig ecfg = config_of(image_params);
  detail::expect_kind(ecfg, EncoderKind::Image);
  if (ecfg.embed_dim != head.dim()) {
    throw Error(ErrorKind::ShapeMismatch,
                "encoder dimension " + std::to_string(ecfg.embed_dim) +
                    " differs from head dimension " + std::to_string(head.dim()));
  }
  Checkpoint params = image_params;
  if (log) log->stage = "finetune";
  if (cfg.epochs == 0) return params;

  const MultiModalDataset& ds = *task.dataset;
  const auto& rows = ds.splits.train;
  const BatchPlan plan = BatchPlan::make(rows.size(), cfg);
  if (log) log->steps_per_epoch = plan.steps_per_epoch;
  AdamW opt(cfg.weight_decay);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(rows, cfg.seed, epoch);
    for (std::size_t s = 0; s < plan.steps_per_epoch; ++s, ++t) {
      const auto idx = detail::batch_rows(order, s, plan.batch);
      Tensor images = gather_rows(ds.rgb, idx);
      if (cfg.augment) images = detail::augmented(images, cfg.seed, t);
      Graph g;
      const auto enc = build_encoder_on(g, ecfg, params, "", images, true);
      const Var logits = add_head(g, head, enc.embedding);
      const Var loss = detail::task_loss(g, logits, gather_rows(ds.labels, idx),
                                         ds.multilabel());
      g.forward();
      const double lr = plan.lr(t, cfg);
      opt.step(params, g.backward(loss), lr);
      if (log) log->steps.push_back({t, lr, detail::step_scalar(g, loss)});
    }
  }
  params.meta()["stage"] = stage::kFinetuned;
  return params;
}

// ---- alpha sweep -------------------------------------------------------------

struct SweepRow {
  double alpha = 0.0;
  double supported = 0.0;
  double patching = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double chosen_alpha = 0.0;
  bool fallback = false;  // no alpha met the supported-task constraint
  double delta = 0.0;

  const SweepRow& row_at(double alpha) const {
    for (const auto& r : rows) {
      if (r.alpha == alpha) return r;
    }
    throw Error(ErrorKind::InvalidArgument, "alpha " + format_alpha(alpha) + " not in sweep");
  }

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows) {
      rs.push_back({{"alpha", r.alpha}, {"supported", r.supported}, {"patching", r.patching}});
    }
    return {{"rows", rs}, {"chosen_alpha", chosen_alpha}, {"fallback", fallback},
            {"delta", delta}};
  }
};

inline std::vector<double> default_alpha_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

inline void validate_grid(const std::vector<double>& alphas) {
  bool has0 = false, has1 = false;
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw Error(ErrorKind::InvalidArgument, "alpha grid value outside [0, 1]");
    }
    has0 |= a == 0.0;
    has1 |= a == 1.0;
  }
  if (!has0 || !has1) {
    throw Error(ErrorKind::InvalidArgument, "alpha grid must contain 0 and 1");
  }
}

// Picks the alpha with the best patching metric among rows whose supported
// metric stays within a (1 - delta) factor of the alpha = 0 row. Ties go to
// the smaller alpha.
inline SweepResult choose_alpha(std::vector<SweepRow> rows, double delta) {
  if (!(delta >= 0.0 && delta < 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "delta must lie in [0, 1)");
  }
  std::sort(rows.begin(), rows.end(),
            [](const SweepRow& a, const SweepRow& b) { return a.alpha < b.alpha; });
  validate_grid([&] {
    std::vector<double> a;
    for (const auto& r : rows) a.push_back(r.alpha);
    return a;
  }());
  SweepResult out;
  out.rows = std::move(rows);
  out.delta = delta;
  const double floor = (1.0 - delta) * out.row_at(0.0).supported;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    const auto& r = out.rows[i];
    if (r.supported < floor) continue;
    if (!best || r.patching > out.rows[*best].patching) best = i;
  }
  // alpha = 0 always satisfies the constraint, so this only triggers for
  // a degenerate (negative) supported metric.
  if (!best) {
    out.fallback = true;
    out.chosen_alpha = 0.0;
  } else {
    out.chosen_alpha = out.rows[*best].alpha;
  }
  return out;
}

inline SweepResult sweep_alpha(const Checkpoint& zs, const Checkpoint& ft,
                               std::vector<double> alphas, const TaskSpec& supported,
                               const TaskSpec& patching, double delta) {
  const CompatReport report = compat_check(zs, ft);
  if (!report.ok()) throw Error(ErrorKind::Incompatible, report.describe());
  validate_grid(alphas);
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  std::vector<SweepRow> rows;
  for (double a : alphas) {
    const Checkpoint w = interpolate(zs, ft, a);
    rows.push_back({a, evaluate_image_task(w, supported), evaluate_image_task(w, patching)});
  }
  return choose_alpha(std::move(rows), delta);
}

// ---- cross-modal alignment -------------------------------------------------------

enum class AlignInput { MultiSpectral, Rgb };

struct AlignOptions {
  double mse_weight = 1.0;  // 0 drops the embedding-matching term
  AlignInput input = AlignInput::MultiSpectral;
  std::vector<std::size_t> bands;  // subset of MS bands; empty = all
  std::string split = "train";
};

// Student input tensor for a set of dataset rows.
inline Tensor student_input(const MultiModalDataset& ds, const AlignOptions& opt,
                            const std::vector<std::size_t>& rows) {
  if (opt.input == AlignInput::Rgb) return gather_rows(ds.rgb, rows);
  const Tensor ms = gather_rows(ds.ms, rows);
  return opt.bands.empty() ? ms : select_bands(ms, opt.bands);
}

inline std::size_t student_channels(const MultiModalDataset& ds, const AlignOptions& opt) {
  if (opt.input == AlignInput::Rgb) return 3;
  return opt.bands.empty() ? ds.ms.dim(1) : opt.bands.size();
}

// A fresh student for `target_dim`: seeded encoder plus, when dimensions
// differ, a seeded projection head stored in the same checkpoint.
inline Checkpoint init_student(const EncoderConfig& cfg, std::size_t target_dim) {
  Checkpoint ck = init_encoder(cfg);
  if (cfg.embed_dim != target_dim) {
    ProjectionHead::random(cfg.embed_dim, target_dim, cfg.seed).store(ck);
  }
  return ck;
}

// Student embeddings in the teacher space.
inline Tensor encode_student(const Checkpoint& student, const Tensor& inputs,
                             std::size_t target_dim) {
  const EncoderConfig cfg = config_of(student);
  const auto proj = ProjectionHead::from(student);
  if (cfg.kind == EncoderKind::Modality) {
    return encode_modality(student, inputs, proj ? &*proj : nullptr, target_dim);
  }
  if (cfg.embed_dim != target_dim && !proj) {
    throw Error(ErrorKind::ShapeMismatch, "student needs a projection head");
  }
  return detail::run_encoder(student, cfg, inputs, proj ? &*proj : nullptr);
}

// loss = mse_weight * MSE(teacher(rgb), student(x)) + lambda * CE(head(student(x)), y).
// Teacher, head and text encoder stay frozen; the student and its projection
// head are trained.
inline Checkpoint align(const Checkpoint& teacher, const Checkpoint& student_init,
                        const ClassificationHead& head, const MultiModalDataset& paired,
                        const TrainConfig& cfg, const AlignOptions& opt = {},
                        TrainLog* log = nullptr) {
  cfg.validate();
  if (!(opt.mse_weight >= 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "mse weight must be >= 0");
  }
  if (paired.ms.dim(0) != paired.size() || paired.rgb.dim(0) != paired.size() ||
      paired.labels.dim(0) != paired.size()) {
    throw Error(ErrorKind::InvalidArgument,
                "alignment needs paired multi-spectral, RGB and label rows");
  }
  const EncoderConfig tcfg = config_of(teacher);
  detail::expect_kind(tcfg, EncoderKind::Image);
  if (tcfg.embed_dim != head.dim()) {
    throw Error(ErrorKind::ShapeMismatch, "teacher and head dimensions differ");
  }
  const std::size_t dim = head.dim();
  const EncoderConfig scfg = config_of(student_init);
  if (scfg.channels != student_channels(paired, opt)) {
    throw Error(ErrorKind::ShapeMismatch,
                "student expects " + std::to_string(scfg.channels) + " channels, input has " +
                    std::to_string(student_channels(paired, opt)));
  }
  auto proj = ProjectionHead::from(student_init);
  if ((scfg.embed_dim != dim) != proj.has_value()) {
    throw Error(ErrorKind::ShapeMismatch,
                "projection head must be present exactly when student and teacher "
                "dimensions differ");
  }

  const auto& rows = paired.splits.get(opt.split);
  const Tensor teacher_emb = encode_image(teacher, gather_rows(paired.rgb, rows));
  const Tensor inputs = student_input(paired, opt, rows);
  const Tensor labels = gather_rows(paired.labels, rows);

  Checkpoint student = student_init;
  const BatchPlan plan = BatchPlan::make(rows.size(), cfg);
  if (log) {
    log->stage = "align";
    log->steps_per_epoch = plan.steps_per_epoch;
  }
  AdamW optim(cfg.weight_decay);
  const auto local = detail::iota_rows(rows.size());
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(local, cfg.seed, epoch);
    for (std::size_t s = 0; s < plan.steps_per_epoch; ++s, ++t) {
      const auto idx = detail::batch_rows(order, s, plan.batch);
      Graph g;
      const auto enc = build_encoder_on(g, scfg, student, "", gather_rows(inputs, idx), true);
      Var emb = enc.embedding;
      if (proj) emb = add_projection(g, *proj, "", emb, true);
      const auto [mse, ce, total] =
          detail::align_loss(g, emb, gather_rows(teacher_emb, idx), head,
                             gather_rows(labels, idx), paired.multilabel(), opt.mse_weight,
                             cfg.lambda);
      g.forward();
      const auto grads = g.backward(total);
      const double lr = plan.lr(t, cfg);
      optim.step(student, grads, lr);
      if (proj) {
        proj->weight = student.tensor("proj.weight");
        proj->bias = student.tensor("proj.bias");
      }
      if (log) {
        log->steps.push_back({t, lr, detail::step_scalar(g, total),
                              detail::step_scalar(g, mse), detail::step_scalar(g, ce)});
      }
    }
  }
  student.meta()["stage"] = stage::kAligned;
  student.meta()["teacher_stage"] = teacher.meta_or("stage", "");
  return student;
}

// Zero-shot metric of a student on a split of its own modality.
inline double evaluate_student(const Checkpoint& student, const ClassificationHead& head,
                               const MultiModalDataset& ds, const AlignOptions& opt,
                               const std::string& split) {
  const auto& rows = ds.splits.get(split);
  const Tensor emb = encode_student(student, student_input(ds, opt, rows), head.dim());
  return zero_shot_metric(emb, head, gather_rows(ds.labels, rows), ds.multilabel());
}

}  // namespace mpatch

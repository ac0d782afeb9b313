#pragma once

// End-to-end experiment: synthetic data, contrastive pretraining, frozen-head
// fine-tuning, alpha sweep and patching, then cross-modal alignment of the
// multi-spectral student to the patched teacher, with evaluation and the
// loss/teacher/band ablations.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpatch/checkpoint.hpp"
#include "mpatch/data.hpp"
#include "mpatch/encoder.hpp"
#include "mpatch/metrics.hpp"
#include "mpatch/parallel.hpp"
#include "mpatch/svg.hpp"
#include "mpatch/training.hpp"
#include "mpatch/version.hpp"
#include "mpatch/zeroshot.hpp"

namespace mpatch {

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out = "run";
  DataConfig natural = DataConfig::natural_default();
  DataConfig satellite = DataConfig::satellite_default();
  EncoderConfig image = EncoderConfig::image_default();
  EncoderConfig text = EncoderConfig::text_default(2);  // vocabulary set from data
  EncoderConfig student = EncoderConfig::modality_default();
  TrainConfig pretrain, finetune, align, probe;
  std::vector<double> alphas = default_alpha_grid();
  double delta = 0.05;
  std::vector<std::size_t> recall_ks = {1, 5, 10, 50};
  std::string natural_prompts, satellite_prompts;  // optional JSON prompt files
  bool ablations = true;

  ExperimentConfig() {
    pretrain.epochs = 10;
    pretrain.peak_lr = 2e-3;
    pretrain.weight_decay = 0.1;
    pretrain.warmup_steps = 50;

    finetune.batch_size = 32;
    finetune.epochs = 8;
    finetune.peak_lr = 5e-4;
    finetune.warmup_steps = 20;
    finetune.weight_decay = 0.1;

    align.epochs = 10;
    align.peak_lr = 3e-3;
    align.warmup_steps = 100;
    align.weight_decay = 0.01;
    align.lambda = 0.05;

    probe.epochs = 20;
    probe.peak_lr = 1e-2;
    probe.warmup_steps = 10;
    probe.weight_decay = 0.0;
  }

  // Every stage seed is derived from the experiment seed.
  void propagate_seed() {
    natural.seed = derive_key(seed, label_hash("data/natural"));
    satellite.seed = derive_key(seed, label_hash("data/satellite"));
    image.seed = derive_key(seed, label_hash("encoder/image"));
    text.seed = derive_key(seed, label_hash("encoder/text"));
    student.seed = derive_key(seed, label_hash("encoder/student"));
    pretrain.seed = derive_key(seed, label_hash("train/pretrain"));
    finetune.seed = derive_key(seed, label_hash("train/finetune"));
    align.seed = derive_key(seed, label_hash("train/align"));
    probe.seed = derive_key(seed, label_hash("train/probe"));
  }

  void validate() const {
    natural.validate();
    satellite.validate();
    if (natural.multilabel) {
      throw Error(ErrorKind::InvalidArgument, "the supported task must be single-label");
    }
    if (natural.classes != satellite.classes) {
      throw Error(ErrorKind::InvalidArgument, "both domains must share the class list");
    }
    if (student.channels != satellite.bands) {
      throw Error(ErrorKind::InvalidArgument,
                  "student channels must equal the satellite band count");
    }
    validate_grid(alphas);
    if (!(delta >= 0.0 && delta < 1.0)) {
      throw Error(ErrorKind::InvalidArgument, "delta must lie in [0, 1)");
    }
    for (const auto* t : {&pretrain, &finetune, &align, &probe}) t->validate();
  }

  nlohmann::json to_json() const {
    auto enc = [](const EncoderConfig& c) {
      nlohmann::json j = c.to_json();
      j.erase("seed");
      return j;
    };
    auto train = [](const TrainConfig& c) {
      nlohmann::json j = c.to_json();
      j.erase("seed");
      return j;
    };
    auto data = [](const DataConfig& c) {
      nlohmann::json j = c.to_json();
      j.erase("seed");
      return j;
    };
    return {{"seed", seed},
            {"out", out},
            {"data", {{"natural", data(natural)}, {"satellite", data(satellite)}}},
            {"encoders",
             {{"image", enc(image)}, {"text", enc(text)}, {"student", enc(student)}}},
            {"train",
             {{"pretrain", train(pretrain)},
              {"finetune", train(finetune)},
              {"align", train(align)},
              {"probe", train(probe)}}},
            {"alphas", alphas},
            {"delta", delta},
            {"recall_ks", recall_ks},
            {"prompts", {{"natural", natural_prompts}, {"satellite", satellite_prompts}}},
            {"ablations", ablations}};
  }

  // Fields present in `j` override the current values.
  void merge(const nlohmann::json& j) {
    try {
      seed = j.value("seed", seed);
      out = j.value("out", out);
      if (j.contains("data")) {
        const auto& d = j.at("data");
        auto overlay = [](const DataConfig& base, const nlohmann::json& patch) {
          nlohmann::json merged = base.to_json();
          merged.merge_patch(patch);
          return DataConfig::from_json(merged);
        };
        if (d.contains("natural")) natural = overlay(natural, d.at("natural"));
        if (d.contains("satellite")) satellite = overlay(satellite, d.at("satellite"));
      }
      if (j.contains("encoders")) {
        const auto& e = j.at("encoders");
        auto overlay = [](const EncoderConfig& base, const nlohmann::json& patch) {
          nlohmann::json merged = base.to_json();
          merged.merge_patch(patch);
          merged["kind"] = to_string(base.kind);
          return EncoderConfig::from_json(merged);
        };
        if (e.contains("image")) image = overlay(image, e.at("image"));
        if (e.contains("text")) text = overlay(text, e.at("text"));
        if (e.contains("student")) student = overlay(student, e.at("student"));
      }
      if (j.contains("train")) {
        const auto& t = j.at("train");
        if (t.contains("pretrain")) pretrain = TrainConfig::from_json(t.at("pretrain"), pretrain);
        if (t.contains("finetune")) finetune = TrainConfig::from_json(t.at("finetune"), finetune);
        if (t.contains("align")) align = TrainConfig::from_json(t.at("align"), align);
        if (t.contains("probe")) probe = TrainConfig::from_json(t.at("probe"), probe);
      }
      alphas = j.value("alphas", alphas);
      delta = j.value("delta", delta);
      recall_ks = j.value("recall_ks", recall_ks);
      if (j.contains("prompts")) {
        natural_prompts = j.at("prompts").value("natural", natural_prompts);
        satellite_prompts = j.at("prompts").value("satellite", satellite_prompts);
      }
      ablations = j.value("ablations", ablations);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidArgument, std::string("bad config: ") + e.what());
    }
    student.channels = satellite.bands;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open config '" + path + "'");
    ExperimentConfig c;
    try {
      c.merge(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::InvalidArgument, "config '" + path + "' is not JSON: " + e.what());
    }
    return c;
  }
};

// ---- results ---------------------------------------------------------------

struct RetrievalTable {
  std::map<std::size_t, double> forward;   // query modality A -> gallery B
  std::map<std::size_t, double> backward;  // B -> A, from the transposed matrix

  double mean_at(std::size_t k) const { return 0.5 * (forward.at(k) + backward.at(k)); }

  nlohmann::json to_json(const std::string& a, const std::string& b) const {
    nlohmann::json f, r;
    for (const auto& [k, v] : forward) f["R@" + std::to_string(k)] = v;
    for (const auto& [k, v] : backward) r["R@" + std::to_string(k)] = v;
    return {{a + "->" + b, f}, {b + "->" + a, r}};
  }
};

// Recall@K in both directions between paired embedding matrices (row i of
// `a` pairs with row i of `b`), from a single similarity matrix.
inline RetrievalTable paired_retrieval(const Tensor& a, const Tensor& b,
                                       const std::vector<std::size_t>& ks) {
  const SimilarityMatrix sim{cosine_matrix(a, b), a.dim(0), b.dim(0)};
  const SimilarityMatrix simt = sim.transposed();
  std::vector<std::size_t> pair(a.dim(0));
  std::iota(pair.begin(), pair.end(), 0);
  RetrievalTable t;
  for (std::size_t k : ks) {
    const std::size_t kk = std::min(k, b.dim(0));
    t.forward[k] = recall_from_similarity(sim, pair, kk);
    t.backward[k] = recall_from_similarity(simt, pair, kk);
  }
  return t;
}

struct AlignmentOutcome {
  std::string name;
  std::string teacher_stage;
  AlignOptions options;
  double lambda = 0.0;
  double pre_metric = 0.0;   // zero-shot on the MS test split before alignment
  double post_metric = 0.0;  // after alignment
  RetrievalTable retrieval;  // teacher RGB <-> student MS, test split
  std::optional<double> probe_metric;
  Checkpoint student;
  TrainLog log;

  // Mean of zero-shot metric and mean R@10 over both directions.
  double combined() const { return 0.5 * (post_metric + retrieval.mean_at(10)); }

  nlohmann::json to_json() const {
    nlohmann::json bands = nlohmann::json::array();
    for (auto b : options.bands) bands.push_back(b);
    nlohmann::json j{{"name", name},
                     {"teacher_stage", teacher_stage},
                     {"mse_weight", options.mse_weight},
                     {"lambda", lambda},
                     {"input", options.input == AlignInput::Rgb ? "rgb" : "ms"},
                     {"bands", bands},
                     {"zeroshot_before", pre_metric},
                     {"zeroshot_after", post_metric},
                     {"retrieval", retrieval.to_json("rgb", "ms")},
                     {"combined", combined()}};
    if (probe_metric) j["linear_probe"] = *probe_metric;
    return j;
  }
};

struct TaskScores {
  double supported = 0.0;  // natural test accuracy
  double patching = 0.0;   // satellite RGB test mAP
};

struct ExperimentResult {
  ExperimentConfig config;
  double chosen_alpha = 0.0;
  SweepResult sweep;  // validation split
  SweepResult test_sweep;  // same grid on the test split, for the curve report
  TaskScores zeroshot, finetuned, patched;
  CosineStats drift_supported, drift_patching;
  std::map<std::string, AlignmentOutcome> alignments;
  TrainLog pretrain_log, finetune_log;
  Checkpoint image_zs, text_zs, image_ft, image_patched;
  Checkpoint head_natural, head_satellite;

  const AlignmentOutcome& main_alignment() const { return alignments.at("mse_ce"); }

  nlohmann::json metrics_json() const {
    nlohmann::json al = nlohmann::json::object();
    for (const auto& [name, a] : alignments) al[name] = a.to_json();
    auto scores = [](const TaskScores& s) {
      return nlohmann::json{{"supported_accuracy", s.supported}, {"patching_mAP", s.patching}};
    };
    // The output path is left out so reruns elsewhere compare byte-equal.
    nlohmann::json cfg = config.to_json();
    cfg.erase("out");
    return {{"build", build_id()},
            {"config", cfg},
            {"chosen_alpha", chosen_alpha},
            {"sweep", sweep.to_json()},
            {"test_sweep", test_sweep.to_json()},
            {"zeroshot", scores(zeroshot)},
            {"finetuned", scores(finetuned)},
            {"patched", scores(patched)},
            {"drift", {{"supported", drift_supported.to_json()},
                       {"patching", drift_patching.to_json()}}},
            {"alignment", al}};
  }
};

// ---- stages -------------------------------------------------------------------

inline PromptSet prompts_for(const MultiModalDataset& ds, const std::string& path) {
  if (path.empty()) return ds.prompts();
  PromptSet p = PromptSet::load(path);
  if (p.classnames != ds.classes) {
    throw Error(ErrorKind::InvalidArgument,
                "prompt file '" + path + "' lists different classes than the dataset");
  }
  return p;
}

inline EmbeddingSet embeddings_of(const Tensor& m, const MultiModalDataset& ds,
                                  const std::vector<std::size_t>& rows) {
  std::vector<std::string> ids;
  for (std::size_t r : rows) ids.push_back(ds.ids[r]);
  return EmbeddingSet(m, std::move(ids));
}

inline CosineStats drift_between(const Checkpoint& a, const Checkpoint& b,
                                 const MultiModalDataset& ds, const std::string& split) {
  const auto& rows = ds.splits.get(split);
  const Tensor x = gather_rows(ds.rgb, rows);
  return cosine_similarity_stats(embeddings_of(encode_image(a, x), ds, rows),
                                 embeddings_of(encode_image(b, x), ds, rows));
}

inline double linear_probe_metric(const Tensor& train_x, const Tensor& train_y,
                                  const Tensor& test_x, const Tensor& test_y,
                                  bool multilabel, const TrainConfig& cfg) {
  const LinearProbe probe = train_linear_probe(train_x, train_y, multilabel, cfg);
  return task_metric(probe.scores(test_x), test_y, multilabel);
}

// Aligns one student variant and evaluates it on the satellite test split.
inline AlignmentOutcome run_alignment(const std::string& name, const Checkpoint& teacher,
                                      const ClassificationHead& head,
                                      const MultiModalDataset& sat,
                                      const ExperimentConfig& cfg, AlignOptions opt,
                                      TrainConfig tc, bool with_probe) {
  EncoderConfig scfg = cfg.student;
  scfg.channels = student_channels(sat, opt);
  AlignmentOutcome out;
  out.name = name;
  out.options = opt;
  out.lambda = tc.lambda;
  out.teacher_stage = teacher.meta_or("stage", "");
  const Checkpoint init = init_student(scfg, head.dim());
  out.pre_metric = evaluate_student(init, head, sat, opt, "test");
  out.student = align(teacher, init, head, sat, tc, opt, &out.log);
  const auto& test = sat.splits.test;
  const Tensor rgb_emb = encode_image(teacher, gather_rows(sat.rgb, test));
  const Tensor ms_emb = encode_student(out.student, student_input(sat, opt, test), head.dim());
  out.post_metric = zero_shot_metric(ms_emb, head, gather_rows(sat.labels, test),
                                     sat.multilabel());
  out.retrieval = paired_retrieval(rgb_emb, ms_emb, cfg.recall_ks);
  if (with_probe) {
    const auto& train = sat.splits.train;
    const Tensor train_emb =
        encode_student(out.student, student_input(sat, opt, train), head.dim());
    out.probe_metric = linear_probe_metric(train_emb, gather_rows(sat.labels, train), ms_emb,
                                           gather_rows(sat.labels, test), sat.multilabel(),
                                           cfg.probe);
  }
  return out;
}

inline std::vector<std::size_t> rgb_band_indices(const MultiModalDataset& ds) {
  return {ds.composite.r, ds.composite.g, ds.composite.b};
}

struct PipelineData {
  MultiModalDataset natural, satellite;
};

inline PipelineData generate_data(const ExperimentConfig& cfg) {
  return {generate(cfg.natural), generate(cfg.satellite)};
}

inline ExperimentResult run_experiment(ExperimentConfig cfg, const PipelineData& data) {
  cfg.propagate_seed();
  cfg.student.channels = cfg.satellite.bands;
  cfg.text.channels = data.natural.tokenizer.vocab_size();
  cfg.validate();
  const MultiModalDataset& nat = data.natural;
  const MultiModalDataset& sat = data.satellite;

  ExperimentResult r;
  r.config = cfg;

  // Step 1: patching.
  std::tie(r.image_zs, r.text_zs) =
      pretrain_contrastive(cfg.image, cfg.text, nat, cfg.pretrain, &r.pretrain_log);
  const ClassificationHead nhead =
      build_head(r.text_zs, prompts_for(nat, cfg.natural_prompts));
  const ClassificationHead shead =
      build_head(r.text_zs, prompts_for(sat, cfg.satellite_prompts));
  r.head_natural = nhead.to_checkpoint();
  r.head_satellite = shead.to_checkpoint();

  TaskSpec supported{"natural", TaskRole::Supported, &nat, &nhead, "val"};
  TaskSpec patching{"satellite", TaskRole::Patching, &sat, &shead, "val"};
  r.image_ft = finetune_frozen_head(r.image_zs, shead, patching, cfg.finetune, &r.finetune_log);
  r.sweep = sweep_alpha(r.image_zs, r.image_ft, cfg.alphas, supported, patching, cfg.delta);
  r.chosen_alpha = r.sweep.chosen_alpha;
  r.image_patched = interpolate(r.image_zs, r.image_ft, r.chosen_alpha);

  TaskSpec supported_test = supported, patching_test = patching;
  supported_test.split = patching_test.split = "test";
  r.test_sweep = sweep_alpha(r.image_zs, r.image_ft, cfg.alphas, supported_test,
                             patching_test, cfg.delta);
  r.zeroshot = {r.test_sweep.row_at(0.0).supported, r.test_sweep.row_at(0.0).patching};
  r.finetuned = {r.test_sweep.row_at(1.0).supported, r.test_sweep.row_at(1.0).patching};
  r.patched = {evaluate_image_task(r.image_patched, supported_test),
               evaluate_image_task(r.image_patched, patching_test)};
  r.drift_supported = drift_between(r.image_zs, r.image_patched, nat, "test");
  r.drift_patching = drift_between(r.image_zs, r.image_patched, sat, "test");

  // Step 2: alignment, plus ablations over the loss terms, the teacher and
  // the input bands.
  struct Variant {
    std::string name;
    const Checkpoint* teacher;
    AlignOptions opt;
    TrainConfig tc;
    bool probe;
  };
  std::vector<Variant> variants{{"mse_ce", &r.image_patched, {}, cfg.align, true}};
  if (cfg.ablations) {
    AlignOptions ce_only;
    ce_only.mse_weight = 0.0;
    TrainConfig mse_only = cfg.align;
    mse_only.lambda = 0.0;
    AlignOptions rgb_bands;
    rgb_bands.bands = rgb_band_indices(sat);
    variants.push_back({"ce_only", &r.image_patched, ce_only, cfg.align, false});
    variants.push_back({"mse_only", &r.image_patched, {}, mse_only, false});
    variants.push_back({"unpatched_teacher", &r.image_zs, {}, cfg.align, false});
    variants.push_back({"rgb_bands", &r.image_patched, rgb_bands, cfg.align, false});
  }
  std::vector<AlignmentOutcome> outcomes(variants.size());
  parallel_for(variants.size(), [&](std::size_t i) {
    const Variant& v = variants[i];
    outcomes[i] = run_alignment(v.name, *v.teacher, shead, sat, cfg, v.opt, v.tc, v.probe);
  });
  for (auto& o : outcomes) r.alignments.emplace(o.name, std::move(o));
  return r;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.propagate_seed();
  return run_experiment(cfg, generate_data(c));
}

// ---- reports and plots --------------------------------------------------------

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline std::string sweep_plot(const SweepResult& s, const std::string& title) {
  svg::Series sup{"supported", {}, {}}, pat{"patching", {}, {}};
  for (const auto& r : s.rows) {
    sup.x.push_back(r.alpha);
    sup.y.push_back(r.supported);
    pat.x.push_back(r.alpha);
    pat.y.push_back(r.patching);
  }
  return svg::line_plot({sup, pat}, {title, "alpha", "metric"});
}

inline std::string drift_plot(const CosineStats& supported, const CosineStats& patching) {
  return svg::histogram_plot({"supported", "patching"},
                             {supported.histogram, patching.histogram},
                             {supported.mean, patching.mean}, -1.0, 1.0,
                             {"cosine similarity, zero-shot vs patched", "cosine", "fraction"});
}

inline std::string loss_plot(const std::vector<std::pair<std::string, const TrainLog*>>& logs,
                             const std::string& title) {
  std::vector<svg::Series> series;
  for (const auto& [label, log] : logs) {
    svg::Series s{label, {}, {}};
    for (const auto& st : log->steps) {
      s.x.push_back(static_cast<double>(st.step));
      s.y.push_back(st.loss);
    }
    series.push_back(std::move(s));
  }
  return svg::line_plot(series, {title, "step", "loss"});
}

// Writes every artifact of a finished experiment under `out`:
// data/, checkpoints/, reports/ and plots/.
inline void write_experiment(const ExperimentResult& r, const PipelineData& data,
                             const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  save_dataset(data.natural, (out / "data" / "natural").string());
  save_dataset(data.satellite, (out / "data" / "satellite").string());
  const fs::path ck = out / "checkpoints";
  fs::create_directories(ck);
  save(r.image_zs, (ck / "image_zeroshot.mpc").string());
  save(r.text_zs, (ck / "text_zeroshot.mpc").string());
  save(r.image_ft, (ck / "image_finetuned.mpc").string());
  save(r.image_patched, (ck / "image_patched.mpc").string());
  save(r.head_natural, (ck / "head_natural.mpc").string());
  save(r.head_satellite, (ck / "head_satellite.mpc").string());
  for (const auto& [name, a] : r.alignments) {
    save(a.student, (ck / ("student_" + name + ".mpc")).string());
  }
  const fs::path rep = out / "reports";
  write_json(out / "metrics.json", r.metrics_json());
  nlohmann::json logs{{"pretrain", r.pretrain_log.to_json()},
                      {"finetune", r.finetune_log.to_json()}};
  for (const auto& [name, a] : r.alignments) logs["align_" + name] = a.log.to_json();
  write_json(rep / "train_logs.json", logs);
  const fs::path plots = out / "plots";
  fs::create_directories(plots);
  svg::write((plots / "sweep_val.svg").string(), sweep_plot(r.sweep, "alpha sweep (val)"));
  svg::write((plots / "sweep_test.svg").string(), sweep_plot(r.test_sweep, "alpha sweep (test)"));
  svg::write((plots / "drift.svg").string(), drift_plot(r.drift_supported, r.drift_patching));
  std::vector<std::pair<std::string, const TrainLog*>> align_logs;
  for (const auto& [name, a] : r.alignments) align_logs.emplace_back(name, &a.log);
  svg::write((plots / "align_loss.svg").string(), loss_plot(align_logs, "alignment loss"));
  svg::write((plots / "train_loss.svg").string(),
             loss_plot({{"pretrain", &r.pretrain_log}, {"finetune", &r.finetune_log}},
                       "training loss"));
}

}  // namespace mpatch

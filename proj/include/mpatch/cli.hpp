#pragma once

// Command-line front end. Every subcommand reads a JSON experiment config
// (--config), applies flag overrides, resolves paths against --out, writes
// its artifacts plus a JSON report, and maps failures to exit codes:
//
//   0 ok                      5 malformed checkpoint file
//   1 internal error          6 incompatible checkpoints / architecture
//   2 usage error             7 stage-order violation
//   3 invalid argument/config 8 numerical failure
//   4 I/O error

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpatch/pipeline.hpp"

namespace mpatch::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kInvalid = 3,
  kIo = 4,
  kFormat = 5,
  kIncompatible = 6,
  kStageOrder = 7,
  kNumeric = 8,
};

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Io: return kIo;
    case ErrorKind::BadMagic:
    case ErrorKind::VersionMismatch:
    case ErrorKind::Truncated:
    case ErrorKind::OverlappingExtents:
    case ErrorKind::MalformedHeader: return kFormat;
    case ErrorKind::Incompatible:
    case ErrorKind::ArchitectureMismatch: return kIncompatible;
    case ErrorKind::StageOrder: return kStageOrder;
    case ErrorKind::NonFinite:
    case ErrorKind::DegenerateEmbedding: return kNumeric;
    case ErrorKind::ShapeMismatch:
    case ErrorKind::InvalidArgument: return kInvalid;
  }
  return kInternal;
}

namespace fs = std::filesystem;

struct Context {
  std::string config_path;
  std::string out = "";
  std::optional<std::uint64_t> seed;
  ExperimentConfig cfg;
  nlohmann::json args = nlohmann::json::object();

  fs::path out_dir() const { return fs::path(cfg.out); }
  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : out_dir() / path;
  }
  fs::path data_dir(const std::string& domain) const { return out_dir() / "data" / domain; }
  fs::path checkpoint(const std::string& name) const {
    return out_dir() / "checkpoints" / (name + ".mpc");
  }
};

inline void require_stage(const Checkpoint& ck, const std::string& stage,
                          const std::string& what, const std::string& fix) {
  const std::string got = ck.meta_or("stage", "");
  if (got != stage) {
    throw Error(ErrorKind::StageOrder, what + " is tagged '" + got + "', expected '" + stage +
                                           "'" + (fix.empty() ? "" : "; " + fix));
  }
}

// Loads a checkpoint produced by an earlier stage; a missing default
// artifact means the stages ran out of order.
inline Checkpoint load_stage(const Context& ctx, const std::string& flag_value,
                             const std::string& default_name, const std::string& producer) {
  const fs::path p = flag_value.empty() ? ctx.checkpoint(default_name) : ctx.resolve(flag_value);
  if (flag_value.empty() && !fs::exists(p)) {
    throw Error(ErrorKind::StageOrder,
                "'" + p.string() + "' does not exist; run `" + producer + "` first");
  }
  return load(p.string());
}

inline MultiModalDataset load_data(const Context& ctx, const std::string& flag_value,
                                   const std::string& domain) {
  const fs::path p = flag_value.empty() ? ctx.data_dir(domain) : ctx.resolve(flag_value);
  if (flag_value.empty() && !fs::exists(p / "manifest.json")) {
    throw Error(ErrorKind::StageOrder,
                "no " + domain + " dataset under '" + p.string() + "'; run `gen-data` first");
  }
  return load_dataset(p.string());
}

inline nlohmann::json report_base(const Context& ctx, const std::string& command) {
  return {{"command", command},
          {"build", build_id()},
          {"config", ctx.cfg.to_json()},
          {"args", ctx.args}};
}

inline void write_report(const Context& ctx, const std::string& command, nlohmann::json body) {
  nlohmann::json r = report_base(ctx, command);
  for (auto& [k, v] : body.items()) r[k] = v;
  write_json(ctx.out_dir() / "reports" / (command + ".json"), r);
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& p) {
  fs::create_directories(p.parent_path());
  save(ck, p.string());
}

inline void write_plot(const Context& ctx, const std::string& name, const std::string& doc) {
  fs::create_directories(ctx.out_dir() / "plots");
  svg::write((ctx.out_dir() / "plots" / name).string(), doc);
}

// Encodes a split with whatever encoder `ck` holds: image encoders see RGB
// composites, modality students see multi-spectral bands.
inline Tensor encode_split(const Checkpoint& ck, const MultiModalDataset& ds,
                           const std::vector<std::size_t>& rows, std::size_t target_dim) {
  const EncoderConfig cfg = config_of(ck);
  if (cfg.kind == EncoderKind::Image && !ck.contains("proj.weight")) {
    return encode_image(ck, gather_rows(ds.rgb, rows));
  }
  AlignOptions opt;
  if (cfg.kind == EncoderKind::Image) {
    opt.input = AlignInput::Rgb;
  } else if (cfg.channels != ds.ms.dim(1)) {
    if (cfg.channels != 3) {
      throw Error(ErrorKind::ShapeMismatch, "student channel count matches no input");
    }
    opt.bands = rgb_band_indices(ds);
  }
  return encode_student(ck, student_input(ds, opt, rows), target_dim);
}

inline std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoul(item));
  }
  return out;
}

// ---- application ----------------------------------------------------------------

class App {
 public:
  App() : app_("Weight-interpolation patching and cross-modal alignment toolkit", "mpatch") {
    app_.require_subcommand(1);
    // Global flags may follow the subcommand: `mpatch pipeline --seed 7`.
    app_.fallthrough();
    app_.add_option("--config", ctx_.config_path, "JSON experiment config");
    app_.add_option("--out", ctx_.out, "output directory (all paths are relative to it)");
    app_.add_option("--seed", seed_, "experiment seed (propagates to every stage)");
    app_.add_option("--epochs", epochs_, "override epochs of the stage being run");
    app_.add_option("--lr", lr_, "override peak learning rate of the stage being run");
    app_.add_option("--batch-size", batch_, "override batch size of the stage being run");
    add_gen_data();
    add_pretrain();
    add_build_head();
    add_finetune();
    add_patch();
    add_sweep();
    add_align();
    add_eval_zeroshot();
    add_eval_retrieval();
    add_eval_probe();
    add_eval_simstats();
    add_pipeline();
  }

  int run(int argc, const char* const* argv) {
    try {
      app_.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app_.exit(e);
    } catch (const CLI::ParseError& e) {
      return fail(kUsage, "usage", e.what());
    }
    try {
      prepare();
      action_();
      return kOk;
    } catch (const Error& e) {
      return fail(exit_code_for(e.kind()), to_string(e.kind()), e.what());
    } catch (const std::exception& e) {
      return fail(kInternal, "internal", e.what());
    }
  }

 private:
  int fail(int code, const std::string& kind, const std::string& message) {
    nlohmann::json j{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
    std::cerr << j.dump() << '\n';
    return code;
  }

  void prepare() {
    if (!ctx_.config_path.empty()) ctx_.cfg = ExperimentConfig::load(ctx_.config_path);
    if (!ctx_.out.empty()) ctx_.cfg.out = ctx_.out;
    if (seed_) ctx_.cfg.seed = *seed_;
    ctx_.cfg.propagate_seed();
  }

  void override_train(TrainConfig& t) const {
    if (epochs_) t.epochs = *epochs_;
    if (lr_) t.peak_lr = *lr_;
    if (batch_) t.batch_size = *batch_;
    t.validate();
  }

  // Records the flags a subcommand was invoked with.
  void record(const nlohmann::json& args) {
    ctx_.args = args;
    if (epochs_) ctx_.args["epochs"] = *epochs_;
    if (lr_) ctx_.args["lr"] = *lr_;
    if (batch_) ctx_.args["batch_size"] = *batch_;
  }

  void add_gen_data() {
    auto* c = app_.add_subcommand("gen-data", "generate the synthetic natural/satellite datasets");
    auto domain = std::make_shared<std::string>("both");
    auto samples = std::make_shared<std::optional<std::size_t>>();
    c->add_option("--domain", *domain, "natural, satellite or both")
        ->check(CLI::IsMember({"natural", "satellite", "both"}));
    c->add_option("--samples", *samples, "samples per domain");
    c->callback([this, domain, samples] {
      action_ = [this, domain, samples] {
        record({{"domain", *domain}});
        auto& cfg = ctx_.cfg;
        if (*samples) cfg.natural.samples = cfg.satellite.samples = **samples;
        nlohmann::json written = nlohmann::json::object();
        for (const auto& [name, dc] :
             {std::pair{"natural", cfg.natural}, std::pair{"satellite", cfg.satellite}}) {
          if (*domain != "both" && *domain != name) continue;
          const MultiModalDataset ds = generate(dc);
          save_dataset(ds, ctx_.data_dir(name).string());
          written[name] = {{"dir", ctx_.data_dir(name).string()},
                           {"samples", ds.size()},
                           {"splits", {ds.splits.train.size(), ds.splits.val.size(),
                                       ds.splits.test.size()}}};
        }
        write_report(ctx_, "gen-data", {{"datasets", written}});
      };
    });
  }

  void add_pretrain() {
    auto* c = app_.add_subcommand("pretrain", "contrastive image-text pretraining");
    auto data = std::make_shared<std::string>();
    c->add_option("--data", *data, "natural-domain dataset dir");
    c->callback([this, data] {
      action_ = [this, data] {
        record({{"data", *data}});
        const MultiModalDataset nat = load_data(ctx_, *data, "natural");
        auto& cfg = ctx_.cfg;
        override_train(cfg.pretrain);
        cfg.text.channels = nat.tokenizer.vocab_size();
        TrainLog log;
        auto [img, txt] = pretrain_contrastive(cfg.image, cfg.text, nat, cfg.pretrain, &log);
        save_checkpoint(img, ctx_.checkpoint("image_zeroshot"));
        save_checkpoint(txt, ctx_.checkpoint("text_zeroshot"));
        write_plot(ctx_, "pretrain_loss.svg", loss_plot({{"pretrain", &log}}, "pretraining loss"));
        write_report(ctx_, "pretrain",
                     {{"initial_loss", log.steps.empty() ? 0.0 : log.steps.front().loss},
                      {"final_epoch_loss", log.final_epoch_loss()},
                      {"log", log.to_json()}});
      };
    });
  }

  void add_build_head() {
    auto* c = app_.add_subcommand("build-head", "frozen zero-shot head from prompt templates");
    auto text = std::make_shared<std::string>();
    auto prompts = std::make_shared<std::string>();
    auto domain = std::make_shared<std::string>("satellite");
    auto scale = std::make_shared<double>(kDefaultLogitScale);
    c->add_option("--text", *text, "text encoder checkpoint");
    c->add_option("--prompts", *prompts, "prompt JSON {classes, templates}");
    c->add_option("--domain", *domain, "dataset whose prompts to use when --prompts is absent")
        ->check(CLI::IsMember({"natural", "satellite"}));
    c->add_option("--logit-scale", *scale, "positive logit scale");
    c->callback([this, text, prompts, domain, scale] {
      action_ = [this, text, prompts, domain, scale] {
        record({{"text", *text}, {"prompts", *prompts}, {"domain", *domain},
                {"logit_scale", *scale}});
        const Checkpoint txt = load_stage(ctx_, *text, "text_zeroshot", "pretrain");
        PromptSet ps;
        if (!prompts->empty()) {
          ps = PromptSet::load(ctx_.resolve(*prompts).string());
        } else {
          ps = load_data(ctx_, "", *domain).prompts();
        }
        const ClassificationHead head = build_head(txt, ps, *scale);
        save_checkpoint(head.to_checkpoint(), ctx_.checkpoint("head_" + *domain));
        write_report(ctx_, "build-head",
                     {{"classes", ps.classnames}, {"templates", ps.templates},
                      {"dim", head.dim()}, {"logit_scale", head.logit_scale()}});
      };
    });
  }

  void add_finetune() {
    auto* c = app_.add_subcommand("finetune", "fine-tune the image encoder against a frozen head");
    auto image = std::make_shared<std::string>();
    auto head = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto augment = std::make_shared<bool>(false);
    c->add_option("--image", *image, "zero-shot image checkpoint");
    c->add_option("--head", *head, "head checkpoint");
    c->add_option("--data", *data, "patching-task dataset dir");
    c->add_flag("--augment", *augment, "color jitter / grayscale / blur augmentation");
    c->callback([this, image, head, data, augment] {
      action_ = [this, image, head, data, augment] {
        record({{"image", *image}, {"head", *head}, {"data", *data}, {"augment", *augment}});
        const Checkpoint zs = load_stage(ctx_, *image, "image_zeroshot", "pretrain");
        const ClassificationHead h =
            ClassificationHead::from_checkpoint(load_stage(ctx_, *head, "head_satellite", "build-head"));
        const MultiModalDataset sat = load_data(ctx_, *data, "satellite");
        auto& cfg = ctx_.cfg;
        override_train(cfg.finetune);
        if (*augment) cfg.finetune.augment = true;
        TaskSpec task{"satellite", TaskRole::Patching, &sat, &h, "val"};
        TrainLog log;
        const Checkpoint ft = finetune_frozen_head(zs, h, task, cfg.finetune, &log);
        save_checkpoint(ft, ctx_.checkpoint("image_finetuned"));
        write_plot(ctx_, "finetune_loss.svg", loss_plot({{"finetune", &log}}, "fine-tuning loss"));
        write_report(ctx_, "finetune",
                     {{"val_metric_before", evaluate_image_task(zs, task)},
                      {"val_metric_after", evaluate_image_task(ft, task)},
                      {"metric", to_string(task.metric())},
                      {"log", log.to_json()}});
      };
    });
  }

  void add_patch() {
    auto* c = app_.add_subcommand("patch", "interpolate zero-shot and fine-tuned weights");
    auto zs = std::make_shared<std::string>();
    auto ft = std::make_shared<std::string>();
    auto alpha = std::make_shared<double>(0.5);
    c->add_option("--zeroshot", *zs, "zero-shot image checkpoint");
    c->add_option("--finetuned", *ft, "fine-tuned image checkpoint");
    c->add_option("--alpha", *alpha, "mixing coefficient in [0, 1]")->required();
    c->callback([this, zs, ft, alpha] {
      action_ = [this, zs, ft, alpha] {
        record({{"zeroshot", *zs}, {"finetuned", *ft}, {"alpha", *alpha}});
        const Checkpoint a = load_stage(ctx_, *zs, "image_zeroshot", "pretrain");
        const Checkpoint b = load_stage(ctx_, *ft, "image_finetuned", "finetune");
        require_stage(b, stage::kFinetuned, "fine-tuned checkpoint", "run `finetune` first");
        const Checkpoint p = interpolate(a, b, *alpha);
        save_checkpoint(p, ctx_.checkpoint("image_patched"));
        write_report(ctx_, "patch", {{"alpha", *alpha},
                                     {"output", ctx_.checkpoint("image_patched").string()}});
      };
    });
  }

  void add_sweep() {
    auto* c = app_.add_subcommand("sweep", "evaluate the alpha grid and choose alpha");
    auto zs = std::make_shared<std::string>();
    auto ft = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("val");
    auto delta = std::make_shared<std::optional<double>>();
    auto alphas = std::make_shared<std::vector<double>>();
    c->add_option("--zeroshot", *zs, "zero-shot image checkpoint");
    c->add_option("--finetuned", *ft, "fine-tuned image checkpoint");
    c->add_option("--split", *split, "evaluation split")->check(CLI::IsMember({"val", "test"}));
    c->add_option("--delta", *delta, "allowed relative drop of the supported metric");
    c->add_option("--alphas", *alphas, "alpha grid (must contain 0 and 1)")->delimiter(',');
    c->callback([this, zs, ft, split, delta, alphas] {
      action_ = [this, zs, ft, split, delta, alphas] {
        auto& cfg = ctx_.cfg;
        if (!alphas->empty()) cfg.alphas = *alphas;
        if (*delta) cfg.delta = **delta;
        record({{"split", *split}, {"alphas", cfg.alphas}, {"delta", cfg.delta}});
        const Checkpoint a = load_stage(ctx_, *zs, "image_zeroshot", "pretrain");
        const Checkpoint b = load_stage(ctx_, *ft, "image_finetuned", "finetune");
        const MultiModalDataset nat = load_data(ctx_, "", "natural");
        const MultiModalDataset sat = load_data(ctx_, "", "satellite");
        const auto nh = ClassificationHead::from_checkpoint(
            load_stage(ctx_, "", "head_natural", "build-head --domain natural"));
        const auto sh = ClassificationHead::from_checkpoint(
            load_stage(ctx_, "", "head_satellite", "build-head --domain satellite"));
        TaskSpec sup{"natural", TaskRole::Supported, &nat, &nh, *split};
        TaskSpec pat{"satellite", TaskRole::Patching, &sat, &sh, *split};
        const SweepResult s = sweep_alpha(a, b, cfg.alphas, sup, pat, cfg.delta);
        write_plot(ctx_, "sweep.svg", sweep_plot(s, "alpha sweep (" + *split + ")"));
        write_report(ctx_, "sweep", {{"supported", sup.to_json()},
                                     {"patching", pat.to_json()},
                                     {"sweep", s.to_json()}});
        if (s.fallback) std::cerr << "warning: no alpha met the supported-task constraint\n";
      };
    });
  }

  void add_align() {
    auto* c = app_.add_subcommand("align", "align a multi-spectral student to the patched teacher");
    auto teacher = std::make_shared<std::string>();
    auto head = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto warm = std::make_shared<std::string>();
    auto bands = std::make_shared<std::string>();
    auto lambda = std::make_shared<std::optional<double>>();
    auto mse_weight = std::make_shared<double>(1.0);
    auto allow = std::make_shared<bool>(false);
    c->add_option("--teacher", *teacher, "teacher image checkpoint (stage 'patched')");
    c->add_option("--head", *head, "head checkpoint");
    c->add_option("--data", *data, "paired multi-spectral dataset dir");
    c->add_option("--student-init", *warm, "warm-start student checkpoint");
    c->add_option("--bands", *bands, "comma-separated band subset (default: all)");
    c->add_option("--lambda", *lambda, "weight of the classification term");
    c->add_option("--mse-weight", *mse_weight, "weight of the embedding term (0 = CE only)");
    c->add_flag("--allow-unpatched", *allow, "accept a teacher that was not patched");
    c->callback([this, teacher, head, data, warm, bands, lambda, mse_weight, allow] {
      action_ = [this, teacher, head, data, warm, bands, lambda, mse_weight, allow] {
        record({{"teacher", *teacher}, {"head", *head}, {"data", *data},
                {"student_init", *warm}, {"bands", *bands}, {"mse_weight", *mse_weight},
                {"allow_unpatched", *allow}});
        auto& cfg = ctx_.cfg;
        override_train(cfg.align);
        if (*lambda) cfg.align.lambda = **lambda;
        cfg.align.validate();
        const Checkpoint t = load_stage(ctx_, *teacher, "image_patched", "patch");
        if (!*allow) {
          require_stage(t, stage::kPatched, "teacher",
                        "run `patch` first or pass --allow-unpatched");
        }
        const ClassificationHead h =
            ClassificationHead::from_checkpoint(load_stage(ctx_, *head, "head_satellite", "build-head"));
        const MultiModalDataset sat = load_data(ctx_, *data, "satellite");
        AlignOptions opt;
        opt.mse_weight = *mse_weight;
        opt.bands = parse_list(*bands);
        Checkpoint init;
        if (!warm->empty()) {
          init = load(ctx_.resolve(*warm).string());
        } else {
          EncoderConfig scfg = cfg.student;
          scfg.channels = student_channels(sat, opt);
          init = init_student(scfg, h.dim());
        }
        const double before = evaluate_student(init, h, sat, opt, "test");
        TrainLog log;
        const Checkpoint student = align(t, init, h, sat, cfg.align, opt, &log);
        save_checkpoint(student, ctx_.checkpoint("student_aligned"));
        write_plot(ctx_, "align_loss.svg", loss_plot({{"align", &log}}, "alignment loss"));
        write_report(ctx_, "align", {{"teacher_stage", t.meta_or("stage", "")},
                                     {"lambda", cfg.align.lambda},
                                     {"zeroshot_before", before},
                                     {"zeroshot_after", evaluate_student(student, h, sat, opt, "test")},
                                     {"log", log.to_json()}});
      };
    });
  }

  void add_eval_zeroshot() {
    auto* c = app_.add_subcommand("eval-zeroshot", "zero-shot metric of an encoder on a split");
    auto enc = std::make_shared<std::string>("checkpoints/image_patched.mpc");
    auto head = std::make_shared<std::string>();
    auto domain = std::make_shared<std::string>("satellite");
    auto split = std::make_shared<std::string>("test");
    c->add_option("--encoder", *enc, "image or student checkpoint");
    c->add_option("--head", *head, "head checkpoint (default: head of --domain)");
    c->add_option("--domain", *domain)->check(CLI::IsMember({"natural", "satellite"}));
    c->add_option("--split", *split)->check(CLI::IsMember({"train", "val", "test"}));
    c->callback([this, enc, head, domain, split] {
      action_ = [this, enc, head, domain, split] {
        record({{"encoder", *enc}, {"head", *head}, {"domain", *domain}, {"split", *split}});
        const Checkpoint ck = load(ctx_.resolve(*enc).string());
        const auto h = ClassificationHead::from_checkpoint(
            load_stage(ctx_, *head, "head_" + *domain, "build-head"));
        const MultiModalDataset ds = load_data(ctx_, "", *domain);
        const auto& rows = ds.splits.get(*split);
        const Tensor emb = encode_split(ck, ds, rows, h.dim());
        const Tensor logits = classify(emb, h);
        const Tensor labels = gather_rows(ds.labels, rows);
        MetricsReport m;
        m.task = *domain + "/" + *split;
        m.metric = to_string(metric_for(ds));
        m.value = task_metric(logits, labels, ds.multilabel());
        if (ds.multilabel()) m.per_class = per_class_ap(logits, labels);
        m.config = ctx_.cfg.to_json();
        std::vector<double> pc = m.per_class;
        write_report(ctx_, "eval-zeroshot", {{"metrics", m.to_json()}});
        if (!pc.empty()) {
          svg::Series s{"AP", {}, {}};
          for (std::size_t i = 0; i < pc.size(); ++i) {
            s.x.push_back(static_cast<double>(i));
            s.y.push_back(std::isnan(pc[i]) ? 0.0 : pc[i]);
          }
          write_plot(ctx_, "zeroshot_per_class.svg",
                     svg::line_plot({s}, {"per-class AP", "class index", "AP"}));
        }
      };
    });
  }

  void add_eval_retrieval() {
    auto* c = app_.add_subcommand("eval-retrieval", "RGB <-> MS Recall@K on a split");
    auto teacher = std::make_shared<std::string>("checkpoints/image_patched.mpc");
    auto student = std::make_shared<std::string>("checkpoints/student_aligned.mpc");
    auto split = std::make_shared<std::string>("test");
    auto ks = std::make_shared<std::string>();
    c->add_option("--teacher", *teacher, "RGB image checkpoint");
    c->add_option("--student", *student, "multi-spectral student checkpoint");
    c->add_option("--split", *split)->check(CLI::IsMember({"train", "val", "test"}));
    c->add_option("--ks", *ks, "comma-separated K values");
    c->callback([this, teacher, student, split, ks] {
      action_ = [this, teacher, student, split, ks] {
        record({{"teacher", *teacher}, {"student", *student}, {"split", *split}, {"ks", *ks}});
        const Checkpoint t = load(ctx_.resolve(*teacher).string());
        const Checkpoint s = load(ctx_.resolve(*student).string());
        const MultiModalDataset ds = load_data(ctx_, "", "satellite");
        const auto& rows = ds.splits.get(*split);
        const std::size_t dim = config_of(t).embed_dim;
        const auto kv = ks->empty() ? ctx_.cfg.recall_ks : parse_list(*ks);
        const RetrievalTable table = paired_retrieval(
            encode_image(t, gather_rows(ds.rgb, rows)), encode_split(s, ds, rows, dim), kv);
        svg::Series f{"rgb->ms", {}, {}}, b{"ms->rgb", {}, {}};
        for (const auto& [k, v] : table.forward) f.x.push_back(double(k)), f.y.push_back(v);
        for (const auto& [k, v] : table.backward) b.x.push_back(double(k)), b.y.push_back(v);
        write_plot(ctx_, "retrieval.svg", svg::line_plot({f, b}, {"Recall@K", "K", "recall"}));
        write_report(ctx_, "eval-retrieval",
                     {{"gallery_size", rows.size()}, {"retrieval", table.to_json("rgb", "ms")}});
      };
    });
  }

  void add_eval_probe() {
    auto* c = app_.add_subcommand("eval-probe", "linear probe on frozen embeddings");
    auto enc = std::make_shared<std::string>("checkpoints/student_aligned.mpc");
    auto domain = std::make_shared<std::string>("satellite");
    c->add_option("--encoder", *enc, "image or student checkpoint");
    c->add_option("--domain", *domain)->check(CLI::IsMember({"natural", "satellite"}));
    c->callback([this, enc, domain] {
      action_ = [this, enc, domain] {
        record({{"encoder", *enc}, {"domain", *domain}});
        auto& cfg = ctx_.cfg;
        override_train(cfg.probe);
        const Checkpoint ck = load(ctx_.resolve(*enc).string());
        const MultiModalDataset ds = load_data(ctx_, "", *domain);
        const auto proj = ProjectionHead::from(ck);
        const std::size_t dim = proj ? proj->out_dim() : config_of(ck).embed_dim;
        const auto& tr = ds.splits.train;
        const auto& te = ds.splits.test;
        const double v = linear_probe_metric(
            encode_split(ck, ds, tr, dim), gather_rows(ds.labels, tr),
            encode_split(ck, ds, te, dim), gather_rows(ds.labels, te), ds.multilabel(),
            cfg.probe);
        MetricsReport m{*domain + "/test", to_string(metric_for(ds)), v};
        m.config = cfg.to_json();
        write_report(ctx_, "eval-probe", {{"metrics", m.to_json()}});
      };
    });
  }

  void add_eval_simstats() {
    auto* c = app_.add_subcommand("eval-simstats",
                                  "cosine similarity between two image encoders' embeddings");
    auto a = std::make_shared<std::string>("checkpoints/image_zeroshot.mpc");
    auto b = std::make_shared<std::string>("checkpoints/image_patched.mpc");
    auto split = std::make_shared<std::string>("test");
    c->add_option("--a", *a, "first image checkpoint");
    c->add_option("--b", *b, "second image checkpoint");
    c->add_option("--split", *split)->check(CLI::IsMember({"train", "val", "test"}));
    c->callback([this, a, b, split] {
      action_ = [this, a, b, split] {
        record({{"a", *a}, {"b", *b}, {"split", *split}});
        const Checkpoint ca = load(ctx_.resolve(*a).string());
        const Checkpoint cb = load(ctx_.resolve(*b).string());
        const MultiModalDataset nat = load_data(ctx_, "", "natural");
        const MultiModalDataset sat = load_data(ctx_, "", "satellite");
        const CosineStats sup = drift_between(ca, cb, nat, *split);
        const CosineStats pat = drift_between(ca, cb, sat, *split);
        write_plot(ctx_, "simstats.svg", drift_plot(sup, pat));
        write_report(ctx_, "eval-simstats",
                     {{"supported", sup.to_json()}, {"patching", pat.to_json()}});
      };
    });
  }

  void add_pipeline() {
    auto* c = app_.add_subcommand("pipeline", "run every stage end to end");
    auto no_ablations = std::make_shared<bool>(false);
    c->add_flag("--no-ablations", *no_ablations, "skip the alignment ablation variants");
    c->callback([this, no_ablations] {
      action_ = [this, no_ablations] {
        record({{"no_ablations", *no_ablations}});
        auto& cfg = ctx_.cfg;
        if (*no_ablations) cfg.ablations = false;
        const PipelineData data = generate_data(cfg);
        const ExperimentResult r = run_experiment(cfg, data);
        write_experiment(r, data, ctx_.out_dir());
        write_report(ctx_, "pipeline", {{"metrics", r.metrics_json()}});
      };
    });
  }

  CLI::App app_;
  Context ctx_;
  std::optional<std::uint64_t> seed_;
  std::optional<std::size_t> epochs_, batch_;
  std::optional<double> lr_;
  std::function<void()> action_;
};

inline int run_cli(int argc, const char* const* argv) {
  App app;
  return app.run(argc, argv);
}

}  // namespace mpatch::cli

// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grad_cases.hpp"
#include "mpatch/cli.hpp"
#include "mpatch/pipeline.hpp"

using namespace mpatch;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

bool within_ulp(float got, double ref) {
  const float r = static_cast<float>(ref);
  return std::abs(got - r) <= std::nextafter(std::abs(r), INFINITY) - std::abs(r);
}

Checkpoint random_checkpoint(std::uint64_t layout_seed, std::uint64_t value_seed) {
  CounterRng rng(layout_seed);
  Checkpoint ck;
  const std::size_t count = 1 + rng.below(4);
  for (std::size_t i = 0; i < count; ++i) {
    const Shape shape{1 + rng.below(5), 1 + rng.below(6)};
    ck.add("t" + std::to_string(i), gradcases::random_tensor(shape, value_seed * 31 + i));
  }
  return ck;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- 1 ----------------------------------------------------------------------

Verdict interpolation_identities() {
  Verdict v;
  std::size_t bad = 0;
  CounterRng rng(91);
  std::vector<std::pair<Checkpoint, Checkpoint>> pairs;
  for (std::uint64_t i = 0; i < 100; ++i) {
    pairs.emplace_back(random_checkpoint(i, 2 * i + 500), random_checkpoint(i, 2 * i + 501));
  }
  pairs.emplace_back(init_encoder(EncoderConfig::image_default(1)),
                     init_encoder(EncoderConfig::image_default(2)));
  for (const auto& [a, b] : pairs) {
    if (!tensors_bit_equal(interpolate(a, b, 0.0), a) ||
        !tensors_bit_equal(interpolate(a, b, 1.0), b)) {
      ++bad;
      continue;
    }
    const double alpha = rng.uniform_f32();
    const Checkpoint p = interpolate(a, b, alpha);
    const Checkpoint q = interpolate(b, a, 1.0 - alpha);
    for (const auto& [name, t] : p.entries()) {
      const Tensor& x = a.tensor(name);
      const Tensor& y = b.tensor(name);
      const Tensor& s = q.tensor(name);
      for (std::size_t k = 0; k < t.size(); ++k) {
        if (!within_ulp(t[k], (1.0 - alpha) * x[k] + alpha * double(y[k])) ||
            !within_ulp(s[k], t[k])) {
          ++bad;
        }
      }
    }
  }
  v.pass = bad == 0;
  v.detail = std::to_string(pairs.size()) + " pairs, " + std::to_string(bad) + " violations";
  return v;
}

// ---- 2 ----------------------------------------------------------------------

Verdict gradients() {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto cases = gradcases::primitive_cases(s);
    for (auto& c : gradcases::composed_cases(s)) cases.push_back(std::move(c));
    for (const auto& c : cases) {
      const double e = gradcases::max_error(c, 1e-3);
      ++checked;
      if (e > worst) {
        worst = e;
        where = c.name + " seed " + std::to_string(s);
      }
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu checks over 20 seeds, max rel err %.2e (%s)", checked,
                worst, where.c_str());
  return {worst < 1e-3, buf};
}

// ---- 3 ----------------------------------------------------------------------

Verdict frozen_parameters() {
  DataConfig nc = DataConfig::natural_default(21);
  nc.samples = 320;
  DataConfig sc = DataConfig::satellite_default(22);
  sc.samples = 320;
  const MultiModalDataset nat = generate(nc), sat = generate(sc);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.warmup_steps = 2;
  tc.seed = 23;
  const auto [image, text] = pretrain_contrastive(
      EncoderConfig::image_default(24), EncoderConfig::text_default(nat.tokenizer.vocab_size(), 25),
      nat, tc);
  const ClassificationHead head = build_head(text, sat.prompts());
  const std::string head0 = serialize(head.to_checkpoint());
  const std::string text0 = serialize(text);
  const std::string image0 = serialize(image);

  const TaskSpec task{"satellite", TaskRole::Patching, &sat, &head, "val"};
  const Checkpoint ft = finetune_frozen_head(image, head, task, tc);
  const Checkpoint patched = interpolate(image, ft, 0.5);
  const std::string patched0 = serialize(patched);
  EncoderConfig scfg = EncoderConfig::modality_default(sat.ms.dim(1), 26);
  TrainConfig ac = tc;
  ac.lambda = 0.05;
  align(patched, init_student(scfg, head.dim()), head, sat, ac);

  auto differing = [](const std::string& a, const std::string& b) {
    std::size_t n = a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) n += a[i] != b[i];
    return n;
  };
  const std::size_t diff = differing(head0, serialize(head.to_checkpoint())) +
                           differing(text0, serialize(text)) +
                           differing(image0, serialize(image)) +
                           differing(patched0, serialize(patched));
  const bool trained = !tensors_bit_equal(ft, image);
  return {diff == 0 && trained,
          std::to_string(diff) + " differing bytes across head, text, zero-shot image and "
                                 "teacher; fine-tuned weights " +
              (trained ? "moved" : "did not move")};
}

// ---- 4 ----------------------------------------------------------------------

// AP by definition: for every positive, precision over the items scored at
// least as high as it, averaged over positives visited highest first.

double oracle_ap(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i]) pos.push_back(i);
  }
  if (pos.empty()) return std::nan("");
  std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  double sum = 0;
  for (std::size_t i : pos) {
    std::size_t above = 0, pos_above = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= s[i]) {
        ++above;
        pos_above += y[j];
      }
    }
    sum += double(pos_above) / double(above);
  }
  return sum / double(pos.size());
}

Verdict metric_oracles() {
  std::size_t map_bad = 0, recall_bad = 0;
  CounterRng rng(4040);
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = 1 + rng.below(10), c = 1 + rng.below(4);
    Tensor s({n, c}), y({n, c});
    for (auto& v : s.vec()) v = rng.uniform_f32();
    for (auto& v : y.vec()) v = static_cast<float>(rng.below(2));
    y.at(rng.below(n), rng.below(c)) = 1.0f;
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t j = 0; j < c; ++j) {
      std::vector<double> col;
      std::vector<int> lab;
      for (std::size_t i = 0; i < n; ++i) {
        col.push_back(s.at(i, j));
        lab.push_back(y.at(i, j) > 0.5f);
      }
      const double ap = oracle_ap(col, lab);
      if (!std::isnan(ap)) sum += ap, ++used;
    }
    if (mean_average_precision(s, y) != sum / double(used)) ++map_bad;
  }
  for (std::uint64_t inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + rng.below(12);
    const Tensor rgb = gradcases::random_tensor({n, 6}, inst * 2 + 1);
    const Tensor ms = gradcases::random_tensor({n, 6}, inst * 2 + 2);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("s" + std::to_string(i));
    const EmbeddingSet a(rgb, ids), b(ms, ids);
    const auto pairing = identity_pairing(ids);
    std::vector<std::size_t> ks;
    for (std::size_t k = 1; k <= n; ++k) ks.push_back(k);
    const RetrievalTable table = paired_retrieval(rgb, ms, ks);
    double prev = 0.0;
    for (std::size_t k : ks) {
      const double r = recall_at_k(a, b, pairing, k);
      if (r < prev || r != table.forward.at(k)) ++recall_bad;
      if (recall_at_k(b, a, pairing, k) != table.backward.at(k)) ++recall_bad;
      prev = r;
    }
    if (recall_at_k(a, b, pairing, n) != 1.0 || table.backward.at(n) != 1.0) ++recall_bad;
  }
  return {map_bad == 0 && recall_bad == 0,
          "mAP mismatches " + std::to_string(map_bad) + "/200, recall violations " +
              std::to_string(recall_bad)};
}

// ---- 5-10 ---------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed;
  ExperimentResult r;
};

std::string fraction(std::size_t hits, std::size_t total) {
  return std::to_string(hits) + "/" + std::to_string(total) + " seeds";
}

template <class Pred>
std::size_t count_seeds(const std::vector<SeedRun>& runs, Pred pred) {
  std::size_t n = 0;
  for (const auto& run : runs) n += pred(run.r) ? 1 : 0;
  return n;
}

bool patch_beats_finetune(const ExperimentResult& r) {
  const double gain = r.finetuned.patching - r.zeroshot.patching;
  return r.finetuned.supported < r.zeroshot.supported &&
         r.patched.supported >= 0.95 * r.zeroshot.supported && gain > 0.0 &&
         r.patched.patching - r.zeroshot.patching >= 0.6 * gain;
}

bool curve_shape(const ExperimentResult& r) {
  const auto& rows = r.test_sweep.rows;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].patching < rows[i - 1].patching - 0.02) return false;
    if (rows[i].supported > rows[i - 1].supported + 0.02) return false;
  }
  return true;
}

bool alignment_gain(const ExperimentResult& r) {
  const auto& a = r.main_alignment();
  return a.post_metric - a.pre_metric >= 0.15 && a.post_metric > r.patched.patching;
}

bool loss_variants(const ExperimentResult& r) {
  const auto& main = r.main_alignment();
  return main.retrieval.mean_at(10) >= r.alignments.at("ce_only").retrieval.mean_at(10) &&
         main.post_metric >= r.alignments.at("mse_only").post_metric;
}

bool teacher_variants(const ExperimentResult& r) {
  return r.main_alignment().combined() >= r.alignments.at("unpatched_teacher").combined();
}

bool drift(const ExperimentResult& r) {
  return r.drift_supported.mean - r.drift_patching.mean >= 0.1;
}

bool band_use(const ExperimentResult& r) {
  return r.main_alignment().post_metric - r.alignments.at("rgb_bands").post_metric >= 0.05;
}

nlohmann::json seed_summary(const SeedRun& run) {
  const auto& r = run.r;
  nlohmann::json al;
  for (const auto& [name, a] : r.alignments) {
    al[name] = {{"zeroshot_before", a.pre_metric},
                {"zeroshot_after", a.post_metric},
                {"mean_R@10", a.retrieval.mean_at(10)},
                {"combined", a.combined()}};
  }
  return {{"seed", run.seed},
          {"chosen_alpha", r.chosen_alpha},
          {"supported", {r.zeroshot.supported, r.finetuned.supported, r.patched.supported}},
          {"patching", {r.zeroshot.patching, r.finetuned.patching, r.patched.patching}},
          {"drift", {r.drift_supported.mean, r.drift_patching.mean}},
          {"alignment", al}};
}

// ---- 11 ---------------------------------------------------------------------

const char* kDeterminismProfile = R"({
  "data": {"natural": {"samples": 256}, "satellite": {"samples": 256}},
  "train": {"pretrain": {"epochs": 2, "batch_size": 32},
            "finetune": {"epochs": 1, "batch_size": 32},
            "align": {"epochs": 2, "batch_size": 32},
            "probe": {"epochs": 3}}
})";

Verdict determinism(const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string config = (work / "config.json").string();
  std::ofstream(config) << kDeterminismProfile;
  std::vector<fs::path> outs{work / "a", work / "b"};
  for (const auto& out : outs) {
    const std::string o = out.string();
    const char* argv[] = {"mpatch", "--config", config.c_str(), "--out", o.c_str(),
                          "pipeline", "--seed", "7"};
    const int code = cli::run_cli(8, argv);
    if (code != 0) return {false, "pipeline exited with " + std::to_string(code)};
  }
  std::size_t compared = 0, differing = 0;
  auto compare = [&](const fs::path& rel) {
    ++compared;
    if (!fs::exists(outs[1] / rel) || bytes_of(outs[0] / rel) != bytes_of(outs[1] / rel)) {
      ++differing;
    }
  };
  compare("metrics.json");
  for (const auto& e : fs::directory_iterator(outs[0] / "checkpoints")) {
    compare(fs::path("checkpoints") / e.path().filename());
  }
  fs::remove_all(work);
  return {differing == 0 && compared > 1, std::to_string(compared) + " files compared, " +
                                              std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  std::string seeds_arg = "1,2,3,4,5";
  std::size_t samples = 2048;
  std::string report;
  std::string work = (fs::temp_directory_path() / "mpatch_acceptance").string();
  std::string only;
  CLI::App app{"acceptance criteria"};
  app.add_option("--seeds", seeds_arg, "comma-separated seed set");
  app.add_option("--samples", samples, "samples per domain for the seeded runs");
  app.add_option("--report", report, "write per-seed numbers to this JSON file");
  app.add_option("--work", work, "scratch directory for the determinism run");
  app.add_option("--only", only, "comma-separated criterion ids to run; the rest are skipped");
  CLI11_PARSE(app, argc, argv);

  std::vector<std::uint64_t> seeds;
  for (std::size_t s : cli::parse_list(seeds_arg)) seeds.push_back(s);
  std::set<std::size_t> selected;
  for (std::size_t id = 1; id <= 11; ++id) selected.insert(id);
  if (!only.empty()) {
    const auto ids = cli::parse_list(only);
    selected = {ids.begin(), ids.end()};
  }
  auto wanted = [&](int id) { return selected.count(static_cast<std::size_t>(id)) > 0; };

  int failures = 0, skipped = 0;
  auto emit = [&](int id, const std::string& name, const Verdict& v) {
    std::printf("%s  %2d  %-28s %s\n", v.pass ? "PASS" : "FAIL", id, name.c_str(),
                v.detail.c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
  };
  auto skip = [&](int id, const std::string& name) {
    std::printf("SKIP  %2d  %s\n", id, name.c_str());
    ++skipped;
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Verdict()>& f) {
    if (!wanted(id)) return skip(id, name);
    try {
      emit(id, name, f());
    } catch (const std::exception& e) {
      emit(id, name, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "interpolation-identities", interpolation_identities);
  guarded(2, "gradient-correctness", gradients);
  guarded(3, "frozen-parameters", frozen_parameters);
  guarded(4, "metric-oracles", metric_oracles);

  std::vector<SeedRun> runs;
  std::string run_error;
  bool any_seeded = false;
  for (int id = 5; id <= 10; ++id) any_seeded = any_seeded || wanted(id);
  if (any_seeded && seeds.empty()) run_error = "empty seed set";
  try {
    for (std::uint64_t seed : any_seeded ? seeds : std::vector<std::uint64_t>{}) {
      ExperimentConfig cfg;
      cfg.seed = seed;
      cfg.natural.samples = cfg.satellite.samples = samples;
      const auto t0 = std::chrono::steady_clock::now();
      runs.push_back({seed, run_experiment(cfg)});
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "seed %llu done in %.0fs\n", static_cast<unsigned long long>(seed),
                   secs);
    }
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  const std::size_t n = seeds.size();
  auto seeded = [&](int id, const std::string& name, const std::function<Verdict()>& f) {
    if (!wanted(id)) return skip(id, name);
    if (!run_error.empty()) return emit(id, name, {false, "seeded run failed: " + run_error});
    emit(id, name, f());
  };
  seeded(5, "patch-vs-finetune", [&] {
    const auto hits = count_seeds(runs, patch_beats_finetune);
    return Verdict{hits * 5 >= 4 * n, fraction(hits, n) + " (need 4/5)"};
  });
  seeded(6, "trade-off-curve", [&] {
    const auto hits = count_seeds(runs, curve_shape);
    return Verdict{hits == n, fraction(hits, n) + " (need all)"};
  });
  seeded(7, "alignment-gain", [&] {
    const auto hits = count_seeds(runs, alignment_gain);
    return Verdict{hits * 5 >= 3 * n, fraction(hits, n) + " (need 3/5)"};
  });
  seeded(8, "loss-and-teacher-variants", [&] {
    const auto loss = count_seeds(runs, loss_variants);
    const auto teacher = count_seeds(runs, teacher_variants);
    return Verdict{loss == n && teacher * 5 >= 4 * n,
                   "loss terms " + fraction(loss, n) + " (need all), patched teacher " +
                       fraction(teacher, n) + " (need 4/5)"};
  });
  seeded(9, "embedding-drift", [&] {
    const auto hits = count_seeds(runs, drift);
    return Verdict{hits == n, fraction(hits, n) + " (need all)"};
  });
  seeded(10, "band-utilization", [&] {
    const auto hits = count_seeds(runs, band_use);
    return Verdict{hits * 5 >= 4 * n, fraction(hits, n) + " (need 4/5)"};
  });
  guarded(11, "determinism", [&] { return determinism(work); });

  if (!report.empty()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& run : runs) j.push_back(seed_summary(run));
    write_json(report, {{"build", build_id()}, {"samples", samples}, {"seeds", j}});
  }
  std::printf("%s: %d of %d criteria failed\n", failures ? "FAIL" : "PASS", failures,
              11 - skipped);
  return failures ? 1 : 0;
}

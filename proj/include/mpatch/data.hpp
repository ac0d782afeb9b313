#pragma once

// Deterministic synthetic two-domain benchmark.
//
// Every class owns a latent prototype raster: per band, a spectral base level
// plus a smooth random field (a few low-frequency cosines). A sample tiles
// its image with blocks, each block copying the prototype of one of the
// sample's labels, scales it by a per-sample illumination gain and adds
// Gaussian noise. The "natural" and "satellite" domains draw prototypes from
// disjoint streams and different spectral statistics. In the satellite
// domain the second half of the classes share most of their visible-band
// appearance with a partner class and differ mainly in the other bands, so
// all-band inputs carry class signal that an RGB composite does not.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpatch/checkpoint.hpp"
#include "mpatch/rng.hpp"
#include "mpatch/tensor.hpp"
#include "mpatch/tokenizer.hpp"
#include "mpatch/zeroshot.hpp"

namespace mpatch {

enum class Domain { Natural, Satellite };

inline const char* to_string(Domain d) {
  return d == Domain::Natural ? "natural" : "satellite";
}
inline Domain domain_from(const std::string& s) {
  if (s == "natural") return Domain::Natural;
  if (s == "satellite") return Domain::Satellite;
  throw Error(ErrorKind::InvalidArgument, "unknown domain '" + s + "'");
}

struct CompositeSpec {
  std::size_t r = 3, g = 2, b = 1;
  double gain = 2.0;
  double lo = 0.0, hi = 1.0;

  void validate(std::size_t bands) const {
    if (r >= bands || g >= bands || b >= bands) {
      throw Error(ErrorKind::InvalidArgument,
                  "composite band index out of range for " + std::to_string(bands) +
                      " bands");
    }
    if (r == g || g == b || r == b) {
      throw Error(ErrorKind::InvalidArgument, "composite bands must be distinct");
    }
    if (!(lo < hi)) {
      throw Error(ErrorKind::InvalidArgument, "composite clamp needs lo < hi");
    }
  }

  nlohmann::json to_json() const {
    return {{"bands", {r, g, b}}, {"gain", gain}, {"lo", lo}, {"hi", hi}};
  }
  static CompositeSpec from_json(const nlohmann::json& j) {
    CompositeSpec s;
    const auto bands = j.at("bands").get<std::vector<std::size_t>>();
    if (bands.size() != 3) {
      throw Error(ErrorKind::InvalidArgument, "composite needs three bands");
    }
    s.r = bands[0];
    s.g = bands[1];
    s.b = bands[2];
    s.gain = j.at("gain").get<double>();
    s.lo = j.at("lo").get<double>();
    s.hi = j.at("hi").get<double>();
    return s;
  }
};

// out[k] = (clamp(gain * ms[band_k], lo, hi) - lo) / (hi - lo)
inline Tensor rgb_composite(const Tensor& ms, const CompositeSpec& spec) {
  if (ms.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch,
                "composite expects [C,H,W], got " + shape_str(ms.shape()));
  }
  spec.validate(ms.dim(0));
  const std::size_t plane = ms.dim(1) * ms.dim(2);
  Tensor out({3, ms.dim(1), ms.dim(2)});
  const std::size_t bands[3] = {spec.r, spec.g, spec.b};
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = std::clamp(spec.gain * ms[bands[k] * plane + i], spec.lo, spec.hi);
      out[k * plane + i] = static_cast<float>((v - spec.lo) / (spec.hi - spec.lo));
    }
  }
  return out;
}

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names = {
      "forest", "water",   "urban",  "farmland", "grassland", "wetland",
      "desert", "snow",    "orchard", "quarry",  "vineyard",  "beach"};
  return names;
}

// Canonical RGB appearance of each named class, shared by both domains so
// zero-shot transfer is weak but above chance. Extra classes get seeded
// colors from the prototype stream.
inline const std::vector<std::array<double, 3>>& class_palette() {
  static const std::vector<std::array<double, 3>> palette = {
      {0.13, 0.42, 0.15}, {0.10, 0.25, 0.60}, {0.50, 0.50, 0.52}, {0.70, 0.60, 0.25},
      {0.45, 0.70, 0.30}, {0.25, 0.40, 0.35}, {0.85, 0.70, 0.45}, {0.92, 0.93, 0.95},
      {0.35, 0.55, 0.20}, {0.65, 0.60, 0.55}, {0.45, 0.35, 0.25}, {0.90, 0.82, 0.60}};
  return palette;
}

inline std::vector<std::string> class_names(std::size_t count) {
  std::vector<std::string> out;
  const auto& base = default_class_names();
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(i < base.size() ? base[i] : "class" + std::to_string(i));
  }
  return out;
}

inline std::vector<std::string> natural_templates() {
  return {"a photo of a {}.", "a picture of the {}.", "an image of {}.",
          "a close-up photo of the {}.", "a bright photo of a {}."};
}

inline std::vector<std::string> satellite_templates() {
  return {"a satellite image of {}.", "an aerial view of {}.",
          "a satellite photo of the {}.", "land cover of {} seen from above."};
}

inline std::vector<std::string> templates_for(Domain d) {
  return d == Domain::Natural ? natural_templates() : satellite_templates();
}

// Tokenizer over every word the built-in prompts can produce.
inline TextTokenizer default_tokenizer(std::size_t classes) {
  std::vector<std::string> corpus = class_names(classes);
  for (const auto& t : natural_templates()) corpus.push_back(t);
  for (const auto& t : satellite_templates()) corpus.push_back(t);
  return TextTokenizer::from_corpus(corpus);
}

struct DataConfig {
  Domain domain = Domain::Satellite;
  std::size_t classes = 8;
  std::size_t samples = 4096;
  std::size_t bands = 8;
  std::size_t size = 16;
  std::size_t block = 4;
  bool multilabel = true;
  std::size_t max_labels = 3;
  double noise = 0.15;
  double rgb_confusion = 0.5;  // satellite only
  bool split_bands = true;     // plant class signal outside the RGB bands
  std::uint64_t seed = 0;
  double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;

  static DataConfig natural_default(std::uint64_t seed = 0) {
    DataConfig c;
    c.domain = Domain::Natural;
    c.multilabel = false;
    c.split_bands = false;
    c.seed = seed;
    return c;
  }
  static DataConfig satellite_default(std::uint64_t seed = 0) {
    DataConfig c;
    c.seed = seed;
    return c;
  }

  CompositeSpec composite() const {
    CompositeSpec s;
    if (domain == Domain::Natural) {
      s.r = 0;
      s.g = 1;
      s.b = 2;
      s.gain = 1.0;
    }
    return s;
  }

  // Expected positive rate of each class.
  double target_positive_rate() const {
    const double k = multilabel ? 0.5 * (1.0 + static_cast<double>(max_labels)) : 1.0;
    return k / static_cast<double>(classes);
  }

  void validate() const {
    if (classes < 2) throw Error(ErrorKind::InvalidArgument, "need at least 2 classes");
    if (samples < classes) {
      throw Error(ErrorKind::InvalidArgument, "need at least one sample per class");
    }
    if (bands < 3) throw Error(ErrorKind::InvalidArgument, "need at least 3 bands");
    if (!block || size % block) {
      throw Error(ErrorKind::InvalidArgument, "image size must be a multiple of block");
    }
    if (multilabel && (max_labels < 1 || max_labels > classes ||
                       max_labels > (size / block) * (size / block))) {
      throw Error(ErrorKind::InvalidArgument, "max_labels out of range");
    }
    if (noise < 0.0) throw Error(ErrorKind::InvalidArgument, "noise must be >= 0");
    composite().validate(bands);
  }

  nlohmann::json to_json() const {
    return {{"domain", to_string(domain)}, {"classes", classes},
            {"samples", samples},         {"bands", bands},
            {"size", size},               {"block", block},
            {"multilabel", multilabel},   {"max_labels", max_labels},
            {"noise", noise},             {"rgb_confusion", rgb_confusion},
            {"split_bands", split_bands}, {"seed", seed},
            {"ratios", {train_ratio, val_ratio, test_ratio}}};
  }
  static DataConfig from_json(const nlohmann::json& j) {
    DataConfig c;
    c.domain = domain_from(j.value("domain", std::string("satellite")));
    if (c.domain == Domain::Natural) c = natural_default();
    c.classes = j.value("classes", c.classes);
    c.samples = j.value("samples", c.samples);
    c.bands = j.value("bands", c.bands);
    c.size = j.value("size", c.size);
    c.block = j.value("block", c.block);
    c.multilabel = j.value("multilabel", c.multilabel);
    c.max_labels = j.value("max_labels", c.max_labels);
    c.noise = j.value("noise", c.noise);
    c.rgb_confusion = j.value("rgb_confusion", c.rgb_confusion);
    c.split_bands = j.value("split_bands", c.split_bands);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ratios")) {
      const auto r = j.at("ratios").get<std::vector<double>>();
      if (r.size() != 3) throw Error(ErrorKind::InvalidArgument, "ratios needs 3 values");
      c.train_ratio = r[0];
      c.val_ratio = r[1];
      c.test_ratio = r[2];
    }
    return c;
  }
};

struct Splits {
  std::vector<std::size_t> train, val, test;

  const std::vector<std::size_t>& get(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw Error(ErrorKind::InvalidArgument, "unknown split '" + name + "'");
  }
};

struct MultiModalDataset {
  DataConfig config;
  std::vector<std::string> classes;
  std::vector<std::string> templates;
  CompositeSpec composite;
  TextTokenizer tokenizer;
  std::vector<std::string> ids;
  std::vector<std::string> captions;
  Tensor ms;        // [N, C_ms, H, W]
  Tensor rgb;       // [N, 3, H, W]
  Tensor labels;    // [N, C], 0/1
  Tensor caption_tokens;  // [N, L]
  Splits splits;

  std::size_t size() const { return ids.size(); }
  Domain domain() const { return config.domain; }
  bool multilabel() const { return config.multilabel; }
  PromptSet prompts() const { return {classes, templates}; }

  // Class id of every row (single-label datasets).
  std::vector<std::size_t> class_ids(const std::vector<std::size_t>& rows) const {
    std::vector<std::size_t> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < labels.dim(1); ++c) {
        if (labels.at(r, c) > labels.at(r, best)) best = c;
      }
      out.push_back(best);
    }
    return out;
  }
};

namespace detail {

// Smooth field: sum of three low-frequency cosines with random phase.
inline void smooth_field(float* out, std::size_t size, double amplitude,
                         CounterRng rng) {
  std::fill(out, out + size * size, 0.0f);
  for (int k = 0; k < 3; ++k) {
    const double fx = static_cast<double>(rng.below(3));
    const double fy = static_cast<double>(rng.below(3));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double a = amplitude * rng.uniform(0.5, 1.0);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double arg = 2.0 * std::numbers::pi *
                               (fx * double(x) + fy * double(y)) / double(size) +
                           phase;
        out[y * size + x] += static_cast<float>(a * std::cos(arg));
      }
    }
  }
}

inline bool is_rgb_band(const CompositeSpec& s, std::size_t b) {
  return b == s.r || b == s.g || b == s.b;
}

}  // namespace detail

// [C, C_ms, H, W] class prototypes for a config.
inline Tensor class_prototypes(const DataConfig& cfg) {
  cfg.validate();
  const std::size_t nc = cfg.classes, nb = cfg.bands, s = cfg.size;
  const CompositeSpec comp = cfg.composite();
  const CounterRng root = CounterRng(cfg.seed).stream(
      std::string("prototypes/") + to_string(cfg.domain));
  Tensor protos({nc, nb, s, s});
  const std::size_t plane = s * s;
  const std::size_t visible[3] = {comp.r, comp.g, comp.b};
  for (std::size_t c = 0; c < nc; ++c) {
    CounterRng base_rng = root.stream("base", c);
    std::array<double, 3> color;
    if (c < class_palette().size()) {
      color = class_palette()[c];
    } else {
      for (double& v : color) v = base_rng.uniform(0.1, 0.9);
    }
    for (std::size_t b = 0; b < nb; ++b) {
      const auto vis = std::find(visible, visible + 3, b) - visible;
      double base, amp;
      if (cfg.domain == Domain::Natural) {
        base = vis < 3 ? color[vis] + base_rng.uniform(-0.05, 0.05)
                       : base_rng.uniform(0.2, 0.8);
        amp = 0.12;
      } else if (vis < 3) {
        // Haze compresses contrast; the composite gain restores the range.
        base = (0.2 + 0.6 * color[vis]) / comp.gain + base_rng.uniform(-0.03, 0.03);
        amp = 0.03;
      } else {
        base = base_rng.uniform(0.1, 0.7);
        amp = 0.1;
      }
      float* p = protos.data().data() + (c * nb + b) * plane;
      detail::smooth_field(p, s, amp, root.stream("field", c * nb + b));
      for (std::size_t i = 0; i < plane; ++i) p[i] += static_cast<float>(base);
    }
  }
  if (cfg.domain == Domain::Satellite && cfg.split_bands) {
    const double rho = cfg.rgb_confusion;
    const std::size_t half = nc / 2;
    for (std::size_t c = nc - half; c < nc; ++c) {
      const std::size_t partner = c - (nc - half);
      for (std::size_t b : {comp.r, comp.g, comp.b}) {
        float* p = protos.data().data() + (c * nb + b) * plane;
        const float* q = protos.data().data() + (partner * nb + b) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          p[i] = static_cast<float>(rho * q[i] + (1.0 - rho) * p[i]);
        }
      }
    }
  }
  return protos;
}

inline Splits make_splits(std::size_t n, double train, double val, double test,
                          std::uint64_t seed) {
  if (!(train > 0 && val > 0 && test > 0) ||
      std::abs(train + val + test - 1.0) > 1e-9) {
    throw Error(ErrorKind::InvalidArgument,
                "split ratios must be positive and sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng = CounterRng(seed).stream("split");
  shuffle(order, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train * double(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(val * double(n)));
  if (n_train < 1 || n_val < 1 || n_train + n_val >= n) {
    throw Error(ErrorKind::InvalidArgument,
                "split ratios leave a split with no samples for n=" + std::to_string(n));
  }
  Splits s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

inline void split(MultiModalDataset& ds, double train, double val, double test,
                  std::uint64_t seed) {
  ds.splits = make_splits(ds.size(), train, val, test, seed);
  ds.config.train_ratio = train;
  ds.config.val_ratio = val;
  ds.config.test_ratio = test;
}

inline MultiModalDataset generate(const DataConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.samples, nc = cfg.classes, nb = cfg.bands, s = cfg.size;
  const std::size_t plane = s * s, grid = s / cfg.block, nblocks = grid * grid;
  const Tensor protos = class_prototypes(cfg);

  MultiModalDataset ds;
  ds.config = cfg;
  ds.classes = class_names(nc);
  ds.templates = templates_for(cfg.domain);
  ds.composite = cfg.composite();
  ds.tokenizer = default_tokenizer(nc);
  ds.ms = Tensor({n, nb, s, s});
  ds.rgb = Tensor({n, 3, s, s});
  ds.labels = Tensor({n, nc});

  // Captions for the natural domain draw from every template, standing in
  // for a web-scale caption corpus; satellite captions use aerial templates.
  std::vector<std::string> caption_templates = ds.templates;
  if (cfg.domain == Domain::Natural) {
    for (const auto& t : satellite_templates()) caption_templates.push_back(t);
  }

  const CounterRng root =
      CounterRng(cfg.seed).stream(std::string("samples/") + to_string(cfg.domain));
  std::vector<std::size_t> classes(nc), blocks(nblocks), owner(nblocks);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng = root.stream(i);
    for (std::size_t c = 0; c < nc; ++c) classes[c] = c;
    std::size_t k = 1;
    if (cfg.multilabel) k = 1 + static_cast<std::size_t>(rng.below(cfg.max_labels));
    // Partial Fisher-Yates: the first k entries are the labels.
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(nc - j));
      std::swap(classes[j], classes[pick]);
    }
    for (std::size_t j = 0; j < k; ++j) ds.labels.at(i, classes[j]) = 1.0f;

    for (std::size_t b = 0; b < nblocks; ++b) blocks[b] = b;
    shuffle(blocks, rng);
    for (std::size_t b = 0; b < nblocks; ++b) {
      owner[blocks[b]] = b < k ? classes[b] : classes[rng.below(k)];
    }
    const double gain = rng.uniform(0.9, 1.1);
    float* out = ds.ms.data().data() + i * nb * plane;
    for (std::size_t band = 0; band < nb; ++band) {
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const std::size_t cls = owner[(y / cfg.block) * grid + x / cfg.block];
          const double v = gain * protos[((cls * nb + band) * s + y) * s + x] +
                           cfg.noise * rng.normal();
          out[band * plane + y * s + x] = static_cast<float>(v);
        }
      }
    }
    const Tensor one({nb, s, s},
                     std::vector<float>(out, out + nb * plane));
    const Tensor rgb = rgb_composite(one, ds.composite);
    std::copy(rgb.data().begin(), rgb.data().end(),
              ds.rgb.data().begin() + static_cast<std::ptrdiff_t>(i * 3 * plane));

    const std::string& tmpl = caption_templates[rng.below(caption_templates.size())];
    const std::string& cls = ds.classes[classes[rng.below(k)]];
    ds.captions.push_back(PromptSet::fill(tmpl, cls));
    char id[32];
    std::snprintf(id, sizeof id, "%s-%05zu", to_string(cfg.domain), i);
    ds.ids.emplace_back(id);
  }
  ds.caption_tokens = ds.tokenizer.encode_batch(ds.captions);
  split(ds, cfg.train_ratio, cfg.val_ratio, cfg.test_ratio, cfg.seed);
  return ds;
}

// Same dataset with the multi-spectral input reduced to the given bands.
inline Tensor select_bands(const Tensor& ms, const std::vector<std::size_t>& bands) {
  const std::size_t n = ms.dim(0), nb = ms.dim(1), plane = ms.dim(2) * ms.dim(3);
  Tensor out({n, bands.size(), ms.dim(2), ms.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < bands.size(); ++k) {
      if (bands[k] >= nb) throw Error(ErrorKind::InvalidArgument, "band out of range");
      std::copy_n(ms.data().data() + (i * nb + bands[k]) * plane, plane,
                  out.data().data() + (i * bands.size() + k) * plane);
    }
  }
  return out;
}

// ---- augmentation ----------------------------------------------------------

// Colour jitter (per-channel gain U[0.8,1.2], bias U[-0.1,0.1]), grayscale
// with probability 0.2, 3x3 box blur with probability 0.2. In place on one
// [3,H,W] image.
inline void augment_rgb(std::span<float> img, std::size_t size, CounterRng rng) {
  const std::size_t plane = size * size;
  for (std::size_t c = 0; c < 3; ++c) {
    const double gain = rng.uniform(0.8, 1.2);
    const double bias = rng.uniform(-0.1, 0.1);
    for (std::size_t i = 0; i < plane; ++i) {
      img[c * plane + i] = static_cast<float>(gain * img[c * plane + i] + bias);
    }
  }
  if (rng.bernoulli(0.2)) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double m = (double(img[i]) + img[plane + i] + img[2 * plane + i]) / 3.0;
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] = static_cast<float>(m);
    }
  }
  if (rng.bernoulli(0.2)) {
    std::vector<float> src(img.begin(), img.end());
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          double acc = 0.0;
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = static_cast<long>(y) + dy;
              const auto xx = static_cast<long>(x) + dx;
              if (yy < 0 || xx < 0 || yy >= long(size) || xx >= long(size)) continue;
              acc += src[c * plane + std::size_t(yy) * size + std::size_t(xx)];
              ++cnt;
            }
          }
          img[c * plane + y * size + x] = static_cast<float>(acc / cnt);
        }
      }
    }
  }
}

// ---- persistence -----------------------------------------------------------

namespace detail {

inline Checkpoint tensor_file(const std::string& name, const Tensor& t,
                              const MultiModalDataset& ds) {
  Checkpoint ck;
  ck.add(name, t);
  ck.meta()["arch"] = std::string("dataset/") + to_string(ds.domain()) + "/" + name;
  ck.meta()["embed_dim"] = "0";
  ck.meta()["kind"] = "dataset";
  return ck;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + p.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline nlohmann::json manifest_of(const MultiModalDataset& ds) {
  return {{"format", "mpatch-dataset/1"},
          {"domain", to_string(ds.domain())},
          {"config", ds.config.to_json()},
          {"classes", ds.classes},
          {"templates", ds.templates},
          {"composite", ds.composite.to_json()},
          {"tokenizer", nlohmann::json::parse(ds.tokenizer.to_json())},
          {"multilabel", ds.multilabel()},
          {"ids", ds.ids},
          {"captions", ds.captions},
          {"splits",
           {{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}}}};
}

inline void save_dataset(const MultiModalDataset& ds, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const std::filesystem::path root(dir);
  {
    std::ofstream out(root / "manifest.json");
    if (!out) throw Error(ErrorKind::Io, "cannot write dataset to '" + dir + "'");
    out << manifest_of(ds).dump(1) << '\n';
  }
  save(detail::tensor_file("ms", ds.ms, ds), (root / "ms.mpc").string());
  save(detail::tensor_file("rgb", ds.rgb, ds), (root / "rgb.mpc").string());
  save(detail::tensor_file("labels", ds.labels, ds), (root / "labels.mpc").string());
  save(detail::tensor_file("captions", ds.caption_tokens, ds),
       (root / "captions.mpc").string());
}

inline MultiModalDataset load_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  const auto m = nlohmann::json::parse(detail::read_text(root / "manifest.json"));
  MultiModalDataset ds;
  ds.config = DataConfig::from_json(m.at("config"));
  ds.classes = m.at("classes").get<std::vector<std::string>>();
  ds.templates = m.at("templates").get<std::vector<std::string>>();
  ds.composite = CompositeSpec::from_json(m.at("composite"));
  ds.tokenizer = TextTokenizer::from_json(m.at("tokenizer").dump());
  ds.ids = m.at("ids").get<std::vector<std::string>>();
  ds.captions = m.at("captions").get<std::vector<std::string>>();
  ds.splits.train = m.at("splits").at("train").get<std::vector<std::size_t>>();
  ds.splits.val = m.at("splits").at("val").get<std::vector<std::size_t>>();
  ds.splits.test = m.at("splits").at("test").get<std::vector<std::size_t>>();
  ds.ms = load((root / "ms.mpc").string()).tensor("ms");
  ds.rgb = load((root / "rgb.mpc").string()).tensor("rgb");
  ds.labels = load((root / "labels.mpc").string()).tensor("labels");
  ds.caption_tokens = load((root / "captions.mpc").string()).tensor("captions");
  if (ds.ms.dim(0) != ds.ids.size() || ds.rgb.dim(0) != ds.ids.size() ||
      ds.labels.dim(0) != ds.ids.size()) {
    throw Error(ErrorKind::InvalidArgument,
                "dataset '" + dir + "' has inconsistent sample counts");
  }
  return ds;
}

}  // namespace mpatch

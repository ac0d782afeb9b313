#include <cmath>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "mpatch/data.hpp"
#include "support.hpp"

using namespace mpatch;
using testsupport::TempDir;

namespace {

DataConfig small(Domain d, std::uint64_t seed) {
  DataConfig c = d == Domain::Natural ? DataConfig::natural_default(seed)
                                      : DataConfig::satellite_default(seed);
  c.samples = 120;
  return c;
}

std::string bytes_of(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Composite, ClampAndGain) {
  CompositeSpec spec;  // bands 3,2,1, gain 2, clamp [0,1]
  Tensor ms({4, 1, 3}, 0.0f);
  ms[3 * 3 + 0] = 0.5f;   // r band
  ms[3 * 3 + 1] = 0.2f;
  ms[3 * 3 + 2] = -0.4f;
  const Tensor rgb = rgb_composite(ms, spec);
  EXPECT_EQ(rgb[0], 1.0f);
  EXPECT_FLOAT_EQ(rgb[1], 0.4f);
  EXPECT_EQ(rgb[2], 0.0f);
}

TEST(Composite, Validation) {
  CompositeSpec spec;
  EXPECT_THROW(rgb_composite(Tensor({3, 2, 2}, 0.0f), spec), Error);
  spec.r = spec.g = 1;
  EXPECT_THROW(spec.validate(8), Error);
}

TEST(Generate, SameConfigGivesByteIdenticalFiles) {
  TempDir dir;
  const DataConfig cfg = small(Domain::Satellite, 5);
  save_dataset(generate(cfg), dir.str("a"));
  save_dataset(generate(cfg), dir.str("b"));
  for (const char* f : {"manifest.json", "ms.mpc", "rgb.mpc", "labels.mpc", "captions.mpc"}) {
    EXPECT_EQ(bytes_of(dir.path() / "a" / f), bytes_of(dir.path() / "b" / f)) << f;
  }
}

TEST(Generate, DifferentSeedsDiffer) {
  EXPECT_FALSE(bit_equal(generate(small(Domain::Satellite, 1)).ms,
                         generate(small(Domain::Satellite, 2)).ms));
}

TEST(Generate, StoredCompositesMatchRecomputation) {
  for (Domain d : {Domain::Natural, Domain::Satellite}) {
    const MultiModalDataset ds = generate(small(d, 3));
    const std::size_t plane = 16 * 16, nb = ds.ms.dim(1);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Tensor one({nb, 16, 16}, std::vector<float>(ds.ms.data().begin() + i * nb * plane,
                                                        ds.ms.data().begin() + (i + 1) * nb * plane));
      const Tensor rgb = rgb_composite(one, ds.composite);
      for (std::size_t k = 0; k < rgb.size(); ++k) {
        ASSERT_EQ(rgb[k], ds.rgb[i * 3 * plane + k]) << "sample " << i;
      }
    }
  }
}

TEST(Generate, NoiselessSingleLabelIsNearestPrototypeSeparable) {
  for (Domain d : {Domain::Natural, Domain::Satellite}) {
    DataConfig cfg = small(d, 4);
    cfg.noise = 0.0;
    cfg.multilabel = false;
    const MultiModalDataset ds = generate(cfg);
    const Tensor protos = class_prototypes(cfg);
    const std::size_t dim = protos.size() / cfg.classes;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const float* x = ds.ms.data().data() + i * dim;
      std::size_t best = 0;
      double best_cos = -2;
      for (std::size_t c = 0; c < cfg.classes; ++c) {
        const float* p = protos.data().data() + c * dim;
        double dot = 0, nx = 0, np = 0;
        for (std::size_t k = 0; k < dim; ++k) {
          dot += double(x[k]) * p[k];
          nx += double(x[k]) * x[k];
          np += double(p[k]) * p[k];
        }
        const double cos = dot / std::sqrt(nx * np);
        if (cos > best_cos) best_cos = cos, best = c;
      }
      hits += ds.labels.at(i, best) == 1.0f;
    }
    EXPECT_EQ(hits, ds.size()) << to_string(d);
  }
}

TEST(Generate, LabelsAndCaptions) {
  const MultiModalDataset sat = generate(small(Domain::Satellite, 6));
  const MultiModalDataset nat = generate(small(Domain::Natural, 6));
  for (std::size_t i = 0; i < sat.size(); ++i) {
    float k = 0;
    for (std::size_t c = 0; c < 8; ++c) k += sat.labels.at(i, c);
    EXPECT_GE(k, 1.0f);
    EXPECT_LE(k, 3.0f);
  }
  for (std::size_t i = 0; i < nat.size(); ++i) {
    float k = 0;
    for (std::size_t c = 0; c < 8; ++c) k += nat.labels.at(i, c);
    EXPECT_EQ(k, 1.0f);
    // the caption names the labelled class
    EXPECT_NE(nat.captions[i].find(nat.classes[nat.class_ids({i})[0]]), std::string::npos);
  }
  EXPECT_EQ(nat.caption_tokens.shape(), (Shape{120, 16}));
}

TEST(Generate, RejectsBadConfigs) {
  DataConfig c = small(Domain::Satellite, 1);
  c.classes = 1;
  EXPECT_THROW(generate(c), Error);
  c = small(Domain::Satellite, 1);
  c.size = 18;
  EXPECT_THROW(generate(c), Error);
  c = small(Domain::Satellite, 1);
  c.noise = -1;
  EXPECT_THROW(generate(c), Error);
}

TEST(Generate, SaveLoadRoundTrip) {
  TempDir dir;
  const MultiModalDataset ds = generate(small(Domain::Natural, 8));
  save_dataset(ds, dir.str("d"));
  const MultiModalDataset back = load_dataset(dir.str("d"));
  EXPECT_TRUE(bit_equal(back.ms, ds.ms));
  EXPECT_TRUE(bit_equal(back.rgb, ds.rgb));
  EXPECT_TRUE(bit_equal(back.labels, ds.labels));
  EXPECT_TRUE(bit_equal(back.caption_tokens, ds.caption_tokens));
  EXPECT_EQ(back.ids, ds.ids);
  EXPECT_EQ(back.splits.test, ds.splits.test);
  EXPECT_EQ(back.tokenizer.to_json(), ds.tokenizer.to_json());
  EXPECT_EQ(manifest_of(back), manifest_of(ds));
}

TEST(Split, RatioSizes) {
  const Splits s = make_splits(100, 0.8, 0.1, 0.1, 3);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
}

TEST(Split, SameSeedSameSplits) {
  const Splits a = make_splits(100, 0.8, 0.1, 0.1, 3);
  const Splits b = make_splits(100, 0.8, 0.1, 0.1, 3);
  const Splits c = make_splits(100, 0.8, 0.1, 0.1, 4);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.test, c.test);
}

TEST(Split, PartitionOfAllIds) {
  const Splits s = make_splits(137, 0.7, 0.2, 0.1, 9);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (std::size_t i : *part) EXPECT_TRUE(all.insert(i).second) << "duplicate " << i;
  }
  EXPECT_EQ(all.size(), 137u);
  EXPECT_EQ(*all.rbegin(), 136u);
}

TEST(Split, InvalidRatios) {
  EXPECT_THROW(make_splits(100, 0.8, 0.3, 0.1, 1), Error);
  EXPECT_THROW(make_splits(100, 1.0, 0.0, 0.0, 1), Error);
  EXPECT_THROW(make_splits(5, 0.98, 0.01, 0.01, 1), Error);
}

TEST(SelectBands, CopiesRequestedPlanes) {
  const MultiModalDataset ds = generate(small(Domain::Satellite, 2));
  const Tensor sub = select_bands(ds.ms, {3, 0});
  ASSERT_EQ(sub.shape(), (Shape{120, 2, 16, 16}));
  EXPECT_EQ(sub[0], ds.ms[3 * 256]);
  EXPECT_EQ(sub[256], ds.ms[0]);
  EXPECT_THROW(select_bands(ds.ms, {9}), Error);
}

TEST(Augment, DeterministicAndBounded) {
  std::vector<float> a(3 * 16 * 16), b;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = float(i % 17) / 16.0f;
  b = a;
  augment_rgb(a, 16, CounterRng(5));
  augment_rgb(b, 16, CounterRng(5));
  EXPECT_EQ(a, b);
  for (float v : a) EXPECT_TRUE(std::isfinite(v));
}

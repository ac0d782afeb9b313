#include <cmath>

#include <gtest/gtest.h>

#include "mpatch/zeroshot.hpp"
#include "support.hpp"

using namespace mpatch;

namespace {

Checkpoint text_model(const TextTokenizer& tok, std::uint64_t seed) {
  Checkpoint ck = init_encoder(EncoderConfig::text_default(tok.vocab_size(), seed));
  ck.meta()["tokenizer"] = tok.to_json();
  return ck;
}

std::vector<double> unit(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  std::vector<double> out;
  for (float x : v) out.push_back(x / std::sqrt(s));
  return out;
}

ClassificationHead basis_head(std::size_t d, double scale) {
  Tensor w({d, d}, 0.0f);
  for (std::size_t i = 0; i < d; ++i) w.at(i, i) = 1.0f;
  return ClassificationHead(w, scale);
}

}  // namespace

TEST(BuildHead, OneTemplateColumnIsNormalizedPromptEmbedding) {
  const auto tok = TextTokenizer::from_corpus({"a photo of a cat", "a photo of a dog"});
  const Checkpoint text = text_model(tok, 1);
  const ClassificationHead head = build_head(text, {{"cat", "dog"}, {"a photo of a {}"}});
  const Tensor e = encode_text(text, tok.encode_batch({"a photo of a dog"}));
  const auto expected = unit(e.row(0));
  for (std::size_t k = 0; k < head.dim(); ++k) {
    EXPECT_NEAR(head.weights().at(k, 1), expected[k], 1e-6);
  }
}

TEST(BuildHead, TwoTemplatesAverageNormalizedEmbeddings) {
  const auto tok = TextTokenizer::from_corpus({"a photo of a cat", "satellite image of cat"});
  const Checkpoint text = text_model(tok, 2);
  const ClassificationHead head =
      build_head(text, {{"cat"}, {"a photo of a {}", "satellite image of {}"}});
  const Tensor e = encode_text(text, tok.encode_batch({"a photo of a cat", "satellite image of cat"}));
  const auto a = unit(e.row(0)), b = unit(e.row(1));
  std::vector<double> mean(a.size());
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) mean[k] = 0.5 * (a[k] + b[k]), s += mean[k] * mean[k];
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_NEAR(head.weights().at(k, 0), mean[k] / std::sqrt(s), 1e-6);
  }
}

TEST(BuildHead, OrthogonalUnitPromptsGiveDiagonal) {
  // The averaging step on (1,0) and (0,1).
  std::vector<double> cols{0.5, 0.5};
  ASSERT_TRUE(detail::normalize_rows(cols, 2));
  EXPECT_NEAR(cols[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(cols[1], 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(BuildHead, DuplicatedTemplatesLeaveColumnsUnchanged) {
  const auto tok = TextTokenizer::from_corpus({"a photo of a cat dog", "an image of"});
  const Checkpoint text = text_model(tok, 3);
  const PromptSet once{{"cat", "dog"}, {"a photo of a {}", "an image of {}"}};
  const PromptSet thrice{{"cat", "dog"},
                         {"a photo of a {}", "an image of {}", "a photo of a {}",
                          "an image of {}", "a photo of a {}", "an image of {}"}};
  const Tensor a = build_head(text, once).weights();
  const Tensor b = build_head(text, thrice).weights();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(BuildHead, ValidatesPromptsAndScale) {
  const auto tok = TextTokenizer::from_corpus({"cat"});
  const Checkpoint text = text_model(tok, 1);
  EXPECT_THROW(build_head(text, {{"cat"}, {"no slot"}}), Error);
  EXPECT_THROW(build_head(text, {{"cat"}, {"{} and {}"}}), Error);
  EXPECT_THROW(build_head(text, {{}, {"{}"}}), Error);
  EXPECT_THROW(build_head(text, {{"cat"}, {"{}"}}, 0.0), Error);
}

TEST(BuildHead, CheckpointRoundTrip) {
  const ClassificationHead h = basis_head(4, 12.5);
  const ClassificationHead back =
      ClassificationHead::from_checkpoint(deserialize(serialize(h.to_checkpoint())));
  EXPECT_TRUE(bit_equal(back.weights(), h.weights()));
  EXPECT_EQ(back.logit_scale(), 12.5);
}

TEST(Head, RejectsNonUnitColumns) {
  EXPECT_THROW(ClassificationHead(Tensor({2, 2}, 1.0f), 1.0), Error);
  EXPECT_THROW(basis_head(2, -1.0), Error);
}

TEST(Classify, EmbeddingOnAColumnPicksThatClass) {
  const ClassificationHead h = basis_head(4, 100.0);
  Tensor e({1, 4}, 0.0f);
  e.at(0, 2) = 3.0f;
  const Tensor logits = classify(e, h);
  EXPECT_EQ(argmax_rows(logits)[0], 2u);
  EXPECT_NEAR(logits.at(0, 2), 100.0, 1e-4);
}

TEST(Classify, TwoDimensionalExample) {
  const ClassificationHead h = basis_head(2, 1.0);
  const Tensor logits = classify(Tensor({1, 2}, {0.6f, 0.8f}), h);
  EXPECT_NEAR(logits.at(0, 0), 0.6, 1e-6);
  EXPECT_NEAR(logits.at(0, 1), 0.8, 1e-6);
  EXPECT_EQ(argmax_rows(logits)[0], 1u);
}

TEST(Classify, LogitScaleDoesNotChangeRanking) {
  const Tensor w = testsupport::random_tensor({6, 4}, 3);
  std::vector<double> cols(w.vec().begin(), w.vec().end());
  Tensor wt({6, 4});
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0;
    for (std::size_t d = 0; d < 6; ++d) s += double(w.at(d, c)) * w.at(d, c);
    for (std::size_t d = 0; d < 6; ++d) wt.at(d, c) = static_cast<float>(w.at(d, c) / std::sqrt(s));
  }
  const Tensor e = testsupport::random_tensor({10, 6}, 4);
  const Tensor a = classify(e, ClassificationHead(wt, 1.0));
  const Tensor b = classify(e, ClassificationHead(wt, 37.0));
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(a.at(r, i) < a.at(r, j), b.at(r, i) < b.at(r, j));
      }
    }
  }
}

TEST(Classify, DimensionMismatchFails) {
  EXPECT_THROW(classify(Tensor({1, 3}, 1.0f), basis_head(2, 1.0)), Error);
}

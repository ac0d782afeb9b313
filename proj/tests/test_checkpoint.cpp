#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "mpatch/checkpoint.hpp"
#include "support.hpp"

using namespace mpatch;
using testsupport::random_checkpoint;
using testsupport::random_tensor;
using testsupport::TempDir;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

ErrorKind load_error(const std::string& bytes) {
  try {
    deserialize(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a load error";
  return ErrorKind::InvalidArgument;
}

// Byte string with a hand-written header over `data_bytes` bytes of data.
std::string container(const std::string& header, std::size_t data_bytes) {
  std::string out = "MPC1";
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((header.size() >> (8 * i)) & 0xff));
  out += header;
  out.append(data_bytes, '\0');
  return out;
}

}  // namespace

TEST(CheckpointIo, SingleTensorRoundTripIsBitEqual) {
  TempDir dir;
  Checkpoint ck;
  ck.add("w", random_tensor({3, 4}, 1));
  ck.meta()["stage"] = "zeroshot";
  save(ck, dir.str("a.mpc"));
  EXPECT_TRUE(bit_equal(load(dir.str("a.mpc")), ck));
}

TEST(CheckpointIo, RoundTripPreservesInsertionOrder) {
  Checkpoint ck;
  ck.add("zeta", random_tensor({2}, 1));
  ck.add("alpha", random_tensor({1, 3}, 2));
  ck.add("mid", random_tensor({2, 2, 2}, 3));
  const Checkpoint back = deserialize(serialize(ck));
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.entries()[0].first, "zeta");
  EXPECT_EQ(back.entries()[1].first, "alpha");
  EXPECT_EQ(back.entries()[2].first, "mid");
  EXPECT_TRUE(bit_equal(back, ck));
}

TEST(CheckpointIo, SpecialFloatPatternsSurvive) {
  Checkpoint ck;
  ck.add("w", Tensor({4}, {-0.0f, 1e-42f, 3.4e38f, -1.5f}));
  const Checkpoint back = deserialize(serialize(ck));
  EXPECT_TRUE(bit_equal(back, ck));
  EXPECT_TRUE(std::signbit(back.tensor("w")[0]));
}

TEST(CheckpointIo, SerializationIsByteStable) {
  const Checkpoint ck = random_checkpoint(4, 5);
  EXPECT_EQ(serialize(ck), serialize(deserialize(serialize(ck))));
}

TEST(CheckpointIo, WrongMagicIsRejected) {
  TempDir dir;
  Checkpoint ck;
  ck.add("w", random_tensor({2}, 1));
  std::string bytes = serialize(ck);
  bytes[0] = 'X';
  write_file(dir.str("bad.mpc"), bytes);
  try {
    load(dir.str("bad.mpc"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::BadMagic);
  }
}

TEST(CheckpointIo, MalformedContainers) {
  Checkpoint ck;
  ck.add("w", random_tensor({2, 2}, 1));
  std::string good = serialize(ck);

  std::string version = good;
  version[3] = '9';
  EXPECT_EQ(load_error(version), ErrorKind::VersionMismatch);
  EXPECT_EQ(load_error("MPC1\x01"), ErrorKind::Truncated);
  EXPECT_EQ(load_error(good.substr(0, 20)), ErrorKind::Truncated);
  EXPECT_EQ(load_error(good.substr(0, good.size() - 1)), ErrorKind::Truncated);
  EXPECT_EQ(load_error(container("{not json", 0)), ErrorKind::MalformedHeader);
  EXPECT_EQ(load_error(container(R"({"meta":{},"tensors":[{"name":"a","shape":[2],"dtype":"f16","offset":0,"nbytes":8}]})", 8)),
            ErrorKind::MalformedHeader);
  EXPECT_EQ(load_error(container(R"({"meta":{},"tensors":[{"name":"a","shape":[3],"dtype":"f32","offset":0,"nbytes":8}]})", 8)),
            ErrorKind::MalformedHeader);
  EXPECT_EQ(load_error(container(
                R"({"meta":{},"tensors":[{"name":"a","shape":[2],"dtype":"f32","offset":0,"nbytes":8},)"
                R"({"name":"b","shape":[2],"dtype":"f32","offset":4,"nbytes":8}]})",
                12)),
            ErrorKind::OverlappingExtents);
}

TEST(CheckpointIo, MissingFileIsAnIoError) {
  try {
    load("/nonexistent/dir/none.mpc");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(CheckpointIo, DuplicateNamesRejected) {
  Checkpoint ck;
  ck.add("w", Tensor({1}, 0.0f));
  EXPECT_THROW(ck.add("w", Tensor({1}, 0.0f)), Error);
}

TEST(Compat, IdenticalCheckpointsAreCompatible) {
  const Checkpoint ck = random_checkpoint(1, 1);
  EXPECT_TRUE(compat_check(ck, ck).ok());
}

TEST(Compat, MissingTensorIsNamed) {
  Checkpoint a, b;
  a.add("x", Tensor({2}, 0.0f));
  a.add("y", Tensor({2}, 0.0f));
  b.add("x", Tensor({2}, 0.0f));
  const CompatReport r = compat_check(a, b);
  ASSERT_EQ(r.missing.size(), 1u);
  EXPECT_EQ(r.missing[0], "y");
  EXPECT_NE(r.describe().find("y"), std::string::npos);
}

TEST(Compat, ShapeConflictIsNamed) {
  Checkpoint a, b;
  a.add("x", Tensor({2, 3}, 0.0f));
  b.add("x", Tensor({3, 2}, 0.0f));
  const CompatReport r = compat_check(a, b);
  ASSERT_EQ(r.conflicts.size(), 1u);
  EXPECT_EQ(r.conflicts[0].name, "x");
  EXPECT_EQ(r.conflicts[0].a, (Shape{2, 3}));
}

TEST(Interpolate, EndpointsAreExact) {
  const Checkpoint zs = random_checkpoint(3, 1), ft = random_checkpoint(3, 2);
  EXPECT_TRUE(tensors_bit_equal(interpolate(zs, ft, 0.0), zs));
  EXPECT_TRUE(tensors_bit_equal(interpolate(zs, ft, 1.0), ft));
}

TEST(Interpolate, ScalarMidpoint) {
  Checkpoint zs, ft;
  zs.add("w", Tensor({1}, 2.0f));
  ft.add("w", Tensor({1}, 4.0f));
  EXPECT_EQ(interpolate(zs, ft, 0.5).tensor("w")[0], 3.0f);
}

TEST(Interpolate, RejectsBadAlphaAndIncompatibleInputs) {
  const Checkpoint a = random_checkpoint(3, 1);
  Checkpoint b;
  b.add("other", Tensor({1}, 0.0f));
  for (double alpha : {-0.1, 1.1, std::nan("")}) {
    try {
      interpolate(a, a, alpha);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
    }
  }
  try {
    interpolate(a, b, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Incompatible);
  }
}

TEST(Interpolate, TagsStageAndAlpha) {
  const Checkpoint a = random_checkpoint(3, 1), b = random_checkpoint(3, 2);
  const Checkpoint p = interpolate(a, b, 0.25);
  EXPECT_EQ(p.meta_or("stage", ""), stage::kPatched);
  EXPECT_EQ(std::stod(p.meta_or("alpha", "")), 0.25);
}

// Linearity against a double-precision reference and symmetry under
// swapping operands, on 100 random checkpoint pairs.
TEST(Interpolate, LinearAndSymmetricWithinOneUlp) {
  CounterRng rng(77);
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Checkpoint a = random_checkpoint(i, 2 * i + 1000);
    const Checkpoint b = random_checkpoint(i, 2 * i + 1001);
    const double alpha = rng.uniform_f32();
    const Checkpoint p = interpolate(a, b, alpha);
    const Checkpoint q = interpolate(b, a, 1.0 - alpha);
    for (const auto& [name, t] : p.entries()) {
      const Tensor& x = a.tensor(name);
      const Tensor& y = b.tensor(name);
      const Tensor& s = q.tensor(name);
      for (std::size_t k = 0; k < t.size(); ++k) {
        const float ref = static_cast<float>((1.0 - alpha) * x[k] + alpha * double(y[k]));
        EXPECT_LE(std::abs(t[k] - ref), std::nextafter(std::abs(ref), INFINITY) - std::abs(ref))
            << "checkpoint " << i;
        EXPECT_LE(std::abs(t[k] - s[k]), std::nextafter(std::abs(t[k]), INFINITY) - std::abs(t[k]))
            << "checkpoint " << i;
      }
    }
  }
}

#pragma once

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "mpatch/checkpoint.hpp"
#include "mpatch/rng.hpp"

namespace testsupport {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "mpatch_test";
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    for (auto& c : name) {
      if (c == '/') c = '_';
    }
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& leaf = "") const { return (path_ / leaf).string(); }

 private:
  std::filesystem::path path_;
};

inline mpatch::Tensor random_tensor(mpatch::Shape shape, std::uint64_t seed,
                                    double scale = 1.0) {
  mpatch::CounterRng rng(seed);
  mpatch::Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(scale * rng.normal());
  return t;
}

// Checkpoint with a few tensors of random shape and content.
inline mpatch::Checkpoint random_checkpoint(std::uint64_t layout_seed, std::uint64_t value_seed) {
  mpatch::CounterRng rng(layout_seed);
  mpatch::Checkpoint ck;
  const std::size_t count = 1 + rng.below(4);
  for (std::size_t i = 0; i < count; ++i) {
    mpatch::Shape shape{1 + rng.below(5), 1 + rng.below(6)};
    ck.add("t" + std::to_string(i), random_tensor(shape, value_seed * 31 + i));
  }
  ck.meta()["arch"] = "test";
  return ck;
}

}  // namespace testsupport

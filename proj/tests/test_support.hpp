#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "squeeze10/matrix.hpp"

namespace squeeze10::testing {

inline MatrixF random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  MatrixF m(rows, cols);
  for (auto& v : m.data()) v = dist(rng);
  return m;
}

inline MatrixF gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  MatrixF m(rows, cols);
  for (auto& v : m.data()) v = static_cast<float>(dist(rng));
  return m;
}

// Unique scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("squeeze10_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace squeeze10::testing

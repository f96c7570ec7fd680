#pragma once

// Independent oracles for the unit and acceptance tests. Nothing here calls
// the library code path it is used to check.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "trajguide/geometry.hpp"
#include "trajguide/model.hpp"

namespace testing {

using trajguide::Cell;
using trajguide::CellSet;
using trajguide::GridDims;

/// O(HW * |src|) nearest-source Euclidean distance.
inline std::vector<double> brute_force_distances(const CellSet& src) {
  const GridDims d = src.dims();
  std::vector<double> out(d.size(), std::numeric_limits<double>::infinity());
  for (int r = 0; r < d.height; ++r) {
    for (int c = 0; c < d.width; ++c) {
      double best = std::numeric_limits<double>::infinity();
      for (const Cell& s : src.cells()) {
        best = std::min(best, std::hypot(static_cast<double>(r - s.row), static_cast<double>(c - s.col)));
      }
      out[d.index(r, c)] = best;
    }
  }
  return out;
}

/// Central differences of f around x, one coordinate at a time.
inline std::vector<double> central_differences(std::vector<double> x, double h,
                                               const std::function<double(const std::vector<double>&)>& f) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max |a - b| scaled by the largest magnitude in either vector.
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

/// Random row-stochastic attention map from Gaussian logits.
inline trajguide::AttentionMap random_attention(std::mt19937_64& gen, std::size_t layer, GridDims dims, std::size_t m,
                                                double spread = 1.5) {
  std::normal_distribution<double> normal(0.0, spread);
  trajguide::AttentionMap a(layer, dims, m);
  for (std::size_t loc = 0; loc < dims.size(); ++loc) {
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) sum += (a.at(loc, i) = std::exp(normal(gen)));
    for (std::size_t i = 0; i < m; ++i) a.at(loc, i) /= sum;
  }
  return a;
}

/// Fresh directory under the test working directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::current_path() / ("tmp_" + tag + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing

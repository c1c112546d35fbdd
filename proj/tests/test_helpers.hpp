#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "csr/rng.hpp"
#include "csr/tensor_math.hpp"

namespace csr::testing {

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "csr") {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline DenseVector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  DenseVector v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

inline FeatureMap random_features(Rng& rng, std::size_t c, std::size_t h, std::size_t w, double scale = 1.0) {
  FeatureMap f(c, h, w);
  for (auto& x : f.values) x = rng.normal(0.0, scale);
  return f;
}

inline DenseVector unit_vector(Rng& rng, std::size_t n) {
  auto v = random_vector(rng, n);
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  for (auto& x : v) x /= s;
  return v;
}

// Central difference of f at x[i], restoring x afterwards.
inline double central_difference(std::vector<double>& x, std::size_t i, const std::function<double()>& f,
                                 double step = 1e-5) {
  const double saved = x[i];
  x[i] = saved + step;
  const double plus = f();
  x[i] = saved - step;
  const double minus = f();
  x[i] = saved;
  return (plus - minus) / (2.0 * step);
}

// |a - n| / max(|a|, |n|, floor): the floor keeps near-zero components from
// inflating the ratio with pure roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace csr::testing

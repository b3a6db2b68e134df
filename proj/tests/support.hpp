#pragma once

#include "uso/trainer.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>

#include <unistd.h>

namespace uso::testing {

/// Pretrained encoders, base backbone and classifier produced by the
/// `foundation` ctest fixture. Null when USO_FOUNDATION is unset.
inline const train::Foundation* foundation() {
  static std::unique_ptr<train::Foundation> cached = [] {
    const char* dir = std::getenv("USO_FOUNDATION");
    if (!dir || !train::has_foundation(dir)) return std::unique_ptr<train::Foundation>{};
    return std::make_unique<train::Foundation>(train::load_foundation(dir));
  }();
  return cached.get();
}

#define USO_REQUIRE_FOUNDATION()                                                  \
  const ::uso::train::Foundation* found = ::uso::testing::foundation();           \
  if (!found) GTEST_SKIP() << "USO_FOUNDATION does not point at pretrained encoders"

inline std::unique_ptr<UsoModel> pretrained_model(const train::Foundation& f, const ModelConfig& cfg = {},
                                                 std::uint64_t seed = 0) {
  auto m = std::make_unique<UsoModel>(cfg, seed);
  m->load_matching(f.model);
  return m;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central difference of `f` with respect to entry `i` of `x`.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-4) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("uso_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace uso::testing

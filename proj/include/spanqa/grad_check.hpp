#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "spanqa/tensor.hpp"

namespace spanqa {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Tensors larger than this are checked on sampled coordinates.
  std::size_t full_check_limit = 4096;
  std::size_t samples_per_tensor = 128;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  bool finite = true;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;

  bool passed(double tolerance) const {
    return finite && max_relative_error < tolerance;
  }
  std::string describe() const;
};

using ScalarObjective = std::function<double(const ParamStore<double>&)>;

// Compares `analytic` (name -> gradient) against central differences of
// `objective` around `params`. Relative error per coordinate is
// |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const ScalarObjective& objective,
                           const ParamStore<double>& params,
                           const ParamStore<double>::Map& analytic,
                           const GradCheckOptions& options = {});

// Same check on the extended-precision path. Coordinates whose true gradient
// is exactly zero (for example an output bias under softmax shift
// invariance) leave ~1e-11 of rounding noise in a 64-bit central difference,
// which the 1e-8 floor turns into a large relative error.
using ExtendedObjective = std::function<long double(const ParamStore<long double>&)>;
GradCheckResult grad_check(const ExtendedObjective& objective,
                           const ParamStore<long double>& params,
                           const ParamStore<long double>::Map& analytic,
                           const GradCheckOptions& options = {});

}  // namespace spanqa

#include "spanqa/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "spanqa/random.hpp"

namespace spanqa {

std::string GradCheckResult::describe() const {
  std::ostringstream os;
  os << "max_rel_err=" << max_relative_error << " over " << coordinates_checked
     << " coords";
  if (!worst_param.empty()) {
    os << " (worst " << worst_param << "[" << worst_index
       << "]: analytic=" << analytic << " numeric=" << numeric << ")";
  }
  if (!finite) os << " NON-FINITE";
  return os.str();
}

namespace {

template <typename T>
GradCheckResult check(const std::function<T(const ParamStore<T>&)>& objective,
                      const ParamStore<T>& params, const typename ParamStore<T>::Map& analytic,
                      const GradCheckOptions& options) {
  GradCheckResult result;
  ParamStore<T> probe = params;
  SplitMix64 rng(options.seed);

  for (const auto& [name, tensor] : params.params()) {
    auto it = analytic.find(name);
    if (it == analytic.end()) {
      throw Error(ErrorKind::kConfig, "grad_check: no analytic gradient for '" + name + "'");
    }
    const Tensor<T>& grad = it->second;
    require_shape(grad.shape() == tensor.shape(), "grad_check", grad.shape(), tensor.shape());

    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (tensor.size() > options.full_check_limit) {
      shuffle(coords, rng);
      coords.resize(options.samples_per_tensor);
      std::sort(coords.begin(), coords.end());
    }

    Tensor<T>& p = probe.param(name);
    const T eps = static_cast<T>(options.epsilon);
    for (std::size_t idx : coords) {
      const T saved = p[idx];
      p[idx] = saved + eps;
      const T up = objective(probe);
      p[idx] = saved - eps;
      const T down = objective(probe);
      p[idx] = saved;

      const double numeric = static_cast<double>((up - down) / (T{2} * eps));
      const double a = static_cast<double>(grad[idx]);
      ++result.coordinates_checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        result.finite = false;
        result.worst_param = name;
        result.worst_index = idx;
        result.analytic = a;
        result.numeric = numeric;
        result.max_relative_error = INFINITY;
        return result;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_relative_error || result.worst_param.empty()) {
        if (rel >= result.max_relative_error) {
          result.max_relative_error = rel;
          result.worst_param = name;
          result.worst_index = idx;
          result.analytic = a;
          result.numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace

GradCheckResult grad_check(const ScalarObjective& objective, const ParamStore<double>& params,
                           const ParamStore<double>::Map& analytic,
                           const GradCheckOptions& options) {
  return check<double>(objective, params, analytic, options);
}

GradCheckResult grad_check(const ExtendedObjective& objective,
                           const ParamStore<long double>& params,
                           const ParamStore<long double>::Map& analytic,
                           const GradCheckOptions& options) {
  return check<long double>(objective, params, analytic, options);
}

}  // namespace spanqa

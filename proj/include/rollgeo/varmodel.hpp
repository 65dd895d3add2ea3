// Spherical covariance / semivariogram model and its weighted least squares
// fit to an empirical semivariogram (Cressie weights).

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "rollgeo/variogram.hpp"

namespace rollgeo {

struct SphericalParams {
  double nugget = 0.0;
  double psill = 0.0;
  double range = 1.0;

  double total_sill() const { return nugget + psill; }
};

inline void validate(const SphericalParams& p) {
  if (!(p.nugget >= 0.0) || !(p.psill >= 0.0) || !(p.range > 0.0) ||
      !std::isfinite(p.nugget) || !std::isfinite(p.psill) || !std::isfinite(p.range))
    throw std::invalid_argument("spherical params: need nugget >= 0, psill >= 0, range > 0");
}

/// Covariance of the smooth component (nugget excluded). The cubic is
/// evaluated in the factored form psill * (1-u)^2 * (u+2) / 2, which is
/// algebraically identical to 1 - 1.5u + 0.5u^3 but does not cancel as
/// u approaches 1.
inline double spherical_cov(double h, const SphericalParams& p) {
  if (!(h >= 0.0)) throw std::invalid_argument("spherical_cov: h must be >= 0");
  const double u = h / p.range;
  if (u >= 1.0) return 0.0;
  const double s = 1.0 - u;
  return p.psill * (0.5 * s * s * (u + 2.0));
}

inline double spherical_semivariogram(double h, const SphericalParams& p) {
  if (!(h >= 0.0)) throw std::invalid_argument("spherical_semivariogram: h must be >= 0");
  if (h == 0.0) return 0.0;
  const double u = h / p.range;
  if (u >= 1.0) return p.nugget + p.psill;
  return p.nugget + p.psill * (1.5 * u - 0.5 * u * u * u);
}

struct FitResult {
  SphericalParams params;
  double objective = 0.0;
  int n_iterations = 0;
  bool converged = false;
};

// ---------------------------------------------------------------------------
// Cressie-weighted least squares: minimize
//   Q(theta) = sum_j N(h_j) * (gamma_hat_j / gamma(h_j; theta) - 1)^2
// over the box {nugget >= 0, psill >= 0, 0 < range <= 2*max_lag} with a
// Nelder-Mead simplex search (projected onto the box), restarted once from
// a perturbed initial point.

namespace detail {

struct CressieProblem {
  std::vector<double> h;
  std::vector<double> gamma_hat;
  std::vector<double> weight;
  double range_lo = 0.0;
  double range_hi = 0.0;

  std::array<double, 3> project(std::array<double, 3> t) const {
    t[0] = std::max(t[0], 0.0);
    t[1] = std::max(t[1], 0.0);
    t[2] = std::clamp(t[2], range_lo, range_hi);
    return t;
  }

  double objective(const std::array<double, 3>& t) const {
    const SphericalParams p{t[0], t[1], t[2]};
    double q = 0.0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      const double g = spherical_semivariogram(h[j], p);
      if (!(g > 0.0)) return std::numeric_limits<double>::infinity();
      const double r = gamma_hat[j] / g - 1.0;
      q += weight[j] * r * r;
    }
    return q;
  }
};

struct SimplexOutcome {
  std::array<double, 3> x;
  double fx = 0.0;
  int n_iterations = 0;
  bool converged = false;
};

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 0.5,
/// shrink 0.5) in 3 dimensions; every trial point is projected into the
/// feasible box before evaluation.
inline SimplexOutcome nelder_mead(const CressieProblem& prob, std::array<double, 3> x0,
                                  const std::array<double, 3>& step, int max_iter,
                                  double rel_tol) {
  constexpr int D = 3;
  std::array<std::array<double, 3>, D + 1> v;
  std::array<double, D + 1> f;
  v[0] = prob.project(x0);
  f[0] = prob.objective(v[0]);
  for (int k = 0; k < D; ++k) {
    std::array<double, 3> p = v[0];
    p[static_cast<std::size_t>(k)] += step[static_cast<std::size_t>(k)];
    v[static_cast<std::size_t>(k) + 1] = prob.project(p);
    f[static_cast<std::size_t>(k) + 1] = prob.objective(v[static_cast<std::size_t>(k) + 1]);
  }

  auto order = [&] {
    for (int a = 0; a <= D; ++a)
      for (int b = a + 1; b <= D; ++b)
        if (f[static_cast<std::size_t>(b)] < f[static_cast<std::size_t>(a)]) {
          std::swap(f[static_cast<std::size_t>(a)], f[static_cast<std::size_t>(b)]);
          std::swap(v[static_cast<std::size_t>(a)], v[static_cast<std::size_t>(b)]);
        }
  };
  order();

  SimplexOutcome out;
  int it = 0;
  for (; it < max_iter; ++it) {
    const double spread = f[D] - f[0];
    if (std::isfinite(f[0]) &&
        spread <= rel_tol * std::max(std::abs(f[0]), std::numeric_limits<double>::min())) {
      out.converged = true;
      break;
    }
    double diam = 0.0;
    for (int a = 1; a <= D; ++a)
      for (int c = 0; c < D; ++c)
        diam = std::max(diam, std::abs(v[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] -
                                       v[0][static_cast<std::size_t>(c)]));
    double scale = 0.0;
    for (int c = 0; c < D; ++c) scale = std::max(scale, std::abs(v[0][static_cast<std::size_t>(c)]));
    if (diam <= 1e-12 * (1.0 + scale)) {
      out.converged = true;
      break;
    }

    std::array<double, 3> centroid{0.0, 0.0, 0.0};
    for (int a = 0; a < D; ++a)
      for (int c = 0; c < D; ++c)
        centroid[static_cast<std::size_t>(c)] +=
            v[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] / D;

    auto along = [&](double coef) {
      std::array<double, 3> p;
      for (int c = 0; c < D; ++c)
        p[static_cast<std::size_t>(c)] =
            centroid[static_cast<std::size_t>(c)] +
            coef * (centroid[static_cast<std::size_t>(c)] - v[D][static_cast<std::size_t>(c)]);
      return prob.project(p);
    };

    const std::array<double, 3> xr = along(1.0);
    const double fr = prob.objective(xr);
    if (fr < f[0]) {
      const std::array<double, 3> xe = along(2.0);
      const double fe = prob.objective(xe);
      if (fe < fr) {
        v[D] = xe;
        f[D] = fe;
      } else {
        v[D] = xr;
        f[D] = fr;
      }
    } else if (fr < f[D - 1]) {
      v[D] = xr;
      f[D] = fr;
    } else {
      if (fr < f[D]) {
        const std::array<double, 3> xc = along(0.5);
        const double fc = prob.objective(xc);
        if (fc <= fr) {
          v[D] = xc;
          f[D] = fc;
        } else {
          v[D] = xr;
          f[D] = fr;
        }
      } else {
        const std::array<double, 3> xc = along(-0.5);
        const double fc = prob.objective(xc);
        if (fc < f[D]) {
          v[D] = xc;
          f[D] = fc;
        } else {
          for (int a = 1; a <= D; ++a) {
            for (int c = 0; c < D; ++c)
              v[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] =
                  v[0][static_cast<std::size_t>(c)] +
                  0.5 * (v[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] -
                         v[0][static_cast<std::size_t>(c)]);
            v[static_cast<std::size_t>(a)] = prob.project(v[static_cast<std::size_t>(a)]);
            f[static_cast<std::size_t>(a)] = prob.objective(v[static_cast<std::size_t>(a)]);
          }
        }
      }
    }
    order();
  }
  out.x = v[0];
  out.fx = f[0];
  out.n_iterations = it;
  return out;
}

}  // namespace detail

/// Default starting point: nugget from the first non-empty bin, total sill
/// from the mean of the last third of non-empty bins, range from the first
/// lag reaching 95% of that sill (max_lag/2 if never reached).
inline SphericalParams default_fit_init(const EmpiricalSemivariogram& emp) {
  std::vector<double> h, g;
  for (const VariogramBin& b : emp.bins)
    if (b.n_pairs > 0) {
      h.push_back(b.lag_center);
      g.push_back(*b.gamma_hat);
    }
  const std::size_t m = g.size();
  const double nugget0 = g.front();
  const std::size_t tail = (m + 2) / 3;
  double sill0 = 0.0;
  for (std::size_t j = m - tail; j < m; ++j) sill0 += g[j];
  sill0 /= static_cast<double>(tail);
  double range0 = emp.max_lag / 2.0;
  for (std::size_t j = 0; j < m; ++j)
    if (g[j] >= 0.95 * sill0) {
      range0 = h[j];
      break;
    }
  return {nugget0, std::max(sill0 - nugget0, 0.0), range0};
}

inline FitResult fit_cressie_wls(const EmpiricalSemivariogram& emp,
                                 std::optional<SphericalParams> init = std::nullopt) {
  detail::CressieProblem prob;
  double mean_gamma = 0.0;
  for (const VariogramBin& b : emp.bins)
    if (b.n_pairs > 0) {
      prob.h.push_back(b.lag_center);
      prob.gamma_hat.push_back(*b.gamma_hat);
      prob.weight.push_back(static_cast<double>(b.n_pairs));
      mean_gamma += *b.gamma_hat;
    }
  if (prob.h.size() < 3)
    throw std::invalid_argument("fit_cressie_wls: need at least 3 non-empty bins");
  mean_gamma /= static_cast<double>(prob.h.size());
  prob.range_hi = 2.0 * emp.max_lag;
  prob.range_lo = 1e-9 * emp.max_lag;

  const SphericalParams p0 = init ? *init : default_fit_init(emp);
  const std::array<double, 3> x0 = prob.project({p0.nugget, p0.psill, p0.range});
  const double f0 = prob.objective(x0);

  // Steps proportional to the coordinate, with data-scale fallbacks where a
  // coordinate is zero, so the search is equivariant under unit changes.
  auto steps_for = [&](const std::array<double, 3>& x) {
    std::array<double, 3> s;
    s[0] = x[0] != 0.0 ? 0.05 * x[0] : 0.05 * std::max(mean_gamma, 1e-300);
    s[1] = x[1] != 0.0 ? 0.05 * x[1] : 0.05 * std::max(mean_gamma, 1e-300);
    s[2] = x[2] != 0.0 ? 0.05 * x[2] : 0.05 * emp.max_lag;
    return s;
  };

  const auto run1 = detail::nelder_mead(prob, x0, steps_for(x0), 500, 1e-9);
  std::array<double, 3> x1 = prob.project({1.25 * x0[0], 1.25 * x0[1], 1.25 * x0[2]});
  const auto run2 = detail::nelder_mead(prob, x1, steps_for(x1), 500, 1e-9);

  const detail::SimplexOutcome& best = run2.fx < run1.fx ? run2 : run1;
  FitResult out;
  out.n_iterations = run1.n_iterations + run2.n_iterations;
  if (best.fx <= f0) {
    out.params = {best.x[0], best.x[1], best.x[2]};
    out.objective = best.fx;
    out.converged = best.converged;
  } else {
    out.params = {x0[0], x0[1], x0[2]};
    out.objective = f0;
    out.converged = false;
  }
  return out;
}

inline nlohmann::json to_json(const FitResult& r) {
  return {{"nugget", r.params.nugget},
          {"psill", r.params.psill},
          {"range", r.params.range},
          {"total_sill", r.params.total_sill()},
          {"objective", r.objective},
          {"converged", r.converged},
          {"n_iterations", r.n_iterations}};
}

}  // namespace rollgeo

// Sequential spatial backfitting across two roller datasets that share a
// lattice process through the coefficient c:
//
//   z_x = X_x b_x +   H_x a_x           + e_x
//   z_y = X_y b_y + c H_y a_x + H_y a_y + e_y
//
// Trend designs are degree-p polynomials at the observation coordinates;
// a_x, a_y live on lattice nodes and are estimated by a kriging-type
// shrinkage smoother; covariance distances use diag(1, rho)-transformed
// coordinates throughout.
//
// Estimation order per outer pass: OLS trends, covariance parameters from
// directional semivariograms of the trend residuals (x-direction for a_x,
// y-direction for a_y; fitted nugget becomes the sensor noise variance),
// then the alpha smoothers, then trend refreshes against data minus alpha.
// The covariance parameters are estimated once, on the first pass, from the
// plain OLS residuals: that pass is exactly the standalone single-dataset
// pipeline, so with c = 0 the backfit reproduces it identically. Later
// passes refine beta and alpha only, with the fitted covariance held fixed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rollgeo/detrend.hpp"
#include "rollgeo/geodata.hpp"
#include "rollgeo/variogram.hpp"
#include "rollgeo/varmodel.hpp"

namespace rollgeo {

struct BackfitSpec {
  double c = 1.0;
  double rho = 5.0;
  Lattice lattice;
  int poly_degree = 5;
  int max_outer_iters = 50;
  double tol = 1e-3;
  std::uint64_t seed = 0;
};

inline void validate(const BackfitSpec& s) {
  if (!std::isfinite(s.c)) throw std::invalid_argument("backfit: c must be finite");
  if (!(s.rho > 0.0) || !std::isfinite(s.rho))
    throw std::invalid_argument("backfit: rho must be positive and finite");
  if (!(s.tol > 0.0)) throw std::invalid_argument("backfit: tol must be > 0");
  if (s.poly_degree < 1) throw std::invalid_argument("backfit: poly_degree must be >= 1");
  if (s.max_outer_iters < 1) throw std::invalid_argument("backfit: max_outer_iters must be >= 1");
  validate(s.lattice);
}

struct BackfitResult {
  std::vector<double> beta_x;
  std::vector<double> beta_y;
  std::vector<double> alpha_x;
  std::vector<double> alpha_y;
  /// Smooth-process parameters (nugget split off into sigma2).
  SphericalParams theta_x;
  SphericalParams theta_y;
  double sigma2_x = 0.0;
  double sigma2_y = 0.0;
  int n_outer_iters = 0;
  bool converged = false;
  EmpiricalSemivariogram semivar_x;
  EmpiricalSemivariogram semivar_y;
  /// Combined residual sum of squares after each outer pass.
  std::vector<double> rss_history;
  /// Observation-level residual variances after removing trend and alpha.
  double resid_var_x = 0.0;
  double resid_var_y = 0.0;
  BackfitSpec spec;
};

/// Sample variance (n-1 denominator) of observation-level residuals.
inline double update_sigma2(std::span<const double> residuals_after_alpha) {
  const std::size_t n = residuals_after_alpha.size();
  if (n < 2) throw std::invalid_argument("update_sigma2: need at least 2 values");
  double mean = 0.0;
  for (double v : residuals_after_alpha) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : residuals_after_alpha) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(n - 1);
}

// ---------------------------------------------------------------------------
// Alpha smoother. Each observation is incident to exactly one node, so node
// means are sufficient: with M the observed-node set, counts c_m, and node
// means ybar,
//   alpha = K_{:,M} (K_MM + diag(sigma2 / c_m))^{-1} ybar
// which is the conditional mean of all node values under the spherical
// covariance (on transformed coordinates) plus iid noise. Unobserved nodes
// are filled through the cross covariance. The factorization depends only
// on geometry and parameters, so it is built once and reused across calls.

class AlphaSmoother {
 public:
  AlphaSmoother(const MappingOperator& mapping, const Lattice& lat, SphericalParams params,
                double rho, double sigma2)
      : lat_(lat), params_(params), rho_(rho) {
    if (!(sigma2 >= 0.0)) throw std::invalid_argument("alpha smoother: sigma2 must be >= 0");
    validate(params);
    validate(lat);
    const int n_nodes = lat.node_count();
    counts_.assign(static_cast<std::size_t>(n_nodes), 0);
    for (int a : mapping.assignments) {
      if (a < 0 || a >= n_nodes)
        throw std::invalid_argument("alpha smoother: mapping refers to a node outside the lattice");
      ++counts_[static_cast<std::size_t>(a)];
    }
    for (int f = 0; f < n_nodes; ++f)
      if (counts_[static_cast<std::size_t>(f)] > 0) observed_.push_back(f);
    if (observed_.empty()) throw std::invalid_argument("alpha smoother: no observations mapped");

    const std::size_t m = observed_.size();
    obs_coords_.resize(m);
    for (std::size_t a = 0; a < m; ++a) {
      const Point p = lat.node_at(observed_[a]);
      obs_coords_[a] = {p.x, rho * p.y};
    }
    Eigen::MatrixXd kmm(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a; b < m; ++b) {
        const double dx = obs_coords_[b].x - obs_coords_[a].x;
        const double dy = obs_coords_[b].y - obs_coords_[a].y;
        const double cov = spherical_cov(std::sqrt(dx * dx + dy * dy), params_);
        kmm(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = cov;
        kmm(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = cov;
      }
    for (std::size_t a = 0; a < m; ++a)
      kmm(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) +=
          sigma2 / static_cast<double>(counts_[static_cast<std::size_t>(observed_[a])]);

    const double base_jitter = 1e-10 * kmm.trace() / static_cast<double>(m);
    double jitter = 0.0;
    int rounds = 0;
    llt_.compute(kmm);
    while (llt_.info() != Eigen::Success) {
      if (rounds > 8 || !(base_jitter > 0.0))
        throw std::runtime_error("alpha smoother: covariance system singular after maximum jitter");
      const double add = rounds == 0 ? base_jitter : jitter;
      kmm.diagonal().array() += add;
      jitter += add;
      ++rounds;
      llt_.compute(kmm);
    }
  }

  /// Kriging predictions at every lattice node from observation residuals.
  std::vector<double> apply(std::span<const double> residuals,
                            const MappingOperator& mapping) const {
    if (residuals.size() != mapping.assignments.size())
      throw std::invalid_argument("alpha smoother: residual length mismatch");
    const std::size_t m = observed_.size();
    std::vector<double> sums(counts_.size(), 0.0);
    for (std::size_t i = 0; i < residuals.size(); ++i)
      sums[static_cast<std::size_t>(mapping.assignments[i])] += residuals[i];
    Eigen::VectorXd ybar(static_cast<Eigen::Index>(m));
    for (std::size_t a = 0; a < m; ++a)
      ybar[static_cast<Eigen::Index>(a)] =
          sums[static_cast<std::size_t>(observed_[a])] /
          static_cast<double>(counts_[static_cast<std::size_t>(observed_[a])]);
    const Eigen::VectorXd w = llt_.solve(ybar);

    const int n_nodes = lat_.node_count();
    std::vector<double> alpha(static_cast<std::size_t>(n_nodes), 0.0);
    for (int f = 0; f < n_nodes; ++f) {
      const Point p = lat_.node_at(f);
      const Point tp{p.x, rho_ * p.y};
      double acc = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        const double dx = obs_coords_[a].x - tp.x;
        const double dy = obs_coords_[a].y - tp.y;
        acc += spherical_cov(std::sqrt(dx * dx + dy * dy), params_) *
               w[static_cast<Eigen::Index>(a)];
      }
      alpha[static_cast<std::size_t>(f)] = acc;
    }
    return alpha;
  }

 private:
  Lattice lat_;
  SphericalParams params_;
  double rho_ = 1.0;
  std::vector<int> observed_;
  std::vector<std::size_t> counts_;
  std::vector<Point> obs_coords_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// One-shot form of the smoother. `params.range` is interpreted on the
/// diag(1, rho)-transformed coordinates.
inline std::vector<double> estimate_alpha(std::span<const double> residuals,
                                          const MappingOperator& mapping, const Lattice& lat,
                                          const SphericalParams& params, double rho,
                                          double sigma2) {
  const AlphaSmoother sm(mapping, lat, params, rho, sigma2);
  return sm.apply(residuals, mapping);
}

// ---------------------------------------------------------------------------

namespace detail {

/// Observation-coordinate polynomial design with a reusable factorization
/// for the repeated trend refreshes.
struct TrendWorkspace {
  Eigen::MatrixXd X;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;

  TrendWorkspace(const Dataset& ds, const CenterScale& cs, int degree) {
    const std::vector<Point> pts = coordinates(ds);
    std::vector<Point> scaled(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) scaled[i] = cs.apply(pts[i]);
    X = polynomial_design(scaled, degree);
    qr.compute(X);
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& y) const { return qr.solve(y); }
};

inline Eigen::VectorXd to_eigen(std::span<const double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

/// Per-observation alpha contribution through the mapping.
inline Eigen::VectorXd gather(const std::vector<double>& alpha, const MappingOperator& map) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(map.assignments.size()));
  for (std::size_t i = 0; i < map.assignments.size(); ++i)
    out[static_cast<Eigen::Index>(i)] = alpha[static_cast<std::size_t>(map.assignments[i])];
  return out;
}

inline double rel_change(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-300);
}

}  // namespace detail

inline VariogramConfig backfit_variogram_config(VariogramDirection dir, std::size_t n,
                                                std::uint64_t seed) {
  VariogramConfig cfg;
  cfg.direction = dir;
  cfg.subsample_size = std::min<std::size_t>(n, 4500);
  cfg.seed = seed;
  return cfg;
}

inline BackfitResult run_backfit(const Dataset& ds_x, const Dataset& ds_y,
                                 const BackfitSpec& spec, unsigned n_threads = 1) {
  validate(spec);
  validate(ds_x);
  validate(ds_y);
  const MappingOperator map_x = build_mapping(ds_x, spec.lattice);
  const MappingOperator map_y = build_mapping(ds_y, spec.lattice);

  BackfitResult out;
  out.spec = spec;

  // First pass: plain OLS trends and, from their residuals, the directional
  // semivariogram fits that fix theta and sigma2 (this is the standalone
  // per-dataset pipeline).
  auto [trend_x, res_x] = fit_polynomial(ds_x, spec.poly_degree);
  auto [trend_y, res_y] = fit_polynomial(ds_y, spec.poly_degree);

  const VariogramConfig cfg_x =
      backfit_variogram_config(VariogramDirection::XDirectional, ds_x.n(), spec.seed);
  out.semivar_x = empirical_semivariogram(ds_x, res_x.values, cfg_x, n_threads);
  const FitResult fit_x = fit_cressie_wls(out.semivar_x);
  out.sigma2_x = fit_x.params.nugget;
  out.theta_x = {0.0, fit_x.params.psill, fit_x.params.range};

  const Eigen::VectorXd zx = detail::to_eigen(stiffness_values(ds_x));
  const Eigen::VectorXd zy = detail::to_eigen(stiffness_values(ds_y));
  const detail::TrendWorkspace ws_x(ds_x, trend_x.scaling, spec.poly_degree);
  const detail::TrendWorkspace ws_y(ds_y, trend_y.scaling, spec.poly_degree);

  const AlphaSmoother smoother_x(map_x, spec.lattice, out.theta_x, spec.rho, out.sigma2_x);
  Eigen::VectorXd beta_x = trend_x.coef;
  std::vector<double> alpha_x = smoother_x.apply(res_x.values, map_x);

  // The y-process range is fitted along physical y, which the anisotropy
  // transform stretches by rho; the smoother sees the transformed scale.
  Eigen::VectorXd beta_y = trend_y.coef;
  Eigen::VectorXd ry = zy - ws_y.X * beta_y - spec.c * detail::gather(alpha_x, map_y);
  std::vector<double> ry_std = detail::to_std(ry);
  const VariogramConfig cfg_y =
      backfit_variogram_config(VariogramDirection::YDirectional, ds_y.n(), spec.seed);
  out.semivar_y = empirical_semivariogram(ds_y, ry_std, cfg_y, n_threads);
  const FitResult fit_y = fit_cressie_wls(out.semivar_y);
  out.sigma2_y = fit_y.params.nugget;
  out.theta_y = {0.0, fit_y.params.psill, fit_y.params.range};

  const SphericalParams theta_y_transformed{0.0, out.theta_y.psill,
                                            spec.rho * out.theta_y.range};
  const AlphaSmoother smoother_y(map_y, spec.lattice, theta_y_transformed, spec.rho,
                                 out.sigma2_y);
  std::vector<double> alpha_y = smoother_y.apply(ry_std, map_y);

  auto combined_rss = [&] {
    const Eigen::VectorXd ex = zx - ws_x.X * beta_x - detail::gather(alpha_x, map_x);
    const Eigen::VectorXd ey =
        zy - ws_y.X * beta_y - spec.c * detail::gather(alpha_x, map_y) -
        detail::gather(alpha_y, map_y);
    return ex.squaredNorm() + ey.squaredNorm();
  };
  out.rss_history.push_back(combined_rss());
  out.n_outer_iters = 1;

  // Later passes: Gauss-Seidel refreshes of beta and alpha with the
  // covariance parameters held at their first-pass estimates.
  for (int t = 1; t < spec.max_outer_iters; ++t) {
    const std::vector<double> alpha_x_prev = alpha_x;
    const std::vector<double> alpha_y_prev = alpha_y;
    const std::vector<double> beta_x_prev = detail::to_std(beta_x);
    const std::vector<double> beta_y_prev = detail::to_std(beta_y);

    beta_x = ws_x.solve(zx - detail::gather(alpha_x, map_x));
    Eigen::VectorXd rx = zx - ws_x.X * beta_x;
    const std::vector<double> rx_std = detail::to_std(rx);
    alpha_x = smoother_x.apply(rx_std, map_x);

    beta_y = ws_y.solve(zy - spec.c * detail::gather(alpha_x, map_y) -
                        detail::gather(alpha_y, map_y));
    ry = zy - ws_y.X * beta_y - spec.c * detail::gather(alpha_x, map_y);
    ry_std = detail::to_std(ry);
    alpha_y = smoother_y.apply(ry_std, map_y);

    out.rss_history.push_back(combined_rss());
    out.n_outer_iters = t + 1;

    const double delta = std::max(
        std::max(detail::rel_change(detail::to_std(beta_x), beta_x_prev),
                 detail::rel_change(detail::to_std(beta_y), beta_y_prev)),
        std::max(detail::rel_change(alpha_x, alpha_x_prev),
                 detail::rel_change(alpha_y, alpha_y_prev)));
    if (delta < spec.tol) {
      out.converged = true;
      break;
    }
  }

  out.beta_x = detail::to_std(beta_x);
  out.beta_y = detail::to_std(beta_y);
  out.alpha_x = alpha_x;
  out.alpha_y = alpha_y;
  {
    const Eigen::VectorXd ex = zx - ws_x.X * beta_x - detail::gather(alpha_x, map_x);
    const Eigen::VectorXd ey = zy - ws_y.X * beta_y -
                               spec.c * detail::gather(alpha_x, map_y) -
                               detail::gather(alpha_y, map_y);
    const std::vector<double> ex_std = detail::to_std(ex);
    const std::vector<double> ey_std = detail::to_std(ey);
    out.resid_var_x = update_sigma2(ex_std);
    out.resid_var_y = update_sigma2(ey_std);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json to_json(const BackfitResult& r) {
  nlohmann::json j;
  j["beta_x"] = r.beta_x;
  j["beta_y"] = r.beta_y;
  j["theta_x"] = {{"psill", r.theta_x.psill}, {"range", r.theta_x.range}};
  j["theta_y"] = {{"psill", r.theta_y.psill}, {"range", r.theta_y.range}};
  j["sigma2_x"] = r.sigma2_x;
  j["sigma2_y"] = r.sigma2_y;
  j["c"] = r.spec.c;
  j["rho"] = r.spec.rho;
  j["lattice"] = to_json(r.spec.lattice);
  j["converged"] = r.converged;
  j["n_outer_iters"] = r.n_outer_iters;
  return j;
}

inline void write_alpha_csv(const BackfitResult& r, const std::string& path) {
  auto os = csv::open_output(path);
  os << "node_x,node_y,alpha_x,alpha_y\n";
  const Lattice& lat = r.spec.lattice;
  for (int f = 0; f < lat.node_count(); ++f) {
    const Point p = lat.node_at(f);
    os << csv::format_double(p.x) << ',' << csv::format_double(p.y) << ','
       << csv::format_double(r.alpha_x[static_cast<std::size_t>(f)]) << ','
       << csv::format_double(r.alpha_y[static_cast<std::size_t>(f)]) << '\n';
  }
}

}  // namespace rollgeo

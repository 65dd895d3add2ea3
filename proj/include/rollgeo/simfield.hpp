// Gaussian random field simulation, semivariogram confidence bands, and the
// synthetic roller test-bed generator used as ground-truth oracle.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <map>
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
#include "rollgeo/parallel.hpp"
#include "rollgeo/rng.hpp"
#include "rollgeo/variogram.hpp"
#include "rollgeo/varmodel.hpp"

namespace rollgeo {

/// Polynomial mean surface in raw coordinates; exponent order matches
/// monomial_exponents(degree).
struct TrendPoly {
  int degree = 1;
  std::vector<double> coef;

  double eval(Point p) const {
    const auto expo = monomial_exponents(degree);
    if (coef.size() != expo.size())
      throw std::invalid_argument("trend coefficient count does not match degree");
    double v = 0.0;
    for (std::size_t c = 0; c < expo.size(); ++c)
      v += coef[c] * std::pow(p.x, expo[c].first) * std::pow(p.y, expo[c].second);
    return v;
  }
};

struct FieldSpec {
  SphericalParams params;
  AnisotropyTransform anisotropy;
  std::optional<TrendPoly> mean_fn;
  double noise_sd_x = 0.0;
  double noise_sd_y = 0.0;
};

inline void validate(const FieldSpec& f) {
  validate(f.params);
  validate(f.anisotropy);
  if (!(f.noise_sd_x >= 0.0) || !(f.noise_sd_y >= 0.0))
    throw std::invalid_argument("field noise sds must be >= 0");
}

struct SimDiagnostics {
  double jitter = 0.0;
  int jitter_rounds = 0;
};

constexpr std::size_t kMaxGrfPoints = 5000;

/// One realization of the zero-mean field with covariance
/// spherical_cov(||A(s_i - s_j)||) + nugget on the diagonal, plus the mean
/// surface if present. Dense Cholesky with a bounded jitter ladder: on
/// failure, 1e-10 * trace/n is added to the diagonal and doubled up to
/// 8 times before giving up.
inline std::vector<double> simulate_grf(std::span<const Point> points, const FieldSpec& spec,
                                        std::uint64_t seed, SimDiagnostics* diag = nullptr) {
  validate(spec);
  const std::size_t n = points.size();
  if (n == 0) throw std::invalid_argument("simulate_grf: no points");
  if (n > kMaxGrfPoints)
    throw std::invalid_argument("simulate_grf: n = " + std::to_string(n) + " exceeds the " +
                                std::to_string(kMaxGrfPoints) + "-point dense-factorization guard");
  for (const Point& p : points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw std::invalid_argument("simulate_grf: non-finite coordinate");

  std::vector<double> out(n, 0.0);
  if (spec.params.psill == 0.0 && spec.params.nugget == 0.0) {
    if (spec.mean_fn)
      for (std::size_t i = 0; i < n; ++i) out[i] = spec.mean_fn->eval(points[i]);
    return out;
  }

  const std::vector<Point> tp = apply_anisotropy(points, spec.anisotropy);
  Eigen::MatrixXd sigma(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double dx = tp[j].x - tp[i].x;
      const double dy = tp[j].y - tp[i].y;
      const double h = std::sqrt(dx * dx + dy * dy);
      double c = spherical_cov(h, spec.params);
      if (i == j) c += spec.params.nugget;
      sigma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c;
      sigma(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = c;
    }
  }

  const double base_jitter = 1e-10 * sigma.trace() / static_cast<double>(n);
  double jitter = 0.0;
  int rounds = 0;
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  while (llt.info() != Eigen::Success) {
    if (rounds > 8 || !(base_jitter > 0.0))
      throw std::runtime_error("simulate_grf: covariance factorization failed after maximum jitter");
    const double add = rounds == 0 ? base_jitter : jitter;  // doubles the total each round
    sigma.diagonal().array() += add;
    jitter += add;
    ++rounds;
    llt.compute(sigma);
  }
  if (diag) {
    diag->jitter = jitter;
    diag->jitter_rounds = rounds;
  }

  Rng rng(seed);
  Eigen::VectorXd z(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) z[static_cast<Eigen::Index>(i)] = rng.normal();
  const Eigen::VectorXd v = llt.matrixL() * z;
  for (std::size_t i = 0; i < n; ++i) out[i] = v[static_cast<Eigen::Index>(i)];
  if (spec.mean_fn)
    for (std::size_t i = 0; i < n; ++i) out[i] += spec.mean_fn->eval(points[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise semivariogram confidence bands over simulated replicates.

struct BandRow {
  double lag = 0.0;
  double mean_gamma = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct ConfidenceBand {
  double level = 0.95;
  std::size_t n_replicates = 0;
  std::vector<BandRow> rows;
};

namespace detail {

/// Acklam's rational approximation to the standard normal quantile
/// (relative error below 1.15e-9 over (0, 1)).
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0) || !(p < 1.0))
    throw std::invalid_argument("inverse_normal_cdf: p must be in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - plow) {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace detail

/// Simulate n_reps fields at the given points, estimate each replicate's
/// semivariogram, and return mean +- z(level)*sd bands, one per level.
/// Replicate i draws from the stream derive_seed(seed, i); bins that are not
/// populated in every replicate are dropped with a warning on stderr.
inline std::vector<ConfidenceBand> semivariogram_band(std::span<const Point> points,
                                                      const FieldSpec& spec,
                                                      const VariogramConfig& cfg,
                                                      std::size_t n_reps,
                                                      std::span<const double> levels,
                                                      std::uint64_t seed,
                                                      unsigned n_threads = 1) {
  if (n_reps < 2) throw std::invalid_argument("semivariogram_band: need n_reps >= 2");
  if (levels.empty()) throw std::invalid_argument("semivariogram_band: no levels given");
  for (double lv : levels)
    if (!(lv > 0.0) || !(lv < 1.0))
      throw std::invalid_argument("semivariogram_band: levels must lie in (0, 1)");

  std::vector<EmpiricalSemivariogram> reps(n_reps);
  parallel_for(n_reps, n_threads, [&](std::size_t i) {
    const std::vector<double> vals = simulate_grf(points, spec, derive_seed(seed, i));
    reps[i] = empirical_semivariogram(points, vals, cfg);
  });

  const std::size_t n_bins = reps[0].bins.size();
  std::vector<ConfidenceBand> bands;
  for (double lv : levels) {
    ConfidenceBand band;
    band.level = lv;
    band.n_replicates = n_reps;
    const double z = detail::inverse_normal_cdf(0.5 * (1.0 + lv));
    for (std::size_t b = 0; b < n_bins; ++b) {
      bool complete = true;
      for (const auto& rep : reps)
        if (!rep.bins[b].gamma_hat) {
          complete = false;
          break;
        }
      if (!complete) {
        if (lv == levels[0])
          std::cerr << "semivariogram_band: dropping lag " << reps[0].bins[b].lag_center
                    << " (empty in some replicate)\n";
        continue;
      }
      double mean = 0.0;
      for (const auto& rep : reps) mean += *rep.bins[b].gamma_hat;
      mean /= static_cast<double>(n_reps);
      double ss = 0.0;
      for (const auto& rep : reps) {
        const double d = *rep.bins[b].gamma_hat - mean;
        ss += d * d;
      }
      const double sd = std::sqrt(ss / static_cast<double>(n_reps - 1));
      band.rows.push_back({reps[0].bins[b].lag_center, mean, mean - z * sd, mean + z * sd});
    }
    bands.push_back(std::move(band));
  }
  return bands;
}

inline void write_bands_csv(std::span<const ConfidenceBand> bands, const std::string& path) {
  auto os = csv::open_output(path);
  os << "lag,mean,lower,upper,level\n";
  for (const ConfidenceBand& band : bands)
    for (const BandRow& r : band.rows)
      os << csv::format_double(r.lag) << ',' << csv::format_double(r.mean_gamma) << ','
         << csv::format_double(r.lower) << ',' << csv::format_double(r.upper) << ','
         << csv::format_double(band.level) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic roller test bed: snaking x-driving lanes, bottom-to-top
// y-driving lanes, one shared latent field, per-lane transverse error.

struct TestBedSpec {
  double lane_width = 2.0;
  double sample_spacing_along = 0.1;
  double x_min = 0.0;
  double x_max = 20.0;
  double y_min = 0.0;
  double y_max = 16.0;
  double lane_error_sd = 0.0;
  std::uint64_t seed = 0;
};

inline void validate(const TestBedSpec& s) {
  if (!(s.lane_width > 0.0) || !(s.sample_spacing_along > 0.0))
    throw std::invalid_argument("testbed: lane_width and sample_spacing_along must be > 0");
  if (!(s.x_min < s.x_max) || !(s.y_min < s.y_max))
    throw std::invalid_argument("testbed: degenerate site bounds");
  if (!(s.lane_error_sd >= 0.0))
    throw std::invalid_argument("testbed: lane_error_sd must be >= 0");
  const double eps = 1e-9;
  if (std::floor((s.y_max - s.y_min) / s.lane_width + eps) < 1.0 ||
      std::floor((s.x_max - s.x_min) / s.lane_width + eps) < 1.0)
    throw std::invalid_argument("testbed: site too small for one lane in each direction");
}

struct TestBedTruth {
  FieldSpec field;
  TestBedSpec spec;
  std::vector<Point> union_pts;
  std::vector<double> z;
  /// Record index -> index into union_pts/z, per dataset.
  std::vector<std::size_t> union_index_x;
  std::vector<std::size_t> union_index_y;
  /// Scaled per-lane errors (lane k at index k-1).
  std::vector<double> lane_errors_x;
  std::vector<double> lane_errors_y;
};

struct TestBed {
  Dataset x_driving;
  Dataset y_driving;
  TestBedTruth truth;
};

namespace detail {

/// Deduplicating registry for sampling locations. The same physical spot can
/// be computed through different arithmetic (along-lane step vs. lane
/// center), so keys snap to a half-spacing cell grid.
struct LocationRegistry {
  double cell;
  std::map<std::pair<long long, long long>, std::size_t> index;
  std::vector<Point> pts;

  explicit LocationRegistry(double cell_size) : cell(cell_size) {}

  std::size_t insert(Point p) {
    const std::pair<long long, long long> key{std::llround(p.x / cell), std::llround(p.y / cell)};
    auto [it, fresh] = index.try_emplace(key, pts.size());
    if (fresh) pts.push_back(p);
    return it->second;
  }
};

}  // namespace detail

/// Generate the paired test bed. RNG streams, all derived from spec.seed:
/// 0 latent field, 1 x sensor noise, 2 y sensor noise, 3 x lane errors,
/// 4 y lane errors. Record coordinates are the canonical (first-seen)
/// representative of each physical location, so shared spots carry
/// byte-identical coordinates and latent values in both datasets.
inline TestBed generate_testbed(const TestBedSpec& spec, const FieldSpec& field) {
  validate(spec);
  validate(field);
  const double eps = 1e-9;
  const double w = spec.lane_width;
  const double s = spec.sample_spacing_along;
  const int lanes_x = static_cast<int>(std::floor((spec.y_max - spec.y_min) / w + eps));
  const int lanes_y = static_cast<int>(std::floor((spec.x_max - spec.x_min) / w + eps));
  const int steps_x = static_cast<int>(std::floor((spec.x_max - spec.x_min) / s + eps));
  const int steps_y = static_cast<int>(std::floor((spec.y_max - spec.y_min) / s + eps));

  detail::LocationRegistry registry(0.5 * std::min(w, s));
  TestBed tb;
  tb.truth.field = field;
  tb.truth.spec = spec;

  // x-driving lanes snake: even lanes left-to-right, odd lanes right-to-left.
  std::vector<int> lane_of_x;
  for (int k = 0; k < lanes_x; ++k) {
    const double yc = spec.y_min + (static_cast<double>(k) + 0.5) * w;
    for (int m = 0; m <= steps_x; ++m) {
      const int step = k % 2 == 0 ? m : steps_x - m;
      const double x = spec.x_min + static_cast<double>(step) * s;
      tb.truth.union_index_x.push_back(registry.insert({x, yc}));
      lane_of_x.push_back(k);
    }
  }
  // y-driving lanes all run bottom-to-top.
  std::vector<int> lane_of_y;
  for (int k = 0; k < lanes_y; ++k) {
    const double xc = spec.x_min + (static_cast<double>(k) + 0.5) * w;
    for (int m = 0; m <= steps_y; ++m) {
      const double y = spec.y_min + static_cast<double>(m) * s;
      tb.truth.union_index_y.push_back(registry.insert({xc, y}));
      lane_of_y.push_back(k);
    }
  }

  tb.truth.union_pts = registry.pts;
  FieldSpec latent = field;
  latent.mean_fn.reset();
  tb.truth.z = simulate_grf(tb.truth.union_pts, latent, derive_seed(spec.seed, 0));

  Rng rng_noise_x(derive_seed(spec.seed, 1));
  Rng rng_noise_y(derive_seed(spec.seed, 2));
  Rng rng_lane_x(derive_seed(spec.seed, 3));
  Rng rng_lane_y(derive_seed(spec.seed, 4));
  tb.truth.lane_errors_x.resize(static_cast<std::size_t>(lanes_x));
  for (double& e : tb.truth.lane_errors_x) e = spec.lane_error_sd * rng_lane_x.normal();
  tb.truth.lane_errors_y.resize(static_cast<std::size_t>(lanes_y));
  for (double& e : tb.truth.lane_errors_y) e = spec.lane_error_sd * rng_lane_y.normal();

  tb.x_driving.driving_direction = DrivingDirection::XDriving;
  for (std::size_t i = 0; i < tb.truth.union_index_x.size(); ++i) {
    const Point p = tb.truth.union_pts[tb.truth.union_index_x[i]];
    double v = tb.truth.z[tb.truth.union_index_x[i]];
    if (field.mean_fn) v += field.mean_fn->eval(p);
    v += field.noise_sd_x * rng_noise_x.normal();
    v += tb.truth.lane_errors_x[static_cast<std::size_t>(lane_of_x[i])];
    tb.x_driving.records.push_back({p.x, p.y, v, lane_of_x[i] + 1});
  }
  tb.y_driving.driving_direction = DrivingDirection::YDriving;
  for (std::size_t i = 0; i < tb.truth.union_index_y.size(); ++i) {
    const Point p = tb.truth.union_pts[tb.truth.union_index_y[i]];
    double v = tb.truth.z[tb.truth.union_index_y[i]];
    if (field.mean_fn) v += field.mean_fn->eval(p);
    v += field.noise_sd_y * rng_noise_y.normal();
    v += tb.truth.lane_errors_y[static_cast<std::size_t>(lane_of_y[i])];
    tb.y_driving.records.push_back({p.x, p.y, v, lane_of_y[i] + 1});
  }
  return tb;
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json to_json(const FieldSpec& f) {
  nlohmann::json j;
  j["nugget"] = f.params.nugget;
  j["psill"] = f.params.psill;
  j["range"] = f.params.range;
  j["rho"] = f.anisotropy.rho;
  j["noise_sd_x"] = f.noise_sd_x;
  j["noise_sd_y"] = f.noise_sd_y;
  if (f.mean_fn) {
    j["trend_degree"] = f.mean_fn->degree;
    j["trend_coef"] = f.mean_fn->coef;
  } else {
    j["trend_degree"] = nullptr;
    j["trend_coef"] = nullptr;
  }
  return j;
}

inline nlohmann::json to_json(const TestBedTruth& t) {
  nlohmann::json j;
  j["field"] = to_json(t.field);
  j["seed"] = t.spec.seed;
  j["lane_width"] = t.spec.lane_width;
  j["sample_spacing_along"] = t.spec.sample_spacing_along;
  j["x_min"] = t.spec.x_min;
  j["x_max"] = t.spec.x_max;
  j["y_min"] = t.spec.y_min;
  j["y_max"] = t.spec.y_max;
  j["lane_error_sd"] = t.spec.lane_error_sd;
  j["lane_errors_x"] = t.lane_errors_x;
  j["lane_errors_y"] = t.lane_errors_y;
  std::vector<double> ux, uy;
  ux.reserve(t.union_pts.size());
  uy.reserve(t.union_pts.size());
  for (const Point& p : t.union_pts) {
    ux.push_back(p.x);
    uy.push_back(p.y);
  }
  j["union_x"] = ux;
  j["union_y"] = uy;
  j["latent_z"] = t.z;
  return j;
}

}  // namespace rollgeo

// Trend removal: global polynomial regression and 2-D robust loess.
// Residuals estimate the spatial process plus measurement error once the
// large-scale mean surface is subtracted.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rollgeo/geodata.hpp"
#include "rollgeo/parallel.hpp"

namespace rollgeo {

struct Residuals {
  std::vector<double> values;
  const Dataset* parent = nullptr;
};

// ---------------------------------------------------------------------------
// Polynomial trend.

/// Monomial exponents in graded lexicographic order: ascending total degree,
/// x-power descending within each degree.
inline std::vector<std::pair<int, int>> monomial_exponents(int degree) {
  std::vector<std::pair<int, int>> out;
  for (int t = 0; t <= degree; ++t)
    for (int a = t; a >= 0; --a) out.push_back({a, t - a});
  return out;
}

inline std::string monomial_name(int a, int b) {
  if (a == 0 && b == 0) return "1";
  std::string s;
  if (a > 0) s += a == 1 ? "x" : "x^" + std::to_string(a);
  if (a > 0 && b > 0) s += "*";
  if (b > 0) s += b == 1 ? "y" : "y^" + std::to_string(b);
  return s;
}

/// Design matrix with all monomials x^a y^b, a + b <= degree;
/// (degree+1)(degree+2)/2 columns.
inline Eigen::MatrixXd polynomial_design(std::span<const Point> coords, int degree) {
  if (degree < 1) throw std::invalid_argument("polynomial_design: degree must be >= 1");
  const auto expo = monomial_exponents(degree);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(coords.size()),
                    static_cast<Eigen::Index>(expo.size()));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const int maxp = degree;
    std::vector<double> xp(static_cast<std::size_t>(maxp) + 1, 1.0);
    std::vector<double> yp(static_cast<std::size_t>(maxp) + 1, 1.0);
    for (int k = 1; k <= maxp; ++k) {
      xp[static_cast<std::size_t>(k)] = xp[static_cast<std::size_t>(k) - 1] * coords[i].x;
      yp[static_cast<std::size_t>(k)] = yp[static_cast<std::size_t>(k) - 1] * coords[i].y;
    }
    for (std::size_t c = 0; c < expo.size(); ++c)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          xp[static_cast<std::size_t>(expo[c].first)] * yp[static_cast<std::size_t>(expo[c].second)];
  }
  return X;
}

struct PolynomialTrend {
  int degree = 1;
  CenterScale scaling;
  Eigen::VectorXd coef;

  double predict(Point p) const {
    const Point z = scaling.apply(p);
    const auto expo = monomial_exponents(degree);
    double v = 0.0;
    for (std::size_t c = 0; c < expo.size(); ++c)
      v += coef[static_cast<Eigen::Index>(c)] *
           std::pow(z.x, expo[c].first) * std::pow(z.y, expo[c].second);
    return v;
  }
};

inline std::pair<PolynomialTrend, Residuals> fit_polynomial(const Dataset& ds, int degree) {
  if (degree < 1) throw std::invalid_argument("fit_polynomial: degree must be >= 1");
  validate(ds);
  const auto [scaled, cs] = center_scale(ds);
  const Eigen::MatrixXd X = polynomial_design(scaled, degree);
  const Eigen::Index n = X.rows(), p = X.cols();
  if (n <= p)
    throw std::invalid_argument("fit_polynomial: need more than " + std::to_string(p) +
                                " records for degree " + std::to_string(degree));
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = ds.records[static_cast<std::size_t>(i)].ks;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < p) {
    const auto perm = qr.colsPermutation().indices();
    const auto expo = monomial_exponents(degree);
    std::string cols;
    for (Eigen::Index k = qr.rank(); k < p; ++k) {
      if (!cols.empty()) cols += ", ";
      const auto& e = expo[static_cast<std::size_t>(perm[k])];
      cols += monomial_name(e.first, e.second);
    }
    throw std::runtime_error("fit_polynomial: design matrix is rank deficient; collinear columns: " +
                             cols);
  }

  PolynomialTrend trend;
  trend.degree = degree;
  trend.scaling = cs;
  trend.coef = qr.solve(y);

  Residuals res;
  res.parent = &ds;
  const Eigen::VectorXd r = y - X * trend.coef;
  res.values.assign(r.data(), r.data() + n);
  return {std::move(trend), std::move(res)};
}

// ---------------------------------------------------------------------------
// Loess: local polynomial regression with tricube distance weights and
// Cleveland bisquare robustness iterations. Distances are taken in the
// center-scaled coordinates.

struct LoessTrend {
  double span = 0.5;
  int degree = 2;
  int robust_iters = 2;
  CenterScale scaling;
  std::vector<Point> scaled_pts;
  std::vector<double> values;
  /// Final robustness weights at the training points (all 1 when robust_iters = 0).
  std::vector<double> robustness;

  double predict(Point p) const;
};

namespace detail {

inline double tricube(double u) {
  if (u >= 1.0) return 0.0;
  const double t = 1.0 - u * u * u;
  return t * t * t;
}

inline std::size_t loess_local_cols(int degree) { return degree == 1 ? 3u : 6u; }

/// One local weighted fit, centered at the evaluation point so the intercept
/// is the prediction. `where` is the evaluation location in data units, used
/// only for error messages.
inline double loess_eval(const std::vector<Point>& pts, const std::vector<double>& vals,
                         const std::vector<double>& robustness, Point z, std::size_t q,
                         int degree, Point where) {
  const std::size_t n = pts.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = pts[i].x - z.x;
    const double dy = pts[i].y - z.y;
    d[i] = std::sqrt(dx * dx + dy * dy);
  }
  std::vector<double> dc(d);
  std::nth_element(dc.begin(), dc.begin() + static_cast<std::ptrdiff_t>(q - 1), dc.end());
  const double dmax = dc[q - 1];

  const std::size_t p = loess_local_cols(degree);
  Eigen::MatrixXd A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Eigen::VectorXd b(static_cast<Eigen::Index>(n));
  Eigen::Index m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double w;
    if (dmax == 0.0) {
      w = d[i] == 0.0 ? robustness[i] : 0.0;
    } else {
      const double u = std::min(d[i] / dmax, 1.0);
      w = tricube(u) * robustness[i];
    }
    if (w <= 0.0) continue;
    const double sw = std::sqrt(w);
    const double cx = pts[i].x - z.x;
    const double cy = pts[i].y - z.y;
    A(m, 0) = sw;
    A(m, 1) = sw * cx;
    A(m, 2) = sw * cy;
    if (degree == 2) {
      A(m, 3) = sw * cx * cx;
      A(m, 4) = sw * cx * cy;
      A(m, 5) = sw * cy * cy;
    }
    b[m] = sw * vals[i];
    ++m;
  }
  if (static_cast<std::size_t>(m) < p)
    throw std::runtime_error("loess: singular neighborhood at (" + csv::format_double(where.x) +
                             ", " + csv::format_double(where.y) + ")");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A.topRows(m));
  if (qr.rank() < static_cast<Eigen::Index>(p))
    throw std::runtime_error("loess: singular neighborhood at (" + csv::format_double(where.x) +
                             ", " + csv::format_double(where.y) + ")");
  const Eigen::VectorXd beta = qr.solve(b.head(m));
  return beta[0];
}

inline double median_abs(std::vector<double> v) {
  for (double& x : v) x = std::abs(x);
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double med = v[mid];
  if (n % 2 == 0) {
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (lo + med);
  }
  return med;
}

}  // namespace detail

inline double LoessTrend::predict(Point p) const {
  const Point z = scaling.apply(p);
  const std::size_t q = static_cast<std::size_t>(
      std::ceil(span * static_cast<double>(scaled_pts.size())));
  return detail::loess_eval(scaled_pts, values, robustness, z, q, degree, p);
}

inline std::pair<LoessTrend, Residuals> fit_loess(const Dataset& ds, double span = 0.5,
                                                  int degree = 2, int robust_iters = 2,
                                                  unsigned n_threads = 1) {
  if (!(span > 0.0) || !(span <= 1.0))
    throw std::invalid_argument("fit_loess: span out of range (0, 1]");
  if (degree != 1 && degree != 2)
    throw std::invalid_argument("fit_loess: local degree must be 1 or 2");
  if (robust_iters < 0) throw std::invalid_argument("fit_loess: robust_iters must be >= 0");
  validate(ds);
  const std::size_t n = ds.n();
  if (n < 10) throw std::invalid_argument("fit_loess: need at least 10 records");
  const std::size_t q =
      static_cast<std::size_t>(std::ceil(span * static_cast<double>(n)));
  if (q < detail::loess_local_cols(degree))
    throw std::invalid_argument("fit_loess: span*n smaller than the local parameter count");

  LoessTrend trend;
  trend.span = span;
  trend.degree = degree;
  trend.robust_iters = robust_iters;
  auto [scaled, cs] = center_scale(ds);
  trend.scaling = cs;
  trend.scaled_pts = std::move(scaled);
  trend.values = stiffness_values(ds);
  trend.robustness.assign(n, 1.0);

  std::vector<double> fitted(n, 0.0);
  auto fit_pass = [&] {
    parallel_for(n, n_threads, [&](std::size_t i) {
      fitted[i] = detail::loess_eval(trend.scaled_pts, trend.values, trend.robustness,
                                     trend.scaled_pts[i], q, degree,
                                     {ds.records[i].x, ds.records[i].y});
    });
  };

  fit_pass();
  for (int it = 0; it < robust_iters; ++it) {
    std::vector<double> resid(n);
    for (std::size_t i = 0; i < n; ++i) resid[i] = trend.values[i] - fitted[i];
    const double s = detail::median_abs(resid);
    if (s == 0.0) break;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = resid[i] / (6.0 * s);
      const double t = 1.0 - u * u;
      trend.robustness[i] = t > 0.0 ? t * t : 0.0;
    }
    fit_pass();
  }

  Residuals res;
  res.parent = &ds;
  res.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.values[i] = trend.values[i] - fitted[i];
  return {std::move(trend), std::move(res)};
}

// ---------------------------------------------------------------------------
// Unified trend surface.

using TrendModel = std::variant<PolynomialTrend, LoessTrend>;

inline double trend_predict(const TrendModel& m, Point p) {
  return std::visit([&](const auto& t) { return t.predict(p); }, m);
}

inline nlohmann::json to_json(const TrendModel& m) {
  nlohmann::json j;
  if (const auto* poly = std::get_if<PolynomialTrend>(&m)) {
    j["kind"] = "polynomial";
    j["degree"] = poly->degree;
    std::vector<double> c(poly->coef.data(), poly->coef.data() + poly->coef.size());
    j["coefficients"] = c;
    j["scaling"] = to_json(poly->scaling);
  } else {
    const auto& lo = std::get<LoessTrend>(m);
    j["kind"] = "loess";
    j["span"] = lo.span;
    j["degree"] = lo.degree;
    j["robust_iters"] = lo.robust_iters;
    j["scaling"] = to_json(lo.scaling);
  }
  return j;
}

inline void write_residuals_csv(const Dataset& ds, const Residuals& res,
                                const std::string& path) {
  if (res.values.size() != ds.n())
    throw std::invalid_argument("residuals length does not match dataset");
  auto os = csv::open_output(path);
  os << "x,y,residual,lane\n";
  for (std::size_t i = 0; i < ds.n(); ++i)
    os << csv::format_double(ds.records[i].x) << ',' << csv::format_double(ds.records[i].y) << ','
       << csv::format_double(res.values[i]) << ',' << ds.records[i].lane << '\n';
}

}  // namespace rollgeo

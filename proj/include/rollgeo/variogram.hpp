// Empirical (Matheron) semivariograms, omnidirectional and directional,
// with reproducible subsampling.
//
// Summation contract. For a given bin, squared differences are accumulated
// by Kahan-compensated summation over pairs taken in blocks of 256
// consecutive smaller indices i; inside a block pairs run in (i ascending,
// j ascending) order, and the per-block compensated sums are then combined,
// again with compensation, in block order. The contract fixes the result
// bit-for-bit: the grid-indexed production path, a brute-force all-pairs
// enumeration, and any worker count all produce identical bins.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rollgeo/csv.hpp"
#include "rollgeo/geodata.hpp"
#include "rollgeo/parallel.hpp"
#include "rollgeo/rng.hpp"

namespace rollgeo {

enum class VariogramDirection { Omni, XDirectional, YDirectional };

inline std::string to_string(VariogramDirection d) {
  switch (d) {
    case VariogramDirection::Omni: return "omni";
    case VariogramDirection::XDirectional: return "x";
    default: return "y";
  }
}

struct VariogramConfig {
  /// Largest separation considered. Unset: half the maximum pairwise distance.
  std::optional<double> max_lag;
  int n_bins = 20;
  VariogramDirection direction = VariogramDirection::Omni;
  /// Half-angle (degrees) around the axis for directional estimates.
  double angle_tol = 22.5;
  /// If set, work on a uniform without-replacement subsample of this size.
  std::optional<std::size_t> subsample_size;
  std::uint64_t seed = 0;
};

inline void validate(const VariogramConfig& cfg) {
  if (cfg.max_lag && !(*cfg.max_lag > 0.0))
    throw std::invalid_argument("variogram: max_lag must be > 0");
  if (cfg.n_bins < 2) throw std::invalid_argument("variogram: n_bins must be >= 2");
  if (!(cfg.angle_tol > 0.0) || !(cfg.angle_tol <= 90.0))
    throw std::invalid_argument("variogram: angle_tol must be in (0, 90]");
  if (cfg.subsample_size && *cfg.subsample_size == 0)
    throw std::invalid_argument("variogram: subsample_size must be positive");
}

struct VariogramBin {
  double lag_center = 0.0;
  /// Absent when the bin received no pairs.
  std::optional<double> gamma_hat;
  std::size_t n_pairs = 0;
};

struct EmpiricalSemivariogram {
  std::vector<VariogramBin> bins;
  VariogramDirection direction = VariogramDirection::Omni;
  /// Resolved lag cutoff (the default rule applied if the config left it unset).
  double max_lag = 0.0;
  VariogramConfig config;

  std::size_t n_nonempty() const {
    std::size_t k = 0;
    for (const auto& b : bins) k += b.n_pairs > 0 ? 1 : 0;
    return k;
  }
};

// ---------------------------------------------------------------------------
// Subsampling (uniform without replacement, original order preserved).

template <typename T>
std::vector<T> subsample(std::span<const T> items, std::size_t size, std::uint64_t seed) {
  if (size == 0 || size > items.size())
    throw std::invalid_argument("subsample: size must be in [1, n]");
  const std::vector<std::size_t> idx = sample_without_replacement(items.size(), size, seed);
  std::vector<T> out;
  out.reserve(size);
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

inline Dataset subsample(const Dataset& ds, std::size_t size, std::uint64_t seed) {
  Dataset out;
  out.driving_direction = ds.driving_direction;
  out.records = subsample(std::span<const RMVRecord>(ds.records), size, seed);
  return out;
}

// ---------------------------------------------------------------------------
// Default max_lag: half the diameter of the point set. The diameter's
// endpoints are convex hull vertices, so only hull vertex pairs are scanned.

namespace detail {

inline double cross(Point o, Point a, Point b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(), [](Point a, Point b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](Point a, Point b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  const std::size_t n = pts.size();
  if (n <= 2) return pts;
  std::vector<Point> hull(2 * n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = n - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline double max_pairwise_distance(std::span<const Point> pts) {
  const std::vector<Point> hull = convex_hull({pts.begin(), pts.end()});
  double best = 0.0;
  for (std::size_t i = 0; i < hull.size(); ++i)
    for (std::size_t j = i + 1; j < hull.size(); ++j) {
      const double dx = hull[j].x - hull[i].x;
      const double dy = hull[j].y - hull[i].y;
      best = std::max(best, dx * dx + dy * dy);
    }
  return std::sqrt(best);
}

}  // namespace detail

inline double default_max_lag(std::span<const Point> pts) {
  const double d = detail::max_pairwise_distance(pts);
  if (!(d > 0.0))
    throw std::runtime_error("variogram: all points coincide; specify max_lag explicitly");
  return 0.5 * d;
}

// ---------------------------------------------------------------------------
// Pair accumulation.

namespace detail {

struct Kahan {
  double sum = 0.0;
  double comp = 0.0;
  void add(double v) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

constexpr std::size_t kBlockSize = 256;

struct BinAccumulator {
  std::vector<Kahan> sums;
  std::vector<std::size_t> counts;
  explicit BinAccumulator(std::size_t n_bins) : sums(n_bins), counts(n_bins, 0) {}
};

/// Angle filter as a slope comparison; the boundary (angle exactly equal to
/// the tolerance) is accepted.
struct DirectionFilter {
  VariogramDirection direction;
  double tan_tol;
  bool accept_all;

  DirectionFilter(VariogramDirection d, double angle_tol_deg)
      : direction(d),
        tan_tol(std::tan(angle_tol_deg * std::acos(-1.0) / 180.0)),
        accept_all(d == VariogramDirection::Omni || angle_tol_deg >= 90.0) {}

  bool accepts(double dx, double dy) const {
    if (accept_all) return true;
    const double ax = std::abs(dx);
    const double ay = std::abs(dy);
    return direction == VariogramDirection::XDirectional ? ay <= tan_tol * ax
                                                         : ax <= tan_tol * ay;
  }
};

/// Shared per-pair step: distance cut, zero-distance cut, angle filter,
/// edge-to-lower-bin assignment via bin = ceil(h/w) - 1.
inline void accumulate_pair(std::span<const Point> pts, std::span<const double> vals,
                            std::size_t i, std::size_t j, double max_lag, double bin_width,
                            int n_bins, const DirectionFilter& filt, BinAccumulator& acc) {
  const double dx = pts[j].x - pts[i].x;
  const double dy = pts[j].y - pts[i].y;
  const double h = std::sqrt(dx * dx + dy * dy);
  if (h == 0.0 || h > max_lag) return;
  if (!filt.accepts(dx, dy)) return;
  int bin = static_cast<int>(std::ceil(h / bin_width)) - 1;
  bin = std::clamp(bin, 0, n_bins - 1);
  const double d = vals[j] - vals[i];
  acc.sums[static_cast<std::size_t>(bin)].add(d * d);
  ++acc.counts[static_cast<std::size_t>(bin)];
}

struct CellGrid {
  double x0, y0, cell;
  int ncx, ncy;
  std::vector<std::vector<std::uint32_t>> cells;

  CellGrid(std::span<const Point> pts, double cell_size) : cell(cell_size) {
    x0 = pts[0].x;
    y0 = pts[0].y;
    double x1 = x0, y1 = y0;
    for (const Point& p : pts) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
    ncx = std::max(1, static_cast<int>(std::floor((x1 - x0) / cell)) + 1);
    ncy = std::max(1, static_cast<int>(std::floor((y1 - y0) / cell)) + 1);
    cells.resize(static_cast<std::size_t>(ncx) * static_cast<std::size_t>(ncy));
    for (std::size_t k = 0; k < pts.size(); ++k)
      cells[cell_index(pts[k])].push_back(static_cast<std::uint32_t>(k));
  }

  std::size_t cell_index(Point p) const {
    const int cx = std::clamp(static_cast<int>(std::floor((p.x - x0) / cell)), 0, ncx - 1);
    const int cy = std::clamp(static_cast<int>(std::floor((p.y - y0) / cell)), 0, ncy - 1);
    return static_cast<std::size_t>(cy) * static_cast<std::size_t>(ncx) +
           static_cast<std::size_t>(cx);
  }

  /// Indices > i from the 3x3 cell neighborhood of point i, ascending.
  void neighbors_above(std::span<const Point> pts, std::size_t i,
                       std::vector<std::uint32_t>& out) const {
    out.clear();
    const Point p = pts[i];
    const int cx = std::clamp(static_cast<int>(std::floor((p.x - x0) / cell)), 0, ncx - 1);
    const int cy = std::clamp(static_cast<int>(std::floor((p.y - y0) / cell)), 0, ncy - 1);
    for (int dy = -1; dy <= 1; ++dy) {
      const int ny = cy + dy;
      if (ny < 0 || ny >= ncy) continue;
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = cx + dx;
        if (nx < 0 || nx >= ncx) continue;
        const auto& bucket =
            cells[static_cast<std::size_t>(ny) * static_cast<std::size_t>(ncx) +
                  static_cast<std::size_t>(nx)];
        for (std::uint32_t j : bucket)
          if (j > i) out.push_back(j);
      }
    }
    std::sort(out.begin(), out.end());
  }
};

}  // namespace detail

/// Matheron estimator over the configured bins. Deterministic for any
/// n_threads per the summation contract above.
inline EmpiricalSemivariogram empirical_semivariogram(std::span<const Point> points,
                                                      std::span<const double> values,
                                                      const VariogramConfig& cfg,
                                                      unsigned n_threads = 1) {
  validate(cfg);
  if (points.size() != values.size())
    throw std::invalid_argument("variogram: points and values lengths differ");
  if (points.size() < 2) throw std::invalid_argument("variogram: need at least 2 points");

  std::vector<Point> pts_store;
  std::vector<double> vals_store;
  if (cfg.subsample_size) {
    if (*cfg.subsample_size > points.size())
      throw std::invalid_argument("variogram: subsample_size exceeds n");
    const auto idx = sample_without_replacement(points.size(), *cfg.subsample_size, cfg.seed);
    pts_store.reserve(idx.size());
    vals_store.reserve(idx.size());
    for (std::size_t i : idx) {
      pts_store.push_back(points[i]);
      vals_store.push_back(values[i]);
    }
    points = pts_store;
    values = vals_store;
    if (points.size() < 2) throw std::invalid_argument("variogram: need at least 2 points");
  }

  const double max_lag = cfg.max_lag ? *cfg.max_lag : default_max_lag(points);
  const double bin_width = max_lag / static_cast<double>(cfg.n_bins);
  const detail::DirectionFilter filt(cfg.direction, cfg.angle_tol);
  const std::size_t n = points.size();
  const std::size_t n_blocks = (n + detail::kBlockSize - 1) / detail::kBlockSize;

  const detail::CellGrid grid(points, max_lag);
  std::vector<detail::BinAccumulator> block_acc(
      n_blocks, detail::BinAccumulator(static_cast<std::size_t>(cfg.n_bins)));
  parallel_for(n_blocks, n_threads, [&](std::size_t b) {
    std::vector<std::uint32_t> cand;
    const std::size_t i_end = std::min(n, (b + 1) * detail::kBlockSize);
    for (std::size_t i = b * detail::kBlockSize; i < i_end; ++i) {
      grid.neighbors_above(points, i, cand);
      for (std::uint32_t j : cand)
        detail::accumulate_pair(points, values, i, j, max_lag, bin_width, cfg.n_bins, filt,
                                block_acc[b]);
    }
  });

  EmpiricalSemivariogram out;
  out.direction = cfg.direction;
  out.max_lag = max_lag;
  out.config = cfg;
  out.bins.resize(static_cast<std::size_t>(cfg.n_bins));
  std::size_t total_pairs = 0;
  for (int b = 0; b < cfg.n_bins; ++b) {
    detail::Kahan merged;
    std::size_t count = 0;
    for (std::size_t k = 0; k < n_blocks; ++k) {
      merged.add(block_acc[k].sums[static_cast<std::size_t>(b)].sum);
      count += block_acc[k].counts[static_cast<std::size_t>(b)];
    }
    VariogramBin& bin = out.bins[static_cast<std::size_t>(b)];
    bin.lag_center = (static_cast<double>(b) + 0.5) * bin_width;
    bin.n_pairs = count;
    if (count > 0) bin.gamma_hat = merged.sum / (2.0 * static_cast<double>(count));
    total_pairs += count;
  }
  if (total_pairs == 0)
    throw std::runtime_error("variogram: every bin is empty; max_lag too small?");
  return out;
}

inline EmpiricalSemivariogram empirical_semivariogram(const Dataset& ds,
                                                      std::span<const double> values,
                                                      const VariogramConfig& cfg,
                                                      unsigned n_threads = 1) {
  const std::vector<Point> pts = coordinates(ds);
  return empirical_semivariogram(pts, values, cfg, n_threads);
}

// ---------------------------------------------------------------------------
// Interchange.

inline void write_semivariogram_csv(const EmpiricalSemivariogram& emp, const std::string& path) {
  auto os = csv::open_output(path);
  os << "lag,gamma,n_pairs,direction\n";
  const std::string dir = to_string(emp.direction);
  for (const VariogramBin& b : emp.bins) {
    os << csv::format_double(b.lag_center) << ',';
    if (b.gamma_hat) os << csv::format_double(*b.gamma_hat);
    os << ',' << b.n_pairs << ',' << dir << '\n';
  }
}

inline nlohmann::json to_json(const VariogramConfig& cfg, double resolved_max_lag) {
  nlohmann::json j;
  j["max_lag"] = resolved_max_lag;
  j["n_bins"] = cfg.n_bins;
  j["direction"] = to_string(cfg.direction);
  j["angle_tol"] = cfg.angle_tol;
  if (cfg.subsample_size)
    j["subsample_size"] = *cfg.subsample_size;
  else
    j["subsample_size"] = nullptr;
  j["seed"] = cfg.seed;
  return j;
}

}  // namespace rollgeo

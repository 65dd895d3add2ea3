// Core data model: roller observations, datasets per driving direction,
// coordinate centering/scaling, the geometric-anisotropy coordinate
// transform, and the regular lattice with its observation-to-node mapping.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rollgeo/csv.hpp"

namespace rollgeo {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

enum class DrivingDirection { XDriving, YDriving };

inline std::string to_string(DrivingDirection d) {
  return d == DrivingDirection::XDriving ? "x" : "y";
}

/// One roller observation: location, stiffness value, lane index.
struct RMVRecord {
  double x = 0.0;
  double y = 0.0;
  double ks = 0.0;
  int lane = 1;
};

struct Dataset {
  std::vector<RMVRecord> records;
  DrivingDirection driving_direction = DrivingDirection::XDriving;

  std::size_t n() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

inline void validate(const Dataset& ds) {
  if (ds.empty()) throw std::invalid_argument("dataset is empty");
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const RMVRecord& r = ds.records[i];
    if (!std::isfinite(r.x) || !std::isfinite(r.y) || !std::isfinite(r.ks))
      throw std::invalid_argument("dataset record " + std::to_string(i + 1) +
                                  " has a non-finite value");
    if (r.lane < 1)
      throw std::invalid_argument("dataset record " + std::to_string(i + 1) +
                                  " has lane < 1");
  }
}

inline std::vector<Point> coordinates(const Dataset& ds) {
  std::vector<Point> pts;
  pts.reserve(ds.n());
  for (const RMVRecord& r : ds.records) pts.push_back({r.x, r.y});
  return pts;
}

inline std::vector<double> stiffness_values(const Dataset& ds) {
  std::vector<double> v;
  v.reserve(ds.n());
  for (const RMVRecord& r : ds.records) v.push_back(r.ks);
  return v;
}

// ---------------------------------------------------------------------------
// CSV ingestion. Format: header "x,y,ks,lane", one record per line.

inline Dataset load_dataset(const std::string& path, DrivingDirection direction) {
  auto is = csv::open_input(path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": empty dataset");
  if (csv::strip_cr(line) != "x,y,ks,lane")
    throw std::runtime_error(path + ": expected header 'x,y,ks,lane', got '" + line + "'");

  Dataset ds;
  ds.driving_direction = direction;
  std::size_t row = 0;  // data-row counter, header excluded
  while (std::getline(is, line)) {
    ++row;
    const std::string_view sv = csv::strip_cr(line);
    if (sv.empty()) continue;
    const auto fields = csv::split_fields(sv);
    if (fields.size() != 4)
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": expected 4 fields, got " +
                               std::to_string(fields.size()));
    RMVRecord rec;
    long lane = 0;
    if (!csv::parse_double(fields[0], rec.x) || !csv::parse_double(fields[1], rec.y) ||
        !csv::parse_double(fields[2], rec.ks) || !csv::parse_long(fields[3], lane))
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": malformed value");
    if (!std::isfinite(rec.x) || !std::isfinite(rec.y) || !std::isfinite(rec.ks))
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": non-finite value");
    if (lane < 1)
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": lane must be >= 1");
    rec.lane = static_cast<int>(lane);
    ds.records.push_back(rec);
  }
  if (ds.records.empty()) throw std::runtime_error(path + ": empty dataset");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  auto os = csv::open_output(path);
  os << "x,y,ks,lane\n";
  for (const RMVRecord& r : ds.records)
    os << csv::format_double(r.x) << ',' << csv::format_double(r.y) << ','
       << csv::format_double(r.ks) << ',' << r.lane << '\n';
}

// ---------------------------------------------------------------------------
// Coordinate centering and scaling (per-axis standardization).

struct AxisScaling {
  double mean = 0.0;
  double sd = 1.0;
};

struct CenterScale {
  AxisScaling x;
  AxisScaling y;

  Point apply(Point p) const { return {(p.x - x.mean) / x.sd, (p.y - y.mean) / y.sd}; }
  Point invert(Point p) const { return {p.x * x.sd + x.mean, p.y * y.sd + y.mean}; }
};

namespace detail {
inline AxisScaling fit_axis(std::span<const double> v) {
  const std::size_t n = v.size();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  if (n < 2 || ss == 0.0)
    throw std::runtime_error("center_scale: axis has zero variance");
  return {mean, std::sqrt(ss / static_cast<double>(n - 1))};
}
}  // namespace detail

inline CenterScale fit_center_scale(std::span<const Point> pts) {
  if (pts.empty()) throw std::invalid_argument("center_scale: no points");
  std::vector<double> xs(pts.size()), ys(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    xs[i] = pts[i].x;
    ys[i] = pts[i].y;
  }
  return {detail::fit_axis(xs), detail::fit_axis(ys)};
}

/// Standardize both coordinate axes; returns the scaled points together with
/// the constants needed to invert the transform.
inline std::pair<std::vector<Point>, CenterScale> center_scale(const Dataset& ds) {
  validate(ds);
  const std::vector<Point> pts = coordinates(ds);
  const CenterScale cs = fit_center_scale(pts);
  std::vector<Point> scaled(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) scaled[i] = cs.apply(pts[i]);
  return {std::move(scaled), cs};
}

// ---------------------------------------------------------------------------
// Geometric range anisotropy: coordinates are transformed by diag(1, rho)
// before distances are taken, so a range ratio rho:1 between the axes
// becomes isotropic.

struct AnisotropyTransform {
  double rho = 1.0;

  Point apply(Point p) const { return {p.x, rho * p.y}; }
};

inline void validate(const AnisotropyTransform& t) {
  if (!(t.rho > 0.0) || !std::isfinite(t.rho))
    throw std::invalid_argument("anisotropy ratio must be positive and finite");
}

inline std::vector<Point> apply_anisotropy(std::span<const Point> pts,
                                           const AnisotropyTransform& t) {
  validate(t);
  std::vector<Point> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = t.apply(pts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Regular lattice and the observation -> nearest-node incidence mapping.

struct Lattice {
  int nx = 2;
  int ny = 2;
  double x_min = 0.0;
  double x_max = 1.0;
  double y_min = 0.0;
  double y_max = 1.0;

  int node_count() const { return nx * ny; }
  double dx() const { return (x_max - x_min) / static_cast<double>(nx - 1); }
  double dy() const { return (y_max - y_min) / static_cast<double>(ny - 1); }

  /// Flattened index; y-major so ties in the mapping break deterministically.
  int flatten(int i, int j) const { return j * nx + i; }

  Point node(int i, int j) const {
    return {x_min + static_cast<double>(i) * dx(), y_min + static_cast<double>(j) * dy()};
  }
  Point node_at(int flat) const { return node(flat % nx, flat / nx); }
};

inline void validate(const Lattice& lat) {
  if (lat.nx < 2 || lat.ny < 2) throw std::invalid_argument("lattice needs nx >= 2 and ny >= 2");
  if (!(lat.x_min < lat.x_max) || !(lat.y_min < lat.y_max))
    throw std::invalid_argument("lattice bounds must satisfy min < max");
}

/// Row-incidence of observations onto lattice nodes: one node per observation.
struct MappingOperator {
  std::vector<int> assignments;

  std::size_t n_observations() const { return assignments.size(); }
};

/// Assign each point to its nearest lattice node (Euclidean distance); exact
/// ties go to the smaller flattened index. Points outside the bounds are an
/// error: the lattice is expected to encompass all observations.
inline MappingOperator build_mapping(std::span<const Point> pts, const Lattice& lat) {
  validate(lat);
  MappingOperator map;
  map.assignments.reserve(pts.size());
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const Point p = pts[k];
    if (p.x < lat.x_min || p.x > lat.x_max || p.y < lat.y_min || p.y > lat.y_max)
      throw std::runtime_error("observation " + std::to_string(k + 1) +
                               " at (" + csv::format_double(p.x) + ", " + csv::format_double(p.y) +
                               ") lies outside the lattice bounds");
    const double fi = (p.x - lat.x_min) / lat.dx();
    const double fj = (p.y - lat.y_min) / lat.dy();
    const int i0 = std::clamp(static_cast<int>(std::floor(fi)), 0, lat.nx - 1);
    const int j0 = std::clamp(static_cast<int>(std::floor(fj)), 0, lat.ny - 1);
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int j = j0; j <= std::min(j0 + 1, lat.ny - 1); ++j) {
      for (int i = i0; i <= std::min(i0 + 1, lat.nx - 1); ++i) {
        const Point q = lat.node(i, j);
        const double ddx = p.x - q.x;
        const double ddy = p.y - q.y;
        const double d2 = ddx * ddx + ddy * ddy;
        const int flat = lat.flatten(i, j);
        if (d2 < best_d2 || (d2 == best_d2 && flat < best)) {
          best_d2 = d2;
          best = flat;
        }
      }
    }
    map.assignments.push_back(best);
  }
  return map;
}

inline MappingOperator build_mapping(const Dataset& ds, const Lattice& lat) {
  return build_mapping(std::span<const Point>(coordinates(ds)), lat);
}

// ---------------------------------------------------------------------------
// JSON serialization.

inline nlohmann::json to_json(const Lattice& lat) {
  return {{"nx", lat.nx},       {"ny", lat.ny},       {"x_min", lat.x_min},
          {"x_max", lat.x_max}, {"y_min", lat.y_min}, {"y_max", lat.y_max}};
}

inline Lattice lattice_from_json(const nlohmann::json& j) {
  Lattice lat;
  lat.nx = j.at("nx").get<int>();
  lat.ny = j.at("ny").get<int>();
  lat.x_min = j.at("x_min").get<double>();
  lat.x_max = j.at("x_max").get<double>();
  lat.y_min = j.at("y_min").get<double>();
  lat.y_max = j.at("y_max").get<double>();
  validate(lat);
  return lat;
}

inline nlohmann::json to_json(const Lattice& lat, const MappingOperator& map) {
  nlohmann::json j = to_json(lat);
  j["assignments"] = map.assignments;
  return j;
}

inline std::pair<Lattice, MappingOperator> lattice_mapping_from_json(const nlohmann::json& j) {
  Lattice lat = lattice_from_json(j);
  MappingOperator map;
  map.assignments = j.at("assignments").get<std::vector<int>>();
  for (int a : map.assignments)
    if (a < 0 || a >= lat.node_count())
      throw std::runtime_error("mapping assignment out of lattice node range");
  return {lat, map};
}

inline nlohmann::json to_json(const CenterScale& cs) {
  return {{"x_mean", cs.x.mean}, {"x_sd", cs.x.sd}, {"y_mean", cs.y.mean}, {"y_sd", cs.y.sd}};
}

inline CenterScale center_scale_from_json(const nlohmann::json& j) {
  CenterScale cs;
  cs.x = {j.at("x_mean").get<double>(), j.at("x_sd").get<double>()};
  cs.y = {j.at("y_mean").get<double>(), j.at("y_sd").get<double>()};
  return cs;
}

}  // namespace rollgeo

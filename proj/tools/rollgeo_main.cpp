// rollgeo: command-line surface for the roller-geostatistics pipeline.
// Subcommands: simulate, detrend, variogram, backfit. Every run writes a
// config echo JSON with all effective parameters, and all outputs are a
// pure function of the flag set (worker count excluded).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rollgeo/backfit.hpp"
#include "rollgeo/csv.hpp"
#include "rollgeo/detrend.hpp"
#include "rollgeo/geodata.hpp"
#include "rollgeo/simfield.hpp"
#include "rollgeo/variogram.hpp"
#include "rollgeo/varmodel.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

/// Flag-shape problems detected after CLI11 parsing; mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

unsigned g_threads = 1;

fs::path prepare_output_dir(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

void write_json_file(const fs::path& path, const json& j) {
  auto os = rollgeo::csv::open_output(path.string());
  os << j.dump(2) << '\n';
}

std::vector<double> parse_double_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  for (std::string_view field : rollgeo::csv::split_fields(text)) {
    double v = 0.0;
    if (!rollgeo::csv::parse_double(field, v))
      throw UsageError(flag + ": malformed number '" + std::string(field) + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

rollgeo::Lattice parse_lattice(const std::string& text) {
  const std::vector<double> v = parse_double_list(text, "--lattice");
  if (v.size() != 6) throw UsageError("--lattice: expected NX,NY,XMIN,XMAX,YMIN,YMAX");
  rollgeo::Lattice lat;
  lat.nx = static_cast<int>(v[0]);
  lat.ny = static_cast<int>(v[1]);
  if (lat.nx != v[0] || lat.ny != v[1] || lat.nx < 2 || lat.ny < 2)
    throw UsageError("--lattice: NX and NY must be integers >= 2");
  lat.x_min = v[2];
  lat.x_max = v[3];
  lat.y_min = v[4];
  lat.y_max = v[5];
  if (!(lat.x_min < lat.x_max) || !(lat.y_min < lat.y_max))
    throw UsageError("--lattice: bounds must satisfy min < max");
  return lat;
}

rollgeo::VariogramDirection parse_direction(const std::string& d) {
  if (d == "x") return rollgeo::VariogramDirection::XDirectional;
  if (d == "y") return rollgeo::VariogramDirection::YDirectional;
  if (d == "omni") return rollgeo::VariogramDirection::Omni;
  throw UsageError("--direction: expected one of x, y, omni (got '" + d + "')");
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOpts {
  std::string output_dir = ".";
  std::uint64_t seed = 0;
  double nugget = 1.0;
  double psill = 10.0;
  double range = 5.0;
  double rho = 1.0;
  double noise_sd = 0.0;
  double lane_error_sd = 0.0;
  double lane_width = 2.0;
  double spacing = 0.1;
  std::string bounds = "0,20,0,16";
  int trend_degree = 0;
  std::string trend_coef;
};

void cmd_simulate(const SimulateOpts& o) {
  const std::vector<double> b = parse_double_list(o.bounds, "--bounds");
  if (b.size() != 4) throw UsageError("--bounds: expected XMIN,XMAX,YMIN,YMAX");

  rollgeo::TestBedSpec spec;
  spec.lane_width = o.lane_width;
  spec.sample_spacing_along = o.spacing;
  spec.x_min = b[0];
  spec.x_max = b[1];
  spec.y_min = b[2];
  spec.y_max = b[3];
  spec.lane_error_sd = o.lane_error_sd;
  spec.seed = o.seed;

  rollgeo::FieldSpec field;
  field.params = {o.nugget, o.psill, o.range};
  field.anisotropy.rho = o.rho;
  field.noise_sd_x = o.noise_sd;
  field.noise_sd_y = o.noise_sd;
  if (!o.trend_coef.empty()) {
    if (o.trend_degree < 1) throw UsageError("--trend-coef requires --trend-degree >= 1");
    field.mean_fn = rollgeo::TrendPoly{o.trend_degree,
                                       parse_double_list(o.trend_coef, "--trend-coef")};
  }

  const rollgeo::TestBed tb = rollgeo::generate_testbed(spec, field);
  const fs::path dir = prepare_output_dir(o.output_dir);
  rollgeo::save_dataset(tb.x_driving, (dir / "x_driving.csv").string());
  rollgeo::save_dataset(tb.y_driving, (dir / "y_driving.csv").string());
  write_json_file(dir / "truth.json", rollgeo::to_json(tb.truth));

  json echo;
  echo["subcommand"] = "simulate";
  echo["output_dir"] = o.output_dir;
  echo["seed"] = o.seed;
  echo["nugget"] = o.nugget;
  echo["psill"] = o.psill;
  echo["range"] = o.range;
  echo["rho"] = o.rho;
  echo["noise_sd"] = o.noise_sd;
  echo["lane_error_sd"] = o.lane_error_sd;
  echo["lane_width"] = o.lane_width;
  echo["spacing"] = o.spacing;
  echo["bounds"] = o.bounds;
  echo["trend_degree"] = o.trend_degree;
  echo["trend_coef"] = o.trend_coef;
  write_json_file(dir / "simulate_config.json", echo);
}

// ---------------------------------------------------------------------------
// detrend

struct DetrendOpts {
  std::string input;
  std::string output_dir = ".";
  std::string method = "poly";
  std::string driving = "x";
  int degree = 5;
  double span = 0.5;
  int loess_degree = 2;
  int robust_iters = 2;
};

void cmd_detrend(const DetrendOpts& o) {
  if (o.method != "poly" && o.method != "loess")
    throw UsageError("--method: expected poly or loess");
  if (o.driving != "x" && o.driving != "y") throw UsageError("--driving: expected x or y");
  const auto direction = o.driving == "x" ? rollgeo::DrivingDirection::XDriving
                                          : rollgeo::DrivingDirection::YDriving;
  const rollgeo::Dataset ds = rollgeo::load_dataset(o.input, direction);

  rollgeo::TrendModel trend{rollgeo::PolynomialTrend{}};
  rollgeo::Residuals res;
  if (o.method == "poly") {
    auto [t, r] = rollgeo::fit_polynomial(ds, o.degree);
    trend = std::move(t);
    res = std::move(r);
  } else {
    auto [t, r] = rollgeo::fit_loess(ds, o.span, o.loess_degree, o.robust_iters, g_threads);
    trend = std::move(t);
    res = std::move(r);
  }

  const fs::path dir = prepare_output_dir(o.output_dir);
  rollgeo::write_residuals_csv(ds, res, (dir / "residuals.csv").string());
  write_json_file(dir / "trend.json", rollgeo::to_json(trend));

  json echo;
  echo["subcommand"] = "detrend";
  echo["input"] = o.input;
  echo["output_dir"] = o.output_dir;
  echo["method"] = o.method;
  echo["driving"] = o.driving;
  if (o.method == "poly") {
    echo["degree"] = o.degree;
  } else {
    echo["span"] = o.span;
    echo["loess_degree"] = o.loess_degree;
    echo["robust_iters"] = o.robust_iters;
  }
  write_json_file(dir / "detrend_config.json", echo);
}

// ---------------------------------------------------------------------------
// variogram

struct VariogramOpts {
  std::string input;
  std::string output_dir = ".";
  std::vector<std::string> directions{"omni"};
  int bins = 20;
  double max_lag = 0.0;  // 0 = automatic
  double angle_tol = 22.5;
  std::size_t subsample = 0;  // 0 = none
  std::uint64_t seed = 0;
  std::string fit;
  bool band = false;
  std::size_t reps = 200;
  std::string levels = "0.95,0.75";
};

struct ResidualTable {
  std::vector<rollgeo::Point> points;
  std::vector<double> values;
};

ResidualTable load_residuals(const std::string& path) {
  auto is = rollgeo::csv::open_input(path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": empty file");
  if (rollgeo::csv::strip_cr(line) != "x,y,residual,lane")
    throw std::runtime_error(path + ": expected header 'x,y,residual,lane'");
  ResidualTable t;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    const std::string_view sv = rollgeo::csv::strip_cr(line);
    if (sv.empty()) continue;
    const auto fields = rollgeo::csv::split_fields(sv);
    if (fields.size() != 4)
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": expected 4 fields");
    rollgeo::Point p;
    double v = 0.0;
    long lane = 0;
    if (!rollgeo::csv::parse_double(fields[0], p.x) ||
        !rollgeo::csv::parse_double(fields[1], p.y) ||
        !rollgeo::csv::parse_double(fields[2], v) || !rollgeo::csv::parse_long(fields[3], lane))
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": malformed value");
    t.points.push_back(p);
    t.values.push_back(v);
  }
  if (t.points.empty()) throw std::runtime_error(path + ": no residual rows");
  return t;
}

void cmd_variogram(const VariogramOpts& o) {
  if (!o.fit.empty() && o.fit != "spherical")
    throw UsageError("--fit: only 'spherical' is available");
  if (o.band && o.fit.empty()) throw UsageError("--band requires --fit spherical");
  if (o.max_lag < 0.0) throw UsageError("--max-lag must be positive (or omitted for automatic)");
  std::vector<rollgeo::VariogramDirection> dirs;
  for (const std::string& d : o.directions) dirs.push_back(parse_direction(d));

  const ResidualTable table = load_residuals(o.input);
  const fs::path dir = prepare_output_dir(o.output_dir);
  const std::vector<double> levels = parse_double_list(o.levels, "--levels");

  for (const auto direction : dirs) {
    rollgeo::VariogramConfig cfg;
    if (o.max_lag > 0.0) cfg.max_lag = o.max_lag;
    cfg.n_bins = o.bins;
    cfg.direction = direction;
    cfg.angle_tol = o.angle_tol;
    if (o.subsample > 0) cfg.subsample_size = o.subsample;
    cfg.seed = o.seed;

    const rollgeo::EmpiricalSemivariogram emp =
        rollgeo::empirical_semivariogram(table.points, table.values, cfg, g_threads);
    const std::string tag = rollgeo::to_string(direction);
    rollgeo::write_semivariogram_csv(emp, (dir / ("variogram_" + tag + ".csv")).string());

    if (!o.fit.empty()) {
      const rollgeo::FitResult fit = rollgeo::fit_cressie_wls(emp);
      write_json_file(dir / ("fit_" + tag + ".json"), rollgeo::to_json(fit));

      if (o.band) {
        std::vector<rollgeo::Point> band_pts = table.points;
        if (cfg.subsample_size) {
          const auto idx = rollgeo::sample_without_replacement(
              table.points.size(), *cfg.subsample_size, cfg.seed);
          band_pts.clear();
          for (std::size_t i : idx) band_pts.push_back(table.points[i]);
        }
        if (band_pts.size() > rollgeo::kMaxGrfPoints)
          throw std::runtime_error(
              "--band: too many points for simulation; use --subsample <= " +
              std::to_string(rollgeo::kMaxGrfPoints));
        rollgeo::FieldSpec field;
        field.params = fit.params;
        rollgeo::VariogramConfig band_cfg = cfg;
        band_cfg.max_lag = emp.max_lag;
        band_cfg.subsample_size.reset();
        const auto bands = rollgeo::semivariogram_band(band_pts, field, band_cfg, o.reps,
                                                       levels, o.seed, g_threads);
        rollgeo::write_bands_csv(bands, (dir / ("band_" + tag + ".csv")).string());
      }
    }
  }

  json echo;
  echo["subcommand"] = "variogram";
  echo["input"] = o.input;
  echo["output_dir"] = o.output_dir;
  echo["directions"] = o.directions;
  echo["bins"] = o.bins;
  echo["max_lag"] = o.max_lag;
  echo["angle_tol"] = o.angle_tol;
  echo["subsample"] = o.subsample;
  echo["seed"] = o.seed;
  echo["fit"] = o.fit;
  echo["band"] = o.band;
  echo["reps"] = o.reps;
  echo["levels"] = o.levels;
  write_json_file(dir / "variogram_config.json", echo);
}

// ---------------------------------------------------------------------------
// backfit

struct BackfitOpts {
  std::string input;
  std::string input_y;
  std::string output_dir = ".";
  double c = 1.0;
  double rho = 5.0;
  std::string lattice = "80,80,25,55,-0.5,33";
  int degree = 5;
  int max_iters = 50;
  double tol = 1e-3;
  std::uint64_t seed = 0;
};

void cmd_backfit(const BackfitOpts& o) {
  rollgeo::BackfitSpec spec;
  spec.c = o.c;
  spec.rho = o.rho;
  spec.lattice = parse_lattice(o.lattice);
  spec.poly_degree = o.degree;
  spec.max_outer_iters = o.max_iters;
  spec.tol = o.tol;
  spec.seed = o.seed;

  const rollgeo::Dataset ds_x =
      rollgeo::load_dataset(o.input, rollgeo::DrivingDirection::XDriving);
  const rollgeo::Dataset ds_y =
      rollgeo::load_dataset(o.input_y, rollgeo::DrivingDirection::YDriving);
  const rollgeo::BackfitResult result = rollgeo::run_backfit(ds_x, ds_y, spec, g_threads);

  const fs::path dir = prepare_output_dir(o.output_dir);
  write_json_file(dir / "backfit.json", rollgeo::to_json(result));
  rollgeo::write_alpha_csv(result, (dir / "alpha.csv").string());
  rollgeo::write_semivariogram_csv(result.semivar_x,
                                   (dir / "backfit_variogram_x.csv").string());
  rollgeo::write_semivariogram_csv(result.semivar_y,
                                   (dir / "backfit_variogram_y.csv").string());

  json echo;
  echo["subcommand"] = "backfit";
  echo["input"] = o.input;
  echo["input_y"] = o.input_y;
  echo["output_dir"] = o.output_dir;
  echo["c"] = o.c;
  echo["rho"] = o.rho;
  echo["lattice"] = o.lattice;
  echo["degree"] = o.degree;
  echo["max_iters"] = o.max_iters;
  echo["tol"] = o.tol;
  echo["seed"] = o.seed;
  write_json_file(dir / "backfit_config.json", echo);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Roller-compaction geostatistics pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", g_threads, "Worker threads (does not affect results)")
      ->capture_default_str();

  SimulateOpts sim;
  auto* s = app.add_subcommand("simulate", "Generate a synthetic paired roller test bed");
  s->add_option("--output-dir", sim.output_dir)->capture_default_str();
  s->add_option("--seed", sim.seed)->capture_default_str();
  s->add_option("--nugget", sim.nugget)->capture_default_str();
  s->add_option("--psill", sim.psill)->capture_default_str();
  s->add_option("--range", sim.range)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--rho", sim.rho)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--noise-sd", sim.noise_sd)->check(CLI::NonNegativeNumber)->capture_default_str();
  s->add_option("--lane-error-sd", sim.lane_error_sd)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  s->add_option("--lane-width", sim.lane_width)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--spacing", sim.spacing)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--bounds", sim.bounds, "XMIN,XMAX,YMIN,YMAX")->capture_default_str();
  s->add_option("--trend-degree", sim.trend_degree)->capture_default_str();
  s->add_option("--trend-coef", sim.trend_coef, "Comma-separated trend coefficients");
  s->callback([&] { cmd_simulate(sim); });

  DetrendOpts det;
  auto* d = app.add_subcommand("detrend", "Remove the large-scale trend surface");
  d->add_option("--input", det.input)->required();
  d->add_option("--output-dir", det.output_dir)->capture_default_str();
  d->add_option("--method", det.method, "poly or loess")->capture_default_str();
  d->add_option("--driving", det.driving, "Driving direction metadata (x or y)")
      ->capture_default_str();
  d->add_option("--degree", det.degree)->check(CLI::PositiveNumber)->capture_default_str();
  d->add_option("--span", det.span)->capture_default_str();
  d->add_option("--loess-degree", det.loess_degree)->capture_default_str();
  d->add_option("--robust-iters", det.robust_iters)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  d->callback([&] { cmd_detrend(det); });

  VariogramOpts var;
  auto* v = app.add_subcommand("variogram", "Empirical semivariograms of residuals");
  v->add_option("--input", var.input)->required();
  v->add_option("--output-dir", var.output_dir)->capture_default_str();
  v->add_option("--direction", var.directions, "x, y, or omni (repeatable)")
      ->capture_default_str();
  v->add_option("--bins", var.bins)->check(CLI::Range(2, 1000000))->capture_default_str();
  v->add_option("--max-lag", var.max_lag, "Largest lag (omit for automatic)")
      ->capture_default_str();
  v->add_option("--angle-tol", var.angle_tol)->check(CLI::Range(1e-9, 90.0))
      ->capture_default_str();
  v->add_option("--subsample", var.subsample)->capture_default_str();
  v->add_option("--seed", var.seed)->capture_default_str();
  v->add_option("--fit", var.fit, "Model to fit (spherical)");
  v->add_flag("--band", var.band, "Simulate confidence bands around the fitted model");
  v->add_option("--reps", var.reps)->check(CLI::Range(2, 1000000))->capture_default_str();
  v->add_option("--levels", var.levels, "Comma-separated band levels")->capture_default_str();
  v->callback([&] { cmd_variogram(var); });

  BackfitOpts bf;
  auto* b = app.add_subcommand("backfit", "Sequential spatial backfit of paired datasets");
  b->add_option("--input", bf.input, "x-driving dataset CSV")->required();
  b->add_option("--input-y", bf.input_y, "y-driving dataset CSV")->required();
  b->add_option("--output-dir", bf.output_dir)->capture_default_str();
  b->add_option("--c", bf.c)->capture_default_str();
  b->add_option("--rho", bf.rho)->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--lattice", bf.lattice, "NX,NY,XMIN,XMAX,YMIN,YMAX")->capture_default_str();
  b->add_option("--degree", bf.degree)->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--max-iters", bf.max_iters)->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--tol", bf.tol)->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--seed", bf.seed)->capture_default_str();
  b->callback([&] { cmd_backfit(bf); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <json.hpp>

#include "rollgeo/detrend.hpp"
#include "rollgeo/geodata.hpp"
#include "rollgeo/rng.hpp"
#include "rollgeo/simfield.hpp"

using namespace rollgeo;
using nlohmann::json;
namespace fs = std::filesystem;

#ifndef ROLLGEO_BIN_PATH
#error "ROLLGEO_BIN_PATH must point at the built CLI binary"
#endif

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rollgeo_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args, const fs::path& log_dir) {
  const std::string cmd = std::string("\"") + ROLLGEO_BIN_PATH + "\" " + args + " >" +
                          (log_dir / "out.log").string() + " 2>" +
                          (log_dir / "err.log").string();
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool files_equal(const fs::path& a, const fs::path& b) { return read_file(a) == read_file(b); }

json read_json(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  return json::parse(is);
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) fields.push_back(tok);
    rows.push_back(std::move(fields));
  }
  return rows;
}

void write_grid_dataset(const fs::path& path, int n_side, double extent,
                        double ks_base, double noise_sd, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  const double step = extent / (n_side - 1);
  for (int j = 0; j < n_side; ++j)
    for (int i = 0; i < n_side; ++i)
      ds.records.push_back({i * step, j * step, ks_base + rng.normal(0.0, noise_sd), 1});
  save_dataset(ds, path.string());
}

}  // namespace

TEST_CASE("simulate runs are byte identical and CSVs have the header") {
  const fs::path d1 = fresh_dir("sim_a");
  const fs::path d2 = fresh_dir("sim_b");
  const std::string flags =
      " --seed 7 --bounds 0,10,0,8 --spacing 0.5 --nugget 0.5 --psill 4 --range 4"
      " --noise-sd 0.6 --lane-error-sd 0.8";
  REQUIRE(run_cli("simulate --output-dir " + d1.string() + flags, d1) == 0);
  REQUIRE(run_cli("simulate --output-dir " + d2.string() + flags, d2) == 0);
  for (const char* name : {"x_driving.csv", "y_driving.csv", "truth.json"})
    CHECK(files_equal(d1 / name, d2 / name));

  const auto rows = read_csv_rows(d1 / "x_driving.csv");
  REQUIRE(!rows.empty());
  REQUIRE(rows[0].size() == 4);
  CHECK(rows[0][0] == "x");
  CHECK(rows[0][1] == "y");
  CHECK(rows[0][2] == "ks");
  CHECK(rows[0][3] == "lane");

  const json echo = read_json(d1 / "simulate_config.json");
  CHECK(echo.at("seed").get<std::uint64_t>() == 7);
  CHECK(echo.at("lane_error_sd").get<double>() == 0.8);
}

TEST_CASE("noiseless simulate agrees at shared locations") {
  const fs::path dir = fresh_dir("sim_shared");
  REQUIRE(run_cli("simulate --output-dir " + dir.string() +
                      " --seed 3 --bounds 0,10,0,8 --spacing 0.5 --noise-sd 0"
                      " --lane-error-sd 0 --nugget 0.3 --psill 5 --range 4",
                  dir) == 0);
  std::map<std::string, std::string> ks_x;
  const auto rows_x = read_csv_rows(dir / "x_driving.csv");
  for (std::size_t r = 1; r < rows_x.size(); ++r)
    ks_x[rows_x[r][0] + "|" + rows_x[r][1]] = rows_x[r][2];
  const auto rows_y = read_csv_rows(dir / "y_driving.csv");
  int shared = 0;
  for (std::size_t r = 1; r < rows_y.size(); ++r) {
    const auto it = ks_x.find(rows_y[r][0] + "|" + rows_y[r][1]);
    if (it == ks_x.end()) continue;
    ++shared;
    CHECK(it->second == rows_y[r][2]);
  }
  // 4 x-lanes crossing 5 y-lanes, each crossing sampled in both datasets.
  CHECK(shared == 20);
}

TEST_CASE("detrend removes a constant field and echoes loess settings") {
  const fs::path dir = fresh_dir("detrend");
  write_grid_dataset(dir / "flat.csv", 8, 7.0, 7.5, 0.0, 1);

  REQUIRE(run_cli("detrend --input " + (dir / "flat.csv").string() + " --output-dir " +
                      (dir / "poly").string() + " --method poly --degree 5",
                  dir) == 0);
  const auto rows = read_csv_rows(dir / "poly" / "residuals.csv");
  REQUIRE(rows.size() == 65);
  CHECK(rows[0] == std::vector<std::string>{"x", "y", "residual", "lane"});
  for (std::size_t r = 1; r < rows.size(); ++r)
    CHECK(std::abs(std::stod(rows[r][2])) < 1e-8);
  CHECK(read_json(dir / "poly" / "trend.json").at("kind") == "polynomial");

  REQUIRE(run_cli("detrend --input " + (dir / "flat.csv").string() + " --output-dir " +
                      (dir / "loess").string() + " --method loess --span 0.5",
                  dir) == 0);
  const json trend = read_json(dir / "loess" / "trend.json");
  CHECK(trend.at("kind") == "loess");
  CHECK(trend.at("span").get<double>() == 0.5);
  CHECK(read_json(dir / "loess" / "detrend_config.json").at("span").get<double>() == 0.5);
}

TEST_CASE("usage errors exit with code 2, runtime errors with 1") {
  const fs::path dir = fresh_dir("exit_codes");
  write_grid_dataset(dir / "in.csv", 5, 4.0, 5.0, 0.1, 2);
  const std::string input = " --input " + (dir / "in.csv").string();
  const std::string out = " --output-dir " + (dir / "o").string();

  CHECK(run_cli("detrend" + input + out + " --degree 0", dir) == 2);
  CHECK(run_cli("detrend" + out, dir) == 2);
  CHECK(run_cli("detrend" + input + out + " --method cubic", dir) == 2);
  CHECK(run_cli("frobnicate", dir) == 2);
  CHECK(run_cli("backfit" + input + out, dir) == 2);
  CHECK(run_cli("variogram" + input + out + " --direction diagonal", dir) == 2);

  CHECK(run_cli("detrend --input " + (dir / "missing.csv").string() + out, dir) == 1);
  // Residual loader rejects the dataset header, a runtime failure.
  CHECK(run_cli("variogram" + input + out, dir) == 1);
  std::string err = read_file(dir / "err.log");
  CHECK(err.find("x,y,residual,lane") != std::string::npos);
}

TEST_CASE("variogram emits one CSV per direction, deterministically") {
  const fs::path dir = fresh_dir("vario");
  write_grid_dataset(dir / "in.csv", 12, 11.0, 20.0, 1.0, 5);
  REQUIRE(run_cli("detrend --input " + (dir / "in.csv").string() + " --output-dir " +
                      (dir / "res").string() + " --method poly --degree 2",
                  dir) == 0);
  const std::string input = " --input " + (dir / "res" / "residuals.csv").string();
  const std::string flags = " --direction x --direction y --bins 10 --subsample 100 --seed 3";
  REQUIRE(run_cli("variogram" + input + " --output-dir " + (dir / "a").string() + flags,
                  dir) == 0);
  REQUIRE(run_cli("variogram" + input + " --output-dir " + (dir / "b").string() + flags,
                  dir) == 0);
  for (const char* name : {"variogram_x.csv", "variogram_y.csv"}) {
    CHECK(fs::exists(dir / "a" / name));
    CHECK(files_equal(dir / "a" / name, dir / "b" / name));
  }
  CHECK(!fs::exists(dir / "a" / "variogram_omni.csv"));
  const auto rows = read_csv_rows(dir / "a" / "variogram_x.csv");
  REQUIRE(rows.size() == 11);
  CHECK(rows[0] == std::vector<std::string>{"lag", "gamma", "n_pairs", "direction"});
  for (std::size_t r = 1; r < rows.size(); ++r) CHECK(rows[r][3] == "x");
}

TEST_CASE("variogram fit and band pipeline on a synthetic spherical field") {
  const fs::path dir = fresh_dir("vario_fit");
  {
    std::vector<Point> pts;
    for (int j = 0; j < 30; ++j)
      for (int i = 0; i < 30; ++i) pts.push_back({i * 1.0, j * 1.0});
    FieldSpec field;
    field.params = {2.0, 10.0, 8.0};
    const std::vector<double> vals = simulate_grf(pts, field, 99);
    Dataset ds;
    for (std::size_t i = 0; i < pts.size(); ++i)
      ds.records.push_back({pts[i].x, pts[i].y, vals[i], 1});
    Residuals res;
    res.values = vals;
    res.parent = &ds;
    write_residuals_csv(ds, res, (dir / "residuals.csv").string());
  }
  const std::string input = " --input " + (dir / "residuals.csv").string();
  const std::string flags =
      " --direction omni --bins 15 --max-lag 15 --fit spherical --band"
      " --subsample 300 --seed 11 --reps 60 --levels 0.9,0.6";
  REQUIRE(run_cli("variogram" + input + " --output-dir " + (dir / "a").string() + flags,
                  dir) == 0);

  const json fit = read_json(dir / "a" / "fit_omni.json");
  CHECK(fit.at("converged").get<bool>() == true);
  CHECK(fit.at("psill").get<double>() > 0.0);
  CHECK(fit.at("range").get<double>() > 0.0);

  const auto band = read_csv_rows(dir / "a" / "band_omni.csv");
  REQUIRE(band.size() > 1);
  CHECK(band[0] == std::vector<std::string>{"lag", "mean", "lower", "upper", "level"});
  for (std::size_t r = 1; r < band.size(); ++r) {
    const double level = std::stod(band[r][4]);
    CHECK((level == 0.9 || level == 0.6));
  }

  // The config echo alone reconstructs the identical run.
  const json echo = read_json(dir / "a" / "variogram_config.json");
  std::ostringstream cmd;
  cmd << "variogram --input " << echo.at("input").get<std::string>()
      << " --output-dir " << (dir / "echo").string();
  for (const auto& d : echo.at("directions")) cmd << " --direction " << d.get<std::string>();
  cmd << " --bins " << echo.at("bins").get<int>()
      << " --max-lag " << echo.at("max_lag").get<double>()
      << " --angle-tol " << echo.at("angle_tol").get<double>()
      << " --subsample " << echo.at("subsample").get<std::size_t>()
      << " --seed " << echo.at("seed").get<std::uint64_t>();
  if (!echo.at("fit").get<std::string>().empty())
    cmd << " --fit " << echo.at("fit").get<std::string>();
  if (echo.at("band").get<bool>()) cmd << " --band";
  cmd << " --reps " << echo.at("reps").get<std::size_t>()
      << " --levels " << echo.at("levels").get<std::string>();
  REQUIRE(run_cli(cmd.str(), dir) == 0);
  for (const char* name : {"variogram_omni.csv", "fit_omni.json", "band_omni.csv"})
    CHECK(files_equal(dir / "a" / name, dir / "echo" / name));

  // Worker count changes nothing.
  REQUIRE(run_cli("--threads 4 variogram" + input + " --output-dir " +
                      (dir / "t4").string() + flags,
                  dir) == 0);
  for (const char* name : {"variogram_omni.csv", "fit_omni.json", "band_omni.csv"})
    CHECK(files_equal(dir / "a" / name, dir / "t4" / name));
}

TEST_CASE("backfit cli decouples at c zero and is deterministic") {
  const fs::path dir = fresh_dir("backfit");
  REQUIRE(run_cli("simulate --output-dir " + (dir / "bed").string() +
                      " --seed 13 --bounds 0,16,0,14 --spacing 0.4 --nugget 0.5"
                      " --psill 6 --range 5 --noise-sd 0.7 --lane-error-sd 0.4"
                      " --trend-degree 2 --trend-coef 30,0.5,-0.3,0.02,0.015,-0.01",
                  dir) == 0);
  const std::string inputs = " --input " + (dir / "bed" / "x_driving.csv").string() +
                             " --input-y " + (dir / "bed" / "y_driving.csv").string();
  const std::string flags = " --c 0 --rho 2 --lattice 9,8,0,16,0,14 --seed 0";
  REQUIRE(run_cli("backfit" + inputs + " --output-dir " + (dir / "a").string() + flags,
                  dir) == 0);
  REQUIRE(run_cli("backfit" + inputs + " --output-dir " + (dir / "b").string() + flags,
                  dir) == 0);
  REQUIRE(run_cli("--threads 4 backfit" + inputs + " --output-dir " +
                      (dir / "t4").string() + flags,
                  dir) == 0);
  for (const char* name :
       {"backfit.json", "alpha.csv", "backfit_variogram_x.csv", "backfit_variogram_y.csv"}) {
    CHECK(files_equal(dir / "a" / name, dir / "b" / name));
    CHECK(files_equal(dir / "a" / name, dir / "t4" / name));
  }

  // Standalone per-dataset pipeline via the CLI: degree-5 detrend, then the
  // directional fit with the same subsampling defaults as the backfit loop.
  const json bf = read_json(dir / "a" / "backfit.json");
  for (const char* axis : {"x", "y"}) {
    const bool is_x = std::string(axis) == "x";
    const fs::path res_dir = dir / (std::string("res_") + axis);
    const std::string in =
        (dir / "bed" / (std::string(axis) + "_driving.csv")).string();
    REQUIRE(run_cli("detrend --input " + in + " --output-dir " + res_dir.string() +
                        " --method poly --degree 5 --driving " + axis,
                    dir) == 0);
    const fs::path fit_dir = dir / (std::string("fit_") + axis);
    REQUIRE(run_cli("variogram --input " + (res_dir / "residuals.csv").string() +
                        " --output-dir " + fit_dir.string() + " --direction " + axis +
                        " --fit spherical --seed 0",
                    dir) == 0);
    const json fit = read_json(fit_dir / (std::string("fit_") + axis + ".json"));
    const double theta_psill =
        bf.at(is_x ? "theta_x" : "theta_y").at("psill").get<double>();
    const double theta_range =
        bf.at(is_x ? "theta_x" : "theta_y").at("range").get<double>();
    const double sigma2 = bf.at(is_x ? "sigma2_x" : "sigma2_y").get<double>();
    CHECK(theta_psill ==
          Catch::Approx(fit.at("psill").get<double>()).epsilon(1e-6).margin(1e-9));
    CHECK(theta_range ==
          Catch::Approx(fit.at("range").get<double>()).epsilon(1e-6).margin(1e-9));
    CHECK(sigma2 ==
          Catch::Approx(fit.at("nugget").get<double>()).epsilon(1e-6).margin(1e-9));
  }

  const json echo = read_json(dir / "a" / "backfit_config.json");
  CHECK(echo.at("c").get<double>() == 0.0);
  CHECK(echo.at("lattice").get<std::string>() == "9,8,0,16,0,14");

  fs::remove_all(fs::temp_directory_path() / "rollgeo_cli_tests");
}

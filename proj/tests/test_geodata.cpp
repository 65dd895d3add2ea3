#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "rollgeo/geodata.hpp"
#include "rollgeo/rng.hpp"

namespace fs = std::filesystem;
using namespace rollgeo;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rollgeo_geodata_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

/// Exhaustive nearest-node search with the smaller-flat-index tie rule,
/// written independently of the 4-candidate production search.
int nearest_node_bruteforce(Point p, const Lattice& lat) {
  int best = -1;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (int j = 0; j < lat.ny; ++j)
    for (int i = 0; i < lat.nx; ++i) {
      const Point q = lat.node(i, j);
      const double d2 = (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y);
      const int flat = j * lat.nx + i;
      if (d2 < best_d2 || (d2 == best_d2 && flat < best)) {
        best_d2 = d2;
        best = flat;
      }
    }
  return best;
}

}  // namespace

TEST_CASE("load_dataset parses records in file order") {
  const fs::path p = temp_file("two_rows.csv");
  write_text(p, "x,y,ks,lane\n25.0,0.0,10.0,1\n25.1,0.0,11.0,1\n");
  const Dataset ds = load_dataset(p.string(), DrivingDirection::XDriving);
  REQUIRE(ds.n() == 2);
  CHECK(ds.records[0].x == 25.0);
  CHECK(ds.records[0].ks == 10.0);
  CHECK(ds.records[1].x == 25.1);
  CHECK(ds.records[1].ks == 11.0);
  CHECK(ds.records[1].lane == 1);
  CHECK(ds.driving_direction == DrivingDirection::XDriving);
}

TEST_CASE("load_dataset accepts CRLF line endings") {
  const fs::path p = temp_file("crlf.csv");
  write_text(p, "x,y,ks,lane\r\n1.0,2.0,3.0,4\r\n");
  const Dataset ds = load_dataset(p.string(), DrivingDirection::YDriving);
  REQUIRE(ds.n() == 1);
  CHECK(ds.records[0].lane == 4);
}

TEST_CASE("load_dataset rejects a header-only file as empty") {
  const fs::path p = temp_file("header_only.csv");
  write_text(p, "x,y,ks,lane\n");
  REQUIRE_THROWS_WITH(load_dataset(p.string(), DrivingDirection::XDriving),
                      Catch::Matchers::ContainsSubstring("empty dataset"));
}

TEST_CASE("load_dataset names the offending row for non-finite values") {
  const fs::path p = temp_file("nan_row.csv");
  write_text(p, "x,y,ks,lane\n1,2,3,1\n4,5,6,1\n7,8,nan,1\n");
  REQUIRE_THROWS_WITH(load_dataset(p.string(), DrivingDirection::XDriving),
                      Catch::Matchers::ContainsSubstring("row 3"));
}

TEST_CASE("load_dataset names the offending row for malformed fields") {
  const fs::path p = temp_file("bad_row.csv");
  write_text(p, "x,y,ks,lane\n1,2,3,1\noops,5,6,1\n");
  REQUIRE_THROWS_WITH(load_dataset(p.string(), DrivingDirection::XDriving),
                      Catch::Matchers::ContainsSubstring("row 2"));
}

TEST_CASE("load_dataset rejects wrong header and missing file") {
  const fs::path p = temp_file("bad_header.csv");
  write_text(p, "a,b,c,d\n1,2,3,4\n");
  CHECK_THROWS(load_dataset(p.string(), DrivingDirection::XDriving));
  CHECK_THROWS(load_dataset((p.parent_path() / "does_not_exist.csv").string(),
                            DrivingDirection::XDriving));
}

TEST_CASE("load_dataset rejects lane below 1") {
  const fs::path p = temp_file("lane_zero.csv");
  write_text(p, "x,y,ks,lane\n1,2,3,0\n");
  REQUIRE_THROWS_WITH(load_dataset(p.string(), DrivingDirection::XDriving),
                      Catch::Matchers::ContainsSubstring("lane"));
}

TEST_CASE("save/load round trip preserves doubles exactly") {
  Dataset ds;
  ds.driving_direction = DrivingDirection::YDriving;
  Rng rng(91);
  for (int i = 0; i < 200; ++i)
    ds.records.push_back(
        {rng.uniform(-60.0, 60.0), rng.uniform(-3.0, 40.0), rng.normal(20.0, 7.0),
         static_cast<int>(rng.below(12) + 1)});
  const fs::path p = temp_file("roundtrip.csv");
  save_dataset(ds, p.string());
  const Dataset back = load_dataset(p.string(), DrivingDirection::YDriving);
  REQUIRE(back.n() == ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i) {
    CHECK(back.records[i].x == ds.records[i].x);
    CHECK(back.records[i].y == ds.records[i].y);
    CHECK(back.records[i].ks == ds.records[i].ks);
    CHECK(back.records[i].lane == ds.records[i].lane);
  }
}

TEST_CASE("center_scale on a two-point axis") {
  Dataset ds;
  ds.records = {{0.0, -1.0, 1.0, 1}, {2.0, 1.0, 2.0, 1}};
  const auto [scaled, cs] = center_scale(ds);
  CHECK(cs.x.mean == Catch::Approx(1.0));
  CHECK(cs.x.sd == Catch::Approx(std::sqrt(2.0)));
  CHECK(scaled[0].x == Catch::Approx(-1.0 / std::sqrt(2.0)));
  CHECK(scaled[1].x == Catch::Approx(1.0 / std::sqrt(2.0)));
}

TEST_CASE("center_scale leaves a standardized axis unchanged") {
  Dataset ds;
  ds.records = {{-1.0, 0.0, 1.0, 1}, {0.0, 1.0, 1.0, 1}, {1.0, -1.0, 1.0, 1}};
  const auto [scaled, cs] = center_scale(ds);
  CHECK(cs.x.mean == Catch::Approx(0.0).margin(1e-15));
  CHECK(cs.x.sd == Catch::Approx(1.0));
  for (std::size_t i = 0; i < scaled.size(); ++i)
    CHECK(scaled[i].x == Catch::Approx(ds.records[i].x).margin(1e-14));
}

TEST_CASE("center_scale output has mean 0 and sd 1") {
  Dataset ds;
  Rng rng(7);
  for (int i = 0; i < 500; ++i)
    ds.records.push_back({rng.uniform(20.0, 60.0), rng.uniform(-1.0, 35.0), 0.0, 1});
  const auto [scaled, cs] = center_scale(ds);
  double mx = 0.0, my = 0.0;
  for (const Point& p : scaled) {
    mx += p.x;
    my += p.y;
  }
  mx /= 500.0;
  my /= 500.0;
  CHECK(std::abs(mx) < 1e-10);
  CHECK(std::abs(my) < 1e-10);
  double sx = 0.0, sy = 0.0;
  for (const Point& p : scaled) {
    sx += (p.x - mx) * (p.x - mx);
    sy += (p.y - my) * (p.y - my);
  }
  CHECK(std::sqrt(sx / 499.0) == Catch::Approx(1.0).epsilon(1e-10));
  CHECK(std::sqrt(sy / 499.0) == Catch::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("center_scale round trip recovers coordinates") {
  Dataset ds;
  Rng rng(13);
  for (int i = 0; i < 300; ++i)
    ds.records.push_back({rng.uniform(-500.0, 500.0), rng.uniform(1000.0, 1010.0), 0.0, 1});
  const auto [scaled, cs] = center_scale(ds);
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    const Point back = cs.invert(scaled[i]);
    CHECK(back.x == Catch::Approx(ds.records[i].x).epsilon(1e-10));
    CHECK(back.y == Catch::Approx(ds.records[i].y).epsilon(1e-10));
  }
}

TEST_CASE("center_scale rejects a zero-variance axis") {
  Dataset ds;
  ds.records = {{1.0, 0.0, 0.0, 1}, {1.0, 1.0, 0.0, 1}, {1.0, 2.0, 0.0, 1}};
  REQUIRE_THROWS_WITH(center_scale(ds), Catch::Matchers::ContainsSubstring("zero variance"));
}

TEST_CASE("anisotropy maps (1,1) to (1,5) at rho 5") {
  const AnisotropyTransform t{5.0};
  const std::vector<Point> out = apply_anisotropy(std::vector<Point>{{1.0, 1.0}}, t);
  CHECK(out[0].x == 1.0);
  CHECK(out[0].y == 5.0);
}

TEST_CASE("anisotropy with rho 1 is the identity") {
  Rng rng(3);
  std::vector<Point> pts;
  for (int i = 0; i < 100; ++i) pts.push_back({rng.uniform(-9.0, 9.0), rng.uniform(-9.0, 9.0)});
  const std::vector<Point> out = apply_anisotropy(pts, AnisotropyTransform{1.0});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(out[i].x == pts[i].x);
    CHECK(out[i].y == pts[i].y);
  }
}

TEST_CASE("anisotropy scales y-only separations linearly in rho") {
  const Point a{0.0, 0.0}, b{0.0, 1.0};
  for (double rho : {0.5, 2.0, 5.0, 11.25}) {
    const auto out = apply_anisotropy(std::vector<Point>{a, b}, AnisotropyTransform{rho});
    const double d = std::hypot(out[1].x - out[0].x, out[1].y - out[0].y);
    CHECK(d == Catch::Approx(rho));
  }
}

TEST_CASE("anisotropy rejects non-positive or non-finite rho") {
  CHECK_THROWS(apply_anisotropy(std::vector<Point>{{0, 0}}, AnisotropyTransform{0.0}));
  CHECK_THROWS(apply_anisotropy(std::vector<Point>{{0, 0}}, AnisotropyTransform{-2.0}));
  CHECK_THROWS(apply_anisotropy(std::vector<Point>{{0, 0}},
                                AnisotropyTransform{std::numeric_limits<double>::quiet_NaN()}));
}

TEST_CASE("lattice node coordinates follow the grid formula") {
  const Lattice lat{5, 3, 10.0, 30.0, -1.0, 1.0};
  CHECK(lat.dx() == Catch::Approx(5.0));
  CHECK(lat.dy() == Catch::Approx(1.0));
  CHECK(lat.node(0, 0).x == 10.0);
  CHECK(lat.node(4, 2).x == Catch::Approx(30.0));
  CHECK(lat.node(4, 2).y == Catch::Approx(1.0));
  CHECK(lat.node(2, 1).x == Catch::Approx(20.0));
  CHECK(lat.node(2, 1).y == Catch::Approx(0.0));
  CHECK(lat.flatten(2, 1) == 7);
  const Point p = lat.node_at(7);
  CHECK(p.x == lat.node(2, 1).x);
  CHECK(p.y == lat.node(2, 1).y);
}

TEST_CASE("lattice validation rejects degenerate shapes") {
  CHECK_THROWS(validate(Lattice{1, 2, 0, 1, 0, 1}));
  CHECK_THROWS(validate(Lattice{2, 1, 0, 1, 0, 1}));
  CHECK_THROWS(validate(Lattice{2, 2, 1, 1, 0, 1}));
  CHECK_THROWS(validate(Lattice{2, 2, 0, 1, 2, 1}));
}

TEST_CASE("mapping sends a corner-region point to the corner node") {
  const Lattice lat{2, 2, 0.0, 1.0, 0.0, 1.0};
  const MappingOperator m = build_mapping(std::vector<Point>{{0.1, 0.1}}, lat);
  REQUIRE(m.assignments.size() == 1);
  CHECK(m.assignments[0] == 0);
}

TEST_CASE("mapping sends a point exactly at a node to that node") {
  const Lattice lat{4, 4, 0.0, 3.0, 0.0, 3.0};
  const MappingOperator m = build_mapping(std::vector<Point>{{2.0, 1.0}}, lat);
  CHECK(m.assignments[0] == lat.flatten(2, 1));
}

TEST_CASE("mapping breaks the center tie toward the lower node index") {
  const Lattice lat{2, 2, 0.0, 1.0, 0.0, 1.0};
  const MappingOperator m = build_mapping(std::vector<Point>{{0.5, 0.5}}, lat);
  CHECK(m.assignments[0] == 0);
}

TEST_CASE("mapping matches exhaustive nearest-node search") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    Lattice lat;
    lat.nx = static_cast<int>(rng.below(9) + 2);
    lat.ny = static_cast<int>(rng.below(9) + 2);
    lat.x_min = rng.uniform(-5.0, 0.0);
    lat.x_max = lat.x_min + rng.uniform(1.0, 10.0);
    lat.y_min = rng.uniform(-5.0, 0.0);
    lat.y_max = lat.y_min + rng.uniform(1.0, 10.0);
    std::vector<Point> pts;
    for (int i = 0; i < 80; ++i)
      pts.push_back({rng.uniform(lat.x_min, lat.x_max), rng.uniform(lat.y_min, lat.y_max)});
    const MappingOperator m = build_mapping(pts, lat);
    REQUIRE(m.assignments.size() == pts.size());
    for (std::size_t k = 0; k < pts.size(); ++k)
      CHECK(m.assignments[k] == nearest_node_bruteforce(pts[k], lat));
  }
}

TEST_CASE("mapping rejects observations outside the lattice") {
  const Lattice lat{2, 2, 0.0, 1.0, 0.0, 1.0};
  CHECK_THROWS_WITH(build_mapping(std::vector<Point>{{1.5, 0.5}}, lat),
                    Catch::Matchers::ContainsSubstring("outside"));
}

TEST_CASE("lattice and mapping JSON round trip") {
  const Lattice lat{3, 4, 0.0, 2.0, -1.0, 5.0};
  Rng rng(5);
  std::vector<Point> pts;
  for (int i = 0; i < 50; ++i)
    pts.push_back({rng.uniform(0.0, 2.0), rng.uniform(-1.0, 5.0)});
  const MappingOperator m = build_mapping(pts, lat);
  const nlohmann::json j = to_json(lat, m);
  const auto [lat2, m2] = lattice_mapping_from_json(j);
  CHECK(lat2.nx == lat.nx);
  CHECK(lat2.ny == lat.ny);
  CHECK(lat2.x_min == lat.x_min);
  CHECK(lat2.y_max == lat.y_max);
  CHECK(m2.assignments == m.assignments);
}

TEST_CASE("mapping JSON rejects out-of-range assignments") {
  nlohmann::json j = to_json(Lattice{2, 2, 0.0, 1.0, 0.0, 1.0});
  j["assignments"] = std::vector<int>{0, 4};
  CHECK_THROWS(lattice_mapping_from_json(j));
}

TEST_CASE("dataset validation enforces finite values and positive lanes") {
  Dataset ds;
  CHECK_THROWS(validate(ds));
  ds.records = {{0.0, 0.0, 1.0, 0}};
  CHECK_THROWS(validate(ds));
  ds.records = {{0.0, std::numeric_limits<double>::infinity(), 1.0, 1}};
  CHECK_THROWS(validate(ds));
  ds.records = {{0.0, 0.0, 1.0, 1}};
  CHECK_NOTHROW(validate(ds));
}

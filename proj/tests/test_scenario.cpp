#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mkvlab/scenario.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mkvlab;
namespace fs = std::filesystem;

namespace {

const char* kMinimalScenario = R"json({
  "C": {"dim": 2, "data": [0.5, 0, 0, 0.5]},
  "K": {"dim": 2, "data": [-0.5, -1, 1, 0.5]},
  "D": {"dim": 2, "data": [0, 0, 0, 1]},
  "initial": {"type": "gaussian", "mean": [1, 1],
              "covariance": {"dim": 2, "data": [1, 0, 0, 1]}}
})json";

std::string temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "mkvlab_scenario_tests";
    fs::create_directories(dir);
    return dir.string();
}

Scenario minimal() { return parse_scenario_text(kMinimalScenario); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("minimal scenario parses with the documented defaults") {
    const Scenario s = minimal();
    CHECK(s.name == "scenario");
    CHECK(s.mass == 1.0);
    CHECK(s.time.t_end == 20.0);
    CHECK(s.time.samples == 200);
    CHECK_FALSE(s.time.geometric);
    CHECK(s.particles.count == 10000);
    CHECK(s.particles.dt == 1e-3);
    CHECK(s.tolerances.rank_tol == 1e-9);
    CHECK(s.tolerances.cluster_tol == 1e-7);
    REQUIRE(s.gaussian_initial.has_value());
    CHECK(s.gaussian_initial->mean(0) == 1.0);
}

TEST_CASE("dimension mismatches are rejected naming both fields") {
    const std::string text = R"json({
      "C": {"dim": 2, "data": [1, 0, 0, 1]},
      "K": {"dim": 2, "data": [0, 0, 0, 0]},
      "D": {"dim": 3, "data": [1,0,0, 0,1,0, 0,0,1]},
      "initial": {"type": "gaussian", "mean": [0, 0],
                  "covariance": {"dim": 2, "data": [1, 0, 0, 1]}}
    })json";
    CHECK_THROWS_WITH_AS(parse_scenario_text(text), doctest::Contains("C is 2x2 but D is 3x3"),
                         std::invalid_argument);
}

TEST_CASE("missing and malformed fields carry the field name") {
    CHECK_THROWS_WITH_AS(parse_scenario_text(R"({"K": {"dim": 1, "data": [0]}})"),
                         doctest::Contains("'C'"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        parse_scenario_text(R"json({
          "C": {"dim": 1, "data": ["x"]},
          "K": {"dim": 1, "data": [0]},
          "D": {"dim": 1, "data": [1]},
          "initial": {"type": "gaussian", "mean": [0],
                      "covariance": {"dim": 1, "data": [1]}}
        })json"),
        doctest::Contains("C.data[0]"), std::invalid_argument);
    CHECK_THROWS_AS(parse_scenario_text("{ not json"), std::invalid_argument);
}

TEST_CASE("scenario round-trips through serialization") {
    Scenario s = minimal();
    s.name = "roundtrip";
    s.mass = 2.5;
    s.time.t_end = 7.5;
    s.time.samples = 33;
    s.time.geometric = true;
    s.particles.count = 777;
    s.particles.seed = 123456789;
    s.tolerances.rank_tol = 3e-10;
    s.output_dir = "traces";

    const Scenario back = parse_scenario_text(serialize_scenario(s));
    CHECK(back == s);
    CHECK(serialize_scenario(back) == serialize_scenario(s));
}

TEST_CASE("time grids span the requested range") {
    TimeGridSpec linear;
    linear.t_end = 10.0;
    linear.samples = 11;
    const auto lg = time_grid(linear);
    REQUIRE(lg.size() == 11);
    CHECK(lg.front() == 0.0);
    CHECK(lg.back() == 10.0);
    CHECK(lg[3] == doctest::Approx(3.0));

    TimeGridSpec geometric = linear;
    geometric.geometric = true;
    const auto gg = time_grid(geometric);
    REQUIRE(gg.size() == 11);
    CHECK(gg.front() == 0.0);
    CHECK(gg.back() == doctest::Approx(10.0));
    for (size_t i = 2; i < gg.size(); ++i) {
        CHECK(gg[i] / gg[i - 1] == doctest::Approx(gg[2] / gg[1]).epsilon(1e-9));
    }
}

TEST_CASE("check run reports rates for the kinetic scenario") {
    Scenario s = minimal();
    RunOptions opts;
    std::ostringstream out;
    const int status = run_check(s, opts, out);
    CHECK(status == 0);
    const std::string report = out.str();
    CHECK(report.find("admissible") != std::string::npos);
    CHECK(report.find("rank(D) = 1") != std::string::npos);
    CHECK(report.find("mu = 0.5") != std::string::npos);
    CHECK(report.find("hypotheses: OK") != std::string::npos);
}

TEST_CASE("check run prints a vanishing shift limit when the interaction is off") {
    Scenario s = minimal();
    s.C = Matrix::Identity(2, 2);
    s.K = Matrix::Zero(2, 2);
    s.D = Matrix::Identity(2, 2);
    RunOptions opts;
    std::ostringstream out;
    CHECK(run_check(s, opts, out) == 0);
    CHECK(out.str().find("s_infinity = 0 0") != std::string::npos);
}

TEST_CASE("check run rejects a defective drift with a clear reason") {
    Scenario s = minimal();
    s.C = (Matrix(2, 2) << 0.0, 1.0, 0.0, 0.0).finished();  // nilpotent
    s.K = Matrix::Identity(2, 2);
    s.D = Matrix::Identity(2, 2);
    RunOptions opts;
    std::ostringstream out;
    CHECK(run_check(s, opts, out) != 0);
    CHECK(out.str().find("defective") != std::string::npos);
}

TEST_CASE("flow run on a stationary scenario writes an all-zero trace") {
    Scenario s = minimal();
    s.name = "stationary";
    // the kinetic equilibrium covariance is the identity, so N(0, I) is stationary
    s.gaussian_initial->mean = Vector::Zero(2);
    s.output_dir = temp_dir();
    RunOptions opts;
    opts.quiet = true;
    std::ostringstream out;
    CHECK(run_flow(s, opts, out) == 0);

    const fs::path csv = fs::path(s.output_dir) / "flow_stationary.csv";
    REQUIRE(fs::exists(csv));
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "t,entropy,envelope,ratio");
    double t, h, env, ratio;
    char comma;
    int rows = 0;
    while (in >> t >> comma >> h >> comma >> env >> comma >> ratio) {
        CHECK(h <= 1e-10);
        ++rows;
    }
    CHECK(rows == s.time.samples);
}

TEST_CASE("bound run with zero first moment has an identically zero shift envelope") {
    Scenario s = minimal();
    s.name = "centered";
    s.C = Matrix::Zero(2, 2);
    s.C.diagonal() << 0.0, 2.0;
    s.K = Matrix::Identity(2, 2);
    s.D = Matrix::Identity(2, 2);
    s.gaussian_initial->mean = Vector::Zero(2);
    s.gaussian_initial->covariance = 0.4 * Matrix::Identity(2, 2);
    s.time.t_end = 10.0;
    s.time.samples = 50;
    s.output_dir = temp_dir();
    RunOptions opts;
    opts.quiet = true;
    std::ostringstream out;
    CHECK(run_bound(s, opts, out) == 0);

    const fs::path csv = fs::path(s.output_dir) / "bound_centered.csv";
    REQUIRE(fs::exists(csv));
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line ==
          "t,H_total,H_profile,cross_term,quadratic_term,envelope_term1,envelope_term2,"
          "shift_error");
    while (std::getline(in, line)) {
        std::stringstream row(line);
        std::string cell;
        std::vector<double> cells;
        while (std::getline(row, cell, ',')) cells.push_back(std::stod(cell));
        REQUIRE(cells.size() == 8);
        CHECK(cells[6] == 0.0);  // envelope_term2
        CHECK(cells[7] < 1e-13);  // shift_error
    }
}

TEST_CASE("particle runs with the same seed produce byte-identical traces") {
    Scenario s = minimal();
    s.name = "particles";
    s.particles.count = 2000;
    s.particles.dt = 1e-3;
    s.particles.seed = 7;
    s.time.t_end = 0.5;
    s.time.samples = 6;
    RunOptions opts;
    opts.quiet = true;

    const std::string dir_a = temp_dir() + "/runA";
    const std::string dir_b = temp_dir() + "/runB";
    std::ostringstream out;
    opts.output_dir_override = dir_a;
    CHECK(run_particles(s, opts, out) == 0);
    opts.output_dir_override = dir_b;
    CHECK(run_particles(s, opts, out) == 0);

    const std::string a = slurp(fs::path(dir_a) / "particles_particles.csv");
    const std::string b = slurp(fs::path(dir_b) / "particles_particles.csv");
    CHECK(a.size() > 0);
    CHECK(a == b);
}

TEST_CASE("failed runs leave no partial trace behind") {
    Scenario s = minimal();
    s.name = "broken";
    s.D = Matrix::Zero(2, 2);  // inadmissible: rank 0 diffusion
    s.output_dir = temp_dir() + "/broken_out";
    RunOptions opts;
    opts.quiet = true;
    std::ostringstream out;
    CHECK_THROWS_AS(run_flow(s, opts, out), std::domain_error);
    CHECK_FALSE(fs::exists(fs::path(s.output_dir) / "flow_broken.csv"));
    CHECK_FALSE(fs::exists(fs::path(s.output_dir) / "flow_broken.csv.tmp"));
}

TEST_CASE("grid initial data feed the model moments") {
    const std::string dir = temp_dir();
    // 1d Gaussian sampled on a grid, written through the documented format
    Lattice grid;
    grid.origin = Vector::Constant(1, -5.3);  // +-6 sigma around the mean
    grid.spacing = Vector::Constant(1, 0.05);
    grid.counts = {241};
    GaussianState g;
    g.mean = Vector::Constant(1, 0.7);
    g.covariance = Matrix::Identity(1, 1);
    write_grid_density(dir + "/rho0.grid", sample_gaussian(g, grid));

    Scenario s;
    s.name = "grid1d";
    s.C = Matrix::Identity(1, 1);
    s.K = Matrix::Zero(1, 1);
    s.D = Matrix::Identity(1, 1);
    s.grid_initial_path = "rho0.grid";
    s.base_dir = dir;

    const ModelTriple model = scenario_model(s);
    CHECK(model.m1(0) == doctest::Approx(0.7).epsilon(1e-5));
    const GridDensity loaded = load_grid_initial(s);
    CHECK(loaded.mass() == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("format_double round-trips through parsing") {
    for (double x : {0.0, 1.0, -1.5, 0.1, 3.141592653589793, 1e-300, 123456.789012345}) {
        CHECK(std::stod(format_double(x)) == x);
    }
}

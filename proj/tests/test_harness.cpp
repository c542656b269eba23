#include "valstitch/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "valstitch/stats.hpp"

using namespace valstitch;
namespace H = valstitch::harness;

namespace {

std::string scratch_dir() {
  auto p = std::filesystem::temp_directory_path() / "valstitch_harness_test";
  std::filesystem::create_directories(p);
  return p.string();
}

std::string first_line(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST_CASE("scenario json round trip and hash") {
  H::Scenario s = H::bimodal2d_scenario();
  nlohmann::json j = s.to_json();
  H::Scenario back = H::Scenario::from_json(j);
  CHECK(back.to_json().dump() == j.dump());
  CHECK(back.hash() == s.hash());

  H::Scenario other = H::bimodal1d_scenario();
  CHECK(other.hash() != s.hash());

  const std::string path = scratch_dir() + "/scenario.json";
  s.save_file(path);
  H::Scenario loaded = H::Scenario::load_file(path);
  CHECK(loaded.hash() == s.hash());
  CHECK_THROWS_AS(H::Scenario::load_file(scratch_dir() + "/missing.json"),
                  std::runtime_error);
}

TEST_CASE("two-sample distance referee") {
  Rng rng = Rng::stream(1, "test.w1");
  Eigen::MatrixXd a = rng.normal_mat(2, 4000);
  Rng proj = Rng::stream(2, "test.w1_proj");
  CHECK(H::two_sample_distance(a, a, 8, proj) == 0.0);

  // permutation invariance under a fixed projection seed
  Eigen::MatrixXd shuffled = a;
  for (int c = 0; c < shuffled.cols(); ++c) {
    const int other = static_cast<int>(rng.uniform_index(shuffled.cols()));
    shuffled.col(c).swap(shuffled.col(other));
  }
  Eigen::MatrixXd b = rng.normal_mat(2, 4000);
  Rng p1 = Rng::stream(3, "test.w1_fixed");
  Rng p2 = Rng::stream(3, "test.w1_fixed");
  CHECK(H::two_sample_distance(a, b, 8, p1) == H::two_sample_distance(shuffled, b, 8, p2));
}

TEST_CASE("sliced distance of a unit-per-coordinate mean shift matches quadrature") {
  // d-dimensional standard normal against the same shifted by one in every
  // coordinate. The projected shift is ||m|| |u| with u the first coordinate
  // of a random unit vector; its expectation comes from an independent
  // quadrature of the sphere marginal density f(u) ∝ (1-u^2)^((d-3)/2).
  const int d = 8;
  const int n = 10000;
  Rng rng = Rng::stream(4, "test.w1_shift");
  Eigen::MatrixXd a = rng.normal_mat(d, n);
  Eigen::MatrixXd b = rng.normal_mat(d, n);
  b.array() += 1.0;

  const int quad_n = 20001;
  const double h = 2.0 / (quad_n - 1);
  double norm = 0.0, first_abs = 0.0;
  for (int i = 0; i < quad_n; ++i) {
    const double u = -1.0 + i * h;
    const double w = (i == 0 || i == quad_n - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double f = std::pow(std::max(1.0 - u * u, 0.0), (d - 3) / 2.0);
    norm += w * f;
    first_abs += w * std::abs(u) * f;
  }
  const double expected = std::sqrt(double(d)) * first_abs / norm;
  CHECK(expected == doctest::Approx(0.82).epsilon(0.05));  // about 0.8

  Rng proj = Rng::stream(5, "test.w1_shift_proj");
  const double got = H::two_sample_distance(a, b, 64, proj);
  CHECK(std::abs(got - expected) < 0.05);
}

TEST_CASE("experiment csv schemas are stable") {
  const std::string out = scratch_dir() + "/kl";
  H::Scenario s = H::bimodal1d_scenario();
  H::RunReport rep = H::run_experiment("kl-rl-equivalence", s, out);
  CHECK(rep.passed);
  CHECK(first_line(out + "/klrl.csv") == "scenario,lambda_star,flat");

  // deterministic rerun: identical metric values
  H::RunReport rep2 = H::run_experiment("kl-rl-equivalence", s, out);
  REQUIRE(rep.metrics.size() == rep2.metrics.size());
  for (size_t i = 0; i < rep.metrics.size(); ++i)
    CHECK(rep.metrics[i].second.value == rep2.metrics[i].second.value);

  CHECK_THROWS_AS(H::run_experiment("no-such-experiment", s, out),
                  std::invalid_argument);
}

TEST_CASE("identity-suite experiment passes and emits its table") {
  const std::string out = scratch_dir() + "/ident";
  H::Scenario s = H::bimodal1d_scenario();
  H::RunReport rep = H::run_experiment("identity-suite", s, out);
  for (const auto& line : rep.checks) INFO(line);
  CHECK(rep.passed);
  CHECK(first_line(out + "/identities.csv") == "identity,max_err");
  CHECK(!rep.provenance.empty());
}

TEST_CASE("trajectory csv columns") {
  auto g = H::bimodal1d_scenario().data;
  gen::SamplerConfig sc{8, gen::SamplerMode::Sde, 0};
  Rng rng = Rng::stream(6, "test.traj_csv");
  gen::SampleResult res = gen::sample(gen::oracle_velocity(g), 1, sc, 2, rng);
  const std::string path = scratch_dir() + "/traj.csv";
  H::write_trajectories_csv(path, res);
  CHECK(first_line(path) == "chain_id,step,t,z_0");
}

TEST_CASE("interface csv columns") {
  stitch::SearchResult sr;
  stitch::StitchInterface a;
  a.i = 1;
  a.j = 2;
  a.fit_loss = 0.5;
  a.w = Eigen::MatrixXd::Zero(2, 2);
  sr.ranked.push_back(a);
  const std::string path = scratch_dir() + "/iface.csv";
  H::write_interface_csv(path, sr);
  CHECK(first_line(path) == "i,j,fit_loss,selected");
}

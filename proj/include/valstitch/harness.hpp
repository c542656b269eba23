#pragma once

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "valstitch/align_infer.hpp"
#include "valstitch/align_train.hpp"
#include "valstitch/gmm.hpp"
#include "valstitch/reward_model.hpp"
#include "valstitch/stitch.hpp"
#include "valstitch/velocity.hpp"

// Experiment orchestration: scenario configs, seeds, metric aggregation,
// CSV/plot-data emission, and the canned acceptance experiments.
namespace valstitch::harness {

struct Scenario {
  std::string name = "scenario";
  gmm::GmmSpec data;
  gmm::LinearReward reward;
  std::vector<int> gen_hidden = {128, 128, 128};
  gen::FmTrainConfig fm;
  rew::RewardTrainConfig rew_train;
  stitch::StitchTrainConfig stitch_train;
  gen::SamplerConfig sampler{64, gen::SamplerMode::Sde, 0};
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static Scenario from_json(const nlohmann::json& j);
  static Scenario load_file(const std::string& path);
  void save_file(const std::string& path) const;
  std::uint64_t hash() const;  // over the canonical JSON dump
};

// Canned scenarios used by the acceptance experiments.
Scenario bimodal1d_scenario();
Scenario bimodal2d_scenario();

struct Metric {
  double value = 0.0;
  double stderr_of_mean = 0.0;
  long n = 0;
  bool deterministic = false;
};

struct RunReport {
  std::string name;
  std::string provenance;
  bool passed = true;
  double wall_seconds = 0.0;
  std::vector<std::pair<std::string, Metric>> metrics;
  std::vector<std::pair<std::string, double>> counters;
  std::vector<std::string> checks;

  void metric(const std::string& key, double value, double stderr_of_mean = 0.0,
              long n = 0);
  void deterministic_metric(const std::string& key, double value);
  void counter(const std::string& key, double value);
  void check(bool ok, const std::string& what);
  void note(const std::string& what);  // informational line, never fails
  std::string summary() const;
};

// Lazily trains and caches the scenario's models as checkpoints under
// out_dir, keyed by the scenario hash. Deterministic given the scenario seed.
class ArtifactStore {
 public:
  ArtifactStore(Scenario scenario, std::string out_dir);

  const Scenario& scenario() const { return scenario_; }
  const gen::VelocityModel& generator();
  const rew::RewardModel& reward_surrogate();
  const stitch::SearchResult& interface_search();
  const stitch::StitchedValueModel& stitched();

  std::string generator_path() const;
  std::string reward_path() const;
  std::string stitched_path() const;

 private:
  Scenario scenario_;
  std::string out_dir_;
  std::string key_;
  std::optional<gen::VelocityModel> generator_;
  std::optional<rew::RewardModel> reward_;
  std::optional<stitch::SearchResult> search_;
  std::optional<stitch::StitchedValueModel> stitched_;
};

// Referee distance for sample-based acceptance checks (mean over random unit
// projections of the exact 1D W1).
double two_sample_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                           int n_projections, Rng& rng);

std::vector<std::string> experiment_names();
Scenario default_scenario_for(const std::string& experiment);

// Runs one canned experiment (or "acceptance-all") and emits its CSV/plot
// files under out_dir. Deterministic given the scenario seed.
RunReport run_experiment(const std::string& name, const Scenario& scenario,
                         const std::string& out_dir);

// CSV helpers (all CSVs emitted by experiments are schema-stable).
std::string format_double(double x);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
void write_trajectories_csv(const std::string& path, const gen::SampleResult& result);
void write_cost_csv(const std::string& path, const steer::CostReport& cost);
void write_interface_csv(const std::string& path, const stitch::SearchResult& search);

}  // namespace valstitch::harness

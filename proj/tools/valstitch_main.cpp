// Command-line front end: training, sampling, interface search, value
// evaluation, steering, finetuning, and the canned experiments.

#include <cstdio>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "valstitch/harness.hpp"
#include "valstitch/stats.hpp"

using namespace valstitch;
namespace H = valstitch::harness;

namespace {

std::string output_root() {
  const char* env = std::getenv("VALSTITCH_OUT");
  return env && *env ? env : "out";
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

struct EstimatorOptions {
  std::string kind = "analytic";
  std::string scenario_path;
  std::string gen_ckpt;
  std::string stitch_ckpt;
  int mc_rollouts = 16;
  int mc_steps = 64;
  std::uint64_t seed = 0;
};

void add_estimator_flags(CLI::App* cmd, EstimatorOptions& opt) {
  cmd->add_option("--estimator", opt.kind,
                  "stitch|tweedie|mc|analytic|analytic-soft")
      ->capture_default_str();
  cmd->add_option("--stitch", opt.stitch_ckpt, "stitched value model checkpoint");
  cmd->add_option("--rollouts", opt.mc_rollouts, "rollouts per mc evaluation")
      ->capture_default_str();
}

std::unique_ptr<stitch::ValueEstimator> build_estimator(const EstimatorOptions& opt) {
  if (opt.kind == "stitch") {
    if (opt.stitch_ckpt.empty())
      throw CLI::ValidationError("--stitch checkpoint required for the stitch estimator");
    return std::make_unique<stitch::StitchEstimator>(
        stitch::load_stitched(opt.stitch_ckpt));
  }
  H::Scenario scenario = H::Scenario::load_file(opt.scenario_path);
  if (opt.kind == "analytic")
    return std::make_unique<stitch::AnalyticEstimator>(scenario.data, scenario.reward,
                                                       stitch::AnalyticMode::Standard);
  if (opt.kind == "analytic-soft")
    return std::make_unique<stitch::AnalyticEstimator>(scenario.data, scenario.reward,
                                                       stitch::AnalyticMode::Soft);
  if (opt.kind == "tweedie") {
    if (opt.gen_ckpt.empty())
      throw CLI::ValidationError("--gen checkpoint required for the tweedie estimator");
    return std::make_unique<stitch::TweedieEstimator>(
        gen::load_velocity_model(opt.gen_ckpt), rew::analytic_reward(scenario.reward));
  }
  if (opt.kind == "mc") {
    if (opt.gen_ckpt.empty())
      throw CLI::ValidationError("--gen checkpoint required for the mc estimator");
    return std::make_unique<stitch::McEstimator>(
        gen::load_velocity_model(opt.gen_ckpt).as_fn(),
        rew::analytic_reward(scenario.reward), opt.mc_rollouts, opt.mc_steps,
        opt.seed);
  }
  throw CLI::ValidationError("unknown estimator: " + opt.kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stitched value models on noisy latents, desk-scale"};
  app.require_subcommand(1);

  // --- train-flow ---
  std::string scenario_path, out_path;
  auto* train_flow = app.add_subcommand("train-flow", "train the flow generator");
  train_flow->add_option("--scenario", scenario_path)->required();
  train_flow->add_option("--out", out_path, "output checkpoint")->required();
  train_flow->callback([&] {
    H::Scenario s = H::Scenario::load_file(scenario_path);
    Rng init = Rng::stream(s.seed, "artifact.gen_init");
    gen::VelocityModel model = gen::make_velocity_model(s.data.dim(), init, s.gen_hidden);
    gen::TrainHistory hist = gen::train_fm(model, s.data, s.fm);
    gen::save_velocity_model(model, out_path);
    std::printf("trained %d steps, final loss %.6f, wrote %s\n", int(hist.loss.size()),
                hist.loss.empty() ? 0.0 : hist.loss.back(), out_path.c_str());
  });

  // --- train-reward ---
  auto* train_reward = app.add_subcommand("train-reward", "train the reward surrogate");
  train_reward->add_option("--scenario", scenario_path)->required();
  train_reward->add_option("--out", out_path)->required();
  train_reward->callback([&] {
    H::Scenario s = H::Scenario::load_file(scenario_path);
    rew::RewardFitReport report;
    const gmm::LinearReward target = s.reward;
    rew::RewardModel model = rew::train_reward_surrogate(
        s.data.dim(), [target](const Eigen::VectorXd& z) { return target(z); },
        s.rew_train, &report);
    rew::save_reward_model(model, out_path);
    std::printf("held-out mean |err| %.5f, max |err| %.5f, wrote %s\n",
                report.heldout_mean_abs_err, report.heldout_max_abs_err,
                out_path.c_str());
  });

  // --- sample ---
  std::string ckpt_path, mode = "sde";
  int n_steps = 64, n_samples = 1000;
  std::uint64_t seed = 0;
  auto* sample_cmd = app.add_subcommand("sample", "sample the generator");
  sample_cmd->add_option("--ckpt", ckpt_path)->required();
  sample_cmd->add_option("--mode", mode, "ode|sde")->capture_default_str();
  sample_cmd->add_option("--steps", n_steps)->capture_default_str();
  sample_cmd->add_option("--n", n_samples)->capture_default_str();
  sample_cmd->add_option("--seed", seed)->capture_default_str();
  sample_cmd->add_option("--out", out_path, "trajectory csv")->required();
  sample_cmd->callback([&] {
    gen::VelocityModel model = gen::load_velocity_model(ckpt_path);
    gen::SamplerConfig cfg{n_steps,
                           mode == "ode" ? gen::SamplerMode::Ode : gen::SamplerMode::Sde,
                           seed};
    Rng rng = Rng::stream(seed, "cli.sample");
    gen::SampleResult res = gen::sample(model.as_fn(), model.data_dim, cfg, n_samples, rng);
    H::write_trajectories_csv(out_path, res);
    std::printf("wrote %d chains x %d steps to %s\n", n_samples, n_steps,
                out_path.c_str());
  });

  // --- stitch-search ---
  std::string gen_ckpt, rew_ckpt;
  int n_probe = 200;
  auto* search_cmd = app.add_subcommand("stitch-search",
                                        "closed-form interface search over (i, j)");
  search_cmd->add_option("--gen", gen_ckpt)->required();
  search_cmd->add_option("--rew", rew_ckpt)->required();
  search_cmd->add_option("--scenario", scenario_path)->required();
  search_cmd->add_option("--probe", n_probe, "probe-set size")->capture_default_str();
  search_cmd->add_option("--out", out_path, "interface table csv")->required();
  search_cmd->callback([&] {
    H::Scenario s = H::Scenario::load_file(scenario_path);
    gen::VelocityModel generator = gen::load_velocity_model(gen_ckpt);
    rew::RewardModel reward = rew::load_reward_model(rew_ckpt);
    Rng rng = Rng::stream(s.seed, "artifact.probes");
    stitch::ProbeSet probes = stitch::make_probe_set(s.data, n_probe, rng);
    std::vector<int> i_range, j_range;
    for (int i = 1; i < generator.mlp.depth(); ++i) i_range.push_back(i);
    for (int j = 1; j <= std::min(4, reward.depth()); ++j) j_range.push_back(j);
    stitch::SearchResult res =
        stitch::search_interfaces(generator, reward, probes, i_range, j_range);
    H::write_interface_csv(out_path, res);
    std::printf("best interface (i=%d, j=%d), fit loss %.3e, table in %s\n",
                res.best().i, res.best().j, res.best().fit_loss, out_path.c_str());
  });

  // --- stitch-train ---
  std::string interface_str;
  int epochs = 6;
  auto* stitch_cmd =
      app.add_subcommand("stitch-train", "stage-2 value regression of the stitched model");
  stitch_cmd->add_option("--gen", gen_ckpt)->required();
  stitch_cmd->add_option("--rew", rew_ckpt)->required();
  stitch_cmd->add_option("--scenario", scenario_path)->required();
  stitch_cmd->add_option("--interface", interface_str, "i,j (default: search)");
  stitch_cmd->add_option("--epochs", epochs, "training epochs (1000 steps each)")
      ->capture_default_str();
  stitch_cmd->add_option("--out", out_path)->required();
  stitch_cmd->callback([&] {
    H::Scenario s = H::Scenario::load_file(scenario_path);
    gen::VelocityModel generator = gen::load_velocity_model(gen_ckpt);
    rew::RewardModel reward = rew::load_reward_model(rew_ckpt);
    stitch::StitchInterface iface;
    if (interface_str.empty()) {
      Rng rng = Rng::stream(s.seed, "artifact.probes");
      stitch::ProbeSet probes = stitch::make_probe_set(s.data, 200, rng);
      std::vector<int> i_range, j_range;
      for (int i = 1; i < generator.mlp.depth(); ++i) i_range.push_back(i);
      for (int j = 1; j <= std::min(4, reward.depth()); ++j) j_range.push_back(j);
      iface = stitch::search_interfaces(generator, reward, probes, i_range, j_range)
                  .best();
    } else {
      int i = 0, j = 0;
      if (std::sscanf(interface_str.c_str(), "%d,%d", &i, &j) != 2)
        throw CLI::ValidationError("--interface expects i,j");
      Rng rng = Rng::stream(s.seed, "artifact.probes");
      stitch::ProbeSet probes = stitch::make_probe_set(s.data, 200, rng);
      iface = stitch::fit_interface(generator, reward, i, j, probes);
    }
    Rng init = Rng::stream(s.seed, "artifact.stitch_init");
    stitch::StitchedValueModel model =
        stitch::assemble_stitched_model(generator, reward, iface, init);
    stitch::StitchTrainConfig cfg = s.stitch_train;
    cfg.steps = epochs * 1000;
    stitch::StitchTrainHistory hist = stitch::train_stitch(model, s.data, reward, cfg);
    stitch::save_stitched(model, out_path);
    std::printf("interface (i=%d, j=%d), final loss %.6f, wrote %s\n", model.i,
                model.j, hist.loss.empty() ? 0.0 : hist.loss.back(), out_path.c_str());
  });

  // --- eval-value ---
  EstimatorOptions est_opt;
  std::string sigma_grid = "0.1,0.25,0.5,0.75,0.9";
  int eval_n = 200;
  auto* eval_cmd =
      app.add_subcommand("eval-value", "estimator error against the analytic value");
  eval_cmd->add_option("--scenario", est_opt.scenario_path)->required();
  eval_cmd->add_option("--gen", est_opt.gen_ckpt);
  eval_cmd->add_option("--sigma-grid", sigma_grid)->capture_default_str();
  eval_cmd->add_option("--n", eval_n, "points per noise level")->capture_default_str();
  eval_cmd->add_option("--seed", est_opt.seed)->capture_default_str();
  eval_cmd->add_option("--out", out_path)->required();
  add_estimator_flags(eval_cmd, est_opt);
  eval_cmd->callback([&] {
    H::Scenario s = H::Scenario::load_file(est_opt.scenario_path);
    auto estimator = build_estimator(est_opt);
    Rng rng = Rng::stream(est_opt.seed, "cli.eval_value");
    std::vector<std::vector<std::string>> rows;
    for (double sigma : parse_grid(sigma_grid)) {
      std::vector<double> errs(eval_n);
      for (int c = 0; c < eval_n; ++c) {
        Eigen::VectorXd z0 = gmm::sample(s.data, rng);
        Eigen::VectorXd z = (1.0 - sigma) * z0 + sigma * rng.normal_vec(s.data.dim());
        errs[c] = std::abs(estimator->value(z, sigma) -
                           gmm::value(s.data, s.reward, sigma, z));
      }
      auto ms = stats::mean_stderr(errs);
      rows.push_back({estimator->name(), H::format_double(sigma),
                      H::format_double(ms.mean), H::format_double(ms.stderr_of_mean),
                      std::to_string(ms.n)});
    }
    H::write_csv(out_path, {"estimator", "sigma", "mean_abs_err", "stderr", "n"}, rows);
    std::printf("wrote %s\n", out_path.c_str());
  });

  // --- fk-steer ---
  int fk_n = 4, fk_m = 1;
  auto* fk_cmd = app.add_subcommand("fk-steer", "particle steering with resampling");
  fk_cmd->add_option("--gen", est_opt.gen_ckpt)->required();
  fk_cmd->add_option("--scenario", est_opt.scenario_path)->required();
  fk_cmd->add_option("--n", fk_n, "particles")->capture_default_str();
  fk_cmd->add_option("--m", fk_m, "proposals per particle")->capture_default_str();
  fk_cmd->add_option("--steps", n_steps)->capture_default_str();
  fk_cmd->add_option("--seed", seed)->capture_default_str();
  fk_cmd->add_option("--out", out_path)->required();
  add_estimator_flags(fk_cmd, est_opt);
  fk_cmd->callback([&] {
    est_opt.seed = seed;
    est_opt.mc_steps = n_steps;
    auto estimator = build_estimator(est_opt);
    gen::VelocityModel model = gen::load_velocity_model(est_opt.gen_ckpt);
    steer::FkConfig cfg = steer::default_fk_config(n_steps, fk_n, fk_m, seed);
    steer::FkResult res = steer::fk_steer(model.as_fn(), *estimator, model.data_dim, cfg);
    std::vector<std::string> header = {"particle", "value"};
    for (int i = 0; i < model.data_dim; ++i) header.push_back("z_" + std::to_string(i));
    std::vector<std::vector<std::string>> rows;
    for (int n = 0; n < fk_n; ++n) {
      std::vector<std::string> row = {std::to_string(n),
                                      H::format_double(res.last_values[n])};
      for (int i = 0; i < model.data_dim; ++i)
        row.push_back(H::format_double(res.particles(i, n)));
      rows.push_back(std::move(row));
    }
    H::write_csv(out_path, header, rows);
    H::write_cost_csv(out_path + ".cost.csv", res.cost);
    std::printf("wrote %s (+ .cost.csv), %d resampling events\n", out_path.c_str(),
                int(res.ancestry.size()));
  });

  // --- dps ---
  double scale = 1.0;
  auto* dps_cmd = app.add_subcommand("dps", "value-gradient guided sampling");
  dps_cmd->add_option("--gen", est_opt.gen_ckpt)->required();
  dps_cmd->add_option("--scenario", est_opt.scenario_path)->required();
  dps_cmd->add_option("--scale", scale, "guidance scale c")->capture_default_str();
  dps_cmd->add_option("--steps", n_steps)->capture_default_str();
  dps_cmd->add_option("--n", n_samples)->capture_default_str();
  dps_cmd->add_option("--seed", seed)->capture_default_str();
  dps_cmd->add_option("--out", out_path)->required();
  add_estimator_flags(dps_cmd, est_opt);
  dps_cmd->callback([&] {
    est_opt.seed = seed;
    auto estimator = build_estimator(est_opt);
    gen::VelocityModel model = gen::load_velocity_model(est_opt.gen_ckpt);
    steer::GuidanceConfig cfg;
    cfg.scale = scale;
    cfg.sampler.n_steps = n_steps;
    Rng rng = Rng::stream(seed, "cli.dps");
    steer::CostReport cost;
    gen::SampleResult res = steer::guided_sample(model.as_fn(), *estimator,
                                                 model.data_dim, cfg, n_samples, rng,
                                                 &cost);
    H::write_trajectories_csv(out_path, res);
    H::write_cost_csv(out_path + ".cost.csv", cost);
    std::printf("wrote %s (+ .cost.csv)\n", out_path.c_str());
  });

  // --- draft ---
  std::string ft_mode = "value";
  int ft_steps = 300, k_window = 1;
  std::string stop_window = "5,7";
  auto* draft_cmd = app.add_subcommand("draft", "direct reward finetuning");
  draft_cmd->add_option("--gen", est_opt.gen_ckpt)->required();
  draft_cmd->add_option("--scenario", est_opt.scenario_path)->required();
  draft_cmd->add_option("--mode", ft_mode, "terminal|value")->capture_default_str();
  draft_cmd->add_option("--k", k_window, "terminal backprop window")
      ->capture_default_str();
  std::string stop_preset;
  draft_cmd->add_option("--stop-window", stop_window, "a,b grid-index window for tau")
      ->capture_default_str();
  draft_cmd->add_option("--stop-preset", stop_preset,
                        "high|tight-mid|wide|low (overrides --stop-window)");
  draft_cmd->add_option("--steps", ft_steps)->capture_default_str();
  draft_cmd->add_option("--seed", seed)->capture_default_str();
  draft_cmd->add_option("--out", out_path, "per-step csv log")->required();
  add_estimator_flags(draft_cmd, est_opt);
  draft_cmd->callback([&] {
    H::Scenario s = H::Scenario::load_file(est_opt.scenario_path);
    gen::VelocityModel model = gen::load_velocity_model(est_opt.gen_ckpt);
    tune::DraftConfig cfg;
    cfg.k_window = k_window;
    int lo = 0, hi = 0;
    if (std::sscanf(stop_window.c_str(), "%d,%d", &lo, &hi) == 2) {
      cfg.stop_lo = lo;
      cfg.stop_hi = hi;
    }
    if (!stop_preset.empty()) {
      auto [plo, phi] = tune::stop_window_preset(stop_preset, cfg.rollout_steps);
      cfg.stop_lo = plo;
      cfg.stop_hi = phi;
    }
    tune::DraftTrainer trainer(model, cfg);
    est_opt.seed = seed;
    auto estimator = build_estimator(est_opt);
    rew::RewardModel terminal = rew::analytic_reward(s.reward);
    Rng rng = Rng::stream(seed, "cli.draft");
    std::vector<std::vector<std::string>> rows;
    for (int step = 0; step < ft_steps; ++step) {
      const double loss = ft_mode == "terminal" ? trainer.step_terminal(terminal, rng)
                                                : trainer.step_value(*estimator, rng);
      if (step % 10 == 0 || step + 1 == ft_steps) {
        Rng eval = Rng::stream(seed, "cli.draft_eval");
        gen::SamplerConfig sc{cfg.rollout_steps, gen::SamplerMode::Sde, 0};
        auto res = gen::sample(trainer.model().as_fn(), model.data_dim, sc, 64, eval);
        double mean_r = 0;
        for (int c = 0; c < 64; ++c) mean_r += s.reward(res.samples.col(c)) / 64.0;
        rows.push_back({std::to_string(step), H::format_double(loss),
                        H::format_double(mean_r),
                        H::format_double(trainer.rollout_full_evals()),
                        H::format_double(trainer.estimator_prefix_evals())});
      }
    }
    H::write_csv(out_path,
                 {"step", "loss", "mean_reward_fresh_rollout", "full_evals_count",
                  "prefix_evals_count"},
                 rows);
    std::printf("wrote %s\n", out_path.c_str());
  });

  // --- nft ---
  auto* nft_cmd = app.add_subcommand("nft", "reward-weighted forward regression");
  nft_cmd->add_option("--gen", est_opt.gen_ckpt)->required();
  nft_cmd->add_option("--scenario", est_opt.scenario_path)->required();
  nft_cmd->add_option("--mode", ft_mode, "terminal|value")->capture_default_str();
  nft_cmd->add_option("--stop-window", stop_window)->capture_default_str();
  nft_cmd->add_option("--stop-preset", stop_preset,
                      "high|tight-mid|wide|low (overrides --stop-window)");
  nft_cmd->add_option("--steps", ft_steps)->capture_default_str();
  nft_cmd->add_option("--seed", seed)->capture_default_str();
  nft_cmd->add_option("--out", out_path, "per-step csv log")->required();
  add_estimator_flags(nft_cmd, est_opt);
  nft_cmd->callback([&] {
    H::Scenario s = H::Scenario::load_file(est_opt.scenario_path);
    gen::VelocityModel model = gen::load_velocity_model(est_opt.gen_ckpt);
    tune::NftConfig cfg;
    int lo = 0, hi = 0;
    if (std::sscanf(stop_window.c_str(), "%d,%d", &lo, &hi) == 2) {
      cfg.stop_lo = lo;
      cfg.stop_hi = hi;
    }
    if (!stop_preset.empty()) {
      auto [plo, phi] = tune::stop_window_preset(stop_preset, cfg.rollout_steps);
      cfg.stop_lo = plo;
      cfg.stop_hi = phi;
    }
    tune::NftTrainer trainer(model, cfg);
    est_opt.seed = seed;
    auto estimator = build_estimator(est_opt);
    const gmm::LinearReward reward = s.reward;
    auto reward_fn = [reward](const Eigen::VectorXd& z) { return reward(z); };
    Rng rng = Rng::stream(seed, "cli.nft");
    std::vector<std::vector<std::string>> rows;
    for (int step = 0; step < ft_steps; ++step) {
      const double loss = ft_mode == "terminal" ? trainer.step_terminal(reward_fn, rng)
                                                : trainer.step_value(*estimator, rng);
      if (step % 10 == 0 || step + 1 == ft_steps) {
        Rng eval = Rng::stream(seed, "cli.nft_eval");
        gen::SamplerConfig sc{cfg.rollout_steps, gen::SamplerMode::Sde, 0};
        auto res = gen::sample(trainer.model().as_fn(), model.data_dim, sc, 64, eval);
        double mean_r = 0;
        for (int c = 0; c < 64; ++c) mean_r += s.reward(res.samples.col(c)) / 64.0;
        rows.push_back({std::to_string(step), H::format_double(loss),
                        H::format_double(mean_r),
                        H::format_double(trainer.rollout_full_evals()),
                        H::format_double(trainer.estimator_prefix_evals())});
      }
    }
    H::write_csv(out_path,
                 {"step", "loss", "mean_reward_fresh_rollout", "full_evals_count",
                  "prefix_evals_count"},
                 rows);
    std::printf("wrote %s\n", out_path.c_str());
  });

  // --- run / acceptance-all ---
  std::string experiment_name, config_path, run_out;
  auto* run_cmd = app.add_subcommand("run", "run a canned experiment");
  run_cmd->add_option("--name", experiment_name, "experiment name or acceptance-all")
      ->required();
  run_cmd->add_option("--config", config_path, "scenario file (default: canned)");
  run_cmd->add_option("--out", run_out, "output directory (default: $VALSTITCH_OUT)");
  run_cmd->callback([&] {
    const std::string out_dir = run_out.empty() ? output_root() : run_out;
    H::Scenario scenario = config_path.empty()
                               ? H::default_scenario_for(experiment_name)
                               : H::Scenario::load_file(config_path);
    H::RunReport rep = H::run_experiment(experiment_name, scenario, out_dir);
    for (const std::string& line : rep.checks) std::printf("  %s\n", line.c_str());
    std::printf("%s\n", rep.summary().c_str());
    std::exit(rep.passed ? 0 : 1);
  });

  auto* acc_cmd = app.add_subcommand("acceptance-all", "run the full acceptance suite");
  acc_cmd->add_option("--out", run_out, "output directory");
  acc_cmd->callback([&] {
    const std::string out_dir = run_out.empty() ? output_root() : run_out;
    H::RunReport rep =
        H::run_experiment("acceptance-all", H::bimodal1d_scenario(), out_dir);
    for (const std::string& line : rep.checks) std::printf("%s\n", line.c_str());
    std::printf("%s\n", rep.summary().c_str());
    std::exit(rep.passed ? 0 : 1);
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

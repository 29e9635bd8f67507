#pragma once

#include <nlohmann/json.hpp>

#include "devsafe/data.hpp"

namespace devsafe {

enum class Method { kPenalty, kRM, kWCCL, kFinetune };
enum class SelectionPolicy { kBestValDevSafety, kLastIterate };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct HeadsConfig {
    bool enabled = true;
    int rank = 2;
};

// Optional tolerance-targeted schedule block inside "solver". When enabled,
// beta/theta/gamma/eta/iterations are recomputed per run from the surrogate
// constants, the configured batch sizes, and the problem's pair/task counts;
// iterations are additionally capped by max_iterations when positive (the
// raw budget grows like eps^-7).
struct PresetInputs {
    bool enabled = false;
    double epsilon = 0.1;
    double delta = 1.0;
    SmoothnessSurrogates surrogates;
    long long max_iterations = 0;
};

struct ExperimentConfig {
    std::string scenario_path;   // empty = generate inline from scenario_spec
    ScenarioSpec scenario_spec;
    bool inline_scenario = true;
    Method method = Method::kPenalty;
    SolverConfig solver;
    double alpha = 0.0;  // RM / WCCL weight
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<int> rounds;  // target classes for multiround
    std::string out_dir = "out";
    int constraint_samples = 4000;
    int wccl_task_pairs = 200;
    HeadsConfig heads;
    PresetInputs preset;
    SelectionPolicy selection = SelectionPolicy::kBestValDevSafety;
    BaseModelConfig base;
    bool compute_kkt = true;

    void validate() const;

    // The solver config actually used for a run: the preset schedule applied
    // on top of `solver` when enabled, verbatim otherwise.
    SolverConfig effective_solver(int n_pairs, int num_protected) const;
};

// Strict parser: unknown fields anywhere in the document are rejected with
// their full dotted path.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides);

// JSON model container (shape + flat parameters); doubles round-trip exactly.
void save_model(const std::string& path, const ParamVector& p);
ParamVector load_model(const std::string& path);

// One trajectory row as written to trajectory.csv (wall-clock time goes to the
// timing.csv sidecar so the main file stays byte-deterministic).
struct TrajectoryRow {
    long long step = 0;
    double epoch = 0.0;
    double objective = 0.0;
    std::vector<double> h;
    double devsafety_ce_train = 0.0;
    double devsafety_acc_train = 0.0;
    double devsafety_ce_val = 0.0;
    double devsafety_acc_val = 0.0;
    double delta_acc_target = 0.0;
    double kkt_stationarity = 0.0;
    double kkt_violation = 0.0;
    double kkt_complementarity = 0.0;
    std::vector<double> effective_weights;
    double beta_t = 0.0;
    double eta_t = 0.0;
};

struct SeedRunResult {
    std::uint64_t seed = 0;
    std::vector<TrajectoryRow> rows;
    long long selected_step = 0;
    Vector selected_params;
    TrajectoryRow selected;  // metrics at the selected iterate
    std::string trajectory_file;
};

struct DevelopResult {
    std::vector<SeedRunResult> per_seed;
    double retention_ratio_val = 0.0;  // fraction of seeds with DevSafety(acc) >= 0 on val
    double mean_delta_acc = 0.0;
    double std_delta_acc = 0.0;
    std::string summary_file;
};

// Runs method x seeds on one round; writes per-run trajectory.csv/timing.csv
// plus summary.csv under out_dir. Parallel seed workers are capped by the
// DEVSAFE_THREADS environment variable (default 1); files and summary rows
// are emitted in seed order regardless of scheduling.
DevelopResult run_develop(const ExperimentConfig& cfg, const Scenario& scenario,
                          const ParamVector& w_old, const std::string& out_dir,
                          int target_class_override = -1);

struct RoundResult {
    int target_class = 0;
    DevelopResult develop;
    Vector selected_params;  // carried into the next round as w_old
    std::uint64_t selected_seed = 0;
};

// Chains rounds: round r+1's old model is round r's selected model.
std::vector<RoundResult> run_multiround(const ExperimentConfig& cfg,
                                        const Scenario& scenario,
                                        const ParamVector& base_model);

// Recomputes summary statistics from the per-run trajectory files in a
// develop output directory; returns the rebuilt summary text.
std::string recompute_summary(const std::string& develop_dir);

}  // namespace devsafe

#pragma once

#include <functional>
#include <optional>
#include <string>

#include "devsafe/estimators.hpp"

namespace devsafe {

enum class BetaSchedule { kConstant, kCosineIncreasing };
enum class EtaSchedule { kConstant, kCosineDecay };

struct SolverConfig {
    long long iterations = 0;  // T
    double eta = 1e-3;
    EtaSchedule eta_schedule = EtaSchedule::kConstant;
    double beta = 100.0;       // constant value, or the floor of the cosine ramp
    double beta_max = 0.0;     // target of the cosine ramp
    BetaSchedule beta_schedule = BetaSchedule::kConstant;
    double gamma1 = 0.8;
    double gamma2 = 0.6;
    double theta = 1.0;
    int batch_pairs = 32;      // |B|
    int batch_tasks = 0;       // |B_c|; 0 = all tasks
    int batch_constraint = 10; // |B_k|
    int batch_neg_text = 64;   // |B_{1,i}|
    int batch_neg_img = 64;    // |B_{2,i}|
    double tau = 0.1;
    double tau0 = 0.05;
    std::uint64_t seed = 1;
    long long log_every = 100;
    double weight_decay = 0.0;  // decoupled; 0 = off
    long long iters_per_epoch = 0;  // 0 = ceil(n_pairs / batch_pairs)

    void validate() const;
};

double beta_at(const SolverConfig& cfg, long long t);
double eta_at(const SolverConfig& cfg, long long t);

// KKT residual triple at a point, with multipliers lambda_k = (beta/m) max(h_k, 0).
struct KKTReport {
    double stationarity = 0.0;    // |grad F + grad h . lambda|
    double violation = 0.0;       // |max(h, 0)|_2
    double complementarity = 0.0; // lambda^T max(h, 0)
    std::vector<double> h;        // per-task values
};

// The target problem: contrastive objective over pairs plus retention
// constraints, all evaluated against one fixed class-text set.
struct RetentionProblem {
    ModelShape shape;
    std::vector<PairContext> pairs;
    std::vector<ConstraintSpec> constraints;
    std::vector<Vector> class_texts;
    double tau = 0.1;
    double tau0 = 0.05;
};

KKTReport kkt_report(const ParamVector& p, const RetentionProblem& prob, double beta);

// User-supplied smooth problem: the same loop runs with the objective's
// stochastic gradient in place of the pair estimator.
struct GenericProblem {
    int dim = 0;
    std::function<double(const Vector&)> objective;
    std::function<Vector(const Vector&)> objective_grad;
    // Optional noisy gradient; defaults to objective_grad.
    std::function<Vector(const Vector&, RngStream&)> objective_stoch_grad;
    std::vector<std::function<double(const Vector&)>> constraints;
    std::vector<std::function<Vector(const Vector&)>> constraint_grads;
};

KKTReport kkt_report(const Vector& x, const GenericProblem& prob, double beta);

struct LogRecord {
    long long step = 0;   // iterations completed when the record was taken
    double epoch = 0.0;
    double objective = 0.0;        // full-data F
    std::vector<double> h;         // full-data constraint values
    KKTReport kkt;
    std::vector<double> effective_weights;  // beta_t * max(avg_violation, 0)
    double beta_t = 0.0;
    double eta_t = 0.0;
    Vector params;  // flat snapshot
    double wall_ms = 0.0;  // informational; excluded from deterministic outputs
};

using LogCallback = std::function<void(const LogRecord&)>;

// Everything Algorithm 1 reads between iterations; checkpoints serialize this
// struct verbatim so a resumed run replays the identical trajectory.
struct RunState {
    Vector params;
    EstimatorState est;
    std::vector<int> pair_perm;
    std::uint64_t pair_cursor = 0;
    std::array<std::uint64_t, 4> rng_pair{}, rng_neg{}, rng_constraint{};
    long long step = 0;
};

struct RunResult {
    ParamVector final_params;
    Vector final_flat;  // generic problems
    std::vector<LogRecord> trajectory;
};

struct RunOptions {
    LogCallback on_log;
    std::string checkpoint_path;          // per-log checkpoints when nonempty
    std::optional<RunState> resume_from;
    bool compute_kkt = true;              // full-data KKT at log steps
};

RunResult run_penalty(const RetentionProblem& prob, const SolverConfig& cfg,
                      const ParamVector& initial, const RunOptions& opts = {});

RunResult run_penalty(const GenericProblem& prob, const SolverConfig& cfg,
                      const Vector& initial, const RunOptions& opts = {});

// Checkpoint container, version 1. Field order (little-endian):
//   magic "DSCKPT01" | i64 step | u64 param_dim | f64 params[]
//   | u64 n_pairs | f64 avg_ratio_text[] | f64 avg_ratio_img[] | u8 pair_seen[]
//   | u64 n_tasks | f64 avg_violation[] | u8 task_seen[]
//   | u8 momentum_set | f64 momentum[param_dim]
//   | u64 perm_len | i32 pair_perm[] | u64 pair_cursor
//   | u64 rng_pair[4] | u64 rng_neg[4] | u64 rng_constraint[4]
void save_checkpoint(const std::string& path, const RunState& state);
RunState load_checkpoint(const std::string& path);

// Tolerance-targeted hyperparameter schedule computed from user-supplied
// smoothness/variance surrogates. Every intermediate is exposed.
struct SmoothnessSurrogates {
    double lip_g = 1.0;        // L_g
    double smooth_g = 1.0;     // L_{grad g}
    double lip_h = 1.0;        // L_h
    double smooth_h = 1.0;     // L_{grad h}
    double sigma_g = 1.0;
    double sigma_grad_g = 1.0;
    double sigma_h = 1.0;
    double sigma_grad_h = 1.0;
    double ratio_floor = 0.5;  // c_g
    double tau = 0.1;
};

struct ScheduleBatches {
    int pairs = 1;        // |B|
    int tasks = 1;        // |B_c|
    int constraint = 1;   // |B_k|
    int neg_text = 1;     // |B_{1,i}|
    int neg_img = 1;      // |B_{2,i}|
};

struct SchedulePreset {
    double beta = 0.0;
    double theta = 0.0;
    double gamma = 0.0;  // gamma1 == gamma2
    double eta = 0.0;
    double iterations_raw = 0.0;  // eps^-7 * delta^-3 before rounding
    long long iterations = 0;
    // Derived constants and individual min-expression arms.
    double lip_f = 0.0, smooth_f = 0.0, lip_big_f = 0.0, lip_big_h = 0.0;
    double c_grad_g = 0.0, c_grad_h = 0.0;
    double theta_arm_constraint = 0.0, theta_arm_pair = 0.0;
    double gamma_arm_pair = 0.0, gamma_arm_task = 0.0, gamma_arm_variance = 0.0;
    double eta_arm_smooth = 0.0, eta_arm_theta_f = 0.0, eta_arm_theta_h = 0.0;
    double eta_arm_gamma_pair = 0.0, eta_arm_gamma_task = 0.0;

    // Copies the schedule into a config, clamping rates into (0, 1].
    SolverConfig to_config(std::uint64_t seed) const;
};

SchedulePreset schedule_preset(double eps, double delta, const SmoothnessSurrogates& c,
                             const ScheduleBatches& b, int n_pairs, int num_protected);

}  // namespace devsafe

#pragma once

#include "devsafe/losses.hpp"

namespace devsafe {

enum class EvalLoss { kZeroOne, kCrossEntropy };

// Held-out samples for one task.
struct EvalTaskSet {
    int task = 0;
    std::vector<Vector> images;
};

// Per-protected-task held-out sets plus the target-task set, evaluated
// against one fixed class-text collection.
struct EvalSets {
    std::vector<EvalTaskSet> protected_tasks;
    EvalTaskSet target;
    std::vector<Vector> class_texts;
    double tau0 = 0.05;
};

// Mean loss of model p on one task set.
double task_loss(const ParamVector& p, const EvalTaskSet& set,
                 const std::vector<Vector>& class_texts, double tau0, EvalLoss loss);

// min_k ( L_k(old) - L_k(new) ) over the protected held-out sets; nonnegative
// means every protected task was retained.
double dev_safety(const ParamVector& w_new, const ParamVector& w_old,
                  const EvalSets& sets, EvalLoss loss);

// Fraction of runs with nonnegative retention.
double retention_ratio(const std::vector<double>& dev_safety_values);

// Accuracy(new) - Accuracy(old) on the target task set.
double delta_target_acc(const ParamVector& w_new, const ParamVector& w_old,
                        const EvalSets& sets);

// Closed-form generalization slack 4C/n^alpha + 2 sqrt(ln(2m/delta)/(2n)).
struct RetentionSlackInputs {
    std::vector<long long> samples_per_task;  // n_k
    int num_protected = 0;                    // m
    double confidence = 0.05;                 // delta in (0,1)
    double complexity_coeff = 1.0;            // C >= 0
    double complexity_rate = 0.5;             // alpha in (0, 0.5]
};
std::vector<double> retention_slack_bound(const RetentionSlackInputs& in);

// Smallest singular value of the d x m constraint Jacobian, computed through
// an eigen-decomposition of the m x m Gram matrix. heads_on additionally
// includes the U/V blocks of the analytic gradients.
double constraint_jacobian_sigma_min(const ParamVector& p,
                                     const std::vector<ConstraintSpec>& specs,
                                     const std::vector<Vector>& class_texts,
                                     double tau0, bool heads_on);

// Eigenvalue-gain check for the low-rank head augmentation at a point with
// U_k V_k^T = 0. The augmented Jacobian follows the per-task-head structure
// (task k's constraint depends on its own head only): the added blocks are
// grad_W h_k . V_k and grad_W h_k^T . U_k, making the Gram difference
// diagonal. `holds` compares against the two-element-min bound.
struct HeadGainReport {
    double lambda_min_plain = 0.0;      // smallest eigenvalue of J^T J
    double lambda_min_augmented = 0.0;  // lhs
    double bound = 0.0;                 // rhs: lambda_min_plain + min_k min{.,.}
    std::vector<double> diag_gain;      // per-task added Gram diagonal
    bool holds = false;
};
HeadGainReport head_gain_check(const ParamVector& p,
                          const std::vector<ConstraintSpec>& specs,
                          const std::vector<Vector>& class_texts, double tau0);

// beta * max(avg_violation_k, 0) per task, for logging.
std::vector<double> effective_weights(const std::vector<double>& avg_violation,
                                      double beta);

}  // namespace devsafe

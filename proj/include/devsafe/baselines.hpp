#pragma once

#include "devsafe/optimizer.hpp"

namespace devsafe {

enum class BaselineKind { kRM, kWCCL, kFinetune };

struct BaselineConfig {
    BaselineKind kind = BaselineKind::kFinetune;
    double alpha = 0.0;  // WCCL: [0,1]; RM: >= 0

    void validate() const;
};

// Regularization-method objective: target contrastive loss plus
// alpha * (1/m) * sum_k mean live ce loss over D_k. The old model's cached
// losses are constants and are left out of the objective and its gradient.
double rm_objective(const ParamVector& p, const RetentionProblem& prob, double alpha);
Vector rm_grad(const ParamVector& p, const RetentionProblem& prob, double alpha);

// Weighted combination of per-task and target contrastive losses. Protected
// pairs contrast against all training samples outside their own task.
struct WcclProblem {
    std::vector<PairContext> target_pairs;
    std::vector<std::vector<PairContext>> task_pairs;  // one set per protected task
    double tau = 0.1;
};

double wccl_objective(const ParamVector& p, const WcclProblem& prob, double alpha);
Vector wccl_grad(const ParamVector& p, const WcclProblem& prob, double alpha);

// RM / plain-finetune driver. Reuses the penalty loop shape with the
// per-task weight pinned to alpha at every step (finetune: alpha = 0). The
// trajectory schema matches run_penalty so metrics compare directly.
RunResult run_rm(const RetentionProblem& prob, double alpha, const SolverConfig& cfg,
                 const ParamVector& initial, const RunOptions& opts = {});

// WCCL driver; `diag` supplies the retention constraints used only for
// logging h/KKT diagnostics alongside the baseline's own objective.
RunResult run_wccl(const WcclProblem& prob, const RetentionProblem& diag,
                   double alpha, const SolverConfig& cfg, const ParamVector& initial,
                   const RunOptions& opts = {});

}  // namespace devsafe

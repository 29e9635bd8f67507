#include "devsafe/estimators.hpp"

#include <cmath>

namespace devsafe {

EstimatorState::EstimatorState(int num_pairs, int num_tasks, std::size_t param_dim)
    : avg_ratio_text(num_pairs, 1.0),
      avg_ratio_img(num_pairs, 1.0),
      pair_seen(num_pairs, 0),
      avg_violation(num_tasks, 0.0),
      task_seen(num_tasks, 0),
      momentum(Vector::Zero(static_cast<Eigen::Index>(param_dim))) {}

void update_pair_averages(EstimatorState& state, const std::vector<int>& batch,
                          double gamma1, const std::vector<double>& ratio_text,
                          const std::vector<double>& ratio_img) {
    if (!(gamma1 > 0.0 && gamma1 <= 1.0))
        throw ConfigError("update_pair_averages: gamma1 must be in (0, 1]");
    if (batch.size() != ratio_text.size() || batch.size() != ratio_img.size())
        throw EstimatorError("update_pair_averages: batch/estimate size mismatch");
    for (std::size_t b = 0; b < batch.size(); ++b) {
        int i = batch[b];
        if (i < 0 || i >= static_cast<int>(state.avg_ratio_text.size()))
            throw EstimatorError("update_pair_averages: pair index out of range");
        if (!state.pair_seen[i]) {
            state.avg_ratio_text[i] = ratio_text[b];
            state.avg_ratio_img[i] = ratio_img[b];
            state.pair_seen[i] = 1;
        } else {
            state.avg_ratio_text[i] =
                (1.0 - gamma1) * state.avg_ratio_text[i] + gamma1 * ratio_text[b];
            state.avg_ratio_img[i] =
                (1.0 - gamma1) * state.avg_ratio_img[i] + gamma1 * ratio_img[b];
        }
    }
}

void update_constraint_averages(EstimatorState& state, const std::vector<int>& tasks,
                                double gamma2, const std::vector<double>& h_hat) {
    if (!(gamma2 > 0.0 && gamma2 <= 1.0))
        throw ConfigError("update_constraint_averages: gamma2 must be in (0, 1]");
    if (tasks.size() != h_hat.size())
        throw EstimatorError("update_constraint_averages: batch/estimate size mismatch");
    for (std::size_t b = 0; b < tasks.size(); ++b) {
        int k = tasks[b];
        if (k < 0 || k >= static_cast<int>(state.avg_violation.size()))
            throw EstimatorError("update_constraint_averages: task index out of range");
        if (!state.task_seen[k]) {
            state.avg_violation[k] = h_hat[b];
            state.task_seen[k] = 1;
        } else {
            state.avg_violation[k] =
                (1.0 - gamma2) * state.avg_violation[k] + gamma2 * h_hat[b];
        }
    }
}

Vector objective_grad_estimate(const EstimatorState& state, const ParamVector& p,
                               const std::vector<PairContext>& pairs,
                               const std::vector<int>& batch,
                               const std::vector<PairRatioEval>& evals, double tau) {
    if (batch.empty()) throw EstimatorError("objective_grad_estimate: empty batch");
    if (batch.size() != evals.size())
        throw EstimatorError("objective_grad_estimate: batch/eval size mismatch");
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.shape().param_count()));
    const double scale = tau / static_cast<double>(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        int i = batch[b];
        double u1 = state.avg_ratio_text[i];
        double u2 = state.avg_ratio_img[i];
        if (!(u1 > 0.0) || !(u2 > 0.0))
            throw EstimatorError("objective_grad_estimate: nonpositive ratio average");
        accumulate_pair_ratio_grads(p, pairs[i], evals[b], tau, scale / u1,
                                    scale / u2, grad);
    }
    return grad;
}

Vector penalty_grad_estimate(const EstimatorState& state, const ParamVector& p,
                             const std::vector<ConstraintSpec>& specs,
                             const std::vector<Vector>& class_texts, double tau0,
                             const std::vector<int>& task_batch,
                             const std::vector<std::vector<int>>& per_task_batches,
                             double beta) {
    if (task_batch.empty()) throw EstimatorError("penalty_grad_estimate: empty task batch");
    if (task_batch.size() != per_task_batches.size())
        throw EstimatorError("penalty_grad_estimate: task/minibatch size mismatch");
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.shape().param_count()));
    const double scale = 1.0 / static_cast<double>(task_batch.size());
    for (std::size_t b = 0; b < task_batch.size(); ++b) {
        int k = task_batch[b];
        double weight = beta * std::max(state.avg_violation[k], 0.0);
        if (weight == 0.0) continue;
        accumulate_constraint_grad(p, specs[k], class_texts, tau0,
                                   per_task_batches[b], scale * weight, grad);
    }
    return grad;
}

void update_momentum(EstimatorState& state, const Vector& g_obj, const Vector& g_pen,
                     double theta) {
    if (!(theta > 0.0 && theta <= 1.0))
        throw ConfigError("update_momentum: theta must be in (0, 1]");
    if (!state.momentum_set) {
        state.momentum = g_obj + g_pen;
        state.momentum_set = true;
        return;
    }
    state.momentum = (1.0 - theta) * state.momentum + theta * (g_obj + g_pen);
}

}  // namespace devsafe

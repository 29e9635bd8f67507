#pragma once

#include <cstdint>
#include <vector>

#include "devsafe/losses.hpp"

namespace devsafe {

// Moving-average state driven by one optimizer step at a time. Pair averages
// and constraint averages are initialized lazily: the first time an index is
// sampled its average is set to the fresh minibatch estimate instead of
// blending with an arbitrary starting value.
struct EstimatorState {
    std::vector<double> avg_ratio_text;  // one per pair
    std::vector<double> avg_ratio_img;
    std::vector<std::uint8_t> pair_seen;
    std::vector<double> avg_violation;  // one per protected task
    std::vector<std::uint8_t> task_seen;
    Vector momentum;
    bool momentum_set = false;
    std::int64_t step = 0;

    EstimatorState() = default;
    EstimatorState(int num_pairs, int num_tasks, std::size_t param_dim);
};

// Blends sampled pairs' averages toward the fresh estimates with rate gamma1;
// unsampled indices are untouched.
void update_pair_averages(EstimatorState& state, const std::vector<int>& batch,
                          double gamma1, const std::vector<double>& ratio_text,
                          const std::vector<double>& ratio_img);

void update_constraint_averages(EstimatorState& state, const std::vector<int>& tasks,
                                double gamma2, const std::vector<double>& h_hat);

// (tau/|B|) * sum_i (grad ratio_text_i / avg_text_i + grad ratio_img_i / avg_img_i),
// with gradients taken on the sampled negative subsets.
Vector objective_grad_estimate(const EstimatorState& state, const ParamVector& p,
                               const std::vector<PairContext>& pairs,
                               const std::vector<int>& batch,
                               const std::vector<PairRatioEval>& evals, double tau);

// (1/|B_c|) * sum_k beta * max(avg_violation_k, 0) * grad h_hat_k; the
// per-task weight vanishes exactly for satisfied constraints.
Vector penalty_grad_estimate(const EstimatorState& state, const ParamVector& p,
                             const std::vector<ConstraintSpec>& specs,
                             const std::vector<Vector>& class_texts, double tau0,
                             const std::vector<int>& task_batch,
                             const std::vector<std::vector<int>>& per_task_batches,
                             double beta);

// momentum <- (1-theta) * momentum + theta * (g_obj + g_pen); the first call
// sets it directly.
void update_momentum(EstimatorState& state, const Vector& g_obj, const Vector& g_pen,
                     double theta);

}  // namespace devsafe

#include "devsafe/baselines.hpp"

#include <chrono>
#include <cmath>

namespace devsafe {

void BaselineConfig::validate() const {
    if (kind == BaselineKind::kWCCL) {
        if (!(alpha >= 0.0 && alpha <= 1.0))
            throw ConfigError("BaselineConfig: WCCL alpha must be in [0, 1]");
    } else if (kind == BaselineKind::kRM) {
        if (!(alpha >= 0.0)) throw ConfigError("BaselineConfig: RM alpha must be >= 0");
    } else if (alpha != 0.0) {
        throw ConfigError("BaselineConfig: finetune takes no alpha");
    }
}

double rm_objective(const ParamVector& p, const RetentionProblem& prob, double alpha) {
    if (alpha < 0.0) throw ConfigError("rm_objective: alpha must be >= 0");
    double val = objective_value(p, prob.pairs, prob.tau);
    if (alpha == 0.0 || prob.constraints.empty()) return val;
    double reg = 0.0;
    for (const auto& spec : prob.constraints)
        reg += mean_ce_loss(p, spec, prob.class_texts, prob.tau0);
    return val + alpha * reg / static_cast<double>(prob.constraints.size());
}

Vector rm_grad(const ParamVector& p, const RetentionProblem& prob, double alpha) {
    if (alpha < 0.0) throw ConfigError("rm_grad: alpha must be >= 0");
    Vector grad = objective_grad(p, prob.pairs, prob.tau);
    if (alpha == 0.0 || prob.constraints.empty()) return grad;
    const double m = static_cast<double>(prob.constraints.size());
    for (const auto& spec : prob.constraints) {
        // The mean ce gradient equals the constraint gradient: the cached
        // reference term is constant in p.
        grad += (alpha / m) * constraint_grad(p, spec, prob.class_texts, prob.tau0);
    }
    return grad;
}

double wccl_objective(const ParamVector& p, const WcclProblem& prob, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("wccl_objective: alpha must be in [0, 1]");
    double protected_term = 0.0;
    if (alpha > 0.0) {
        if (prob.task_pairs.empty())
            throw EstimatorError("wccl_objective: no protected pair sets");
        for (const auto& set : prob.task_pairs)
            protected_term += objective_value(p, set, prob.tau);
        protected_term /= static_cast<double>(prob.task_pairs.size());
    }
    double target_term =
        alpha < 1.0 ? objective_value(p, prob.target_pairs, prob.tau) : 0.0;
    return alpha * protected_term + (1.0 - alpha) * target_term;
}

Vector wccl_grad(const ParamVector& p, const WcclProblem& prob, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("wccl_grad: alpha must be in [0, 1]");
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.shape().param_count()));
    if (alpha > 0.0) {
        const double m = static_cast<double>(prob.task_pairs.size());
        for (const auto& set : prob.task_pairs)
            grad += (alpha / m) * objective_grad(p, set, prob.tau);
    }
    if (alpha < 1.0)
        grad += (1.0 - alpha) * objective_grad(p, prob.target_pairs, prob.tau);
    return grad;
}

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::vector<int> next_batch_from_perm(RunState& st, RngStream& rng, int n, int batch) {
    batch = std::min(batch, n);
    if (static_cast<int>(st.pair_perm.size()) != n) {
        st.pair_perm.resize(n);
        for (int i = 0; i < n; ++i) st.pair_perm[i] = i;
        st.pair_cursor = static_cast<std::uint64_t>(n);
    }
    if (st.pair_cursor + batch > static_cast<std::uint64_t>(n)) {
        rng.shuffle(st.pair_perm);
        st.pair_cursor = 0;
    }
    std::vector<int> out(st.pair_perm.begin() + st.pair_cursor,
                         st.pair_perm.begin() + st.pair_cursor + batch);
    st.pair_cursor += batch;
    return out;
}

}  // namespace

RunResult run_rm(const RetentionProblem& prob, double alpha, const SolverConfig& cfg,
                 const ParamVector& initial, const RunOptions& opts) {
    cfg.validate();
    if (alpha < 0.0) throw ConfigError("run_rm: alpha must be >= 0");
    const int n_pairs = static_cast<int>(prob.pairs.size());
    const int m = static_cast<int>(prob.constraints.size());
    if (n_pairs == 0) throw ConfigError("run_rm: no pairs");
    if (cfg.tau != prob.tau || cfg.tau0 != prob.tau0)
        throw ConfigError("run_rm: solver temperatures must equal the problem's");
    const std::size_t dim = prob.shape.param_count();
    const int bc = m == 0 ? 0 : (cfg.batch_tasks == 0 ? m : std::min(cfg.batch_tasks, m));

    RunState st;
    RngStream rng_pair, rng_neg, rng_constraint;
    if (opts.resume_from.has_value()) {
        st = *opts.resume_from;
        rng_pair.set_state(st.rng_pair);
        rng_neg.set_state(st.rng_neg);
        rng_constraint.set_state(st.rng_constraint);
    } else {
        st.params = initial.flatten();
        st.est = EstimatorState(n_pairs, m, dim);
        rng_pair = make_stream(cfg.seed, StreamId::kPairSampling);
        rng_neg = make_stream(cfg.seed, StreamId::kNegativeSampling);
        rng_constraint = make_stream(cfg.seed, StreamId::kConstraintSampling);
    }

    const long long epoch_len =
        cfg.iters_per_epoch > 0
            ? cfg.iters_per_epoch
            : (n_pairs + cfg.batch_pairs - 1) / cfg.batch_pairs;
    const double start_ms = now_ms();
    RunResult result;

    auto emit_log = [&](long long completed) {
        ParamVector p = ParamVector::unflatten(prob.shape, st.params);
        LogRecord rec;
        rec.step = completed;
        rec.epoch = static_cast<double>(completed) / static_cast<double>(epoch_len);
        rec.objective = objective_value(p, prob.pairs, prob.tau);
        rec.beta_t = 0.0;
        rec.eta_t = eta_at(cfg, std::max<long long>(completed - 1, 0));
        if (opts.compute_kkt) {
            rec.kkt = kkt_report(p, prob, 0.0);
            rec.h = rec.kkt.h;
        } else {
            for (const auto& spec : prob.constraints)
                rec.h.push_back(constraint_value(p, spec, prob.class_texts, prob.tau0));
        }
        rec.effective_weights.assign(m, alpha);  // constant by construction
        rec.params = st.params;
        rec.wall_ms = now_ms() - start_ms;
        if (!opts.checkpoint_path.empty()) {
            st.rng_pair = rng_pair.state();
            st.rng_neg = rng_neg.state();
            st.rng_constraint = rng_constraint.state();
            save_checkpoint(opts.checkpoint_path, st);
        }
        if (opts.on_log) opts.on_log(rec);
        result.trajectory.push_back(std::move(rec));
    };

    for (long long t = st.step; t < cfg.iterations; ++t) {
        const double eta_t = eta_at(cfg, t);
        std::vector<int> batch = next_batch_from_perm(st, rng_pair, n_pairs,
                                                      cfg.batch_pairs);
        std::vector<int> task_batch =
            m > 0 ? rng_constraint.sample_without_replacement(m, bc)
                  : std::vector<int>{};

        ParamVector p = ParamVector::unflatten(prob.shape, st.params);
        std::vector<PairRatioEval> evals;
        evals.reserve(batch.size());
        std::vector<double> rt(batch.size()), ri(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const PairContext& ctx = prob.pairs[batch[b]];
            std::vector<int> sub1 = rng_neg.sample_without_replacement(
                ctx.neg_texts.size(), std::min(cfg.batch_neg_text, ctx.neg_texts.size()));
            std::vector<int> sub2 = rng_neg.sample_without_replacement(
                ctx.neg_images.size(),
                std::min(cfg.batch_neg_img, ctx.neg_images.size()));
            evals.push_back(eval_pair_ratios(p, ctx, sub1, sub2, prob.tau));
            rt[b] = evals.back().ratio_text;
            ri[b] = evals.back().ratio_img;
        }
        update_pair_averages(st.est, batch, cfg.gamma1, rt, ri);
        Vector g_obj = objective_grad_estimate(st.est, p, prob.pairs, batch, evals,
                                               prob.tau);

        Vector g_reg = Vector::Zero(static_cast<Eigen::Index>(dim));
        if (!task_batch.empty()) {
            std::vector<double> h_hat(task_batch.size());
            std::vector<std::vector<int>> per_task(task_batch.size());
            for (std::size_t b = 0; b < task_batch.size(); ++b) {
                const ConstraintSpec& spec = prob.constraints[task_batch[b]];
                int n_k = static_cast<int>(spec.images.size());
                per_task[b] = rng_constraint.sample_without_replacement(
                    n_k, std::min(cfg.batch_constraint, n_k));
                h_hat[b] = constraint_value(p, spec, prob.class_texts, prob.tau0,
                                            per_task[b]);
            }
            // Averages are maintained for diagnostics; the update weight
            // stays the constant alpha regardless of them.
            update_constraint_averages(st.est, task_batch, cfg.gamma2, h_hat);
            if (alpha > 0.0) {
                double scale = alpha / static_cast<double>(task_batch.size());
                for (std::size_t b = 0; b < task_batch.size(); ++b)
                    accumulate_constraint_grad(p, prob.constraints[task_batch[b]],
                                               prob.class_texts, prob.tau0,
                                               per_task[b], scale, g_reg);
            }
        }

        update_momentum(st.est, g_obj, g_reg, cfg.theta);
        if (!st.est.momentum.allFinite())
            throw DivergenceError("run_rm: non-finite gradient estimate");
        if (cfg.weight_decay > 0.0) st.params *= (1.0 - eta_t * cfg.weight_decay);
        st.params -= eta_t * st.est.momentum;
        if (!st.params.allFinite())
            throw DivergenceError("run_rm: non-finite parameters");
        st.step = t + 1;
        st.est.step = st.step;
        if (st.step % cfg.log_every == 0 || st.step == cfg.iterations)
            emit_log(st.step);
    }

    result.final_params = ParamVector::unflatten(prob.shape, st.params);
    result.final_flat = st.params;
    return result;
}

RunResult run_wccl(const WcclProblem& prob, const RetentionProblem& diag,
                   double alpha, const SolverConfig& cfg, const ParamVector& initial,
                   const RunOptions& opts) {
    cfg.validate();
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("run_wccl: alpha must be in [0, 1]");
    const int n_target = static_cast<int>(prob.target_pairs.size());
    const int m = static_cast<int>(prob.task_pairs.size());
    if (n_target == 0) throw ConfigError("run_wccl: no target pairs");
    if (cfg.tau != prob.tau)
        throw ConfigError("run_wccl: solver tau must equal the problem's");
    const ModelShape shape = initial.shape();
    const std::size_t dim = shape.param_count();
    const int bc = m == 0 ? 0 : (cfg.batch_tasks == 0 ? m : std::min(cfg.batch_tasks, m));

    // One estimator slot per pair: target pairs first, then each task's pairs.
    std::vector<int> task_offsets(m + 1, n_target);
    for (int k = 0; k < m; ++k)
        task_offsets[k + 1] = task_offsets[k] + static_cast<int>(prob.task_pairs[k].size());
    const int total_pairs = task_offsets[m];

    RunState st;
    RngStream rng_pair, rng_neg, rng_constraint;
    if (opts.resume_from.has_value()) {
        st = *opts.resume_from;
        rng_pair.set_state(st.rng_pair);
        rng_neg.set_state(st.rng_neg);
        rng_constraint.set_state(st.rng_constraint);
    } else {
        st.params = initial.flatten();
        st.est = EstimatorState(total_pairs, std::max(m, 1), dim);
        rng_pair = make_stream(cfg.seed, StreamId::kPairSampling);
        rng_neg = make_stream(cfg.seed, StreamId::kNegativeSampling);
        rng_constraint = make_stream(cfg.seed, StreamId::kConstraintSampling);
    }

    const long long epoch_len =
        cfg.iters_per_epoch > 0
            ? cfg.iters_per_epoch
            : (n_target + cfg.batch_pairs - 1) / cfg.batch_pairs;
    const double start_ms = now_ms();
    RunResult result;

    auto emit_log = [&](long long completed) {
        ParamVector p = ParamVector::unflatten(shape, st.params);
        LogRecord rec;
        rec.step = completed;
        rec.epoch = static_cast<double>(completed) / static_cast<double>(epoch_len);
        rec.objective = objective_value(p, prob.target_pairs, prob.tau);
        rec.beta_t = 0.0;
        rec.eta_t = eta_at(cfg, std::max<long long>(completed - 1, 0));
        if (opts.compute_kkt) {
            rec.kkt = kkt_report(p, diag, 0.0);
            rec.h = rec.kkt.h;
        } else {
            for (const auto& spec : diag.constraints)
                rec.h.push_back(constraint_value(p, spec, diag.class_texts, diag.tau0));
        }
        rec.effective_weights.assign(diag.constraints.size(), alpha);
        rec.params = st.params;
        rec.wall_ms = now_ms() - start_ms;
        if (!opts.checkpoint_path.empty()) {
            st.rng_pair = rng_pair.state();
            st.rng_neg = rng_neg.state();
            st.rng_constraint = rng_constraint.state();
            save_checkpoint(opts.checkpoint_path, st);
        }
        if (opts.on_log) opts.on_log(rec);
        result.trajectory.push_back(std::move(rec));
    };

    auto eval_and_update = [&](const ParamVector& p,
                               const std::vector<PairContext>& set,
                               const std::vector<int>& local_batch, int offset,
                               std::vector<PairRatioEval>& evals,
                               std::vector<int>& global_batch) {
        std::vector<double> rt(local_batch.size()), ri(local_batch.size());
        for (std::size_t b = 0; b < local_batch.size(); ++b) {
            const PairContext& ctx = set[local_batch[b]];
            std::vector<int> sub1 = rng_neg.sample_without_replacement(
                ctx.neg_texts.size(), std::min(cfg.batch_neg_text, ctx.neg_texts.size()));
            std::vector<int> sub2 = rng_neg.sample_without_replacement(
                ctx.neg_images.size(),
                std::min(cfg.batch_neg_img, ctx.neg_images.size()));
            evals.push_back(eval_pair_ratios(p, ctx, sub1, sub2, prob.tau));
            rt[b] = evals.back().ratio_text;
            ri[b] = evals.back().ratio_img;
            global_batch.push_back(offset + local_batch[b]);
        }
        std::vector<int> tail(global_batch.end() - local_batch.size(),
                              global_batch.end());
        update_pair_averages(st.est, tail, cfg.gamma1, rt, ri);
    };

    for (long long t = st.step; t < cfg.iterations; ++t) {
        const double eta_t = eta_at(cfg, t);
        ParamVector p = ParamVector::unflatten(shape, st.params);

        Vector grad = Vector::Zero(static_cast<Eigen::Index>(dim));
        const double scale_tau = prob.tau;

        // Target component.
        {
            std::vector<int> local = next_batch_from_perm(st, rng_pair, n_target,
                                                          cfg.batch_pairs);
            std::vector<PairRatioEval> evals;
            std::vector<int> global;
            eval_and_update(p, prob.target_pairs, local, 0, evals, global);
            double coef = (1.0 - alpha) * scale_tau / static_cast<double>(local.size());
            for (std::size_t b = 0; b < local.size(); ++b) {
                int gi = global[b];
                accumulate_pair_ratio_grads(p, prob.target_pairs[local[b]], evals[b],
                                            prob.tau,
                                            coef / st.est.avg_ratio_text[gi],
                                            coef / st.est.avg_ratio_img[gi], grad);
            }
        }

        // Protected components.
        if (m > 0 && alpha > 0.0) {
            std::vector<int> task_batch = rng_constraint.sample_without_replacement(m, bc);
            for (int k : task_batch) {
                const auto& set = prob.task_pairs[k];
                int n_k = static_cast<int>(set.size());
                if (n_k == 0) continue;
                std::vector<int> local = rng_constraint.sample_without_replacement(
                    n_k, std::min(cfg.batch_constraint, n_k));
                std::vector<PairRatioEval> evals;
                std::vector<int> global;
                eval_and_update(p, set, local, task_offsets[k], evals, global);
                double coef = alpha / static_cast<double>(task_batch.size()) *
                              scale_tau / static_cast<double>(local.size());
                for (std::size_t b = 0; b < local.size(); ++b) {
                    int gi = global[b];
                    accumulate_pair_ratio_grads(p, set[local[b]], evals[b], prob.tau,
                                                coef / st.est.avg_ratio_text[gi],
                                                coef / st.est.avg_ratio_img[gi], grad);
                }
            }
        }

        Vector zero = Vector::Zero(static_cast<Eigen::Index>(dim));
        update_momentum(st.est, grad, zero, cfg.theta);
        if (!st.est.momentum.allFinite())
            throw DivergenceError("run_wccl: non-finite gradient estimate");
        if (cfg.weight_decay > 0.0) st.params *= (1.0 - eta_t * cfg.weight_decay);
        st.params -= eta_t * st.est.momentum;
        if (!st.params.allFinite())
            throw DivergenceError("run_wccl: non-finite parameters");
        st.step = t + 1;
        st.est.step = st.step;
        if (st.step % cfg.log_every == 0 || st.step == cfg.iterations)
            emit_log(st.step);
    }

    result.final_params = ParamVector::unflatten(shape, st.params);
    result.final_flat = st.params;
    return result;
}

}  // namespace devsafe

#include "devsafe/optimizer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace devsafe {

void SolverConfig::validate() const {
    if (iterations < 0) throw ConfigError("SolverConfig: iterations must be >= 0");
    if (!(eta > 0.0)) throw ConfigError("SolverConfig: eta must be > 0");
    if (!(beta >= 0.0)) throw ConfigError("SolverConfig: beta must be >= 0");
    if (beta_schedule == BetaSchedule::kCosineIncreasing && !(beta_max >= beta))
        throw ConfigError("SolverConfig: beta_max must be >= beta for the cosine ramp");
    auto rate = [](double v, const char* name) {
        if (!(v > 0.0 && v <= 1.0))
            throw ConfigError(std::string("SolverConfig: ") + name +
                              " must be in (0, 1]");
    };
    rate(gamma1, "gamma1");
    rate(gamma2, "gamma2");
    rate(theta, "theta");
    if (batch_pairs < 1 || batch_constraint < 1 || batch_neg_text < 1 ||
        batch_neg_img < 1 || batch_tasks < 0)
        throw ConfigError("SolverConfig: batch sizes must be >= 1 (batch_tasks may be 0 = all)");
    if (!(tau > 0.0) || !(tau0 > 0.0))
        throw ConfigError("SolverConfig: temperatures must be > 0");
    if (log_every < 1) throw ConfigError("SolverConfig: log_every must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("SolverConfig: weight_decay must be >= 0");
    if (iters_per_epoch < 0) throw ConfigError("SolverConfig: iters_per_epoch must be >= 0");
}

double beta_at(const SolverConfig& cfg, long long t) {
    if (cfg.beta_schedule == BetaSchedule::kConstant) return cfg.beta;
    if (cfg.iterations <= 0) return cfg.beta;
    double frac = static_cast<double>(t) / static_cast<double>(cfg.iterations);
    return cfg.beta + (cfg.beta_max - cfg.beta) * (1.0 - std::cos(M_PI * frac)) / 2.0;
}

double eta_at(const SolverConfig& cfg, long long t) {
    if (cfg.eta_schedule == EtaSchedule::kConstant) return cfg.eta;
    if (cfg.iterations <= 0) return cfg.eta;
    double frac = static_cast<double>(t) / static_cast<double>(cfg.iterations);
    return cfg.eta * (1.0 + std::cos(M_PI * frac)) / 2.0;
}

KKTReport kkt_report(const ParamVector& p, const RetentionProblem& prob, double beta) {
    KKTReport rep;
    const double m = static_cast<double>(prob.constraints.size());
    Vector stat = objective_grad(p, prob.pairs, prob.tau);
    double viol_sq = 0.0, comp = 0.0;
    rep.h.reserve(prob.constraints.size());
    for (const auto& spec : prob.constraints) {
        double h = constraint_value(p, spec, prob.class_texts, prob.tau0);
        rep.h.push_back(h);
        double hp = std::max(h, 0.0);
        double lambda = beta / m * hp;
        viol_sq += hp * hp;
        comp += lambda * hp;
        if (lambda != 0.0)
            stat += lambda * constraint_grad(p, spec, prob.class_texts, prob.tau0);
    }
    rep.stationarity = stat.norm();
    rep.violation = std::sqrt(viol_sq);
    rep.complementarity = comp;
    return rep;
}

KKTReport kkt_report(const Vector& x, const GenericProblem& prob, double beta) {
    KKTReport rep;
    const double m = static_cast<double>(prob.constraints.size());
    Vector stat = prob.objective_grad(x);
    double viol_sq = 0.0, comp = 0.0;
    rep.h.reserve(prob.constraints.size());
    for (std::size_t k = 0; k < prob.constraints.size(); ++k) {
        double h = prob.constraints[k](x);
        rep.h.push_back(h);
        double hp = std::max(h, 0.0);
        double lambda = beta / m * hp;
        viol_sq += hp * hp;
        comp += lambda * hp;
        if (lambda != 0.0) stat += lambda * prob.constraint_grads[k](x);
    }
    rep.stationarity = stat.norm();
    rep.violation = std::sqrt(viol_sq);
    rep.complementarity = comp;
    return rep;
}

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr double kDivergenceBound = 1e12;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
    write_raw(os, static_cast<std::uint64_t>(v.size()));
    if (!v.empty())
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("checkpoint: truncated file");
    return v;
}

template <typename T>
std::vector<T> read_vec(std::istream& is) {
    auto n = read_raw<std::uint64_t>(is);
    std::vector<T> v(n);
    if (n) {
        is.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(n * sizeof(T)));
        if (!is) throw ParseError("checkpoint: truncated array");
    }
    return v;
}

std::vector<int> next_pair_batch(RunState& st, RngStream& rng, int n_pairs,
                                 int batch) {
    batch = std::min(batch, n_pairs);
    if (static_cast<int>(st.pair_perm.size()) != n_pairs) {
        st.pair_perm.resize(n_pairs);
        for (int i = 0; i < n_pairs; ++i) st.pair_perm[i] = i;
        st.pair_cursor = static_cast<std::uint64_t>(n_pairs);  // force reshuffle
    }
    if (st.pair_cursor + batch > static_cast<std::uint64_t>(n_pairs)) {
        rng.shuffle(st.pair_perm);
        st.pair_cursor = 0;
    }
    std::vector<int> out(st.pair_perm.begin() + st.pair_cursor,
                         st.pair_perm.begin() + st.pair_cursor + batch);
    st.pair_cursor += batch;
    return out;
}

void guard_finite(const Vector& v, const char* what, const std::string& ckpt) {
    if (!v.allFinite())
        throw DivergenceError(std::string("non-finite ") + what +
                              (ckpt.empty() ? "" : "; last checkpoint: " + ckpt));
}

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

void save_checkpoint(const std::string& path, const RunState& state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ParseError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_raw(os, static_cast<std::int64_t>(state.step));
    write_raw(os, static_cast<std::uint64_t>(state.params.size()));
    os.write(reinterpret_cast<const char*>(state.params.data()),
             static_cast<std::streamsize>(state.params.size() * sizeof(double)));
    write_vec(os, state.est.avg_ratio_text);
    write_vec(os, state.est.avg_ratio_img);
    write_vec(os, state.est.pair_seen);
    write_vec(os, state.est.avg_violation);
    write_vec(os, state.est.task_seen);
    write_raw(os, static_cast<std::uint8_t>(state.est.momentum_set ? 1 : 0));
    os.write(reinterpret_cast<const char*>(state.est.momentum.data()),
             static_cast<std::streamsize>(state.est.momentum.size() * sizeof(double)));
    write_vec(os, state.pair_perm);
    write_raw(os, state.pair_cursor);
    for (auto w : state.rng_pair) write_raw(os, w);
    for (auto w : state.rng_neg) write_raw(os, w);
    for (auto w : state.rng_constraint) write_raw(os, w);
    if (!os) throw ParseError("checkpoint write failed: " + path);
}

RunState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw ParseError("checkpoint: bad magic in " + path);
    RunState st;
    st.step = read_raw<std::int64_t>(is);
    auto dim = read_raw<std::uint64_t>(is);
    st.params.resize(static_cast<Eigen::Index>(dim));
    is.read(reinterpret_cast<char*>(st.params.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    st.est.avg_ratio_text = read_vec<double>(is);
    st.est.avg_ratio_img = read_vec<double>(is);
    st.est.pair_seen = read_vec<std::uint8_t>(is);
    st.est.avg_violation = read_vec<double>(is);
    st.est.task_seen = read_vec<std::uint8_t>(is);
    st.est.momentum_set = read_raw<std::uint8_t>(is) != 0;
    st.est.momentum.resize(static_cast<Eigen::Index>(dim));
    is.read(reinterpret_cast<char*>(st.est.momentum.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    st.pair_perm = read_vec<int>(is);
    st.pair_cursor = read_raw<std::uint64_t>(is);
    for (auto& w : st.rng_pair) w = read_raw<std::uint64_t>(is);
    for (auto& w : st.rng_neg) w = read_raw<std::uint64_t>(is);
    for (auto& w : st.rng_constraint) w = read_raw<std::uint64_t>(is);
    if (!is) throw ParseError("checkpoint: truncated file " + path);
    return st;
}

RunResult run_penalty(const RetentionProblem& prob, const SolverConfig& cfg,
                      const ParamVector& initial, const RunOptions& opts) {
    cfg.validate();
    const int n_pairs = static_cast<int>(prob.pairs.size());
    const int m = static_cast<int>(prob.constraints.size());
    if (n_pairs == 0) throw ConfigError("run_penalty: no pairs");
    if (m == 0) throw ConfigError("run_penalty: no constraints");
    const std::size_t dim = prob.shape.param_count();
    const int bc = cfg.batch_tasks == 0 ? m : std::min(cfg.batch_tasks, m);
    if (cfg.tau != prob.tau || cfg.tau0 != prob.tau0)
        throw ConfigError("run_penalty: solver temperatures must equal the problem's");

    RunState st;
    RngStream rng_pair, rng_neg, rng_constraint;
    if (opts.resume_from.has_value()) {
        st = *opts.resume_from;
        if (static_cast<std::size_t>(st.params.size()) != dim)
            throw ShapeError("run_penalty: resume state dimension mismatch");
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
        rec.beta_t = beta_at(cfg, std::max<long long>(completed - 1, 0));
        rec.eta_t = eta_at(cfg, std::max<long long>(completed - 1, 0));
        if (opts.compute_kkt) {
            rec.kkt = kkt_report(p, prob, rec.beta_t);
            rec.h = rec.kkt.h;
        } else {
            rec.h.reserve(m);
            for (const auto& spec : prob.constraints)
                rec.h.push_back(constraint_value(p, spec, prob.class_texts, prob.tau0));
        }
        rec.effective_weights.reserve(m);
        for (int k = 0; k < m; ++k)
            rec.effective_weights.push_back(
                rec.beta_t * std::max(st.est.avg_violation[k], 0.0));
        rec.params = st.params;
        rec.wall_ms = now_ms() - start_ms;
        if (std::abs(rec.objective) > kDivergenceBound)
            throw DivergenceError("objective exceeded divergence bound" +
                                  (opts.checkpoint_path.empty()
                                       ? std::string()
                                       : "; last checkpoint: " + opts.checkpoint_path));
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
        const double beta_t = beta_at(cfg, t);
        const double eta_t = eta_at(cfg, t);

        std::vector<int> batch = next_pair_batch(st, rng_pair, n_pairs, cfg.batch_pairs);
        std::vector<int> task_batch = rng_constraint.sample_without_replacement(m, bc);

        ParamVector p = ParamVector::unflatten(prob.shape, st.params);

        std::vector<PairRatioEval> evals;
        evals.reserve(batch.size());
        std::vector<double> rt(batch.size()), ri(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const PairContext& ctx = prob.pairs[batch[b]];
            int pool1 = ctx.neg_texts.size();
            int pool2 = ctx.neg_images.size();
            std::vector<int> sub1 = rng_neg.sample_without_replacement(
                pool1, std::min(cfg.batch_neg_text, pool1));
            std::vector<int> sub2 = rng_neg.sample_without_replacement(
                pool2, std::min(cfg.batch_neg_img, pool2));
            evals.push_back(eval_pair_ratios(p, ctx, sub1, sub2, prob.tau));
            rt[b] = evals.back().ratio_text;
            ri[b] = evals.back().ratio_img;
        }
        update_pair_averages(st.est, batch, cfg.gamma1, rt, ri);
        Vector g_obj = objective_grad_estimate(st.est, p, prob.pairs, batch, evals,
                                               prob.tau);

        std::vector<std::vector<int>> per_task;
        per_task.reserve(task_batch.size());
        std::vector<double> h_hat(task_batch.size());
        for (std::size_t b = 0; b < task_batch.size(); ++b) {
            const ConstraintSpec& spec = prob.constraints[task_batch[b]];
            int n_k = static_cast<int>(spec.images.size());
            per_task.push_back(rng_constraint.sample_without_replacement(
                n_k, std::min(cfg.batch_constraint, n_k)));
            h_hat[b] = constraint_value(p, spec, prob.class_texts, prob.tau0,
                                        per_task.back());
        }
        update_constraint_averages(st.est, task_batch, cfg.gamma2, h_hat);
        Vector g_pen = penalty_grad_estimate(st.est, p, prob.constraints,
                                             prob.class_texts, prob.tau0, task_batch,
                                             per_task, beta_t);

        update_momentum(st.est, g_obj, g_pen, cfg.theta);
        guard_finite(st.est.momentum, "gradient estimate", opts.checkpoint_path);

        if (cfg.weight_decay > 0.0)
            st.params *= (1.0 - eta_t * cfg.weight_decay);
        st.params -= eta_t * st.est.momentum;
        guard_finite(st.params, "parameters", opts.checkpoint_path);

        st.step = t + 1;
        st.est.step = st.step;
        if (st.step % cfg.log_every == 0 || st.step == cfg.iterations)
            emit_log(st.step);
    }

    result.final_params = ParamVector::unflatten(prob.shape, st.params);
    result.final_flat = st.params;
    return result;
}

RunResult run_penalty(const GenericProblem& prob, const SolverConfig& cfg,
                      const Vector& initial, const RunOptions& opts) {
    cfg.validate();
    if (prob.dim != initial.size())
        throw ShapeError("run_penalty: initial point dimension mismatch");
    const int m = static_cast<int>(prob.constraints.size());
    if (prob.constraints.size() != prob.constraint_grads.size())
        throw ConfigError("run_penalty: constraint value/grad count mismatch");
    const int bc = m == 0 ? 0 : (cfg.batch_tasks == 0 ? m : std::min(cfg.batch_tasks, m));

    RunState st;
    RngStream rng_neg, rng_constraint;
    if (opts.resume_from.has_value()) {
        st = *opts.resume_from;
        rng_neg.set_state(st.rng_neg);
        rng_constraint.set_state(st.rng_constraint);
    } else {
        st.params = initial;
        st.est = EstimatorState(0, m, static_cast<std::size_t>(prob.dim));
        rng_neg = make_stream(cfg.seed, StreamId::kNegativeSampling);
        rng_constraint = make_stream(cfg.seed, StreamId::kConstraintSampling);
    }

    std::function<Vector(const Vector&, RngStream&)> stoch_grad =
        prob.objective_stoch_grad;
    if (!stoch_grad)
        stoch_grad = [&prob](const Vector& x, RngStream&) {
            return prob.objective_grad(x);
        };
    const double start_ms = now_ms();
    RunResult result;

    auto emit_log = [&](long long completed) {
        LogRecord rec;
        rec.step = completed;
        rec.epoch = static_cast<double>(completed);
        rec.objective = prob.objective(st.params);
        rec.beta_t = beta_at(cfg, std::max<long long>(completed - 1, 0));
        rec.eta_t = eta_at(cfg, std::max<long long>(completed - 1, 0));
        if (opts.compute_kkt) {
            rec.kkt = kkt_report(st.params, prob, rec.beta_t);
            rec.h = rec.kkt.h;
        } else {
            for (const auto& hk : prob.constraints) rec.h.push_back(hk(st.params));
        }
        for (int k = 0; k < m; ++k)
            rec.effective_weights.push_back(
                rec.beta_t * std::max(st.est.avg_violation[k], 0.0));
        rec.params = st.params;
        rec.wall_ms = now_ms() - start_ms;
        if (std::abs(rec.objective) > kDivergenceBound)
            throw DivergenceError("objective exceeded divergence bound");
        if (!opts.checkpoint_path.empty()) {
            st.rng_neg = rng_neg.state();
            st.rng_constraint = rng_constraint.state();
            save_checkpoint(opts.checkpoint_path, st);
        }
        if (opts.on_log) opts.on_log(rec);
        result.trajectory.push_back(std::move(rec));
    };

    for (long long t = st.step; t < cfg.iterations; ++t) {
        const double beta_t = beta_at(cfg, t);
        const double eta_t = eta_at(cfg, t);

        Vector g_obj = stoch_grad(st.params, rng_neg);
        Vector g_pen = Vector::Zero(prob.dim);
        if (m > 0) {
            std::vector<int> task_batch =
                rng_constraint.sample_without_replacement(m, bc);
            std::vector<double> h_hat(task_batch.size());
            for (std::size_t b = 0; b < task_batch.size(); ++b)
                h_hat[b] = prob.constraints[task_batch[b]](st.params);
            update_constraint_averages(st.est, task_batch, cfg.gamma2, h_hat);
            for (std::size_t b = 0; b < task_batch.size(); ++b) {
                int k = task_batch[b];
                double weight = beta_t * std::max(st.est.avg_violation[k], 0.0);
                if (weight == 0.0) continue;
                g_pen += (weight / static_cast<double>(task_batch.size())) *
                         prob.constraint_grads[k](st.params);
            }
        }

        update_momentum(st.est, g_obj, g_pen, cfg.theta);
        guard_finite(st.est.momentum, "gradient estimate", opts.checkpoint_path);
        if (cfg.weight_decay > 0.0) st.params *= (1.0 - eta_t * cfg.weight_decay);
        st.params -= eta_t * st.est.momentum;
        guard_finite(st.params, "parameters", opts.checkpoint_path);
        st.step = t + 1;
        st.est.step = st.step;
        if (st.step % cfg.log_every == 0 || st.step == cfg.iterations)
            emit_log(st.step);
    }

    result.final_flat = st.params;
    return result;
}

SolverConfig SchedulePreset::to_config(std::uint64_t seed) const {
    SolverConfig cfg;
    cfg.iterations = iterations;
    cfg.eta = eta;
    cfg.beta = beta;
    cfg.gamma1 = std::min(gamma, 1.0);
    cfg.gamma2 = std::min(gamma, 1.0);
    cfg.theta = std::min(theta, 1.0);
    cfg.seed = seed;
    return cfg;
}

SchedulePreset schedule_preset(double eps, double delta, const SmoothnessSurrogates& c,
                             const ScheduleBatches& b, int n_pairs,
                             int num_protected) {
    if (!(eps > 0.0) || !(delta > 0.0))
        throw ConfigError("schedule_preset: eps and delta must be > 0");
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0))
            throw ConfigError(std::string("schedule_preset: ") + name + " must be > 0");
    };
    positive(c.lip_g, "lip_g");
    positive(c.smooth_g, "smooth_g");
    positive(c.lip_h, "lip_h");
    positive(c.smooth_h, "smooth_h");
    positive(c.sigma_g, "sigma_g");
    positive(c.sigma_grad_g, "sigma_grad_g");
    positive(c.sigma_h, "sigma_h");
    positive(c.sigma_grad_h, "sigma_grad_h");
    positive(c.ratio_floor, "ratio_floor");
    positive(c.tau, "tau");
    if (b.pairs < 1 || b.tasks < 1 || b.constraint < 1 || b.neg_text < 1 ||
        b.neg_img < 1)
        throw ConfigError("schedule_preset: batch sizes must be >= 1");
    if (n_pairs < 1 || num_protected < 1)
        throw ConfigError("schedule_preset: n_pairs and num_protected must be >= 1");

    SchedulePreset out;
    out.lip_f = c.tau / c.ratio_floor;
    out.smooth_f = c.tau / (c.ratio_floor * c.ratio_floor);
    out.lip_big_f = 2.0 * (c.smooth_g * out.lip_f + out.smooth_f * c.lip_g * c.lip_g);
    out.lip_big_h = 2.0 * c.smooth_h + c.lip_h * c.lip_h;
    out.c_grad_g = c.sigma_grad_g + c.lip_g;
    out.c_grad_h = c.sigma_grad_h + c.lip_h;

    out.beta = 1.0 / (eps * delta);

    const double e2 = eps * eps;
    const double e4 = e2 * e2;
    const double d2 = delta * delta;
    out.theta_arm_constraint =
        e4 * d2 * std::min(b.tasks, b.constraint) /
        (672.0 * (c.sigma_grad_h * c.sigma_grad_h + c.lip_h * c.lip_h));
    out.theta_arm_pair =
        e2 * std::min(b.pairs, std::min(b.neg_text, b.neg_img)) /
        (1344.0 * out.lip_f * out.lip_f *
         (c.sigma_grad_g * c.sigma_grad_g + c.lip_g * c.lip_g));
    out.theta = std::min(out.theta_arm_constraint, out.theta_arm_pair);

    out.gamma_arm_pair = 5.0 * n_pairs * out.theta / (3.0 * b.pairs);
    out.gamma_arm_task = 5.0 * num_protected * out.theta / (3.0 * b.tasks);
    out.gamma_arm_variance =
        e4 * d2 * b.constraint /
        (26880.0 * c.sigma_h * c.sigma_h * out.c_grad_h * out.c_grad_h);
    out.gamma = std::min({out.gamma_arm_pair, out.gamma_arm_task,
                          out.gamma_arm_variance});

    const double sqrt3 = std::sqrt(3.0);
    const double sqrt6 = std::sqrt(6.0);
    out.eta_arm_smooth = 1.0 / (12.0 * (out.lip_big_f + out.beta * out.lip_big_h));
    out.eta_arm_theta_f = out.theta / (8.0 * sqrt3 * out.lip_big_f);
    out.eta_arm_theta_h = out.theta / (8.0 * sqrt3 * out.lip_big_h * out.beta);
    out.eta_arm_gamma_pair =
        out.gamma * b.pairs / (40.0 * sqrt6 * c.lip_g * out.lip_f * out.c_grad_g *
                               static_cast<double>(n_pairs));
    out.eta_arm_gamma_task =
        out.gamma * b.tasks / (40.0 * sqrt6 * out.beta * c.lip_h * out.c_grad_h *
                               static_cast<double>(num_protected));
    out.eta = std::min({out.eta_arm_smooth, out.eta_arm_theta_f, out.eta_arm_theta_h,
                        out.eta_arm_gamma_pair, out.eta_arm_gamma_task});

    out.iterations_raw = std::pow(eps, -7.0) * std::pow(delta, -3.0);
    out.iterations = static_cast<long long>(std::ceil(out.iterations_raw));
    return out;
}

}  // namespace devsafe

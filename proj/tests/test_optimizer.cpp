#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "devsafe/optimizer.hpp"
#include "helpers.hpp"

using namespace devsafe;
using namespace devsafe::test;

namespace {

GenericProblem one_d_problem() {
    GenericProblem prob;
    prob.dim = 1;
    prob.objective = [](const Vector& w) { return (w[0] - 1.0) * (w[0] - 1.0); };
    prob.objective_grad = [](const Vector& w) {
        Vector g(1);
        g[0] = 2.0 * (w[0] - 1.0);
        return g;
    };
    prob.constraints = {[](const Vector& w) { return w[0]; }};
    prob.constraint_grads = {[](const Vector&) {
        Vector g(1);
        g[0] = 1.0;
        return g;
    }};
    return prob;
}

GenericProblem two_d_problem() {
    GenericProblem prob;
    prob.dim = 2;
    prob.objective = [](const Vector& w) {
        return 0.5 * ((w[0] - 1.0) * (w[0] - 1.0) + (w[1] - 1.0) * (w[1] - 1.0));
    };
    prob.objective_grad = [](const Vector& w) {
        Vector g(2);
        g << w[0] - 1.0, w[1] - 1.0;
        return g;
    };
    prob.constraints = {[](const Vector& w) { return w[0]; }};
    prob.constraint_grads = {[](const Vector&) {
        Vector g(2);
        g << 1.0, 0.0;
        return g;
    }};
    return prob;
}

SolverConfig full_information(long long T, double eta, double beta) {
    SolverConfig cfg;
    cfg.iterations = T;
    cfg.eta = eta;
    cfg.beta = beta;
    cfg.tau = 0.5;
    cfg.tau0 = 0.5;
    cfg.gamma1 = 1.0;
    cfg.gamma2 = 1.0;
    cfg.theta = 1.0;
    cfg.batch_pairs = 1 << 20;
    cfg.batch_tasks = 0;
    cfg.batch_constraint = 1 << 20;
    cfg.batch_neg_text = 1 << 20;
    cfg.batch_neg_img = 1 << 20;
    cfg.log_every = T > 0 ? T : 1;
    return cfg;
}

}  // namespace

TEST_CASE("zero iterations return the start unchanged with an empty trajectory") {
    RngStream rng(61, 1);
    ModelShape s = small_shape();
    ParamVector w0 = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w0, 2, 3, 2, 4);
    SolverConfig cfg = full_information(0, 1e-3, 10.0);
    RunResult res = run_penalty(prob, cfg, w0);
    CHECK(res.trajectory.empty());
    CHECK((res.final_params.flatten() - w0.flatten()).norm() == 0.0);
}

TEST_CASE("beta and eta schedules") {
    SolverConfig cfg;
    cfg.iterations = 100;
    cfg.beta = 3.0;
    cfg.beta_max = 11.0;
    cfg.beta_schedule = BetaSchedule::kCosineIncreasing;
    CHECK(beta_at(cfg, 0) == doctest::Approx(3.0));
    CHECK(beta_at(cfg, 50) == doctest::Approx(7.0));   // midpoint = (min+max)/2
    CHECK(beta_at(cfg, 100) == doctest::Approx(11.0));
    cfg.beta_schedule = BetaSchedule::kConstant;
    CHECK(beta_at(cfg, 77) == 3.0);

    cfg.eta = 0.5;
    cfg.eta_schedule = EtaSchedule::kCosineDecay;
    CHECK(eta_at(cfg, 0) == doctest::Approx(0.5));
    CHECK(eta_at(cfg, 50) == doctest::Approx(0.25));
    cfg.eta_schedule = EtaSchedule::kConstant;
    CHECK(eta_at(cfg, 99) == 0.5);
}

TEST_CASE("schedule preset arithmetic") {
    SmoothnessSurrogates c;
    c.lip_g = 1.5;
    c.smooth_g = 2.0;
    c.lip_h = 0.8;
    c.smooth_h = 1.2;
    c.sigma_g = 0.6;
    c.sigma_grad_g = 0.9;
    c.sigma_h = 0.5;
    c.sigma_grad_h = 0.7;
    c.ratio_floor = 0.4;
    c.tau = 0.1;
    ScheduleBatches b;
    b.pairs = 16;
    b.tasks = 4;
    b.constraint = 8;
    b.neg_text = 32;
    b.neg_img = 24;

    auto preset = schedule_preset(0.1, 1.0, c, b, 200, 5);
    CHECK(preset.beta == doctest::Approx(10.0).epsilon(1e-15));

    auto doubled = schedule_preset(0.2, 1.0, c, b, 200, 5);
    CHECK(doubled.beta == doctest::Approx(preset.beta / 2.0).epsilon(1e-15));

    // Long-double recomputation of the min-expressions.
    long double eps = 0.1L, delta = 1.0L;
    long double lf = 0.1L / 0.4L;
    long double arm1 =
        powl(eps, 4) * delta * delta * std::min(b.tasks, b.constraint) /
        (672.0L * (0.7L * 0.7L + 0.8L * 0.8L));
    long double arm2 = eps * eps * std::min({b.pairs, b.neg_text, b.neg_img}) /
                       (1344.0L * lf * lf * (0.9L * 0.9L + 1.5L * 1.5L));
    long double theta = std::min(arm1, arm2);
    CHECK(std::abs(preset.theta - static_cast<double>(theta)) <=
          1e-12 * static_cast<double>(theta));

    long double g1 = 5.0L * 200 * theta / (3.0L * 16);
    long double g2 = 5.0L * 5 * theta / (3.0L * 4);
    long double g3 = powl(eps, 4) * delta * delta * 8 /
                     (26880.0L * 0.5L * 0.5L * (0.7L + 0.8L) * (0.7L + 0.8L));
    long double gamma = std::min({g1, g2, g3});
    CHECK(std::abs(preset.gamma - static_cast<double>(gamma)) <=
          1e-12 * static_cast<double>(gamma));

    long double lgf = 0.1L / (0.4L * 0.4L);
    long double LF = 2.0L * (2.0L * lf + lgf * 1.5L * 1.5L);
    long double LH = 2.0L * 1.2L + 0.8L * 0.8L;
    long double beta = 1.0L / (eps * delta);
    long double e1 = 1.0L / (12.0L * (LF + beta * LH));
    long double e2 = theta / (8.0L * sqrtl(3.0L) * LF);
    long double e3 = theta / (8.0L * sqrtl(3.0L) * LH * beta);
    long double e4 = gamma * 16 / (40.0L * sqrtl(6.0L) * 1.5L * lf * (0.9L + 1.5L) * 200);
    long double e5 = gamma * 4 / (40.0L * sqrtl(6.0L) * beta * 0.8L * (0.7L + 0.8L) * 5);
    long double eta = std::min({e1, e2, e3, e4, e5});
    CHECK(std::abs(preset.eta - static_cast<double>(eta)) <=
          1e-12 * static_cast<double>(eta));

    CHECK(preset.iterations ==
          static_cast<long long>(std::ceil(std::pow(0.1, -7.0))));
    CHECK_THROWS_AS(schedule_preset(-0.1, 1.0, c, b, 10, 2), ConfigError);
}

TEST_CASE("kkt report") {
    RngStream rng(62, 2);
    ModelShape s = small_shape();
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 2, 4, 2, 5);

    // At the reference point every h_k = 0: violation and complementarity
    // vanish and stationarity is the raw objective gradient norm.
    KKTReport rep = kkt_report(w_old, prob, 120.0);
    CHECK(rep.violation == 0.0);
    CHECK(rep.complementarity == 0.0);
    CHECK(rep.stationarity ==
          doctest::Approx(objective_grad(w_old, prob.pairs, prob.tau).norm()));

    ParamVector p = ParamVector::random_init(s, rng);
    double beta = 35.0;
    KKTReport r2 = kkt_report(p, prob, beta);
    double viol_sq = 0.0, comp = 0.0;
    Vector stat = objective_grad(p, prob.pairs, prob.tau);
    for (const auto& spec : prob.constraints) {
        double h = constraint_value(p, spec, prob.class_texts, prob.tau0);
        double hp = std::max(h, 0.0);
        viol_sq += hp * hp;
        comp += beta / 2.0 * hp * hp;
        if (hp > 0.0)
            stat += beta / 2.0 * hp *
                    constraint_grad(p, spec, prob.class_texts, prob.tau0);
    }
    CHECK(r2.violation == doctest::Approx(std::sqrt(viol_sq)).epsilon(1e-12));
    CHECK(r2.complementarity == doctest::Approx(comp).epsilon(1e-12));
    CHECK(r2.stationarity == doctest::Approx(stat.norm()).epsilon(1e-12));
    CHECK(r2.complementarity ==
          doctest::Approx(beta / 2.0 * r2.violation * r2.violation).epsilon(1e-12));
}

TEST_CASE("analytic instances reach their KKT points") {
    SolverConfig cfg = full_information(5000, 1e-3, 1e4);
    cfg.eta_schedule = EtaSchedule::kCosineDecay;
    cfg.log_every = 5000;

    SUBCASE("one dimensional") {
        Vector w0(1);
        w0 << -0.5;
        RunResult res = run_penalty(one_d_problem(), cfg, w0);
        double w = res.final_flat[0];
        CHECK(std::abs(w) <= 1e-2);
        KKTReport rep = kkt_report(res.final_flat, one_d_problem(), 1e4);
        CHECK(rep.violation <= 1e-3);
        CHECK(rep.stationarity <= 1e-2);
        KKTReport start = kkt_report(w0, one_d_problem(), 1e4);
        CHECK(rep.stationarity <= start.stationarity / 10.0);
    }
    SUBCASE("two dimensional") {
        Vector w0(2);
        w0 << -0.5, 0.95;
        RunResult res = run_penalty(two_d_problem(), cfg, w0);
        CHECK(std::abs(res.final_flat[0]) <= 1e-2);
        CHECK(std::abs(res.final_flat[1] - 1.0) <= 2e-2);
        KKTReport rep = kkt_report(res.final_flat, two_d_problem(), 1e4);
        CHECK(rep.violation <= 1e-3);
        CHECK(rep.stationarity <= 1e-2);
    }
}

TEST_CASE("kkt residuals vanish at an interior minimizer") {
    // min (w+1)^2 s.t. w <= 0: the unconstrained minimizer -1 is feasible,
    // so all three residuals go to ~0 there.
    GenericProblem prob;
    prob.dim = 1;
    prob.objective = [](const Vector& w) { return (w[0] + 1.0) * (w[0] + 1.0); };
    prob.objective_grad = [](const Vector& w) {
        Vector g(1);
        g[0] = 2.0 * (w[0] + 1.0);
        return g;
    };
    prob.constraints = {[](const Vector& w) { return w[0]; }};
    prob.constraint_grads = {[](const Vector&) { return Vector::Ones(1); }};

    SolverConfig cfg = full_information(2000, 1e-2, 100.0);
    cfg.log_every = 2000;
    Vector w0(1);
    w0 << -3.0;
    RunResult res = run_penalty(prob, cfg, w0);
    KKTReport rep = kkt_report(res.final_flat, prob, 100.0);
    CHECK(rep.violation == 0.0);
    CHECK(rep.complementarity == 0.0);
    CHECK(rep.stationarity <= 1e-6);
}

TEST_CASE("full-information mode collapses to exact penalty gradient descent") {
    RngStream rng(63, 3);
    ModelShape s = small_shape();
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 3, 4, 2, 5);
    ParamVector w0 = ParamVector::random_init(s, rng);
    const double beta = 20.0, eta = 5e-3;

    SolverConfig cfg = full_information(100, eta, beta);
    cfg.log_every = 1;
    RunResult res = run_penalty(prob, cfg, w0);
    REQUIRE(res.trajectory.size() == 100);

    // One step: the momentum equals the exact penalty gradient at w0.
    Vector phi0 = penalty_grad(w0, prob.pairs, prob.constraints, prob.class_texts,
                               prob.tau, prob.tau0, beta);
    Vector after_one = w0.flatten() - eta * phi0;
    CHECK((res.trajectory[0].params - after_one).norm() <=
          1e-12 * std::max(1.0, after_one.norm()));

    // Step-for-step match with an independent descent loop.
    Vector w = w0.flatten();
    for (std::size_t t = 0; t < res.trajectory.size(); ++t) {
        ParamVector cur = ParamVector::unflatten(s, w);
        Vector g = penalty_grad(cur, prob.pairs, prob.constraints, prob.class_texts,
                                prob.tau, prob.tau0, beta);
        w -= eta * g;
        double rel = (res.trajectory[t].params - w).norm() /
                     std::max(1.0, w.norm());
        CHECK(rel <= 1e-10);
    }
}

TEST_CASE("same seed reproduces the trajectory bit-exactly") {
    RngStream rng(64, 4);
    ModelShape s = small_shape();
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 6, 10, 2, 8);
    SolverConfig cfg;
    cfg.iterations = 40;
    cfg.eta = 1e-3;
    cfg.beta = 10.0;
    cfg.gamma1 = 0.7;
    cfg.gamma2 = 0.5;
    cfg.theta = 0.6;
    cfg.batch_pairs = 3;
    cfg.batch_constraint = 4;
    cfg.batch_neg_text = 5;
    cfg.batch_neg_img = 5;
    cfg.tau = 0.5;
    cfg.tau0 = 0.5;
    cfg.seed = 99;
    cfg.log_every = 10;
    RunResult a = run_penalty(prob, cfg, w_old);
    RunResult b = run_penalty(prob, cfg, w_old);
    REQUIRE(a.trajectory.size() == b.trajectory.size());
    for (std::size_t i = 0; i < a.trajectory.size(); ++i)
        CHECK((a.trajectory[i].params - b.trajectory[i].params).norm() == 0.0);

    SolverConfig other = cfg;
    other.seed = 100;
    RunResult c = run_penalty(prob, other, w_old);
    CHECK((a.final_flat - c.final_flat).norm() > 0.0);
}

TEST_CASE("checkpoint resume replays the identical trajectory") {
    namespace fs = std::filesystem;
    RngStream rng(65, 5);
    ModelShape s = small_shape();
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 6, 8, 2, 8);
    SolverConfig cfg;
    cfg.iterations = 30;
    cfg.eta = 2e-3;
    cfg.beta = 15.0;
    cfg.gamma1 = 0.8;
    cfg.gamma2 = 0.6;
    cfg.theta = 0.5;
    cfg.batch_pairs = 2;
    cfg.batch_constraint = 3;
    cfg.batch_neg_text = 4;
    cfg.batch_neg_img = 4;
    cfg.tau = 0.5;
    cfg.tau0 = 0.5;
    cfg.seed = 7;
    cfg.log_every = 10;

    fs::path dir = fs::temp_directory_path() / "devsafe_ckpt_test";
    fs::create_directories(dir);
    std::string ckpt = (dir / "state.bin").string();

    RunOptions opts;
    opts.checkpoint_path = ckpt;
    RunResult full = run_penalty(prob, cfg, w_old, opts);

    // Run only 10 steps, then resume from the saved state to 30.
    SolverConfig half = cfg;
    half.iterations = 10;
    RunOptions opts1;
    opts1.checkpoint_path = ckpt;
    run_penalty(prob, half, w_old, opts1);
    RunState mid = load_checkpoint(ckpt);
    CHECK(mid.step == 10);

    RunOptions opts2;
    opts2.resume_from = mid;
    RunResult resumed = run_penalty(prob, cfg, w_old, opts2);
    CHECK((resumed.final_flat - full.final_flat).norm() == 0.0);
    fs::remove_all(dir);
}

TEST_CASE("divergence raises instead of silently exploding") {
    GenericProblem prob;
    prob.dim = 1;
    prob.objective = [](const Vector& w) { return -w[0] * w[0] * w[0] * w[0]; };
    prob.objective_grad = [](const Vector& w) {
        Vector g(1);
        g[0] = -4.0 * w[0] * w[0] * w[0];
        return g;
    };
    SolverConfig cfg = full_information(100000, 10.0, 0.0);
    cfg.log_every = 1000;
    Vector w0(1);
    w0 << 2.0;
    CHECK_THROWS_AS(run_penalty(prob, cfg, w0), DivergenceError);
}

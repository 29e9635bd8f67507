#include <doctest.h>

#include <cmath>

#include "devsafe/metrics.hpp"
#include "devsafe/testkit.hpp"
#include "helpers.hpp"

using namespace devsafe;
using namespace devsafe::test;

namespace {

EvalSets random_eval_sets(RngStream& rng, const ModelShape& s, int per_task,
                          double tau0) {
    EvalSets sets;
    sets.class_texts = random_class_texts(rng, s);
    sets.tau0 = tau0;
    for (int k = 0; k < s.num_tasks - 1; ++k) {
        EvalTaskSet ts;
        ts.task = k;
        for (int i = 0; i < per_task; ++i) ts.images.push_back(random_vec(rng, s.d_x));
        sets.protected_tasks.push_back(std::move(ts));
    }
    sets.target.task = s.num_tasks - 1;
    for (int i = 0; i < per_task; ++i)
        sets.target.images.push_back(random_vec(rng, s.d_x));
    return sets;
}

}  // namespace

TEST_CASE("dev safety basics") {
    RngStream rng(81, 1);
    ModelShape s = small_shape(false, 4);
    ParamVector w = ParamVector::random_init(s, rng);
    EvalSets sets = random_eval_sets(rng, s, 6, 0.5);

    CHECK(dev_safety(w, w, sets, EvalLoss::kCrossEntropy) == 0.0);
    CHECK(dev_safety(w, w, sets, EvalLoss::kZeroOne) == 0.0);

    ParamVector other = ParamVector::random_init(s, rng);
    double got = dev_safety(other, w, sets, EvalLoss::kCrossEntropy);
    double want = std::numeric_limits<double>::infinity();
    for (const auto& ts : sets.protected_tasks) {
        double a = task_loss(w, ts, sets.class_texts, sets.tau0,
                             EvalLoss::kCrossEntropy);
        double b = task_loss(other, ts, sets.class_texts, sets.tau0,
                             EvalLoss::kCrossEntropy);
        want = std::min(want, a - b);
    }
    CHECK(got == doctest::Approx(want).epsilon(1e-12));

    // Hand case: old losses (0.5, 0.5), new (0.4, 0.6) -> min(0.1, -0.1) = -0.1.
    CHECK(std::min(0.5 - 0.4, 0.5 - 0.6) == doctest::Approx(-0.1));

    EvalSets empty = sets;
    empty.protected_tasks[0].images.clear();
    CHECK_THROWS_AS(dev_safety(other, w, empty, EvalLoss::kZeroOne), MetricError);
}

TEST_CASE("retention ratio") {
    CHECK(retention_ratio({0.1, -0.2, 0.0, 0.3, 0.05}) == doctest::Approx(0.8));
    CHECK(retention_ratio({-1.0, -0.5}) == 0.0);
    CHECK(retention_ratio({0.0, 0.0, 0.0}) == 1.0);
    CHECK_THROWS_AS(retention_ratio({}), MetricError);
}

TEST_CASE("delta target accuracy") {
    RngStream rng(82, 2);
    ModelShape s = small_shape(false, 3);
    ParamVector w = ParamVector::random_init(s, rng);
    EvalSets sets = random_eval_sets(rng, s, 8, 0.5);
    CHECK(delta_target_acc(w, w, sets) == 0.0);

    ParamVector other = ParamVector::random_init(s, rng);
    double got = delta_target_acc(other, w, sets);
    int hit_new = 0, hit_old = 0;
    for (const auto& x : sets.target.images) {
        if (predict(class_logits(other, x, sets.class_texts)) == sets.target.task)
            ++hit_new;
        if (predict(class_logits(w, x, sets.class_texts)) == sets.target.task)
            ++hit_old;
    }
    double want = (hit_new - hit_old) / static_cast<double>(sets.target.images.size());
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("retention generalization slack") {
    RetentionSlackInputs in;
    in.samples_per_task = {10000};
    in.num_protected = 5;
    in.confidence = 0.05;
    in.complexity_coeff = 1.0;
    in.complexity_rate = 0.5;
    auto out = retention_slack_bound(in);
    double want = 4.0 / 100.0 + 2.0 * std::sqrt(std::log(200.0) / 20000.0);
    CHECK(out[0] == doctest::Approx(want).epsilon(1e-14));
    CHECK(out[0] == doctest::Approx(0.0726).epsilon(1e-3));

    // Monotone decreasing over an n grid.
    in.samples_per_task = {10, 100, 1000, 10000, 100000, 1000000, 10000000,
                           100000000, 1000000000, 10000000000LL};
    auto grid = retention_slack_bound(in);
    for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] < grid[i - 1]);

    in.confidence = 1.5;
    CHECK_THROWS_AS(retention_slack_bound(in), MetricError);
}

TEST_CASE("sigma_min of simple jacobians") {
    RngStream rng(83, 3);
    ModelShape s = small_shape(false, 3);
    ParamVector w_old = ParamVector::random_init(s, rng);
    std::vector<Vector> texts = random_class_texts(rng, s);

    // Random Jacobian cross-check: library Gram path vs testkit Jacobi SVD.
    Matrix jac = Matrix::Random(20, 4);
    std::vector<double> flat;
    for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 4; ++j) flat.push_back(jac(i, j));
    double want = testkit::dense_sigma_min(flat, 20, 4);
    Eigen::SelfAdjointEigenSolver<Matrix> es(jac.transpose() * jac);
    double got = std::sqrt(std::max(es.eigenvalues().minCoeff(), 0.0));
    CHECK(std::abs(got - want) <= 1e-8 * std::max(1.0, want));

    // Orthonormal columns -> sigma_min = 1 (both algorithms).
    Matrix q = Eigen::HouseholderQR<Matrix>(Matrix::Random(10, 3))
                   .householderQ() *
               Matrix::Identity(10, 3);
    std::vector<double> qflat;
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 3; ++j) qflat.push_back(q(i, j));
    CHECK(testkit::dense_sigma_min(qflat, 10, 3) == doctest::Approx(1.0).epsilon(1e-10));

    // Real constraint Jacobian: library value vs testkit SVD on the same columns.
    RetentionProblem prob = random_problem(rng, s, w_old, 2, 3, 2, 5);
    ParamVector p = ParamVector::random_init(s, rng);
    double lib = constraint_jacobian_sigma_min(p, prob.constraints, prob.class_texts,
                                               prob.tau0, false);
    std::vector<double> cols;
    const auto dim = static_cast<int>(s.param_count());
    std::vector<Vector> g;
    for (const auto& spec : prob.constraints)
        g.push_back(constraint_grad(p, spec, prob.class_texts, prob.tau0));
    for (int i = 0; i < dim; ++i)
        for (std::size_t k = 0; k < g.size(); ++k) cols.push_back(g[k][i]);
    double oracle = testkit::dense_sigma_min(cols, dim, static_cast<int>(g.size()));
    CHECK(std::abs(lib - oracle) <= 1e-8 * std::max(1.0, oracle));

    CHECK_THROWS_AS(constraint_jacobian_sigma_min(p, {}, texts, 0.5, false),
                    MetricError);
}

TEST_CASE("task-head eigenvalue gain check") {
    RngStream rng(84, 4);
    ModelShape s = small_shape(true, 4);
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 2, 3, 3, 5);

    SUBCASE("zero V gives zero gain and equal sides") {
        ParamVector p = ParamVector::random_init(s, rng);
        for (auto& v : p.heads_v) v.setZero();
        auto rep = head_gain_check(p, prob.constraints, prob.class_texts, prob.tau0);
        CHECK(rep.holds);
        CHECK(rep.lambda_min_augmented ==
              doctest::Approx(rep.lambda_min_plain).epsilon(1e-12));
        for (double gain : rep.diag_gain) CHECK(gain == 0.0);
    }

    SUBCASE("random V instances all hold") {
        for (int trial = 0; trial < 50; ++trial) {
            ParamVector p = ParamVector::random_init(s, rng);  // U = 0, V random
            auto rep = head_gain_check(p, prob.constraints, prob.class_texts, prob.tau0);
            CHECK(rep.holds);
            CHECK(rep.lambda_min_augmented >= rep.lambda_min_plain - 1e-8);
        }
    }

    SUBCASE("nonzero product is rejected") {
        ParamVector p = ParamVector::random_init(s, rng);
        p.heads_u[0] = Matrix::Ones(s.d_2, s.rank);
        CHECK_THROWS_AS(head_gain_check(p, prob.constraints, prob.class_texts, prob.tau0),
                        MetricError);
    }
}

TEST_CASE("head-augmented gram structure against a dense eigensolve on a linear family") {
    // Constraints h_k = <A_k, W_eff> depend linearly on the task head, so the
    // augmented Gram must equal the plain Gram plus diag(|A_k V_k|_F^2).
    RngStream rng(85, 5);
    const int d2 = 3, d1 = 4, m = 3, r = 2;
    std::vector<Matrix> a;
    for (int k = 0; k < m; ++k) a.push_back(Matrix::Random(d2, d1));
    std::vector<Matrix> v;
    for (int k = 0; k < m; ++k) v.push_back(Matrix::Random(d1, r));

    // Plain Jacobian columns: vec(A_k). Augmented: append the per-task block
    // A_k V_k in the k-th slot.
    const int base_dim = d2 * d1;
    Matrix plain(base_dim, m);
    for (int k = 0; k < m; ++k)
        plain.col(k) = Eigen::Map<const Vector>(a[k].data(), base_dim);
    Matrix aug(base_dim + m * d2 * r, m);
    aug.setZero();
    aug.topRows(base_dim) = plain;
    for (int k = 0; k < m; ++k) {
        Matrix block = a[k] * v[k];
        aug.block(base_dim + k * d2 * r, k, d2 * r, 1) =
            Eigen::Map<const Vector>(block.data(), d2 * r);
    }

    Matrix gram_plain = plain.transpose() * plain;
    Matrix gram_aug_direct = aug.transpose() * aug;
    Matrix gram_expected = gram_plain;
    for (int k = 0; k < m; ++k) gram_expected(k, k) += (a[k] * v[k]).squaredNorm();
    CHECK((gram_aug_direct - gram_expected).norm() <= 1e-12);

    Eigen::SelfAdjointEigenSolver<Matrix> e1(gram_aug_direct), e2(gram_expected);
    CHECK(e1.eigenvalues().minCoeff() ==
          doctest::Approx(e2.eigenvalues().minCoeff()).epsilon(1e-12));

    // Weyl direction of the check.
    Eigen::SelfAdjointEigenSolver<Matrix> e0(gram_plain);
    double gain_min = std::numeric_limits<double>::infinity();
    for (int k = 0; k < m; ++k)
        gain_min = std::min(gain_min, (a[k] * v[k]).squaredNorm());
    CHECK(e1.eigenvalues().minCoeff() >=
          e0.eigenvalues().minCoeff() + gain_min - 1e-8);
}

TEST_CASE("heads-on sigma_min does not fall below heads-off") {
    RngStream rng(86, 6);
    ModelShape s = small_shape(true, 3);
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 2, 3, 2, 5);
    for (int trial = 0; trial < 10; ++trial) {
        ParamVector p = ParamVector::random_init(s, rng);  // U = 0, V random
        double off = constraint_jacobian_sigma_min(p, prob.constraints,
                                                   prob.class_texts, prob.tau0, false);
        double on = constraint_jacobian_sigma_min(p, prob.constraints,
                                                  prob.class_texts, prob.tau0, true);
        CHECK(on >= off - 1e-8);
    }
}

TEST_CASE("effective weights") {
    auto w = effective_weights({-1.0, 0.2}, 100.0);
    CHECK(w[0] == 0.0);
    CHECK(w[1] == doctest::Approx(20.0));
    auto all_zero = effective_weights({-0.5, -0.1, 0.0}, 10.0);
    for (double v : all_zero) CHECK(v == 0.0);
    auto beta_zero = effective_weights({0.5, 1.0}, 0.0);
    for (double v : beta_zero) CHECK(v == 0.0);
}

#include <doctest.h>

#include <cmath>

#include "devsafe/losses.hpp"
#include "devsafe/testkit.hpp"
#include "helpers.hpp"

using namespace devsafe;
using namespace devsafe::test;

namespace {

PairContext self_only_pair(RngStream& rng, const ModelShape& s) {
    PairContext ctx = random_pair(rng, s, 0);
    return ctx;  // pools contain just the positive element
}

// Two-way log-softmax evaluation over the full pools; the implementation's
// tau*log(ratio) form differs from this by tau*log(pool size) per side.
double log_softmax_form(const ParamVector& p, const PairContext& ctx, double tau) {
    Vector e_img = encode_image(p, ctx.image);
    Vector e_txt = encode_text(p, ctx.text, std::nullopt);
    double s_self = e_img.dot(e_txt);
    double sum1 = std::exp(0.0), sum2 = std::exp(0.0);
    for (int idx : *ctx.neg_texts.indices) {
        const Vector& t = (*ctx.neg_texts.features)[idx];
        sum1 += std::exp((e_img.dot(encode_text(p, t, std::nullopt)) - s_self) / tau);
    }
    for (int idx : *ctx.neg_images.indices) {
        const Vector& x = (*ctx.neg_images.features)[idx];
        sum2 += std::exp((e_txt.dot(encode_image(p, x)) - s_self) / tau);
    }
    return tau * std::log(sum1) + tau * std::log(sum2);
}

}  // namespace

TEST_CASE("contrast ratios: trivial pools") {
    RngStream rng(21, 1);
    ModelShape s = small_shape();
    ParamVector p = ParamVector::random_init(s, rng);

    PairContext solo = self_only_pair(rng, s);
    std::vector<int> self_only = {solo.neg_texts.self_position()};
    CHECK(contrast_ratio_text(p, solo, self_only, 0.5) == doctest::Approx(1.0));
    CHECK(contrast_ratio_image(p, solo, self_only, 0.5) == doctest::Approx(1.0));

    // Every pool text equal to the positive text: all score gaps vanish.
    PairContext same = random_pair(rng, s, 4);
    auto txts = std::make_shared<std::vector<Vector>>(4, same.text);
    same.neg_texts.features = txts;
    CHECK(contrast_ratio_text(p, same, full_pool_subset(same.neg_texts), 0.5) ==
          doctest::Approx(1.0).epsilon(1e-14));

    CHECK_THROWS_AS(contrast_ratio_text(p, solo, {}, 0.5), EstimatorError);
}

TEST_CASE("contrast ratio matches order-independent recomputation") {
    RngStream rng(22, 1);
    ModelShape s = small_shape();
    ParamVector p = ParamVector::random_init(s, rng);
    PairContext ctx = random_pair(rng, s, 12);
    auto subset = full_pool_subset(ctx.neg_texts);
    double got = contrast_ratio_text(p, ctx, subset, 0.4);

    Vector e_img = encode_image(p, ctx.image);
    double s_self = e_img.dot(encode_text(p, ctx.text, std::nullopt));
    std::vector<double> terms;
    for (auto it = subset.rbegin(); it != subset.rend(); ++it) {
        const Vector& t = (*it == ctx.neg_texts.self_position())
                              ? ctx.text
                              : (*ctx.neg_texts.features)[(*ctx.neg_texts.indices)[*it]];
        terms.push_back(
            std::exp((e_img.dot(encode_text(p, t, std::nullopt)) - s_self) / 0.4));
    }
    double want = testkit::compensated_sum(terms) / static_cast<double>(terms.size());
    CHECK(std::abs(got - want) <= 1e-12 * std::abs(want));
}

TEST_CASE("contrastive pair loss: self-only pools give zero") {
    RngStream rng(23, 1);
    ModelShape s = small_shape();
    ParamVector p = ParamVector::random_init(s, rng);
    PairContext solo = self_only_pair(rng, s);
    CHECK(std::abs(contrastive_pair_loss(p, solo, 0.5)) <= 1e-14);
}

TEST_CASE("contrastive pair loss equals the log-softmax form up to pool constants") {
    RngStream rng(24, 2);
    ModelShape s = small_shape();
    ParamVector p = ParamVector::random_init(s, rng);
    for (int trial = 0; trial < 10; ++trial) {
        PairContext ctx = random_pair(rng, s, 8);
        double tau = 0.3 + 0.1 * trial;
        double ours = contrastive_pair_loss(p, ctx, tau);
        double eq_form = log_softmax_form(p, ctx, tau);
        double constant = tau * std::log(static_cast<double>(ctx.neg_texts.size())) +
                          tau * std::log(static_cast<double>(ctx.neg_images.size()));
        CHECK(std::abs(ours + constant - eq_form) <= 1e-10);
    }
}

TEST_CASE("objective is the mean pair loss") {
    RngStream rng(25, 3);
    ModelShape s = small_shape();
    ParamVector p = ParamVector::random_init(s, rng);

    std::vector<PairContext> one = {self_only_pair(rng, s)};
    CHECK(std::abs(objective_value(p, one, 0.5)) <= 1e-14);

    std::vector<PairContext> two = {one[0], one[0]};
    CHECK(objective_value(p, two, 0.5) ==
          doctest::Approx(objective_value(p, one, 0.5)));

    std::vector<PairContext> pairs;
    for (int i = 0; i < 5; ++i) pairs.push_back(random_pair(rng, s, 6));
    double got = objective_value(p, pairs, 0.5);
    double want = 0.0;
    for (const auto& ctx : pairs) want += contrastive_pair_loss(p, ctx, 0.5);
    want /= 5.0;
    CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));

    CHECK_THROWS_AS(objective_value(p, {}, 0.5), EstimatorError);
}

TEST_CASE("cross-entropy loss values") {
    RngStream rng(26, 4);
    ModelShape s = small_shape(false, 4);
    ParamVector p = ParamVector::random_init(s, rng);
    std::vector<Vector> texts = random_class_texts(rng, s);

    // All logits equal: loss = log K. Force it by using one text for all classes.
    std::vector<Vector> same(4, texts[0]);
    Vector x = random_vec(rng, s.d_x);
    CHECK(ce_loss(p, x, 2, same, 0.5) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // Saturated softmax: construct exact unit logits (1, 0) so the margin is
    // exactly 1; at tau0 = 0.02 the off-class mass is exp(-50) < 1e-20.
    {
        ModelShape id2;
        id2.d_x = 2; id2.d_t = 2; id2.d_h = 0; id2.d_1 = 2; id2.d_2 = 2;
        id2.num_tasks = 2;
        ParamVector q(id2);
        q.img1 = Matrix::Identity(2, 2);
        q.txt = Matrix::Identity(2, 2);
        q.head_w = Matrix::Identity(2, 2);
        Vector e0(2), e1(2), xin(2);
        e0 << 1.0, 0.0;
        e1 << 0.0, 1.0;
        xin << 1.0, 0.0;
        double sat = ce_loss(q, xin, 0, {e0, e1}, 0.02);
        CHECK(sat <= 1e-20);
        CHECK(sat > 0.0);
    }

    for (int trial = 0; trial < 20; ++trial) {
        Vector xi = random_vec(rng, s.d_x);
        int yi = trial % 4;
        double got = ce_loss(p, xi, yi, texts, 0.35);
        Vector sl = class_logits(p, xi, texts);
        long double acc = 0.0L;
        for (int l = 0; l < 4; ++l)
            acc += expl((static_cast<long double>(sl[l]) - sl[yi]) / 0.35L);
        double want = static_cast<double>(logl(acc));
        CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
        CHECK(got >= 0.0);
    }
}

TEST_CASE("zero-one loss agrees with an argmax scan") {
    RngStream rng(27, 5);
    ModelShape s = small_shape(false, 4);
    ParamVector p = ParamVector::random_init(s, rng);
    std::vector<Vector> texts = random_class_texts(rng, s);
    for (int trial = 0; trial < 25; ++trial) {
        Vector x = random_vec(rng, s.d_x);
        int y = trial % 4;
        Vector sl = class_logits(p, x, texts);
        int best = 0;
        for (int l = 1; l < 4; ++l)
            if (sl[l] > sl[best]) best = l;
        CHECK(zero_one_loss(p, x, y, texts) == (best != y ? 1 : 0));
    }
}

TEST_CASE("constraint value: zero at the reference model") {
    RngStream rng(28, 6);
    ModelShape s = small_shape(false, 3);
    ParamVector w_old = ParamVector::random_init(s, rng);
    std::vector<Vector> texts = random_class_texts(rng, s);
    ConstraintSpec spec = random_constraint(rng, s, w_old, texts, 1, 9, 0.5);

    CHECK(constraint_value(w_old, spec, texts, 0.5) == 0.0);

    std::vector<int> one = {4};
    double got = constraint_value(w_old, spec, texts, 0.5, one);
    CHECK(got == 0.0);

    ParamVector p = ParamVector::random_init(s, rng);
    double live = constraint_value(p, spec, texts, 0.5);
    double fresh = 0.0;
    for (std::size_t j = 0; j < spec.images.size(); ++j)
        fresh += ce_loss(p, spec.images[j], 1, texts, 0.5) -
                 ce_loss(w_old, spec.images[j], 1, texts, 0.5);
    fresh /= static_cast<double>(spec.images.size());
    CHECK(std::abs(live - fresh) <= 1e-12 * std::max(1.0, std::abs(fresh)));

    CHECK_THROWS_AS(constraint_value(p, spec, texts, 0.5, std::vector<int>{}),
                    EstimatorError);
}

TEST_CASE("penalty value") {
    RngStream rng(29, 7);
    ModelShape s = small_shape(false, 3);
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 3, 5, 2, 6);

    // At w_old every h_k = 0, so the hinge term vanishes.
    double f = objective_value(w_old, prob.pairs, prob.tau);
    CHECK(penalty_value(w_old, prob.pairs, prob.constraints, prob.class_texts,
                        prob.tau, prob.tau0, 250.0) == doctest::Approx(f));
    ParamVector p = ParamVector::random_init(s, rng);
    CHECK(penalty_value(p, prob.pairs, prob.constraints, prob.class_texts, prob.tau,
                        prob.tau0, 0.0) ==
          doctest::Approx(objective_value(p, prob.pairs, prob.tau)));

    // Hand-evaluated hinge: engineer h = (0.1, -0.3) exactly by offsetting
    // the cached references, so phi - F = (1/2)*(100/2)*0.1^2 = 0.25.
    RetentionProblem eng = prob;
    for (int k = 0; k < 2; ++k) {
        double target_h = k == 0 ? 0.1 : -0.3;
        auto& spec = eng.constraints[k];
        for (std::size_t j = 0; j < spec.ref_losses.size(); ++j)
            spec.ref_losses[j] =
                ce_loss(p, spec.images[j], spec.task, eng.class_texts, eng.tau0) -
                target_h;
        CHECK(constraint_value(p, spec, eng.class_texts, eng.tau0) ==
              doctest::Approx(target_h).epsilon(1e-12));
    }
    double f_at_p = objective_value(p, eng.pairs, eng.tau);
    double phi = penalty_value(p, eng.pairs, eng.constraints, eng.class_texts,
                               eng.tau, eng.tau0, 100.0);
    CHECK(phi - f_at_p == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("penalty never falls below the objective") {
    RngStream rng(32, 1);
    ModelShape s = small_shape(false, 3);
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 2, 4, 2, 5);
    for (int trial = 0; trial < 15; ++trial) {
        ParamVector p = ParamVector::random_init(s, rng);
        double f = objective_value(p, prob.pairs, prob.tau);
        double phi = penalty_value(p, prob.pairs, prob.constraints, prob.class_texts,
                                   prob.tau, prob.tau0, 120.0);
        CHECK(phi >= f - 1e-15);
        bool any_violated = false;
        for (const auto& spec : prob.constraints)
            if (constraint_value(p, spec, prob.class_texts, prob.tau0) > 0.0)
                any_violated = true;
        if (!any_violated) CHECK(phi == doctest::Approx(f));
        if (phi > f + 1e-12) CHECK(any_violated);
    }
}

TEST_CASE("gradients match finite differences") {
    RngStream rng(30, 8);
    ModelShape s = small_shape(true);
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 3, 5, 2, 5);
    ParamVector p = ParamVector::random_init(s, rng);
    auto flat = to_std(p.flatten());

    auto f_obj = [&](const std::vector<double>& v) {
        return objective_value(ParamVector::unflatten(s, from_std(v)), prob.pairs,
                               prob.tau);
    };
    CHECK(testkit::max_rel_grad_error(
              f_obj, flat, to_std(objective_grad(p, prob.pairs, prob.tau))) <= 1e-6);

    auto f_h = [&](const std::vector<double>& v) {
        return constraint_value(ParamVector::unflatten(s, from_std(v)),
                                prob.constraints[0], prob.class_texts, prob.tau0);
    };
    CHECK(testkit::max_rel_grad_error(
              f_h, flat,
              to_std(constraint_grad(p, prob.constraints[0], prob.class_texts,
                                     prob.tau0))) <= 1e-6);

    double beta = 40.0;
    auto f_phi = [&](const std::vector<double>& v) {
        return penalty_value(ParamVector::unflatten(s, from_std(v)), prob.pairs,
                             prob.constraints, prob.class_texts, prob.tau, prob.tau0,
                             beta);
    };
    CHECK(testkit::max_rel_grad_error(
              f_phi, flat,
              to_std(penalty_grad(p, prob.pairs, prob.constraints, prob.class_texts,
                                  prob.tau, prob.tau0, beta))) <= 1e-6);
}

TEST_CASE("penalty gradient assembles from parts") {
    RngStream rng(31, 9);
    ModelShape s = small_shape(false, 3);
    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 3, 4, 2, 5);
    ParamVector p = ParamVector::random_init(s, rng);
    double beta = 75.0;

    Vector assembled = penalty_grad(p, prob.pairs, prob.constraints, prob.class_texts,
                                    prob.tau, prob.tau0, beta);
    Vector parts = objective_grad(p, prob.pairs, prob.tau);
    const double m = static_cast<double>(prob.constraints.size());
    for (const auto& spec : prob.constraints) {
        double h = constraint_value(p, spec, prob.class_texts, prob.tau0);
        if (h > 0.0)
            parts += (beta / m) * h *
                     constraint_grad(p, spec, prob.class_texts, prob.tau0);
    }
    CHECK((assembled - parts).norm() <= 1e-12 * std::max(1.0, parts.norm()));

    // At the reference model the constraints are inactive, so the penalty
    // gradient reduces to the objective gradient.
    Vector at_old = penalty_grad(w_old, prob.pairs, prob.constraints,
                                 prob.class_texts, prob.tau, prob.tau0, beta);
    Vector f_old = objective_grad(w_old, prob.pairs, prob.tau);
    CHECK((at_old - f_old).norm() <= 1e-14 * std::max(1.0, f_old.norm()));

    // grad h at w_old equals the mean ce gradient (the cached term is constant).
    Vector gh = constraint_grad(w_old, prob.constraints[0], prob.class_texts,
                                prob.tau0);
    auto f_ce = [&](const std::vector<double>& v) {
        return mean_ce_loss(ParamVector::unflatten(s, from_std(v)),
                            prob.constraints[0], prob.class_texts, prob.tau0);
    };
    CHECK(testkit::max_rel_grad_error(f_ce, to_std(w_old.flatten()), to_std(gh)) <=
          1e-6);
}

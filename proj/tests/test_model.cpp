#include <doctest.h>

#include "devsafe/model.hpp"
#include "devsafe/testkit.hpp"
#include "helpers.hpp"

using namespace devsafe;
using namespace devsafe::test;

TEST_CASE("encode_image normalizes a linear map") {
    ModelShape s;
    s.d_x = 2; s.d_t = 2; s.d_h = 0; s.d_1 = 2; s.d_2 = 2; s.num_tasks = 2;
    ParamVector p(s);
    p.img1 = Matrix::Identity(2, 2);
    Vector x(2);
    x << 3.0, 4.0;
    Vector e = encode_image(p, x);
    CHECK(e[0] == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(e[1] == doctest::Approx(0.8).epsilon(1e-14));
}

TEST_CASE("zero input raises the degenerate error") {
    ModelShape s;
    s.d_x = 2; s.d_t = 2; s.d_h = 0; s.d_1 = 2; s.d_2 = 2; s.num_tasks = 2;
    ParamVector p(s);
    p.img1 = Matrix::Identity(2, 2);
    CHECK_THROWS_AS(encode_image(p, Vector::Zero(2)), DegenerateInputError);
    CHECK_THROWS_AS(encode_image(p, Vector::Ones(3)), ShapeError);
}

TEST_CASE("embeddings are unit vectors") {
    RngStream rng(3, 1);
    for (int d_h : {0, 6}) {
        ModelShape s = small_shape(true, 3, d_h);
        ParamVector p = ParamVector::random_init(s, rng);
        for (int trial = 0; trial < 20; ++trial) {
            Vector x = random_vec(rng, s.d_x);
            Vector t = random_vec(rng, s.d_t);
            CHECK(std::abs(encode_image(p, x).norm() - 1.0) <= 1e-12);
            CHECK(std::abs(encode_text(p, t, trial % 3).norm() - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("identity text path") {
    ModelShape s;
    s.d_x = 2; s.d_t = 2; s.d_h = 0; s.d_1 = 2; s.d_2 = 2; s.num_tasks = 2;
    ParamVector p(s);
    p.txt = Matrix::Identity(2, 2);
    p.head_w = Matrix::Identity(2, 2);
    Vector t(2);
    t << 1.0, 0.0;
    Vector e = encode_text(p, t, std::nullopt);
    CHECK(e[0] == doctest::Approx(1.0));
    CHECK(e[1] == doctest::Approx(0.0));
}

TEST_CASE("zero low-rank update leaves encoding unchanged") {
    RngStream rng(5, 2);
    ModelShape s = small_shape(true);
    ParamVector p = ParamVector::random_init(s, rng);  // U_k = 0 by construction
    Vector t = random_vec(rng, s.d_t);
    Vector with_task = encode_text(p, t, 1);
    Vector without = encode_text(p, t, std::nullopt);
    CHECK((with_task - without).norm() <= 1e-15);
}

TEST_CASE("text encoding matches an independent recomputation") {
    RngStream rng(6, 2);
    ModelShape s = small_shape(true);
    ParamVector p = ParamVector::random_init(s, rng);
    p.heads_u[2] = Matrix::Random(s.d_2, s.rank);  // nonzero head
    Vector t = random_vec(rng, s.d_t);
    Vector got = encode_text(p, t, 2);
    Vector e = p.txt * t;
    Vector z = (p.head_w + p.heads_u[2] * p.heads_v[2].transpose()) * e;
    Vector want = z / z.norm();
    CHECK((got - want).norm() <= 1e-14);
}

TEST_CASE("class logits and predict") {
    RngStream rng(7, 1);
    ModelShape s = small_shape(false, 4);
    ParamVector p = ParamVector::random_init(s, rng);
    std::vector<Vector> texts = random_class_texts(rng, s);
    Vector x = random_vec(rng, s.d_x);
    Vector got = class_logits(p, x, texts);
    Vector e1 = encode_image(p, x);
    for (int k = 0; k < 4; ++k) {
        double want = e1.dot(encode_text(p, texts[k], k));
        CHECK(std::abs(got[k] - want) <= 1e-12);
        CHECK(got[k] <= 1.0 + 1e-12);
        CHECK(got[k] >= -1.0 - 1e-12);
    }

    Vector v(3);
    v << 0.1, 0.9, 0.2;
    CHECK(predict(v) == 1);
    Vector tie(2);
    tie << 0.5, 0.5;
    CHECK(predict(tie) == 0);
    CHECK_THROWS_AS(predict(Vector()), ShapeError);

    for (int trial = 0; trial < 30; ++trial) {
        Vector r = random_vec(rng, 6);
        int best = 0;
        for (int i = 1; i < 6; ++i)
            if (r[i] > r[best]) best = i;
        CHECK(predict(r) == best);
    }
}

TEST_CASE("embedding gradients: zero and linearity") {
    RngStream rng(8, 3);
    ModelShape s = small_shape(true, 3, 4);
    ParamVector p = ParamVector::random_init(s, rng);
    Vector x = random_vec(rng, s.d_x);
    auto jvp = grad_image_embedding(p, x);
    CHECK(jvp(Vector::Zero(s.d_emb())).norm() == 0.0);
    Vector g1 = random_vec(rng, s.d_emb()), g2 = random_vec(rng, s.d_emb());
    Vector lhs = jvp(g1 + g2);
    Vector rhs = jvp(g1) + jvp(g2);
    CHECK((lhs - rhs).norm() <= 1e-12 * std::max(1.0, rhs.norm()));
}

TEST_CASE("embedding gradients match finite differences") {
    RngStream rng(9, 4);
    for (bool heads : {false, true}) {
        for (int d_h : {0, 4}) {
            ModelShape s = small_shape(heads, 3, d_h);
            ParamVector p = ParamVector::random_init(s, rng);
            Vector x = random_vec(rng, s.d_x);
            Vector t = random_vec(rng, s.d_t);
            Vector cot_i = random_vec(rng, s.d_emb());
            Vector cot_t = random_vec(rng, s.d_emb());

            auto fi = [&](const std::vector<double>& flat) {
                ParamVector q = ParamVector::unflatten(s, from_std(flat));
                return cot_i.dot(encode_image(q, x));
            };
            Vector gi = grad_image_embedding(p, x)(cot_i);
            CHECK(testkit::max_rel_grad_error(fi, to_std(p.flatten()), to_std(gi)) <=
                  1e-6);

            auto ft = [&](const std::vector<double>& flat) {
                ParamVector q = ParamVector::unflatten(s, from_std(flat));
                return cot_t.dot(encode_text(q, t, heads ? std::optional<int>(1)
                                                         : std::nullopt));
            };
            Vector gt = grad_text_embedding(p, t, heads ? std::optional<int>(1)
                                                        : std::nullopt)(cot_t);
            CHECK(testkit::max_rel_grad_error(ft, to_std(p.flatten()), to_std(gt)) <=
                  1e-6);
        }
    }
}

TEST_CASE("flatten and unflatten are inverse bijections") {
    RngStream rng(10, 5);
    for (bool heads : {false, true}) {
        for (int d_h : {0, 4}) {
            ModelShape s = small_shape(heads, 4, d_h);
            ParamVector p = ParamVector::random_init(s, rng);
            if (heads)
                for (auto& u : p.heads_u) u = Matrix::Random(s.d_2, s.rank);
            Vector flat = p.flatten();
            ParamVector q = ParamVector::unflatten(s, flat);
            Vector flat2 = q.flatten();
            REQUIRE(flat.size() == flat2.size());
            for (int i = 0; i < flat.size(); ++i) CHECK(flat[i] == flat2[i]);
        }
    }
}

TEST_CASE("zero head products reduce every quantity to the heads-off model") {
    RngStream rng(11, 6);
    ModelShape s = small_shape(true, 3);
    ParamVector heads_on = ParamVector::random_init(s, rng);  // U = 0, V random
    ParamVector heads_off = heads_on.without_heads();

    ParamVector w_old = ParamVector::random_init(s, rng);
    RetentionProblem prob = random_problem(rng, s, w_old, 2, 4, 2, 4);

    double f_on = objective_value(heads_on, prob.pairs, prob.tau);
    double f_off = objective_value(heads_off, prob.pairs, prob.tau);
    CHECK(std::abs(f_on - f_off) <= 1e-12 * std::max(1.0, std::abs(f_off)));

    // Constraints need references from the matching old model.
    ConstraintSpec spec = prob.constraints[0];
    double h_on = constraint_value(heads_on, spec, prob.class_texts, prob.tau0);
    double h_off = constraint_value(heads_off, spec, prob.class_texts, prob.tau0);
    CHECK(std::abs(h_on - h_off) <= 1e-12 * std::max(1.0, std::abs(h_off)));

    // Gradients restricted to the shared blocks coincide; the layouts agree
    // on an identical prefix by construction.
    Vector g_on = objective_grad(heads_on, prob.pairs, prob.tau);
    Vector g_off = objective_grad(heads_off, prob.pairs, prob.tau);
    ParamLayout off_layout = ParamLayout::of(heads_off.shape());
    Vector prefix = g_on.head(static_cast<Eigen::Index>(off_layout.total));
    CHECK((prefix - g_off).norm() <= 1e-12 * std::max(1.0, g_off.norm()));
}

TEST_CASE("rank must stay below head dimensions") {
    ModelShape s = small_shape(true);
    s.rank = std::min(s.d_1, s.d_2);
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

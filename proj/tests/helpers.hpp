#pragma once

#include <memory>
#include <vector>

#include "devsafe/optimizer.hpp"

namespace devsafe::test {

inline std::vector<double> to_std(const Vector& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline Vector from_std(const std::vector<double>& v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
    return out;
}

inline ModelShape small_shape(bool heads = false, int num_tasks = 3, int d_h = 0) {
    ModelShape s;
    s.d_x = 5;
    s.d_t = 4;
    s.d_h = d_h;
    s.d_1 = 4;
    s.d_2 = 3;
    s.rank = heads ? 2 : 0;
    s.num_tasks = num_tasks;
    s.heads_enabled = heads;
    s.activation = d_h > 0 ? Activation::kTanh : Activation::kIdentity;
    return s;
}

inline Vector random_vec(RngStream& rng, int dim, double scale = 1.0) {
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = scale * rng.next_normal();
    return v;
}

// A pair plus pools of n_neg shared negatives (self appended implicitly).
inline PairContext random_pair(RngStream& rng, const ModelShape& s, int n_neg) {
    PairContext ctx;
    ctx.image = random_vec(rng, s.d_x);
    ctx.text = random_vec(rng, s.d_t);
    auto txts = std::make_shared<std::vector<Vector>>();
    auto imgs = std::make_shared<std::vector<Vector>>();
    for (int i = 0; i < n_neg; ++i) {
        txts->push_back(random_vec(rng, s.d_t));
        imgs->push_back(random_vec(rng, s.d_x));
    }
    auto idx = std::make_shared<std::vector<int>>();
    for (int i = 0; i < n_neg; ++i) idx->push_back(i);
    ctx.neg_texts = SharedPool{txts, idx};
    ctx.neg_images = SharedPool{imgs, idx};
    return ctx;
}

inline std::vector<Vector> random_class_texts(RngStream& rng, const ModelShape& s) {
    std::vector<Vector> out;
    for (int k = 0; k < s.num_tasks; ++k) out.push_back(random_vec(rng, s.d_t));
    return out;
}

inline ConstraintSpec random_constraint(RngStream& rng, const ModelShape& s,
                                        const ParamVector& w_old,
                                        const std::vector<Vector>& class_texts,
                                        int task, int n, double tau0) {
    ConstraintSpec spec;
    spec.task = task;
    for (int i = 0; i < n; ++i) spec.images.push_back(random_vec(rng, s.d_x));
    for (const auto& x : spec.images)
        spec.ref_losses.push_back(ce_loss(w_old, x, task, class_texts, tau0));
    return spec;
}

// Small complete retention problem on random data; w_old defines the
// constraint references.
inline RetentionProblem random_problem(RngStream& rng, const ModelShape& s,
                                       const ParamVector& w_old, int n_pairs,
                                       int n_neg, int m, int n_per_task,
                                       double tau = 0.5, double tau0 = 0.5) {
    RetentionProblem prob;
    prob.shape = s;
    prob.tau = tau;
    prob.tau0 = tau0;
    prob.class_texts = random_class_texts(rng, s);
    for (int i = 0; i < n_pairs; ++i) {
        PairContext ctx = random_pair(rng, s, n_neg);
        ctx.pair_index = i;
        prob.pairs.push_back(std::move(ctx));
    }
    for (int k = 0; k < m; ++k)
        prob.constraints.push_back(
            random_constraint(rng, s, w_old, prob.class_texts, k, n_per_task, tau0));
    return prob;
}

}  // namespace devsafe::test

#include "devsafe/metrics.hpp"

#include <cmath>

namespace devsafe {

double task_loss(const ParamVector& p, const EvalTaskSet& set,
                 const std::vector<Vector>& class_texts, double tau0, EvalLoss loss) {
    if (set.images.empty()) throw MetricError("task_loss: empty evaluation set");
    std::vector<Vector> emb;
    emb.reserve(class_texts.size());
    for (std::size_t k = 0; k < class_texts.size(); ++k)
        emb.push_back(encode_text(p, class_texts[k], static_cast<int>(k)));
    double sum = 0.0;
    for (const auto& x : set.images) {
        Vector e1 = encode_image(p, x);
        Vector s(static_cast<Eigen::Index>(emb.size()));
        for (std::size_t k = 0; k < emb.size(); ++k)
            s[static_cast<int>(k)] = e1.dot(emb[k]);
        if (loss == EvalLoss::kZeroOne) {
            sum += predict(s) != set.task ? 1.0 : 0.0;
        } else {
            double mx = s.maxCoeff();
            double lse;
            if (mx == s[set.task]) {
                double rest = 0.0;
                for (int l = 0; l < s.size(); ++l)
                    if (l != set.task) rest += std::exp((s[l] - s[set.task]) / tau0);
                lse = std::log1p(rest);
            } else {
                double acc = 0.0;
                for (int l = 0; l < s.size(); ++l) acc += std::exp((s[l] - mx) / tau0);
                lse = (mx - s[set.task]) / tau0 + std::log(acc);
            }
            sum += lse;
        }
    }
    return sum / static_cast<double>(set.images.size());
}

double dev_safety(const ParamVector& w_new, const ParamVector& w_old,
                  const EvalSets& sets, EvalLoss loss) {
    if (sets.protected_tasks.empty())
        throw MetricError("dev_safety: no protected task sets");
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& set : sets.protected_tasks) {
        double old_loss = task_loss(w_old, set, sets.class_texts, sets.tau0, loss);
        double new_loss = task_loss(w_new, set, sets.class_texts, sets.tau0, loss);
        worst = std::min(worst, old_loss - new_loss);
    }
    return worst;
}

double retention_ratio(const std::vector<double>& dev_safety_values) {
    if (dev_safety_values.empty())
        throw MetricError("retention_ratio: empty value sequence");
    std::size_t ok = 0;
    for (double v : dev_safety_values)
        if (v >= 0.0) ++ok;
    return static_cast<double>(ok) / static_cast<double>(dev_safety_values.size());
}

double delta_target_acc(const ParamVector& w_new, const ParamVector& w_old,
                        const EvalSets& sets) {
    double err_new =
        task_loss(w_new, sets.target, sets.class_texts, sets.tau0, EvalLoss::kZeroOne);
    double err_old =
        task_loss(w_old, sets.target, sets.class_texts, sets.tau0, EvalLoss::kZeroOne);
    return (1.0 - err_new) - (1.0 - err_old);
}

std::vector<double> retention_slack_bound(const RetentionSlackInputs& in) {
    if (in.num_protected < 1) throw MetricError("retention_slack_bound: m must be >= 1");
    if (!(in.confidence > 0.0 && in.confidence < 1.0))
        throw MetricError("retention_slack_bound: confidence must be in (0, 1)");
    if (!(in.complexity_coeff >= 0.0))
        throw MetricError("retention_slack_bound: complexity coefficient must be >= 0");
    if (!(in.complexity_rate > 0.0 && in.complexity_rate <= 0.5))
        throw MetricError("retention_slack_bound: complexity rate must be in (0, 0.5]");
    std::vector<double> out;
    out.reserve(in.samples_per_task.size());
    double log_term = std::log(2.0 * in.num_protected / in.confidence);
    for (long long n : in.samples_per_task) {
        if (n < 1) throw MetricError("retention_slack_bound: n_k must be >= 1");
        double nd = static_cast<double>(n);
        out.push_back(4.0 * in.complexity_coeff / std::pow(nd, in.complexity_rate) +
                      2.0 * std::sqrt(log_term / (2.0 * nd)));
    }
    return out;
}

namespace {

Matrix jacobian_columns(const ParamVector& p, const std::vector<ConstraintSpec>& specs,
                        const std::vector<Vector>& class_texts, double tau0) {
    const auto dim = static_cast<Eigen::Index>(p.shape().param_count());
    Matrix jac(dim, static_cast<Eigen::Index>(specs.size()));
    for (std::size_t k = 0; k < specs.size(); ++k)
        jac.col(static_cast<Eigen::Index>(k)) =
            constraint_grad(p, specs[k], class_texts, tau0);
    return jac;
}

double gram_lambda_min(const Matrix& jac) {
    Matrix gram = jac.transpose() * jac;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(gram);
    if (solver.info() != Eigen::Success)
        throw MetricError("gram eigensolve failed");
    return solver.eigenvalues().minCoeff();
}

}  // namespace

double constraint_jacobian_sigma_min(const ParamVector& p,
                                     const std::vector<ConstraintSpec>& specs,
                                     const std::vector<Vector>& class_texts,
                                     double tau0, bool heads_on) {
    if (specs.empty()) throw MetricError("constraint_jacobian_sigma_min: no tasks");
    ParamVector point = heads_on ? p : (p.shape().heads_enabled ? p.without_heads() : p);
    if (heads_on && !p.shape().heads_enabled)
        throw MetricError("constraint_jacobian_sigma_min: heads requested but absent");
    Matrix jac = jacobian_columns(point, specs, class_texts, tau0);
    double lam = gram_lambda_min(jac);
    return std::sqrt(std::max(lam, 0.0));
}

HeadGainReport head_gain_check(const ParamVector& p,
                          const std::vector<ConstraintSpec>& specs,
                          const std::vector<Vector>& class_texts, double tau0) {
    if (!p.shape().heads_enabled)
        throw MetricError("head_gain_check: model has no task heads");
    if (specs.empty()) throw MetricError("head_gain_check: no constraints");
    const ModelShape& s = p.shape();
    for (int k = 0; k < s.num_tasks; ++k) {
        double prod = (p.heads_u[k] * p.heads_v[k].transpose()).norm();
        if (prod > 1e-12)
            throw MetricError("head_gain_check: U_k V_k^T must vanish at the test point");
    }

    ParamVector base = p.without_heads();
    ParamLayout layout = ParamLayout::of(base.shape());
    const int m = static_cast<int>(specs.size());

    Matrix jac(static_cast<Eigen::Index>(layout.total), m);
    HeadGainReport rep;
    rep.diag_gain.resize(m);
    double min_pairwise = std::numeric_limits<double>::infinity();
    for (int k = 0; k < m; ++k) {
        Vector g = constraint_grad(base, specs[k], class_texts, tau0);
        jac.col(k) = g;
        Matrix grad_w =
            Eigen::Map<const Matrix>(g.data() + layout.head_w, s.d_2, s.d_1);
        int task = specs[k].task;
        if (task < 0 || task >= s.num_tasks)
            throw MetricError("head_gain_check: constraint task index out of range");
        double gain_v = (grad_w * p.heads_v[task]).squaredNorm();
        double gain_u = (grad_w.transpose() * p.heads_u[task]).squaredNorm();
        rep.diag_gain[k] = gain_v + gain_u;
        min_pairwise = std::min(min_pairwise, std::min(gain_v, gain_u));
    }

    Matrix gram = jac.transpose() * jac;
    Eigen::SelfAdjointEigenSolver<Matrix> plain(gram);
    if (plain.info() != Eigen::Success) throw MetricError("head_gain_check: eigensolve failed");
    rep.lambda_min_plain = plain.eigenvalues().minCoeff();

    Matrix gram_aug = gram;
    for (int k = 0; k < m; ++k) gram_aug(k, k) += rep.diag_gain[k];
    Eigen::SelfAdjointEigenSolver<Matrix> aug(gram_aug);
    if (aug.info() != Eigen::Success) throw MetricError("head_gain_check: eigensolve failed");
    rep.lambda_min_augmented = aug.eigenvalues().minCoeff();

    rep.bound = rep.lambda_min_plain + min_pairwise;
    rep.holds = rep.lambda_min_augmented >= rep.bound - 1e-8;
    return rep;
}

std::vector<double> effective_weights(const std::vector<double>& avg_violation,
                                      double beta) {
    std::vector<double> out;
    out.reserve(avg_violation.size());
    for (double u : avg_violation) out.push_back(beta * std::max(u, 0.0));
    return out;
}

}  // namespace devsafe

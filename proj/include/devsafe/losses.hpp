#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "devsafe/model.hpp"

namespace devsafe {

// A contrast pool shared across pairs: features live in one registry vector
// and the pool selects members by index. The positive element itself is held
// by the PairContext, so the conceptual pool is indices + the self element at
// position indices->size().
struct SharedPool {
    std::shared_ptr<const std::vector<Vector>> features;
    std::shared_ptr<const std::vector<int>> indices;

    int size() const { return static_cast<int>(indices->size()) + 1; }
    int self_position() const { return static_cast<int>(indices->size()); }
};

// One target-task image-text pair with its negative pools.
struct PairContext {
    int pair_index = 0;
    Vector image;  // x_i
    Vector text;   // t_i
    SharedPool neg_texts;   // T_i^- (self at the last position)
    SharedPool neg_images;  // I_i^-
};

// All subset indices of a pool, self included.
std::vector<int> full_pool_subset(const SharedPool& pool);

// Retention constraint for one protected task: h_k(w) = mean live ce loss
// over D_k minus the cached reference losses of the frozen old model. The
// reference values are computed once and never re-evaluated against a live
// parameter vector.
struct ConstraintSpec {
    int task = 0;
    std::vector<Vector> images;      // D_k inputs, every label == task
    std::vector<double> ref_losses;  // ce(w_old, x_j, task) per sample
};

// Mean over the subset of exp((s_ij - s_ii)/tau) against the text pool;
// the full subset gives the exact pool ratio. Always > 0.
double contrast_ratio_text(const ParamVector& p, const PairContext& ctx,
                           const std::vector<int>& subset, double tau);
// Mirror with the image pool.
double contrast_ratio_image(const ParamVector& p, const PairContext& ctx,
                            const std::vector<int>& subset, double tau);

// tau * log(ratio_text) + tau * log(ratio_image) over the full pools.
double contrastive_pair_loss(const ParamVector& p, const PairContext& ctx,
                             double tau);

// Mean contrastive pair loss over the target set.
double objective_value(const ParamVector& p, const std::vector<PairContext>& pairs,
                       double tau);

// Softmax cross-entropy over class logits at temperature tau0.
double ce_loss(const ParamVector& p, const Vector& x, int y,
               const std::vector<Vector>& class_texts, double tau0);

// 1 iff the argmax class differs from y.
int zero_one_loss(const ParamVector& p, const Vector& x, int y,
                  const std::vector<Vector>& class_texts);

// Constraint value over a subset of D_k (all of D_k when subset is absent).
double constraint_value(const ParamVector& p, const ConstraintSpec& spec,
                        const std::vector<Vector>& class_texts, double tau0,
                        const std::optional<std::vector<int>>& subset = std::nullopt);

// objective + (1/m) * sum_k (beta/2) * max(h_k, 0)^2.
double penalty_value(const ParamVector& p, const std::vector<PairContext>& pairs,
                     const std::vector<ConstraintSpec>& specs,
                     const std::vector<Vector>& class_texts, double tau,
                     double tau0, double beta);

// Exact full-data gradients (flat, ParamLayout order).
Vector objective_grad(const ParamVector& p, const std::vector<PairContext>& pairs,
                      double tau);
Vector constraint_grad(const ParamVector& p, const ConstraintSpec& spec,
                       const std::vector<Vector>& class_texts, double tau0);
Vector penalty_grad(const ParamVector& p, const std::vector<PairContext>& pairs,
                    const std::vector<ConstraintSpec>& specs,
                    const std::vector<Vector>& class_texts, double tau,
                    double tau0, double beta);

// --- minibatch building blocks used by the stochastic estimators ---

// Ratio estimates plus everything needed to accumulate their gradients
// without re-encoding.
struct PairRatioEval {
    double ratio_text = 0.0;
    double ratio_img = 0.0;
    Vector self_img_emb, self_txt_emb;
    std::vector<int> sub_text, sub_img;
    std::vector<Vector> text_emb, img_emb;     // embeddings per subset element
    std::vector<double> w_text, w_img;         // exp score-gap weights
};

PairRatioEval eval_pair_ratios(const ParamVector& p, const PairContext& ctx,
                               const std::vector<int>& sub_text,
                               const std::vector<int>& sub_img, double tau);

// Adds coef_text * grad(ratio_text) + coef_img * grad(ratio_img) to grad.
void accumulate_pair_ratio_grads(const ParamVector& p, const PairContext& ctx,
                                 const PairRatioEval& ev, double tau,
                                 double coef_text, double coef_img, Vector& grad);

// Adds coef * grad of the mean live ce loss over spec.images[subset].
void accumulate_constraint_grad(const ParamVector& p, const ConstraintSpec& spec,
                                const std::vector<Vector>& class_texts, double tau0,
                                const std::vector<int>& subset, double coef,
                                Vector& grad);

// Mean ce loss over all of D_k (live term only; used by the RM baseline).
double mean_ce_loss(const ParamVector& p, const ConstraintSpec& spec,
                    const std::vector<Vector>& class_texts, double tau0);

}  // namespace devsafe

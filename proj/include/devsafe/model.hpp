#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <vector>

#include "devsafe/errors.hpp"
#include "devsafe/rng.hpp"

namespace devsafe {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Activation { kIdentity, kTanh };

// Static description of the two-tower encoder. The image tower is linear
// (d_emb x d_x) or one-hidden-layer (d_h x d_x then d_emb x d_h with the
// chosen activation in between); the text tower is a linear backbone
// (d_1 x d_t) followed by a head (d_2 x d_1), optionally modified per task
// by a low-rank pair U_k V_k^T. Embeddings are unit-normalized.
struct ModelShape {
    int d_x = 0;
    int d_t = 0;
    int d_h = 0;  // 0 = linear image tower
    int d_1 = 0;
    int d_2 = 0;  // == d_emb
    int rank = 0;
    int num_tasks = 0;  // m + 1 (protected tasks plus target)
    bool heads_enabled = false;
    Activation activation = Activation::kIdentity;

    int d_emb() const { return d_2; }
    void validate() const;
    std::size_t param_count() const;
};

// Byte offsets (in doubles) of each block inside the flat parameter layout.
// Matrices are stored column-major in this fixed order:
//   image tower (one or two matrices), text backbone, head W,
//   then per task k = 0..num_tasks-1: U_k, V_k (heads enabled only).
struct ParamLayout {
    std::size_t img1 = 0, img1_len = 0;
    std::size_t img2 = 0, img2_len = 0;
    std::size_t txt = 0, txt_len = 0;
    std::size_t head_w = 0, head_w_len = 0;
    std::size_t heads = 0;       // start of the U/V region
    std::size_t per_task = 0;    // doubles per (U_k, V_k) pair
    std::size_t total = 0;

    static ParamLayout of(const ModelShape& shape);
};

class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(const ModelShape& shape);  // all-zero parameters

    static ParamVector random_init(const ModelShape& shape, RngStream& rng,
                                   double scale = 0.5);

    const ModelShape& shape() const { return shape_; }

    Vector flatten() const;
    static ParamVector unflatten(const ModelShape& shape, const Vector& flat);

    // Copies this model's backbone and head into a heads-enabled shape with
    // the given rank: U_k = 0, V_k ~ uniform(-1/sqrt(d_1), 1/sqrt(d_1)).
    ParamVector with_heads(int rank, RngStream& rng) const;
    // Drops the U/V blocks.
    ParamVector without_heads() const;

    // Image tower. img1 is d_emb x d_x when linear, d_h x d_x otherwise.
    Matrix img1, img2;
    Matrix txt;     // d_1 x d_t
    Matrix head_w;  // d_2 x d_1
    std::vector<Matrix> heads_u;  // each d_2 x rank
    std::vector<Matrix> heads_v;  // each d_1 x rank

private:
    ModelShape shape_;
};

// Forward evaluations. All outputs are unit-normalized; a pre-normalization
// norm below 1e-30 raises DegenerateInputError instead of clamping.
Vector encode_image(const ParamVector& p, const Vector& x);
Vector encode_text(const ParamVector& p, const Vector& t, std::optional<int> task);

// Prediction scores s_k = <encode_image(x), encode_text(class_text_k, k)>.
Vector class_logits(const ParamVector& p, const Vector& x,
                    const std::vector<Vector>& class_texts);

// Index of the maximum; ties broken toward the lowest index.
int predict(const Vector& logit_vector);

// Reverse-mode accumulation: adds d<cot, embedding>/dp into grad (flat,
// ParamLayout order). The normalization map y = z/|z| contributes the
// Jacobian (I - y y^T)/|z|.
void accumulate_image_grad(const ParamVector& p, const Vector& x,
                           const Vector& cot, Vector& grad);
void accumulate_text_grad(const ParamVector& p, const Vector& t,
                          std::optional<int> task, const Vector& cot,
                          Vector& grad);

// Callable forms of the above, one JVP per cotangent.
std::function<Vector(const Vector&)> grad_image_embedding(const ParamVector& p,
                                                          const Vector& x);
std::function<Vector(const Vector&)> grad_text_embedding(const ParamVector& p,
                                                         const Vector& t,
                                                         std::optional<int> task);

}  // namespace devsafe

#include "devsafe/model.hpp"

#include <cmath>

namespace devsafe {

namespace {

constexpr double kDegenerateNorm = 1e-30;

Vector normalize_or_throw(const Vector& z, const char* where) {
    double n = z.norm();
    if (!(n >= kDegenerateNorm))
        throw DegenerateInputError(std::string(where) +
                                   ": pre-normalization vector has near-zero norm");
    return z / n;
}

void check_dim(const Vector& v, int expect, const char* what) {
    if (v.size() != expect)
        throw ShapeError(std::string(what) + ": expected dimension " +
                         std::to_string(expect) + ", got " + std::to_string(v.size()));
}

// Writes m column-major into flat starting at off.
void put(Vector& flat, std::size_t off, const Matrix& m) {
    Eigen::Map<Matrix>(flat.data() + off, m.rows(), m.cols()) = m;
}

Matrix take(const Vector& flat, std::size_t off, int rows, int cols) {
    return Eigen::Map<const Matrix>(flat.data() + off, rows, cols);
}

}  // namespace

void ModelShape::validate() const {
    if (d_x < 1 || d_t < 1 || d_1 < 1 || d_2 < 1 || num_tasks < 1 || d_h < 0)
        throw ConfigError("ModelShape: all dimensions must be >= 1 (d_h may be 0)");
    if (heads_enabled) {
        if (rank < 1) throw ConfigError("ModelShape: heads enabled but rank < 1");
        if (rank >= std::min(d_1, d_2))
            throw ConfigError("ModelShape: rank must be < min(d_1, d_2)");
    }
}

std::size_t ModelShape::param_count() const {
    return ParamLayout::of(*this).total;
}

ParamLayout ParamLayout::of(const ModelShape& s) {
    ParamLayout l;
    std::size_t off = 0;
    if (s.d_h == 0) {
        l.img1 = off;
        l.img1_len = static_cast<std::size_t>(s.d_2) * s.d_x;
        off += l.img1_len;
        l.img2 = off;
        l.img2_len = 0;
    } else {
        l.img1 = off;
        l.img1_len = static_cast<std::size_t>(s.d_h) * s.d_x;
        off += l.img1_len;
        l.img2 = off;
        l.img2_len = static_cast<std::size_t>(s.d_2) * s.d_h;
        off += l.img2_len;
    }
    l.txt = off;
    l.txt_len = static_cast<std::size_t>(s.d_1) * s.d_t;
    off += l.txt_len;
    l.head_w = off;
    l.head_w_len = static_cast<std::size_t>(s.d_2) * s.d_1;
    off += l.head_w_len;
    l.heads = off;
    if (s.heads_enabled) {
        l.per_task = static_cast<std::size_t>(s.rank) * (s.d_2 + s.d_1);
        off += l.per_task * s.num_tasks;
    }
    l.total = off;
    return l;
}

ParamVector::ParamVector(const ModelShape& shape) : shape_(shape) {
    shape.validate();
    if (shape.d_h == 0) {
        img1 = Matrix::Zero(shape.d_2, shape.d_x);
    } else {
        img1 = Matrix::Zero(shape.d_h, shape.d_x);
        img2 = Matrix::Zero(shape.d_2, shape.d_h);
    }
    txt = Matrix::Zero(shape.d_1, shape.d_t);
    head_w = Matrix::Zero(shape.d_2, shape.d_1);
    if (shape.heads_enabled) {
        heads_u.assign(shape.num_tasks, Matrix::Zero(shape.d_2, shape.rank));
        heads_v.assign(shape.num_tasks, Matrix::Zero(shape.d_1, shape.rank));
    }
}

ParamVector ParamVector::random_init(const ModelShape& shape, RngStream& rng,
                                     double scale) {
    ParamVector p(shape);
    auto fill = [&](Matrix& m, double s) {
        for (int c = 0; c < m.cols(); ++c)
            for (int r = 0; r < m.rows(); ++r) m(r, c) = s * rng.next_normal();
    };
    fill(p.img1, scale / std::sqrt(static_cast<double>(shape.d_x)));
    if (shape.d_h > 0) fill(p.img2, scale / std::sqrt(static_cast<double>(shape.d_h)));
    fill(p.txt, scale / std::sqrt(static_cast<double>(shape.d_t)));
    fill(p.head_w, scale / std::sqrt(static_cast<double>(shape.d_1)));
    if (shape.heads_enabled) {
        double b = 1.0 / std::sqrt(static_cast<double>(shape.d_1));
        for (int k = 0; k < shape.num_tasks; ++k) {
            p.heads_u[k].setZero();
            for (int c = 0; c < shape.rank; ++c)
                for (int r = 0; r < shape.d_1; ++r)
                    p.heads_v[k](r, c) = rng.next_uniform(-b, b);
        }
    }
    return p;
}

Vector ParamVector::flatten() const {
    ParamLayout l = ParamLayout::of(shape_);
    Vector flat(l.total);
    put(flat, l.img1, img1);
    if (l.img2_len) put(flat, l.img2, img2);
    put(flat, l.txt, txt);
    put(flat, l.head_w, head_w);
    if (shape_.heads_enabled) {
        std::size_t off = l.heads;
        for (int k = 0; k < shape_.num_tasks; ++k) {
            put(flat, off, heads_u[k]);
            off += static_cast<std::size_t>(shape_.d_2) * shape_.rank;
            put(flat, off, heads_v[k]);
            off += static_cast<std::size_t>(shape_.d_1) * shape_.rank;
        }
    }
    return flat;
}

ParamVector ParamVector::unflatten(const ModelShape& shape, const Vector& flat) {
    ParamLayout l = ParamLayout::of(shape);
    if (static_cast<std::size_t>(flat.size()) != l.total)
        throw ShapeError("unflatten: flat vector has length " +
                         std::to_string(flat.size()) + ", layout needs " +
                         std::to_string(l.total));
    ParamVector p(shape);
    if (shape.d_h == 0) {
        p.img1 = take(flat, l.img1, shape.d_2, shape.d_x);
    } else {
        p.img1 = take(flat, l.img1, shape.d_h, shape.d_x);
        p.img2 = take(flat, l.img2, shape.d_2, shape.d_h);
    }
    p.txt = take(flat, l.txt, shape.d_1, shape.d_t);
    p.head_w = take(flat, l.head_w, shape.d_2, shape.d_1);
    if (shape.heads_enabled) {
        std::size_t off = l.heads;
        for (int k = 0; k < shape.num_tasks; ++k) {
            p.heads_u[k] = take(flat, off, shape.d_2, shape.rank);
            off += static_cast<std::size_t>(shape.d_2) * shape.rank;
            p.heads_v[k] = take(flat, off, shape.d_1, shape.rank);
            off += static_cast<std::size_t>(shape.d_1) * shape.rank;
        }
    }
    return p;
}

ParamVector ParamVector::with_heads(int rank, RngStream& rng) const {
    ModelShape s = shape_;
    s.heads_enabled = true;
    s.rank = rank;
    s.validate();
    ParamVector p(s);
    p.img1 = img1;
    p.img2 = img2;
    p.txt = txt;
    p.head_w = head_w;
    double b = 1.0 / std::sqrt(static_cast<double>(s.d_1));
    for (int k = 0; k < s.num_tasks; ++k) {
        p.heads_u[k].setZero();
        for (int c = 0; c < s.rank; ++c)
            for (int r = 0; r < s.d_1; ++r) p.heads_v[k](r, c) = rng.next_uniform(-b, b);
    }
    return p;
}

ParamVector ParamVector::without_heads() const {
    ModelShape s = shape_;
    s.heads_enabled = false;
    s.rank = 0;
    ParamVector p(s);
    p.img1 = img1;
    p.img2 = img2;
    p.txt = txt;
    p.head_w = head_w;
    return p;
}

Vector encode_image(const ParamVector& p, const Vector& x) {
    const ModelShape& s = p.shape();
    check_dim(x, s.d_x, "encode_image input");
    Vector z;
    if (s.d_h == 0) {
        z = p.img1 * x;
    } else {
        Vector h = p.img1 * x;
        if (s.activation == Activation::kTanh) h = h.array().tanh();
        z = p.img2 * h;
    }
    return normalize_or_throw(z, "encode_image");
}

Vector encode_text(const ParamVector& p, const Vector& t, std::optional<int> task) {
    const ModelShape& s = p.shape();
    check_dim(t, s.d_t, "encode_text input");
    Vector e = p.txt * t;
    Vector z;
    if (task.has_value() && s.heads_enabled) {
        int k = *task;
        if (k < 0 || k >= s.num_tasks)
            throw ShapeError("encode_text: task index " + std::to_string(k) +
                             " out of range");
        z = p.head_w * e + p.heads_u[k] * (p.heads_v[k].transpose() * e);
    } else {
        if (task.has_value() && !s.heads_enabled) {
            int k = *task;
            if (k < 0 || k >= s.num_tasks)
                throw ShapeError("encode_text: task index " + std::to_string(k) +
                                 " out of range");
        }
        z = p.head_w * e;
    }
    return normalize_or_throw(z, "encode_text");
}

Vector class_logits(const ParamVector& p, const Vector& x,
                    const std::vector<Vector>& class_texts) {
    if (static_cast<int>(class_texts.size()) != p.shape().num_tasks)
        throw ShapeError("class_logits: expected " +
                         std::to_string(p.shape().num_tasks) + " class texts, got " +
                         std::to_string(class_texts.size()));
    Vector e1 = encode_image(p, x);
    Vector out(class_texts.size());
    for (std::size_t k = 0; k < class_texts.size(); ++k)
        out[static_cast<int>(k)] =
            e1.dot(encode_text(p, class_texts[k], static_cast<int>(k)));
    return out;
}

int predict(const Vector& logit_vector) {
    if (logit_vector.size() == 0)
        throw ShapeError("predict: empty logit vector");
    int best = 0;
    for (int i = 1; i < logit_vector.size(); ++i)
        if (logit_vector[i] > logit_vector[best]) best = i;
    return best;
}

namespace {

// Cotangent pulled back through y = z/|z|: (I - y y^T) cot / |z|.
Vector normalization_pullback(const Vector& z, const Vector& cot, const char* where) {
    double n = z.norm();
    if (!(n >= kDegenerateNorm))
        throw DegenerateInputError(std::string(where) +
                                   ": pre-normalization vector has near-zero norm");
    Vector y = z / n;
    return (cot - y * y.dot(cot)) / n;
}

}  // namespace

void accumulate_image_grad(const ParamVector& p, const Vector& x,
                           const Vector& cot, Vector& grad) {
    const ModelShape& s = p.shape();
    check_dim(x, s.d_x, "accumulate_image_grad input");
    check_dim(cot, s.d_2, "accumulate_image_grad cotangent");
    ParamLayout l = ParamLayout::of(s);
    if (static_cast<std::size_t>(grad.size()) != l.total)
        throw ShapeError("accumulate_image_grad: gradient buffer size mismatch");
    if (s.d_h == 0) {
        Vector z = p.img1 * x;
        Vector gz = normalization_pullback(z, cot, "accumulate_image_grad");
        Eigen::Map<Matrix>(grad.data() + l.img1, s.d_2, s.d_x) += gz * x.transpose();
    } else {
        Vector q = p.img1 * x;
        Vector a = (s.activation == Activation::kTanh) ? Vector(q.array().tanh()) : q;
        Vector z = p.img2 * a;
        Vector gz = normalization_pullback(z, cot, "accumulate_image_grad");
        Eigen::Map<Matrix>(grad.data() + l.img2, s.d_2, s.d_h) += gz * a.transpose();
        Vector ga = p.img2.transpose() * gz;
        if (s.activation == Activation::kTanh)
            ga = ga.cwiseProduct(Vector(1.0 - a.array().square()));
        Eigen::Map<Matrix>(grad.data() + l.img1, s.d_h, s.d_x) += ga * x.transpose();
    }
}

void accumulate_text_grad(const ParamVector& p, const Vector& t,
                          std::optional<int> task, const Vector& cot,
                          Vector& grad) {
    const ModelShape& s = p.shape();
    check_dim(t, s.d_t, "accumulate_text_grad input");
    check_dim(cot, s.d_2, "accumulate_text_grad cotangent");
    ParamLayout l = ParamLayout::of(s);
    if (static_cast<std::size_t>(grad.size()) != l.total)
        throw ShapeError("accumulate_text_grad: gradient buffer size mismatch");

    Vector e = p.txt * t;
    bool use_head = task.has_value() && s.heads_enabled;
    int k = use_head ? *task : -1;
    if (task.has_value()) {
        int kk = *task;
        if (kk < 0 || kk >= s.num_tasks)
            throw ShapeError("accumulate_text_grad: task index out of range");
    }

    Vector z;
    if (use_head)
        z = p.head_w * e + p.heads_u[k] * (p.heads_v[k].transpose() * e);
    else
        z = p.head_w * e;
    Vector gz = normalization_pullback(z, cot, "accumulate_text_grad");

    // d/dW and, through the effective head, d/dU_k, d/dV_k.
    Eigen::Map<Matrix>(grad.data() + l.head_w, s.d_2, s.d_1) += gz * e.transpose();
    Vector ge = p.head_w.transpose() * gz;
    if (use_head) {
        std::size_t off = l.heads + static_cast<std::size_t>(k) * l.per_task;
        Eigen::Map<Matrix>(grad.data() + off, s.d_2, s.rank) +=
            gz * (e.transpose() * p.heads_v[k]);
        Eigen::Map<Matrix>(grad.data() + off + static_cast<std::size_t>(s.d_2) * s.rank,
                           s.d_1, s.rank) +=
            e * (gz.transpose() * p.heads_u[k]);
        ge += p.heads_v[k] * (p.heads_u[k].transpose() * gz);
    }
    Eigen::Map<Matrix>(grad.data() + l.txt, s.d_1, s.d_t) += ge * t.transpose();
}

std::function<Vector(const Vector&)> grad_image_embedding(const ParamVector& p,
                                                          const Vector& x) {
    return [p, x](const Vector& cot) {
        Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.shape().param_count()));
        accumulate_image_grad(p, x, cot, grad);
        return grad;
    };
}

std::function<Vector(const Vector&)> grad_text_embedding(const ParamVector& p,
                                                         const Vector& t,
                                                         std::optional<int> task) {
    return [p, t, task](const Vector& cot) {
        Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.shape().param_count()));
        accumulate_text_grad(p, t, task, cot, grad);
        return grad;
    };
}

}  // namespace devsafe

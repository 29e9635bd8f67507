#include "devsafe/losses.hpp"

#include <cmath>
#include <unordered_map>

namespace devsafe {

namespace {

constexpr double kLogFloor = 1e-300;

const Vector& pool_feature(const SharedPool& pool, const Vector& self, int j) {
    int n = static_cast<int>(pool.indices->size());
    if (j < 0 || j > n) throw EstimatorError("pool subset index out of range");
    if (j == n) return self;
    return (*pool.features)[(*pool.indices)[j]];
}

double softmax_ce_from_logits(const Vector& s, int y, double tau0) {
    if (tau0 <= 0.0) throw ConfigError("ce_loss: tau0 must be > 0");
    if (y < 0 || y >= s.size()) throw ShapeError("ce_loss: label out of range");
    int arg_max = 0;
    for (int l = 1; l < s.size(); ++l)
        if (s[l] > s[arg_max]) arg_max = l;
    if (s[arg_max] == s[y]) {
        // log1p form keeps saturated losses accurate down to ~1e-300.
        double rest = 0.0;
        for (int l = 0; l < s.size(); ++l) {
            if (l == y) continue;
            rest += std::exp((s[l] - s[y]) / tau0);
        }
        return std::log1p(rest);
    }
    double mx = s[arg_max];
    double sum = 0.0;
    for (int l = 0; l < s.size(); ++l) sum += std::exp((s[l] - mx) / tau0);
    return (mx - s[y]) / tau0 + std::log(sum);
}

// Per-evaluation cache of encoded pool registries, keyed by registry address.
struct RegistryCache {
    std::unordered_map<const std::vector<Vector>*, std::vector<Vector>> text_emb;
    std::unordered_map<const std::vector<Vector>*, std::vector<Vector>> img_emb;

    const std::vector<Vector>& texts(const ParamVector& p,
                                     const std::shared_ptr<const std::vector<Vector>>& reg) {
        auto it = text_emb.find(reg.get());
        if (it != text_emb.end()) return it->second;
        std::vector<Vector> emb;
        emb.reserve(reg->size());
        for (const auto& f : *reg) emb.push_back(encode_text(p, f, std::nullopt));
        return text_emb.emplace(reg.get(), std::move(emb)).first->second;
    }
    const std::vector<Vector>& images(const ParamVector& p,
                                      const std::shared_ptr<const std::vector<Vector>>& reg) {
        auto it = img_emb.find(reg.get());
        if (it != img_emb.end()) return it->second;
        std::vector<Vector> emb;
        emb.reserve(reg->size());
        for (const auto& f : *reg) emb.push_back(encode_image(p, f));
        return img_emb.emplace(reg.get(), std::move(emb)).first->second;
    }
};

double guarded_log(double g) { return std::log(std::max(g, kLogFloor)); }

}  // namespace

std::vector<int> full_pool_subset(const SharedPool& pool) {
    std::vector<int> all(pool.size());
    for (int j = 0; j < pool.size(); ++j) all[j] = j;
    return all;
}

double contrast_ratio_text(const ParamVector& p, const PairContext& ctx,
                           const std::vector<int>& subset, double tau) {
    if (subset.empty()) throw EstimatorError("contrast_ratio_text: empty subset");
    if (tau <= 0.0) throw ConfigError("contrast_ratio_text: tau must be > 0");
    Vector e_img = encode_image(p, ctx.image);
    double s_self = e_img.dot(encode_text(p, ctx.text, std::nullopt));
    double sum = 0.0;
    for (int j : subset) {
        const Vector& tj = pool_feature(ctx.neg_texts, ctx.text, j);
        double s = e_img.dot(encode_text(p, tj, std::nullopt));
        sum += std::exp((s - s_self) / tau);
    }
    return sum / static_cast<double>(subset.size());
}

double contrast_ratio_image(const ParamVector& p, const PairContext& ctx,
                            const std::vector<int>& subset, double tau) {
    if (subset.empty()) throw EstimatorError("contrast_ratio_image: empty subset");
    if (tau <= 0.0) throw ConfigError("contrast_ratio_image: tau must be > 0");
    Vector e_txt = encode_text(p, ctx.text, std::nullopt);
    double s_self = e_txt.dot(encode_image(p, ctx.image));
    double sum = 0.0;
    for (int j : subset) {
        const Vector& xj = pool_feature(ctx.neg_images, ctx.image, j);
        double s = e_txt.dot(encode_image(p, xj));
        sum += std::exp((s - s_self) / tau);
    }
    return sum / static_cast<double>(subset.size());
}

double contrastive_pair_loss(const ParamVector& p, const PairContext& ctx,
                             double tau) {
    double g1 = contrast_ratio_text(p, ctx, full_pool_subset(ctx.neg_texts), tau);
    double g2 = contrast_ratio_image(p, ctx, full_pool_subset(ctx.neg_images), tau);
    return tau * guarded_log(g1) + tau * guarded_log(g2);
}

double objective_value(const ParamVector& p, const std::vector<PairContext>& pairs,
                       double tau) {
    if (pairs.empty()) throw EstimatorError("objective_value: empty pair set");
    RegistryCache cache;
    double total = 0.0;
    for (const auto& ctx : pairs) {
        Vector e_img = encode_image(p, ctx.image);
        Vector e_txt = encode_text(p, ctx.text, std::nullopt);
        double s_self = e_img.dot(e_txt);

        const auto& temb = cache.texts(p, ctx.neg_texts.features);
        double sum1 = 1.0;  // self term exp(0)
        for (int idx : *ctx.neg_texts.indices)
            sum1 += std::exp((e_img.dot(temb[idx]) - s_self) / tau);
        double g1 = sum1 / ctx.neg_texts.size();

        const auto& iemb = cache.images(p, ctx.neg_images.features);
        double sum2 = 1.0;
        for (int idx : *ctx.neg_images.indices)
            sum2 += std::exp((e_txt.dot(iemb[idx]) - s_self) / tau);
        double g2 = sum2 / ctx.neg_images.size();

        total += tau * guarded_log(g1) + tau * guarded_log(g2);
    }
    return total / static_cast<double>(pairs.size());
}

double ce_loss(const ParamVector& p, const Vector& x, int y,
               const std::vector<Vector>& class_texts, double tau0) {
    Vector s = class_logits(p, x, class_texts);
    return softmax_ce_from_logits(s, y, tau0);
}

int zero_one_loss(const ParamVector& p, const Vector& x, int y,
                  const std::vector<Vector>& class_texts) {
    Vector s = class_logits(p, x, class_texts);
    if (y < 0 || y >= s.size()) throw ShapeError("zero_one_loss: label out of range");
    return predict(s) != y ? 1 : 0;
}

double constraint_value(const ParamVector& p, const ConstraintSpec& spec,
                        const std::vector<Vector>& class_texts, double tau0,
                        const std::optional<std::vector<int>>& subset) {
    if (spec.images.size() != spec.ref_losses.size())
        throw ShapeError("constraint_value: spec images/ref_losses size mismatch");
    std::vector<Vector> emb;
    emb.reserve(class_texts.size());
    for (std::size_t k = 0; k < class_texts.size(); ++k)
        emb.push_back(encode_text(p, class_texts[k], static_cast<int>(k)));

    auto one = [&](int j) {
        if (j < 0 || j >= static_cast<int>(spec.images.size()))
            throw EstimatorError("constraint_value: subset index out of range");
        Vector e1 = encode_image(p, spec.images[j]);
        Vector s(static_cast<Eigen::Index>(emb.size()));
        for (std::size_t k = 0; k < emb.size(); ++k)
            s[static_cast<int>(k)] = e1.dot(emb[k]);
        return softmax_ce_from_logits(s, spec.task, tau0) - spec.ref_losses[j];
    };

    double sum = 0.0;
    if (subset.has_value()) {
        if (subset->empty()) throw EstimatorError("constraint_value: empty subset");
        for (int j : *subset) sum += one(j);
        return sum / static_cast<double>(subset->size());
    }
    if (spec.images.empty()) throw EstimatorError("constraint_value: empty task dataset");
    for (int j = 0; j < static_cast<int>(spec.images.size()); ++j) sum += one(j);
    return sum / static_cast<double>(spec.images.size());
}

double penalty_value(const ParamVector& p, const std::vector<PairContext>& pairs,
                     const std::vector<ConstraintSpec>& specs,
                     const std::vector<Vector>& class_texts, double tau,
                     double tau0, double beta) {
    if (beta < 0.0) throw ConfigError("penalty_value: beta must be >= 0");
    double phi = objective_value(p, pairs, tau);
    if (specs.empty()) return phi;
    double pen = 0.0;
    for (const auto& spec : specs) {
        double h = constraint_value(p, spec, class_texts, tau0);
        double hp = std::max(h, 0.0);
        pen += 0.5 * beta * hp * hp;
    }
    return phi + pen / static_cast<double>(specs.size());
}

PairRatioEval eval_pair_ratios(const ParamVector& p, const PairContext& ctx,
                               const std::vector<int>& sub_text,
                               const std::vector<int>& sub_img, double tau) {
    if (sub_text.empty() || sub_img.empty())
        throw EstimatorError("eval_pair_ratios: empty subset");
    PairRatioEval ev;
    ev.sub_text = sub_text;
    ev.sub_img = sub_img;
    ev.self_img_emb = encode_image(p, ctx.image);
    ev.self_txt_emb = encode_text(p, ctx.text, std::nullopt);
    double s_self = ev.self_img_emb.dot(ev.self_txt_emb);

    ev.text_emb.reserve(sub_text.size());
    ev.w_text.reserve(sub_text.size());
    double sum1 = 0.0;
    for (int j : sub_text) {
        const Vector& tj = pool_feature(ctx.neg_texts, ctx.text, j);
        Vector e = (j == ctx.neg_texts.self_position())
                       ? ev.self_txt_emb
                       : encode_text(p, tj, std::nullopt);
        double w = std::exp((ev.self_img_emb.dot(e) - s_self) / tau);
        ev.text_emb.push_back(std::move(e));
        ev.w_text.push_back(w);
        sum1 += w;
    }
    ev.ratio_text = sum1 / static_cast<double>(sub_text.size());

    ev.img_emb.reserve(sub_img.size());
    ev.w_img.reserve(sub_img.size());
    double sum2 = 0.0;
    for (int j : sub_img) {
        const Vector& xj = pool_feature(ctx.neg_images, ctx.image, j);
        Vector e = (j == ctx.neg_images.self_position()) ? ev.self_img_emb
                                                         : encode_image(p, xj);
        double w = std::exp((ev.self_txt_emb.dot(e) - s_self) / tau);
        ev.img_emb.push_back(std::move(e));
        ev.w_img.push_back(w);
        sum2 += w;
    }
    ev.ratio_img = sum2 / static_cast<double>(sub_img.size());
    return ev;
}

void accumulate_pair_ratio_grads(const ParamVector& p, const PairContext& ctx,
                                 const PairRatioEval& ev, double tau,
                                 double coef_text, double coef_img, Vector& grad) {
    const int d = p.shape().d_emb();
    // grad(ratio_text) = (1/(|S| tau)) sum_j w_j (grad s_ij - grad s_ii)
    double c1 = coef_text / (static_cast<double>(ev.sub_text.size()) * tau);
    double c2 = coef_img / (static_cast<double>(ev.sub_img.size()) * tau);

    Vector img_cot = Vector::Zero(d);  // cotangent on E1(x_i)
    Vector txt_cot = Vector::Zero(d);  // cotangent on E2(t_i)

    double wsum1 = 0.0;
    for (std::size_t j = 0; j < ev.sub_text.size(); ++j) {
        double w = ev.w_text[j];
        wsum1 += w;
        img_cot += (c1 * w) * ev.text_emb[j];
        int idx = ev.sub_text[j];
        if (idx != ctx.neg_texts.self_position()) {
            const Vector& tj = pool_feature(ctx.neg_texts, ctx.text, idx);
            accumulate_text_grad(p, tj, std::nullopt, (c1 * w) * ev.self_img_emb, grad);
        } else {
            txt_cot += (c1 * w) * ev.self_img_emb;
        }
    }
    img_cot -= (c1 * wsum1) * ev.self_txt_emb;
    txt_cot -= (c1 * wsum1) * ev.self_img_emb;

    double wsum2 = 0.0;
    for (std::size_t j = 0; j < ev.sub_img.size(); ++j) {
        double w = ev.w_img[j];
        wsum2 += w;
        txt_cot += (c2 * w) * ev.img_emb[j];
        int idx = ev.sub_img[j];
        if (idx != ctx.neg_images.self_position()) {
            const Vector& xj = pool_feature(ctx.neg_images, ctx.image, idx);
            accumulate_image_grad(p, xj, (c2 * w) * ev.self_txt_emb, grad);
        } else {
            img_cot += (c2 * w) * ev.self_txt_emb;
        }
    }
    txt_cot -= (c2 * wsum2) * ev.self_img_emb;
    img_cot -= (c2 * wsum2) * ev.self_txt_emb;

    accumulate_image_grad(p, ctx.image, img_cot, grad);
    accumulate_text_grad(p, ctx.text, std::nullopt, txt_cot, grad);
}

Vector objective_grad(const ParamVector& p, const std::vector<PairContext>& pairs,
                      double tau) {
    if (pairs.empty()) throw EstimatorError("objective_grad: empty pair set");
    const std::size_t dim = p.shape().param_count();
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(dim));
    RegistryCache cache;
    const double n_o = static_cast<double>(pairs.size());

    // Cotangents on shared registry elements accumulate across pairs; each
    // registry element is backpropagated once at the end.
    std::unordered_map<const std::vector<Vector>*, std::vector<Vector>> text_cots,
        img_cots;

    for (const auto& ctx : pairs) {
        Vector e_img = encode_image(p, ctx.image);
        Vector e_txt = encode_text(p, ctx.text, std::nullopt);
        double s_self = e_img.dot(e_txt);

        const auto& temb = cache.texts(p, ctx.neg_texts.features);
        const auto& iemb = cache.images(p, ctx.neg_images.features);

        auto& tcot = text_cots[ctx.neg_texts.features.get()];
        if (tcot.empty())
            tcot.assign(temb.size(), Vector::Zero(p.shape().d_emb()));
        auto& icot = img_cots[ctx.neg_images.features.get()];
        if (icot.empty())
            icot.assign(iemb.size(), Vector::Zero(p.shape().d_emb()));

        const int pool1 = ctx.neg_texts.size();
        double sum1 = 1.0;
        std::vector<double> w1(ctx.neg_texts.indices->size());
        for (std::size_t j = 0; j < w1.size(); ++j) {
            int idx = (*ctx.neg_texts.indices)[j];
            w1[j] = std::exp((e_img.dot(temb[idx]) - s_self) / tau);
            sum1 += w1[j];
        }
        double g1 = sum1 / pool1;

        const int pool2 = ctx.neg_images.size();
        double sum2 = 1.0;
        std::vector<double> w2(ctx.neg_images.indices->size());
        for (std::size_t j = 0; j < w2.size(); ++j) {
            int idx = (*ctx.neg_images.indices)[j];
            w2[j] = std::exp((e_txt.dot(iemb[idx]) - s_self) / tau);
            sum2 += w2[j];
        }
        double g2 = sum2 / pool2;

        // (tau/n_o) * grad g / g with grad g = (1/(pool*tau)) sum w (ds_ij - ds_ii)
        double c1 = 1.0 / (n_o * std::max(g1, kLogFloor) * pool1);
        double c2 = 1.0 / (n_o * std::max(g2, kLogFloor) * pool2);

        Vector img_cot = Vector::Zero(p.shape().d_emb());
        Vector txt_cot = Vector::Zero(p.shape().d_emb());

        for (std::size_t j = 0; j < w1.size(); ++j) {
            int idx = (*ctx.neg_texts.indices)[j];
            img_cot += (c1 * w1[j]) * temb[idx];
            tcot[idx] += (c1 * w1[j]) * e_img;
        }
        img_cot += c1 * e_txt;          // self term of the first sum
        txt_cot += c1 * e_img;
        img_cot -= (c1 * sum1) * e_txt;  // -(sum w) * ds_ii
        txt_cot -= (c1 * sum1) * e_img;

        for (std::size_t j = 0; j < w2.size(); ++j) {
            int idx = (*ctx.neg_images.indices)[j];
            txt_cot += (c2 * w2[j]) * iemb[idx];
            icot[idx] += (c2 * w2[j]) * e_txt;
        }
        txt_cot += c2 * e_img;
        img_cot += c2 * e_txt;
        txt_cot -= (c2 * sum2) * e_img;
        img_cot -= (c2 * sum2) * e_txt;

        accumulate_image_grad(p, ctx.image, img_cot, grad);
        accumulate_text_grad(p, ctx.text, std::nullopt, txt_cot, grad);
    }

    for (auto& [reg, cots] : text_cots) {
        for (std::size_t idx = 0; idx < cots.size(); ++idx) {
            if (cots[idx].isZero(0.0)) continue;
            accumulate_text_grad(p, (*reg)[idx], std::nullopt, cots[idx], grad);
        }
    }
    for (auto& [reg, cots] : img_cots) {
        for (std::size_t idx = 0; idx < cots.size(); ++idx) {
            if (cots[idx].isZero(0.0)) continue;
            accumulate_image_grad(p, (*reg)[idx], cots[idx], grad);
        }
    }
    return grad;
}

void accumulate_constraint_grad(const ParamVector& p, const ConstraintSpec& spec,
                                const std::vector<Vector>& class_texts, double tau0,
                                const std::vector<int>& subset, double coef,
                                Vector& grad) {
    if (subset.empty()) throw EstimatorError("accumulate_constraint_grad: empty subset");
    if (tau0 <= 0.0) throw ConfigError("accumulate_constraint_grad: tau0 must be > 0");
    const int num_classes = static_cast<int>(class_texts.size());
    std::vector<Vector> emb(num_classes);
    for (int k = 0; k < num_classes; ++k)
        emb[k] = encode_text(p, class_texts[k], k);

    std::vector<Vector> class_cots(num_classes, Vector::Zero(p.shape().d_emb()));
    double scale = coef / static_cast<double>(subset.size());

    for (int j : subset) {
        if (j < 0 || j >= static_cast<int>(spec.images.size()))
            throw EstimatorError("accumulate_constraint_grad: subset index out of range");
        Vector e1 = encode_image(p, spec.images[j]);
        Vector s(num_classes);
        for (int k = 0; k < num_classes; ++k) s[k] = e1.dot(emb[k]);
        // softmax(s/tau0), max-shifted
        double mx = s.maxCoeff();
        Vector soft = ((s.array() - mx) / tau0).exp();
        soft /= soft.sum();
        Vector img_cot = Vector::Zero(p.shape().d_emb());
        for (int k = 0; k < num_classes; ++k) {
            double coeff = scale * (soft[k] - (k == spec.task ? 1.0 : 0.0)) / tau0;
            img_cot += coeff * emb[k];
            class_cots[k] += coeff * e1;
        }
        accumulate_image_grad(p, spec.images[j], img_cot, grad);
    }
    for (int k = 0; k < num_classes; ++k)
        accumulate_text_grad(p, class_texts[k], k, class_cots[k], grad);
}

Vector constraint_grad(const ParamVector& p, const ConstraintSpec& spec,
                       const std::vector<Vector>& class_texts, double tau0) {
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.shape().param_count()));
    std::vector<int> all(spec.images.size());
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
    accumulate_constraint_grad(p, spec, class_texts, tau0, all, 1.0, grad);
    return grad;
}

Vector penalty_grad(const ParamVector& p, const std::vector<PairContext>& pairs,
                    const std::vector<ConstraintSpec>& specs,
                    const std::vector<Vector>& class_texts, double tau,
                    double tau0, double beta) {
    Vector grad = objective_grad(p, pairs, tau);
    if (specs.empty() || beta == 0.0) return grad;
    const double m = static_cast<double>(specs.size());
    for (const auto& spec : specs) {
        double h = constraint_value(p, spec, class_texts, tau0);
        if (h > 0.0) {
            std::vector<int> all(spec.images.size());
            for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
            accumulate_constraint_grad(p, spec, class_texts, tau0, all,
                                       beta * h / m, grad);
        }
    }
    return grad;
}

double mean_ce_loss(const ParamVector& p, const ConstraintSpec& spec,
                    const std::vector<Vector>& class_texts, double tau0) {
    if (spec.images.empty()) throw EstimatorError("mean_ce_loss: empty task dataset");
    std::vector<Vector> emb;
    emb.reserve(class_texts.size());
    for (std::size_t k = 0; k < class_texts.size(); ++k)
        emb.push_back(encode_text(p, class_texts[k], static_cast<int>(k)));
    double sum = 0.0;
    for (const auto& x : spec.images) {
        Vector e1 = encode_image(p, x);
        Vector s(static_cast<Eigen::Index>(emb.size()));
        for (std::size_t k = 0; k < emb.size(); ++k)
            s[static_cast<int>(k)] = e1.dot(emb[k]);
        sum += softmax_ce_from_logits(s, spec.task, tau0);
    }
    return sum / static_cast<double>(spec.images.size());
}

}  // namespace devsafe

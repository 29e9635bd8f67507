#include "devsafe/data.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace devsafe {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
        case Split::kNone: return "none";
    }
    throw ParseError("unknown split");
}

std::string to_string(SampleTag t) {
    switch (t) {
        case SampleTag::kProtected: return "protected";
        case SampleTag::kTarget: return "target";
        case SampleTag::kAux: return "aux";
        case SampleTag::kNegative: return "negative";
    }
    throw ParseError("unknown tag");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "val") return Split::kVal;
    if (s == "test") return Split::kTest;
    if (s == "none") return Split::kNone;
    throw ParseError("unknown split value: " + s);
}

SampleTag tag_from_string(const std::string& s) {
    if (s == "protected") return SampleTag::kProtected;
    if (s == "target") return SampleTag::kTarget;
    if (s == "aux") return SampleTag::kAux;
    if (s == "negative") return SampleTag::kNegative;
    throw ParseError("unknown tag value: " + s);
}

void ScenarioSpec::validate() const {
    if (d_x < 1 || d_t < 1) throw GenerationError("ScenarioSpec: dimensions must be >= 1");
    if (num_classes < 2) throw GenerationError("ScenarioSpec: need at least two classes");
    if (target_class < 0 || target_class >= num_classes)
        throw GenerationError("ScenarioSpec: target_class out of range");
    if (train_per_class < 1 || val_per_class < 1 || test_per_class < 1 ||
        target_train < 1 || target_val < 1 || target_test < 1)
        throw GenerationError("ScenarioSpec: all per-split counts must be >= 1");
    if (aux_pairs < 0 || negative_factor < 1)
        throw GenerationError("ScenarioSpec: aux_pairs >= 0, negative_factor >= 1");
    if (!(separation > 0.0))
        throw GenerationError("ScenarioSpec: separation must be > 0");
    if (noise < 0.0 || text_noise < 0.0)
        throw GenerationError("ScenarioSpec: noise scales must be >= 0");
}

std::vector<int> Scenario::protected_classes() const {
    std::vector<int> out;
    for (int k = 0; k < spec.num_classes; ++k)
        if (k != spec.target_class) out.push_back(k);
    return out;
}

namespace {

Vector random_unit(RngStream& rng, int dim) {
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = rng.next_normal();
    double n = v.norm();
    if (n < 1e-12) { v.setZero(); v[0] = 1.0; n = 1.0; }
    return v / n;
}

Vector noisy_copy(RngStream& rng, const Vector& base, double scale) {
    Vector v = base;
    for (int i = 0; i < v.size(); ++i) v[i] += scale * rng.next_normal();
    return v;
}

}  // namespace

Scenario generate_scenario(const ScenarioSpec& spec) {
    spec.validate();
    Scenario sc;
    sc.spec = spec;
    RngStream rng = make_stream(spec.seed, StreamId::kDataGen);

    sc.img_prototypes.reserve(spec.num_classes);
    sc.class_texts.reserve(spec.num_classes);
    for (int k = 0; k < spec.num_classes; ++k)
        sc.img_prototypes.push_back(spec.separation * random_unit(rng, spec.d_x));
    for (int k = 0; k < spec.num_classes; ++k)
        sc.class_texts.push_back(spec.separation * random_unit(rng, spec.d_t));

    int next_id = 0;
    auto add = [&](Split split, SampleTag tag, int label, const Vector& img,
                   const Vector& txt) {
        SampleRecord rec;
        rec.id = next_id++;
        rec.split = split;
        rec.tag = tag;
        rec.label = label;
        rec.img = img;
        rec.txt = txt;
        sc.samples.push_back(std::move(rec));
    };
    auto class_sample = [&](int k, Split split, SampleTag tag) {
        Vector img = noisy_copy(rng, sc.img_prototypes[k], spec.noise);
        Vector txt = noisy_copy(rng, sc.class_texts[k], spec.text_noise);
        add(split, tag, k, img, txt);
    };

    for (int k = 0; k < spec.num_classes; ++k) {
        if (k == spec.target_class) continue;
        for (int i = 0; i < spec.train_per_class; ++i)
            class_sample(k, Split::kTrain, SampleTag::kProtected);
        for (int i = 0; i < spec.val_per_class; ++i)
            class_sample(k, Split::kVal, SampleTag::kProtected);
        for (int i = 0; i < spec.test_per_class; ++i)
            class_sample(k, Split::kTest, SampleTag::kProtected);
    }
    for (int i = 0; i < spec.target_train; ++i)
        class_sample(spec.target_class, Split::kTrain, SampleTag::kTarget);
    for (int i = 0; i < spec.target_val; ++i)
        class_sample(spec.target_class, Split::kVal, SampleTag::kTarget);
    for (int i = 0; i < spec.target_test; ++i)
        class_sample(spec.target_class, Split::kTest, SampleTag::kTarget);
    for (int i = 0; i < spec.aux_pairs; ++i)
        class_sample(spec.target_class, Split::kTrain, SampleTag::kAux);

    const int n_neg = spec.negative_factor * (spec.target_train + spec.aux_pairs);
    for (int i = 0; i < n_neg; ++i) {
        Vector dir_img = spec.separation * random_unit(rng, spec.d_x);
        Vector dir_txt = spec.separation * random_unit(rng, spec.d_t);
        add(Split::kTrain, SampleTag::kNegative, -1,
            noisy_copy(rng, dir_img, spec.noise),
            noisy_copy(rng, dir_txt, spec.text_noise));
    }

    if (spec.self_check) {
        BaseModelConfig base_cfg;
        base_cfg.seed = spec.seed;
        make_base_model(sc, base_cfg);  // throws GenerationError below the bar
    }
    return sc;
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_feature_csv(const fs::path& path, const std::vector<SampleRecord>& recs,
                       bool image_side, int dim) {
    std::ofstream os(path, std::ios::binary);  // binary keeps LF endings everywhere
    if (!os) throw ParseError("cannot open for writing: " + path.string());
    os << "id,split,tag,label";
    for (int i = 0; i < dim; ++i) os << ",f" << i;
    os << "\n";
    for (const auto& r : recs) {
        const Vector& f = image_side ? r.img : r.txt;
        os << r.id << ',' << to_string(r.split) << ',' << to_string(r.tag) << ','
           << r.label;
        for (int i = 0; i < dim; ++i) os << ',' << format_double(f[i]);
        os << "\n";
    }
    if (!os) throw ParseError("write failed: " + path.string());
}

void write_vector_csv(const fs::path& path, const std::vector<Vector>& vecs,
                      const char* tag, int dim) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot open for writing: " + path.string());
    os << "id,split,tag,label";
    for (int i = 0; i < dim; ++i) os << ",f" << i;
    os << "\n";
    for (std::size_t k = 0; k < vecs.size(); ++k) {
        os << k << ",none," << tag << ',' << k;
        for (int i = 0; i < dim; ++i) os << ',' << format_double(vecs[k][i]);
        os << "\n";
    }
    if (!os) throw ParseError("write failed: " + path.string());
}

struct CsvRow {
    int id, label;
    std::string split, tag;
    Vector features;
};

std::vector<CsvRow> read_csv(const fs::path& path, int dim) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path.string() + ":1: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string expect = "id,split,tag,label";
    for (int i = 0; i < dim; ++i) expect += ",f" + std::to_string(i);
    if (line != expect)
        throw ParseError(path.string() + ":1: bad header, expected '" + expect + "'");

    std::vector<CsvRow> rows;
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            std::size_t pos = line.find(',', start);
            if (pos == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, pos - start));
            start = pos + 1;
        }
        if (static_cast<int>(fields.size()) != 4 + dim)
            throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": expected " + std::to_string(4 + dim) +
                             " fields, got " + std::to_string(fields.size()));
        CsvRow row;
        try {
            row.id = std::stoi(fields[0]);
            row.label = std::stoi(fields[3]);
        } catch (const std::exception&) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": non-integer id/label");
        }
        row.split = fields[1];
        row.tag = fields[2];
        row.features.resize(dim);
        for (int i = 0; i < dim; ++i) {
            const std::string& fld = fields[4 + i];
            char* end = nullptr;
            double v = std::strtod(fld.c_str(), &end);
            if (end == fld.c_str() || *end != '\0')
                throw ParseError(path.string() + ":" + std::to_string(line_no) +
                                 ": field f" + std::to_string(i) +
                                 " is not a number: '" + fld + "'");
            row.features[i] = v;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

void save_scenario(const Scenario& scenario, const std::string& dir) {
    fs::create_directories(dir);
    const ScenarioSpec& sp = scenario.spec;
    json manifest = {
        {"format_version", 1},
        {"d_x", sp.d_x},
        {"d_t", sp.d_t},
        {"num_classes", sp.num_classes},
        {"target_class", sp.target_class},
        {"train_per_class", sp.train_per_class},
        {"val_per_class", sp.val_per_class},
        {"test_per_class", sp.test_per_class},
        {"target_train", sp.target_train},
        {"target_val", sp.target_val},
        {"target_test", sp.target_test},
        {"aux_pairs", sp.aux_pairs},
        {"negative_factor", sp.negative_factor},
        {"separation", sp.separation},
        {"noise", sp.noise},
        {"text_noise", sp.text_noise},
        {"seed", sp.seed},
        {"num_samples", scenario.samples.size()},
    };
    {
        std::ofstream os(fs::path(dir) / "manifest.json", std::ios::binary);
        if (!os) throw ParseError("cannot write manifest.json in " + dir);
        os << manifest.dump(2) << "\n";
    }
    write_feature_csv(fs::path(dir) / "images.csv", scenario.samples, true, sp.d_x);
    write_feature_csv(fs::path(dir) / "texts.csv", scenario.samples, false, sp.d_t);
    write_vector_csv(fs::path(dir) / "class_texts.csv", scenario.class_texts,
                     "class_text", sp.d_t);
    write_vector_csv(fs::path(dir) / "prototypes.csv", scenario.img_prototypes,
                     "prototype", sp.d_x);
}

Scenario load_scenario(const std::string& dir) {
    fs::path root(dir);
    std::ifstream mf(root / "manifest.json", std::ios::binary);
    if (!mf) throw ParseError("cannot open manifest.json in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw ParseError("manifest.json: " + std::string(e.what()));
    }
    Scenario sc;
    ScenarioSpec& sp = sc.spec;
    try {
        sp.d_x = manifest.at("d_x").get<int>();
        sp.d_t = manifest.at("d_t").get<int>();
        sp.num_classes = manifest.at("num_classes").get<int>();
        sp.target_class = manifest.at("target_class").get<int>();
        sp.train_per_class = manifest.at("train_per_class").get<int>();
        sp.val_per_class = manifest.at("val_per_class").get<int>();
        sp.test_per_class = manifest.at("test_per_class").get<int>();
        sp.target_train = manifest.at("target_train").get<int>();
        sp.target_val = manifest.at("target_val").get<int>();
        sp.target_test = manifest.at("target_test").get<int>();
        sp.aux_pairs = manifest.at("aux_pairs").get<int>();
        sp.negative_factor = manifest.at("negative_factor").get<int>();
        sp.separation = manifest.at("separation").get<double>();
        sp.noise = manifest.at("noise").get<double>();
        sp.text_noise = manifest.at("text_noise").get<double>();
        sp.seed = manifest.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ParseError("manifest.json: missing or mistyped field: " +
                         std::string(e.what()));
    }
    sp.self_check = false;  // loading does not retrain
    try {
        sp.validate();
    } catch (const GenerationError& e) {
        throw ParseError("manifest.json: invalid scenario spec: " +
                         std::string(e.what()));
    }

    auto img_rows = read_csv(root / "images.csv", sp.d_x);
    auto txt_rows = read_csv(root / "texts.csv", sp.d_t);
    if (img_rows.size() != txt_rows.size())
        throw ParseError(dir + ": images.csv and texts.csv row counts differ");
    if (manifest.contains("num_samples") &&
        manifest.at("num_samples").get<std::size_t>() != img_rows.size())
        throw ParseError(dir + ": manifest num_samples does not match images.csv");
    sc.samples.reserve(img_rows.size());
    for (std::size_t i = 0; i < img_rows.size(); ++i) {
        const CsvRow& ir = img_rows[i];
        const CsvRow& tr = txt_rows[i];
        if (ir.id != tr.id || ir.split != tr.split || ir.tag != tr.tag ||
            ir.label != tr.label)
            throw ParseError(dir + ": images.csv/texts.csv row " +
                             std::to_string(i + 2) + " metadata mismatch");
        SampleRecord rec;
        rec.id = ir.id;
        rec.split = split_from_string(ir.split);
        rec.tag = tag_from_string(ir.tag);
        rec.label = ir.label;
        rec.img = ir.features;
        rec.txt = tr.features;
        sc.samples.push_back(std::move(rec));
    }

    auto ct_rows = read_csv(root / "class_texts.csv", sp.d_t);
    if (static_cast<int>(ct_rows.size()) != sp.num_classes)
        throw ParseError(dir + ": class_texts.csv must have one row per class");
    for (auto& r : ct_rows) sc.class_texts.push_back(r.features);
    auto proto_rows = read_csv(root / "prototypes.csv", sp.d_x);
    if (static_cast<int>(proto_rows.size()) != sp.num_classes)
        throw ParseError(dir + ": prototypes.csv must have one row per class");
    for (auto& r : proto_rows) sc.img_prototypes.push_back(r.features);
    return sc;
}

ModelShape BaseModelConfig::shape_for(const ScenarioSpec& spec) const {
    ModelShape s;
    s.d_x = spec.d_x;
    s.d_t = spec.d_t;
    s.d_h = 0;
    s.d_1 = d_1;
    s.d_2 = d_2;
    s.num_tasks = spec.num_classes;
    s.heads_enabled = false;
    s.activation = Activation::kIdentity;
    return s;
}

namespace {

std::vector<const SampleRecord*> protected_train_samples(const Scenario& sc) {
    std::vector<const SampleRecord*> out;
    for (const auto& r : sc.samples)
        if (r.tag == SampleTag::kProtected && r.split == Split::kTrain)
            out.push_back(&r);
    return out;
}

}  // namespace

double protected_train_accuracy(const ParamVector& p, const Scenario& scenario,
                                double tau0) {
    (void)tau0;
    auto samples = protected_train_samples(scenario);
    if (samples.empty()) throw MetricError("no protected train samples");
    std::vector<Vector> emb;
    for (std::size_t k = 0; k < scenario.class_texts.size(); ++k)
        emb.push_back(encode_text(p, scenario.class_texts[k], static_cast<int>(k)));
    std::size_t hits = 0;
    for (const auto* r : samples) {
        Vector e1 = encode_image(p, r->img);
        Vector s(static_cast<Eigen::Index>(emb.size()));
        for (std::size_t k = 0; k < emb.size(); ++k)
            s[static_cast<int>(k)] = e1.dot(emb[k]);
        if (predict(s) == r->label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

ParamVector make_base_model(const Scenario& scenario, const BaseModelConfig& cfg) {
    ModelShape shape = cfg.shape_for(scenario.spec);
    RngStream init_rng = make_stream(cfg.seed, StreamId::kInit);
    ParamVector p = ParamVector::random_init(shape, init_rng);

    auto samples = protected_train_samples(scenario);
    if (samples.empty()) throw GenerationError("make_base_model: no protected samples");
    const int n = static_cast<int>(samples.size());
    const int num_classes = scenario.spec.num_classes;
    RngStream rng = make_stream(cfg.seed, StreamId::kBaseModel);

    Vector flat = p.flatten();
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    std::size_t cursor = static_cast<std::size_t>(n);

    for (long long t = 0; t < cfg.iterations; ++t) {
        int batch = std::min(cfg.batch, n);
        if (cursor + batch > static_cast<std::size_t>(n)) {
            rng.shuffle(perm);
            cursor = 0;
        }
        ParamVector cur = ParamVector::unflatten(shape, flat);
        std::vector<Vector> emb(num_classes);
        for (int k = 0; k < num_classes; ++k)
            emb[k] = encode_text(cur, scenario.class_texts[k], k);
        std::vector<Vector> class_cots(num_classes, Vector::Zero(shape.d_emb()));
        Vector grad = Vector::Zero(static_cast<Eigen::Index>(shape.param_count()));
        double inv = 1.0 / static_cast<double>(batch);
        for (int b = 0; b < batch; ++b) {
            const SampleRecord* r = samples[perm[cursor + b]];
            Vector e1 = encode_image(cur, r->img);
            Vector s(num_classes);
            for (int k = 0; k < num_classes; ++k) s[k] = e1.dot(emb[k]);
            double mx = s.maxCoeff();
            Vector soft = ((s.array() - mx) / cfg.tau0).exp();
            soft /= soft.sum();
            Vector img_cot = Vector::Zero(shape.d_emb());
            for (int k = 0; k < num_classes; ++k) {
                double coeff = inv * (soft[k] - (k == r->label ? 1.0 : 0.0)) / cfg.tau0;
                img_cot += coeff * emb[k];
                class_cots[k] += coeff * e1;
            }
            accumulate_image_grad(cur, r->img, img_cot, grad);
        }
        for (int k = 0; k < num_classes; ++k)
            accumulate_text_grad(cur, scenario.class_texts[k], k, class_cots[k], grad);
        cursor += batch;

        double frac = static_cast<double>(t) / static_cast<double>(cfg.iterations);
        double eta_t = cfg.eta * (1.0 + std::cos(M_PI * frac)) / 2.0;
        flat -= eta_t * grad;
        if (!flat.allFinite())
            throw GenerationError("make_base_model: training diverged");
    }

    ParamVector out = ParamVector::unflatten(shape, flat);
    double acc = protected_train_accuracy(out, scenario, cfg.tau0);
    if (acc < cfg.min_train_accuracy)
        throw GenerationError(
            "make_base_model: calibration bar missed, protected train accuracy " +
            std::to_string(acc) + " < " + std::to_string(cfg.min_train_accuracy));
    return out;
}

RetentionProblem build_retention_problem(const Scenario& scenario,
                                         const ParamVector& w_old,
                                         int constraint_samples, double tau,
                                         double tau0, int target_class_override) {
    int target = target_class_override >= 0 ? target_class_override
                                            : scenario.spec.target_class;
    RetentionProblem prob;
    prob.shape = w_old.shape();
    prob.tau = tau;
    prob.tau0 = tau0;
    prob.class_texts = scenario.class_texts;

    auto neg_imgs = std::make_shared<std::vector<Vector>>();
    auto neg_txts = std::make_shared<std::vector<Vector>>();
    for (const auto& r : scenario.samples) {
        if (r.tag == SampleTag::kNegative) {
            neg_imgs->push_back(r.img);
            neg_txts->push_back(r.txt);
        }
    }
    auto idx = std::make_shared<std::vector<int>>();
    idx->resize(neg_imgs->size());
    for (std::size_t i = 0; i < idx->size(); ++i) (*idx)[i] = static_cast<int>(i);

    int pair_idx = 0;
    for (const auto& r : scenario.samples) {
        bool is_pair = r.split == Split::kTrain && r.label == target &&
                       (r.tag == SampleTag::kTarget || r.tag == SampleTag::kAux ||
                        r.tag == SampleTag::kProtected);
        if (!is_pair) continue;
        PairContext ctx;
        ctx.pair_index = pair_idx++;
        ctx.image = r.img;
        ctx.text = r.txt;
        ctx.neg_texts = SharedPool{neg_txts, idx};
        ctx.neg_images = SharedPool{neg_imgs, idx};
        prob.pairs.push_back(std::move(ctx));
    }
    if (prob.pairs.empty())
        throw GenerationError("build_retention_problem: no target pairs for class " +
                              std::to_string(target));

    for (int k = 0; k < scenario.spec.num_classes; ++k) {
        if (k == target) continue;
        ConstraintSpec spec;
        spec.task = k;
        for (const auto& r : scenario.samples) {
            if (r.split != Split::kTrain || r.label != k ||
                (r.tag != SampleTag::kProtected && r.tag != SampleTag::kTarget &&
                 r.tag != SampleTag::kAux))
                continue;
            spec.images.push_back(r.img);
            if (static_cast<int>(spec.images.size()) >= constraint_samples) break;
        }
        if (spec.images.empty())
            throw GenerationError("build_retention_problem: no samples for task " +
                                  std::to_string(k));
        spec.ref_losses.reserve(spec.images.size());
        for (const auto& x : spec.images)
            spec.ref_losses.push_back(
                ce_loss(w_old, x, k, scenario.class_texts, tau0));
        prob.constraints.push_back(std::move(spec));
    }
    return prob;
}

EvalSets build_eval_sets(const Scenario& scenario, Split split, double tau0,
                         int target_class_override) {
    int target = target_class_override >= 0 ? target_class_override
                                            : scenario.spec.target_class;
    EvalSets sets;
    sets.class_texts = scenario.class_texts;
    sets.tau0 = tau0;
    for (int k = 0; k < scenario.spec.num_classes; ++k) {
        EvalTaskSet ts;
        ts.task = k;
        for (const auto& r : scenario.samples)
            if (r.split == split && r.label == k && r.tag != SampleTag::kNegative &&
                r.tag != SampleTag::kAux)
                ts.images.push_back(r.img);
        if (k == target)
            sets.target = std::move(ts);
        else
            sets.protected_tasks.push_back(std::move(ts));
    }
    return sets;
}

WcclProblem build_wccl_problem(const Scenario& scenario, int per_task_pairs,
                               double tau, int target_class_override) {
    int target = target_class_override >= 0 ? target_class_override
                                            : scenario.spec.target_class;
    WcclProblem prob;
    prob.tau = tau;

    // Unified registries over every training sample.
    auto all_imgs = std::make_shared<std::vector<Vector>>();
    auto all_txts = std::make_shared<std::vector<Vector>>();
    std::vector<int> labels;  // -1 negatives; class otherwise
    std::vector<bool> target_related;
    for (const auto& r : scenario.samples) {
        if (r.split != Split::kTrain) continue;
        all_imgs->push_back(r.img);
        all_txts->push_back(r.txt);
        labels.push_back(r.label);
        target_related.push_back(r.label == target);
    }

    auto pool_excluding = [&](int excluded_class, bool exclude_target_related) {
        auto idx = std::make_shared<std::vector<int>>();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (exclude_target_related && target_related[i]) continue;
            if (!exclude_target_related && labels[i] == excluded_class) continue;
            idx->push_back(static_cast<int>(i));
        }
        return idx;
    };

    auto target_idx = pool_excluding(-2, true);
    int pair_counter = 0;
    for (const auto& r : scenario.samples) {
        if (r.split != Split::kTrain || r.label != target) continue;
        PairContext ctx;
        ctx.pair_index = pair_counter++;
        ctx.image = r.img;
        ctx.text = r.txt;
        ctx.neg_texts = SharedPool{all_txts, target_idx};
        ctx.neg_images = SharedPool{all_imgs, target_idx};
        prob.target_pairs.push_back(std::move(ctx));
    }

    for (int k = 0; k < scenario.spec.num_classes; ++k) {
        if (k == target) continue;
        auto idx = pool_excluding(k, false);
        std::vector<PairContext> set;
        for (const auto& r : scenario.samples) {
            if (r.split != Split::kTrain || r.label != k ||
                r.tag != SampleTag::kProtected)
                continue;
            PairContext ctx;
            ctx.pair_index = pair_counter++;
            ctx.image = r.img;
            ctx.text = r.txt;
            ctx.neg_texts = SharedPool{all_txts, idx};
            ctx.neg_images = SharedPool{all_imgs, idx};
            set.push_back(std::move(ctx));
            if (per_task_pairs > 0 &&
                static_cast<int>(set.size()) >= per_task_pairs)
                break;
        }
        prob.task_pairs.push_back(std::move(set));
    }
    return prob;
}

}  // namespace devsafe

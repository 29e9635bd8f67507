#include "devsafe/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace devsafe {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Method m) {
    switch (m) {
        case Method::kPenalty: return "penalty";
        case Method::kRM: return "rm";
        case Method::kWCCL: return "wccl";
        case Method::kFinetune: return "finetune";
    }
    throw ConfigError("unknown method");
}

Method method_from_string(const std::string& s) {
    if (s == "penalty") return Method::kPenalty;
    if (s == "rm") return Method::kRM;
    if (s == "wccl") return Method::kWCCL;
    if (s == "finetune") return Method::kFinetune;
    throw ConfigError("unknown method: " + s);
}

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    if (constraint_samples < 1)
        throw ConfigError("config: constraint_samples must be >= 1");
    if (method == Method::kWCCL && !(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("config: wccl alpha must be in [0, 1]");
    if (method == Method::kRM && !(alpha >= 0.0))
        throw ConfigError("config: rm alpha must be >= 0");
    if (heads.enabled && heads.rank < 1)
        throw ConfigError("config: heads.rank must be >= 1 when enabled");
    solver.validate();
}

SolverConfig ExperimentConfig::effective_solver(int n_pairs,
                                                int num_protected) const {
    if (!preset.enabled) return solver;
    ScheduleBatches batches;
    batches.pairs = solver.batch_pairs;
    batches.tasks = solver.batch_tasks == 0
                        ? num_protected
                        : std::min(solver.batch_tasks, num_protected);
    batches.constraint = solver.batch_constraint;
    batches.neg_text = solver.batch_neg_text;
    batches.neg_img = solver.batch_neg_img;
    SchedulePreset sched = schedule_preset(preset.epsilon, preset.delta,
                                           preset.surrogates, batches, n_pairs,
                                           num_protected);
    SolverConfig out = solver;
    out.beta = sched.beta;
    out.beta_schedule = BetaSchedule::kConstant;
    out.theta = std::min(sched.theta, 1.0);
    out.gamma1 = std::min(sched.gamma, 1.0);
    out.gamma2 = std::min(sched.gamma, 1.0);
    out.eta = sched.eta;
    out.iterations = preset.max_iterations > 0
                         ? std::min(sched.iterations, preset.max_iterations)
                         : sched.iterations;
    out.validate();
    return out;
}

namespace {

// Rejects keys that the caller did not consume.
void check_known(const json& obj, const std::set<std::string>& known,
                 const std::string& path) {
    if (!obj.is_object()) throw ConfigError("config: " + path + " must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!known.count(it.key()))
            throw ConfigError("config: unknown field '" +
                              (path.empty() ? it.key() : path + "." + it.key()) + "'");
    }
}

template <typename T>
void take(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

void parse_preset(const json& j, PresetInputs& preset) {
    check_known(j, {"epsilon", "delta", "max_iterations", "surrogates"},
                "solver.preset");
    preset.enabled = true;
    take(j, "epsilon", preset.epsilon);
    take(j, "delta", preset.delta);
    take(j, "max_iterations", preset.max_iterations);
    if (j.contains("surrogates")) {
        const json& c = j.at("surrogates");
        check_known(c, {"lip_g", "smooth_g", "lip_h", "smooth_h", "sigma_g",
                        "sigma_grad_g", "sigma_h", "sigma_grad_h", "ratio_floor",
                        "tau"},
                    "solver.preset.surrogates");
        take(c, "lip_g", preset.surrogates.lip_g);
        take(c, "smooth_g", preset.surrogates.smooth_g);
        take(c, "lip_h", preset.surrogates.lip_h);
        take(c, "smooth_h", preset.surrogates.smooth_h);
        take(c, "sigma_g", preset.surrogates.sigma_g);
        take(c, "sigma_grad_g", preset.surrogates.sigma_grad_g);
        take(c, "sigma_h", preset.surrogates.sigma_h);
        take(c, "sigma_grad_h", preset.surrogates.sigma_grad_h);
        take(c, "ratio_floor", preset.surrogates.ratio_floor);
        take(c, "tau", preset.surrogates.tau);
    }
}

void parse_solver(const json& j, SolverConfig& cfg, PresetInputs& preset) {
    check_known(j, {"iterations", "eta", "eta_schedule", "beta", "beta_max",
                    "beta_schedule", "gamma1", "gamma2", "theta", "batch_pairs",
                    "batch_tasks", "batch_constraint", "batch_neg_text",
                    "batch_neg_img", "tau", "tau0", "seed", "log_every",
                    "weight_decay", "iters_per_epoch", "preset"},
                "solver");
    if (j.contains("preset")) parse_preset(j.at("preset"), preset);
    take(j, "iterations", cfg.iterations);
    take(j, "eta", cfg.eta);
    if (j.contains("eta_schedule")) {
        std::string s = j.at("eta_schedule").get<std::string>();
        if (s == "constant") cfg.eta_schedule = EtaSchedule::kConstant;
        else if (s == "cosine") cfg.eta_schedule = EtaSchedule::kCosineDecay;
        else throw ConfigError("config: solver.eta_schedule must be constant|cosine");
    }
    take(j, "beta", cfg.beta);
    take(j, "beta_max", cfg.beta_max);
    if (j.contains("beta_schedule")) {
        std::string s = j.at("beta_schedule").get<std::string>();
        if (s == "constant") cfg.beta_schedule = BetaSchedule::kConstant;
        else if (s == "cosine") cfg.beta_schedule = BetaSchedule::kCosineIncreasing;
        else throw ConfigError("config: solver.beta_schedule must be constant|cosine");
    }
    take(j, "gamma1", cfg.gamma1);
    take(j, "gamma2", cfg.gamma2);
    take(j, "theta", cfg.theta);
    take(j, "batch_pairs", cfg.batch_pairs);
    take(j, "batch_tasks", cfg.batch_tasks);
    take(j, "batch_constraint", cfg.batch_constraint);
    take(j, "batch_neg_text", cfg.batch_neg_text);
    take(j, "batch_neg_img", cfg.batch_neg_img);
    take(j, "tau", cfg.tau);
    take(j, "tau0", cfg.tau0);
    take(j, "seed", cfg.seed);
    take(j, "log_every", cfg.log_every);
    take(j, "weight_decay", cfg.weight_decay);
    take(j, "iters_per_epoch", cfg.iters_per_epoch);
}

void parse_scenario_spec(const json& j, ScenarioSpec& sp) {
    check_known(j, {"d_x", "d_t", "num_classes", "target_class", "train_per_class",
                    "val_per_class", "test_per_class", "target_train", "target_val",
                    "target_test", "aux_pairs", "negative_factor", "separation",
                    "noise", "text_noise", "seed", "self_check"},
                "scenario");
    take(j, "d_x", sp.d_x);
    take(j, "d_t", sp.d_t);
    take(j, "num_classes", sp.num_classes);
    take(j, "target_class", sp.target_class);
    take(j, "train_per_class", sp.train_per_class);
    take(j, "val_per_class", sp.val_per_class);
    take(j, "test_per_class", sp.test_per_class);
    take(j, "target_train", sp.target_train);
    take(j, "target_val", sp.target_val);
    take(j, "target_test", sp.target_test);
    take(j, "aux_pairs", sp.aux_pairs);
    take(j, "negative_factor", sp.negative_factor);
    take(j, "separation", sp.separation);
    take(j, "noise", sp.noise);
    take(j, "text_noise", sp.text_noise);
    take(j, "seed", sp.seed);
    take(j, "self_check", sp.self_check);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int worker_cap() {
    const char* env = std::getenv("DEVSAFE_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& doc) {
    ExperimentConfig cfg;
    check_known(doc, {"scenario_path", "scenario", "method", "solver", "alpha",
                      "seeds", "rounds", "out", "constraint_samples",
                      "wccl_task_pairs", "heads", "selection", "base",
                      "compute_kkt"},
                "");
    take(doc, "scenario_path", cfg.scenario_path);
    cfg.inline_scenario = cfg.scenario_path.empty();
    if (doc.contains("scenario")) parse_scenario_spec(doc.at("scenario"), cfg.scenario_spec);
    if (doc.contains("method"))
        cfg.method = method_from_string(doc.at("method").get<std::string>());
    if (doc.contains("solver")) parse_solver(doc.at("solver"), cfg.solver, cfg.preset);
    take(doc, "alpha", cfg.alpha);
    if (doc.contains("seeds")) cfg.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    if (doc.contains("rounds")) cfg.rounds = doc.at("rounds").get<std::vector<int>>();
    take(doc, "out", cfg.out_dir);
    take(doc, "constraint_samples", cfg.constraint_samples);
    take(doc, "wccl_task_pairs", cfg.wccl_task_pairs);
    if (doc.contains("heads")) {
        const json& h = doc.at("heads");
        check_known(h, {"enabled", "rank"}, "heads");
        take(h, "enabled", cfg.heads.enabled);
        take(h, "rank", cfg.heads.rank);
    }
    if (doc.contains("selection")) {
        std::string s = doc.at("selection").get<std::string>();
        if (s == "best-val-devsafety") cfg.selection = SelectionPolicy::kBestValDevSafety;
        else if (s == "last-iterate") cfg.selection = SelectionPolicy::kLastIterate;
        else throw ConfigError("config: selection must be best-val-devsafety|last-iterate");
    }
    if (doc.contains("base")) {
        const json& b = doc.at("base");
        check_known(b, {"iterations", "batch", "eta", "tau0", "seed",
                        "min_train_accuracy", "d_1", "d_2"},
                    "base");
        take(b, "iterations", cfg.base.iterations);
        take(b, "batch", cfg.base.batch);
        take(b, "eta", cfg.base.eta);
        take(b, "tau0", cfg.base.tau0);
        take(b, "seed", cfg.base.seed);
        take(b, "min_train_accuracy", cfg.base.min_train_accuracy);
        take(b, "d_1", cfg.base.d_1);
        take(b, "d_2", cfg.base.d_2);
    }
    take(doc, "compute_kkt", cfg.compute_kkt);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must look like key.path=value: " + ov);
        std::string key = ov.substr(0, eq);
        std::string value = ov.substr(eq + 1);
        json* node = &doc;
        std::size_t start = 0;
        for (;;) {
            std::size_t dot = key.find('.', start);
            std::string part = key.substr(start, dot == std::string::npos
                                                     ? std::string::npos
                                                     : dot - start);
            if (part.empty()) throw ConfigError("bad override path: " + key);
            if (dot == std::string::npos) {
                json parsed = json::parse(value, nullptr, false);
                (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
    return parse_experiment_config(doc);
}

void save_model(const std::string& path, const ParamVector& p) {
    const ModelShape& s = p.shape();
    json doc = {
        {"format_version", 1},
        {"shape",
         {{"d_x", s.d_x},
          {"d_t", s.d_t},
          {"d_h", s.d_h},
          {"d_1", s.d_1},
          {"d_2", s.d_2},
          {"rank", s.rank},
          {"num_tasks", s.num_tasks},
          {"heads_enabled", s.heads_enabled},
          {"activation", s.activation == Activation::kTanh ? "tanh" : "identity"}}},
    };
    Vector flat = p.flatten();
    std::vector<double> vals(flat.data(), flat.data() + flat.size());
    doc["params"] = vals;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot write model: " + path);
    os << doc.dump(2) << "\n";
}

ParamVector load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open model: " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw ParseError("model parse error in " + path + ": " + e.what());
    }
    try {
        const json& js = doc.at("shape");
        ModelShape s;
        s.d_x = js.at("d_x").get<int>();
        s.d_t = js.at("d_t").get<int>();
        s.d_h = js.at("d_h").get<int>();
        s.d_1 = js.at("d_1").get<int>();
        s.d_2 = js.at("d_2").get<int>();
        s.rank = js.at("rank").get<int>();
        s.num_tasks = js.at("num_tasks").get<int>();
        s.heads_enabled = js.at("heads_enabled").get<bool>();
        s.activation = js.at("activation").get<std::string>() == "tanh"
                           ? Activation::kTanh
                           : Activation::kIdentity;
        auto vals = doc.at("params").get<std::vector<double>>();
        Vector flat(static_cast<Eigen::Index>(vals.size()));
        for (std::size_t i = 0; i < vals.size(); ++i)
            flat[static_cast<Eigen::Index>(i)] = vals[i];
        return ParamVector::unflatten(s, flat);
    } catch (const json::exception& e) {
        throw ParseError("model file " + path + ": " + e.what());
    }
}

namespace {

std::string trajectory_header(int m) {
    std::string h = "step,epoch,objective";
    for (int k = 0; k < m; ++k) h += ",h_" + std::to_string(k);
    h += ",devsafety_ce_train,devsafety_acc_train,devsafety_ce_val,devsafety_acc_val";
    h += ",delta_acc_target,kkt_stationarity,kkt_violation,kkt_complementarity";
    for (int k = 0; k < m; ++k) h += ",w_" + std::to_string(k);
    h += ",beta_t,eta_t";
    return h;
}

void write_trajectory_file(const std::string& path,
                           const std::vector<TrajectoryRow>& rows, int m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot write trajectory: " + path);
    os << trajectory_header(m) << "\n";
    for (const auto& r : rows) {
        os << r.step << ',' << format_double(r.epoch) << ','
           << format_double(r.objective);
        for (double h : r.h) os << ',' << format_double(h);
        os << ',' << format_double(r.devsafety_ce_train) << ','
           << format_double(r.devsafety_acc_train) << ','
           << format_double(r.devsafety_ce_val) << ','
           << format_double(r.devsafety_acc_val) << ','
           << format_double(r.delta_acc_target) << ','
           << format_double(r.kkt_stationarity) << ','
           << format_double(r.kkt_violation) << ','
           << format_double(r.kkt_complementarity);
        for (double w : r.effective_weights) os << ',' << format_double(w);
        os << ',' << format_double(r.beta_t) << ',' << format_double(r.eta_t) << "\n";
    }
}

struct EvalBundle {
    EvalSets train;  // constraint-sample sets, matching the optimized h_k
    EvalSets val;
};

TrajectoryRow make_row(const LogRecord& rec, const ParamVector& w,
                       const ParamVector& w_old, const EvalBundle& evals) {
    TrajectoryRow row;
    row.step = rec.step;
    row.epoch = rec.epoch;
    row.objective = rec.objective;
    row.h = rec.h;
    row.devsafety_ce_train = dev_safety(w, w_old, evals.train, EvalLoss::kCrossEntropy);
    row.devsafety_acc_train = dev_safety(w, w_old, evals.train, EvalLoss::kZeroOne);
    row.devsafety_ce_val = dev_safety(w, w_old, evals.val, EvalLoss::kCrossEntropy);
    row.devsafety_acc_val = dev_safety(w, w_old, evals.val, EvalLoss::kZeroOne);
    row.delta_acc_target = delta_target_acc(w, w_old, evals.val);
    row.kkt_stationarity = rec.kkt.stationarity;
    row.kkt_violation = rec.kkt.violation;
    row.kkt_complementarity = rec.kkt.complementarity;
    row.effective_weights = rec.effective_weights;
    row.beta_t = rec.beta_t;
    row.eta_t = rec.eta_t;
    return row;
}

// Preference order: retention (val DevSafety(acc) >= 0) first, then larger
// target gain, then better training-ce retention among the tied plateau.
bool better_selection(const TrajectoryRow& a, const TrajectoryRow& b) {
    bool ra = a.devsafety_acc_val >= 0.0, rb = b.devsafety_acc_val >= 0.0;
    if (ra != rb) return ra;
    if (ra) {
        if (a.delta_acc_target != b.delta_acc_target)
            return a.delta_acc_target > b.delta_acc_target;
        if (a.devsafety_ce_train != b.devsafety_ce_train)
            return a.devsafety_ce_train > b.devsafety_ce_train;
        return a.devsafety_acc_val > b.devsafety_acc_val;
    }
    if (a.devsafety_acc_val != b.devsafety_acc_val)
        return a.devsafety_acc_val > b.devsafety_acc_val;
    return a.delta_acc_target > b.delta_acc_target;
}

SeedRunResult run_one_seed(const ExperimentConfig& cfg, const Scenario& scenario,
                           const ParamVector& w_old, std::uint64_t seed,
                           const std::string& run_dir, int target_override) {
    fs::create_directories(run_dir);
    RetentionProblem prob = build_retention_problem(
        scenario, w_old, cfg.constraint_samples, cfg.solver.tau, cfg.solver.tau0,
        target_override);
    SolverConfig solver = cfg.effective_solver(
        static_cast<int>(prob.pairs.size()),
        static_cast<int>(prob.constraints.size()));
    solver.seed = seed;

    EvalBundle evals;
    evals.val = build_eval_sets(scenario, Split::kVal, solver.tau0, target_override);
    evals.train.class_texts = scenario.class_texts;
    evals.train.tau0 = solver.tau0;
    for (const auto& spec : prob.constraints) {
        EvalTaskSet ts;
        ts.task = spec.task;
        ts.images = spec.images;
        evals.train.protected_tasks.push_back(std::move(ts));
    }
    evals.train.target = evals.val.target;

    SeedRunResult out;
    out.seed = seed;
    std::vector<double> wall_ms;

    RunOptions opts;
    opts.compute_kkt = cfg.compute_kkt;
    opts.checkpoint_path = run_dir + "/checkpoint.bin";
    opts.on_log = [&](const LogRecord& rec) {
        ParamVector w = ParamVector::unflatten(w_old.shape(), rec.params);
        out.rows.push_back(make_row(rec, w, w_old, evals));
        wall_ms.push_back(rec.wall_ms);
    };

    RunResult run;
    switch (cfg.method) {
        case Method::kPenalty:
            run = run_penalty(prob, solver, w_old, opts);
            break;
        case Method::kRM:
            run = run_rm(prob, cfg.alpha, solver, w_old, opts);
            break;
        case Method::kFinetune:
            run = run_rm(prob, 0.0, solver, w_old, opts);
            break;
        case Method::kWCCL: {
            WcclProblem wccl = build_wccl_problem(scenario, cfg.wccl_task_pairs,
                                                  solver.tau, target_override);
            run = run_wccl(wccl, prob, cfg.alpha, solver, w_old, opts);
            break;
        }
    }

    // Selection among logged iterates; T = 0 keeps the starting point.
    if (out.rows.empty()) {
        LogRecord rec;
        rec.step = 0;
        rec.objective = objective_value(w_old, prob.pairs, prob.tau);
        rec.h.assign(prob.constraints.size(), 0.0);
        rec.effective_weights.assign(prob.constraints.size(), 0.0);
        rec.beta_t = beta_at(solver, 0);
        rec.eta_t = eta_at(solver, 0);
        rec.params = w_old.flatten();
        out.selected = make_row(rec, w_old, w_old, evals);
        out.selected_step = 0;
        out.selected_params = rec.params;
    } else if (cfg.selection == SelectionPolicy::kLastIterate) {
        out.selected = out.rows.back();
        out.selected_step = out.rows.back().step;
        out.selected_params = run.trajectory.back().params;
    } else {
        std::size_t best = 0;
        for (std::size_t i = 1; i < out.rows.size(); ++i)
            if (better_selection(out.rows[i], out.rows[best])) best = i;
        out.selected = out.rows[best];
        out.selected_step = out.rows[best].step;
        out.selected_params = run.trajectory[best].params;
    }

    out.trajectory_file = run_dir + "/trajectory.csv";
    write_trajectory_file(out.trajectory_file, out.rows,
                          static_cast<int>(prob.constraints.size()));
    {
        std::ofstream os(run_dir + "/timing.csv", std::ios::binary);
        os << "step,wall_ms\n";
        for (std::size_t i = 0; i < out.rows.size(); ++i)
            os << out.rows[i].step << ',' << format_double(wall_ms[i]) << "\n";
    }
    save_model(run_dir + "/selected_model.json",
               ParamVector::unflatten(w_old.shape(), out.selected_params));
    return out;
}

double sample_std(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

DevelopResult run_develop(const ExperimentConfig& cfg, const Scenario& scenario,
                          const ParamVector& w_old, const std::string& out_dir,
                          int target_class_override) {
    cfg.validate();
    fs::create_directories(out_dir);
    DevelopResult result;
    result.per_seed.resize(cfg.seeds.size());

    const int cap = worker_cap();
    std::vector<std::thread> workers;
    std::atomic<std::size_t> next{0};
    auto body = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= cfg.seeds.size()) break;
            std::string run_dir =
                out_dir + "/seed_" + std::to_string(cfg.seeds[i]);
            result.per_seed[i] = run_one_seed(cfg, scenario, w_old, cfg.seeds[i],
                                              run_dir, target_class_override);
        }
    };
    if (cap <= 1 || cfg.seeds.size() <= 1) {
        body();
    } else {
        int n = std::min<std::size_t>(cap, cfg.seeds.size());
        for (int i = 0; i < n; ++i) workers.emplace_back(body);
        for (auto& w : workers) w.join();
    }

    // Aggregates over the selected iterates, in seed order.
    std::vector<double> ds_acc_val, ds_ce_val, ds_acc_train, ds_ce_train, dacc, steps,
        objectives;
    for (const auto& r : result.per_seed) {
        ds_acc_val.push_back(r.selected.devsafety_acc_val);
        ds_ce_val.push_back(r.selected.devsafety_ce_val);
        ds_acc_train.push_back(r.selected.devsafety_acc_train);
        ds_ce_train.push_back(r.selected.devsafety_ce_train);
        dacc.push_back(r.selected.delta_acc_target);
        steps.push_back(static_cast<double>(r.selected_step));
        objectives.push_back(r.selected.objective);
    }
    result.retention_ratio_val = retention_ratio(ds_acc_val);
    double mean_dacc = 0.0;
    for (double v : dacc) mean_dacc += v;
    mean_dacc /= static_cast<double>(dacc.size());
    result.mean_delta_acc = mean_dacc;
    result.std_delta_acc = sample_std(dacc, mean_dacc);

    auto col_mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    auto frac_nonneg = [](const std::vector<double>& v) {
        std::size_t c = 0;
        for (double x : v)
            if (x >= 0.0) ++c;
        return static_cast<double>(c) / static_cast<double>(v.size());
    };

    result.summary_file = out_dir + "/summary.csv";
    std::ofstream os(result.summary_file, std::ios::binary);
    if (!os) throw ParseError("cannot write summary: " + result.summary_file);
    os << "kind,seed,selected_step,devsafety_ce_train,devsafety_acc_train,"
          "devsafety_ce_val,devsafety_acc_val,delta_acc_target,objective\n";
    for (const auto& r : result.per_seed) {
        os << "run," << r.seed << ',' << r.selected_step << ','
           << format_double(r.selected.devsafety_ce_train) << ','
           << format_double(r.selected.devsafety_acc_train) << ','
           << format_double(r.selected.devsafety_ce_val) << ','
           << format_double(r.selected.devsafety_acc_val) << ','
           << format_double(r.selected.delta_acc_target) << ','
           << format_double(r.selected.objective) << "\n";
    }
    std::vector<std::pair<const char*, const std::vector<double>*>> columns = {
        {"devsafety_ce_train", &ds_ce_train}, {"devsafety_acc_train", &ds_acc_train},
        {"devsafety_ce_val", &ds_ce_val},     {"devsafety_acc_val", &ds_acc_val},
        {"delta_acc_target", &dacc},          {"objective", &objectives}};
    auto emit_aggregate = [&](const char* kind,
                              const std::function<double(const std::vector<double>&)>& f) {
        os << kind << ",," << format_double(f(steps));
        for (auto& [name, col] : columns) {
            (void)name;
            os << ',' << format_double(f(*col));
        }
        os << "\n";
    };
    emit_aggregate("mean", col_mean);
    emit_aggregate("std", [&](const std::vector<double>& v) {
        return sample_std(v, col_mean(v));
    });
    emit_aggregate("frac_nonneg", frac_nonneg);
    return result;
}

std::vector<RoundResult> run_multiround(const ExperimentConfig& cfg,
                                        const Scenario& scenario,
                                        const ParamVector& base_model) {
    if (cfg.rounds.empty()) throw ConfigError("multiround: rounds list is empty");
    std::vector<RoundResult> rounds;
    ParamVector w_old = base_model;
    for (std::size_t r = 0; r < cfg.rounds.size(); ++r) {
        int target = cfg.rounds[r];
        if (target < 0 || target >= scenario.spec.num_classes)
            throw ConfigError("multiround: round target class out of range");
        std::string dir = cfg.out_dir + "/round_" + std::to_string(r + 1);
        RoundResult rr;
        rr.target_class = target;
        rr.develop = run_develop(cfg, scenario, w_old, dir, target);

        // Carry the best seed's selected model into the next round.
        std::size_t best = 0;
        for (std::size_t i = 1; i < rr.develop.per_seed.size(); ++i)
            if (better_selection(rr.develop.per_seed[i].selected,
                                 rr.develop.per_seed[best].selected))
                best = i;
        rr.selected_seed = rr.develop.per_seed[best].seed;
        rr.selected_params = rr.develop.per_seed[best].selected_params;
        save_model(dir + "/round_model.json",
                   ParamVector::unflatten(w_old.shape(), rr.selected_params));
        w_old = ParamVector::unflatten(w_old.shape(), rr.selected_params);
        rounds.push_back(std::move(rr));
    }
    return rounds;
}

std::string recompute_summary(const std::string& develop_dir) {
    std::ostringstream out;
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(develop_dir)) {
        if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0)
            runs.push_back(e.path());
    }
    std::sort(runs.begin(), runs.end());
    out << "run_dir,selected_step,devsafety_ce_train,devsafety_acc_val,"
           "delta_acc_target\n";

    auto split_csv = [](const std::string& s, std::vector<std::string>& v) {
        v.clear();
        std::size_t start = 0;
        for (;;) {
            auto pos = s.find(',', start);
            if (pos == std::string::npos) {
                v.push_back(s.substr(start));
                break;
            }
            v.push_back(s.substr(start, pos - start));
            start = pos + 1;
        }
    };

    std::vector<double> selected_ds;
    for (const auto& dir : runs) {
        std::ifstream is(dir / "trajectory.csv");
        if (!is) throw ParseError("missing trajectory.csv in " + dir.string());
        std::string header, line;
        std::getline(is, header);
        std::vector<std::string> head_fields, fields;
        split_csv(header, head_fields);
        auto col_index = [&](const std::string& name) {
            for (std::size_t i = 0; i < head_fields.size(); ++i)
                if (head_fields[i] == name) return i;
            throw ParseError("column not found: " + name);
        };
        std::size_t c_step = col_index("step");
        std::size_t c_dsav = col_index("devsafety_acc_val");
        std::size_t c_dsct = col_index("devsafety_ce_train");
        std::size_t c_dacc = col_index("delta_acc_target");

        // Replays the run's iterate-selection policy over the logged rows.
        TrajectoryRow best;
        long long best_step = -1;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            split_csv(line, fields);
            TrajectoryRow row;
            row.step = std::stoll(fields[c_step]);
            row.devsafety_acc_val = std::stod(fields[c_dsav]);
            row.devsafety_ce_train = std::stod(fields[c_dsct]);
            row.delta_acc_target = std::stod(fields[c_dacc]);
            if (best_step < 0 || better_selection(row, best)) {
                best = row;
                best_step = row.step;
            }
        }
        if (best_step < 0) continue;
        selected_ds.push_back(best.devsafety_acc_val);
        out << dir.filename().string() << ',' << best_step << ','
            << format_double(best.devsafety_ce_train) << ','
            << format_double(best.devsafety_acc_val) << ','
            << format_double(best.delta_acc_target) << "\n";
    }
    if (!selected_ds.empty())
        out << "retention_ratio," << format_double(retention_ratio(selected_ds))
            << ",,,\n";
    return out.str();
}

}  // namespace devsafe

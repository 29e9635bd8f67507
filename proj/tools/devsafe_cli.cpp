#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "devsafe/experiment.hpp"

namespace fs = std::filesystem;
using namespace devsafe;

namespace {

Scenario obtain_scenario(const ExperimentConfig& cfg, const std::string& out_dir) {
    if (!cfg.scenario_path.empty()) return load_scenario(cfg.scenario_path);
    Scenario sc = generate_scenario(cfg.scenario_spec);
    save_scenario(sc, out_dir + "/scenario");
    return sc;
}

ParamVector obtain_base_model(const ExperimentConfig& cfg, const Scenario& sc,
                              const std::string& out_dir,
                              const std::string& model_path) {
    ParamVector base;
    if (!model_path.empty()) {
        base = load_model(model_path);
    } else {
        base = make_base_model(sc, cfg.base);
        save_model(out_dir + "/base_model.json", base);
    }
    if (cfg.heads.enabled && !base.shape().heads_enabled) {
        RngStream heads_rng = make_stream(cfg.base.seed, StreamId::kHeads);
        base = base.with_heads(cfg.heads.rank, heads_rng);
        save_model(out_dir + "/base_model_heads.json", base);
    }
    return base;
}

void apply_common(ExperimentConfig& cfg, const std::string& out,
                  const std::string& seeds_csv) {
    if (!out.empty()) cfg.out_dir = out;
    if (!seeds_csv.empty()) {
        cfg.seeds.clear();
        std::size_t start = 0;
        for (;;) {
            auto pos = seeds_csv.find(',', start);
            std::string tok = seeds_csv.substr(
                start, pos == std::string::npos ? std::string::npos : pos - start);
            if (!tok.empty()) cfg.seeds.push_back(std::stoull(tok));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        if (cfg.seeds.empty()) throw ConfigError("--seeds produced an empty list");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retention-constrained model development on desk-scale two-tower models"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds_csv, scenario_dir, model_path;
    std::vector<std::string> overrides;

    auto add_common = [&](CLI::App* cmd, bool needs_config) {
        if (needs_config)
            cmd->add_option("--config", config_path, "JSON experiment config")
                ->required();
        cmd->add_option("--out", out_dir, "output directory override");
        cmd->add_option("--seeds", seeds_csv, "comma-separated seed list override");
        cmd->add_option("--override", overrides,
                        "dotted-path config override, e.g. solver.beta=200");
    };

    auto* cmd_generate = app.add_subcommand("generate", "generate a synthetic scenario");
    add_common(cmd_generate, true);

    auto* cmd_train_base = app.add_subcommand("train-base", "train the base model");
    add_common(cmd_train_base, true);
    cmd_train_base->add_option("--scenario", scenario_dir, "existing scenario directory");

    auto* cmd_develop = app.add_subcommand("develop", "run method x seeds on one round");
    add_common(cmd_develop, true);
    cmd_develop->add_option("--model", model_path, "existing base model JSON");

    auto* cmd_multiround =
        app.add_subcommand("multiround", "chained development rounds");
    add_common(cmd_multiround, true);
    cmd_multiround->add_option("--model", model_path, "existing base model JSON");

    auto* cmd_report = app.add_subcommand("report", "recompute summary from trajectories");
    std::string report_dir;
    cmd_report->add_option("--dir", report_dir, "develop output directory")->required();

    auto* cmd_kkt = app.add_subcommand("kkt", "KKT residual of a model on a scenario");
    add_common(cmd_kkt, true);
    cmd_kkt->add_option("--model", model_path, "model JSON")->required();

    auto* cmd_diag = app.add_subcommand(
        "diagnose-heads", "constraint-Jacobian spectrum with and without task heads");
    add_common(cmd_diag, true);
    cmd_diag->add_option("--model", model_path, "model JSON (heads optional)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_report->parsed()) {
            std::cout << recompute_summary(report_dir);
            return 0;
        }

        ExperimentConfig cfg = load_experiment_config(config_path, overrides);
        apply_common(cfg, out_dir, seeds_csv);
        fs::create_directories(cfg.out_dir);

        if (cmd_generate->parsed()) {
            Scenario sc = generate_scenario(cfg.scenario_spec);
            save_scenario(sc, cfg.out_dir + "/scenario");
            std::cout << "scenario written to " << cfg.out_dir << "/scenario\n";
            return 0;
        }

        if (cmd_train_base->parsed()) {
            Scenario sc = scenario_dir.empty() ? obtain_scenario(cfg, cfg.out_dir)
                                               : load_scenario(scenario_dir);
            ParamVector base = make_base_model(sc, cfg.base);
            save_model(cfg.out_dir + "/base_model.json", base);
            std::cout << "base model written to " << cfg.out_dir
                      << "/base_model.json (protected train accuracy "
                      << protected_train_accuracy(base, sc, cfg.base.tau0) << ")\n";
            return 0;
        }

        if (cmd_develop->parsed()) {
            Scenario sc = obtain_scenario(cfg, cfg.out_dir);
            ParamVector w_old = obtain_base_model(cfg, sc, cfg.out_dir, model_path);
            DevelopResult res = run_develop(cfg, sc, w_old, cfg.out_dir);
            std::cout << "summary: " << res.summary_file << "\n"
                      << "retention_ratio(val acc): " << res.retention_ratio_val
                      << "\nmean delta_acc_target: " << res.mean_delta_acc << " (std "
                      << res.std_delta_acc << ")\n";
            return 0;
        }

        if (cmd_multiround->parsed()) {
            Scenario sc = obtain_scenario(cfg, cfg.out_dir);
            ParamVector w_old = obtain_base_model(cfg, sc, cfg.out_dir, model_path);
            auto rounds = run_multiround(cfg, sc, w_old);
            for (std::size_t r = 0; r < rounds.size(); ++r) {
                std::cout << "round " << (r + 1) << " target "
                          << rounds[r].target_class << " selected seed "
                          << rounds[r].selected_seed << " retention(val) "
                          << rounds[r].develop.retention_ratio_val << " dAcc "
                          << rounds[r].develop.mean_delta_acc << "\n";
            }
            return 0;
        }

        if (cmd_kkt->parsed()) {
            Scenario sc = obtain_scenario(cfg, cfg.out_dir);
            ParamVector model = load_model(model_path);
            RetentionProblem prob = build_retention_problem(
                sc, model, cfg.constraint_samples, cfg.solver.tau, cfg.solver.tau0);
            KKTReport rep = kkt_report(model, prob, cfg.solver.beta);
            std::cout << "stationarity " << rep.stationarity << "\nviolation "
                      << rep.violation << "\ncomplementarity " << rep.complementarity
                      << "\n";
            for (std::size_t k = 0; k < rep.h.size(); ++k)
                std::cout << "h_" << k << " " << rep.h[k] << "\n";
            return 0;
        }

        if (cmd_diag->parsed()) {
            Scenario sc = obtain_scenario(cfg, cfg.out_dir);
            ParamVector model = model_path.empty()
                                    ? make_base_model(sc, cfg.base)
                                    : load_model(model_path);
            if (!model.shape().heads_enabled) {
                RngStream heads_rng = make_stream(cfg.base.seed, StreamId::kHeads);
                model = model.with_heads(cfg.heads.rank, heads_rng);
            }
            RetentionProblem prob = build_retention_problem(
                sc, model, cfg.constraint_samples, cfg.solver.tau, cfg.solver.tau0);
            double off = constraint_jacobian_sigma_min(model, prob.constraints,
                                                       prob.class_texts, prob.tau0,
                                                       false);
            double on = constraint_jacobian_sigma_min(model, prob.constraints,
                                                      prob.class_texts, prob.tau0,
                                                      true);
            auto rep = head_gain_check(model, prob.constraints, prob.class_texts,
                                    prob.tau0);
            std::cout << "sigma_min (shared head only): " << off
                      << "\nsigma_min (task heads):      " << on
                      << "\nlambda_min plain:     " << rep.lambda_min_plain
                      << "\nlambda_min augmented: " << rep.lambda_min_augmented
                      << "\nbound:                " << rep.bound
                      << "\nholds: " << (rep.holds ? "yes" : "no") << "\n";
            for (std::size_t k = 0; k < rep.diag_gain.size(); ++k)
                std::cout << "gram_gain_" << k << " " << rep.diag_gain[k] << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

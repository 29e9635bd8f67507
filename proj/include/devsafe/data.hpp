#pragma once

#include <string>

#include "devsafe/baselines.hpp"
#include "devsafe/metrics.hpp"

namespace devsafe {

enum class Split { kTrain, kVal, kTest, kNone };
enum class SampleTag { kProtected, kTarget, kAux, kNegative };

std::string to_string(Split s);
std::string to_string(SampleTag t);
Split split_from_string(const std::string& s);
SampleTag tag_from_string(const std::string& s);

struct SampleRecord {
    int id = 0;
    Split split = Split::kTrain;
    SampleTag tag = SampleTag::kProtected;
    int label = -1;  // class index; -1 for negatives
    Vector img, txt;
};

// Generation knobs for a synthetic classification scenario: Gaussian clusters
// around per-class prototypes, paired text features as noisy prototype
// copies, one rare target class with an auxiliary external-style pair pool
// and a 10x negative pool.
struct ScenarioSpec {
    int d_x = 16;
    int d_t = 16;
    int num_classes = 6;  // protected classes + the target
    int target_class = 5;
    int train_per_class = 4000;
    int val_per_class = 400;
    int test_per_class = 400;
    int target_train = 57;
    int target_val = 50;
    int target_test = 50;
    int aux_pairs = 500;       // external target-related pairs added to the objective
    int negative_factor = 10;  // negative pool = factor * (target_train + aux_pairs)
    double separation = 1.0;
    double noise = 0.1;
    double text_noise = 0.1;
    std::uint64_t seed = 1;
    bool self_check = true;  // verify base-model trainability at generation time

    void validate() const;
};

struct Scenario {
    ScenarioSpec spec;
    std::vector<SampleRecord> samples;
    std::vector<Vector> class_texts;  // clean text prototypes, one per class
    std::vector<Vector> img_prototypes;

    std::vector<int> protected_classes() const;
};

Scenario generate_scenario(const ScenarioSpec& spec);

// Directory container: manifest.json plus images.csv / texts.csv /
// class_texts.csv / prototypes.csv, all with the header
// id,split,tag,label,f0..f{d-1}, UTF-8, LF, 17-significant-digit floats.
void save_scenario(const Scenario& scenario, const std::string& dir);
Scenario load_scenario(const std::string& dir);

struct BaseModelConfig {
    long long iterations = 1200;
    int batch = 256;
    double eta = 2.0;
    double tau0 = 0.05;
    std::uint64_t seed = 1;
    double min_train_accuracy = 0.9;  // calibration bar
    int d_1 = 16;  // text backbone output width
    int d_2 = 12;  // embedding width

    ModelShape shape_for(const ScenarioSpec& spec) const;
};

// Minibatch cross-entropy training on protected-task train samples only
// (target-class samples never enter the training set). Errors if the
// calibration bar is missed.
ParamVector make_base_model(const Scenario& scenario, const BaseModelConfig& cfg);

// Mean zero-one accuracy of p over the protected train samples.
double protected_train_accuracy(const ParamVector& p, const Scenario& scenario,
                                double tau0);

// --- problem builders ---

// Target pairs (train target + aux) with the shared negative pools, plus one
// retention constraint per protected class built from up to
// `constraint_samples` train samples and reference losses cached from w_old.
RetentionProblem build_retention_problem(const Scenario& scenario,
                                         const ParamVector& w_old,
                                         int constraint_samples, double tau,
                                         double tau0,
                                         int target_class_override = -1);

EvalSets build_eval_sets(const Scenario& scenario, Split split, double tau0,
                         int target_class_override = -1);

// Per-task pair sets whose pools span all training samples outside the task.
WcclProblem build_wccl_problem(const Scenario& scenario, int per_task_pairs,
                               double tau, int target_class_override = -1);

}  // namespace devsafe

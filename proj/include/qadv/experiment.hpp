#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qadv/attacks.hpp"
#include "qadv/config.hpp"
#include "qadv/ensemble.hpp"
#include "qadv/io.hpp"
#include "qadv/metrics.hpp"
#include "qadv/model.hpp"
#include "qadv/report.hpp"

namespace qadv {

struct ModelEntry {
    std::string name;
    Arch arch = Arch::desk_cnn;
    QuantScheme scheme;
    std::filesystem::path checkpoint;  // empty: train in process
};

struct AttackEntry {
    AttackKind kind = AttackKind::fgsm;
    AttackConfig config;
};

struct ShiftDemoSpec {
    std::vector<double> w{0.5, -0.6};
    std::vector<double> x{1.0, 0.8};
    std::vector<double> perturb{0.0, 0.05};
    int bits = 2;
};

struct ExperimentConfig {
    DatasetSpec data;
    TrainConfig train;
    std::uint64_t seed = 1;
    std::vector<ModelEntry> models;
    std::vector<AttackEntry> attacks;
    std::size_t sample_count = 200;
    // CW confidence values tried for transfer; empty keeps the attack's own.
    std::vector<double> kappas;
    EnsembleConfig ensemble;
    std::size_t gradsim_samples = 256;
    ShiftDemoSpec shiftdemo;
    std::filesystem::path output_dir = "out";
    Config source;

    static ExperimentConfig from_config(const Config& config);
    const ModelEntry& model(const std::string& name) const;
};

// Reads the config file and applies the QA_SEED environment override.
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct NamedModel {
    std::string name;
    Model model;
    double test_accuracy = 0.0;
    std::vector<EpochRecord> history;
};

// Loads each roster entry from its checkpoint or trains it. Trained
// parameters are rounded to float so in-process and reloaded models agree.
std::vector<NamedModel> prepare_models(const ExperimentConfig& cfg, const Dataset& train, const Dataset& test);
NamedModel train_entry(const ExperimentConfig& cfg, const ModelEntry& entry, const Dataset& train, const Dataset& test);

// The seeded test subset shared by every model and attack.
std::vector<std::size_t> attack_pool(const ExperimentConfig& cfg, const Dataset& test);

struct CraftedSet {
    std::string source;
    AttackKind attack = AttackKind::fgsm;
    double kappa = 0.0;
    std::vector<std::size_t> indices;  // into the test set
    std::vector<int> labels;
    Tensor clean;        // empty when nothing was crafted
    Tensor adversarial;
    std::vector<AdversarialExample> examples;

    std::size_t size() const { return labels.size(); }
    std::size_t null_gradients() const;
    std::size_t queries() const;
};

// Crafts on the pool samples that `source` classifies correctly.
CraftedSet craft(const ExperimentConfig& cfg, const NamedModel& source, const AttackEntry& attack, const Dataset& test,
                 const std::vector<std::size_t>& pool);

struct WhiteboxRow {
    std::string model;
    AttackKind attack = AttackKind::fgsm;
    Metric adversarial_accuracy;
    RobustnessReport report;
    std::size_t null_gradients = 0;
    std::size_t queries = 0;
};
std::vector<WhiteboxRow> run_whitebox(const ExperimentConfig& cfg, const std::vector<NamedModel>& models,
                                      const Dataset& test);

struct TransferCell {
    std::string source;
    std::string target;
    AttackKind attack = AttackKind::fgsm;
    Metric adversarial_accuracy;
    Metric mean_l2;
    Metric mean_linf;
    std::optional<double> kappa_used;
    std::size_t n = 0;
};
std::vector<TransferCell> run_transfer(const ExperimentConfig& cfg, const std::vector<NamedModel>& models,
                                       const Dataset& test);

struct EnsembleRow {
    std::string source;
    AttackKind attack = AttackKind::fgsm;
    std::size_t n = 0;
    Metric prediction_rate;
    Metric defense_accuracy;
    std::optional<AgreementStats> agreement;  // when the source is a member
};
struct EnsembleReport {
    std::size_t clean_n = 0;
    double clean_prediction_rate = 0.0;
    Metric clean_accepted_accuracy;
    std::vector<std::pair<std::string, double>> member_accuracy;
    std::vector<EnsembleRow> rows;
};
EnsembleReport run_ensemble_eval(const ExperimentConfig& cfg, const std::vector<NamedModel>& models,
                                 const Dataset& test);

struct GradsimReport {
    std::vector<std::string> names;
    CosineMatrix matrix;
    std::size_t n = 0;
};
GradsimReport run_gradsim(const ExperimentConfig& cfg, const std::vector<NamedModel>& models, const Dataset& test);

// Report tables.
CsvTable whitebox_table(const std::vector<WhiteboxRow>& rows);
CsvTable transfer_table(const std::vector<TransferCell>& cells);
CsvTable ensemble_table(const EnsembleReport& report);
CsvTable agreement_table(const EnsembleReport& report);
CsvTable gradsim_table(const GradsimReport& report);
CsvTable shiftdemo_table(const ShiftDemoReport& report);
CsvTable history_table(const std::vector<NamedModel>& models);
CsvTable models_table(const std::vector<NamedModel>& models);

// Sidecar contents: format, version, command, seed and the config echo.
std::string report_metadata(const ExperimentConfig& cfg, const std::string& command);

}  // namespace qadv

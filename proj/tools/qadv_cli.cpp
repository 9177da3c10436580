#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qadv/error.hpp"
#include "qadv/experiment.hpp"
#include "qadv/io.hpp"

namespace fs = std::filesystem;
using namespace qadv;

namespace {

struct Common {
    std::string config;
    std::string out;
};

// Usage-class failures exit with 2, everything else with 1.
struct Usage : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string command_line(int argc, char** argv) {
    std::string s;
    for (int i = 1; i < argc; ++i) {
        if (i > 1) s += ' ';
        s += argv[i];
    }
    return s;
}

fs::path output_path(const ExperimentConfig& cfg, const std::string& out, const std::string& fallback) {
    return out.empty() ? cfg.output_dir / fallback : fs::path(out);
}

void emit(const fs::path& path, const CsvTable& table, const ExperimentConfig& cfg, const std::string& command) {
    write_report(path, table, report_metadata(cfg, command));
    std::cout << "wrote " << path.string() << '\n';
}

// A model argument is either a checkpoint file or a roster name.
NamedModel resolve_model(const ExperimentConfig& cfg, const std::string& spec, const Dataset& train,
                         const Dataset& test) {
    if (fs::is_regular_file(spec)) {
        NamedModel nm;
        nm.name = fs::path(spec).stem().string();
        nm.model = load_checkpoint(spec);
        if (nm.model.input_shape != test.sample_shape() || nm.model.classes != test.classes)
            throw Usage("checkpoint " + spec + " does not match the configured dataset");
        nm.test_accuracy = evaluate_accuracy(nm.model, test);
        return nm;
    }
    for (const auto& e : cfg.models)
        if (e.name == spec) {
            ExperimentConfig one = cfg;
            one.models = {e};
            return std::move(prepare_models(one, train, test).front());
        }
    throw Usage("'" + spec + "' is neither a checkpoint file nor a model in the roster");
}

int cmd_train(const ExperimentConfig& cfg, const std::string& out, const std::string& only, const std::string& command) {
    const auto [train, test] = load_dataset(cfg.data);
    std::vector<ModelEntry> entries;
    for (const auto& e : cfg.models)
        if (only.empty() || e.name == only) entries.push_back(e);
    if (entries.empty()) throw Usage("model '" + only + "' is not in the roster");
    if (!out.empty() && entries.size() > 1) throw Usage("--out names one checkpoint; pick a model with --model");

    std::vector<NamedModel> trained;
    for (const auto& e : entries) {
        ModelEntry fresh = e;
        fresh.checkpoint.clear();
        NamedModel nm = train_entry(cfg, fresh, train, test);
        const fs::path ckpt = out.empty() ? cfg.output_dir / (e.name + ".ckpt") : fs::path(out);
        if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
        save_checkpoint(nm.model, ckpt);
        std::cout << nm.name << ": test accuracy " << format_number(nm.test_accuracy) << ", saved " << ckpt.string()
                  << '\n';
        trained.push_back(std::move(nm));
    }
    const fs::path base = out.empty() ? cfg.output_dir / "train" : fs::path(out);
    emit(base.string() + ".history.csv", history_table(trained), cfg, command);
    emit(base.string() + ".models.csv", models_table(trained), cfg, command);
    return 0;
}

int cmd_attack(ExperimentConfig cfg, const std::string& out, const std::string& model_spec,
               const std::string& attack_name, std::optional<double> eps, std::optional<std::size_t> n,
               const std::string& save_adv, const std::string& command) {
    if (n) cfg.sample_count = *n;
    const auto [train, test] = load_dataset(cfg.data);
    AttackEntry entry;
    entry.kind = parse_attack(attack_name);
    entry.config = AttackConfig::defaults(entry.kind);
    for (const auto& a : cfg.attacks)
        if (a.kind == entry.kind) entry.config = a.config;
    if (eps) entry.config.epsilon = *eps;
    entry.config.validate();
    cfg.attacks = {entry};

    const NamedModel model = resolve_model(cfg, model_spec, train, test);
    const auto pool = attack_pool(cfg, test);
    const CraftedSet set = craft(cfg, model, entry, test, pool);

    WhiteboxRow row;
    row.model = model.name;
    row.attack = entry.kind;
    if (set.size() > 0) {
        row.report = evaluate_adversarial(model.model, set.clean, set.adversarial, set.labels);
        row.adversarial_accuracy = row.report.adversarial_accuracy;
    }
    row.null_gradients = set.null_gradients();
    row.queries = set.queries();
    emit(output_path(cfg, out, "attack.csv"), whitebox_table({row}), cfg, command);

    if (!save_adv.empty()) {
        if (set.size() == 0) throw Error("no correctly classified samples to attack; nothing to save");
        Dataset adv;
        adv.features = set.adversarial;
        adv.labels = set.labels;
        adv.classes = test.classes;
        const fs::path prefix(save_adv);
        if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
        save_idx_dataset(adv, save_adv + ".images.idx", save_adv + ".labels.idx");
        std::cout << "wrote " << save_adv << ".images.idx and .labels.idx\n";
    }
    return 0;
}

int cmd_transfer(const ExperimentConfig& cfg, const std::string& out, const std::string& command) {
    const auto [train, test] = load_dataset(cfg.data);
    const auto models = prepare_models(cfg, train, test);
    emit(output_path(cfg, out, "transfer.csv"), transfer_table(run_transfer(cfg, models, test)), cfg, command);
    return 0;
}

int cmd_ensemble(ExperimentConfig cfg, const std::string& out, const std::vector<std::string>& members,
                 std::optional<std::size_t> m, const std::string& adv_prefix, const std::string& command) {
    if (!members.empty()) cfg.ensemble.members = members;
    if (m) cfg.ensemble.m = *m;
    cfg.ensemble.validate();
    const auto [train, test] = load_dataset(cfg.data);

    if (adv_prefix.empty()) {
        // Members must come from the roster when crafting in process.
        std::vector<NamedModel> models = prepare_models(cfg, train, test);
        const EnsembleReport rep = run_ensemble_eval(cfg, models, test);
        const fs::path base = output_path(cfg, out, "ensemble.csv");
        emit(base, ensemble_table(rep), cfg, command);
        fs::path agree = base;
        agree.replace_extension(".agreement.csv");
        emit(agree, agreement_table(rep), cfg, command);
        return 0;
    }

    const Dataset adv =
        load_idx_dataset(adv_prefix + ".images.idx", adv_prefix + ".labels.idx", cfg.ensemble.classes);
    if (adv.size() == 0) throw Usage("adversarial set " + adv_prefix + " is empty");
    std::vector<NamedModel> models;
    std::vector<const Model*> ptrs;
    for (const auto& spec : cfg.ensemble.members) models.push_back(resolve_model(cfg, spec, train, test));
    for (const auto& nm : models) ptrs.push_back(&nm.model);
    const LabelMatrix votes = member_predictions(ptrs, adv.features);

    CsvTable t;
    t.header = {"attack", "source", "target", "kappa", "n", "acc", "l2", "linf", "PR", "d_acc"};
    t.add({"file", fs::path(adv_prefix).filename().string(), "ensemble", kUndefined, std::to_string(adv.size()),
           format_metric(accepted_accuracy(votes, adv.labels, cfg.ensemble.m, cfg.ensemble.classes)), kUndefined,
           kUndefined, format_number(prediction_rate(votes, cfg.ensemble.m, cfg.ensemble.classes)),
           format_number(defense_accuracy(votes, adv.labels, cfg.ensemble.m, cfg.ensemble.classes))});
    emit(output_path(cfg, out, "ensemble.csv"), t, cfg, command);
    return 0;
}

int cmd_gradsim(const ExperimentConfig& cfg, const std::string& out, const std::string& command) {
    const auto [train, test] = load_dataset(cfg.data);
    const auto models = prepare_models(cfg, train, test);
    emit(output_path(cfg, out, "gradsim.csv"), gradsim_table(run_gradsim(cfg, models, test)), cfg, command);
    return 0;
}

int cmd_shiftdemo(const ExperimentConfig& cfg, const std::string& out, const std::string& command) {
    const auto& s = cfg.shiftdemo;
    if (s.w.size() != s.x.size() || s.w.size() != s.perturb.size())
        throw Usage("shiftdemo.w, shiftdemo.x and shiftdemo.perturb must have equal lengths");
    const Shape shape{s.w.size()};
    const ShiftDemoReport r =
        quantization_shift_demo(Tensor(shape, s.w), Tensor(shape, s.x), Tensor(shape, s.perturb), s.bits);
    emit(output_path(cfg, out, "shiftdemo.csv"), shiftdemo_table(r), cfg, command);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantized networks under adversarial attack"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "experiment config file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", common.out, "output file (default: under output.dir)");
    };

    std::string only_model;
    auto* train = app.add_subcommand("train", "train roster models and save checkpoints");
    add_common(train);
    train->add_option("--model", only_model, "train only this roster model");

    std::string model_spec, attack_name = "fgsm", save_adv;
    std::optional<double> eps;
    std::optional<std::size_t> n;
    auto* attack = app.add_subcommand("attack", "craft adversarials against one model");
    add_common(attack);
    attack->add_option("--model", model_spec, "checkpoint file or roster model name")->required();
    attack->add_option("--attack", attack_name, "fgsm | bim | cw-l2 | spsa | zoo");
    attack->add_option("--eps", eps, "l-infinity budget");
    attack->add_option("--n", n, "number of test samples drawn for the attack");
    attack->add_option("--save-adv", save_adv, "write <prefix>.images.idx and <prefix>.labels.idx");

    auto* transfer = app.add_subcommand("transfer", "source x target transfer matrix");
    add_common(transfer);

    std::vector<std::string> members;
    std::optional<std::size_t> m;
    std::string adv_prefix;
    auto* ensemble = app.add_subcommand("ensemble", "ensemble agreement defense");
    add_common(ensemble);
    ensemble->add_option("--members", members, "comma-separated roster names or checkpoints")->delimiter(',');
    ensemble->add_option("--m", m, "votes needed to accept a label");
    ensemble->add_option("--adv", adv_prefix, "evaluate a saved adversarial set instead of crafting");

    auto* gradsim = app.add_subcommand("gradsim", "input-gradient cosine similarity between models");
    add_common(gradsim);
    auto* shiftdemo = app.add_subcommand("shiftdemo", "toy quantization value shift example");
    add_common(shiftdemo);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const std::string command = command_line(argc, argv);
    try {
        const ExperimentConfig cfg = load_experiment(common.config);
        if (*train) return cmd_train(cfg, common.out, only_model, command);
        if (*attack) return cmd_attack(cfg, common.out, model_spec, attack_name, eps, n, save_adv, command);
        if (*transfer) return cmd_transfer(cfg, common.out, command);
        if (*ensemble) return cmd_ensemble(cfg, common.out, members, m, adv_prefix, command);
        if (*gradsim) return cmd_gradsim(cfg, common.out, command);
        if (*shiftdemo) return cmd_shiftdemo(cfg, common.out, command);
    } catch (const Usage& e) {
        std::cerr << "qadv: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "qadv: config error: " << e.what() << '\n';
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "qadv: " << e.what() << '\n';
        return 2;
    } catch (const ParameterError& e) {
        std::cerr << "qadv: invalid parameter: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "qadv: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

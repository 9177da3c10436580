#include "qadv/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "qadv/error.hpp"
#include "qadv/random.hpp"

namespace qadv {

namespace {

std::uint64_t name_hash(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Shape parse_shape(const std::string& s) {
    Shape out;
    for (const auto& part : split(s, 'x')) {
        try {
            const long long v = std::stoll(part);
            if (v <= 0) throw std::out_of_range(part);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("bad shape '" + s + "' (expected e.g. 1x4x4)");
        }
    }
    if (out.empty()) throw ConfigError("empty shape");
    return out;
}

std::vector<double> parse_doubles(const Config& c, const std::string& key, std::vector<double> fallback) {
    if (!c.has(key)) return fallback;
    std::vector<double> out;
    for (const auto& item : c.get_list(key)) {
        Config one;
        one.set("v", item);
        try {
            out.push_back(one.get_double("v", 0.0));
        } catch (const ConfigError&) {
            throw ConfigError("key '" + key + "' expects a list of numbers, got '" + c.get(key, "") + "'");
        }
    }
    return out;
}

void apply_attack_overrides(const Config& c, const std::string& prefix, AttackConfig& a) {
    a.epsilon = c.get_double(prefix + "epsilon", a.epsilon);
    a.iterations = c.get_size(prefix + "iterations", a.iterations);
    a.step = c.get_double(prefix + "step", a.step);
    a.kappa = c.get_double(prefix + "kappa", a.kappa);
    a.c_init = c.get_double(prefix + "c_init", a.c_init);
    a.search_steps = c.get_size(prefix + "search_steps", a.search_steps);
    a.lr = c.get_double(prefix + "lr", a.lr);
    a.h = c.get_double(prefix + "h", a.h);
    a.delta = c.get_double(prefix + "delta", a.delta);
    a.spsa_batch = c.get_size(prefix + "spsa_batch", a.spsa_batch);
    a.zoo_coordinates = c.get_size(prefix + "zoo_coordinates", a.zoo_coordinates);
    a.abort_early = c.get_bool(prefix + "abort_early", a.abort_early);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(const Config& c) {
    c.check_keys({"seed", "output.dir", "data.*", "train.*", "models", "model.*", "attacks", "attack.*",
                  "experiment.sample_count", "transfer.kappas", "ensemble.members", "ensemble.m", "gradsim.samples",
                  "shiftdemo.*"});
    ExperimentConfig cfg;
    cfg.source = c;
    const long long seed = c.get_int("seed", 1);
    if (seed < 0) throw ConfigError("seed must be non-negative");
    cfg.seed = static_cast<std::uint64_t>(seed);

    DatasetSpec& d = cfg.data;
    const std::string src = c.get("data.source", "blobs");
    d.classes = c.get_size("data.classes", 10);
    d.train_limit = c.get_size("data.train_limit", 0);
    d.test_limit = c.get_size("data.test_limit", 0);
    if (src == "idx") {
        d.source = DataSource::idx;
        for (const char* k : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"})
            c.require(k);
        d.train_images = c.get_path("data.train_images");
        d.train_labels = c.get_path("data.train_labels");
        d.test_images = c.get_path("data.test_images");
        d.test_labels = c.get_path("data.test_labels");
    } else if (src == "cifar") {
        d.source = DataSource::cifar;
        d.classes = 10;
        auto paths = [&](const std::string& key) {
            std::vector<std::filesystem::path> out;
            for (const auto& p : split(c.require(key), ',')) {
                std::filesystem::path fp(p);
                out.push_back(fp.is_absolute() ? fp : c.base_dir() / fp);
            }
            return out;
        };
        d.train_files = paths("data.train_files");
        d.test_files = paths("data.test_files");
    } else if (src == "blobs") {
        d.source = DataSource::blobs;
        d.blob_shape = parse_shape(c.get("data.blob_shape", "4"));
        d.blob_spread = c.get_double("data.blob_spread", d.blob_spread);
        d.train_size = c.get_size("data.train_size", d.train_size);
        d.test_size = c.get_size("data.test_size", d.test_size);
        d.blob_seed = static_cast<std::uint64_t>(c.get_int("data.blob_seed", static_cast<long long>(d.blob_seed)));
    } else {
        throw ConfigError("data.source must be idx, cifar or blobs, got '" + src + "'");
    }

    TrainConfig& t = cfg.train;
    t.epochs = c.get_size("train.epochs", t.epochs);
    t.batch_size = c.get_size("train.batch_size", t.batch_size);
    t.lr = c.get_double("train.lr", t.lr);
    t.beta1 = c.get_double("train.beta1", t.beta1);
    t.beta2 = c.get_double("train.beta2", t.beta2);
    t.decay = c.get_double("train.decay", t.decay);
    t.step_interval = c.get_size("train.step_interval", t.step_interval);
    t.validate();

    const Arch default_arch = parse_arch(c.get("model.arch", "desk-cnn"));
    for (const auto& name : c.get_list("models", {"float"})) {
        if (name.empty()) throw ConfigError("empty model name in 'models'");
        ModelEntry e;
        e.name = name;
        e.arch = c.has("model." + name + ".arch") ? parse_arch(c.get("model." + name + ".arch", "")) : default_arch;
        e.scheme = QuantScheme::parse(c.get("model." + name + ".scheme", name));
        e.checkpoint = c.get_path("model." + name + ".checkpoint");
        for (const auto& other : cfg.models)
            if (other.name == name) throw ConfigError("model '" + name + "' listed twice");
        cfg.models.push_back(std::move(e));
    }

    for (const auto& name : c.get_list("attacks", {"fgsm"})) {
        AttackEntry a;
        a.kind = parse_attack(name);
        a.config = AttackConfig::defaults(a.kind);
        apply_attack_overrides(c, "attack." + std::string(to_string(a.kind)) + ".", a.config);
        a.config.validate();
        cfg.attacks.push_back(a);
    }

    cfg.sample_count = c.get_size("experiment.sample_count", cfg.sample_count);
    if (cfg.sample_count == 0) throw ConfigError("experiment.sample_count must be positive");
    cfg.kappas = parse_doubles(c, "transfer.kappas", {});
    for (double k : cfg.kappas)
        if (!(k >= 0.0)) throw ConfigError("transfer.kappas must be non-negative");

    std::vector<std::string> names;
    for (const auto& m : cfg.models) names.push_back(m.name);
    cfg.ensemble.members = c.get_list("ensemble.members", names);
    cfg.ensemble.m = c.get_size("ensemble.m", std::min<std::size_t>(4, cfg.ensemble.members.size()));
    cfg.ensemble.classes = d.classes;

    cfg.gradsim_samples = c.get_size("gradsim.samples", cfg.gradsim_samples);
    cfg.shiftdemo.w = parse_doubles(c, "shiftdemo.w", cfg.shiftdemo.w);
    cfg.shiftdemo.x = parse_doubles(c, "shiftdemo.x", cfg.shiftdemo.x);
    cfg.shiftdemo.perturb = parse_doubles(c, "shiftdemo.perturb", cfg.shiftdemo.perturb);
    cfg.shiftdemo.bits = static_cast<int>(c.get_int("shiftdemo.bits", cfg.shiftdemo.bits));
    cfg.output_dir = c.get_path("output.dir", "out");
    return cfg;
}

const ModelEntry& ExperimentConfig::model(const std::string& name) const {
    for (const auto& m : models)
        if (m.name == name) return m;
    throw ConfigError("model '" + name + "' is not in the roster");
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    Config c = Config::load(path);
    if (const char* env = std::getenv("QA_SEED"); env && *env) {
        Config probe;
        probe.set("QA_SEED", env);
        if (probe.get_int("QA_SEED", 0) < 0) throw ConfigError("QA_SEED must be non-negative");
        c.set("seed", env);
    }
    return ExperimentConfig::from_config(c);
}

// ---------------------------------------------------------------------------

NamedModel train_entry(const ExperimentConfig& cfg, const ModelEntry& entry, const Dataset& train,
                       const Dataset& test) {
    NamedModel nm;
    nm.name = entry.name;
    const std::uint64_t s = derive_seed(cfg.seed, name_hash(entry.name));
    nm.model = build_model(entry.arch, entry.scheme, train.sample_shape(), train.classes, s);
    TrainConfig tc = cfg.train;
    tc.seed = s;
    nm.history = qadv::train(nm.model, train, tc);
    snap_to_float32(nm.model);
    nm.test_accuracy = evaluate_accuracy(nm.model, test);
    return nm;
}

std::vector<NamedModel> prepare_models(const ExperimentConfig& cfg, const Dataset& train, const Dataset& test) {
    std::vector<NamedModel> out;
    for (const auto& e : cfg.models) {
        if (e.checkpoint.empty()) {
            out.push_back(train_entry(cfg, e, train, test));
            continue;
        }
        if (!std::filesystem::exists(e.checkpoint))
            throw ConfigError("checkpoint for model '" + e.name + "' not found: " + e.checkpoint.string());
        NamedModel nm;
        nm.name = e.name;
        nm.model = load_checkpoint(e.checkpoint);
        if (nm.model.input_shape != test.sample_shape() || nm.model.classes != test.classes)
            throw ConfigError("checkpoint " + e.checkpoint.string() + " does not match the dataset");
        nm.test_accuracy = evaluate_accuracy(nm.model, test);
        out.push_back(std::move(nm));
    }
    return out;
}

std::vector<std::size_t> attack_pool(const ExperimentConfig& cfg, const Dataset& test) {
    if (cfg.sample_count > test.size())
        throw ConfigError("experiment.sample_count " + std::to_string(cfg.sample_count) + " exceeds the " +
                          std::to_string(test.size()) + " test samples");
    std::vector<std::size_t> idx(test.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, name_hash("attack-pool")));
    rng.shuffle(idx);
    idx.resize(cfg.sample_count);
    return idx;
}

std::size_t CraftedSet::null_gradients() const {
    return static_cast<std::size_t>(
        std::count_if(examples.begin(), examples.end(), [](const AdversarialExample& e) { return e.null_gradient; }));
}

std::size_t CraftedSet::queries() const {
    std::size_t q = 0;
    for (const auto& e : examples) q += e.queries;
    return q;
}

CraftedSet craft(const ExperimentConfig& cfg, const NamedModel& source, const AttackEntry& attack, const Dataset& test,
                 const std::vector<std::size_t>& pool) {
    CraftedSet set;
    set.source = source.name;
    set.attack = attack.kind;
    set.kappa = attack.config.kappa;
    if (pool.empty()) return set;
    const auto pred = predict_labels(source.model, test.batch(pool));
    for (std::size_t k = 0; k < pool.size(); ++k)
        if (pred[k] == test.labels[pool[k]]) {
            set.indices.push_back(pool[k]);
            set.labels.push_back(test.labels[pool[k]]);
        }
    if (set.indices.empty()) return set;
    set.clean = test.batch(set.indices);

    if (attack.kind == AttackKind::fgsm) {
        set.examples = fgsm(source.model, set.clean, set.labels, attack.config);
    } else if (attack.kind == AttackKind::bim) {
        set.examples = bim(source.model, set.clean, set.labels, attack.config);
    } else {
        const std::uint64_t base =
            derive_seed(derive_seed(cfg.seed, name_hash(source.name)), name_hash(to_string(attack.kind)));
        for (std::size_t k = 0; k < set.indices.size(); ++k) {
            AttackConfig ac = attack.config;
            ac.seed = derive_seed(base, set.indices[k]);
            set.examples.push_back(run_attack(attack.kind, source.model, test.sample(set.indices[k]), set.labels[k], ac));
        }
    }
    std::vector<Tensor> rows;
    for (const auto& e : set.examples) rows.push_back(e.x_adv);
    set.adversarial = stack(rows).reshaped(set.clean.shape());
    return set;
}

namespace {

RobustnessReport evaluate_set(const Model& target, const CraftedSet& set) {
    if (set.size() == 0) return {};
    return evaluate_adversarial(target, set.clean, set.adversarial, set.labels);
}

Metric accuracy_of(const CraftedSet& set, const RobustnessReport& r) {
    if (set.size() == 0) return std::nullopt;
    return r.adversarial_accuracy;
}

}  // namespace

std::vector<WhiteboxRow> run_whitebox(const ExperimentConfig& cfg, const std::vector<NamedModel>& models,
                                      const Dataset& test) {
    const auto pool = attack_pool(cfg, test);
    std::vector<WhiteboxRow> rows;
    for (const auto& m : models)
        for (const auto& a : cfg.attacks) {
            const CraftedSet set = craft(cfg, m, a, test, pool);
            WhiteboxRow r;
            r.model = m.name;
            r.attack = a.kind;
            r.report = evaluate_set(m.model, set);
            r.adversarial_accuracy = accuracy_of(set, r.report);
            r.null_gradients = set.null_gradients();
            r.queries = set.queries();
            rows.push_back(std::move(r));
        }
    return rows;
}

std::vector<TransferCell> run_transfer(const ExperimentConfig& cfg, const std::vector<NamedModel>& models,
                                       const Dataset& test) {
    if (models.size() < 2) throw ConfigError("transfer needs at least two models");
    const auto pool = attack_pool(cfg, test);
    std::vector<TransferCell> cells;
    for (const auto& src : models)
        for (const auto& a : cfg.attacks) {
            const bool sweep = a.kind == AttackKind::cw_l2 && !cfg.kappas.empty();
            const std::vector<double> kappas = sweep ? cfg.kappas : std::vector<double>{a.config.kappa};
            std::vector<TransferCell> best;
            double best_score = std::numeric_limits<double>::infinity();
            for (double kappa : kappas) {
                AttackEntry entry = a;
                entry.config.kappa = kappa;
                const CraftedSet set = craft(cfg, src, entry, test, pool);
                std::vector<TransferCell> row;
                double total = 0.0;
                std::size_t counted = 0;
                for (const auto& tgt : models) {
                    TransferCell cell;
                    cell.source = src.name;
                    cell.target = tgt.name;
                    cell.attack = a.kind;
                    cell.n = set.size();
                    if (sweep) cell.kappa_used = kappa;
                    const RobustnessReport r = evaluate_set(tgt.model, set);
                    cell.adversarial_accuracy = accuracy_of(set, r);
                    cell.mean_l2 = r.mean_l2;
                    cell.mean_linf = r.mean_linf;
                    if (tgt.name != src.name && cell.adversarial_accuracy) {
                        total += *cell.adversarial_accuracy;
                        ++counted;
                    }
                    row.push_back(std::move(cell));
                }
                // Keep the confidence that transfers best (lowest mean target
                // accuracy); the first value wins ties.
                const double score = counted ? total / static_cast<double>(counted) : 1.0;
                if (best.empty() || score < best_score) {
                    best_score = score;
                    best = std::move(row);
                }
            }
            cells.insert(cells.end(), best.begin(), best.end());
        }
    return cells;
}

EnsembleReport run_ensemble_eval(const ExperimentConfig& cfg, const std::vector<NamedModel>& models,
                                 const Dataset& test) {
    const EnsembleConfig& ens = cfg.ensemble;
    ens.validate();
    std::vector<const Model*> members;
    for (const auto& name : ens.members) {
        auto it = std::find_if(models.begin(), models.end(), [&](const NamedModel& m) { return m.name == name; });
        if (it == models.end()) throw ConfigError("ensemble member '" + name + "' is not in the model roster");
        members.push_back(&it->model);
    }
    const auto pool = attack_pool(cfg, test);
    const Tensor clean = test.batch(pool);
    std::vector<int> clean_labels;
    for (auto i : pool) clean_labels.push_back(test.labels[i]);
    const LabelMatrix clean_votes = member_predictions(members, clean);

    EnsembleReport rep;
    rep.clean_n = pool.size();
    rep.clean_prediction_rate = prediction_rate(clean_votes, ens.m, ens.classes);
    rep.clean_accepted_accuracy = accepted_accuracy(clean_votes, clean_labels, ens.m, ens.classes);
    for (std::size_t k = 0; k < members.size(); ++k) {
        std::size_t correct = 0;
        for (std::size_t e = 0; e < pool.size(); ++e) correct += clean_votes[k][e] == clean_labels[e] ? 1 : 0;
        rep.member_accuracy.emplace_back(ens.members[k], static_cast<double>(correct) / static_cast<double>(pool.size()));
    }

    for (const auto& src : models)
        for (const auto& a : cfg.attacks) {
            const CraftedSet set = craft(cfg, src, a, test, pool);
            EnsembleRow row;
            row.source = src.name;
            row.attack = a.kind;
            row.n = set.size();
            if (set.size() > 0) {
                const LabelMatrix votes = member_predictions(members, set.adversarial);
                row.prediction_rate = prediction_rate(votes, ens.m, ens.classes);
                row.defense_accuracy = defense_accuracy(votes, set.labels, ens.m, ens.classes);
                const auto it = std::find(ens.members.begin(), ens.members.end(), src.name);
                if (it != ens.members.end())
                    row.agreement = agreement_stats(clean_votes, clean_labels, votes, set.labels,
                                                    static_cast<std::size_t>(it - ens.members.begin()));
            }
            rep.rows.push_back(std::move(row));
        }
    return rep;
}

GradsimReport run_gradsim(const ExperimentConfig& cfg, const std::vector<NamedModel>& models, const Dataset& test) {
    auto pool = attack_pool(cfg, test);
    if (pool.size() > cfg.gradsim_samples) pool.resize(cfg.gradsim_samples);
    const Dataset sample = test.subset(pool);
    GradsimReport r;
    std::vector<const Model*> ptrs;
    for (const auto& m : models) {
        r.names.push_back(m.name);
        ptrs.push_back(&m.model);
    }
    r.matrix = gradient_cosine_matrix(ptrs, sample);
    r.n = sample.size();
    return r;
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string> kBaseColumns{"attack", "source", "target", "kappa", "n", "acc", "l2", "linf", "PR", "d_acc"};
}

CsvTable whitebox_table(const std::vector<WhiteboxRow>& rows) {
    CsvTable t;
    t.header = kBaseColumns;
    t.header.insert(t.header.end(), {"successes", "null_gradient", "queries"});
    for (const auto& r : rows)
        t.add({std::string(to_string(r.attack)), r.model, r.model, kUndefined, std::to_string(r.report.n_total),
               format_metric(r.adversarial_accuracy), format_metric(r.report.mean_l2), format_metric(r.report.mean_linf),
               kUndefined, kUndefined, std::to_string(r.report.n_successful), std::to_string(r.null_gradients),
               std::to_string(r.queries)});
    return t;
}

CsvTable transfer_table(const std::vector<TransferCell>& cells) {
    CsvTable t;
    t.header = kBaseColumns;
    for (const auto& c : cells)
        t.add({std::string(to_string(c.attack)), c.source, c.target, format_metric(c.kappa_used), std::to_string(c.n),
               format_metric(c.adversarial_accuracy), format_metric(c.mean_l2), format_metric(c.mean_linf), kUndefined,
               kUndefined});
    return t;
}

CsvTable ensemble_table(const EnsembleReport& rep) {
    CsvTable t;
    t.header = kBaseColumns;
    t.add({"none", "clean", "ensemble", kUndefined, std::to_string(rep.clean_n), format_metric(rep.clean_accepted_accuracy),
           kUndefined, kUndefined, format_number(rep.clean_prediction_rate), kUndefined});
    for (const auto& [name, acc] : rep.member_accuracy)
        t.add({"none", "clean", name, kUndefined, std::to_string(rep.clean_n), format_number(acc), kUndefined, kUndefined,
               kUndefined, kUndefined});
    for (const auto& r : rep.rows)
        t.add({std::string(to_string(r.attack)), r.source, "ensemble", kUndefined, std::to_string(r.n), kUndefined,
               kUndefined, kUndefined, format_metric(r.prediction_rate), format_metric(r.defense_accuracy)});
    return t;
}

CsvTable agreement_table(const EnsembleReport& rep) {
    CsvTable t;
    t.header = {"attack", "source", "clean_correct", "clean_misclassified", "adv_successful", "adv_unsuccessful",
                "n_clean_correct", "n_clean_misclassified", "n_adv_successful", "n_adv_unsuccessful"};
    for (const auto& r : rep.rows) {
        if (!r.agreement) continue;
        const auto& s = *r.agreement;
        t.add({std::string(to_string(r.attack)), r.source, format_metric(s.clean_correct),
               format_metric(s.clean_misclassified), format_metric(s.adv_successful), format_metric(s.adv_unsuccessful),
               std::to_string(s.n_clean_correct), std::to_string(s.n_clean_misclassified),
               std::to_string(s.n_adv_successful), std::to_string(s.n_adv_unsuccessful)});
    }
    return t;
}

CsvTable gradsim_table(const GradsimReport& r) {
    CsvTable t;
    t.header = {"model_a", "model_b", "n", "mean_cosine", "skipped"};
    for (std::size_t i = 0; i < r.names.size(); ++i)
        for (std::size_t j = 0; j < r.names.size(); ++j)
            t.add({r.names[i], r.names[j], std::to_string(r.n), format_metric(r.matrix.mean[i][j]),
                   std::to_string(r.matrix.skipped[i][j])});
    return t;
}

CsvTable shiftdemo_table(const ShiftDemoReport& r) {
    auto vec = [](const Tensor& t) {
        std::string s;
        for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + format_number(t[i]);
        return s;
    };
    CsvTable t;
    t.header = {"quantizer", "weights", "clean_score", "adversarial_score", "flipped", "cancelled"};
    t.add({"none", kUndefined, format_number(r.clean_score), format_number(r.adversarial_score), "true", "false"});
    for (const auto& row : r.rows)
        t.add({row.quantizer, vec(row.quantized_w), format_number(row.clean_score), format_number(row.adversarial_score),
               row.flipped ? "true" : "false", row.cancelled ? "true" : "false"});
    return t;
}

CsvTable history_table(const std::vector<NamedModel>& models) {
    CsvTable t;
    t.header = {"model", "epoch", "loss", "train_accuracy", "lr"};
    for (const auto& m : models)
        for (const auto& h : m.history)
            t.add({m.name, std::to_string(h.epoch), format_number(h.loss), format_number(h.accuracy), format_number(h.lr)});
    return t;
}

CsvTable models_table(const std::vector<NamedModel>& models) {
    CsvTable t;
    t.header = {"model", "arch", "scheme", "parameters", "test_accuracy"};
    for (const auto& m : models)
        t.add({m.name, std::string(to_string(m.model.arch)), m.model.scheme.id(), std::to_string(m.model.parameter_count()),
               format_number(m.test_accuracy)});
    return t;
}

std::string report_metadata(const ExperimentConfig& cfg, const std::string& command) {
    std::ostringstream os;
    os << "format = qadv-report 1\n";
    os << "version = " << kVersion << '\n';
    os << "command = " << command << '\n';
    os << "seed = " << cfg.seed << '\n';
    os << "# config\n";
    os << cfg.source.dump();
    return os.str();
}

}  // namespace qadv

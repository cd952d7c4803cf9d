#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrdm/archive.hpp"
#include "nrdm/attacks.hpp"
#include "nrdm/defenses.hpp"
#include "nrdm/harness.hpp"
#include "nrdm/train.hpp"

namespace nrdm {

/// Invalid configuration: unknown key, bad value, missing path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::string_view, 6> command_names{"train", "attack", "defend", "evaluate", "matrix", "curves"};

/// Budget per dataset in pixel units.
inline double default_epsilon(const std::string& dataset) { return dataset == "mnist" ? 76.5 : 8.0; }

/// Attack parameters as written in the config; unset values are resolved per
/// attack kind.
struct AttackSection {
    double epsilon = 0.0;                   ///< resolved from the dataset when absent
    std::optional<std::size_t> steps;       ///< 10, or 100 for the NRDM family
    std::optional<double> step_size;
    double momentum = 1.0;
    double diversity_prob = 0.7;
    std::optional<double> init_noise;
    std::optional<double> nrdm_step;
    double pixel_min = 0.0;
    double pixel_max = 255.0;
    Distortion distortion = Distortion::mse;

    AttackConfig resolve(AttackKind kind, std::uint64_t seed) const {
        AttackConfig c;
        c.epsilon = epsilon;
        const bool feature = kind == AttackKind::nrdm || kind == AttackKind::nrdm_dim;
        c.steps = steps.value_or(feature ? 100 : 10);
        c.step_size = step_size;
        c.momentum = momentum;
        c.diversity_prob = diversity_prob;
        c.init_noise = init_noise;
        c.nrdm_step = nrdm_step;
        c.pixel_min = pixel_min;
        c.pixel_max = pixel_max;
        c.distortion = distortion;
        c.seed = seed;
        return c;
    }
};

struct RunConfig {
    std::string command;
    std::string dataset = "mnist";
    std::string data_dir;
    std::vector<std::string> models;       ///< architectures (train) or checkpoint names/paths
    std::vector<std::string> targets;      ///< matrix/curves targets; empty = models
    std::string checkpoint_dir = "checkpoints";
    std::vector<std::string> attacks;
    AttackSection attack;
    std::vector<DefenseConfig> defenses;
    TrainConfig train;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t subsample = 0;             ///< 0 = full test split
    std::string input;                     ///< adversarial batch for defend/evaluate
    std::vector<std::size_t> curve_steps{1, 2, 5, 10, 20, 50, 100};
    std::string reference;                 ///< NRD reference for curves; empty = source
    std::size_t batch_size = 100;
    std::string format = "csv";
    std::size_t threads = 1;
    bool resume = false;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
    for (const auto& [k, _] : j.items())
        if (!known.contains(k)) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class V>
V get_as(const nlohmann::json& j, const std::string& key, const std::string& path) {
    try {
        return j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + path + "' has the wrong type");
    }
}

template <class V>
void read(const nlohmann::json& j, const std::string& key, V& into, const std::string& prefix = "") {
    if (j.contains(key) && !j.at(key).is_null()) into = get_as<V>(j, key, prefix + key);
}

template <class V>
void read(const nlohmann::json& j, const std::string& key, std::optional<V>& into, const std::string& prefix = "") {
    if (j.contains(key) && !j.at(key).is_null()) into = get_as<V>(j, key, prefix + key);
}

inline DefenseConfig defense_from_json(const nlohmann::json& j, const std::string& where) {
    reject_unknown(j, {"kind", "quality", "weight", "window", "tvm_iterations"}, where);
    DefenseConfig d;
    std::string kind = "none";
    read(j, "kind", kind, where + ".");
    try {
        d.kind = parse_defense_kind(kind);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ".kind: " + e.what());
    }
    read(j, "quality", d.quality, where + ".");
    read(j, "weight", d.weight, where + ".");
    read(j, "window", d.window, where + ".");
    read(j, "tvm_iterations", d.tvm_iterations, where + ".");
    try {
        d.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return d;
}

inline nlohmann::ordered_json defense_to_json(const DefenseConfig& d) {
    nlohmann::ordered_json j{{"kind", defense_kind_name(d.kind)}};
    switch (d.kind) {
        case DefenseKind::jpeg: j["quality"] = d.quality; break;
        case DefenseKind::tvm:
            j["weight"] = d.weight;
            j["tvm_iterations"] = d.tvm_iterations;
            break;
        case DefenseKind::median: j["window"] = d.window; break;
        case DefenseKind::none: break;
    }
    return j;
}

inline TrainConfig default_train_config(const std::string& dataset) {
    TrainConfig t;
    if (dataset == "cifar10") {
        t.epochs = 60;
        t.learning_rate = 0.1;
        t.lr_milestones = {30, 45};
        t.augment = true;
    }
    return t;
}

}  // namespace detail

/// Builds a validated RunConfig from merged JSON (file values already
/// overridden by flags). Path existence is checked separately.
inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::read;
    detail::reject_unknown(j, {"command", "dataset", "data_dir", "models", "targets", "checkpoint_dir", "attacks",
                               "attack", "defenses", "train", "seed", "out", "subsample", "input", "curve_steps",
                               "reference", "batch_size", "format", "threads", "resume"},
                           "");
    RunConfig c;
    read(j, "command", c.command);
    if (std::find(command_names.begin(), command_names.end(), c.command) == command_names.end())
        throw ConfigError("command must be one of train, attack, defend, evaluate, matrix, curves (got '" + c.command + "')");
    read(j, "dataset", c.dataset);
    if (c.dataset != "mnist" && c.dataset != "cifar10")
        throw ConfigError("dataset must be mnist or cifar10 (got '" + c.dataset + "')");
    read(j, "data_dir", c.data_dir);
    read(j, "models", c.models);
    read(j, "targets", c.targets);
    read(j, "checkpoint_dir", c.checkpoint_dir);
    read(j, "attacks", c.attacks);
    for (const auto& a : c.attacks) {
        try {
            parse_attack_kind(a);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("attacks: ") + e.what());
        }
    }

    c.attack.epsilon = default_epsilon(c.dataset);
    if (j.contains("attack")) {
        const auto& a = j.at("attack");
        detail::reject_unknown(a, {"epsilon", "steps", "step_size", "momentum", "diversity_prob", "init_noise",
                                   "nrdm_step", "pixel_min", "pixel_max", "distortion"},
                               "attack");
        read(a, "epsilon", c.attack.epsilon, "attack.");
        read(a, "steps", c.attack.steps, "attack.");
        read(a, "step_size", c.attack.step_size, "attack.");
        read(a, "momentum", c.attack.momentum, "attack.");
        read(a, "diversity_prob", c.attack.diversity_prob, "attack.");
        read(a, "init_noise", c.attack.init_noise, "attack.");
        read(a, "nrdm_step", c.attack.nrdm_step, "attack.");
        read(a, "pixel_min", c.attack.pixel_min, "attack.");
        read(a, "pixel_max", c.attack.pixel_max, "attack.");
        std::string dist = "mse";
        read(a, "distortion", dist, "attack.");
        if (dist != "mse" && dist != "l2") throw ConfigError("attack.distortion must be mse or l2");
        c.attack.distortion = dist == "mse" ? Distortion::mse : Distortion::l2;
    }
    try {
        c.attack.resolve(AttackKind::ifgsm, 0).validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    if (j.contains("defenses")) {
        const auto& d = j.at("defenses");
        if (!d.is_array()) throw ConfigError("defenses must be a list");
        for (std::size_t i = 0; i < d.size(); ++i)
            c.defenses.push_back(detail::defense_from_json(d[i], "defenses[" + std::to_string(i) + "]"));
    }

    c.train = detail::default_train_config(c.dataset);
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t, {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "lr_milestones",
                                   "lr_decay", "augment", "max_batches_per_epoch"},
                               "train");
        read(t, "epochs", c.train.epochs, "train.");
        read(t, "batch_size", c.train.batch_size, "train.");
        read(t, "learning_rate", c.train.learning_rate, "train.");
        read(t, "momentum", c.train.momentum, "train.");
        read(t, "weight_decay", c.train.weight_decay, "train.");
        read(t, "lr_milestones", c.train.lr_milestones, "train.");
        read(t, "lr_decay", c.train.lr_decay, "train.");
        read(t, "augment", c.train.augment, "train.");
        read(t, "max_batches_per_epoch", c.train.max_batches_per_epoch, "train.");
    }
    if (c.train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (c.train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(c.train.learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
    if (!(c.train.momentum >= 0 && c.train.momentum < 1)) throw ConfigError("train.momentum must lie in [0,1)");
    if (!(c.train.weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");

    read(j, "seed", c.seed);
    c.train.seed = c.seed.value_or(0);
    read(j, "out", c.out);
    read(j, "subsample", c.subsample);
    read(j, "input", c.input);
    read(j, "curve_steps", c.curve_steps);
    read(j, "reference", c.reference);
    read(j, "batch_size", c.batch_size);
    read(j, "format", c.format);
    read(j, "threads", c.threads);
    read(j, "resume", c.resume);
    if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (c.threads < 1) throw ConfigError("threads must be >= 1");
    try {
        parse_report_format(c.format);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("format: ") + e.what());
    }
    for (std::size_t i = 0; i < c.curve_steps.size(); ++i)
        if (c.curve_steps[i] == 0 || (i && c.curve_steps[i] <= c.curve_steps[i - 1]))
            throw ConfigError("curve_steps must be positive and strictly increasing");

    // command requirements
    const bool stochastic = c.command == "train" || c.command == "attack" || c.command == "matrix" || c.command == "curves";
    if (stochastic && !c.seed) throw ConfigError("seed is required for the " + c.command + " command");
    if (c.command != "defend" && c.data_dir.empty() && !(c.command == "evaluate" && !c.input.empty()))
        throw ConfigError("data_dir is required for the " + c.command + " command");
    if (c.command != "defend" && c.models.empty()) throw ConfigError("at least one model is required");
    if ((c.command == "attack" || c.command == "matrix" || c.command == "curves") && c.attacks.empty())
        throw ConfigError("at least one attack is required");
    if (c.command == "defend" && (c.input.empty() || c.defenses.empty()))
        throw ConfigError("defend needs an input batch and a defense");
    if (c.command != "train" && c.command != "evaluate" && c.out.empty())
        throw ConfigError("out is required for the " + c.command + " command");
    return c;
}

/// Canonical JSON of a resolved config; the provenance record of artifacts.
/// Runtime-only knobs (threads, resume) do not change results and are left out.
inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["command"] = c.command;
    j["dataset"] = c.dataset;
    j["data_dir"] = c.data_dir;
    j["models"] = c.models;
    j["targets"] = c.targets;
    j["checkpoint_dir"] = c.checkpoint_dir;
    j["attacks"] = c.attacks;
    nlohmann::ordered_json a;
    a["epsilon"] = c.attack.epsilon;
    a["steps"] = c.attack.steps ? nlohmann::ordered_json(*c.attack.steps) : nlohmann::ordered_json(nullptr);
    a["step_size"] = c.attack.step_size ? nlohmann::ordered_json(*c.attack.step_size) : nlohmann::ordered_json(nullptr);
    a["momentum"] = c.attack.momentum;
    a["diversity_prob"] = c.attack.diversity_prob;
    a["init_noise"] = c.attack.init_noise ? nlohmann::ordered_json(*c.attack.init_noise) : nlohmann::ordered_json(nullptr);
    a["nrdm_step"] = c.attack.nrdm_step ? nlohmann::ordered_json(*c.attack.nrdm_step) : nlohmann::ordered_json(nullptr);
    a["pixel_min"] = c.attack.pixel_min;
    a["pixel_max"] = c.attack.pixel_max;
    a["distortion"] = c.attack.distortion == Distortion::mse ? "mse" : "l2";
    j["attack"] = a;
    j["defenses"] = nlohmann::ordered_json::array();
    for (const auto& d : c.defenses) j["defenses"].push_back(detail::defense_to_json(d));
    j["train"] = {{"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"momentum", c.train.momentum},
                  {"weight_decay", c.train.weight_decay},
                  {"lr_milestones", c.train.lr_milestones},
                  {"lr_decay", c.train.lr_decay},
                  {"augment", c.train.augment},
                  {"max_batches_per_epoch", c.train.max_batches_per_epoch}};
    j["seed"] = c.seed ? nlohmann::ordered_json(*c.seed) : nlohmann::ordered_json(nullptr);
    j["out"] = c.out;
    j["subsample"] = c.subsample;
    j["input"] = c.input;
    j["curve_steps"] = c.curve_steps;
    j["reference"] = c.reference;
    j["batch_size"] = c.batch_size;
    j["format"] = c.format;
    return j;
}

/// The RunConfig embedded in an artifact: checkpoint, adversarial batch, CSV
/// or JSON report. Returns nullopt for plain config files.
inline std::optional<nlohmann::json> embedded_config(const std::filesystem::path& path) {
    const std::string magic = peek_magic(path);
    if (magic.size() == 8 && magic.starts_with("NRDM")) {
        const Archive a = load_archive(path, magic);
        const auto meta = nlohmann::json::parse(a.metadata);
        if (meta.contains("provenance") && meta.at("provenance").is_object() && meta.at("provenance").contains("command"))
            return meta.at("provenance");
        if (meta.contains("run_config")) return meta.at("run_config");
        throw ConfigError("artifact '" + path.string() + "' carries no run config");
    }
    const std::string text = read_file_bytes(path);
    if (text.starts_with("# ")) return nlohmann::json::parse(text.substr(2, text.find('\n') - 2));
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("cannot parse config '" + path.string() + "'");
    if (j.is_object() && j.contains("provenance") && !j.contains("command")) return j.at("provenance");
    return std::nullopt;
}

/// Reads a config file or an artifact's embedded config as JSON.
inline nlohmann::json load_config_json(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
    if (auto e = embedded_config(path)) return *e;
    const auto j = nlohmann::json::parse(read_file_bytes(path), nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file '" + path.string() + "' is not valid JSON");
    return j;
}

/// Applies `overrides` on top of `base` (object keys merge recursively,
/// everything else replaces).
inline void merge_config(nlohmann::json& base, const nlohmann::json& overrides) {
    if (base.is_null()) base = nlohmann::json::object();
    for (const auto& [k, v] : overrides.items()) {
        if (v.is_object() && base.contains(k) && base[k].is_object()) merge_config(base[k], v);
        else base[k] = v;
    }
}

/// Existence checks for paths the command will read.
inline void check_paths(const RunConfig& c) {
    namespace fs = std::filesystem;
    if (!c.data_dir.empty() && !fs::is_directory(c.data_dir))
        throw ConfigError("data_dir '" + c.data_dir + "' does not exist");
    if (!c.input.empty() && !fs::exists(c.input)) throw ConfigError("input '" + c.input + "' does not exist");
}

}  // namespace nrdm

#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrdm/blas.hpp"
#include "nrdm/checkpoint.hpp"
#include "nrdm/config.hpp"
#include "nrdm/datasets.hpp"
#include "nrdm/harness.hpp"
#include "nrdm/train.hpp"

namespace nrdm {

inline constexpr std::string_view adversarial_magic = "NRDMADVB";

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_data = 3, exit_numeric = 4 };

/// Persisted attack output: clean and adversarial images with labels.
struct AdversarialBatch {
    std::string label;  ///< attack name, plus "+defense" once defended
    nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
    Tensor clean;
    Tensor adversarial;
    std::vector<int> labels;
};

inline void save_adversarial_batch(const std::filesystem::path& path, const AdversarialBatch& b) {
    std::vector<float> labels(b.labels.begin(), b.labels.end());
    Archive a{std::string(adversarial_magic), b.label, b.metadata.dump(2), {}};
    a.tensors.push_back({"clean", b.clean});
    a.tensors.push_back({"adversarial", b.adversarial});
    const Shape label_shape{labels.size()};
    a.tensors.push_back({"labels", Tensor(label_shape, std::move(labels))});
    save_archive(path, a);
}

inline AdversarialBatch load_adversarial_batch(const std::filesystem::path& path) {
    const Archive a = load_archive(path, adversarial_magic);
    AdversarialBatch b;
    b.label = a.label;
    b.metadata = nlohmann::ordered_json::parse(a.metadata);
    b.clean = a.get("clean");
    b.adversarial = a.get("adversarial");
    for (float v : a.get("labels").data()) b.labels.push_back(static_cast<int>(v));
    if (b.clean.shape() != b.adversarial.shape() || b.labels.size() != b.clean.dim(0))
        throw FormatError("adversarial batch '" + path.string() + "' is inconsistent");
    return b;
}

namespace detail {

inline std::ostream& log() { return std::cerr; }

/// Checkpoint path of a model reference: an existing file, or
/// <checkpoint_dir>/<name>.ckpt.
inline std::filesystem::path checkpoint_path(const RunConfig& c, const std::string& ref) {
    if (std::filesystem::is_regular_file(ref)) return ref;
    return std::filesystem::path(c.checkpoint_dir) / (ref + ".ckpt");
}

/// Loads every referenced checkpoint up front, so a missing one fails before
/// any computation.
class ModelSet {
public:
    ModelSet(const RunConfig& c, const std::vector<std::string>& refs) {
        for (const auto& r : refs) {
            if (models_.contains(r)) continue;
            const auto path = checkpoint_path(c, r);
            if (!std::filesystem::exists(path))
                throw ConfigError("checkpoint for model '" + r + "' not found at " + path.string());
            models_.emplace(r, std::make_unique<Model>(load_checkpoint(path).model));
        }
    }
    const Model& at(const std::string& ref) const { return *models_.at(ref); }
    NamedModel named(const std::string& ref) const { return {display_name(ref), &at(ref)}; }

private:
    static std::string display_name(const std::string& ref) {
        const std::filesystem::path p(ref);
        return p.has_extension() && p.extension() == ".ckpt" ? p.stem().string() : ref;
    }
    std::map<std::string, std::unique_ptr<Model>> models_;
};

inline Dataset test_split(const RunConfig& c) {
    Dataset d = load_dataset(c.dataset, c.data_dir, "test");
    return c.subsample ? subsample(d, c.subsample, c.seed.value_or(0)) : d;
}

inline HarnessOptions harness_options(const RunConfig& c) { return {c.batch_size, c.threads, c.seed.value_or(0)}; }

inline nlohmann::ordered_json attack_config_json(const AttackConfig& a) {
    nlohmann::ordered_json j{{"epsilon", a.epsilon}, {"steps", a.steps}};
    j["step_size"] = a.step_size ? nlohmann::ordered_json(*a.step_size) : nlohmann::ordered_json(nullptr);
    j["momentum"] = a.momentum;
    j["diversity_prob"] = a.diversity_prob;
    j["init_noise"] = a.init_noise ? nlohmann::ordered_json(*a.init_noise) : nlohmann::ordered_json(nullptr);
    j["nrdm_step"] = a.nrdm_step ? nlohmann::ordered_json(*a.nrdm_step) : nlohmann::ordered_json(nullptr);
    j["pixel_min"] = a.pixel_min;
    j["pixel_max"] = a.pixel_max;
    j["distortion"] = a.distortion == Distortion::mse ? "mse" : "l2";
    return j;
}

inline std::vector<DefenseConfig> with_none(std::vector<DefenseConfig> d) {
    const bool has_none = std::any_of(d.begin(), d.end(), [](const DefenseConfig& x) { return x.kind == DefenseKind::none; });
    if (!has_none) d.insert(d.begin(), DefenseConfig{});
    return d;
}

inline int cmd_train(RunConfig c) {
    const std::string arch = c.models.at(0);
    architecture(arch);  // rejects unknown names before loading data
    if (c.out.empty()) c.out = (std::filesystem::path(c.checkpoint_dir) / (arch + ".ckpt")).string();
    const auto provenance = config_to_json(c);
    const Dataset train_set = load_dataset(c.dataset, c.data_dir, "train");
    const Dataset test_set = test_split(c);

    Model model = build_model(arch, *c.seed);
    TrainState state;
    const std::filesystem::path state_path = c.out + ".state";
    if (c.resume && std::filesystem::exists(state_path)) {
        auto [m, s] = train_state_from_archive(load_archive(state_path, train_state_magic));
        if (m.name() != arch) throw ConfigError("resume state is for '" + m.name() + "', not '" + arch + "'");
        model = std::move(m);
        state = std::move(s);
        log() << "resuming " << arch << " at epoch " << state.next_epoch << "\n";
    }
    const Dataset monitor = subsample(test_set, 1000, 0);
    train_epochs(model, train_set, c.train, state, [&](const EpochReport& r, const TrainState& s) {
        save_archive(state_path, train_state_archive(model, s, provenance.dump()));
        log() << arch << " epoch " << r.epoch + 1 << "/" << c.train.epochs << " lr " << r.learning_rate << " loss "
              << r.mean_loss << " train-acc " << r.train_accuracy << " test-acc(1k) "
              << evaluate_topk(model, monitor, 1) << std::endl;
    });
    const double acc = evaluate_topk(model, test_set, 1);
    save_checkpoint(c.out, model, {c.train.epochs, acc, *c.seed, provenance});
    std::cout << arch << " top1 " << acc << " -> " << c.out << "\n";
    return exit_ok;
}

inline int cmd_attack(const RunConfig& c) {
    const ModelSet models(c, {c.models.at(0)});
    const auto source = models.named(c.models.at(0));
    const Dataset data = test_split(c);
    const AttackKind kind = parse_attack_kind(c.attacks.at(0));
    const AttackConfig cfg = c.attack.resolve(kind, *c.seed);
    const auto gen = generate_adversarial(kind, *source.model, data.images, data.labels, cfg, harness_options(c));

    AdversarialBatch b;
    b.label = std::string(attack_name(kind));
    b.metadata["provenance"] = config_to_json(c);
    b.metadata["source"] = source.name;
    b.metadata["attack"] = attack_config_json(cfg);
    b.metadata["iterations"] = gen.iterations;
    b.metadata["nrd_trace"] = gen.nrd_trace;
    b.metadata["max_deviation"] = gen.max_deviation;
    b.metadata["zero_gradient_samples"] = gen.zero_gradient_samples;
    b.metadata["degenerate"] = gen.degenerate;
    b.clean = data.images;
    b.adversarial = gen.adversarial;
    b.labels = data.labels;
    save_adversarial_batch(c.out, b);
    const double top1 = topk_accuracy(predict_logits(*source.model, b.adversarial), b.labels, 1);
    std::cout << b.label << " on " << source.name << ": white-box top1 " << top1 << ", final NRD "
              << (gen.nrd_trace.empty() ? 0.0 : gen.nrd_trace.back()) << " -> " << c.out << "\n";
    return exit_ok;
}

inline int cmd_defend(const RunConfig& c) {
    const AdversarialBatch in = load_adversarial_batch(c.input);
    const DefenseConfig& d = c.defenses.at(0);
    AdversarialBatch out;
    out.label = in.label + "+" + d.label();
    out.metadata["provenance"] = config_to_json(c);
    out.metadata["defense"] = detail::defense_to_json(d);
    out.metadata["parent"] = in.metadata;
    out.clean = apply_defense(d, in.clean);
    out.adversarial = apply_defense(d, in.adversarial);
    out.labels = in.labels;
    save_adversarial_batch(c.out, out);
    std::cout << out.label << " -> " << c.out << "\n";
    return exit_ok;
}

inline int cmd_evaluate(const RunConfig& c) {
    const ModelSet models(c, c.models);
    Dataset data;
    std::string attack = "none", source = "-";
    std::optional<Tensor> clean;
    if (!c.input.empty()) {
        AdversarialBatch b = load_adversarial_batch(c.input);
        attack = b.label;
        if (b.metadata.contains("source")) source = b.metadata["source"].get<std::string>();
        else if (b.metadata.contains("parent") && b.metadata["parent"].contains("source"))
            source = b.metadata["parent"]["source"].get<std::string>();
        data = {c.dataset, "test", std::move(b.adversarial), std::move(b.labels)};
        clean = std::move(b.clean);
    } else {
        data = test_split(c);
    }
    std::vector<TransferCell> cells;
    for (const auto& d : c.defenses.empty() ? std::vector<DefenseConfig>{DefenseConfig{}} : c.defenses) {
        const Tensor input = apply_defense(d, data.images);
        for (const auto& ref : c.models) {
            const auto m = models.named(ref);
            const Tensor logits = predict_logits(*m.model, input);
            TransferCell cell{attack, source, m.name, d.label(), topk_accuracy(logits, data.labels, 1),
                              topk_accuracy(logits, data.labels, 5),
                              clean ? nrd(*m.model, *clean, data.images) : 0.0, data.size(), source == m.name};
            std::cout << cell.target << " [" << cell.attack << ", " << cell.defense << "] top1 " << cell.top1 << " top5 "
                      << cell.top5 << " (n=" << cell.n << ")\n";
            cells.push_back(std::move(cell));
        }
    }
    if (!c.out.empty()) emit_report(cells, c.out, parse_report_format(c.format), config_to_json(c));
    return exit_ok;
}

inline int cmd_matrix(const RunConfig& c) {
    const auto& target_refs = c.targets.empty() ? c.models : c.targets;
    std::vector<std::string> all = c.models;
    all.insert(all.end(), target_refs.begin(), target_refs.end());
    const ModelSet models(c, all);
    std::vector<NamedModel> sources, targets;
    for (const auto& r : c.models) sources.push_back(models.named(r));
    for (const auto& r : target_refs) targets.push_back(models.named(r));
    std::vector<AttackKind> attacks;
    for (const auto& a : c.attacks) attacks.push_back(parse_attack_kind(a));
    const Dataset data = test_split(c);
    const auto defenses = with_none(c.defenses);
    const auto cells = run_transfer_matrix(attacks, sources, targets, defenses, data,
                                           [&](AttackKind k) { return c.attack.resolve(k, *c.seed); },
                                           harness_options(c));
    emit_report(cells, c.out, parse_report_format(c.format), config_to_json(c));
    for (const auto& cell : cells)
        std::cout << cell.attack << " " << cell.source << " -> " << cell.target << (cell.whitebox ? "*" : "") << " ["
                  << cell.defense << "] top1 " << cell.top1 << " top5 " << cell.top5 << " nrd " << cell.nrd << "\n";
    return exit_ok;
}

inline int cmd_curves(const RunConfig& c) {
    const std::string src = c.models.at(0);
    const std::string tgt = c.targets.empty() ? src : c.targets.at(0);
    const std::string ref = c.reference.empty() ? src : c.reference;
    const ModelSet models(c, {src, tgt, ref});
    const Dataset data = test_split(c);
    std::vector<NRDCurve> curves;
    for (const auto& a : c.attacks) {
        const AttackKind kind = parse_attack_kind(a);
        curves.push_back(nrd_vs_iterations(kind, models.named(src), models.named(tgt), models.at(ref), data,
                                           c.curve_steps, [&](AttackKind k) { return c.attack.resolve(k, *c.seed); },
                                           harness_options(c)));
        const auto& cv = curves.back();
        for (std::size_t i = 0; i < cv.iterations.size(); ++i)
            std::cout << cv.attack << " T=" << cv.iterations[i] << " nrd " << cv.nrd[i] << " top1 " << cv.top1[i] << "\n";
    }
    emit_report(std::span<const NRDCurve>(curves), c.out, config_to_json(c));
    return exit_ok;
}

}  // namespace detail

/// Runs one command. Errors map to exit codes: 2 configuration, 3 data,
/// 4 numeric failure (divergence or budget violation).
inline int run_command(const RunConfig& c) {
    blas::use_single_thread();
    try {
        check_paths(c);
        if (c.command == "train") return detail::cmd_train(c);
        if (c.command == "attack") return detail::cmd_attack(c);
        if (c.command == "defend") return detail::cmd_defend(c);
        if (c.command == "evaluate") return detail::cmd_evaluate(c);
        if (c.command == "matrix") return detail::cmd_matrix(c);
        if (c.command == "curves") return detail::cmd_curves(c);
        throw ConfigError("unknown command '" + c.command + "'");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return exit_numeric;
    } catch (const BudgetViolation& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return exit_numeric;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_failure;
    }
}

}  // namespace nrdm

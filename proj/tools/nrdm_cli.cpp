// nrdm_cli: train, attack, defend, evaluate, matrix and curves commands.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nrdm/commands.hpp"

namespace {

struct Flags {
    std::string command, config, dataset, data_dir, checkpoints, out, input, reference, format, defense;
    std::vector<std::string> models, targets, attacks;
    std::optional<double> epsilon, step_size, momentum, diversity_prob, init_noise, weight, lr;
    std::optional<std::size_t> steps, subsample, batch_size, threads, epochs, max_batches;
    std::optional<std::uint64_t> seed;
    std::optional<int> quality, window;
    std::vector<std::size_t> curve_steps;
    bool resume = false;
};

nlohmann::json overrides(const Flags& f, const nlohmann::json& base) {
    nlohmann::json j = nlohmann::json::object();
    auto set = [&](const char* key, const std::string& v) {
        if (!v.empty()) j[key] = v;
    };
    set("command", f.command);
    set("dataset", f.dataset);
    set("data_dir", f.data_dir);
    set("checkpoint_dir", f.checkpoints);
    set("out", f.out);
    set("input", f.input);
    set("reference", f.reference);
    set("format", f.format);
    if (!f.models.empty()) j["models"] = f.models;
    if (!f.targets.empty()) j["targets"] = f.targets;
    if (!f.attacks.empty()) j["attacks"] = f.attacks;
    if (!f.curve_steps.empty()) j["curve_steps"] = f.curve_steps;
    if (f.seed) j["seed"] = *f.seed;
    if (f.subsample) j["subsample"] = *f.subsample;
    if (f.batch_size) j["batch_size"] = *f.batch_size;
    if (f.threads) j["threads"] = *f.threads;
    if (f.resume) j["resume"] = true;
    if (f.epsilon) j["attack"]["epsilon"] = *f.epsilon;
    if (f.steps) j["attack"]["steps"] = *f.steps;
    if (f.step_size) j["attack"]["step_size"] = *f.step_size;
    if (f.momentum) j["attack"]["momentum"] = *f.momentum;
    if (f.diversity_prob) j["attack"]["diversity_prob"] = *f.diversity_prob;
    if (f.init_noise) j["attack"]["init_noise"] = *f.init_noise;
    if (f.epochs) j["train"]["epochs"] = *f.epochs;
    if (f.lr) j["train"]["learning_rate"] = *f.lr;
    if (f.max_batches) j["train"]["max_batches_per_epoch"] = *f.max_batches;

    // --defense replaces the defense list; --quality/--weight/--window alone
    // adjust matching entries of the file's list.
    auto params = [&](nlohmann::json& d) {
        const std::string kind = d.value("kind", "none");
        if (f.quality && kind == "jpeg") d["quality"] = *f.quality;
        if (f.weight && kind == "tvm") d["weight"] = *f.weight;
        if (f.window && kind == "median") d["window"] = *f.window;
    };
    if (!f.defense.empty()) {
        nlohmann::json d{{"kind", f.defense}};
        params(d);
        j["defenses"] = nlohmann::json::array({d});
    } else if (f.quality || f.weight || f.window) {
        nlohmann::json list = base.value("defenses", nlohmann::json::array());
        for (auto& d : list) params(d);
        if (list.empty()) throw nrdm::ConfigError("--quality/--weight/--window need --defense or a defenses list");
        j["defenses"] = list;
    }
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial attack toolkit: train models, craft NRDM and gradient attacks, evaluate transfer"};
    Flags f;
    app.add_option("command", f.command, "train | attack | defend | evaluate | matrix | curves");
    app.add_option("--config", f.config, "JSON run config, or an artifact whose embedded config is reused");
    app.add_option("--dataset", f.dataset, "mnist | cifar10");
    app.add_option("--data-dir", f.data_dir, "directory with the dataset files");
    app.add_option("--model", f.models, "architecture (train) or checkpoint name/path; repeatable")->delimiter(',');
    app.add_option("--target", f.targets, "target checkpoints for matrix/curves; repeatable")->delimiter(',');
    app.add_option("--checkpoints", f.checkpoints, "checkpoint directory");
    app.add_option("--attack", f.attacks, "none fgsm rfgsm ifgsm mifgsm dim nrdm nrdm_dim; repeatable")->delimiter(',');
    app.add_option("--epsilon", f.epsilon, "l-infinity budget in pixel units");
    app.add_option("--steps", f.steps, "attack iterations T");
    app.add_option("--step-size", f.step_size, "attack step size alpha");
    app.add_option("--momentum", f.momentum, "momentum decay mu");
    app.add_option("--diversity-prob", f.diversity_prob, "input diversity probability p");
    app.add_option("--init-noise", f.init_noise, "NRDM start noise half-width");
    app.add_option("--seed", f.seed, "random seed");
    app.add_option("--out", f.out, "output artifact path");
    app.add_option("--input", f.input, "adversarial batch for defend/evaluate");
    app.add_option("--defense", f.defense, "none | jpeg | tvm | median");
    app.add_option("--quality", f.quality, "JPEG quality");
    app.add_option("--weight", f.weight, "TVM weight");
    app.add_option("--window", f.window, "median window");
    app.add_option("--subsample", f.subsample, "evaluate on a fixed-seed subset of the test split");
    app.add_option("--curve-steps", f.curve_steps, "T values for curves")->delimiter(',');
    app.add_option("--reference", f.reference, "NRD reference model for curves");
    app.add_option("--batch-size", f.batch_size, "attack chunk size");
    app.add_option("--threads", f.threads, "worker threads");
    app.add_option("--format", f.format, "report format: csv | json | pivot");
    app.add_option("--epochs", f.epochs, "training epochs");
    app.add_option("--lr", f.lr, "initial learning rate");
    app.add_option("--max-batches", f.max_batches, "batches per epoch (subsampled-epoch mode)");
    app.add_flag("--resume", f.resume, "continue training from <out>.state");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : nrdm::exit_config;
    }

    nrdm::RunConfig config;
    try {
        nlohmann::json merged = f.config.empty() ? nlohmann::json::object() : nrdm::load_config_json(f.config);
        nrdm::merge_config(merged, overrides(f, merged));
        config = nrdm::config_from_json(merged);
    } catch (const nrdm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return nrdm::exit_config;
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return nrdm::exit_config;
    }
    return nrdm::run_command(config);
}

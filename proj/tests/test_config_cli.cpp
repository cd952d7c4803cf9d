#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "nrdm/commands.hpp"
#include "support.hpp"

using namespace nrdm;
using namespace nrdm::testing;
using nlohmann::json;

namespace {

json base(const std::string& command) {
    return {{"command", command}, {"data_dir", "/tmp"}, {"models", {"model-m"}}, {"attacks", {"mifgsm"}},
            {"seed", 1},          {"out", "x"}};
}

std::string config_error(const json& j) {
    try {
        config_from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "no error";
}

struct CliResult {
    int code;
    std::string err;
};

/// Runs the CLI binary in `dir` with stdout discarded.
CliResult cli(const TempDir& dir, const std::string& args) {
    const auto err = dir / "stderr.txt";
    const std::string cmd = "cd '" + dir.path().string() + "' && '" NRDM_CLI_PATH "' " + args + " > /dev/null 2> '" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file_bytes(err)};
}

}  // namespace

TEST(Config, DefaultsFollowAttackKind) {
    const RunConfig c = config_from_json(base("attack"));
    EXPECT_EQ(c.attack.epsilon, 76.5);
    const AttackConfig m = c.attack.resolve(AttackKind::mifgsm, 1);
    EXPECT_EQ(m.momentum, 1.0);
    EXPECT_EQ(m.steps, 10u);
    EXPECT_DOUBLE_EQ(m.alpha(), 7.65);
    EXPECT_EQ(m.diversity_prob, 0.7);
    EXPECT_EQ(c.attack.resolve(AttackKind::nrdm, 1).steps, 100u);
    json cifar = base("attack");
    cifar["dataset"] = "cifar10";
    EXPECT_EQ(config_from_json(cifar).attack.epsilon, 8.0);
    EXPECT_EQ(config_from_json(cifar).train.epochs, 60u);
}

TEST(Config, OverridesWinAndMergeNestedSections) {
    json file = base("attack");
    file["attack"] = {{"epsilon", 16}, {"momentum", 0.5}};
    merge_config(file, json{{"attack", {{"epsilon", 8}}}});
    const RunConfig c = config_from_json(file);
    EXPECT_EQ(c.attack.epsilon, 8.0);
    EXPECT_EQ(c.attack.momentum, 0.5);
}

TEST(Config, UnknownKeysNamed) {
    json a = base("attack");
    a["attak"] = 1;
    EXPECT_NE(config_error(a).find("'attak'"), std::string::npos);
    json b = base("attack");
    b["attack"] = {{"epsilom", 3}};
    EXPECT_NE(config_error(b).find("'attack.epsilom'"), std::string::npos);
    json c = base("matrix");
    c["defenses"] = {{{"kind", "jpeg"}, {"qualty", 50}}};
    EXPECT_NE(config_error(c).find("'defenses[0].qualty'"), std::string::npos);
}

TEST(Config, OutOfRangeValuesNamed) {
    const std::vector<std::pair<json, std::string>> cases{
        {{{"attack", {{"epsilon", -1}}}}, "epsilon"},
        {{{"attack", {{"diversity_prob", 1.5}}}}, "diversity_prob"},
        {{{"attack", {{"steps", "ten"}}}}, "attack.steps"},
        {{{"defenses", {{{"kind", "jpeg"}, {"quality", 0}}}}}, "quality"},
        {{{"defenses", {{{"kind", "median"}, {"window", 4}}}}}, "window"},
        {{{"defenses", {{{"kind", "tvm"}, {"weight", 0}}}}}, "weight"},
        {{{"defenses", {{{"kind", "blur"}}}}}, "kind"},
        {{{"attacks", {"pgd"}}}, "pgd"},
        {{{"dataset", "svhn"}}, "dataset"},
        {{{"format", "xml"}}, "format"},
        {{{"curve_steps", {1, 5, 5}}}, "curve_steps"},
        {{{"train", {{"learning_rate", 0}}}}, "learning_rate"}};
    for (const auto& [patch, key] : cases) {
        json j = base("matrix");
        merge_config(j, patch);
        EXPECT_NE(config_error(j).find(key), std::string::npos) << patch.dump() << " -> " << config_error(j);
    }
}

TEST(Config, SeedRequiredForStochasticCommands) {
    for (const std::string cmd : {"train", "attack", "matrix", "curves"}) {
        json j = base(cmd);
        j.erase("seed");
        EXPECT_NE(config_error(j).find("seed"), std::string::npos) << cmd;
    }
    const json defend{{"command", "defend"}, {"input", "a.bin"}, {"defenses", {{{"kind", "median"}}}}, {"out", "b"}};
    EXPECT_NO_THROW(config_from_json(defend));
    json evaluate = base("evaluate");
    evaluate.erase("seed");
    EXPECT_NO_THROW(config_from_json(evaluate));
}

TEST(Config, CanonicalJsonIsAFixedPoint) {
    json j = base("matrix");
    j["defenses"] = {{{"kind", "tvm"}, {"weight", 10}}, {{"kind", "jpeg"}, {"quality", 20}}};
    j["attack"] = {{"step_size", 2.5}};
    const auto once = config_to_json(config_from_json(j));
    EXPECT_EQ(config_to_json(config_from_json(json::parse(once.dump()))).dump(), once.dump());
}

TEST(Config, EmbeddedConfigFromEveryArtifactKind) {
    TempDir dir;
    const auto prov = config_to_json(config_from_json(base("matrix")));
    const std::vector<TransferCell> cells{{"fgsm", "a", "b", "none", 0.5, 0.75, 1.0, 4, false}};
    emit_report(cells, dir / "r.csv", ReportFormat::csv, prov);
    emit_report(cells, dir / "r.json", ReportFormat::json, prov);
    EXPECT_EQ(embedded_config(dir / "r.csv")->dump(), json(prov).dump());
    EXPECT_EQ(embedded_config(dir / "r.json")->dump(), json(prov).dump());

    TrainingMetadata meta;
    meta.provenance = prov;
    save_checkpoint(dir / "m.ckpt", build_model("model-m", 1), meta);
    EXPECT_EQ(embedded_config(dir / "m.ckpt")->dump(), json(prov).dump());

    write_bytes(dir / "plain.json", base("attack").dump());
    EXPECT_FALSE(embedded_config(dir / "plain.json").has_value());
    EXPECT_EQ(load_config_json(dir / "plain.json"), base("attack"));
    EXPECT_THROW(load_config_json(dir / "none.json"), ConfigError);
}

TEST(Config, MissingPathsRejected) {
    json j = base("attack");
    j["data_dir"] = "/nonexistent/dir";
    EXPECT_THROW(check_paths(config_from_json(j)), ConfigError);
}

// The identity model with a zero budget leaves every image untouched.
TEST(Attack, ZeroBudgetOnIdentityModelReturnsInput) {
    Rng rng(3);
    const Tensor x = random_pixels({4, 1, 6, 6}, rng);
    const std::vector<int> labels{0, 1, 2, 3};
    AttackConfig cfg;
    cfg.epsilon = 0;
    for (AttackKind k : {AttackKind::fgsm, AttackKind::rfgsm, AttackKind::mifgsm, AttackKind::dim, AttackKind::nrdm})
        EXPECT_EQ(generate_adversarial(k, IdentityModel{}, x, labels, cfg, {2, 1, 5}).adversarial, x)
            << attack_name(k);
}

TEST(AdversarialBatch, RoundTripAndInconsistencyRejected) {
    TempDir dir;
    Rng rng(4);
    AdversarialBatch b;
    b.label = "nrdm";
    b.metadata["source"] = "model-m";
    b.clean = random_pixels({3, 1, 4, 4}, rng);
    b.adversarial = random_pixels({3, 1, 4, 4}, rng);
    b.labels = {1, 2, 3};
    save_adversarial_batch(dir / "a.bin", b);
    const auto back = load_adversarial_batch(dir / "a.bin");
    EXPECT_EQ(back.adversarial, b.adversarial);
    EXPECT_EQ(back.clean, b.clean);
    EXPECT_EQ(back.labels, b.labels);
    EXPECT_EQ(back.metadata, b.metadata);
    b.labels.pop_back();
    save_adversarial_batch(dir / "bad.bin", b);
    EXPECT_THROW(load_adversarial_batch(dir / "bad.bin"), FormatError);
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir;
        write_mnist_dir(*dir_ / "data", 64, 24, 1);
        const auto r = cli(*dir_, "train --dataset mnist --data-dir data --model model-m --checkpoints ck --seed 3 "
                                  "--epochs 1 --max-batches 2");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static const TempDir& dir() { return *dir_; }

    /// Reruns from the artifact's own embedded config and checks the bytes.
    static void expect_reproducible(const std::string& artifact) {
        const std::string before = read_file_bytes(dir() / artifact);
        std::filesystem::remove(dir() / artifact);
        const auto r = cli(dir(), "--config " + artifact + ".copy");
        ASSERT_EQ(r.code, 0) << r.err;
        EXPECT_EQ(read_file_bytes(dir() / artifact), before) << artifact;
    }
    static void keep_copy(const std::string& artifact) {
        std::filesystem::copy_file(dir() / artifact, dir() / (artifact + ".copy"),
                                   std::filesystem::copy_options::overwrite_existing);
    }

private:
    static inline TempDir* dir_ = nullptr;
};

TEST_F(Cli, TrainWritesCheckpointWithProvenance) {
    ASSERT_TRUE(std::filesystem::exists(dir() / "ck/model-m.ckpt"));
    const auto cfg = embedded_config(dir() / "ck/model-m.ckpt");
    ASSERT_TRUE(cfg.has_value());
    EXPECT_EQ(cfg->at("seed"), 3);
    EXPECT_EQ(cfg->at("train").at("epochs"), 1);
    keep_copy("ck/model-m.ckpt");
    expect_reproducible("ck/model-m.ckpt");
}

TEST_F(Cli, AttackDefendEvaluateChainReproduces) {
    auto r = cli(dir(), "attack --dataset mnist --data-dir data --checkpoints ck --model model-m --attack rfgsm "
                        "--seed 5 --subsample 10 --out adv.bin");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto adv = load_adversarial_batch(dir() / "adv.bin");
    EXPECT_EQ(adv.clean.dim(0), 10u);
    EXPECT_EQ(check_budget(adv.clean, adv.adversarial, 76.5).violations, 0u);
    keep_copy("adv.bin");
    expect_reproducible("adv.bin");

    r = cli(dir(), "defend --input adv.bin --defense jpeg --quality 50 --out def.bin");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(load_adversarial_batch(dir() / "def.bin").label, "rfgsm+jpeg:50");
    keep_copy("def.bin");
    expect_reproducible("def.bin");

    r = cli(dir(), "evaluate --checkpoints ck --model model-m --input def.bin --out eval.csv");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = parse_cell_report(read_file_bytes(dir() / "eval.csv"));
    ASSERT_EQ(report.cells.size(), 1u);
    EXPECT_EQ(report.cells[0].attack, "rfgsm+jpeg:50");
    EXPECT_EQ(report.cells[0].n, 10u);
    keep_copy("eval.csv");
    expect_reproducible("eval.csv");
}

TEST_F(Cli, ZeroBudgetAttackReturnsCleanBatch) {
    const auto r = cli(dir(), "attack --dataset mnist --data-dir data --checkpoints ck --model model-m --attack ifgsm "
                              "--epsilon 0 --seed 1 --out zero.bin");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto b = load_adversarial_batch(dir() / "zero.bin");
    EXPECT_EQ(b.adversarial, b.clean);
}

TEST_F(Cli, MatrixReportParsesBackAndReproduces) {
    const auto r = cli(dir(), "matrix --dataset mnist --data-dir data --checkpoints ck --model model-m "
                              "--attack fgsm,nrdm --steps 2 --defense median --seed 2 --format json --out m.json");
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string text = read_file_bytes(dir() / "m.json");
    const auto report = parse_cell_report(text);
    ASSERT_EQ(report.cells.size(), 4u);
    for (const auto& c : report.cells) {
        EXPECT_TRUE(c.whitebox);
        EXPECT_LE(c.top1, c.top5);
        EXPECT_EQ(c.n, 24u);
    }
    EXPECT_EQ(render_cells(report.cells, ReportFormat::json, report.provenance), text);
    keep_copy("m.json");
    expect_reproducible("m.json");
}

TEST_F(Cli, CurvesReproduce) {
    const auto r = cli(dir(), "curves --dataset mnist --data-dir data --checkpoints ck --model model-m "
                              "--attack ifgsm --curve-steps 1,3 --seed 2 --out c.csv");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = parse_curve_report(read_file_bytes(dir() / "c.csv"));
    ASSERT_EQ(report.curves.size(), 1u);
    EXPECT_EQ(report.curves[0].iterations, (std::vector<std::size_t>{1, 3}));
    keep_copy("c.csv");
    expect_reproducible("c.csv");
}

TEST_F(Cli, FlagOverridesConfigFile) {
    write_bytes(dir() / "cfg.json", json{{"command", "attack"}, {"dataset", "mnist"}, {"data_dir", "data"},
                                         {"checkpoint_dir", "ck"}, {"models", {"model-m"}}, {"attacks", {"fgsm"}},
                                         {"attack", {{"epsilon", 16}}}, {"seed", 1}, {"out", "o.bin"}}
                                        .dump());
    const auto r = cli(dir(), "--config cfg.json --epsilon 8");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto b = load_adversarial_batch(dir() / "o.bin");
    EXPECT_EQ(b.metadata["attack"]["epsilon"], 8.0);
    EXPECT_LE(check_budget(b.clean, b.adversarial, 8).max_deviation, 8.0);
}

TEST_F(Cli, ExitCodes) {
    write_bytes(dir() / "unknown.json", R"({"command":"evaluate","data_dir":"data","models":["model-m"],"bogus":1})");
    auto r = cli(dir(), "--config unknown.json");
    EXPECT_EQ(r.code, exit_config);
    EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;

    r = cli(dir(), "attack --data-dir data --checkpoints ck --model model-m --attack fgsm --out a.bin");
    EXPECT_EQ(r.code, exit_config);
    EXPECT_NE(r.err.find("seed"), std::string::npos) << r.err;

    r = cli(dir(), "evaluate --data-dir missing --checkpoints ck --model model-m");
    EXPECT_EQ(r.code, exit_config);

    r = cli(dir(), "evaluate --data-dir data --checkpoints ck --model res-c");
    EXPECT_EQ(r.code, exit_config);
    EXPECT_NE(r.err.find("res-c"), std::string::npos) << r.err;

    r = cli(dir(), "attack --data-dir data --checkpoints ck --model model-m --attack fgsm --seed 1 --epsilon -2 --out a.bin");
    EXPECT_EQ(r.code, exit_config);

    std::filesystem::create_directories(dir() / "broken");
    std::filesystem::copy_file(dir() / "data/t10k-labels-idx1-ubyte", dir() / "broken/t10k-labels-idx1-ubyte");
    const std::string images = read_file_bytes(dir() / "data/t10k-images-idx3-ubyte");
    write_bytes(dir() / "broken/t10k-images-idx3-ubyte", images.substr(0, images.size() - 5));
    r = cli(dir(), "evaluate --data-dir broken --checkpoints ck --model model-m");
    EXPECT_EQ(r.code, exit_data);
    EXPECT_NE(r.err.find("truncated"), std::string::npos) << r.err;

    r = cli(dir(), "train --dataset mnist --data-dir data --model model-m --seed 1 --epochs 4 --lr 1e12 --out div.ckpt");
    EXPECT_EQ(r.code, exit_numeric) << r.err;
    EXPECT_FALSE(std::filesystem::exists(dir() / "div.ckpt"));
}

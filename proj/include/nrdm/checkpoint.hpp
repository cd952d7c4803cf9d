#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nrdm/archive.hpp"
#include "nrdm/models.hpp"

namespace nrdm {

inline constexpr std::string_view checkpoint_magic = "NRDMCKPT";

struct TrainingMetadata {
    std::size_t epochs = 0;
    double clean_accuracy = 0.0;  ///< top-1 on the evaluation split, fraction
    std::uint64_t seed = 0;
    nlohmann::ordered_json provenance = nlohmann::ordered_json::object();  ///< producing run config
};

struct Checkpoint {
    Model model;
    TrainingMetadata training;
};

inline Archive checkpoint_archive(const Model& model, const TrainingMetadata& meta) {
    nlohmann::ordered_json j;
    j["architecture"] = to_json(model.spec());
    j["training"] = {{"epochs", meta.epochs}, {"clean_accuracy", meta.clean_accuracy}, {"seed", meta.seed}};
    j["provenance"] = meta.provenance;
    Archive a{std::string(checkpoint_magic), model.name(), j.dump(2), {}};
    for (const auto& p : model.parameters()) a.tensors.push_back({p.name, p.value});
    const auto stats = model.batchnorm_stats();
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const Shape s{stats[i].mean.size()};
        a.tensors.push_back({"bn" + std::to_string(i) + ".running_mean", Tensor(s, stats[i].mean)});
        a.tensors.push_back({"bn" + std::to_string(i) + ".running_var", Tensor(s, stats[i].var)});
    }
    return a;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainingMetadata& meta) {
    save_archive(path, checkpoint_archive(model, meta));
}

inline Checkpoint checkpoint_from_archive(const Archive& a) {
    const auto j = nlohmann::json::parse(a.metadata);
    ModelSpec spec = model_spec_from_json(j.at("architecture"));
    if (spec.name != a.label) throw FormatError("checkpoint label '" + a.label + "' does not match its architecture");
    std::vector<Parameter<float>> params;
    std::vector<BatchNormStats<float>> stats;
    for (const auto& t : a.tensors) {
        if (t.name.starts_with("bn") && t.name.ends_with(".running_mean")) {
            BatchNormStats<float> s;
            s.mean = t.value.storage();
            stats.push_back(std::move(s));
        } else if (t.name.starts_with("bn") && t.name.ends_with(".running_var")) {
            if (stats.empty()) throw FormatError("running_var before running_mean in checkpoint");
            stats.back().var = t.value.storage();
        } else {
            params.push_back({t.name, t.value});
        }
    }
    Checkpoint c{Model::assemble(std::move(spec), std::move(params), std::move(stats)), {}};
    const auto& tr = j.at("training");
    c.training.epochs = tr.at("epochs").get<std::size_t>();
    c.training.clean_accuracy = tr.at("clean_accuracy").get<double>();
    c.training.seed = tr.at("seed").get<std::uint64_t>();
    c.training.provenance = nlohmann::ordered_json::parse(j.at("provenance").dump());
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_archive(load_archive(path, checkpoint_magic));
}

}  // namespace nrdm

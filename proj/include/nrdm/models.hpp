#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nrdm/ops.hpp"
#include "nrdm/random.hpp"
#include "nrdm/tape.hpp"
#include "nrdm/tensor.hpp"

namespace nrdm {

enum class LayerKind { conv, maxpool, dense, residual, avgpool, softmax };

inline const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv: return "conv";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::dense: return "dense";
        case LayerKind::residual: return "residual";
        case LayerKind::avgpool: return "avgpool";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

inline LayerKind parse_layer_kind(const std::string& name) {
    for (LayerKind k : {LayerKind::conv, LayerKind::maxpool, LayerKind::dense, LayerKind::residual,
                        LayerKind::avgpool, LayerKind::softmax})
        if (name == layer_kind_name(k)) return k;
    throw std::invalid_argument("unknown layer kind '" + name + "'");
}

/// One row of an architecture table.
///
/// conv: `repeat` x {conv(units, kernel x kernel, stride) [-> batchnorm] [-> relu]},
///       'same' padding; the stride applies to the first repetition only.
/// maxpool: window `kernel`, step `stride`.
/// dense: fully connected to `units` (4-D inputs are flattened channel-major),
///        optionally followed by relu.
/// residual: `repeat` blocks of conv(units) -> conv(units, stride) plus a
///        shortcut, relu after the addition. The stride applies in the first
///        block; shortcuts that change shape use a 1x1 strided projection.
/// avgpool: global spatial mean.
/// softmax: classifier output marker; logits pass through unchanged.
struct LayerSpec {
    LayerKind kind = LayerKind::conv;
    std::size_t units = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t repeat = 1;
    bool batchnorm = false;
    bool relu = false;
    bool tap = false;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
    std::string name;
    Shape input;                  ///< {C, H, W}
    double input_divisor = 255.0; ///< raw pixels are divided by this first
    std::size_t classes = 10;
    std::vector<LayerSpec> layers;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline nlohmann::ordered_json to_json(const ModelSpec& spec) {
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const auto& l : spec.layers) {
        nlohmann::ordered_json j;
        j["kind"] = layer_kind_name(l.kind);
        if (l.units) j["units"] = l.units;
        if (l.kernel) j["kernel"] = l.kernel;
        if (l.stride != 1) j["stride"] = l.stride;
        if (l.repeat != 1) j["repeat"] = l.repeat;
        if (l.batchnorm) j["batchnorm"] = true;
        if (l.relu) j["relu"] = true;
        if (l.tap) j["tap"] = true;
        layers.push_back(std::move(j));
    }
    nlohmann::ordered_json out;
    out["name"] = spec.name;
    out["input"] = spec.input;
    out["input_divisor"] = spec.input_divisor;
    out["classes"] = spec.classes;
    out["layers"] = std::move(layers);
    return out;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> layer_keys{"kind",   "units",     "kernel", "stride",
                                                     "repeat", "batchnorm", "relu",   "tap"};
    ModelSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.input = j.at("input").get<Shape>();
    spec.input_divisor = j.value("input_divisor", 255.0);
    spec.classes = j.value("classes", std::size_t{10});
    for (const auto& lj : j.at("layers")) {
        for (const auto& [key, _] : lj.items())
            if (std::find(layer_keys.begin(), layer_keys.end(), key) == layer_keys.end())
                throw std::invalid_argument("unknown layer key '" + key + "'");
        LayerSpec l;
        l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
        l.units = lj.value("units", std::size_t{0});
        l.kernel = lj.value("kernel", std::size_t{0});
        l.stride = lj.value("stride", std::size_t{1});
        l.repeat = lj.value("repeat", std::size_t{1});
        l.batchnorm = lj.value("batchnorm", false);
        l.relu = lj.value("relu", false);
        l.tap = lj.value("tap", false);
        spec.layers.push_back(l);
    }
    return spec;
}

inline const std::vector<std::string>& architecture_names() {
    static const std::vector<std::string> names{"model-m", "res-m", "model-c", "res-c"};
    return names;
}

/// Layer tables of the four toy architectures.
inline ModelSpec architecture(const std::string& name) {
    auto conv = [](std::size_t units, bool bn, std::size_t stride = 1, std::size_t repeat = 1, bool tap = false) {
        return LayerSpec{LayerKind::conv, units, 3, stride, repeat, bn, true, tap};
    };
    auto residual = [](std::size_t units, bool bn, std::size_t stride, std::size_t repeat, bool tap = false) {
        return LayerSpec{LayerKind::residual, units, 3, stride, repeat, bn, true, tap};
    };
    const LayerSpec softmax{LayerKind::softmax, 10};
    if (name == "model-m")
        return {name,
                {1, 28, 28},
                255.0,
                10,
                {conv(32, false), LayerSpec{LayerKind::maxpool, 0, 2, 2}, conv(64, false),
                 LayerSpec{LayerKind::maxpool, 0, 2, 2}, conv(64, false, 1, 1, true),
                 LayerSpec{LayerKind::dense, 64, 0, 1, 1, false, true}, LayerSpec{LayerKind::dense, 10}, softmax}};
    if (name == "model-c")
        return {name,
                {3, 32, 32},
                255.0,
                10,
                {conv(96, true, 1, 2), conv(96, true, 2), conv(192, true, 1, 2), conv(96, true, 2),
                 conv(192, true, 1, 2, true), conv(10, true), LayerSpec{LayerKind::avgpool}, softmax}};
    if (name == "res-m")
        return {name,
                {1, 28, 28},
                255.0,
                10,
                {conv(16, false), residual(16, false, 1, 1), residual(32, false, 2, 1),
                 residual(64, false, 2, 1, true), LayerSpec{LayerKind::dense, 10}, softmax}};
    if (name == "res-c")
        return {name,
                {3, 32, 32},
                255.0,
                10,
                {conv(16, true), residual(16, true, 1, 3), residual(32, true, 2, 3), residual(64, true, 2, 3, true),
                 LayerSpec{LayerKind::avgpool}, LayerSpec{LayerKind::dense, 10}, softmax}};
    throw std::invalid_argument("unknown architecture '" + name + "' (expected model-m, res-m, model-c or res-c)");
}

/// Logits plus the activation of the tap layer, both on the caller's tape.
struct ForwardOutput {
    Var logits;
    Var tap;
};

template <std::floating_point T>
struct Parameter {
    std::string name;
    BasicTensor<T> value;
};

/// Any model the attacks can drive: returns logits and tap features for a
/// batch, recorded so that gradients w.r.t. the input are available.
template <class M>
concept TappedClassifier = requires(const M& m, Tape<typename M::scalar_type>& tape, Var x) {
    typename M::scalar_type;
    { m.forward_with_tap(tape, x) } -> std::same_as<ForwardOutput>;
};

namespace detail {

inline std::size_t same_pad(std::size_t kernel) { return kernel / 2; }

inline std::size_t conv_out(std::size_t extent, std::size_t kernel, std::size_t stride) {
    return (extent + 2 * same_pad(kernel) - kernel) / stride + 1;
}

/// Walks the layer table, invoking `visit(name, shape)` for every parameter
/// tensor in creation order and `visit_bn(channels)` for every batch-norm.
/// Returns the logits feature count; throws on an inconsistent table.
template <class Visit, class VisitBn>
std::size_t walk_parameters(const ModelSpec& spec, Visit&& visit, VisitBn&& visit_bn) {
    if (spec.input.size() != 3) throw ShapeError("model input must be {C,H,W}");
    std::size_t c = spec.input[0], h = spec.input[1], w = spec.input[2];
    bool flat = false;
    std::size_t taps = 0;
    auto conv_params = [&](const std::string& prefix, std::size_t in, std::size_t out, std::size_t k, bool bn,
                           bool bias) {
        visit(prefix + ".weight", Shape{out, in, k, k});
        if (bias && !bn) visit(prefix + ".bias", Shape{out});
        if (bn) {
            visit(prefix + ".bn.gamma", Shape{out});
            visit(prefix + ".bn.beta", Shape{out});
            visit_bn(out);
        }
    };
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const auto& l = spec.layers[li];
        const std::string base = "l" + std::to_string(li);
        if (l.tap) ++taps;
        switch (l.kind) {
            case LayerKind::conv:
                if (flat || l.units == 0 || l.kernel == 0 || l.repeat == 0)
                    throw std::invalid_argument(base + ": invalid conv layer");
                for (std::size_t r = 0; r < l.repeat; ++r) {
                    const std::size_t s = r == 0 ? l.stride : 1;
                    conv_params(base + "." + std::to_string(r), c, l.units, l.kernel, l.batchnorm, true);
                    c = l.units;
                    h = conv_out(h, l.kernel, s);
                    w = conv_out(w, l.kernel, s);
                }
                break;
            case LayerKind::residual:
                if (flat || l.units == 0 || l.kernel == 0 || l.repeat == 0)
                    throw std::invalid_argument(base + ": invalid residual layer");
                for (std::size_t r = 0; r < l.repeat; ++r) {
                    const std::size_t s = r == 0 ? l.stride : 1;
                    const std::string p = base + "." + std::to_string(r);
                    conv_params(p + ".a", c, l.units, l.kernel, l.batchnorm, true);
                    conv_params(p + ".b", l.units, l.units, l.kernel, l.batchnorm, true);
                    if (s != 1 || c != l.units) conv_params(p + ".proj", c, l.units, 1, l.batchnorm, true);
                    c = l.units;
                    h = conv_out(h, l.kernel, s);
                    w = conv_out(w, l.kernel, s);
                }
                break;
            case LayerKind::maxpool:
                if (flat || l.kernel == 0 || l.kernel > h || l.kernel > w)
                    throw std::invalid_argument(base + ": invalid maxpool layer");
                h = (h - l.kernel) / l.stride + 1;
                w = (w - l.kernel) / l.stride + 1;
                break;
            case LayerKind::avgpool:
                if (flat) throw std::invalid_argument(base + ": avgpool after flatten");
                flat = true;
                h = w = 1;
                break;
            case LayerKind::dense:
                if (l.units == 0) throw std::invalid_argument(base + ": dense needs units");
                visit(base + ".weight", Shape{l.units, c * h * w});
                visit(base + ".bias", Shape{l.units});
                c = l.units;
                h = w = 1;
                flat = true;
                break;
            case LayerKind::softmax:
                if (li + 1 != spec.layers.size()) throw std::invalid_argument(base + ": softmax must be last");
                if (c * h * w != spec.classes)
                    throw std::invalid_argument(base + ": softmax over " + std::to_string(c * h * w) +
                                                " features, expected " + std::to_string(spec.classes));
                break;
        }
    }
    if (taps != 1)
        throw std::invalid_argument("model '" + spec.name + "' must mark exactly one tap layer, found " +
                                    std::to_string(taps));
    return c * h * w;
}

}  // namespace detail

/// A layer table together with its learned parameters and batch-norm
/// statistics. Parameters and statistics are plain values; forward passes
/// copy them onto the caller's tape.
template <std::floating_point T>
class BasicModel {
public:
    using scalar_type = T;

    BasicModel() = default;

    /// Allocates parameters for `spec` with He-normal weights and zero biases.
    static BasicModel build(ModelSpec spec, std::uint64_t seed) {
        BasicModel m;
        Rng rng(seed);
        detail::walk_parameters(
            spec,
            [&](const std::string& name, const Shape& shape) {
                BasicTensor<T> t(shape);
                if (name.ends_with(".weight")) {
                    const std::size_t fan_in = numel(shape) / shape[0];
                    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
                    for (T& v : t.data()) v = static_cast<T>(sd * rng.normal());
                } else if (name.ends_with(".gamma")) {
                    t.fill(T{1});
                }
                m.params_.push_back({name, std::move(t)});
            },
            [&](std::size_t channels) { m.bn_.emplace_back(channels); });
        m.spec_ = std::move(spec);
        return m;
    }

    const ModelSpec& spec() const noexcept { return spec_; }
    const std::string& name() const noexcept { return spec_.name; }
    std::span<const Parameter<T>> parameters() const noexcept { return params_; }
    std::span<Parameter<T>> parameters() noexcept { return params_; }
    std::span<const BatchNormStats<T>> batchnorm_stats() const noexcept { return bn_; }
    std::span<BatchNormStats<T>> batchnorm_stats() noexcept { return bn_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    /// Inference-mode forward pass with frozen parameters.
    ForwardOutput forward_with_tap(Tape<T>& tape, Var x) const {
        std::vector<Var> pv;
        pv.reserve(params_.size());
        for (const auto& p : params_) pv.push_back(tape.constant(p.value));
        auto stats = bn_;
        return run(tape, x, pv, stats, BatchNormMode::inference);
    }

    /// Training-mode forward pass: parameters become tape variables (returned
    /// through `param_vars`, same order as parameters()) and batch-norm
    /// layers normalize with batch statistics, updating the running ones.
    ForwardOutput forward_train(Tape<T>& tape, Var x, std::vector<Var>& param_vars) {
        param_vars.clear();
        for (const auto& p : params_) param_vars.push_back(tape.variable(p.value));
        return run(tape, x, param_vars, bn_, BatchNormMode::training);
    }

    /// Output shape of the tap layer for a batch of `n`.
    Shape tap_shape(std::size_t n) const {
        Tape<T> tape;
        Shape in{1};
        in.insert(in.end(), spec_.input.begin(), spec_.input.end());
        const auto out = forward_with_tap(tape, tape.constant(BasicTensor<T>(in)));
        Shape s = tape.value(out.tap).shape();
        s[0] = n;
        return s;
    }

    template <std::floating_point U>
    BasicModel<U> cast() const {
        BasicModel<U> out;
        out.spec_ = spec_;
        for (const auto& p : params_) out.params_.push_back({p.name, p.value.template cast<U>()});
        for (const auto& s : bn_) {
            BatchNormStats<U> c(s.mean.size());
            std::copy(s.mean.begin(), s.mean.end(), c.mean.begin());
            std::copy(s.var.begin(), s.var.end(), c.var.begin());
            out.bn_.push_back(std::move(c));
        }
        return out;
    }

    /// Used by checkpoint loading; validates names and shapes against `spec`.
    static BasicModel assemble(ModelSpec spec, std::vector<Parameter<T>> params, std::vector<BatchNormStats<T>> bn) {
        BasicModel m = build(spec, 0);
        if (params.size() != m.params_.size() || bn.size() != m.bn_.size())
            throw ShapeError("parameter set does not match architecture '" + spec.name + "'");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name != m.params_[i].name || params[i].value.shape() != m.params_[i].value.shape())
                throw ShapeError("parameter '" + params[i].name + "' does not match architecture '" + spec.name +
                                 "'");
        for (std::size_t i = 0; i < bn.size(); ++i)
            if (bn[i].mean.size() != m.bn_[i].mean.size() || bn[i].var.size() != m.bn_[i].mean.size())
                throw ShapeError("batch-norm statistics do not match architecture '" + spec.name + "'");
        m.params_ = std::move(params);
        m.bn_ = std::move(bn);
        return m;
    }

private:
    template <std::floating_point>
    friend class BasicModel;

    struct Cursor {
        std::span<const Var> params;
        std::span<BatchNormStats<T>> stats;
        std::size_t p = 0, s = 0;
        Var next() { return params[p++]; }
        BatchNormStats<T>& next_stats() { return stats[s++]; }
    };

    static Var conv_unit(Tape<T>& tape, Var x, Cursor& cur, std::size_t kernel, std::size_t stride, bool bn,
                         bool relu_after, BatchNormMode mode) {
        const Var w = cur.next();
        std::optional<Var> bias;
        if (!bn) bias = cur.next();
        Var y = conv2d(tape, x, w, bias, stride, detail::same_pad(kernel));
        if (bn) {
            const Var gamma = cur.next();
            const Var beta = cur.next();
            y = batchnorm2d(tape, y, gamma, beta, cur.next_stats(), mode);
        }
        return relu_after ? relu(tape, y) : y;
    }

    ForwardOutput run(Tape<T>& tape, Var x, std::span<const Var> pv, std::span<BatchNormStats<T>> stats,
                      BatchNormMode mode) const {
        const auto& in = tape.value(x);
        Shape expected{0};
        expected.insert(expected.end(), spec_.input.begin(), spec_.input.end());
        if (in.rank() != 4 || !std::equal(expected.begin() + 1, expected.end(), in.shape().begin() + 1))
            throw ShapeError("model '" + spec_.name + "' expects input [N," + std::to_string(spec_.input[0]) + "," +
                             std::to_string(spec_.input[1]) + "," + std::to_string(spec_.input[2]) + "], got " +
                             to_string(in.shape()));
        Cursor cur{pv, stats};
        Var h = scale(tape, x, static_cast<T>(1.0 / spec_.input_divisor));
        std::optional<Var> tap;
        for (const auto& l : spec_.layers) {
            switch (l.kind) {
                case LayerKind::conv:
                    for (std::size_t r = 0; r < l.repeat; ++r)
                        h = conv_unit(tape, h, cur, l.kernel, r == 0 ? l.stride : 1, l.batchnorm, l.relu, mode);
                    break;
                case LayerKind::residual:
                    for (std::size_t r = 0; r < l.repeat; ++r) {
                        const std::size_t s = r == 0 ? l.stride : 1;
                        const std::size_t in_c = tape.value(h).dim(1);
                        Var a = conv_unit(tape, h, cur, l.kernel, 1, l.batchnorm, true, mode);
                        Var b = conv_unit(tape, a, cur, l.kernel, s, l.batchnorm, false, mode);
                        Var shortcut = h;
                        if (s != 1 || in_c != l.units) shortcut = conv_unit(tape, h, cur, 1, s, l.batchnorm, false, mode);
                        h = add(tape, b, shortcut);
                        if (l.relu) h = relu(tape, h);
                    }
                    break;
                case LayerKind::maxpool:
                    h = maxpool2d(tape, h, l.kernel, l.stride);
                    break;
                case LayerKind::avgpool:
                    h = avgpool_global(tape, h);
                    break;
                case LayerKind::dense: {
                    if (tape.value(h).rank() != 2) h = flatten(tape, h);
                    const Var w = cur.next();
                    const Var b = cur.next();
                    h = dense(tape, h, w, b);
                    if (l.relu) h = relu(tape, h);
                    break;
                }
                case LayerKind::softmax:
                    if (tape.value(h).rank() != 2) h = flatten(tape, h);
                    break;
            }
            if (l.tap) tap = h;
        }
        if (!tap) throw std::logic_error("model '" + spec_.name + "' has no tap layer");
        return {h, *tap};
    }

    ModelSpec spec_;
    std::vector<Parameter<T>> params_;
    std::vector<BatchNormStats<T>> bn_;
};

using Model = BasicModel<float>;

/// Builds one of the named toy architectures with freshly initialized weights.
inline Model build_model(const std::string& name, std::uint64_t seed = 0) {
    return Model::build(architecture(name), seed);
}

/// Logits and tap features for `x` in inference mode.
template <TappedClassifier M>
std::pair<BasicTensor<typename M::scalar_type>, BasicTensor<typename M::scalar_type>> forward_with_tap(
    const M& model, const BasicTensor<typename M::scalar_type>& x) {
    Tape<typename M::scalar_type> tape;
    const auto out = model.forward_with_tap(tape, tape.constant(x));
    return {tape.value(out.logits), tape.value(out.tap)};
}

}  // namespace nrdm

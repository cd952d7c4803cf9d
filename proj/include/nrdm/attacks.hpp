#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nrdm/models.hpp"
#include "nrdm/ops.hpp"
#include "nrdm/random.hpp"

// Untargeted l-infinity attacks. Label-based attacks ascend the softmax
// cross-entropy; the NRDM family ascends the distortion of the model's tap
// activations and never sees labels.

namespace nrdm {

enum class AttackKind { none, fgsm, rfgsm, ifgsm, mifgsm, dim, nrdm, nrdm_dim };

inline constexpr std::array<std::pair<AttackKind, std::string_view>, 8> attack_names{{
    {AttackKind::none, "none"},
    {AttackKind::fgsm, "fgsm"},
    {AttackKind::rfgsm, "rfgsm"},
    {AttackKind::ifgsm, "ifgsm"},
    {AttackKind::mifgsm, "mifgsm"},
    {AttackKind::dim, "dim"},
    {AttackKind::nrdm, "nrdm"},
    {AttackKind::nrdm_dim, "nrdm_dim"},
}};

inline std::string_view attack_name(AttackKind k) {
    for (const auto& [kind, name] : attack_names)
        if (kind == k) return name;
    return "?";
}

inline AttackKind parse_attack_kind(std::string_view name) {
    for (const auto& [kind, n] : attack_names)
        if (n == name) return kind;
    throw std::invalid_argument("unknown attack '" + std::string(name) +
                                "' (expected none, fgsm, rfgsm, ifgsm, mifgsm, dim, nrdm or nrdm_dim)");
}

inline bool uses_labels(AttackKind k) {
    return k != AttackKind::nrdm && k != AttackKind::nrdm_dim && k != AttackKind::none;
}

/// Distortion between tap activations maximised by NRDM.
enum class Distortion { mse, l2 };

struct AttackConfig {
    double epsilon = 16.0;                ///< l-infinity budget, pixel units
    std::size_t steps = 10;               ///< T
    std::optional<double> step_size;      ///< alpha; default eps/T (rfgsm: eps/3)
    double momentum = 1.0;                ///< mu
    double diversity_prob = 0.7;          ///< p
    std::optional<double> init_noise;     ///< half-width of NRDM's uniform start noise; default eps/2
    std::optional<double> nrdm_step;      ///< NRDM per-iteration step; default eps
    double pixel_min = 0.0;
    double pixel_max = 255.0;
    Distortion distortion = Distortion::mse;
    std::uint64_t seed = 0;

    void validate() const {
        auto bad = [](const std::string& key, const std::string& why) {
            throw std::invalid_argument("attack." + key + ": " + why);
        };
        if (!(epsilon >= 0) || !std::isfinite(epsilon)) bad("epsilon", "must be a finite value >= 0");
        if (steps < 1) bad("steps", "must be >= 1");
        if (step_size && !(*step_size >= 0)) bad("step_size", "must be >= 0");
        if (!(momentum >= 0)) bad("momentum", "must be >= 0");
        if (!(diversity_prob >= 0 && diversity_prob <= 1)) bad("diversity_prob", "must lie in [0,1]");
        if (init_noise && !(*init_noise >= 0)) bad("init_noise", "must be >= 0");
        if (nrdm_step && !(*nrdm_step >= 0)) bad("nrdm_step", "must be >= 0");
        if (!(pixel_min < pixel_max)) bad("pixel_min", "must be below pixel_max");
    }

    double alpha() const { return step_size.value_or(epsilon / static_cast<double>(steps)); }
    double rfgsm_alpha() const { return step_size.value_or(epsilon / 3.0); }
    double noise() const { return init_noise.value_or(epsilon / 2.0); }
    double nrdm_alpha() const { return nrdm_step.value_or(epsilon); }
};

struct AttackResult {
    Tensor adversarial;
    std::vector<double> nrd_trace;       ///< mean NRD after each iteration
    std::vector<double> max_deviation;   ///< max |x' - x| after each iteration
    std::size_t iterations = 0;
    std::vector<std::uint8_t> zero_gradient;  ///< per sample: some step saw an all-zero gradient
    bool degenerate = false;             ///< NRDM started at x with zero loss and never moved
};

/// Optional hooks. `nrd_probe` replaces the default NRD trace (source-model tap)
/// with any other measurement of the current iterate.
struct AttackOptions {
    bool trace_nrd = true;
    std::function<double(const Tensor&)> nrd_probe;
};

/// Clip to [x_ref - eps, x_ref + eps], then to [pixel_min, pixel_max].
inline Tensor project_linf(const Tensor& x_adv, const Tensor& x_ref, double epsilon, double pixel_min,
                           double pixel_max) {
    if (x_adv.shape() != x_ref.shape())
        throw ShapeError("project_linf: shape mismatch " + to_string(x_adv.shape()) + " vs " +
                         to_string(x_ref.shape()));
    Tensor out = x_adv;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double ref = x_ref[i];
        double v = std::clamp(static_cast<double>(out[i]), ref - epsilon, ref + epsilon);
        v = std::clamp(v, pixel_min, pixel_max);
        out[i] = static_cast<float>(v);
    }
    return out;
}

/// Resize-and-pad draws for a batch: each sample is transformed with
/// probability p to a random extent in [0.85 H, H] at a random offset.
inline std::vector<ResizePlacement> diverse_placements(std::size_t n, std::size_t extent, double p, Rng& rng) {
    const auto smallest = static_cast<std::size_t>(std::ceil(0.85 * static_cast<double>(extent)));
    std::vector<ResizePlacement> out(n);
    for (auto& pl : out) {
        if (!rng.bernoulli(p)) continue;
        pl.active = true;
        pl.size = smallest + rng.below(extent - smallest + 1);
        pl.top = rng.below(extent - pl.size + 1);
        pl.left = rng.below(extent - pl.size + 1);
    }
    return out;
}

inline Tensor diverse_input(const Tensor& x, double p, Rng& rng) {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("diverse_input: p must lie in [0,1]");
    if (x.rank() != 4 || x.dim(2) != x.dim(3)) throw ShapeError("diverse_input expects square [N,C,H,W] images");
    const auto placements = diverse_placements(x.dim(0), x.dim(2), p, rng);
    Tape<float> tape;
    return tape.value(resize_pad(tape, tape.constant(x), std::span<const ResizePlacement>(placements)));
}

/// Accumulated l1-normalised gradient, kept in double.
struct MomentumState {
    std::vector<double> g;
};

namespace detail {

struct Gradient {
    Tensor grad;
    double loss = 0.0;
};

/// d(loss)/dx at x, optionally through a resize-and-pad transform.
template <TappedClassifier M, class Loss>
Gradient input_gradient(const M& model, const Tensor& x, const std::vector<ResizePlacement>* placements,
                        Loss&& loss) {
    Tape<float> tape;
    const Var v = tape.variable(x);
    Var in = v;
    if (placements) in = resize_pad(tape, v, std::span<const ResizePlacement>(*placements));
    const auto fw = model.forward_with_tap(tape, in);
    const Var l = loss(tape, fw);
    tape.backward(l);
    return {tape.grad(v), static_cast<double>(tape.value(l).item())};
}

template <TappedClassifier M>
Tensor tap_of(const M& model, const Tensor& x) {
    Tape<float> tape;
    return tape.value(model.forward_with_tap(tape, tape.constant(x)).tap);
}

inline double mean_squared(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("NRD: tap shape mismatch");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

inline double sign_of(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

inline std::size_t per_sample(const Tensor& x) { return x.size() / x.dim(0); }

inline bool all_zero(std::span<const float> g) {
    return std::all_of(g.begin(), g.end(), [](float v) { return v == 0.0f; });
}

inline void flag_zero_gradients(const Tensor& grad, std::vector<std::uint8_t>& flags) {
    const std::size_t d = per_sample(grad);
    for (std::size_t b = 0; b < grad.dim(0); ++b)
        if (all_zero(grad.data().subspan(b * d, d))) flags[b] = 1;
}

/// x' + step * sign(direction), projected.
inline Tensor sign_step(const Tensor& x_adv, std::span<const double> direction, double step, const Tensor& x,
                        const AttackConfig& cfg) {
    Tensor next = x_adv;
    for (std::size_t i = 0; i < next.size(); ++i)
        next[i] = static_cast<float>(static_cast<double>(next[i]) + step * sign_of(direction[i]));
    return project_linf(next, x, cfg.epsilon, cfg.pixel_min, cfg.pixel_max);
}

inline std::vector<double> widen(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// g <- mu g + grad / ||grad||_1 per sample. Samples with zero norm keep g and
/// get a zero direction so they do not move this step.
inline std::vector<double> momentum_update(MomentumState& state, const Tensor& grad, double mu) {
    const std::size_t n = grad.dim(0), d = per_sample(grad);
    if (state.g.empty()) state.g.assign(grad.size(), 0.0);
    std::vector<double> direction(grad.size(), 0.0);
    for (std::size_t b = 0; b < n; ++b) {
        double norm = 0;
        for (std::size_t i = b * d; i < (b + 1) * d; ++i) norm += std::abs(static_cast<double>(grad[i]));
        if (norm == 0) continue;
        for (std::size_t i = b * d; i < (b + 1) * d; ++i) {
            state.g[i] = mu * state.g[i] + static_cast<double>(grad[i]) / norm;
            direction[i] = state.g[i];
        }
    }
    return direction;
}

inline double max_deviation(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

/// Shared per-iteration bookkeeping: deviation and NRD traces.
template <TappedClassifier M>
class Tracer {
public:
    Tracer(const M& model, const Tensor& x, const AttackOptions& opt) : model_(model), x_(x), opt_(opt) {
        if (opt_.trace_nrd && !opt_.nrd_probe) ref_tap_ = tap_of(model_, x_);
    }
    // Reuses an already computed reference tap.
    Tracer(const M& model, const Tensor& x, const AttackOptions& opt, Tensor ref_tap)
        : model_(model), x_(x), opt_(opt), ref_tap_(std::move(ref_tap)) {}

    void record(AttackResult& r, const Tensor& x_adv) const {
        r.max_deviation.push_back(max_deviation(x_adv, x_));
        if (!opt_.trace_nrd) return;
        r.nrd_trace.push_back(opt_.nrd_probe ? opt_.nrd_probe(x_adv) : mean_squared(tap_of(model_, x_adv), ref_tap_));
    }

private:
    const M& model_;
    const Tensor& x_;
    const AttackOptions& opt_;
    Tensor ref_tap_;
};

inline auto cross_entropy_loss(std::span<const int> labels) {
    return [labels](Tape<float>& tape, const ForwardOutput& fw) { return softmax_cross_entropy(tape, fw.logits, labels); };
}

inline void check_batch(const Tensor& x, std::span<const int> labels) {
    if (x.rank() != 4) throw ShapeError("attack input must be [N,C,H,W], got " + to_string(x.shape()));
    if (labels.size() != x.dim(0)) throw ShapeError("attack: label count does not match batch size");
}

inline AttackResult start(const Tensor& x) {
    AttackResult r;
    r.adversarial = x;
    r.zero_gradient.assign(x.dim(0), 0);
    return r;
}

/// Shared body of ifgsm, mifgsm and dim.
template <TappedClassifier M>
AttackResult iterative_ce(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                          double alpha, bool momentum, double p, const AttackOptions& opt) {
    cfg.validate();
    check_batch(x, labels);
    AttackResult r = start(x);
    Tracer<M> trace(model, x, opt);
    Rng rng(cfg.seed);
    MomentumState state;
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        std::optional<std::vector<ResizePlacement>> pl;
        if (p > 0) pl = diverse_placements(x.dim(0), x.dim(2), p, rng);
        const auto g = input_gradient(model, r.adversarial, pl ? &*pl : nullptr, cross_entropy_loss(labels));
        flag_zero_gradients(g.grad, r.zero_gradient);
        const auto dir = momentum ? momentum_update(state, g.grad, cfg.momentum) : widen(g.grad);
        r.adversarial = sign_step(r.adversarial, dir, alpha, x, cfg);
        ++r.iterations;
        trace.record(r, r.adversarial);
    }
    return r;
}

/// Shared body of nrdm and nrdm_dim.
template <TappedClassifier M>
AttackResult nrdm_impl(const M& model, const Tensor& x, const AttackConfig& cfg, bool momentum, double p,
                       const AttackOptions& opt) {
    cfg.validate();
    if (x.rank() != 4) throw ShapeError("attack input must be [N,C,H,W], got " + to_string(x.shape()));
    AttackResult r = start(x);
    const Tensor ref = tap_of(model, x);
    Tracer<M> trace(model, x, opt, ref);
    Rng rng(cfg.seed);

    const double noise = cfg.noise();
    Tensor start_point = x;
    for (auto& v : start_point.data()) v = static_cast<float>(static_cast<double>(v) + rng.uniform(-noise, noise));
    r.adversarial = project_linf(start_point, x, cfg.epsilon, cfg.pixel_min, cfg.pixel_max);

    auto loss = [&ref, &cfg](Tape<float>& tape, const ForwardOutput& fw) {
        const Var target = tape.constant(ref);
        return cfg.distortion == Distortion::mse ? mse(tape, fw.tap, target) : l2_distance(tape, fw.tap, target);
    };
    bool moved = r.adversarial != x;
    MomentumState state;
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        std::optional<std::vector<ResizePlacement>> pl;
        if (p > 0) pl = diverse_placements(x.dim(0), x.dim(2), p, rng);
        const auto g = input_gradient(model, r.adversarial, pl ? &*pl : nullptr, loss);
        flag_zero_gradients(g.grad, r.zero_gradient);
        const auto dir = momentum ? momentum_update(state, g.grad, cfg.momentum) : widen(g.grad);
        r.adversarial = sign_step(r.adversarial, dir, cfg.nrdm_alpha(), x, cfg);
        moved = moved || r.adversarial != x;
        ++r.iterations;
        trace.record(r, r.adversarial);
    }
    r.degenerate = !moved;
    return r;
}

}  // namespace detail

/// Identity attack: the clean batch, for no-attack baselines.
template <TappedClassifier M>
AttackResult no_attack(const M& model, const Tensor& x, const AttackConfig& cfg, const AttackOptions& opt = {}) {
    cfg.validate();
    AttackResult r = detail::start(x);
    detail::Tracer<M>(model, x, opt).record(r, x);
    return r;
}

/// One step of size eps along sign(grad J(x, y)).
template <TappedClassifier M>
AttackResult fgsm(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                  const AttackOptions& opt = {}) {
    cfg.validate();
    detail::check_batch(x, labels);
    AttackResult r = detail::start(x);
    const auto g = detail::input_gradient(model, x, nullptr, detail::cross_entropy_loss(labels));
    detail::flag_zero_gradients(g.grad, r.zero_gradient);
    r.adversarial = detail::sign_step(x, detail::widen(g.grad), cfg.epsilon, x, cfg);
    r.iterations = 1;
    detail::Tracer<M>(model, x, opt).record(r, r.adversarial);
    return r;
}

/// Random sign step of size alpha, then a gradient sign step of eps - alpha.
template <TappedClassifier M>
AttackResult rfgsm(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                   const AttackOptions& opt = {}) {
    cfg.validate();
    detail::check_batch(x, labels);
    const double alpha = cfg.rfgsm_alpha();
    if (alpha > cfg.epsilon) throw std::invalid_argument("attack.step_size: rfgsm needs alpha <= epsilon");
    AttackResult r = detail::start(x);
    Rng rng(cfg.seed);
    std::vector<double> eta(x.size());
    for (auto& v : eta) v = rng.normal();
    const Tensor x1 = detail::sign_step(x, eta, alpha, x, cfg);
    const auto g = detail::input_gradient(model, x1, nullptr, detail::cross_entropy_loss(labels));
    detail::flag_zero_gradients(g.grad, r.zero_gradient);
    r.adversarial = detail::sign_step(x1, detail::widen(g.grad), cfg.epsilon - alpha, x, cfg);
    r.iterations = 1;
    detail::Tracer<M>(model, x, opt).record(r, r.adversarial);
    return r;
}

/// T projected sign steps of size alpha.
template <TappedClassifier M>
AttackResult ifgsm(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                   const AttackOptions& opt = {}) {
    return detail::iterative_ce(model, x, labels, cfg, cfg.alpha(), false, 0.0, opt);
}

/// I-FGSM stepping along the sign of the accumulated l1-normalised gradient.
template <TappedClassifier M>
AttackResult mifgsm(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                    const AttackOptions& opt = {}) {
    return detail::iterative_ce(model, x, labels, cfg, cfg.alpha(), true, 0.0, opt);
}

/// MI-FGSM with each gradient taken at a randomly resized-and-padded iterate.
template <TappedClassifier M>
AttackResult dim(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                 const AttackOptions& opt = {}) {
    return detail::iterative_ce(model, x, labels, cfg, cfg.alpha(), true, cfg.diversity_prob, opt);
}

/// Label-free ascent of the tap distortion from a noisy start, with full
/// budget sign steps.
template <TappedClassifier M>
AttackResult nrdm(const M& model, const Tensor& x, const AttackConfig& cfg, const AttackOptions& opt = {}) {
    return detail::nrdm_impl(model, x, cfg, false, 0.0, opt);
}

/// NRDM with input diversity and momentum.
template <TappedClassifier M>
AttackResult nrdm_dim(const M& model, const Tensor& x, const AttackConfig& cfg, const AttackOptions& opt = {}) {
    return detail::nrdm_impl(model, x, cfg, true, cfg.diversity_prob, opt);
}

template <TappedClassifier M>
AttackResult run_attack(AttackKind kind, const M& model, const Tensor& x, std::span<const int> labels,
                        const AttackConfig& cfg, const AttackOptions& opt = {}) {
    switch (kind) {
        case AttackKind::none: return no_attack(model, x, cfg, opt);
        case AttackKind::fgsm: return fgsm(model, x, labels, cfg, opt);
        case AttackKind::rfgsm: return rfgsm(model, x, labels, cfg, opt);
        case AttackKind::ifgsm: return ifgsm(model, x, labels, cfg, opt);
        case AttackKind::mifgsm: return mifgsm(model, x, labels, cfg, opt);
        case AttackKind::dim: return dim(model, x, labels, cfg, opt);
        case AttackKind::nrdm: return nrdm(model, x, cfg, opt);
        case AttackKind::nrdm_dim: return nrdm_dim(model, x, cfg, opt);
    }
    throw std::invalid_argument("unhandled attack kind");
}

}  // namespace nrdm

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nrdm/checkpoint.hpp"
#include "nrdm/datasets.hpp"
#include "nrdm/models.hpp"
#include "nrdm/ops.hpp"
#include "nrdm/random.hpp"

namespace nrdm {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<std::size_t> lr_milestones;  ///< epochs at which lr is multiplied by lr_decay
    double lr_decay = 0.1;
    bool augment = false;                    ///< random crop (zero pad 4) + horizontal flip
    std::size_t max_batches_per_epoch = 0;   ///< 0 = full epoch; >0 = subsampled-epoch mode
    std::uint64_t seed = 0;
};

/// Logits for every image, computed in inference mode in batches.
template <TappedClassifier M>
Tensor predict_logits(const M& model, const Tensor& images, std::size_t batch = 256) {
    const std::size_t n = images.dim(0);
    std::vector<float> out;
    std::size_t classes = 0;
    for (std::size_t first = 0; first < n; first += batch) {
        const std::size_t count = std::min(batch, n - first);
        Tape<float> tape;
        const auto fw = model.forward_with_tap(tape, tape.constant(images.slice(first, count)));
        const auto& logits = tape.value(fw.logits);
        classes = logits.dim(1);
        out.insert(out.end(), logits.data().begin(), logits.data().end());
    }
    return Tensor(Shape{n, classes}, std::move(out));
}

/// True if `label` is among the k largest entries of `row`; ties rank the
/// lower class index first.
inline bool in_top_k(std::span<const float> row, int label, std::size_t k) {
    const float target = row[static_cast<std::size_t>(label)];
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] > target || (row[j] == target && j < static_cast<std::size_t>(label))) ++ahead;
    return ahead < k;
}

/// Fraction of rows whose label is among the top-k logits.
inline double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k) {
    if (k == 0) throw std::invalid_argument("top-k needs k >= 1");
    const std::size_t n = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != n) throw ShapeError("topk_accuracy: label count mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i)
        hits += in_top_k(logits.data().subspan(i * classes, classes), labels[i], k);
    return static_cast<double>(hits) / static_cast<double>(n);
}

template <TappedClassifier M>
double evaluate_topk(const M& model, const Dataset& data, std::size_t k) {
    if (k != 1 && k != 5) throw std::invalid_argument("evaluate_topk supports k = 1 or 5");
    return topk_accuracy(predict_logits(model, data.images), data.labels, k);
}

namespace detail {

/// Random crop from a zero-padded copy plus a coin-flip mirror, in place.
inline void augment_batch(Tensor& batch, Rng& rng, std::size_t pad = 4) {
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<float> plane(h * w);
    for (std::size_t b = 0; b < n; ++b) {
        const auto dy = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
        const auto dx = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
        const bool flip = rng.bernoulli(0.5);
        for (std::size_t ch = 0; ch < c; ++ch) {
            float* img = batch.raw() + (b * c + ch) * h * w;
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const auto si = static_cast<std::ptrdiff_t>(i) + dy;
                    const std::size_t jj = flip ? w - 1 - j : j;
                    const auto sj = static_cast<std::ptrdiff_t>(jj) + dx;
                    const bool inside = si >= 0 && si < static_cast<std::ptrdiff_t>(h) && sj >= 0 &&
                                        sj < static_cast<std::ptrdiff_t>(w);
                    plane[i * w + j] = inside ? img[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)] : 0.f;
                }
            std::copy(plane.begin(), plane.end(), img);
        }
    }
}

}  // namespace detail

/// Optimizer state that survives between epochs.
struct TrainState {
    std::size_t next_epoch = 0;
    std::vector<Tensor> velocity;  ///< one per parameter
};

struct EpochReport {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
    double learning_rate = 0.0;
};

inline double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
    double lr = cfg.learning_rate;
    for (std::size_t m : cfg.lr_milestones)
        if (epoch >= m) lr *= cfg.lr_decay;
    return lr;
}

/// Runs epochs [state.next_epoch, cfg.epochs) of momentum SGD. The sample
/// order of each epoch depends only on (seed, epoch), so an interrupted run
/// resumed from its TrainState retraces the uninterrupted one.
inline void train_epochs(Model& model, const Dataset& train_set, const TrainConfig& cfg, TrainState& state,
                         const std::function<void(const EpochReport&, const TrainState&)>& on_epoch = {}) {
    if (cfg.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    auto params = model.parameters();
    if (state.velocity.empty())
        for (const auto& p : params) state.velocity.emplace_back(p.value.shape());
    const std::size_t n = train_set.size();
    std::vector<std::size_t> order(n);
    std::vector<Var> pv;
    for (std::size_t epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = Rng(cfg.seed).fork(epoch);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        const double lr = learning_rate_at(cfg, epoch);
        std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
        if (cfg.max_batches_per_epoch) batches = std::min(batches, cfg.max_batches_per_epoch);
        double loss_sum = 0;
        std::size_t seen = 0, correct = 0;
        for (std::size_t bi = 0; bi < batches; ++bi) {
            const std::size_t first = bi * cfg.batch_size, count = std::min(cfg.batch_size, n - first);
            const std::span<const std::size_t> idx(order.data() + first, count);
            Tensor x = gather_rows(train_set.images, idx);
            if (cfg.augment) detail::augment_batch(x, rng);
            std::vector<int> y(count);
            for (std::size_t i = 0; i < count; ++i) y[i] = train_set.labels[idx[i]];

            Tape<float> tape;
            const auto out = model.forward_train(tape, tape.constant(std::move(x)), pv);
            const Var loss = softmax_cross_entropy(tape, out.logits, std::span<const int>(y));
            const float loss_value = tape.value(loss).item();
            if (!std::isfinite(loss_value))
                throw NumericError("training diverged: loss is " + std::to_string(loss_value) + " at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(bi));
            tape.backward(loss);
            const auto& logits = tape.value(out.logits);
            for (std::size_t i = 0; i < count; ++i) correct += in_top_k(logits.data().subspan(i * logits.dim(1), logits.dim(1)), y[i], 1);
            loss_sum += loss_value * static_cast<double>(count);
            seen += count;

            for (std::size_t p = 0; p < params.size(); ++p) {
                const Tensor g = tape.grad(pv[p]);
                auto& w = params[p].value;
                auto& v = state.velocity[p];
                const auto mu = static_cast<float>(cfg.momentum), wd = static_cast<float>(cfg.weight_decay),
                           step = static_cast<float>(lr);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = mu * v[i] + g[i] + wd * w[i];
                    w[i] -= step * v[i];
                }
            }
        }
        state.next_epoch = epoch + 1;
        if (on_epoch)
            on_epoch({epoch, loss_sum / static_cast<double>(seen),
                      static_cast<double>(correct) / static_cast<double>(seen), lr},
                     state);
    }
}

inline constexpr std::string_view train_state_magic = "NRDMTRST";

inline Archive train_state_archive(const Model& model, const TrainState& state, const std::string& config_json) {
    Archive a = checkpoint_archive(model, {});
    a.magic = std::string(train_state_magic);
    auto meta = nlohmann::ordered_json::parse(a.metadata);
    meta["next_epoch"] = state.next_epoch;
    meta["run_config"] = nlohmann::ordered_json::parse(config_json);
    a.metadata = meta.dump(2);
    for (std::size_t i = 0; i < state.velocity.size(); ++i)
        a.tensors.push_back({"velocity." + std::to_string(i), state.velocity[i]});
    return a;
}

inline std::pair<Model, TrainState> train_state_from_archive(Archive a) {
    const auto meta = nlohmann::json::parse(a.metadata);
    TrainState state;
    state.next_epoch = meta.at("next_epoch").get<std::size_t>();
    std::vector<NamedTensor> rest;
    for (auto& t : a.tensors) {
        if (t.name.starts_with("velocity.")) state.velocity.push_back(std::move(t.value));
        else rest.push_back(std::move(t));
    }
    a.tensors = std::move(rest);
    a.magic = std::string(checkpoint_magic);
    return {checkpoint_from_archive(a).model, std::move(state)};
}

}  // namespace nrdm

#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "nrdm/archive.hpp"
#include "nrdm/attacks.hpp"
#include "nrdm/datasets.hpp"
#include "nrdm/defenses.hpp"
#include "nrdm/train.hpp"

namespace nrdm {

class BudgetViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BudgetCheck {
    std::size_t violations = 0;
    double max_deviation = 0.0;
};

/// Elementwise check of |x' - x| <= eps + tol and pixel_min <= x' <= pixel_max.
/// Deliberately shares no code with the attacks' projection.
inline BudgetCheck check_budget(const Tensor& x, const Tensor& x_adv, double epsilon, double pixel_min = 0.0,
                                double pixel_max = 255.0, double tolerance = 1e-4) {
    if (x.size() != x_adv.size()) throw ShapeError("budget check: size mismatch");
    BudgetCheck c;
    const float* a = x.raw();
    const float* b = x_adv.raw();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = std::fabs(double(b[i]) - double(a[i]));
        c.max_deviation = std::max(c.max_deviation, d);
        if (!(d <= epsilon + tolerance) || !(b[i] >= pixel_min) || !(b[i] <= pixel_max)) ++c.violations;
    }
    return c;
}

inline void require_budget(const Tensor& x, const Tensor& x_adv, double epsilon, double pixel_min, double pixel_max,
                           const std::string& what) {
    const auto c = check_budget(x, x_adv, epsilon, pixel_min, pixel_max);
    if (c.violations)
        throw BudgetViolation(what + ": " + std::to_string(c.violations) + " pixels outside the eps=" +
                              std::to_string(epsilon) + " box (max deviation " + std::to_string(c.max_deviation) +
                              ")");
}

/// Mean squared difference of tap activations, over all elements of the batch.
template <TappedClassifier M>
double nrd(const M& reference, const Tensor& x, const Tensor& x_adv, std::size_t batch = 250) {
    if (x.shape() != x_adv.shape())
        throw ShapeError("nrd: shape mismatch " + to_string(x.shape()) + " vs " + to_string(x_adv.shape()));
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t first = 0; first < x.dim(0); first += batch) {
        const std::size_t n = std::min(batch, x.dim(0) - first);
        const Tensor a = detail::tap_of(reference, x.slice(first, n));
        const Tensor b = detail::tap_of(reference, x_adv.slice(first, n));
        sum += detail::mean_squared(a, b) * static_cast<double>(a.size());
        count += a.size();
    }
    return sum / static_cast<double>(count);
}

/// Runs job(i) for i in [0, count) on up to `threads` workers. The first
/// exception is rethrown after all workers stop.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count && !failed; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    failed = true;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

struct NamedModel {
    std::string name;
    const Model* model = nullptr;
};

struct HarnessOptions {
    std::size_t batch_size = 100;  ///< attack chunk size
    std::size_t threads = 1;
    std::uint64_t seed = 0;
};

/// Seed of chunk `index` for a run seeded with `seed`.
inline std::uint64_t chunk_seed(std::uint64_t seed, std::size_t index) { return Rng(seed).fork(index).next(); }

struct GeneratedBatch {
    Tensor adversarial;
    std::vector<double> nrd_trace;      ///< sample-weighted mean over chunks
    std::vector<double> max_deviation;  ///< max over chunks
    std::size_t iterations = 0;
    std::size_t zero_gradient_samples = 0;
    bool degenerate = false;
};

/// Attacks `images` in fixed chunks (deterministic for any thread count) and
/// verifies the budget of the whole batch.
template <TappedClassifier M>
GeneratedBatch generate_adversarial(AttackKind kind, const M& source, const Tensor& images,
                                    std::span<const int> labels, AttackConfig cfg, const HarnessOptions& opt,
                                    const AttackOptions& aopt = {}) {
    const std::size_t n = images.dim(0), bs = std::max<std::size_t>(1, opt.batch_size);
    const std::size_t chunks = (n + bs - 1) / bs;
    std::vector<AttackResult> parts(chunks);
    parallel_for(chunks, opt.threads, [&](std::size_t c) {
        AttackConfig local = cfg;
        local.seed = chunk_seed(opt.seed, c);
        const std::size_t first = c * bs, count = std::min(bs, n - first);
        parts[c] = run_attack(kind, source, images.slice(first, count), labels.subspan(first, count), local, aopt);
    });
    GeneratedBatch g;
    std::vector<float> data;
    data.reserve(images.size());
    for (std::size_t c = 0; c < chunks; ++c) {
        const auto& p = parts[c];
        data.insert(data.end(), p.adversarial.data().begin(), p.adversarial.data().end());
        const double w = static_cast<double>(p.adversarial.dim(0)) / static_cast<double>(n);
        if (g.nrd_trace.size() < p.nrd_trace.size()) g.nrd_trace.resize(p.nrd_trace.size(), 0.0);
        for (std::size_t t = 0; t < p.nrd_trace.size(); ++t) g.nrd_trace[t] += w * p.nrd_trace[t];
        if (g.max_deviation.size() < p.max_deviation.size()) g.max_deviation.resize(p.max_deviation.size(), 0.0);
        for (std::size_t t = 0; t < p.max_deviation.size(); ++t)
            g.max_deviation[t] = std::max(g.max_deviation[t], p.max_deviation[t]);
        g.iterations = p.iterations;
        g.zero_gradient_samples += static_cast<std::size_t>(std::count(p.zero_gradient.begin(), p.zero_gradient.end(), 1));
        g.degenerate = g.degenerate || p.degenerate;
    }
    g.adversarial = Tensor(images.shape(), std::move(data));
    require_budget(images, g.adversarial, cfg.epsilon, cfg.pixel_min, cfg.pixel_max,
                   std::string(attack_name(kind)) + " adversarial batch");
    return g;
}

struct TransferCell {
    std::string attack;
    std::string source;
    std::string target;
    std::string defense = "none";
    double top1 = 0.0;
    double top5 = 0.0;
    double nrd = 0.0;
    std::size_t n = 0;
    bool whitebox = false;

    bool operator==(const TransferCell&) const = default;
};

struct NRDCurve {
    std::string attack;
    std::string source;
    std::string target;
    std::vector<std::size_t> iterations;
    std::vector<double> nrd;
    std::vector<double> top1;

    bool operator==(const NRDCurve&) const = default;
};

/// Returns the attack config to use for `kind` (budget, steps, ...).
using AttackResolver = std::function<AttackConfig(AttackKind)>;

/// Adversaries are generated once per (attack, source) and evaluated on every
/// target under every defense. `defenses` should include a none entry to get
/// undefended cells.
inline std::vector<TransferCell> run_transfer_matrix(std::span<const AttackKind> attacks,
                                                     std::span<const NamedModel> sources,
                                                     std::span<const NamedModel> targets,
                                                     std::span<const DefenseConfig> defenses, const Dataset& data,
                                                     const AttackResolver& resolve, const HarnessOptions& opt) {
    for (const auto& m : sources)
        if (!m.model) throw std::invalid_argument("transfer matrix: source model '" + m.name + "' is missing");
    for (const auto& m : targets)
        if (!m.model) throw std::invalid_argument("transfer matrix: target model '" + m.name + "' is missing");
    for (const auto& d : defenses) d.validate();

    std::vector<TransferCell> cells;
    for (AttackKind kind : attacks)
        for (const auto& src : sources) {
            const AttackConfig cfg = resolve(kind);
            AttackOptions aopt;
            aopt.trace_nrd = false;
            const auto gen = generate_adversarial(kind, *src.model, data.images, data.labels, cfg, opt, aopt);
            const double mean_nrd = nrd(*src.model, data.images, gen.adversarial);
            for (const auto& d : defenses) {
                const Tensor input = apply_defense(d, gen.adversarial);
                for (const auto& tgt : targets) {
                    const Tensor logits = predict_logits(*tgt.model, input);
                    TransferCell c;
                    c.attack = std::string(attack_name(kind));
                    c.source = src.name;
                    c.target = tgt.name;
                    c.defense = d.label();
                    c.top1 = topk_accuracy(logits, data.labels, 1);
                    c.top5 = topk_accuracy(logits, data.labels, 5);
                    c.nrd = mean_nrd;
                    c.n = data.size();
                    c.whitebox = src.name == tgt.name;
                    cells.push_back(std::move(c));
                }
            }
        }
    return cells;
}

/// Runs the attack separately for each T in `steps` and records the NRD under
/// `reference` and the accuracy of `target`.
inline NRDCurve nrd_vs_iterations(AttackKind kind, const NamedModel& source, const NamedModel& target,
                                  const Model& reference, const Dataset& data, std::span<const std::size_t> steps,
                                  const AttackResolver& resolve, const HarnessOptions& opt) {
    if (steps.empty()) throw std::invalid_argument("curves: T list is empty");
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (steps[i] == 0) throw std::invalid_argument("curves: T must be >= 1");
        if (i && steps[i] <= steps[i - 1]) throw std::invalid_argument("curves: T list must be strictly increasing");
    }
    NRDCurve curve{std::string(attack_name(kind)), source.name, target.name, {}, {}, {}};
    for (std::size_t T : steps) {
        AttackConfig cfg = resolve(kind);
        cfg.steps = T;
        AttackOptions aopt;
        aopt.trace_nrd = false;
        const auto gen = generate_adversarial(kind, *source.model, data.images, data.labels, cfg, opt, aopt);
        curve.iterations.push_back(T);
        curve.nrd.push_back(nrd(reference, data.images, gen.adversarial));
        curve.top1.push_back(topk_accuracy(predict_logits(*target.model, gen.adversarial), data.labels, 1));
    }
    return curve;
}

// ---------------------------------------------------------------- reports

enum class ReportFormat { csv, json, pivot };

inline ReportFormat parse_report_format(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    if (s == "pivot") return ReportFormat::pivot;
    throw std::invalid_argument("unknown report format '" + s + "' (expected csv, json or pivot)");
}

inline constexpr std::string_view cell_csv_header = "attack,source,target,defense,top1,top5,nrd,n,whitebox";
inline constexpr std::string_view curve_csv_header = "attack,source,target,T,nrd,top1";

namespace detail {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    double v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError("bad number '" + s + "' in report");
    return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

inline void check_field(const std::string& s) {
    if (s.find_first_of(",\n\r") != std::string::npos) throw std::invalid_argument("report field '" + s + "' contains a separator");
}

inline std::string provenance_line(const nlohmann::ordered_json& provenance) {
    return provenance.is_null() ? std::string{} : "# " + provenance.dump() + "\n";
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const TransferCell& c) {
    return {{"attack", c.attack}, {"source", c.source}, {"target", c.target}, {"defense", c.defense},
            {"top1", c.top1},     {"top5", c.top5},     {"nrd", c.nrd},       {"n", c.n},
            {"whitebox", c.whitebox}};
}

inline TransferCell cell_from_json(const nlohmann::json& j) {
    TransferCell c;
    c.attack = j.at("attack").get<std::string>();
    c.source = j.at("source").get<std::string>();
    c.target = j.at("target").get<std::string>();
    c.defense = j.at("defense").get<std::string>();
    c.top1 = j.at("top1").get<double>();
    c.top5 = j.at("top5").get<double>();
    c.nrd = j.at("nrd").get<double>();
    c.n = j.at("n").get<std::size_t>();
    c.whitebox = j.at("whitebox").get<bool>();
    return c;
}

/// Report text. CSV may start with a "# {provenance json}" comment line.
inline std::string render_cells(std::span<const TransferCell> cells, ReportFormat format,
                                const nlohmann::ordered_json& provenance = nullptr) {
    using detail::format_double;
    if (format == ReportFormat::json) {
        nlohmann::ordered_json j;
        if (!provenance.is_null()) j["provenance"] = provenance;
        j["cells"] = nlohmann::ordered_json::array();
        for (const auto& c : cells) j["cells"].push_back(to_json(c));
        return j.dump(2) + "\n";
    }
    std::string out = detail::provenance_line(provenance);
    if (format == ReportFormat::csv) {
        out += std::string(cell_csv_header) + "\n";
        for (const auto& c : cells) {
            for (const auto* s : {&c.attack, &c.source, &c.target, &c.defense}) detail::check_field(*s);
            out += c.attack + "," + c.source + "," + c.target + "," + c.defense + "," + format_double(c.top1) + "," +
                   format_double(c.top5) + "," + format_double(c.nrd) + "," + std::to_string(c.n) + "," +
                   (c.whitebox ? "1" : "0") + "\n";
        }
        return out;
    }
    // pivot: one row per (attack, source, defense), a top1/top5 column pair per target
    std::vector<std::string> targets;
    for (const auto& c : cells)
        if (std::find(targets.begin(), targets.end(), c.target) == targets.end()) targets.push_back(c.target);
    out += "attack,source,defense";
    for (const auto& t : targets) out += "," + t + ":top1," + t + ":top5";
    out += "\n";
    std::vector<std::string> done;
    for (const auto& c : cells) {
        const std::string key = c.attack + "," + c.source + "," + c.defense;
        if (std::find(done.begin(), done.end(), key) != done.end()) continue;
        done.push_back(key);
        out += key;
        for (const auto& t : targets) {
            const auto it = std::find_if(cells.begin(), cells.end(), [&](const TransferCell& o) {
                return o.attack == c.attack && o.source == c.source && o.defense == c.defense && o.target == t;
            });
            out += it == cells.end() ? ",," : "," + format_double(it->top1) + "," + format_double(it->top5);
        }
        out += "\n";
    }
    return out;
}

inline std::string render_curves(std::span<const NRDCurve> curves, const nlohmann::ordered_json& provenance = nullptr) {
    std::string out = detail::provenance_line(provenance);
    out += std::string(curve_csv_header) + "\n";
    for (const auto& c : curves) {
        if (c.iterations.size() != c.nrd.size() || c.nrd.size() != c.top1.size())
            throw std::invalid_argument("curve '" + c.attack + "' has mismatched lengths");
        for (std::size_t i = 0; i < c.iterations.size(); ++i)
            out += c.attack + "," + c.source + "," + c.target + "," + std::to_string(c.iterations[i]) + "," +
                   detail::format_double(c.nrd[i]) + "," + detail::format_double(c.top1[i]) + "\n";
    }
    return out;
}

inline void emit_report(std::span<const TransferCell> cells, const std::filesystem::path& path, ReportFormat format,
                        const nlohmann::ordered_json& provenance = nullptr) {
    write_file_atomic(path, render_cells(cells, format, provenance));
}

inline void emit_report(std::span<const NRDCurve> curves, const std::filesystem::path& path,
                        const nlohmann::ordered_json& provenance = nullptr) {
    write_file_atomic(path, render_curves(curves, provenance));
}

struct CellReport {
    nlohmann::ordered_json provenance;  ///< null when absent
    std::vector<TransferCell> cells;
};

/// Parses CSV or JSON cell reports written by emit_report.
inline CellReport parse_cell_report(const std::string& text) {
    CellReport r;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        const auto j = nlohmann::ordered_json::parse(text);
        if (j.contains("provenance")) r.provenance = j.at("provenance");
        for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
        return r;
    }
    std::istringstream in(text);
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.starts_with("# ")) {
            r.provenance = nlohmann::ordered_json::parse(line.substr(2));
            continue;
        }
        if (!header) {
            if (line != cell_csv_header) throw FormatError("unexpected report header '" + line + "'");
            header = true;
            continue;
        }
        const auto f = detail::split_csv(line);
        if (f.size() != 9) throw FormatError("report row has " + std::to_string(f.size()) + " fields, expected 9");
        TransferCell c{f[0], f[1], f[2], f[3], detail::parse_double(f[4]), detail::parse_double(f[5]),
                       detail::parse_double(f[6]), static_cast<std::size_t>(std::stoull(f[7])), f[8] == "1"};
        r.cells.push_back(std::move(c));
    }
    if (!header) throw FormatError("report has no header");
    return r;
}

struct CurveReport {
    nlohmann::ordered_json provenance;
    std::vector<NRDCurve> curves;
};

inline CurveReport parse_curve_report(const std::string& text) {
    CurveReport r;
    std::istringstream in(text);
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.starts_with("# ")) {
            r.provenance = nlohmann::ordered_json::parse(line.substr(2));
            continue;
        }
        if (!header) {
            if (line != curve_csv_header) throw FormatError("unexpected curve header '" + line + "'");
            header = true;
            continue;
        }
        const auto f = detail::split_csv(line);
        if (f.size() != 6) throw FormatError("curve row has " + std::to_string(f.size()) + " fields, expected 6");
        if (r.curves.empty() || r.curves.back().attack != f[0] || r.curves.back().source != f[1] ||
            r.curves.back().target != f[2])
            r.curves.push_back({f[0], f[1], f[2], {}, {}, {}});
        auto& c = r.curves.back();
        c.iterations.push_back(static_cast<std::size_t>(std::stoull(f[3])));
        c.nrd.push_back(detail::parse_double(f[4]));
        c.top1.push_back(detail::parse_double(f[5]));
    }
    if (!header) throw FormatError("curve report has no header");
    return r;
}

}  // namespace nrdm

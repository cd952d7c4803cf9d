#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "nrdm/datasets.hpp"
#include "nrdm/defenses.hpp"
#include "support.hpp"

using namespace nrdm;
using namespace nrdm::testing;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
    return s / static_cast<double>(a.size());
}

bool valid_pixels(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return v >= 0 && v <= 255; });
}

/// Sort-based sliding median with mirrored borders (a b | b a), written
/// independently of the library.
Tensor naive_median(const Tensor& img, int window) {
    const int c = static_cast<int>(img.dim(0)), h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
    auto mirror = [](int i, int n) {
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
        return i;
    };
    Tensor out(img.shape());
    const int r = window / 2;
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                std::vector<float> v;
                for (int di = -r; di <= r; ++di)
                    for (int dj = -r; dj <= r; ++dj)
                        v.push_back(img[(ch * h + mirror(i + di, h)) * w + mirror(j + dj, w)]);
                std::sort(v.begin(), v.end());
                out[(ch * h + i) * w + j] = v[v.size() / 2];
            }
    return out;
}

/// Reference minimiser of ||u - f||^2 + lambda TV(u) on [0,1]-scaled pixels,
/// by the primal-dual method of Chambolle and Pock run to convergence.
std::vector<double> tv_reference(const std::vector<double>& f, std::size_t h, std::size_t w, double lambda) {
    const std::size_t n = h * w;
    std::vector<double> u = f, ubar = f, qx(n, 0.0), qy(n, 0.0);
    const double tau = 0.35, sigma = 0.35;
    for (int it = 0; it < 20000; ++it) {
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t k = i * w + j;
                double ax = qx[k] + sigma * (j + 1 < w ? ubar[k + 1] - ubar[k] : 0.0);
                double ay = qy[k] + sigma * (i + 1 < h ? ubar[k + w] - ubar[k] : 0.0);
                const double norm = std::hypot(ax, ay);
                const double s = norm > lambda ? lambda / norm : 1.0;
                qx[k] = ax * s;
                qy[k] = ay * s;
            }
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t k = i * w + j;
                double div = 0;
                if (j + 1 < w) div += qx[k];
                if (j > 0) div -= qx[k - 1];
                if (i + 1 < h) div += qy[k];
                if (i > 0) div -= qy[k - w];
                const double v = u[k] + tau * div;
                const double next = (v + 2 * tau * f[k]) / (1 + 2 * tau);
                ubar[k] = 2 * next - u[k];
                u[k] = next;
            }
    }
    return u;
}

}  // namespace

TEST(DefenseConfig, LabelsAndValidation) {
    DefenseConfig d;
    EXPECT_EQ(d.label(), "none");
    d.kind = DefenseKind::jpeg;
    EXPECT_EQ(d.label(), "jpeg:75");
    d.quality = 0;
    EXPECT_THROW(d.validate(), std::invalid_argument);
    d = {DefenseKind::tvm};
    EXPECT_EQ(d.label(), "tvm:30");
    d.weight = -1;
    EXPECT_THROW(d.validate(), std::invalid_argument);
    d = {DefenseKind::median};
    EXPECT_EQ(d.label(), "median:3");
    d.window = 4;
    EXPECT_THROW(d.validate(), std::invalid_argument);
    for (auto k : {DefenseKind::none, DefenseKind::jpeg, DefenseKind::tvm, DefenseKind::median})
        EXPECT_EQ(parse_defense_kind(defense_kind_name(k)), k);
    EXPECT_THROW(parse_defense_kind("blur"), std::invalid_argument);
}

TEST(Jpeg, QualityHundredGrayscaleWithinTwoLevels) {
    Rng rng(1);
    double worst = 0;
    for (int i = 0; i < 200; ++i) {
        const std::size_t h = 5 + rng.below(28), w = 5 + rng.below(28);
        const Tensor img = random_pixels({1, h, w}, rng);
        worst = std::max(worst, max_abs_diff(jpeg_roundtrip(img, 100), img));
    }
    EXPECT_LE(worst, 2.0);
}

TEST(Jpeg, QualityHundredOnMnistWithinTwoLevels) {
    const std::filesystem::path dir = "/root/data/mnist";
    if (!std::filesystem::exists(dir)) GTEST_SKIP() << "MNIST not present";
    const auto d = load_dataset("mnist", dir, "test");
    double worst = 0;
    for (std::size_t i = 0; i < 500; ++i) {
        const Tensor img = d.images.slice(i, 1).reshaped({1, 28, 28});
        worst = std::max(worst, max_abs_diff(jpeg_roundtrip(img, 100), img));
    }
    EXPECT_LE(worst, 2.0);
}

// Colour images also pass through a YCbCr round trip; at q=100 the chroma
// rounding is amplified by the inverse colour transform, so the bound is
// looser than for grayscale.
TEST(Jpeg, QualityHundredRgbStaysClose) {
    Rng rng(2);
    double worst = 0, mean = 0;
    for (int i = 0; i < 50; ++i) {
        const Tensor img = random_pixels({3, 32, 32}, rng);
        const Tensor out = jpeg_roundtrip(img, 100);
        worst = std::max(worst, max_abs_diff(out, img));
        mean += mean_abs_diff(out, img) / 50;
    }
    EXPECT_LE(worst, 4.0);
    EXPECT_LT(mean, 1.0);
}

TEST(Jpeg, ConstantImageStaysFlat) {
    for (float v : {0.0f, 17.0f, 128.0f, 255.0f})
        for (int q : {20, 50, 75, 100})
            for (std::size_t c : {1u, 3u}) {
                const Tensor img({c, 13, 21}, std::vector<float>(c * 13 * 21, v));
                const Tensor out = jpeg_roundtrip(img, q);
                // Still flat; coarse DC quantisation may shift the level slightly.
                EXPECT_TRUE(std::all_of(out.data().begin(), out.data().end(), [&](float p) { return p == out[0]; }));
                EXPECT_LE(std::abs(out[0] - v), q >= 75 ? 0.0f : 3.0f) << v << " q=" << q << " c=" << c;
            }
}

TEST(Jpeg, LowerQualityLosesMore) {
    Rng rng(3);
    const Tensor img = random_pixels({3, 32, 32}, rng);
    double prev = 0;
    for (int q : {95, 75, 50, 20, 5}) {
        const Tensor out = jpeg_roundtrip(img, q);
        EXPECT_TRUE(valid_pixels(out));
        EXPECT_EQ(out.shape(), img.shape());
        for (float v : out.data()) EXPECT_EQ(v, std::round(v));
        const double d = mean_abs_diff(out, img);
        EXPECT_GT(d, prev) << q;
        prev = d;
    }
}

TEST(Jpeg, RejectsBadInput) {
    EXPECT_THROW(jpeg_roundtrip(Tensor({1, 8, 8}), 0), std::invalid_argument);
    EXPECT_THROW(jpeg_roundtrip(Tensor({1, 8, 8}), 101), std::invalid_argument);
    EXPECT_THROW(jpeg_roundtrip(Tensor({2, 8, 8}), 50), ShapeError);
    EXPECT_THROW(jpeg_roundtrip(Tensor({8, 8}), 50), ShapeError);
}

TEST(Median, CentreOfOneToNine) {
    const Tensor img({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    EXPECT_EQ(median_filter(img, 3)[4], 5.0f);
}

TEST(Median, ReflectIndex) {
    EXPECT_EQ(reflect_index(-1, 5), 0u);
    EXPECT_EQ(reflect_index(-2, 5), 1u);
    EXPECT_EQ(reflect_index(5, 5), 4u);
    EXPECT_EQ(reflect_index(6, 5), 3u);
    EXPECT_EQ(reflect_index(2, 5), 2u);
    EXPECT_EQ(reflect_index(-3, 2), 1u);
}

TEST(Median, MatchesNaiveSortOracle) {
    Rng rng(4);
    for (int i = 0; i < 150; ++i) {
        const std::size_t c = rng.bernoulli(0.5) ? 1 : 3;
        const int window = 3 + 2 * static_cast<int>(rng.below(3));
        const Tensor img = random_pixels({c, 2 + rng.below(30), 2 + rng.below(30)}, rng);
        ASSERT_EQ(median_filter(img, window), naive_median(img, window)) << "image " << i << " window " << window;
    }
}

TEST(Median, ConstantImageUnchanged) {
    const Tensor img({3, 9, 7}, std::vector<float>(3 * 9 * 7, 42.0f));
    EXPECT_EQ(median_filter(img, 5), img);
    EXPECT_THROW(median_filter(img, 2), std::invalid_argument);
}

TEST(Tvm, ConstantImageUnchanged) {
    for (float v : {0.0f, 90.0f, 255.0f}) {
        const Tensor img({3, 8, 8}, std::vector<float>(3 * 64, v));
        EXPECT_LE(max_abs_diff(tvm_denoise(img, 10), img), 1e-3);
    }
}

TEST(Tvm, HugeWeightIsNearIdentity) {
    Rng rng(5);
    const Tensor img = random_pixels({1, 28, 28}, rng);
    EXPECT_LE(max_abs_diff(tvm_denoise(img, 1e6), img), 1e-3);
}

TEST(Tvm, SmallerWeightSmoothsMore) {
    Rng rng(6);
    const Tensor img = random_pixels({3, 32, 32}, rng);
    const Tensor w10 = tvm_denoise(img, 10), w30 = tvm_denoise(img, 30);
    EXPECT_TRUE(valid_pixels(w10));
    EXPECT_GT(mean_abs_diff(w10, img), mean_abs_diff(w30, img));
}

// A single bright pixel on a dark 4x4 image: the denoised peak falls as
// lambda grows, and matches a converged independent minimiser.
TEST(Tvm, BrightPixelAgainstReferenceMinimiser) {
    for (std::size_t where : {0u, 5u, 10u}) {
        Tensor img({1, 4, 4});
        img[where] = 255.0f;
        std::vector<double> f(16, 0.0);
        f[where] = 1.0;
        double prev_ours = 256, prev_ref = 256;
        for (double weight : {100.0, 30.0, 10.0, 5.0, 3.0, 2.0, 1.0}) {
            const double ours = tvm_denoise(img, weight, 2000)[where];
            const double ref = 255.0 * tv_reference(f, 4, 4, 1.0 / weight)[where];
            EXPECT_NEAR(ours, ref, 0.5) << "weight " << weight << " at " << where;
            EXPECT_LT(ours, prev_ours) << "weight " << weight;
            EXPECT_LT(ref, prev_ref) << "weight " << weight;
            EXPECT_NEAR(tvm_denoise(img, weight)[where], ref, 3.0) << "default iterations, weight " << weight;
            prev_ours = ours;
            prev_ref = ref;
        }
    }
}

TEST(Tvm, RejectsBadArguments) {
    EXPECT_THROW(tvm_denoise(Tensor({1, 4, 4}), 0), std::invalid_argument);
    EXPECT_THROW(tvm_denoise(Tensor({1, 4, 4}), 1, 0), std::invalid_argument);
}

TEST(ApplyDefense, BatchMatchesPerImageAndNoneIsIdentity) {
    Rng rng(7);
    const Tensor batch = random_pixels({3, 3, 16, 16}, rng);
    EXPECT_EQ(apply_defense({}, batch), batch);
    for (auto kind : {DefenseKind::jpeg, DefenseKind::tvm, DefenseKind::median}) {
        DefenseConfig cfg;
        cfg.kind = kind;
        const Tensor out = apply_defense(cfg, batch);
        ASSERT_EQ(out.shape(), batch.shape());
        EXPECT_TRUE(valid_pixels(out));
        for (std::size_t b = 0; b < 3; ++b) {
            const Tensor one = batch.slice(b, 1).reshaped({3, 16, 16});
            EXPECT_EQ(out.slice(b, 1).reshaped({3, 16, 16}), apply_defense(cfg, one)) << defense_kind_name(kind);
        }
        EXPECT_EQ(apply_defense(cfg, batch), out) << "deterministic";
    }
    EXPECT_THROW(apply_defense({DefenseKind::median}, Tensor({2, 2})), ShapeError);
}

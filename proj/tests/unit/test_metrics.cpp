#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "layton/dataset.hpp"
#include "layton/metrics.hpp"

using namespace layton;

namespace {

Tensor box_blur(const Tensor& img, int radius, int passes) {
    Tensor out = img;
    int h = img.dim(1), w = img.dim(2);
    int64_t plane = int64_t(h) * w;
    for (int p = 0; p < passes; ++p) {
        Tensor src = out;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double acc = 0;
                    int n = 0;
                    for (int dy = -radius; dy <= radius; ++dy)
                        for (int dx = -radius; dx <= radius; ++dx) {
                            int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                            acc += double(src[c * plane + int64_t(yy) * w + xx]);
                            ++n;
                        }
                    out[c * plane + int64_t(y) * w + x] = float(acc / n);
                }
    }
    return out;
}

}  // namespace

TEST_CASE("psnr: cap, closed form, and oracle agreement") {
    Rng rng = Rng::seeded(1);
    Tensor a = Tensor::uniform({3, 8, 8}, rng, 0.0f, 1.0f);
    CHECK(psnr(a, a) == kPsnrCap);

    Tensor b = a;
    for (auto& v : b.data) v += 0.1f;
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-4));

    Tensor c = Tensor::uniform({3, 8, 8}, rng, 0.0f, 1.0f);
    double m = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = double(a[i]) - double(c[i]);
        m += d * d;
    }
    m /= double(a.size());
    CHECK(psnr(a, c) == doctest::Approx(10.0 * std::log10(1.0 / m)).epsilon(1e-6));

    Tensor wrong = Tensor::zeros({3, 8, 9});
    CHECK_THROWS_AS(psnr(a, wrong), ContractViolation);
}

TEST_CASE("ssim: identity, anti-correlation, constant closed form") {
    Rng rng = Rng::seeded(2);
    Tensor a = Tensor::uniform({3, 12, 12}, rng, 0.0f, 1.0f);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));

    // checkerboard vs inverse
    Tensor board = Tensor::zeros({3, 12, 12});
    int64_t plane = 12 * 12;
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            float v = ((x + y) % 2 == 0) ? 1.0f : 0.0f;
            for (int c = 0; c < 3; ++c) board[c * plane + int64_t(y) * 12 + x] = v;
        }
    Tensor inv = board;
    for (auto& v : inv.data) v = 1.0f - v;
    CHECK(ssim(board, inv) < 0.0);

    // constants: SSIM = (2 m1 m2 + C1) / (m1^2 + m2^2 + C1)
    Tensor c1 = Tensor::full({3, 8, 8}, 0.4f);
    Tensor c2 = Tensor::full({3, 8, 8}, 0.5f);
    double m1 = 0.4, m2 = 0.5, k1 = 0.01 * 0.01;
    double expected = (2 * m1 * m2 + k1) / (m1 * m1 + m2 * m2 + k1);
    CHECK(ssim(c1, c2) == doctest::Approx(expected).epsilon(1e-5));

    Tensor tiny = Tensor::zeros({3, 4, 4});
    CHECK_THROWS_AS(ssim(tiny, tiny), ContractViolation);
}

TEST_CASE("perceptual proxy: self-distance, symmetry, corruption monotonicity") {
    PerceptualProxy proxy;
    auto samples = gen_dataset(10, 32, 5);
    int monotone = 0;
    for (const auto& s : samples) {
        const Tensor& img = s.image;
        CHECK(proxy.distance(img, img) == 0.0);
        Tensor mild = box_blur(img, 1, 1);
        Tensor heavy = box_blur(img, 2, 3);
        double d_ab = proxy.distance(img, mild);
        double d_ba = proxy.distance(mild, img);
        CHECK(d_ab == doctest::Approx(d_ba).epsilon(1e-6));
        if (proxy.distance(img, heavy) > d_ab) ++monotone;
    }
    CHECK(monotone == 10);
}

TEST_CASE("proxy is pinned to its seed") {
    PerceptualProxy p1(1234), p2(1234), p3(999);
    Rng rng = Rng::seeded(9);
    Tensor a = Tensor::uniform({3, 16, 16}, rng, 0.0f, 1.0f);
    Tensor b = Tensor::uniform({3, 16, 16}, rng, 0.0f, 1.0f);
    CHECK(p1.distance(a, b) == p2.distance(a, b));
    CHECK(p1.distance(a, b) != p3.distance(a, b));
}

TEST_CASE("frechet distance: 1-D closed form and self distance") {
    // standardized clouds -> sample mean 0/delta, sample variance exactly 1
    Rng rng = Rng::seeded(3);
    int n = 200;
    auto standardized = [&](double offset) {
        std::vector<double> x(static_cast<size_t>(n));
        double mean = 0;
        for (auto& v : x) {
            v = rng.normal();
            mean += v;
        }
        mean /= n;
        double var = 0;
        for (auto v : x) var += (v - mean) * (v - mean);
        var /= (n - 1);
        Tensor t({n, 1});
        for (int i = 0; i < n; ++i) t[i] = float((x[size_t(i)] - mean) / std::sqrt(var) + offset);
        return t;
    };
    for (double delta : {0.5, 1.0, 2.0}) {
        Tensor a = standardized(0.0);
        Tensor b = standardized(delta);
        CHECK(frechet_distance(a, b) == doctest::Approx(delta * delta).epsilon(0.01));
    }
    Tensor s = standardized(0.3);
    CHECK(frechet_distance(s, s) <= 1e-4);
}

TEST_CASE("fid proxy: set vs itself ~0, ordering invariance, noise far from real") {
    PerceptualProxy proxy;
    auto samples = gen_dataset(96, 24, 21);
    std::vector<Tensor> real, real2, noise;
    Rng rng = Rng::seeded(22);
    for (int i = 0; i < 32; ++i) real.push_back(samples[size_t(i)].image);
    for (int i = 32; i < 64; ++i) real2.push_back(samples[size_t(i)].image);
    for (int i = 0; i < 32; ++i) noise.push_back(Tensor::uniform({3, 24, 24}, rng, 0.0f, 1.0f));

    CHECK(fid_proxy(real, real, proxy) <= 1e-4);

    std::vector<Tensor> shuffled(real.rbegin(), real.rend());
    CHECK(fid_proxy(shuffled, real2, proxy) == doctest::Approx(fid_proxy(real, real2, proxy)).epsilon(1e-9));

    double baseline = fid_proxy(real, real2, proxy);  // resampling baseline
    double vs_noise = fid_proxy(real, noise, proxy);
    CHECK(vs_noise >= 10.0 * baseline);

    std::vector<Tensor> too_few(real.begin(), real.begin() + 8);
    CHECK_THROWS_AS(fid_proxy(too_few, real, proxy), ContractViolation);
}

#pragma once

// Reconstruction/generation evaluation harnesses, machine-readable reports,
// and a small line-chart renderer for sweep outputs.

#include <fstream>
#include <map>

#include <json.hpp>

#include "layton/metrics.hpp"

namespace layton {

struct EvalReport {
    std::string name;
    std::map<std::string, double> metrics;
    int sample_count = 0;
    std::string config_hash;
    std::vector<uint64_t> seeds;
    uint64_t proxy_seed = 0;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["name"] = name;
        j["metrics"] = metrics;
        j["sample_count"] = sample_count;
        j["config_hash"] = config_hash;
        j["seeds"] = seeds;
        j["proxy_seed"] = proxy_seed;
        j["extra"] = extra;
        return j;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IntegrityError("cannot write report " + path);
        f << to_json().dump(2) << "\n";
    }

    void validate() const {
        LAYTON_CHECK(sample_count > 0, "eval report: empty sample set");
        for (const auto& [k, v] : metrics)
            LAYTON_CHECK(std::isfinite(v), "eval report: metric " + k + " is not finite");
    }
};

struct PerImageRow {
    int index = 0;
    double psnr = 0, ssim = 0, proxy = 0, mse = 0;
};

inline void write_per_image_csv(const std::string& path, const std::vector<PerImageRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IntegrityError("cannot write csv " + path);
    f << "index,psnr,ssim,proxy,mse\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.8f,%.8f\n", r.index, r.psnr, r.ssim, r.proxy, r.mse);
        f << buf;
    }
}

// Reconstruction metrics for an arbitrary image -> image functor.
template <class R, class ReconFn>
inline EvalReport eval_reconstruction(ReconFn&& recon, const std::vector<TensorT<R>>& images,
                                      const PerceptualProxyT<R>& proxy, const std::string& name,
                                      std::vector<PerImageRow>* rows_out = nullptr) {
    LAYTON_CHECK(!images.empty(), "eval_reconstruction: empty image set");
    EvalReport rep;
    rep.name = name;
    rep.proxy_seed = proxy.seed;
    rep.sample_count = int(images.size());
    double sum_psnr = 0, sum_ssim = 0, sum_proxy = 0, sum_mse = 0;
    std::vector<TensorT<R>> recons;
    recons.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        TensorT<R> rec = recon(images[i], int(i));
        PerImageRow row;
        row.index = int(i);
        row.psnr = psnr(rec, images[i]);
        row.ssim = ssim(rec, images[i]);
        row.proxy = proxy.distance(rec, images[i]);
        row.mse = mse_tensor(rec, images[i]);
        sum_psnr += row.psnr;
        sum_ssim += row.ssim;
        sum_proxy += row.proxy;
        sum_mse += row.mse;
        if (rows_out) rows_out->push_back(row);
        recons.push_back(std::move(rec));
    }
    double n = double(images.size());
    rep.metrics["psnr"] = sum_psnr / n;
    rep.metrics["ssim"] = sum_ssim / n;
    rep.metrics["proxy"] = sum_proxy / n;
    rep.metrics["mse"] = sum_mse / n;
    if (images.size() >= 32) rep.metrics["fid_proxy"] = fid_proxy(recons, images, proxy);
    rep.validate();
    return rep;
}

// Generation metrics: each generated image is scored against the reference
// image whose caption drove it, plus a set-level Frechet distance.
template <class R>
inline EvalReport eval_generation(const std::vector<TensorT<R>>& generated,
                                  const std::vector<TensorT<R>>& references,
                                  const PerceptualProxyT<R>& proxy, double cfg_scale,
                                  const std::string& name, std::vector<PerImageRow>* rows_out = nullptr) {
    LAYTON_CHECK(generated.size() == references.size() && !generated.empty(),
                 "eval_generation: set mismatch");
    EvalReport rep;
    rep.name = name;
    rep.proxy_seed = proxy.seed;
    rep.sample_count = int(generated.size());
    rep.extra["cfg_scale"] = cfg_scale;
    double sum_psnr = 0, sum_ssim = 0, sum_proxy = 0, sum_mse = 0;
    for (size_t i = 0; i < generated.size(); ++i) {
        PerImageRow row;
        row.index = int(i);
        row.psnr = psnr(generated[i], references[i]);
        row.ssim = ssim(generated[i], references[i]);
        row.proxy = proxy.distance(generated[i], references[i]);
        row.mse = mse_tensor(generated[i], references[i]);
        sum_psnr += row.psnr;
        sum_ssim += row.ssim;
        sum_proxy += row.proxy;
        sum_mse += row.mse;
        if (rows_out) rows_out->push_back(row);
    }
    double n = double(generated.size());
    rep.metrics["psnr"] = sum_psnr / n;
    rep.metrics["ssim"] = sum_ssim / n;
    rep.metrics["proxy"] = sum_proxy / n;
    rep.metrics["mse"] = sum_mse / n;
    if (generated.size() >= 32) rep.metrics["fid_proxy"] = fid_proxy(generated, references, proxy);
    rep.validate();
    return rep;
}

// ---------------------------------------------------------------------------
// Minimal line charts (metric vs budget / scale) rendered to PNG.
// ---------------------------------------------------------------------------

namespace chart {

struct Series {
    std::string label;
    std::vector<double> y;
};

// 3x5 digit glyphs for tick labels
inline const uint16_t* glyph(char c) {
    static const std::map<char, uint16_t> glyphs = {
        {'0', 0b111101101101111}, {'1', 0b010110010010111}, {'2', 0b111001111100111},
        {'3', 0b111001111001111}, {'4', 0b101101111001001}, {'5', 0b111100111001111},
        {'6', 0b111100111101111}, {'7', 0b111001001001001}, {'8', 0b111101111101111},
        {'9', 0b111101111001111}, {'.', 0b000000000000010}, {'-', 0b000000111000000},
    };
    auto it = glyphs.find(c);
    return it == glyphs.end() ? nullptr : &it->second;
}

inline void draw_text(std::vector<uint8_t>& rgb, int w, int h, int x, int y, const std::string& text) {
    for (size_t ci = 0; ci < text.size(); ++ci) {
        const uint16_t* g = glyph(text[ci]);
        if (!g) continue;
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 3; ++c)
                if ((*g >> ((4 - r) * 3 + (2 - c))) & 1) {
                    int px = x + int(ci) * 4 + c, py = y + r;
                    if (px >= 0 && px < w && py >= 0 && py < h)
                        for (int ch = 0; ch < 3; ++ch) rgb[(size_t(py) * w + size_t(px)) * 3 + size_t(ch)] = 40;
                }
    }
}

inline std::string fmt_tick(double v) {
    char buf[32];
    if (std::abs(v) >= 100 || v == std::floor(v))
        std::snprintf(buf, sizeof(buf), "%.0f", v);
    else
        std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline void line_chart(const std::string& path, const std::vector<double>& x,
                       const std::vector<Series>& series) {
    LAYTON_CHECK(!x.empty() && !series.empty(), "line_chart: empty data");
    const int w = 640, h = 440, m_left = 64, m_right = 20, m_top = 20, m_bottom = 40;
    std::vector<uint8_t> rgb(size_t(w) * h * 3, 255);

    double xmin = x[0], xmax = x[0];
    for (double v : x) {
        xmin = std::min(xmin, v);
        xmax = std::max(xmax, v);
    }
    double ymin = series[0].y[0], ymax = ymin;
    for (const auto& s : series)
        for (double v : s.y) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double v) { return m_left + int((v - xmin) / (xmax - xmin) * (w - m_left - m_right)); };
    auto py = [&](double v) { return h - m_bottom - int((v - ymin) / (ymax - ymin) * (h - m_top - m_bottom)); };
    auto set = [&](int xx, int yy, uint8_t r, uint8_t g, uint8_t b) {
        if (xx < 0 || xx >= w || yy < 0 || yy >= h) return;
        size_t o = (size_t(yy) * w + size_t(xx)) * 3;
        rgb[o] = r;
        rgb[o + 1] = g;
        rgb[o + 2] = b;
    };

    // axes
    for (int xx = m_left; xx < w - m_right; ++xx) set(xx, h - m_bottom, 0, 0, 0);
    for (int yy = m_top; yy <= h - m_bottom; ++yy) set(m_left, yy, 0, 0, 0);
    // ticks
    for (int k = 0; k <= 4; ++k) {
        double xv = xmin + (xmax - xmin) * k / 4.0;
        double yv = ymin + (ymax - ymin) * k / 4.0;
        draw_text(rgb, w, h, px(xv) - 8, h - m_bottom + 6, fmt_tick(xv));
        draw_text(rgb, w, h, 8, py(yv) - 2, fmt_tick(yv));
        for (int d = 0; d < 4; ++d) {
            set(px(xv), h - m_bottom + d, 0, 0, 0);
            set(m_left - d, py(yv), 0, 0, 0);
        }
    }
    static const uint8_t palette[6][3] = {{200, 40, 40},  {40, 110, 200}, {30, 150, 60},
                                          {200, 140, 20}, {140, 40, 180}, {20, 160, 160}};
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& col = palette[si % 6];
        const auto& ys = series[si].y;
        LAYTON_CHECK(ys.size() == x.size(), "line_chart: series length mismatch");
        for (size_t i = 0; i + 1 < x.size(); ++i) {
            int x0 = px(x[i]), y0 = py(ys[i]), x1 = px(x[i + 1]), y1 = py(ys[i + 1]);
            int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
            for (int s = 0; s <= steps; ++s) {
                int xx = x0 + (x1 - x0) * s / steps;
                int yy = y0 + (y1 - y0) * s / steps;
                set(xx, yy, col[0], col[1], col[2]);
                set(xx, yy + 1, col[0], col[1], col[2]);
            }
        }
        for (size_t i = 0; i < x.size(); ++i)
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) set(px(x[i]) + dx, py(ys[i]) + dy, col[0], col[1], col[2]);
    }
    png::write_rgb8(path, rgb.data(), w, h);
}

}  // namespace chart

}  // namespace layton

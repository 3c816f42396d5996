#pragma once

// Image helpers on [3,H,W] float tensors with values in [0,1].

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "layton/png.hpp"
#include "layton/tensor.hpp"

namespace layton {

template <class R>
inline TensorT<R> clamp01(TensorT<R> img) {
    for (auto& v : img.data) v = std::min(R(1), std::max(R(0), v));
    return img;
}

template <class R>
inline void save_image(const std::string& path, const TensorT<R>& img) {
    LAYTON_CHECK(img.rank() == 3 && img.dim(0) == 3, "save_image: [3,H,W] required");
    int h = img.dim(1), w = img.dim(2);
    std::vector<uint8_t> rgb(size_t(h) * w * 3);
    int64_t plane = int64_t(h) * w;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            double v = std::min(1.0, std::max(0.0, double(img[c * plane + i])));
            rgb[size_t(i) * 3 + size_t(c)] = uint8_t(std::lround(v * 255.0));
        }
    png::write_rgb8(path, rgb.data(), w, h);
}

template <class R = float>
inline TensorT<R> load_image(const std::string& path) {
    int w = 0, h = 0;
    std::vector<uint8_t> rgb = png::read_rgb8(path, w, h);
    TensorT<R> img({3, h, w});
    int64_t plane = int64_t(h) * w;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) img[c * plane + i] = R(rgb[size_t(i) * 3 + size_t(c)]) / R(255);
    return img;
}

// Bilinear resample of [C,H,W] (align-corners-false convention).
template <class R>
inline TensorT<R> resize_bilinear(const TensorT<R>& src, int out_h, int out_w) {
    LAYTON_CHECK(src.rank() == 3, "resize_bilinear: [C,H,W] required");
    int c = src.dim(0), h = src.dim(1), w = src.dim(2);
    TensorT<R> dst({c, out_h, out_w});
    double sy = double(h) / out_h, sx = double(w) / out_w;
    for (int ci = 0; ci < c; ++ci) {
        const R* sp = src.ptr() + int64_t(ci) * h * w;
        R* dp = dst.ptr() + int64_t(ci) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            int y0 = int(std::floor(fy));
            double wy = fy - y0;
            int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
            for (int x = 0; x < out_w; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                int x0 = int(std::floor(fx));
                double wx = fx - x0;
                int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
                double v = (1 - wy) * ((1 - wx) * double(sp[int64_t(y0c) * w + x0c]) + wx * double(sp[int64_t(y0c) * w + x1c])) +
                           wy * ((1 - wx) * double(sp[int64_t(y1c) * w + x0c]) + wx * double(sp[int64_t(y1c) * w + x1c]));
                dp[int64_t(y) * out_w + x] = R(v);
            }
        }
    }
    return dst;
}

// 0.299 R + 0.587 G + 0.114 B over [3,H,W] -> [H*W]
template <class R>
inline std::vector<R> luminance(const TensorT<R>& img) {
    LAYTON_CHECK(img.rank() == 3 && img.dim(0) == 3, "luminance: [3,H,W] required");
    int64_t plane = int64_t(img.dim(1)) * img.dim(2);
    std::vector<R> y(static_cast<size_t>(plane));
    for (int64_t i = 0; i < plane; ++i)
        y[size_t(i)] = R(0.299) * img[i] + R(0.587) * img[plane + i] + R(0.114) * img[2 * plane + i];
    return y;
}

// Stack [3,H,W] images into a batch [B,3,H,W].
template <class R>
inline TensorT<R> stack_images(const std::vector<TensorT<R>>& imgs) {
    LAYTON_CHECK(!imgs.empty(), "stack_images: empty batch");
    int c = imgs[0].dim(0), h = imgs[0].dim(1), w = imgs[0].dim(2);
    TensorT<R> out({int(imgs.size()), c, h, w});
    for (size_t i = 0; i < imgs.size(); ++i) {
        LAYTON_CHECK(imgs[i].shape == imgs[0].shape, "stack_images: mixed shapes");
        std::copy(imgs[i].data.begin(), imgs[i].data.end(), out.ptr() + int64_t(i) * c * h * w);
    }
    return out;
}

template <class R>
inline TensorT<R> batch_item(const TensorT<R>& batch, int i) {
    LAYTON_CHECK(batch.rank() == 4, "batch_item: [B,C,H,W] required");
    int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    TensorT<R> out({c, h, w});
    std::copy(batch.ptr() + int64_t(i) * c * h * w, batch.ptr() + int64_t(i + 1) * c * h * w, out.ptr());
    return out;
}

}  // namespace layton

#pragma once

// Deterministic synthetic corpus: anti-aliased colored shapes on dark
// backgrounds with captions that exactly describe the scene, plus the
// contrast/coverage quality score used for filtering.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "layton/image.hpp"
#include "layton/rng.hpp"
#include "layton/tensor.hpp"

namespace layton {

// ---------------------------------------------------------------------------
// Caption vocabulary (closed, fixed ids)
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& caption_vocab() {
    static const std::vector<std::string> words = {
        "a",      "and",    "of",       "one",     "two",     "three",
        "red",    "green",  "blue",     "yellow",  "magenta", "cyan",
        "circle", "square", "triangle", "circles", "squares", "triangles",
        "left",   "right",  "above",    "below",
    };
    return words;
}

inline int caption_token(const std::string& word) {
    const auto& v = caption_vocab();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word) return int(i);
    throw ContractViolation("unknown caption token: " + word);
}

inline std::vector<int> tokenize_caption(const std::string& caption) {
    std::vector<int> ids;
    std::istringstream ss(caption);
    std::string w;
    while (ss >> w) ids.push_back(caption_token(w));
    return ids;
}

// ---------------------------------------------------------------------------
// Scene model
// ---------------------------------------------------------------------------

enum class Shape { Circle = 0, Square = 1, Triangle = 2 };

struct SceneObject {
    Shape shape = Shape::Circle;
    int color = 0;       // index into color table below
    double cx = 0.5, cy = 0.5;  // center, normalized [0,1]
    double size = 0.3;   // half-extent, normalized
};

struct Scene {
    std::vector<SceneObject> objects;
    double bg[3] = {0.1, 0.1, 0.1};
    std::string caption;
};

inline const double* shape_color(int idx) {
    static const double table[6][3] = {
        {0.90, 0.12, 0.12},  // red
        {0.12, 0.75, 0.15},  // green
        {0.15, 0.25, 0.92},  // blue
        {0.92, 0.85, 0.10},  // yellow
        {0.88, 0.15, 0.85},  // magenta
        {0.10, 0.82, 0.85},  // cyan
    };
    return table[idx];
}

inline const char* color_word(int idx) {
    static const char* words[6] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
    return words[idx];
}

inline const char* shape_word(Shape s, bool plural = false) {
    static const char* sing[3] = {"circle", "square", "triangle"};
    static const char* plur[3] = {"circles", "squares", "triangles"};
    return plural ? plur[int(s)] : sing[int(s)];
}

// Coverage of one object over a pixel, 4x4 supersampled. Coordinates are in
// normalized image space.
inline double object_coverage(const SceneObject& o, double px, double py, double pixel) {
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
            double x = px + (sx + 0.5) * pixel / 4.0;
            double y = py + (sy + 0.5) * pixel / 4.0;
            double dx = x - o.cx, dy = y - o.cy;
            bool inside = false;
            switch (o.shape) {
                case Shape::Circle:
                    inside = dx * dx + dy * dy <= o.size * o.size;
                    break;
                case Shape::Square:
                    inside = std::abs(dx) <= o.size * 0.886 && std::abs(dy) <= o.size * 0.886;
                    break;
                case Shape::Triangle: {
                    // upward triangle inscribed in the size-radius circle
                    double ty = dy + o.size * 0.5;
                    inside = ty >= 0.0 && ty <= o.size * 1.5 &&
                             std::abs(dx) <= (ty / 1.5) * 1.1547;
                    break;
                }
            }
            if (inside) ++hits;
        }
    }
    return hits / 16.0;
}

template <class R = float>
inline TensorT<R> render_scene(const Scene& scene, int resolution) {
    TensorT<R> img({3, resolution, resolution});
    int64_t plane = int64_t(resolution) * resolution;
    double pixel = 1.0 / resolution;
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            double rgb[3] = {scene.bg[0], scene.bg[1], scene.bg[2]};
            for (const auto& o : scene.objects) {
                double cov = object_coverage(o, x * pixel, y * pixel, pixel);
                if (cov <= 0.0) continue;
                const double* col = shape_color(o.color);
                for (int c = 0; c < 3; ++c) rgb[c] = rgb[c] * (1.0 - cov) + col[c] * cov;
            }
            for (int c = 0; c < 3; ++c) img[c * plane + int64_t(y) * resolution + x] = R(rgb[c]);
        }
    }
    return img;
}

// Luminance contrast (std) times object coverage fraction.
template <class R>
inline double quality_score(const TensorT<R>& img) {
    auto lum = luminance(img);
    double mean = 0;
    for (auto v : lum) mean += double(v);
    mean /= double(lum.size());
    double var = 0;
    for (auto v : lum) {
        double d = double(v) - mean;
        var += d * d;
    }
    var /= double(lum.size());
    // coverage: pixels noticeably brighter than the dark background
    int covered = 0;
    for (auto v : lum)
        if (double(v) > mean + 0.05) ++covered;
    double coverage = double(covered) / double(lum.size());
    return std::sqrt(var) * coverage;
}

struct SyntheticSample {
    Scene scene;
    TensorT<float> image;          // [3,H,W]
    std::string caption;
    std::vector<int> caption_ids;
    double score = 0.0;
};

inline Scene sample_scene(Rng& rng) {
    Scene scene;
    double g = rng.uniform(0.06, 0.16);
    for (int c = 0; c < 3; ++c) scene.bg[c] = g + rng.uniform(-0.02, 0.02);

    int kind = rng.uniform_int(0, 2);
    std::string cap;
    if (kind == 0) {  // single object
        SceneObject o;
        o.shape = Shape(rng.uniform_int(0, 2));
        o.color = rng.uniform_int(0, 5);
        o.cx = rng.uniform(0.35, 0.65);
        o.cy = rng.uniform(0.35, 0.65);
        o.size = rng.uniform(0.18, 0.3);
        scene.objects.push_back(o);
        cap = std::string("a ") + color_word(o.color) + " " + shape_word(o.shape);
    } else if (kind == 1) {  // two objects with a spatial relation
        SceneObject a, b;
        a.shape = Shape(rng.uniform_int(0, 2));
        b.shape = Shape(rng.uniform_int(0, 2));
        a.color = rng.uniform_int(0, 5);
        b.color = (a.color + rng.uniform_int(1, 5)) % 6;
        a.size = rng.uniform(0.12, 0.18);
        b.size = rng.uniform(0.12, 0.18);
        int rel = rng.uniform_int(0, 3);  // 0 left-of, 1 right-of, 2 above, 3 below
        double lo = rng.uniform(0.2, 0.3), hi = rng.uniform(0.7, 0.8);
        double mid1 = rng.uniform(0.3, 0.7), mid2 = rng.uniform(0.3, 0.7);
        switch (rel) {
            case 0: a.cx = lo; b.cx = hi; a.cy = mid1; b.cy = mid2; break;
            case 1: a.cx = hi; b.cx = lo; a.cy = mid1; b.cy = mid2; break;
            case 2: a.cy = lo; b.cy = hi; a.cx = mid1; b.cx = mid2; break;
            default: a.cy = hi; b.cy = lo; a.cx = mid1; b.cx = mid2; break;
        }
        scene.objects.push_back(a);
        scene.objects.push_back(b);
        static const char* rel_words[4] = {"left of", "right of", "above", "below"};
        cap = std::string("a ") + color_word(a.color) + " " + shape_word(a.shape) + " " + rel_words[rel] +
              " a " + color_word(b.color) + " " + shape_word(b.shape);
    } else {  // counted identical objects
        int n = rng.uniform_int(2, 3);
        Shape sh = Shape(rng.uniform_int(0, 2));
        int col = rng.uniform_int(0, 5);
        // fixed slots keep objects disjoint
        static const double slots2[2][2] = {{0.3, 0.5}, {0.7, 0.5}};
        static const double slots3[3][2] = {{0.25, 0.35}, {0.75, 0.35}, {0.5, 0.72}};
        for (int i = 0; i < n; ++i) {
            SceneObject o;
            o.shape = sh;
            o.color = col;
            o.size = rng.uniform(0.11, 0.16);
            o.cx = (n == 2 ? slots2[i][0] : slots3[i][0]) + rng.uniform(-0.03, 0.03);
            o.cy = (n == 2 ? slots2[i][1] : slots3[i][1]) + rng.uniform(-0.03, 0.03);
            scene.objects.push_back(o);
        }
        cap = std::string(n == 2 ? "two" : "three") + " " + color_word(col) + " " + shape_word(sh, true);
    }
    scene.caption = cap;
    return scene;
}

inline std::vector<SyntheticSample> gen_dataset(int n, int resolution, uint64_t seed) {
    LAYTON_CHECK(n >= 1, "gen_dataset: n must be >= 1");
    Rng master = Rng::seeded(seed);
    std::vector<SyntheticSample> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        Rng child = master.child(uint64_t(i));
        SyntheticSample s;
        s.scene = sample_scene(child);
        s.image = render_scene(s.scene, resolution);
        s.caption = s.scene.caption;
        s.caption_ids = tokenize_caption(s.caption);
        s.score = quality_score(s.image);
        out.push_back(std::move(s));
    }
    return out;
}

// Order-preserving score filter; empty result is a warning, not an error.
template <class ScoreFn>
inline std::vector<SyntheticSample> filter(const std::vector<SyntheticSample>& samples, ScoreFn&& score_fn,
                                           double threshold) {
    LAYTON_CHECK(std::isfinite(threshold) || threshold == -std::numeric_limits<double>::infinity() ||
                     threshold == std::numeric_limits<double>::infinity(),
                 "filter: threshold must not be NaN");
    std::vector<SyntheticSample> kept;
    for (const auto& s : samples)
        if (score_fn(s) >= threshold) kept.push_back(s);
    if (kept.empty() && !samples.empty())
        std::fprintf(stderr, "[warn] filter retained 0 of %zu samples (threshold %.4f)\n", samples.size(),
                     threshold);
    return kept;
}

// ---------------------------------------------------------------------------
// Corpus directory: PNGs + manifest.tsv (filename <TAB> caption <TAB> score)
// ---------------------------------------------------------------------------

inline void write_corpus(const std::string& dir, const std::vector<SyntheticSample>& samples) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.tsv");
    if (!manifest) throw IntegrityError("cannot write manifest in " + dir);
    char name[32];
    for (size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%05zu.png", i);
        save_image(dir + "/" + name, samples[i].image);
        char score[32];
        std::snprintf(score, sizeof(score), "%.6f", samples[i].score);
        manifest << name << "\t" << samples[i].caption << "\t" << score << "\n";
    }
}

struct CorpusRecord {
    std::string filename;
    std::string caption;
    double score = 0.0;
};

inline std::vector<CorpusRecord> read_manifest(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.tsv");
    if (!manifest) throw IntegrityError("cannot open manifest in " + dir);
    std::vector<CorpusRecord> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        size_t t1 = line.find('\t');
        size_t t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw IntegrityError("malformed manifest line: " + line);
        CorpusRecord r;
        r.filename = line.substr(0, t1);
        r.caption = line.substr(t1 + 1, t2 - t1 - 1);
        r.score = std::stod(line.substr(t2 + 1));
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace layton

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/common.hpp"
#include "ctrldiff/rng.hpp"
#include "ctrldiff/tensor.hpp"

namespace ctrldiff {

enum class ControlKind { Mask, Edge };

inline const char* to_string(ControlKind k) {
    return k == ControlKind::Mask ? "mask" : "edge";
}

// One randomly placed filled shape, fully inside the canvas, hard-rasterized
// (no anti-aliasing) so the mask is exactly binary.
struct ShapeSpec {
    enum Kind { Ellipse = 0, Rectangle = 1, Triangle = 2 };
    Kind kind = Ellipse;
    double cx = 0, cy = 0;  // center, pixel units
    double a = 0, b = 0;    // half extents (circumradius for triangles)
    double rot = 0;
    double intensity = 1.0;  // in (0.2, 1.0]
};

namespace detail {

inline ShapeSpec draw_shape(Rng& rng, int size) {
    ShapeSpec s;
    double S = static_cast<double>(size);
    s.kind = static_cast<ShapeSpec::Kind>(std::min<int>(2, static_cast<int>(rng.uniform() * 3)));
    s.a = rng.uniform(S / 8.0, S / 4.0);
    s.b = rng.uniform(S / 8.0, S / 4.0);
    s.rot = rng.uniform(0.0, 3.14159265358979323846);
    s.intensity = 0.2 + 0.8 * (1.0 - rng.uniform());  // (0.2, 1.0]
    double margin;
    switch (s.kind) {
        case ShapeSpec::Ellipse: margin = std::max(s.a, s.b); break;
        case ShapeSpec::Rectangle: margin = std::sqrt(s.a * s.a + s.b * s.b); break;
        default:
            s.a = rng.uniform(S / 6.0, S / 4.0);  // circumradius
            margin = s.a;
            break;
    }
    margin += 1.0;
    check(margin < S / 2.0 - 1.0, "size too small to place shapes: " + std::to_string(size));
    s.cx = rng.uniform(margin, S - margin);
    s.cy = rng.uniform(margin, S - margin);
    return s;
}

inline bool inside(const ShapeSpec& s, double px, double py) {
    double dx = px - s.cx, dy = py - s.cy;
    double c = std::cos(s.rot), sn = std::sin(s.rot);
    double u = dx * c + dy * sn;
    double v = -dx * sn + dy * c;
    switch (s.kind) {
        case ShapeSpec::Ellipse:
            return (u / s.a) * (u / s.a) + (v / s.b) * (v / s.b) <= 1.0;
        case ShapeSpec::Rectangle:
            return std::abs(u) <= s.a && std::abs(v) <= s.b;
        case ShapeSpec::Triangle: {
            // equilateral, vertices on the circumcircle
            double vx[3], vy[3];
            for (int k = 0; k < 3; ++k) {
                double ang = s.rot + 1.5707963267948966 + k * 2.0943951023931953;
                vx[k] = s.cx + s.a * std::cos(ang);
                vy[k] = s.cy + s.a * std::sin(ang);
            }
            double d0 = (vx[1] - vx[0]) * (py - vy[0]) - (vy[1] - vy[0]) * (px - vx[0]);
            double d1 = (vx[2] - vx[1]) * (py - vy[1]) - (vy[2] - vy[1]) * (px - vx[1]);
            double d2 = (vx[0] - vx[2]) * (py - vy[2]) - (vy[0] - vy[2]) * (px - vx[2]);
            bool neg = d0 < 0 || d1 < 0 || d2 < 0;
            bool pos = d0 > 0 || d1 > 0 || d2 > 0;
            return !(neg && pos);
        }
    }
    return false;
}

}  // namespace detail

// Paired (target image, control map) record. image values live in [-1, 1]
// with background -1; the control is exactly {0,1}-valued.
template <typename Real>
struct ControlSample {
    Tensor<Real> image;    // (1, 1, S, S)
    Tensor<Real> control;  // (1, 1, S, S)
    ControlKind kind = ControlKind::Mask;
    uint64_t seed = 0;
    int index = 0;
};

// pixel is 1 iff it is set and touches a 0 across its 8-neighborhood
// (outside-canvas counts as 0)
template <typename Real>
Tensor<Real> render_edge(const Tensor<Real>& mask) {
    check(mask.ndim() == 4, "render_edge expects a feature map");
    int64_t H = mask.dim(2), W = mask.dim(3);
    for (int64_t i = 0; i < mask.numel(); ++i) {
        check(mask[i] == Real(0) || mask[i] == Real(1), "render_edge: input is not binary");
    }
    Tensor<Real> out(mask.shape());
    for (int64_t n = 0; n < mask.dim(0); ++n) {
        for (int64_t c = 0; c < mask.dim(1); ++c) {
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t w = 0; w < W; ++w) {
                    if (mask.at(n, c, h, w) != Real(1)) continue;
                    bool boundary = false;
                    for (int dh = -1; dh <= 1 && !boundary; ++dh) {
                        for (int dw = -1; dw <= 1 && !boundary; ++dw) {
                            if (dh == 0 && dw == 0) continue;
                            int64_t hh = h + dh, ww = w + dw;
                            if (hh < 0 || hh >= H || ww < 0 || ww >= W ||
                                mask.at(n, c, hh, ww) == Real(0)) {
                                boundary = true;
                            }
                        }
                    }
                    if (boundary) out.at(n, c, h, w) = Real(1);
                }
            }
        }
    }
    return out;
}

// shape parameters behind sample (seed, index); useful for inspecting the
// class distribution
inline ShapeSpec shape_spec_of(uint64_t seed, int index, int size) {
    Rng rng = Rng::indexed(seed, static_cast<uint64_t>(index));
    return detail::draw_shape(rng, size);
}

// Sample i is fully determined by (seed, i): generation is pure per index, so
// shuffling and parallel generation stay deterministic.
template <typename Real>
ControlSample<Real> generate_one(uint64_t seed, int index, int size, ControlKind kind) {
    check(size >= 16, "size too small to place shapes: " + std::to_string(size));
    Rng rng = Rng::indexed(seed, static_cast<uint64_t>(index));
    ShapeSpec spec = detail::draw_shape(rng, size);

    ControlSample<Real> s;
    s.kind = kind;
    s.seed = seed;
    s.index = index;
    s.image = Tensor<Real>::full({1, 1, size, size}, Real(-1));
    Tensor<Real> mask({1, 1, size, size});
    Real fg = static_cast<Real>(2.0 * spec.intensity - 1.0);
    for (int h = 0; h < size; ++h) {
        for (int w = 0; w < size; ++w) {
            if (detail::inside(spec, w + 0.5, h + 0.5)) {
                mask.at(0, 0, h, w) = Real(1);
                s.image.at(0, 0, h, w) = fg;
            }
        }
    }
    s.control = (kind == ControlKind::Mask) ? mask : render_edge(mask);
    return s;
}

template <typename Real>
std::vector<ControlSample<Real>> generate(uint64_t seed, int count, int size, ControlKind kind) {
    check(count >= 1, "generate: count must be >= 1");
    std::vector<ControlSample<Real>> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(generate_one<Real>(seed, i, size, kind));
    return out;
}

// On-disk cache in the archive format, keyed by the generation arguments.
template <typename Real>
void save_dataset(const std::string& path, const std::vector<ControlSample<Real>>& samples,
                  uint64_t seed, int size, ControlKind kind) {
    Archive ar;
    ar.meta = {{"kind", "dataset"},
               {"format_version", 1},
               {"seed", seed},
               {"count", samples.size()},
               {"size", size},
               {"control", to_string(kind)}};
    for (size_t i = 0; i < samples.size(); ++i) {
        ar.entries.push_back(entry_from_tensor("sample." + std::to_string(i) + ".image",
                                               samples[i].image));
        ar.entries.push_back(entry_from_tensor("sample." + std::to_string(i) + ".control",
                                               samples[i].control));
    }
    write_archive(path, ar);
}

template <typename Real>
std::vector<ControlSample<Real>> load_dataset(const std::string& path, uint64_t expected_seed,
                                              int expected_count, int expected_size,
                                              ControlKind expected_kind) {
    Archive ar = read_archive(path);
    check(ar.meta.value("kind", "") == "dataset", path + " is not a dataset cache");
    check(ar.meta.value("seed", uint64_t(0)) == expected_seed &&
              ar.meta.value("count", size_t(0)) == static_cast<size_t>(expected_count) &&
              ar.meta.value("size", 0) == expected_size &&
              ar.meta.value("control", "") == to_string(expected_kind),
          "dataset cache key mismatch at " + path);
    std::vector<ControlSample<Real>> out;
    for (int i = 0; i < expected_count; ++i) {
        ControlSample<Real> s;
        const ArchiveEntry* im = ar.find("sample." + std::to_string(i) + ".image");
        const ArchiveEntry* ct = ar.find("sample." + std::to_string(i) + ".control");
        check(im && ct, "dataset cache missing sample " + std::to_string(i));
        s.image = tensor_from_entry<Real>(*im);
        s.control = tensor_from_entry<Real>(*ct);
        s.kind = expected_kind;
        s.seed = expected_seed;
        s.index = i;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace ctrldiff

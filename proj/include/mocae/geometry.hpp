#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <variant>
#include <vector>

namespace mocae {

// Axis-aligned box in min/max corner form, image units.
struct AxisAlignedBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }

    static AxisAlignedBox from_xywh(double x, double y, double w, double h) {
        return {x, y, x + w, y + h};
    }

    bool operator==(const AxisAlignedBox&) const = default;
};

// Rotated box: center, side lengths, rotation angle in radians.
// theta is counter-clockwise-positive in the box's coordinate frame.
struct RotatedBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;
    double theta = 0.0;

    double area() const { return w * h; }

    bool operator==(const RotatedBox&) const = default;
};

using BoxGeometry = std::variant<AxisAlignedBox, RotatedBox>;

inline double iou_aabb(const AxisAlignedBox& a, const AxisAlignedBox& b) {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    const double inter = std::max(0.0, iw) * std::max(0.0, ih);
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

namespace detail {

struct Vec2 {
    double x;
    double y;
};

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Vertices in counter-clockwise order.
inline std::array<Vec2, 4> corners(const RotatedBox& r) {
    const double c = std::cos(r.theta);
    const double s = std::sin(r.theta);
    const double hw = r.w * 0.5;
    const double hh = r.h * 0.5;
    const std::array<Vec2, 4> local = {
        Vec2{-hw, -hh}, Vec2{hw, -hh}, Vec2{hw, hh}, Vec2{-hw, hh}};
    std::array<Vec2, 4> out{};
    for (int i = 0; i < 4; ++i) {
        out[i] = {r.cx + c * local[i].x - s * local[i].y,
                  r.cy + s * local[i].x + c * local[i].y};
    }
    return out;
}

inline double shoelace_area(const std::vector<Vec2>& poly) {
    const size_t n = poly.size();
    if (n < 3) return 0.0;
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    return std::abs(acc) * 0.5;
}

// Sutherland-Hodgman clip of `subject` against one directed edge (a -> b)
// of a counter-clockwise convex clip polygon. |cross| < 1e-12 counts as
// on-edge and is kept.
inline std::vector<Vec2> clip_edge(const std::vector<Vec2>& subject,
                                   const Vec2& a, const Vec2& b) {
    constexpr double kCollinearEps = 1e-12;
    std::vector<Vec2> out;
    const size_t n = subject.size();
    out.reserve(n + 1);
    for (size_t i = 0; i < n; ++i) {
        const Vec2& cur = subject[i];
        const Vec2& nxt = subject[(i + 1) % n];
        const double dc = cross(a, b, cur);
        const double dn = cross(a, b, nxt);
        const bool cur_in = dc > -kCollinearEps;
        const bool nxt_in = dn > -kCollinearEps;
        if (cur_in) out.push_back(cur);
        if (cur_in != nxt_in) {
            const double t = dc / (dc - dn);
            out.push_back({cur.x + t * (nxt.x - cur.x),
                           cur.y + t * (nxt.y - cur.y)});
        }
    }
    return out;
}

inline double convex_intersection_area(const std::array<Vec2, 4>& pa,
                                       const std::array<Vec2, 4>& pb) {
    std::vector<Vec2> poly(pa.begin(), pa.end());
    for (int i = 0; i < 4 && !poly.empty(); ++i) {
        poly = clip_edge(poly, pb[i], pb[(i + 1) % 4]);
    }
    return shoelace_area(poly);
}

}  // namespace detail

inline double iou_rotated(const RotatedBox& a, const RotatedBox& b) {
    // Clip in a canonical operand order so iou(a,b) and iou(b,a) round
    // identically.
    const auto key = [](const RotatedBox& r) {
        return std::array<double, 5>{r.cx, r.cy, r.w, r.h, r.theta};
    };
    const bool swap = key(b) < key(a);
    const RotatedBox& first = swap ? b : a;
    const RotatedBox& second = swap ? a : b;
    const double inter =
        detail::convex_intersection_area(detail::corners(first), detail::corners(second));
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

inline double iou(const BoxGeometry& a, const BoxGeometry& b) {
    if (std::holds_alternative<AxisAlignedBox>(a)) {
        return iou_aabb(std::get<AxisAlignedBox>(a), std::get<AxisAlignedBox>(b));
    }
    return iou_rotated(std::get<RotatedBox>(a), std::get<RotatedBox>(b));
}

}  // namespace mocae

#pragma once

#include <cmath>
#include <vector>

namespace fieldshift {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Closed ring of vertices in pixel coordinates; the last vertex connects
/// back to the first (no repeated closing vertex).
using Polygon = std::vector<Point>;

inline double polygon_area(const Polygon& poly) {
  double twice = 0.0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % n];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(twice);
}

namespace detail {

inline double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool on_segment(const Point& p, const Point& q, const Point& r) {
  return std::min(p.x, r.x) <= q.x && q.x <= std::max(p.x, r.x) && std::min(p.y, r.y) <= q.y &&
         q.y <= std::max(p.y, r.y);
}

inline int orientation(const Point& a, const Point& b, const Point& c) {
  const double v = cross(a, b, c);
  if (v > 1e-12) return 1;
  if (v < -1e-12) return -1;
  return 0;
}

inline bool segments_intersect(const Point& p1, const Point& p2, const Point& p3, const Point& p4) {
  const int o1 = orientation(p1, p2, p3);
  const int o2 = orientation(p1, p2, p4);
  const int o3 = orientation(p3, p4, p1);
  const int o4 = orientation(p3, p4, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(p1, p3, p2)) return true;
  if (o2 == 0 && on_segment(p1, p4, p2)) return true;
  if (o3 == 0 && on_segment(p3, p1, p4)) return true;
  if (o4 == 0 && on_segment(p3, p2, p4)) return true;
  return false;
}

}  // namespace detail

/// True when the ring has at least three vertices, nonzero area and no two
/// non-adjacent edges touch.
inline bool is_simple_polygon(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  if (polygon_area(poly) <= 0.0) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a1 = poly[i];
    const Point& a2 = poly[(i + 1) % n];
    if (a1 == a2) return false;
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
      if (adjacent) continue;
      const Point& b1 = poly[j];
      const Point& b2 = poly[(j + 1) % n];
      if (detail::segments_intersect(a1, a2, b1, b2)) return false;
    }
  }
  return true;
}

/// Even-odd point-in-polygon test with a half-open crossing rule.
inline bool point_in_polygon(const Polygon& poly, double px, double py) {
  bool inside = false;
  for (std::size_t i = 0, n = poly.size(), j = n - 1; i < n; j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y <= py) != (b.y <= py)) {
      const double xc = a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y);
      if (px < xc) inside = !inside;
    }
  }
  return inside;
}

/// Keeps the part of a convex polygon satisfying nx*x + ny*y <= c
/// (Sutherland-Hodgman against one half-plane).
inline Polygon clip_half_plane(const Polygon& poly, double nx, double ny, double c) {
  Polygon out;
  const std::size_t n = poly.size();
  if (n == 0) return out;
  out.reserve(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Point& cur = poly[i];
    const Point& nxt = poly[(i + 1) % n];
    const double dc = nx * cur.x + ny * cur.y - c;
    const double dn = nx * nxt.x + ny * nxt.y - c;
    if (dc <= 0) out.push_back(cur);
    if ((dc < 0 && dn > 0) || (dc > 0 && dn < 0)) {
      const double t = dc / (dc - dn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  // drop near-duplicate consecutive vertices produced by clipping through a vertex
  Polygon cleaned;
  for (const Point& p : out) {
    if (!cleaned.empty() && std::abs(cleaned.back().x - p.x) < 1e-9 && std::abs(cleaned.back().y - p.y) < 1e-9) continue;
    cleaned.push_back(p);
  }
  while (cleaned.size() > 1 && std::abs(cleaned.front().x - cleaned.back().x) < 1e-9 &&
         std::abs(cleaned.front().y - cleaned.back().y) < 1e-9)
    cleaned.pop_back();
  if (cleaned.size() < 3) cleaned.clear();
  return cleaned;
}

inline Polygon rectangle(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

}  // namespace fieldshift

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ccdet {

/// Axis-aligned box in canonical corner form: (x1,y1) top-left, (x2,y2)
/// bottom-right, pixel units. Degenerate extents are rejected at
/// construction; conversion from corner+size form happens at ingestion.
struct BBox {
  double x1;
  double y1;
  double x2;
  double y2;

  BBox(double x1_, double y1_, double x2_, double y2_)
      : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
    if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
          std::isfinite(y2))) {
      throw std::invalid_argument("BBox: coordinates must be finite");
    }
    if (!(x2 > x1) || !(y2 > y1)) {
      throw std::invalid_argument("BBox: degenerate box [" +
                                  std::to_string(x1) + ", " +
                                  std::to_string(y1) + ", " +
                                  std::to_string(x2) + ", " +
                                  std::to_string(y2) + "]");
    }
  }

  static BBox from_xywh(double x, double y, double w, double h) {
    return BBox(x, y, x + w, y + h);
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }

  bool operator==(const BBox&) const = default;
};

inline double area(const BBox& b) { return b.width() * b.height(); }

// Boxes are closed rectangles; touching edges have zero intersection area.
inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double union_area(const BBox& a, const BBox& b) {
  return area(a) + area(b) - intersection_area(a, b);
}

/// Minimal axis-aligned box containing both operands.
inline BBox enclosing_box(const BBox& a, const BBox& b) {
  return BBox(std::min(a.x1, b.x1), std::min(a.y1, b.y1),
              std::max(a.x2, b.x2), std::max(a.y2, b.y2));
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  if (inter == 0.0) return 0.0;
  return inter / (area(a) + area(b) - inter);
}

/// Generalized IoU: plain IoU minus the fraction of the enclosing hull not
/// covered by the union. Lies in (-1, 1]; equals IoU whenever the hull
/// coincides with the union, and 1 only for identical boxes.
inline double giou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = area(a) + area(b) - inter;
  const double hull = area(enclosing_box(a, b));
  return inter / uni - (hull - uni) / hull;
}

}  // namespace ccdet

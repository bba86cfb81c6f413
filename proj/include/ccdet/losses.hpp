#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccdet/datamodel.hpp"
#include "ccdet/geometry.hpp"
#include "ccdet/rng.hpp"

namespace ccdet {

/// Box regression weights: total = lambda1 * giou_loss + lambda2 * l1_box.
struct LossWeights {
  double lambda1 = 2.0;
  double lambda2 = 5.0;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// Half-open token range [start, end) inside a sequence of `total` positions.
struct TokenSpan {
  int start;
  int end;
  int total;

  TokenSpan(int start_, int end_, int total_)
      : start(start_), end(end_), total(total_) {
    if (total < 1 || start < 0 || end <= start || end > total)
      throw std::invalid_argument("TokenSpan: need 0 <= start < end <= total");
  }
};

constexpr int kDefaultTokenLength = 256;
constexpr double kProbEps = 1e-7;

/// Thrown when a gradient is requested at a kink or a probe point sits too
/// close to a non-smooth locus.
struct NonDifferentiable : std::domain_error {
  explicit NonDifferentiable(const std::string& what) : std::domain_error(what) {}
};

namespace detail {

inline void check_weights(const LossWeights& w) {
  if (!std::isfinite(w.lambda1) || !std::isfinite(w.lambda2) || w.lambda1 < 0.0 ||
      w.lambda2 < 0.0)
    throw std::invalid_argument("LossWeights: weights must be finite and nonnegative");
  if (w.lambda1 == 0.0 && w.lambda2 == 0.0)
    throw std::invalid_argument("LossWeights: at least one weight must be positive");
}

inline void check_focal(const FocalParams& fp) {
  if (!(fp.alpha >= 0.0 && fp.alpha <= 1.0) || !(fp.gamma >= 0.0) ||
      !std::isfinite(fp.gamma))
    throw std::invalid_argument("FocalParams: need alpha in [0,1], gamma >= 0");
}

inline void check_probability(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::domain_error("focal_loss: probability " + std::to_string(p) +
                            " outside (0, 1); clamp logits first");
}

}  // namespace detail

inline double clamp_probability(double p) {
  return std::clamp(p, kProbEps, 1.0 - kProbEps);
}

// ---------------------------------------------------------------------------
// Loss values

inline double giou_loss(const BBox& gt, const BBox& pred) {
  return 1.0 - giou(gt, pred);
}

/// Box as (cx/W, cy/H, w/W, h/H); the parameterization under which the
/// box-loss weights are meaningful.
inline std::array<double, 4> norm_center_size(const BBox& b, const ImageRecord& im) {
  if (im.width <= 0 || im.height <= 0)
    throw std::invalid_argument("norm_center_size: image has no extent");
  const double w = static_cast<double>(im.width);
  const double h = static_cast<double>(im.height);
  return {(b.x1 + b.x2) / (2.0 * w), (b.y1 + b.y2) / (2.0 * h),
          (b.x2 - b.x1) / w, (b.y2 - b.y1) / h};
}

inline double l1_box(const BBox& gt, const BBox& pred, const ImageRecord& norm) {
  const auto a = norm_center_size(gt, norm);
  const auto b = norm_center_size(pred, norm);
  double sum = 0.0;
  for (int i = 0; i < 4; ++i) sum += std::abs(b[i] - a[i]);
  return sum;
}

inline double box_loss(const BBox& gt, const BBox& pred, const LossWeights& w,
                       const ImageRecord& norm) {
  detail::check_weights(w);
  return w.lambda1 * giou_loss(gt, pred) + w.lambda2 * l1_box(gt, pred, norm);
}

inline double focal_loss(double p, bool positive, const FocalParams& fp = {}) {
  detail::check_focal(fp);
  detail::check_probability(p);
  const double pt = positive ? p : 1.0 - p;
  const double at = positive ? fp.alpha : 1.0 - fp.alpha;
  return -at * std::pow(1.0 - pt, fp.gamma) * std::log(pt);
}

inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Cross-entropy between softmax(logits) and the uniform target over the
/// span. Minimized when all predicted mass sits uniformly on the span.
inline double soft_token_loss(std::span<const double> logits, const TokenSpan& span) {
  if (static_cast<int>(logits.size()) != span.total)
    throw std::invalid_argument("soft_token_loss: logits length != span total");
  const double lse = log_sum_exp(logits);
  double span_mean = 0.0;
  for (int j = span.start; j < span.end; ++j) span_mean += logits[j];
  span_mean /= static_cast<double>(span.end - span.start);
  return lse - span_mean;
}

/// Target span for predictions left unmatched by the matcher: the designated
/// no-object position at the end of the token sequence.
inline TokenSpan no_object_span(int total = kDefaultTokenLength) {
  return TokenSpan(total - 1, total, total);
}

/// Uniform-weight reduction of per-block auxiliary losses.
inline double auxiliary_loss(std::span<const double> block_losses) {
  if (block_losses.empty())
    throw std::invalid_argument("auxiliary_loss: no block losses given");
  double s = 0.0;
  for (double v : block_losses) s += v;
  return s / static_cast<double>(block_losses.size());
}

/// Student objective: classification (focal or soft-token) plus the weighted
/// box loss. The relative classification weight is configuration.
inline double student_objective(double classification_loss, double box_loss_value,
                                double classification_weight = 1.0) {
  return classification_weight * classification_loss + box_loss_value;
}

// ---------------------------------------------------------------------------
// Analytic gradients (with respect to the prediction parameters)

/// d(giou_loss)/d(pred corners). Piecewise-smooth; at min/max ties the
/// one-sided derivative of the evaluated branch is returned.
inline std::array<double, 4> giou_loss_grad(const BBox& gt, const BBox& pred) {
  const double gx1 = gt.x1, gy1 = gt.y1, gx2 = gt.x2, gy2 = gt.y2;
  const double px1 = pred.x1, py1 = pred.y1, px2 = pred.x2, py2 = pred.y2;
  const double pw = px2 - px1, ph = py2 - py1;
  const double ag = area(gt), ap = area(pred);

  const double dap[4] = {-ph, -pw, ph, pw};

  const double ix1 = std::max(gx1, px1), iy1 = std::max(gy1, py1);
  const double ix2 = std::min(gx2, px2), iy2 = std::min(gy2, py2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;

  double dinter[4] = {0.0, 0.0, 0.0, 0.0};
  if (overlap) {
    if (px1 > gx1) dinter[0] = -ih;
    if (py1 > gy1) dinter[1] = -iw;
    if (px2 < gx2) dinter[2] = ih;
    if (py2 < gy2) dinter[3] = iw;
  }

  const double uni = ag + ap - inter;
  double duni[4];
  for (int i = 0; i < 4; ++i) duni[i] = dap[i] - dinter[i];

  const double hx1 = std::min(gx1, px1), hy1 = std::min(gy1, py1);
  const double hx2 = std::max(gx2, px2), hy2 = std::max(gy2, py2);
  const double hw = hx2 - hx1, hh = hy2 - hy1;
  const double hull = hw * hh;
  double dhull[4] = {0.0, 0.0, 0.0, 0.0};
  if (px1 < gx1) dhull[0] = -hh;
  if (py1 < gy1) dhull[1] = -hw;
  if (px2 > gx2) dhull[2] = hh;
  if (py2 > gy2) dhull[3] = hw;

  // giou = inter/uni - 1 + uni/hull, loss = 1 - giou
  std::array<double, 4> g{};
  for (int i = 0; i < 4; ++i) {
    const double diou = (dinter[i] * uni - inter * duni[i]) / (uni * uni);
    const double dpen = (duni[i] * hull - uni * dhull[i]) / (hull * hull);
    g[i] = -(diou + dpen);
  }
  return g;
}

/// d(l1_box)/d(pred corners). Throws NonDifferentiable when any normalized
/// center-size coordinate difference is exactly zero.
inline std::array<double, 4> l1_box_grad(const BBox& gt, const BBox& pred,
                                         const ImageRecord& norm) {
  const auto a = norm_center_size(gt, norm);
  const auto b = norm_center_size(pred, norm);
  double s[4];
  for (int i = 0; i < 4; ++i) {
    const double d = b[i] - a[i];
    if (d == 0.0)
      throw NonDifferentiable("l1_box_grad: coordinate " + std::to_string(i) +
                              " sits on the L1 kink");
    s[i] = d > 0.0 ? 1.0 : -1.0;
  }
  const double w = static_cast<double>(norm.width);
  const double h = static_cast<double>(norm.height);
  return {s[0] / (2.0 * w) - s[2] / w, s[1] / (2.0 * h) - s[3] / h,
          s[0] / (2.0 * w) + s[2] / w, s[1] / (2.0 * h) + s[3] / h};
}

inline std::array<double, 4> box_loss_grad(const BBox& gt, const BBox& pred,
                                           const LossWeights& w,
                                           const ImageRecord& norm) {
  detail::check_weights(w);
  const auto gg = giou_loss_grad(gt, pred);
  const auto gl = l1_box_grad(gt, pred, norm);
  std::array<double, 4> g{};
  for (int i = 0; i < 4; ++i) g[i] = w.lambda1 * gg[i] + w.lambda2 * gl[i];
  return g;
}

/// d(focal_loss)/dp.
inline double focal_loss_grad(double p, bool positive, const FocalParams& fp = {}) {
  detail::check_focal(fp);
  detail::check_probability(p);
  const double pt = positive ? p : 1.0 - p;
  const double at = positive ? fp.alpha : 1.0 - fp.alpha;
  const double dldpt =
      (fp.gamma == 0.0
           ? 0.0
           : at * fp.gamma * std::pow(1.0 - pt, fp.gamma - 1.0) * std::log(pt)) -
      at * std::pow(1.0 - pt, fp.gamma) / pt;
  return positive ? dldpt : -dldpt;
}

/// d(soft_token_loss)/d(logits) = softmax - uniform span target; components
/// always sum to zero.
inline std::vector<double> soft_token_loss_grad(std::span<const double> logits,
                                                const TokenSpan& span) {
  if (static_cast<int>(logits.size()) != span.total)
    throw std::invalid_argument("soft_token_loss_grad: logits length != span total");
  const double lse = log_sum_exp(logits);
  const double invk = 1.0 / static_cast<double>(span.end - span.start);
  std::vector<double> g(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    g[j] = std::exp(logits[j] - lse);
    const int ji = static_cast<int>(j);
    if (ji >= span.start && ji < span.end) g[j] -= invk;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Generic probes for gradient verification

enum class LossKind { giou, l1, box, focal, soft_token };

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "giou") return LossKind::giou;
  if (s == "l1") return LossKind::l1;
  if (s == "box") return LossKind::box;
  if (s == "focal") return LossKind::focal;
  if (s == "soft_token") return LossKind::soft_token;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

/// A scalar loss restricted to the parameters being differentiated, bundled
/// with its analytic gradient and a predicate marking points safely away
/// from non-smooth loci.
struct LossProbe {
  int dim = 0;
  std::function<double(std::span<const double>)> value;
  std::function<std::vector<double>(std::span<const double>)> gradient;
  std::function<bool(std::span<const double>, double margin)> smooth_at;
};

namespace detail {

inline BBox box_from_point(std::span<const double> x) {
  return BBox(x[0], x[1], x[2], x[3]);
}

inline bool giou_smooth_at(const BBox& gt, std::span<const double> x, double m) {
  if (!(x[2] - x[0] > m && x[3] - x[1] > m)) return false;  // near-degenerate
  if (std::abs(x[0] - gt.x1) <= m || std::abs(x[1] - gt.y1) <= m ||
      std::abs(x[2] - gt.x2) <= m || std::abs(x[3] - gt.y2) <= m)
    return false;  // min/max tie in hull or intersection corners
  const double iw = std::min(gt.x2, x[2]) - std::max(gt.x1, x[0]);
  const double ih = std::min(gt.y2, x[3]) - std::max(gt.y1, x[1]);
  // smooth when strictly overlapping or strictly separated
  return (iw > m && ih > m) || iw < -m || ih < -m;
}

inline bool l1_smooth_at(const BBox& gt, std::span<const double> x, double m,
                         const ImageRecord& norm) {
  if (!(x[2] - x[0] > m && x[3] - x[1] > m)) return false;
  const auto a = norm_center_size(gt, norm);
  const auto b = norm_center_size(box_from_point(x), norm);
  const double margin_t = m / std::min(norm.width, norm.height);
  for (int i = 0; i < 4; ++i)
    if (std::abs(b[i] - a[i]) <= margin_t) return false;
  return true;
}

}  // namespace detail

/// Probe over the four prediction corners; gt, weights and the normalizing
/// image stay fixed.
inline LossProbe make_box_probe(LossKind kind, const BBox& gt,
                                const LossWeights& w = {},
                                const ImageRecord& norm = {0, 1, 1}) {
  LossProbe probe;
  probe.dim = 4;
  switch (kind) {
    case LossKind::giou:
      probe.value = [gt](std::span<const double> x) {
        return giou_loss(gt, detail::box_from_point(x));
      };
      probe.gradient = [gt](std::span<const double> x) {
        const auto g = giou_loss_grad(gt, detail::box_from_point(x));
        return std::vector<double>(g.begin(), g.end());
      };
      probe.smooth_at = [gt](std::span<const double> x, double m) {
        return detail::giou_smooth_at(gt, x, m);
      };
      break;
    case LossKind::l1:
      probe.value = [gt, norm](std::span<const double> x) {
        return l1_box(gt, detail::box_from_point(x), norm);
      };
      probe.gradient = [gt, norm](std::span<const double> x) {
        const auto g = l1_box_grad(gt, detail::box_from_point(x), norm);
        return std::vector<double>(g.begin(), g.end());
      };
      probe.smooth_at = [gt, norm](std::span<const double> x, double m) {
        return detail::l1_smooth_at(gt, x, m, norm);
      };
      break;
    case LossKind::box:
      probe.value = [gt, w, norm](std::span<const double> x) {
        return box_loss(gt, detail::box_from_point(x), w, norm);
      };
      probe.gradient = [gt, w, norm](std::span<const double> x) {
        const auto g = box_loss_grad(gt, detail::box_from_point(x), w, norm);
        return std::vector<double>(g.begin(), g.end());
      };
      probe.smooth_at = [gt, norm](std::span<const double> x, double m) {
        return detail::giou_smooth_at(gt, x, m) && detail::l1_smooth_at(gt, x, m, norm);
      };
      break;
    default:
      throw std::invalid_argument("make_box_probe: not a box loss");
  }
  return probe;
}

inline LossProbe make_focal_probe(bool positive, const FocalParams& fp = {}) {
  LossProbe probe;
  probe.dim = 1;
  probe.value = [positive, fp](std::span<const double> x) {
    return focal_loss(x[0], positive, fp);
  };
  probe.gradient = [positive, fp](std::span<const double> x) {
    return std::vector<double>{focal_loss_grad(x[0], positive, fp)};
  };
  probe.smooth_at = [](std::span<const double> x, double m) {
    return x[0] > m && x[0] < 1.0 - m;
  };
  return probe;
}

inline LossProbe make_soft_token_probe(const TokenSpan& span) {
  LossProbe probe;
  probe.dim = span.total;
  probe.value = [span](std::span<const double> x) { return soft_token_loss(x, span); };
  probe.gradient = [span](std::span<const double> x) {
    return soft_token_loss_grad(x, span);
  };
  probe.smooth_at = [](std::span<const double>, double) { return true; };
  return probe;
}

/// Max over coordinates of |analytic - central difference| relative error.
/// Refuses points within 10*eps of a non-smooth locus.
inline double grad_check(const LossProbe& probe, std::span<const double> point,
                         double eps) {
  if (!probe.smooth_at(point, 10.0 * eps))
    throw NonDifferentiable(
        "grad_check: point within 10*eps of a non-smooth locus");
  const auto analytic = probe.gradient(point);
  std::vector<double> x(point.begin(), point.end());
  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = probe.value(x);
    x[i] = orig - eps;
    const double fm = probe.value(x);
    x[i] = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - fd) / std::max(1e-8, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

/// Runs grad_check at `trials` random smooth points of the named loss and
/// returns the worst relative error seen. Backs the `loss-check` command.
inline double loss_check_trials(LossKind kind, int trials, double eps,
                                std::uint64_t seed) {
  SplitMix64 rng(seed);
  const ImageRecord norm{.id = 0, .width = 128, .height = 96};
  double worst = 0.0;
  int done = 0;
  int attempts = 0;
  const int max_attempts = trials * 200;
  while (done < trials) {
    if (++attempts > max_attempts)
      throw std::runtime_error("loss_check_trials: failed to sample smooth points");
    std::vector<double> point;
    LossProbe probe;
    switch (kind) {
      case LossKind::giou:
      case LossKind::l1:
      case LossKind::box: {
        auto sample_box = [&]() {
          const double x1 = rng.uniform(0.0, 90.0);
          const double y1 = rng.uniform(0.0, 60.0);
          return BBox(x1, y1, x1 + rng.uniform(4.0, 30.0),
                      y1 + rng.uniform(4.0, 30.0));
        };
        const BBox gt = sample_box();
        const BBox pred = sample_box();
        probe = make_box_probe(kind, gt, LossWeights{}, norm);
        point = {pred.x1, pred.y1, pred.x2, pred.y2};
        break;
      }
      case LossKind::focal: {
        probe = make_focal_probe(rng.next_double() < 0.5,
                                 FocalParams{rng.uniform(0.05, 0.95),
                                             rng.uniform(0.0, 4.0)});
        point = {rng.uniform(0.05, 0.95)};
        break;
      }
      case LossKind::soft_token: {
        const int total = rng.uniform_int(2, 12);
        const int start = rng.uniform_int(0, total - 1);
        const int end = rng.uniform_int(start + 1, total);
        probe = make_soft_token_probe(TokenSpan(start, end, total));
        point.resize(total);
        for (auto& v : point) v = rng.uniform(-3.0, 3.0);
        break;
      }
    }
    if (!probe.smooth_at(point, 10.0 * eps)) continue;
    worst = std::max(worst, grad_check(probe, point, eps));
    ++done;
  }
  return worst;
}

}  // namespace ccdet

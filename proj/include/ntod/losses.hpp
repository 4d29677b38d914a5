#pragma once

#include "ntod/annotations.hpp"

namespace ntod {

struct FocalParams {
    double gamma = 2.0;
    double alpha = 0.25;
};

/// Sigmoid focal loss of one logit against a binary target; `grad` receives dL/dlogit.
double focal_loss(double logit, bool positive, const FocalParams& p, double* grad = nullptr);

/// Distances from a location to the four box edges.
struct Ltrb {
    double l = 0.0, t = 0.0, r = 0.0, b = 0.0;
};

BoundingBox decode_ltrb(double px, double py, const Ltrb& d);

/// 1 - GIoU between the box decoded at (px, py) and `target`; `grad` receives
/// the derivative w.r.t. l, t, r, b.
double giou_loss(double px, double py, const Ltrb& d, const BoundingBox& target, Ltrb* grad = nullptr);

}  // namespace ntod

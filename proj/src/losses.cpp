#include "ntod/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ntod {
namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

double focal_loss(double logit, bool positive, const FocalParams& p, double* grad) {
    const double prob = sigmoid(logit);
    if (positive) {
        const double log_p = -softplus(-logit);
        const double q = 1.0 - prob;
        const double mod = std::pow(q, p.gamma);
        if (grad) *grad = p.alpha * mod * (p.gamma * prob * log_p - q);
        return -p.alpha * mod * log_p;
    }
    const double log_q = -softplus(logit);
    const double mod = std::pow(prob, p.gamma);
    if (grad) *grad = -(1.0 - p.alpha) * mod * (p.gamma * (1.0 - prob) * log_q - prob);
    return -(1.0 - p.alpha) * mod * log_q;
}

BoundingBox decode_ltrb(double px, double py, const Ltrb& d) {
    return BoundingBox::from_corner(px - d.l, py - d.t, d.l + d.r, d.t + d.b);
}

double giou_loss(double px, double py, const Ltrb& d, const BoundingBox& target, Ltrb* grad) {
    const double x1 = px - d.l, y1 = py - d.t, x2 = px + d.r, y2 = py + d.b;
    const double tx1 = target.x_min(), ty1 = target.y_min(), tx2 = target.x_max(), ty2 = target.y_max();

    const double ix = std::min(x2, tx2) - std::max(x1, tx1);
    const double iy = std::min(y2, ty2) - std::max(y1, ty1);
    const bool overlap = ix > 0.0 && iy > 0.0;
    const double iw = overlap ? ix : 0.0;
    const double ih = overlap ? iy : 0.0;
    const double inter = iw * ih;
    const double area_p = (x2 - x1) * (y2 - y1);
    const double area_t = (tx2 - tx1) * (ty2 - ty1);
    const double uni = area_p + area_t - inter;
    const double ew = std::max(x2, tx2) - std::min(x1, tx1);
    const double eh = std::max(y2, ty2) - std::min(y1, ty1);
    const double enc = ew * eh;
    const double loss = 2.0 - inter / uni - uni / enc;

    if (grad) {
        // derivatives w.r.t. the corners x1, y1, x2, y2
        double d_iw[4] = {0, 0, 0, 0}, d_ih[4] = {0, 0, 0, 0};
        if (overlap) {
            if (x1 > tx1) d_iw[0] = -1.0;
            if (x2 < tx2) d_iw[2] = 1.0;
            if (y1 > ty1) d_ih[1] = -1.0;
            if (y2 < ty2) d_ih[3] = 1.0;
        }
        const double d_ap[4] = {-(y2 - y1), -(x2 - x1), (y2 - y1), (x2 - x1)};
        double d_ew[4] = {0, 0, 0, 0}, d_eh[4] = {0, 0, 0, 0};
        if (x1 < tx1) d_ew[0] = -1.0;
        if (x2 > tx2) d_ew[2] = 1.0;
        if (y1 < ty1) d_eh[1] = -1.0;
        if (y2 > ty2) d_eh[3] = 1.0;
        double g[4];
        for (int k = 0; k < 4; ++k) {
            const double d_inter = ih * d_iw[k] + iw * d_ih[k];
            const double d_uni = d_ap[k] - d_inter;
            const double d_enc = eh * d_ew[k] + ew * d_eh[k];
            g[k] = -(d_inter * uni - inter * d_uni) / (uni * uni) - (d_uni * enc - uni * d_enc) / (enc * enc);
        }
        grad->l = -g[0];
        grad->t = -g[1];
        grad->r = g[2];
        grad->b = g[3];
    }
    return loss;
}

}  // namespace ntod

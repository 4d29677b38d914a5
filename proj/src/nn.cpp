#include "ntod/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ntod::nn {

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(kernel / 2) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || kernel % 2 == 0 || stride < 1) {
        throw std::invalid_argument("bad convolution shape for " + name);
    }
    weight_ = {name + ".weight", Mat::Zero(out_, in_ * kernel_ * kernel_), Mat::Zero(out_, in_ * kernel_ * kernel_)};
    bias_ = {name + ".bias", Mat::Zero(out_, 1), Mat::Zero(out_, 1)};
}

void Conv2d::init_he(std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(in_ * kernel_ * kernel_);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (Eigen::Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = dist(rng);
    bias_.value.setZero();
}

FeatureMap Conv2d::forward(const FeatureMap& x) {
    if (x.channels != in_) throw std::invalid_argument(weight_.name + ": channel mismatch");
    in_h_ = x.height;
    in_w_ = x.width;
    out_h_ = (x.height + 2 * pad_ - kernel_) / stride_ + 1;
    out_w_ = (x.width + 2 * pad_ - kernel_) / stride_ + 1;
    const Eigen::Index npix = static_cast<Eigen::Index>(out_h_) * out_w_;

    FeatureMap y{out_, out_h_, out_w_, Mat()};
    if (kernel_ == 1 && stride_ == 1) {
        cols_ = x.data;
    } else {
        cols_.resize(static_cast<Eigen::Index>(in_) * kernel_ * kernel_, npix);
        for (int c = 0; c < in_; ++c) {
            const double* src = x.data.row(c).data();
            for (int ky = 0; ky < kernel_; ++ky) {
                for (int kx = 0; kx < kernel_; ++kx) {
                    double* dst = cols_.row((c * kernel_ + ky) * kernel_ + kx).data();
                    for (int oy = 0; oy < out_h_; ++oy) {
                        const int iy = oy * stride_ + ky - pad_;
                        double* drow = dst + static_cast<ptrdiff_t>(oy) * out_w_;
                        if (iy < 0 || iy >= in_h_) {
                            std::fill(drow, drow + out_w_, 0.0);
                            continue;
                        }
                        const double* srow = src + static_cast<ptrdiff_t>(iy) * in_w_;
                        for (int ox = 0; ox < out_w_; ++ox) {
                            const int ix = ox * stride_ + kx - pad_;
                            drow[ox] = (ix >= 0 && ix < in_w_) ? srow[ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
    y.data.noalias() = weight_.value * cols_;
    y.data.colwise() += bias_.value.col(0);
    return y;
}

FeatureMap Conv2d::backward(const FeatureMap& grad_out) {
    weight_.grad.noalias() += grad_out.data * cols_.transpose();
    bias_.grad.col(0) += grad_out.data.rowwise().sum().transpose();
    Mat dcols = weight_.value.transpose() * grad_out.data;

    FeatureMap dx = FeatureMap::zeros(in_, in_h_, in_w_);
    if (kernel_ == 1 && stride_ == 1) {
        dx.data = std::move(dcols);
        return dx;
    }
    for (int c = 0; c < in_; ++c) {
        double* dst = dx.data.row(c).data();
        for (int ky = 0; ky < kernel_; ++ky) {
            for (int kx = 0; kx < kernel_; ++kx) {
                const double* src = dcols.row((c * kernel_ + ky) * kernel_ + kx).data();
                for (int oy = 0; oy < out_h_; ++oy) {
                    const int iy = oy * stride_ + ky - pad_;
                    if (iy < 0 || iy >= in_h_) continue;
                    double* drow = dst + static_cast<ptrdiff_t>(iy) * in_w_;
                    const double* srow = src + static_cast<ptrdiff_t>(oy) * out_w_;
                    for (int ox = 0; ox < out_w_; ++ox) {
                        const int ix = ox * stride_ + kx - pad_;
                        if (ix >= 0 && ix < in_w_) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
    return dx;
}

void Relu::forward(FeatureMap& x) {
    mask_ = (x.data.array() > 0.0).cast<double>().matrix();
    x.data = x.data.cwiseMax(0.0);
}

void Relu::backward(FeatureMap& grad) const { grad.data = grad.data.cwiseProduct(mask_); }

}  // namespace ntod::nn

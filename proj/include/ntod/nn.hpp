#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ntod::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Activations of one image: rows are channels, columns are pixels (row-major y, x).
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    Mat data;

    static FeatureMap zeros(int c, int h, int w) { return {c, h, w, Mat::Zero(c, static_cast<Eigen::Index>(h) * w)}; }
};

struct Param {
    std::string name;
    Mat value;
    Mat grad;
};

/// Square-kernel 2-D convolution with zero padding. Keeps the im2col buffer of the
/// last forward call, so forward/backward must alternate per image.
class Conv2d {
public:
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride);

    FeatureMap forward(const FeatureMap& x);
    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    FeatureMap backward(const FeatureMap& grad_out);

    void init_he(std::mt19937_64& rng);
    Param& weight() { return weight_; }
    Param& bias() { return bias_; }
    int out_channels() const { return out_; }

private:
    int in_;
    int out_;
    int kernel_;
    int stride_;
    int pad_;
    Param weight_;  // out x (in * k * k)
    Param bias_;    // out x 1
    Mat cols_;
    int in_h_ = 0;
    int in_w_ = 0;
    int out_h_ = 0;
    int out_w_ = 0;
};

/// In-place ReLU that remembers its mask.
class Relu {
public:
    void forward(FeatureMap& x);
    void backward(FeatureMap& grad) const;

private:
    Mat mask_;
};

}  // namespace ntod::nn

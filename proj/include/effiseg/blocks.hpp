#pragma once

#include <string>

#include "effiseg/ops.hpp"
#include "effiseg/parameters.hpp"

namespace effiseg {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Affine batch normalisation with running statistics. A fresh instance is
/// the identity configuration (gamma 1, beta 0, mean 0, var 1).
template <typename Scalar>
struct BatchNorm2d {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  Tensor4<Scalar> running_mean;
  Tensor4<Scalar> running_var;

  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels)
      : gamma(Var<Scalar>::parameter(Tensor4<Scalar>(Shape4{channels, 1, 1, 1}, Scalar(1)))),
        beta(Var<Scalar>::parameter(Tensor4<Scalar>(Shape4{channels, 1, 1, 1}))),
        running_mean(Shape4{channels, 1, 1, 1}),
        running_var(Shape4{channels, 1, 1, 1}, Scalar(1)) {}

  Index channels() const { return gamma.shape().n; }

  Var<Scalar> operator()(const Var<Scalar>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, static_cast<Scalar>(kBatchNormEps),
                      static_cast<Scalar>(kBatchNormMomentum));
  }

  void register_into(ParameterRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add(prefix + "weight", gamma);
    reg.add(prefix + "bias", beta);
    reg.add_buffer(prefix + "running_mean", running_mean);
    reg.add_buffer(prefix + "running_var", running_var);
  }
};

/// Parallel 3x3, 1x3 and 3x1 bias-free kernels sharing one post-sum batch norm.
template <typename Scalar>
struct AsymmetricBlockParams {
  Var<Scalar> k33;
  Var<Scalar> k13;
  Var<Scalar> k31;
  BatchNorm2d<Scalar> bn;

  static AsymmetricBlockParams make(Index c_in, Index c_out, Rng& rng) {
    AsymmetricBlockParams p;
    p.k33 = init_kernel<Scalar>(Shape4{c_out, c_in, 3, 3}, rng);
    p.k13 = init_kernel<Scalar>(Shape4{c_out, c_in, 1, 3}, rng);
    p.k31 = init_kernel<Scalar>(Shape4{c_out, c_in, 3, 1}, rng);
    p.bn = BatchNorm2d<Scalar>(c_out);
    return p;
  }

  Index c_in() const { return k33.shape().c; }
  Index c_out() const { return k33.shape().n; }

  void validate() const {
    const Shape4& s = k33.shape();
    if (k13.shape() != Shape4{s.n, s.c, 1, 3} || k31.shape() != Shape4{s.n, s.c, 3, 1} || s.h != 3 || s.w != 3) {
      throw ShapeError("asymmetric block kernels disagree: " + s.str() + ", " + k13.shape().str() + ", " +
                       k31.shape().str());
    }
    if (bn.channels() != s.n) throw ShapeError("asymmetric block batch norm has wrong channel count");
    if (!(bn.running_var.array() > Scalar(0)).all()) {
      throw NumericError("asymmetric block running variance must be positive");
    }
  }

  void register_into(ParameterRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add(prefix + "k33", k33);
    reg.add(prefix + "k13", k13);
    reg.add(prefix + "k31", k31);
    bn.register_into(reg, prefix + "bn.");
  }
};

/// conv3x3(x) + conv1x3(x) + conv3x1(x), each branch same-padded.
template <typename Scalar>
Var<Scalar> asymmetric_preactivation(const Var<Scalar>& x, const AsymmetricBlockParams<Scalar>& p) {
  p.validate();
  if (x.shape().c != p.c_in()) {
    throw ShapeError("asymmetric block expects " + std::to_string(p.c_in()) + " input channels, got input " +
                     x.shape().str());
  }
  if (!x.value().all_finite()) throw NumericError("asymmetric block input contains NaN or Inf");
  return conv2d(x, fuse_asymmetric_kernels(p.k33, p.k13, p.k31), Conv2dOptions{1, 1, 1, false});
}

/// ReLU(BN(conv3x3(x) + conv1x3(x) + conv3x1(x))).
template <typename Scalar>
Var<Scalar> asymmetric_conv_block(const Var<Scalar>& x, AsymmetricBlockParams<Scalar>& p, bool training) {
  return relu(p.bn(asymmetric_preactivation(x, p), training));
}

enum class Activation { ReLU, SiLU };

template <typename Scalar>
Var<Scalar> activate(const Var<Scalar>& x, Activation act) {
  return act == Activation::ReLU ? relu(x) : silu(x);
}

/// Squeeze-and-excitation weights. fc1 squeezes c -> squeeze channels,
/// fc2 expands back; both are 1x1 convolutions with bias.
template <typename Scalar>
struct SEBlockParams {
  Var<Scalar> w_squeeze;  // (squeeze, c, 1, 1)
  Var<Scalar> b_squeeze;  // (squeeze, 1, 1, 1)
  Var<Scalar> w_excite;   // (c, squeeze, 1, 1)
  Var<Scalar> b_excite;   // (c, 1, 1, 1)
  Activation activation = Activation::ReLU;

  /// Decoder variant: squeeze = c / ratio, ReLU bottleneck.
  static SEBlockParams make(Index channels, Index ratio, Rng& rng) {
    if (ratio < 1 || channels % ratio != 0) {
      throw ConfigError("squeeze-excitation: " + std::to_string(channels) + " channels not divisible by ratio " +
                        std::to_string(ratio));
    }
    return make_with_squeeze(channels, channels / ratio, Activation::ReLU, rng);
  }

  static SEBlockParams make_with_squeeze(Index channels, Index squeeze, Activation act, Rng& rng) {
    SEBlockParams p;
    p.w_squeeze = init_kernel<Scalar>(Shape4{squeeze, channels, 1, 1}, rng);
    p.b_squeeze = init_bias<Scalar>(squeeze, channels, rng);
    p.w_excite = init_kernel<Scalar>(Shape4{channels, squeeze, 1, 1}, rng);
    p.b_excite = init_bias<Scalar>(channels, squeeze, rng);
    p.activation = act;
    return p;
  }

  Index channels() const { return w_squeeze.shape().c; }
  Index squeeze() const { return w_squeeze.shape().n; }

  void register_into(ParameterRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add(prefix + "fc1.weight", w_squeeze);
    reg.add(prefix + "fc1.bias", b_squeeze);
    reg.add(prefix + "fc2.weight", w_excite);
    reg.add(prefix + "fc2.bias", b_excite);
  }
};

/// Per-(sample, channel) gates in (0, 1), shaped (n, c, 1, 1).
template <typename Scalar>
Var<Scalar> se_scales(const Var<Scalar>& x, const SEBlockParams<Scalar>& p) {
  if (x.shape().c != p.channels()) {
    throw ShapeError("squeeze-excitation expects " + std::to_string(p.channels()) + " channels, got input " +
                     x.shape().str());
  }
  Var<Scalar> z = add_channel_bias(conv2d(global_avg_pool(x), p.w_squeeze), p.b_squeeze);
  z = activate(z, p.activation);
  return sigmoid(add_channel_bias(conv2d(z, p.w_excite), p.b_excite));
}

template <typename Scalar>
Var<Scalar> squeeze_excitation(const Var<Scalar>& x, const SEBlockParams<Scalar>& p) {
  return scale_channels(x, se_scales(x, p));
}

/// 3x3 same-padded convolution to a fixed channel count, then BN and ReLU.
template <typename Scalar>
struct ChannelReduceParams {
  Var<Scalar> kernel;  // (c_out, c_in, 3, 3)
  BatchNorm2d<Scalar> bn;

  static ChannelReduceParams make(Index c_in, Index c_out, Rng& rng) {
    if (c_in < 1) throw ConfigError("channel_reduce needs at least one input channel");
    ChannelReduceParams p;
    p.kernel = init_kernel<Scalar>(Shape4{c_out, c_in, 3, 3}, rng);
    p.bn = BatchNorm2d<Scalar>(c_out);
    return p;
  }

  Index c_in() const { return kernel.shape().c; }
  Index c_out() const { return kernel.shape().n; }

  void register_into(ParameterRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add(prefix + "conv.weight", kernel);
    bn.register_into(reg, prefix + "bn.");
  }
};

template <typename Scalar>
Var<Scalar> channel_reduce(const Var<Scalar>& x, ChannelReduceParams<Scalar>& p, bool training) {
  if (x.shape().c != p.c_in()) {
    throw ShapeError("channel_reduce expects " + std::to_string(p.c_in()) + " input channels, got input " +
                     x.shape().str());
  }
  return relu(p.bn(conv2d(x, p.kernel, Conv2dOptions{1, 1, 1, false}), training));
}

enum class ResampleDirection { Up, Down };

/// Up: bilinear (align_corners = false). Down: max pooling, window = stride = factor.
template <typename Scalar>
Var<Scalar> resample(const Var<Scalar>& x, Index factor, ResampleDirection direction) {
  if (factor < 1 || (factor & (factor - 1)) != 0) {
    throw ShapeError("resample factor must be a power of two, got " + std::to_string(factor));
  }
  if (factor == 1) return x;
  if (direction == ResampleDirection::Down) return max_pool(x, factor);
  return resize_bilinear(x, x.shape().h * factor, x.shape().w * factor);
}

enum class BlockKind { Asymmetric, SqueezeExcitation, Reduce };

/// Closed-form trainable parameter count.
///   Asymmetric: c_in*c_out*(9+3+3) + 2*c_out   (bias-free branches, one BN)
///   SqueezeExcitation (c = c_in): c*(c/r) + c/r + (c/r)*c + c
///   Reduce: c_in*c_out*9 + 2*c_out
inline Index block_param_count(BlockKind kind, Index c_in, Index c_out, Index ratio = 16) {
  switch (kind) {
    case BlockKind::Asymmetric:
      return c_in * c_out * 15 + 2 * c_out;
    case BlockKind::SqueezeExcitation: {
      if (ratio < 1 || c_in % ratio != 0) {
        throw ConfigError("squeeze-excitation: " + std::to_string(c_in) + " channels not divisible by ratio " +
                          std::to_string(ratio));
      }
      const Index s = c_in / ratio;
      return c_in * s + s + s * c_in + c_in;
    }
    case BlockKind::Reduce:
      return c_in * c_out * 9 + 2 * c_out;
  }
  return 0;
}

}  // namespace effiseg

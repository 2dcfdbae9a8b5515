#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "effiseg/autograd.hpp"

namespace effiseg {

struct Conv2dOptions {
  Index stride = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  /// Weight is (c, 1, kh, kw) and each channel is convolved on its own.
  bool depthwise = false;
};

namespace detail {

struct ConvGeometry {
  Index n, c_in, h, w;
  Index c_out, kh, kw;
  Index stride, pad_h, pad_w;
  Index h_out, w_out;

  Index patch() const { return c_in * kh * kw; }
  Index pixels_out() const { return h_out * w_out; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0; }
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  const Index p_out = g.pixels_out();
  for (Index ci = 0; ci < g.c_in; ++ci) {
    const Scalar* plane = x + ci * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = cols + ((ci * g.kh + ki) * g.kw + kj) * p_out;
        for (Index oy = 0; oy < g.h_out; ++oy) {
          const Index iy = oy * g.stride - g.pad_h + ki;
          Scalar* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.w_out, Scalar(0));
            continue;
          }
          for (Index ox = 0; ox < g.w_out; ++ox) {
            const Index ix = ox * g.stride - g.pad_w + kj;
            dst[ox] = (ix < 0 || ix >= g.w) ? Scalar(0) : plane[iy * g.w + ix];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* dx) {
  const Index p_out = g.pixels_out();
  for (Index ci = 0; ci < g.c_in; ++ci) {
    Scalar* plane = dx + ci * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = cols + ((ci * g.kh + ki) * g.kw + kj) * p_out;
        for (Index oy = 0; oy < g.h_out; ++oy) {
          const Index iy = oy * g.stride - g.pad_h + ki;
          if (iy < 0 || iy >= g.h) continue;
          const Scalar* src = row + oy * g.w_out;
          for (Index ox = 0; ox < g.w_out; ++ox) {
            const Index ix = ox * g.stride - g.pad_w + kj;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void depthwise_forward(const Scalar* x, const Scalar* k, const ConvGeometry& g, Scalar* y) {
  for (Index ki = 0; ki < g.kh; ++ki) {
    for (Index kj = 0; kj < g.kw; ++kj) {
      const Scalar kv = k[ki * g.kw + kj];
      for (Index oy = 0; oy < g.h_out; ++oy) {
        const Index iy = oy * g.stride - g.pad_h + ki;
        if (iy < 0 || iy >= g.h) continue;
        const Scalar* src = x + iy * g.w;
        Scalar* dst = y + oy * g.w_out;
        for (Index ox = 0; ox < g.w_out; ++ox) {
          const Index ix = ox * g.stride - g.pad_w + kj;
          if (ix >= 0 && ix < g.w) dst[ox] += kv * src[ix];
        }
      }
    }
  }
}

/// Accumulates input and kernel gradients of one depthwise plane; either output may be null.
template <typename Scalar>
void depthwise_backward(const Scalar* x, const Scalar* k, const Scalar* gy, const ConvGeometry& g, Scalar* dx,
                        Scalar* dk) {
  for (Index ki = 0; ki < g.kh; ++ki) {
    for (Index kj = 0; kj < g.kw; ++kj) {
      const Scalar kv = k[ki * g.kw + kj];
      Scalar acc = 0;
      for (Index oy = 0; oy < g.h_out; ++oy) {
        const Index iy = oy * g.stride - g.pad_h + ki;
        if (iy < 0 || iy >= g.h) continue;
        const Scalar* gsrc = gy + oy * g.w_out;
        for (Index ox = 0; ox < g.w_out; ++ox) {
          const Index ix = ox * g.stride - g.pad_w + kj;
          if (ix < 0 || ix >= g.w) continue;
          if (dx) dx[iy * g.w + ix] += kv * gsrc[ox];
          acc += gsrc[ox] * x[iy * g.w + ix];
        }
      }
      if (dk) dk[ki * g.kw + kj] += acc;
    }
  }
}

/// (out, in) interpolation matrix for 1-D bilinear resampling with half-pixel
/// centres (align_corners = false); source coordinates below 0 clamp to 0.
template <typename Scalar>
MatrixRM<Scalar> bilinear_matrix(Index in, Index out) {
  MatrixRM<Scalar> m = MatrixRM<Scalar>::Zero(out, in);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    m(i, i0) += static_cast<Scalar>(1.0 - frac);
    m(i, i1) += static_cast<Scalar>(frac);
  }
  return m;
}

}  // namespace detail

/// 2-D cross-correlation, bias-free. Dense weight is (c_out, c_in, kh, kw).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Conv2dOptions& opt = {}) {
  const Shape4& xs = x.shape();
  const Shape4& ws = weight.shape();
  if (opt.depthwise) {
    if (ws.n != xs.c || ws.c != 1) {
      throw ShapeError("depthwise conv: kernel " + ws.str() + " does not fit input " + xs.str());
    }
  } else if (ws.c != xs.c) {
    throw ShapeError("conv2d: kernel " + ws.str() + " expects " + std::to_string(ws.c) + " input channels, input is " +
                     xs.str());
  }
  if (opt.stride < 1 || opt.pad_h < 0 || opt.pad_w < 0) throw ShapeError("conv2d: invalid stride or padding");
  detail::ConvGeometry g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, ws.w, opt.stride, opt.pad_h, opt.pad_w, 0, 0};
  g.h_out = (xs.h + 2 * opt.pad_h - ws.h) / opt.stride + 1;
  g.w_out = (xs.w + 2 * opt.pad_w - ws.w) / opt.stride + 1;
  if (xs.h + 2 * opt.pad_h < ws.h || xs.w + 2 * opt.pad_w < ws.w || g.h_out < 1 || g.w_out < 1) {
    throw ShapeError("conv2d: kernel " + ws.str() + " larger than padded input " + xs.str());
  }

  Tensor4<Scalar> out(Shape4{xs.n, g.c_out, g.h_out, g.w_out});
  const Tensor4<Scalar>& xv = x.value();
  const Tensor4<Scalar>& wv = weight.value();

  if (opt.depthwise) {
    for (Index b = 0; b < g.n; ++b) {
      for (Index c = 0; c < g.c_in; ++c) {
        detail::depthwise_forward(xv.data() + xv.offset(b, c, 0, 0), wv.data() + c * g.kh * g.kw, g,
                                  out.data() + out.offset(b, c, 0, 0));
      }
    }
    auto xn = x.node();
    auto wn = weight.node();
    return record<Scalar>(std::move(out), {x, weight}, [xn, wn, g](const Tensor4<Scalar>& gy) {
      Scalar* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
      Scalar* dk = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
      const Tensor4<Scalar>& xval = xn->value;
      for (Index b = 0; b < g.n; ++b) {
        for (Index c = 0; c < g.c_in; ++c) {
          const Index in_off = xval.offset(b, c, 0, 0);
          detail::depthwise_backward(xval.data() + in_off, wn->value.data() + c * g.kh * g.kw,
                                     gy.data() + gy.offset(b, c, 0, 0), g, dx ? dx + in_off : nullptr,
                                     dk ? dk + c * g.kh * g.kw : nullptr);
        }
      }
    });
  }

  Eigen::Map<const MatrixRM<Scalar>> kernel(wv.data(), g.c_out, g.patch());
  MatrixRM<Scalar> cols;
  if (!g.pointwise()) cols.resize(g.patch(), g.pixels_out());
  for (Index b = 0; b < g.n; ++b) {
    if (g.pointwise()) {
      out.sample(b).noalias() = kernel * xv.sample(b);
    } else {
      detail::im2col(xv.data() + xv.offset(b, 0, 0, 0), g, cols.data());
      out.sample(b).noalias() = kernel * cols;
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  return record<Scalar>(std::move(out), {x, weight}, [xn, wn, g](const Tensor4<Scalar>& gy) {
    const Tensor4<Scalar>& xval = xn->value;
    Eigen::Map<const MatrixRM<Scalar>> kernel(wn->value.data(), g.c_out, g.patch());
    MatrixRM<Scalar> cols;
    MatrixRM<Scalar> dcols;
    if (!g.pointwise()) cols.resize(g.patch(), g.pixels_out());
    for (Index b = 0; b < g.n; ++b) {
      auto gb = gy.sample(b);
      if (g.pointwise()) {
        if (wn->requires_grad) {
          Eigen::Map<MatrixRM<Scalar>> dk(wn->grad_buffer().data(), g.c_out, g.patch());
          dk.noalias() += gb * xval.sample(b).transpose();
        }
        if (xn->requires_grad) xn->grad_buffer().sample(b).noalias() += kernel.transpose() * gb;
        continue;
      }
      if (wn->requires_grad) {
        detail::im2col(xval.data() + xval.offset(b, 0, 0, 0), g, cols.data());
        Eigen::Map<MatrixRM<Scalar>> dk(wn->grad_buffer().data(), g.c_out, g.patch());
        dk.noalias() += gb * cols.transpose();
      }
      if (xn->requires_grad) {
        dcols.noalias() = kernel.transpose() * gb;
        Tensor4<Scalar>& dx = xn->grad_buffer();
        detail::col2im_add(dcols.data(), g, dx.data() + dx.offset(b, 0, 0, 0));
      }
    }
  });
}

/// Adds a per-channel bias stored as (c, 1, 1, 1).
template <typename Scalar>
Var<Scalar> add_channel_bias(const Var<Scalar>& x, const Var<Scalar>& bias) {
  const Shape4& xs = x.shape();
  if (bias.shape() != Shape4{xs.c, 1, 1, 1}) {
    throw ShapeError("bias " + bias.shape().str() + " does not fit input " + xs.str());
  }
  Tensor4<Scalar> out = x.value();
  const auto& bv = bias.value().array();
  for (Index b = 0; b < xs.n; ++b) out.sample(b).array().colwise() += bv;
  auto xn = x.node();
  auto bn = bias.node();
  return record<Scalar>(std::move(out), {x, bias}, [xn, bn](const Tensor4<Scalar>& gy) {
    accumulate<Scalar>(xn, gy.array());
    if (bn->requires_grad) {
      auto& db = bn->grad_buffer().array();
      for (Index b = 0; b < gy.n(); ++b) db += gy.sample(b).rowwise().sum().array();
    }
  });
}

/// Batch normalisation over (n, h, w) per channel. Training mode normalises with
/// batch statistics and updates the running estimates (unbiased variance);
/// inference mode uses the running estimates.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Tensor4<Scalar>& running_mean, Tensor4<Scalar>& running_var, bool training, Scalar eps,
                       Scalar momentum) {
  const Shape4& xs = x.shape();
  const Shape4 vec{xs.c, 1, 1, 1};
  if (gamma.shape() != vec || beta.shape() != vec || running_mean.shape() != vec || running_var.shape() != vec) {
    throw ShapeError("batch_norm: parameters do not match " + std::to_string(xs.c) + " channels of input " + xs.str());
  }
  const Tensor4<Scalar>& xv = x.value();
  const Index count = xs.n * xs.plane();

  ArrayX<Scalar> mean;
  ArrayX<Scalar> var;
  if (training) {
    if (count < 2) {
      throw ShapeError("batch_norm in training mode needs more than one value per channel, input " + xs.str());
    }
    mean = ArrayX<Scalar>::Zero(xs.c);
    var = ArrayX<Scalar>::Zero(xs.c);
    for (Index b = 0; b < xs.n; ++b) mean += xv.sample(b).rowwise().sum().array();
    mean /= static_cast<Scalar>(count);
    for (Index b = 0; b < xs.n; ++b) {
      var += (xv.sample(b).array().colwise() - mean).square().rowwise().sum();
    }
    var /= static_cast<Scalar>(count);
    const Scalar unbias = static_cast<Scalar>(count) / static_cast<Scalar>(count - 1);
    running_mean.array() = (Scalar(1) - momentum) * running_mean.array() + momentum * mean;
    running_var.array() = (Scalar(1) - momentum) * running_var.array() + momentum * unbias * var;
  } else {
    mean = running_mean.array();
    var = running_var.array();
  }
  const ArrayX<Scalar> inv_std = (var + eps).rsqrt();

  Tensor4<Scalar> xhat(xs);
  Tensor4<Scalar> out(xs);
  const auto& g = gamma.value().array();
  const auto& bt = beta.value().array();
  for (Index b = 0; b < xs.n; ++b) {
    xhat.sample(b).array() = (xv.sample(b).array().colwise() - mean).colwise() * inv_std;
    out.sample(b).array() = (xhat.sample(b).array().colwise() * g).colwise() + bt;
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return record<Scalar>(std::move(out), {x, gamma, beta},
                        [xn, gn, bn, xhat = std::move(xhat), inv_std, training, count](const Tensor4<Scalar>& gy) {
                          const Index channels = gy.c();
                          ArrayX<Scalar> dgamma = ArrayX<Scalar>::Zero(channels);
                          ArrayX<Scalar> dbeta = ArrayX<Scalar>::Zero(channels);
                          for (Index b = 0; b < gy.n(); ++b) {
                            dbeta += gy.sample(b).rowwise().sum().array();
                            dgamma += (gy.sample(b).array() * xhat.sample(b).array()).rowwise().sum();
                          }
                          if (gn->requires_grad) gn->grad_buffer().array() += dgamma;
                          if (bn->requires_grad) bn->grad_buffer().array() += dbeta;
                          if (!xn->requires_grad) return;
                          const auto& gam = gn->value.array();
                          Tensor4<Scalar>& dx = xn->grad_buffer();
                          if (training) {
                            const Scalar m = static_cast<Scalar>(count);
                            const ArrayX<Scalar> scale = gam * inv_std / m;
                            for (Index b = 0; b < gy.n(); ++b) {
                              dx.sample(b).array() +=
                                  ((m * gy.sample(b).array()).colwise() - dbeta -
                                   xhat.sample(b).array().colwise() * dgamma)
                                      .colwise() *
                                  scale;
                            }
                          } else {
                            const ArrayX<Scalar> scale = gam * inv_std;
                            for (Index b = 0; b < gy.n(); ++b) {
                              dx.sample(b).array() += gy.sample(b).array().colwise() * scale;
                            }
                          }
                        });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor4<Scalar> out(x.shape(), x.value().array().max(Scalar(0)));
  auto xn = x.node();
  return record<Scalar>(std::move(out), {x}, [xn](const Tensor4<Scalar>& gy) {
    accumulate<Scalar>(xn, (xn->value.array() > Scalar(0)).select(gy.array(), Scalar(0)));
  });
}

namespace detail {
template <typename Derived>
auto logistic(const Eigen::ArrayBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return (Scalar(1) + (-x).exp()).inverse();
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor4<Scalar> out(x.shape(), detail::logistic(x.value().array()));
  auto xn = x.node();
  ArrayX<Scalar> y = out.array();
  return record<Scalar>(std::move(out), {x}, [xn, y = std::move(y)](const Tensor4<Scalar>& gy) {
    accumulate<Scalar>(xn, gy.array() * y * (Scalar(1) - y));
  });
}

/// x * sigmoid(x), the activation used throughout the EfficientNet backbone.
template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  const auto& xv = x.value().array();
  Tensor4<Scalar> out(x.shape(), xv * detail::logistic(xv));
  auto xn = x.node();
  return record<Scalar>(std::move(out), {x}, [xn](const Tensor4<Scalar>& gy) {
    const auto& xa = xn->value.array();
    const ArrayX<Scalar> s = detail::logistic(xa);
    accumulate<Scalar>(xn, gy.array() * s * (Scalar(1) + xa * (Scalar(1) - s)));
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + a.shape().str() + " vs " + b.shape().str());
  Tensor4<Scalar> out(a.shape(), a.value().array() + b.value().array());
  auto an = a.node();
  auto bn = b.node();
  return record<Scalar>(std::move(out), {a, b}, [an, bn](const Tensor4<Scalar>& gy) {
    accumulate<Scalar>(an, gy.array());
    accumulate<Scalar>(bn, gy.array());
  });
}

/// Concatenation along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  Shape4 s = parts.front().shape();
  Index channels = 0;
  for (const auto& p : parts) {
    const Shape4& ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_channels: " + ps.str() + " does not match " + s.str());
    }
    channels += ps.c;
  }
  s.c = channels;
  Tensor4<Scalar> out(s);
  Index at = 0;
  std::vector<typename Var<Scalar>::NodePtr> nodes;
  std::vector<Index> starts;
  for (const auto& p : parts) {
    for (Index b = 0; b < s.n; ++b) out.sample(b).middleRows(at, p.shape().c) = p.value().sample(b);
    nodes.push_back(p.node());
    starts.push_back(at);
    at += p.shape().c;
  }
  return record<Scalar>(std::move(out), parts, [nodes, starts](const Tensor4<Scalar>& gy) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!nodes[i]->requires_grad) continue;
      Tensor4<Scalar>& dx = nodes[i]->grad_buffer();
      for (Index b = 0; b < gy.n(); ++b) dx.sample(b) += gy.sample(b).middleRows(starts[i], dx.c());
    }
  });
}

/// Mean over (h, w): (n, c, h, w) -> (n, c, 1, 1).
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Shape4& xs = x.shape();
  Tensor4<Scalar> out(Shape4{xs.n, xs.c, 1, 1});
  for (Index b = 0; b < xs.n; ++b) out.sample(b) = x.value().sample(b).rowwise().mean();
  auto xn = x.node();
  return record<Scalar>(std::move(out), {x}, [xn](const Tensor4<Scalar>& gy) {
    if (!xn->requires_grad) return;
    Tensor4<Scalar>& dx = xn->grad_buffer();
    const Scalar inv = Scalar(1) / static_cast<Scalar>(dx.shape().plane());
    for (Index b = 0; b < gy.n(); ++b) {
      dx.sample(b).array().colwise() += gy.sample(b).col(0).array() * inv;
    }
  });
}

/// out[n, c, h, w] = x[n, c, h, w] * s[n, c], with s shaped (n, c, 1, 1).
template <typename Scalar>
Var<Scalar> scale_channels(const Var<Scalar>& x, const Var<Scalar>& s) {
  const Shape4& xs = x.shape();
  if (s.shape() != Shape4{xs.n, xs.c, 1, 1}) {
    throw ShapeError("scale_channels: scales " + s.shape().str() + " do not fit input " + xs.str());
  }
  Tensor4<Scalar> out(xs);
  for (Index b = 0; b < xs.n; ++b) {
    out.sample(b).array() = x.value().sample(b).array().colwise() * s.value().sample(b).col(0).array();
  }
  auto xn = x.node();
  auto sn = s.node();
  return record<Scalar>(std::move(out), {x, s}, [xn, sn](const Tensor4<Scalar>& gy) {
    for (Index b = 0; b < gy.n(); ++b) {
      if (xn->requires_grad) {
        xn->grad_buffer().sample(b).array() += gy.sample(b).array().colwise() * sn->value.sample(b).col(0).array();
      }
      if (sn->requires_grad) {
        sn->grad_buffer().sample(b).col(0).array() +=
            (gy.sample(b).array() * xn->value.sample(b).array()).rowwise().sum();
      }
    }
  });
}

/// Non-overlapping max pooling with window = stride = factor.
template <typename Scalar>
Var<Scalar> max_pool(const Var<Scalar>& x, Index factor) {
  const Shape4& xs = x.shape();
  if (factor < 1 || xs.h % factor != 0 || xs.w % factor != 0) {
    throw ShapeError("max_pool: spatial size " + std::to_string(xs.h) + "x" + std::to_string(xs.w) +
                     " is not divisible by " + std::to_string(factor));
  }
  const Shape4 os{xs.n, xs.c, xs.h / factor, xs.w / factor};
  Tensor4<Scalar> out(os);
  std::vector<Index> argmax(static_cast<std::size_t>(os.size()));
  const Tensor4<Scalar>& xv = x.value();
  Index k = 0;
  for (Index b = 0; b < os.n; ++b) {
    for (Index c = 0; c < os.c; ++c) {
      for (Index oy = 0; oy < os.h; ++oy) {
        for (Index ox = 0; ox < os.w; ++ox, ++k) {
          Index best = xv.offset(b, c, oy * factor, ox * factor);
          for (Index dy = 0; dy < factor; ++dy) {
            for (Index dx = 0; dx < factor; ++dx) {
              const Index at = xv.offset(b, c, oy * factor + dy, ox * factor + dx);
              if (xv.data()[at] > xv.data()[best]) best = at;
            }
          }
          argmax[static_cast<std::size_t>(k)] = best;
          out.data()[k] = xv.data()[best];
        }
      }
    }
  }
  auto xn = x.node();
  return record<Scalar>(std::move(out), {x}, [xn, argmax = std::move(argmax)](const Tensor4<Scalar>& gy) {
    if (!xn->requires_grad) return;
    Scalar* dx = xn->grad_buffer().data();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += gy.data()[i];
  });
}

/// Bilinear resize to (out_h, out_w), half-pixel centres (align_corners = false).
template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w) {
  const Shape4& xs = x.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: invalid target size");
  MatrixRM<Scalar> ry = detail::bilinear_matrix<Scalar>(xs.h, out_h);
  MatrixRM<Scalar> rx = detail::bilinear_matrix<Scalar>(xs.w, out_w);
  Tensor4<Scalar> out(Shape4{xs.n, xs.c, out_h, out_w});
  for (Index b = 0; b < xs.n; ++b) {
    for (Index c = 0; c < xs.c; ++c) out.plane(b, c).noalias() = ry * x.value().plane(b, c) * rx.transpose();
  }
  auto xn = x.node();
  return record<Scalar>(std::move(out), {x}, [xn, ry = std::move(ry), rx = std::move(rx)](const Tensor4<Scalar>& gy) {
    if (!xn->requires_grad) return;
    Tensor4<Scalar>& dx = xn->grad_buffer();
    for (Index b = 0; b < gy.n(); ++b) {
      for (Index c = 0; c < gy.c(); ++c) dx.plane(b, c).noalias() += ry.transpose() * gy.plane(b, c) * rx;
    }
  });
}

/// Folds 1x3 and 3x1 kernels into the centre row / column of a 3x3 kernel.
/// Same-padded correlation with the result equals the sum of the three
/// separately padded correlations.
template <typename Scalar>
Var<Scalar> fuse_asymmetric_kernels(const Var<Scalar>& k33, const Var<Scalar>& k13, const Var<Scalar>& k31) {
  const Shape4& s = k33.shape();
  if (s.h != 3 || s.w != 3 || k13.shape() != Shape4{s.n, s.c, 1, 3} || k31.shape() != Shape4{s.n, s.c, 3, 1}) {
    throw ShapeError("asymmetric kernels must be (o,i,3,3), (o,i,1,3), (o,i,3,1); got " + s.str() + ", " +
                     k13.shape().str() + ", " + k31.shape().str());
  }
  Tensor4<Scalar> fused = k33.value();
  for (Index o = 0; o < s.n; ++o) {
    for (Index i = 0; i < s.c; ++i) {
      for (Index t = 0; t < 3; ++t) {
        fused(o, i, 1, t) += k13.value()(o, i, 0, t);
        fused(o, i, t, 1) += k31.value()(o, i, t, 0);
      }
    }
  }
  auto n33 = k33.node();
  auto n13 = k13.node();
  auto n31 = k31.node();
  return record<Scalar>(std::move(fused), {k33, k13, k31}, [n33, n13, n31](const Tensor4<Scalar>& gy) {
    accumulate<Scalar>(n33, gy.array());
    const Shape4& s = gy.shape();
    for (Index o = 0; o < s.n; ++o) {
      for (Index i = 0; i < s.c; ++i) {
        for (Index t = 0; t < 3; ++t) {
          if (n13->requires_grad) n13->grad_buffer()(o, i, 0, t) += gy(o, i, 1, t);
          if (n31->requires_grad) n31->grad_buffer()(o, i, t, 0) += gy(o, i, t, 1);
        }
      }
    }
  });
}

/// sum(x * weights) as a (1, 1, 1, 1) scalar; `weights` is a constant.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor4<Scalar>& weights) {
  if (x.shape() != weights.shape()) {
    throw ShapeError("weighted_sum: " + x.shape().str() + " vs " + weights.shape().str());
  }
  Tensor4<Scalar> out(Shape4{}, (x.value().array() * weights.array()).sum());
  auto xn = x.node();
  return record<Scalar>(std::move(out), {x}, [xn, weights](const Tensor4<Scalar>& gy) {
    accumulate<Scalar>(xn, weights.array() * gy.data()[0]);
  });
}

/// Throws NumericError naming `where` if any value is NaN or infinite.
template <typename Scalar>
const Var<Scalar>& check_finite(const Var<Scalar>& x, const std::string& where) {
  if (!x.value().all_finite()) throw NumericError("non-finite activation in " + where);
  return x;
}

}  // namespace effiseg

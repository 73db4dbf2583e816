#include "ddpore/ndgrad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "blas.hpp"

namespace ddpore::ndgrad {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

thread_local std::vector<std::uint8_t>* relu_probe = nullptr;

// Unfolds one (c, h, w) sample into a (c*k*k, h*w) matrix for a stride-1,
// zero-padded "same" convolution.
template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            T* col) {
  const std::int64_t pad = (k - 1) / 2;
  const std::int64_t hw = h * w;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    const T* xc = x + ci * hw;
    for (std::int64_t ki = 0; ki < k; ++ki) {
      for (std::int64_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ci * k + ki) * k + kj) * hw;
        const std::int64_t dy = ki - pad;
        const std::int64_t dx = kj - pad;
        const std::int64_t ow_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t ow_hi = std::min<std::int64_t>(w, w - dx);
        for (std::int64_t oh = 0; oh < h; ++oh) {
          T* dst = row + oh * w;
          const std::int64_t ih = oh + dy;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* src = xc + ih * w + dx;
          std::fill(dst, dst + ow_lo, T(0));
          std::copy(src + ow_lo, src + ow_hi, dst + ow_lo);
          std::fill(dst + ow_hi, dst + w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t k, T* dx_out) {
  const std::int64_t pad = (k - 1) / 2;
  const std::int64_t hw = h * w;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    T* xc = dx_out + ci * hw;
    for (std::int64_t ki = 0; ki < k; ++ki) {
      for (std::int64_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ci * k + ki) * k + kj) * hw;
        const std::int64_t dy = ki - pad;
        const std::int64_t dx = kj - pad;
        const std::int64_t ow_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t ow_hi = std::min<std::int64_t>(w, w - dx);
        for (std::int64_t oh = 0; oh < h; ++oh) {
          const std::int64_t ih = oh + dy;
          if (ih < 0 || ih >= h) continue;
          const T* src = row + oh * w;
          T* dst = xc + ih * w + dx;
          for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += src[ow];
        }
      }
    }
  }
}

int as_int(std::int64_t v) { return static_cast<int>(v); }

// Stride-1 "same" convolution without im2col. Each sample is zero-padded to
// (h+2p) x (w+2p); an output row is then computed over the padded width, so
// tap (ki, kj) reads one contiguous slice at offset ki*wp + kj of every
// input plane and the whole convolution is k*k GEMMs with inner dimension
// cin. Columns w..wp-1 of each wide row are junk and get dropped.
template <typename T>
class WideConv {
 public:
  WideConv(const Shape& xs, std::int64_t cout, std::int64_t k)
      : cin_(xs.c), cout_(cout), h_(xs.h), w_(xs.w), k_(k), p_((k - 1) / 2),
        wp_(xs.w + 2 * ((k - 1) / 2)), plane_((xs.h + 2 * ((k - 1) / 2)) * wp_),
        n_(xs.h * wp_) {}

  // weight (cout, cin, k, k) -> taps (k*k, cout, cin)
  std::vector<T> pack(const T* weight) const {
    const std::int64_t taps = k_ * k_;
    std::vector<T> out(static_cast<std::size_t>(taps * cout_ * cin_));
    for (std::int64_t co = 0; co < cout_; ++co) {
      for (std::int64_t ci = 0; ci < cin_; ++ci) {
        for (std::int64_t t = 0; t < taps; ++t) {
          out[static_cast<std::size_t>((t * cout_ + co) * cin_ + ci)] =
              weight[(co * cin_ + ci) * taps + t];
        }
      }
    }
    return out;
  }

  // Adds taps (k*k, cout, cin) into weight layout (cout, cin, k, k).
  void unpack_add(const std::vector<T>& taps_grad, T* weight_grad) const {
    const std::int64_t taps = k_ * k_;
    for (std::int64_t co = 0; co < cout_; ++co) {
      for (std::int64_t ci = 0; ci < cin_; ++ci) {
        for (std::int64_t t = 0; t < taps; ++t) {
          weight_grad[(co * cin_ + ci) * taps + t] +=
              taps_grad[static_cast<std::size_t>((t * cout_ + co) * cin_ + ci)];
        }
      }
    }
  }

  std::size_t padded_size() const { return static_cast<std::size_t>(cin_ * plane_ + 2 * p_ * (wp_ + 1)); }
  std::size_t wide_size(std::int64_t rows) const { return static_cast<std::size_t>(rows * n_); }

  void pad(const T* x, std::vector<T>& xp) const {
    xp.assign(padded_size(), T(0));
    for (std::int64_t c = 0; c < cin_; ++c) {
      for (std::int64_t r = 0; r < h_; ++r) {
        const T* src = x + (c * h_ + r) * w_;
        std::copy(src, src + w_, xp.data() + c * plane_ + (r + p_) * wp_ + p_);
      }
    }
  }

  std::int64_t offset(std::int64_t tap) const { return (tap / k_) * wp_ + tap % k_; }

  // y (cout, h, w) = conv(x) from the padded sample.
  void forward(const std::vector<T>& packed, const std::vector<T>& xp, std::vector<T>& wide, T* y) const {
    wide.resize(wide_size(cout_));
    for (std::int64_t t = 0; t < k_ * k_; ++t) {
      detail::gemm(false, false, as_int(cout_), as_int(n_), as_int(cin_), T(1),
                   packed.data() + t * cout_ * cin_, as_int(cin_), xp.data() + offset(t),
                   as_int(plane_), t == 0 ? T(0) : T(1), wide.data(), as_int(n_));
    }
    for (std::int64_t c = 0; c < cout_; ++c) {
      for (std::int64_t r = 0; r < h_; ++r) {
        const T* src = wide.data() + c * n_ + r * wp_;
        std::copy(src, src + w_, y + (c * h_ + r) * w_);
      }
    }
  }

  // Gradient in wide layout with zeroed junk columns.
  void widen(const T* dy, std::vector<T>& dyw) const {
    dyw.assign(wide_size(cout_), T(0));
    for (std::int64_t c = 0; c < cout_; ++c) {
      for (std::int64_t r = 0; r < h_; ++r) {
        const T* src = dy + (c * h_ + r) * w_;
        std::copy(src, src + w_, dyw.data() + c * n_ + r * wp_);
      }
    }
  }

  void weight_grad(const std::vector<T>& dyw, const std::vector<T>& xp, std::vector<T>& taps_grad) const {
    for (std::int64_t t = 0; t < k_ * k_; ++t) {
      detail::gemm(false, true, as_int(cout_), as_int(cin_), as_int(n_), T(1), dyw.data(),
                   as_int(n_), xp.data() + offset(t), as_int(plane_), T(1),
                   taps_grad.data() + t * cout_ * cin_, as_int(cin_));
    }
  }

  // Adds the input gradient into dx (cin, h, w). Wide rows of neighbouring
  // planes may overlap in dxp, but only inside the discarded padding.
  void input_grad(const std::vector<T>& packed, const std::vector<T>& dyw, std::vector<T>& dxp,
                  T* dx) const {
    dxp.assign(padded_size(), T(0));
    for (std::int64_t t = 0; t < k_ * k_; ++t) {
      detail::gemm(true, false, as_int(cin_), as_int(n_), as_int(cout_), T(1),
                   packed.data() + t * cout_ * cin_, as_int(cin_), dyw.data(), as_int(n_), T(1),
                   dxp.data() + offset(t), as_int(plane_));
    }
    for (std::int64_t c = 0; c < cin_; ++c) {
      for (std::int64_t r = 0; r < h_; ++r) {
        const T* src = dxp.data() + c * plane_ + (r + p_) * wp_ + p_;
        T* dst = dx + (c * h_ + r) * w_;
        for (std::int64_t i = 0; i < w_; ++i) dst[i] += src[i];
      }
    }
  }

 private:
  std::int64_t cin_, cout_, h_, w_, k_, p_, wp_, plane_, n_;
};

// Narrow inputs (the single-channel stem) make k*k GEMMs with a tiny inner
// dimension; im2col suits them better.
bool use_wide_conv(std::int64_t cin, std::int64_t k) { return k > 1 && cin >= 4; }

template <typename T>
void add_bias(const Grid4<T>& bias, std::int64_t cout, std::int64_t hw, T* y) {
  for (std::int64_t co = 0; co < cout; ++co) {
    const T bv = bias.values()[static_cast<std::size_t>(co)];
    T* row = y + co * hw;
    for (std::int64_t p = 0; p < hw; ++p) row[p] += bv;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
Grid4<T> conv2d_same(Tape<T>& tape, const Grid4<T>& x, const Grid4<T>& weight,
                     const Grid4<T>& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(ws.h == ws.w && ws.h % 2 == 1,
          "conv2d_same: kernel must be square with odd size, got " + ws.str());
  require(ws.c == xs.c, "conv2d_same: input " + xs.str() + " has " +
                            std::to_string(xs.c) + " channels, weight " + ws.str() +
                            " expects " + std::to_string(ws.c));
  if (bias.defined()) {
    require(bias.shape() == Shape{1, ws.n, 1, 1},
            "conv2d_same: bias must be 1x" + std::to_string(ws.n) + "x1x1, got " +
                bias.shape().str());
  }

  const Shape os{xs.n, ws.n, xs.h, xs.w};
  const std::int64_t k = ws.h;
  const std::int64_t kdim = xs.c * k * k;
  const std::int64_t hw = xs.plane();
  const bool wide = use_wide_conv(xs.c, k);
  Grid4<T> out(os);
  T* ov = out.mutable_values().data();

  if (wide) {
    const WideConv<T> conv(xs, ws.n, k);
    const auto packed = conv.pack(weight.data());
    std::vector<T> xp;
    std::vector<T> buf;
    for (std::int64_t b = 0; b < xs.n; ++b) {
      conv.pad(x.data() + b * xs.sample(), xp);
      conv.forward(packed, xp, buf, ov + b * os.sample());
    }
  } else {
    std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kdim * hw));
    for (std::int64_t b = 0; b < xs.n; ++b) {
      const T* src = x.data() + b * xs.sample();
      if (k != 1) {
        im2col(src, xs.c, xs.h, xs.w, k, col.data());
        src = col.data();
      }
      detail::gemm(false, false, as_int(ws.n), as_int(hw), as_int(kdim), T(1),
                   weight.data(), as_int(kdim), src, as_int(hw), T(0), ov + b * os.sample(),
                   as_int(hw));
    }
  }
  if (bias.defined()) {
    for (std::int64_t b = 0; b < xs.n; ++b) add_bias(bias, ws.n, hw, ov + b * os.sample());
  }

  if (tape.tracks({&x, &weight, &bias})) {
    tape.record("conv2d_same", out, [x, weight, bias, out, xs, os, k, kdim, hw, wide]() mutable {
      const T* gy = out.grad().data();
      T* gw = weight.requires_grad() ? weight.mutable_grad().data() : nullptr;
      T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
      T* gb = bias.defined() && bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
      const int cout = as_int(os.c);

      if (wide) {
        const WideConv<T> conv(xs, os.c, k);
        const auto packed = conv.pack(weight.data());
        std::vector<T> taps_grad(gw != nullptr ? packed.size() : 0, T(0));
        std::vector<T> xp;
        std::vector<T> dyw;
        std::vector<T> dxp;
        for (std::int64_t b = 0; b < xs.n; ++b) {
          conv.widen(gy + b * os.sample(), dyw);
          if (gw != nullptr) {
            conv.pad(x.data() + b * xs.sample(), xp);
            conv.weight_grad(dyw, xp, taps_grad);
          }
          if (gx != nullptr) conv.input_grad(packed, dyw, dxp, gx + b * xs.sample());
        }
        if (gw != nullptr) conv.unpack_add(taps_grad, gw);
      } else {
        std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kdim * hw));
        std::vector<T> dcol(k == 1 || gx == nullptr ? 0 : static_cast<std::size_t>(kdim * hw));
        for (std::int64_t b = 0; b < xs.n; ++b) {
          const T* dy = gy + b * os.sample();
          if (gw != nullptr) {
            const T* src = x.data() + b * xs.sample();
            if (k != 1) {
              im2col(src, xs.c, xs.h, xs.w, k, col.data());
              src = col.data();
            }
            detail::gemm(false, true, cout, as_int(kdim), as_int(hw), T(1), dy, as_int(hw),
                         src, as_int(hw), T(1), gw, as_int(kdim));
          }
          if (gx != nullptr) {
            T* gxb = gx + b * xs.sample();
            if (k == 1) {
              detail::gemm(true, false, as_int(kdim), as_int(hw), cout, T(1), weight.data(),
                           as_int(kdim), dy, as_int(hw), T(1), gxb, as_int(hw));
            } else {
              detail::gemm(true, false, as_int(kdim), as_int(hw), cout, T(1), weight.data(),
                           as_int(kdim), dy, as_int(hw), T(0), dcol.data(), as_int(hw));
              col2im_add(dcol.data(), xs.c, xs.h, xs.w, k, gxb);
            }
          }
        }
      }
      if (gb != nullptr) {
        for (std::int64_t b = 0; b < xs.n; ++b) {
          const T* dy = gy + b * os.sample();
          for (std::int64_t co = 0; co < os.c; ++co) {
            const T* row = dy + co * hw;
            double acc = 0.0;
            for (std::int64_t p = 0; p < hw; ++p) acc += row[p];
            gb[co] += static_cast<T>(acc);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
Grid4<T> batch_norm(Tape<T>& tape, const Grid4<T>& x, const Grid4<T>& gamma,
                    const Grid4<T>& beta, BatchNormStats<T>& stats, BnMode mode) {
  const Shape xs = x.shape();
  const Shape ps{1, xs.c, 1, 1};
  require(gamma.shape() == ps && beta.shape() == ps,
          "batch_norm: gamma/beta must be " + ps.str() + " for input " + xs.str());
  const auto channels = static_cast<std::size_t>(xs.c);
  require(stats.mean.size() == channels && stats.var.size() == channels,
          "batch_norm: running stats sized for " + std::to_string(stats.mean.size()) +
              " channels, input has " + std::to_string(xs.c));

  const std::int64_t hw = xs.plane();
  const std::int64_t count = xs.n * hw;
  std::vector<T> mean(channels);
  std::vector<T> inv_std(channels);

  for (std::size_t c = 0; c < channels; ++c) {
    if (mode == BnMode::eval) {
      mean[c] = stats.mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) +
                                                  kBatchNormEpsilon));
      continue;
    }
    double acc = 0.0;
    for (std::int64_t b = 0; b < xs.n; ++b) {
      const T* p = x.data() + (b * xs.c + static_cast<std::int64_t>(c)) * hw;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
    }
    const double m = acc / static_cast<double>(count);
    double sq = 0.0;
    for (std::int64_t b = 0; b < xs.n; ++b) {
      const T* p = x.data() + (b * xs.c + static_cast<std::int64_t>(c)) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = p[i] - m;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    mean[c] = static_cast<T>(m);
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEpsilon));

    const double unbiased = count > 1 ? var * static_cast<double>(count) /
                                            static_cast<double>(count - 1)
                                      : var;
    stats.mean[c] = static_cast<T>((1.0 - kBatchNormMomentum) * stats.mean[c] +
                                   kBatchNormMomentum * m);
    stats.var[c] = static_cast<T>((1.0 - kBatchNormMomentum) * stats.var[c] +
                                  kBatchNormMomentum * unbiased);
  }

  Grid4<T> out(xs);
  T* ov = out.mutable_values().data();
  for (std::int64_t b = 0; b < xs.n; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::int64_t off = (b * xs.c + static_cast<std::int64_t>(c)) * hw;
      const T g = gamma.values()[c];
      const T bt = beta.values()[c];
      const T m = mean[c];
      const T is = inv_std[c];
      for (std::int64_t i = 0; i < hw; ++i) {
        ov[off + i] = g * ((x.data()[off + i] - m) * is) + bt;
      }
    }
  }

  if (tape.tracks({&x, &gamma, &beta})) {
    tape.record("batch_norm", out,
                [x, gamma, beta, out, mean, inv_std, mode, xs, hw, count]() mutable {
      const T* gy = out.grad().data();
      const std::size_t channels = static_cast<std::size_t>(xs.c);
      T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
      T* gg = gamma.requires_grad() ? gamma.mutable_grad().data() : nullptr;
      T* gbt = beta.requires_grad() ? beta.mutable_grad().data() : nullptr;
      for (std::size_t c = 0; c < channels; ++c) {
        const T m = mean[c];
        const T is = inv_std[c];
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::int64_t b = 0; b < xs.n; ++b) {
          const std::int64_t off = (b * xs.c + static_cast<std::int64_t>(c)) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const T xhat = (x.data()[off + i] - m) * is;
            sum_dy += gy[off + i];
            sum_dy_xhat += static_cast<double>(gy[off + i]) * xhat;
          }
        }
        if (gg != nullptr) gg[c] += static_cast<T>(sum_dy_xhat);
        if (gbt != nullptr) gbt[c] += static_cast<T>(sum_dy);
        if (gx == nullptr) continue;
        const T g = gamma.values()[c];
        if (mode == BnMode::eval) {
          const T f = g * is;
          for (std::int64_t b = 0; b < xs.n; ++b) {
            const std::int64_t off = (b * xs.c + static_cast<std::int64_t>(c)) * hw;
            for (std::int64_t i = 0; i < hw; ++i) gx[off + i] += f * gy[off + i];
          }
          continue;
        }
        const double inv_n = 1.0 / static_cast<double>(count);
        const T f = static_cast<T>(g * is);
        const T mean_dy = static_cast<T>(sum_dy * inv_n);
        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat * inv_n);
        for (std::int64_t b = 0; b < xs.n; ++b) {
          const std::int64_t off = (b * xs.c + static_cast<std::int64_t>(c)) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const T xhat = (x.data()[off + i] - m) * is;
            gx[off + i] += f * (gy[off + i] - mean_dy - xhat * mean_dy_xhat);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops

ReluSignProbe::ReluSignProbe() {
  if (relu_probe != nullptr) throw std::logic_error("ReluSignProbe already active");
  relu_probe = &signs_;
}

ReluSignProbe::~ReluSignProbe() { relu_probe = nullptr; }

std::vector<std::uint8_t> ReluSignProbe::take() { return std::exchange(signs_, {}); }

template <typename T>
Grid4<T> relu(Tape<T>& tape, const Grid4<T>& x) {
  Grid4<T> out(x.shape());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (relu_probe != nullptr) {
    for (T v : xv) relu_probe->push_back(v > T(0) ? 1 : 0);
  }
  if (tape.tracks({&x})) {
    tape.record("relu", out, [x, out]() mutable {
      auto gy = out.grad();
      auto gx = x.mutable_grad();
      auto ov = out.values();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        gx[i] += ov[i] > T(0) ? gy[i] : T(0);
      }
    });
  }
  return out;
}

template <typename T>
Grid4<T> residual_add(Tape<T>& tape, const Grid4<T>& a, const Grid4<T>& b) {
  require(a.shape() == b.shape(),
          "residual_add: shapes differ, " + a.shape().str() + " vs " + b.shape().str());
  Grid4<T> out(a.shape());
  auto ov = out.mutable_values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record("residual_add", out, [a, b, out]() mutable {
      auto gy = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Grid4<T> scale(Tape<T>& tape, const Grid4<T>& x, T factor) {
  Grid4<T> out(x.shape());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = factor * xv[i];
  if (tape.tracks({&x})) {
    tape.record("scale", out, [x, out, factor]() mutable {
      auto gy = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
    });
  }
  return out;
}

template <typename T>
Grid4<T> flatten(Tape<T>& tape, const Grid4<T>& x) {
  const Shape xs = x.shape();
  Grid4<T> out(Shape{xs.n, xs.sample(), 1, 1},
               std::vector<T>(x.values().begin(), x.values().end()));
  if (tape.tracks({&x})) {
    tape.record("flatten", out, [x, out]() mutable {
      auto gy = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

template <typename T>
Grid4<T> linear(Tape<T>& tape, const Grid4<T>& x, const Grid4<T>& weight,
                const Grid4<T>& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const std::int64_t k = xs.sample();
  require(ws.h == 1 && ws.w == 1 && ws.c == k,
          "linear: weight " + ws.str() + " incompatible with input " + xs.str());
  require(bias.shape() == Shape{1, ws.n, 1, 1},
          "linear: bias must be 1x" + std::to_string(ws.n) + "x1x1, got " +
              bias.shape().str());
  const std::int64_t n = xs.n;
  const std::int64_t m = ws.n;
  Grid4<T> out(Shape{n, m, 1, 1});
  T* ov = out.mutable_values().data();
  detail::gemm(false, true, as_int(n), as_int(m), as_int(k), T(1), x.data(), as_int(k),
               weight.data(), as_int(k), T(0), ov, as_int(m));
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t j = 0; j < m; ++j) ov[r * m + j] += bias.values()[static_cast<std::size_t>(j)];
  }
  if (tape.tracks({&x, &weight, &bias})) {
    tape.record("linear", out, [x, weight, bias, out, n, m, k]() mutable {
      const T* gy = out.grad().data();
      if (x.requires_grad()) {
        detail::gemm(false, false, as_int(n), as_int(k), as_int(m), T(1), gy, as_int(m),
                     weight.data(), as_int(k), T(1), x.mutable_grad().data(), as_int(k));
      }
      if (weight.requires_grad()) {
        detail::gemm(true, false, as_int(m), as_int(k), as_int(n), T(1), gy, as_int(m),
                     x.data(), as_int(k), T(1), weight.mutable_grad().data(), as_int(k));
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::int64_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (std::int64_t r = 0; r < n; ++r) acc += gy[r * m + j];
          gb[static_cast<std::size_t>(j)] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

template <typename T>
Grid4<T> softmax_rows(Tape<T>& tape, const Grid4<T>& x) {
  const Shape xs = x.shape();
  const std::int64_t n = xs.n;
  const std::int64_t k = xs.sample();
  Grid4<T> out(xs);
  T* ov = out.mutable_values().data();
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = x.data() + r * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      ov[r * k + j] = static_cast<T>(e);
      total += e;
    }
    for (std::int64_t j = 0; j < k; ++j) {
      ov[r * k + j] = static_cast<T>(ov[r * k + j] / total);
    }
  }
  if (tape.tracks({&x})) {
    tape.record("softmax_rows", out, [x, out, n, k]() mutable {
      const T* gy = out.grad().data();
      const T* y = out.data();
      T* gx = x.mutable_grad().data();
      for (std::int64_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < k; ++j) dot += static_cast<double>(gy[r * k + j]) * y[r * k + j];
        for (std::int64_t j = 0; j < k; ++j) {
          gx[r * k + j] += static_cast<T>(y[r * k + j] * (gy[r * k + j] - dot));
        }
      }
    });
  }
  return out;
}

template <typename T>
Grid4<T> gradient_reversal(Tape<T>& tape, const Grid4<T>& x, T lambda) {
  Grid4<T> out(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
  if (tape.tracks({&x})) {
    tape.record("gradient_reversal", out, [x, out, lambda]() mutable {
      const T factor = -lambda;
      auto gy = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
    });
  }
  return out;
}

template <typename T>
Grid4<T> slice_batch(Tape<T>& tape, const Grid4<T>& x, std::int64_t begin,
                     std::int64_t count) {
  const Shape xs = x.shape();
  require(begin >= 0 && count > 0 && begin + count <= xs.n,
          "slice_batch: rows [" + std::to_string(begin) + ", " +
              std::to_string(begin + count) + ") outside batch of " + std::to_string(xs.n));
  const std::int64_t stride = xs.sample();
  auto first = x.values().begin() + begin * stride;
  Grid4<T> out(Shape{count, xs.c, xs.h, xs.w}, std::vector<T>(first, first + count * stride));
  if (tape.tracks({&x})) {
    tape.record("slice_batch", out, [x, out, begin, stride]() mutable {
      auto gy = out.grad();
      T* gx = x.mutable_grad().data() + begin * stride;
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

template <typename T>
Grid4<T> concat_batch(Tape<T>& tape, std::span<const Grid4<T>> parts) {
  require(!parts.empty(), "concat_batch: no inputs");
  const Shape first = parts.front().shape();
  std::int64_t rows = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    require(s.c == first.c && s.h == first.h && s.w == first.w,
            "concat_batch: " + s.str() + " does not match " + first.str());
    rows += s.n;
    tracked = tracked || tape.tracks({&p});
  }
  std::vector<T> values;
  values.reserve(static_cast<std::size_t>(rows * first.sample()));
  for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
  Grid4<T> out(Shape{rows, first.c, first.h, first.w}, std::move(values));
  if (tracked) {
    std::vector<Grid4<T>> held(parts.begin(), parts.end());
    tape.record("concat_batch", out, [held, out]() mutable {
      auto gy = out.grad();
      std::size_t off = 0;
      for (auto& p : held) {
        const auto len = static_cast<std::size_t>(p.numel());
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < len; ++i) gp[i] += gy[off + i];
        }
        off += len;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Grid4<T> sum(Tape<T>& tape, const Grid4<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += v;
  Grid4<T> out = Grid4<T>::scalar(static_cast<T>(acc));
  if (tape.tracks({&x})) {
    tape.record("sum", out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (T& v : x.mutable_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Grid4<T> mse_loss(Tape<T>& tape, const Grid4<T>& prediction, const Grid4<T>& target) {
  require(prediction.shape() == target.shape(),
          "mse_loss: shapes differ, " + prediction.shape().str() + " vs " +
              target.shape().str());
  auto pv = prediction.values();
  auto tv = target.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = static_cast<double>(pv[i]) - tv[i];
    acc += d * d;
  }
  const auto count = static_cast<double>(pv.size());
  Grid4<T> out = Grid4<T>::scalar(static_cast<T>(acc / count));
  if (tape.tracks({&prediction})) {
    tape.record("mse_loss", out, [prediction, target, out, count]() mutable {
      const T f = static_cast<T>(2.0 * out.grad()[0] / count);
      auto pv = prediction.values();
      auto tv = target.values();
      auto gp = prediction.mutable_grad();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += f * (pv[i] - tv[i]);
    });
  }
  return out;
}

template <typename T>
Grid4<T> cross_entropy(Tape<T>& tape, const Grid4<T>& probs, std::span<const int> labels) {
  const Shape ps = probs.shape();
  const std::int64_t n = ps.n;
  const std::int64_t k = ps.sample();
  require(static_cast<std::int64_t>(labels.size()) == n,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(n) + " rows");
  for (int l : labels) {
    require(l >= 0 && l < k, "cross_entropy: label " + std::to_string(l) +
                                 " outside [0, " + std::to_string(k) + ")");
  }
  double acc = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    const double p = probs.data()[r * k + labels[static_cast<std::size_t>(r)]];
    acc -= std::log(std::max(p, kProbabilityFloor));
  }
  Grid4<T> out = Grid4<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (tape.tracks({&probs})) {
    std::vector<int> held(labels.begin(), labels.end());
    tape.record("cross_entropy", out, [probs, out, held, n, k]() mutable {
      const double g = out.grad()[0];
      T* gp = probs.mutable_grad().data();
      for (std::int64_t r = 0; r < n; ++r) {
        const std::int64_t idx = r * k + held[static_cast<std::size_t>(r)];
        const double p = probs.data()[idx];
        if (p > kProbabilityFloor) {
          gp[idx] += static_cast<T>(-g / (static_cast<double>(n) * p));
        }
      }
    });
  }
  return out;
}

template <typename T>
Grid4<T> cross_entropy(Tape<T>& tape, const Grid4<T>& probs, int label) {
  std::vector<int> labels(static_cast<std::size_t>(probs.shape().n), label);
  return cross_entropy(tape, probs, std::span<const int>(labels));
}

#define DDPORE_INSTANTIATE_OPS(T)                                                        \
  template Grid4<T> conv2d_same(Tape<T>&, const Grid4<T>&, const Grid4<T>&,             \
                                const Grid4<T>&);                                       \
  template Grid4<T> batch_norm(Tape<T>&, const Grid4<T>&, const Grid4<T>&,              \
                               const Grid4<T>&, BatchNormStats<T>&, BnMode);            \
  template Grid4<T> relu(Tape<T>&, const Grid4<T>&);                                    \
  template Grid4<T> residual_add(Tape<T>&, const Grid4<T>&, const Grid4<T>&);           \
  template Grid4<T> scale(Tape<T>&, const Grid4<T>&, T);                                \
  template Grid4<T> flatten(Tape<T>&, const Grid4<T>&);                                 \
  template Grid4<T> linear(Tape<T>&, const Grid4<T>&, const Grid4<T>&, const Grid4<T>&); \
  template Grid4<T> softmax_rows(Tape<T>&, const Grid4<T>&);                            \
  template Grid4<T> gradient_reversal(Tape<T>&, const Grid4<T>&, T);                    \
  template Grid4<T> slice_batch(Tape<T>&, const Grid4<T>&, std::int64_t, std::int64_t); \
  template Grid4<T> concat_batch(Tape<T>&, std::span<const Grid4<T>>);                  \
  template Grid4<T> sum(Tape<T>&, const Grid4<T>&);                                     \
  template Grid4<T> mse_loss(Tape<T>&, const Grid4<T>&, const Grid4<T>&);               \
  template Grid4<T> cross_entropy(Tape<T>&, const Grid4<T>&, std::span<const int>);     \
  template Grid4<T> cross_entropy(Tape<T>&, const Grid4<T>&, int);

DDPORE_INSTANTIATE_OPS(float)
DDPORE_INSTANTIATE_OPS(double)

#undef DDPORE_INSTANTIATE_OPS

}  // namespace ddpore::ndgrad

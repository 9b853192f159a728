#include "cdaug/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace cdaug::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

// Eigen picks its vectorization peel from operand addresses, so every matrix
// handed to it lives in a buffer with the maximum alignment. Results are then
// independent of where the tensors happen to be allocated.
template <typename T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
AlignedVec<T>& scratch(int slot) {
  thread_local AlignedVec<T> bufs[4];
  return bufs[slot];
}

template <typename T>
T* fill_scratch(int slot, const T* src, std::size_t n) {
  AlignedVec<T>& b = scratch<T>(slot);
  b.resize(n);
  std::copy(src, src + n, b.data());
  return b.data();
}

void check(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

// Lays out the k*k shifted copies of every input channel as rows of a
// (C*k*k) x (H*W) matrix, zero padded by k/2.
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, T* cols) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    const T* xc = x + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - pad, dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int oy = 0; oy < H; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * W;
          const int iy = oy + dy;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * W;
          std::fill(dst, dst + x0, T(0));
          std::copy(src + x0 + dx, src + x1 + dx, dst + x0);
          std::fill(dst + x1, dst + W, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, T* dx_out) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    T* gc = dx_out + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - pad, dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int oy = 0; oy < H; ++oy) {
          const int iy = oy + dy;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<std::size_t>(oy) * W;
          T* dst = gc + static_cast<std::size_t>(iy) * W;
          for (int ox = x0; ox < x1; ++ox) dst[ox + dx] += src[ox];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& Wt = tape.value(w);
  const Tensor<T>& B = tape.value(b);
  check(Wt.h == Wt.w && Wt.h % 2 == 1, "conv2d", "kernel must be square and odd");
  check(Wt.c == X.c, "conv2d", "input channels " + X.shape_str() + " vs weight " + Wt.shape_str());
  check(B.size() == static_cast<std::size_t>(Wt.n), "conv2d", "bias size");
  const int N = X.n, Cin = X.c, H = X.h, Wd = X.w, Cout = Wt.n, k = Wt.h;
  const int K = Cin * k * k;
  const int HW = H * Wd;
  const std::size_t in_size = static_cast<std::size_t>(K) * HW;
  const std::size_t out_size = static_cast<std::size_t>(Cout) * HW;

  Tensor<T> Y(N, Cout, H, Wd);
  CMapR<T> wm(fill_scratch(0, Wt.data.data(), Wt.size()), Cout, K);
  AlignedVec<T>& cols = scratch<T>(1);
  AlignedVec<T>& ybuf = scratch<T>(2);
  cols.resize(in_size);
  ybuf.resize(out_size);
  for (int i = 0; i < N; ++i) {
    if (k > 1) {
      im2col(X.sample(i), Cin, H, Wd, k, cols.data());
    } else {
      std::copy(X.sample(i), X.sample(i) + in_size, cols.data());
    }
    MapR<T> ym(ybuf.data(), Cout, HW);
    ym.noalias() = wm * CMapR<T>(cols.data(), K, HW);
    T* y = Y.sample(i);
    for (int co = 0; co < Cout; ++co)
      for (int p = 0; p < HW; ++p) y[co * HW + p] = ybuf[co * HW + p] + B.data[co];
  }

  const int self = static_cast<int>(tape.size());
  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
  return tape.push(std::move(Y), rg, [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Xv = tp.value(x);
    const bool gx = tp.requires_grad(x), gw = tp.requires_grad(w), gb = tp.requires_grad(b);
    CMapR<T> wm2(fill_scratch(0, tp.value(w).data.data(), tp.value(w).size()), Cout, K);
    AlignedVec<T>& colbuf = scratch<T>(1);
    AlignedVec<T>& dybuf = scratch<T>(2);
    AlignedVec<T>& dcols = scratch<T>(3);
    colbuf.resize(in_size);
    dcols.resize(in_size);
    AlignedVec<T> dw(gw ? static_cast<std::size_t>(Cout) * K : 0, T(0));
    MapR<T> dwm(dw.data(), gw ? Cout : 0, gw ? K : 0);
    for (int i = 0; i < N; ++i) {
      const T* dys = dY.sample(i);
      if (gb) {
        Tensor<T>& dB = tp.grad_mut(b);
        for (int co = 0; co < Cout; ++co) {
          T s = 0;
          for (int p = 0; p < HW; ++p) s += dys[co * HW + p];
          dB.data[co] += s;
        }
      }
      if (!gw && !gx) continue;
      dybuf.assign(dys, dys + out_size);
      CMapR<T> dym(dybuf.data(), Cout, HW);
      if (gw) {
        if (k > 1) {
          im2col(Xv.sample(i), Cin, H, Wd, k, colbuf.data());
        } else {
          std::copy(Xv.sample(i), Xv.sample(i) + in_size, colbuf.data());
        }
        dwm.noalias() += dym * CMapR<T>(colbuf.data(), K, HW).transpose();
      }
      if (gx) {
        MapR<T> dcm(dcols.data(), K, HW);
        dcm.noalias() = wm2.transpose() * dym;
        T* dx = tp.grad_mut(x).sample(i);
        if (k > 1) {
          col2im_add(dcols.data(), Cin, H, Wd, k, dx);
        } else {
          for (std::size_t j = 0; j < in_size; ++j) dx[j] += dcols[j];
        }
      }
    }
    if (gw) {
      Tensor<T>& dW = tp.grad_mut(w);
      for (std::size_t j = 0; j < dw.size(); ++j) dW.data[j] += dw[j];
    }
  });
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& Wt = tape.value(w);
  const Tensor<T>& B = tape.value(b);
  const int N = X.n, Din = static_cast<int>(X.sample_size()), Dout = Wt.n;
  check(static_cast<int>(Wt.sample_size()) == Din, "linear", "weight " + Wt.shape_str() + " vs input " + X.shape_str());
  check(B.size() == static_cast<std::size_t>(Dout), "linear", "bias size");
  Tensor<T> Y(N, Dout, 1, 1);
  for (int i = 0; i < N; ++i)
    for (int o = 0; o < Dout; ++o) {
      const T* xr = X.data.data() + static_cast<std::size_t>(i) * Din;
      const T* wr = Wt.data.data() + static_cast<std::size_t>(o) * Din;
      T s = B.data[o];
      for (int d = 0; d < Din; ++d) s += wr[d] * xr[d];
      Y.data[static_cast<std::size_t>(i) * Dout + o] = s;
    }

  const int self = static_cast<int>(tape.size());
  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
  return tape.push(std::move(Y), rg, [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Xv = tp.value(x);
    const Tensor<T>& Wv = tp.value(w);
    const bool gw = tp.requires_grad(w), gb = tp.requires_grad(b), gx = tp.requires_grad(x);
    for (int i = 0; i < N; ++i)
      for (int o = 0; o < Dout; ++o) {
        const T g = dY.data[static_cast<std::size_t>(i) * Dout + o];
        if (gb) tp.grad_mut(b).data[o] += g;
        if (gw) {
          T* dw = tp.grad_mut(w).data.data() + static_cast<std::size_t>(o) * Din;
          const T* xr = Xv.data.data() + static_cast<std::size_t>(i) * Din;
          for (int d = 0; d < Din; ++d) dw[d] += g * xr[d];
        }
        if (gx) {
          T* dx = tp.grad_mut(x).data.data() + static_cast<std::size_t>(i) * Din;
          const T* wr = Wv.data.data() + static_cast<std::size_t>(o) * Din;
          for (int d = 0; d < Din; ++d) dx[d] += g * wr[d];
        }
      }
  });
}

template <typename T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, int groups) {
  const Tensor<T>& X = tape.value(x);
  const int N = X.n, C = X.c;
  check(groups > 0 && C % groups == 0, "group_norm", "channels " + std::to_string(C) + " not divisible by groups");
  check(tape.value(gamma).size() == static_cast<std::size_t>(C) && tape.value(beta).size() == static_cast<std::size_t>(C),
        "group_norm", "affine parameter size");
  const int cpg = C / groups;
  const std::size_t plane = X.plane();
  const std::size_t m = plane * cpg;
  constexpr double kEps = 1e-5;

  std::vector<T> mean(static_cast<std::size_t>(N) * groups), rstd(static_cast<std::size_t>(N) * groups);
  Tensor<T> Y(X.n, X.c, X.h, X.w);
  const T* g = tape.value(gamma).data.data();
  const T* bt = tape.value(beta).data.data();
  for (int i = 0; i < N; ++i) {
    for (int gr = 0; gr < groups; ++gr) {
      const T* xs = X.sample(i) + gr * m;
      double sum = 0, sq = 0;
      for (std::size_t j = 0; j < m; ++j) sum += xs[j];
      const double mu = sum / m;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = xs[j] - mu;
        sq += d * d;
      }
      const double rs = 1.0 / std::sqrt(sq / m + kEps);
      mean[i * groups + gr] = static_cast<T>(mu);
      rstd[i * groups + gr] = static_cast<T>(rs);
      T* ys = Y.sample(i) + gr * m;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gr * cpg + cc;
        const T a = static_cast<T>(rs) * g[ch];
        const T off = bt[ch] - static_cast<T>(mu) * a;
        for (std::size_t p = 0; p < plane; ++p) ys[cc * plane + p] = xs[cc * plane + p] * a + off;
      }
    }
  }

  const int self = static_cast<int>(tape.size());
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  return tape.push(std::move(Y), rg, [=, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Xv = tp.value(x);
    const T* gv = tp.value(gamma).data.data();
    const bool gx = tp.requires_grad(x), gg = tp.requires_grad(gamma), gbt = tp.requires_grad(beta);
    T* dg = gg ? tp.grad_mut(gamma).data.data() : nullptr;
    T* db = gbt ? tp.grad_mut(beta).data.data() : nullptr;
    T* dx = gx ? tp.grad_mut(x).data.data() : nullptr;
    for (int i = 0; i < N; ++i) {
      for (int gr = 0; gr < groups; ++gr) {
        const T mu = mean[i * groups + gr];
        const T rs = rstd[i * groups + gr];
        const std::size_t base = i * Xv.sample_size() + gr * m;
        const T* xs = Xv.data.data() + base;
        const T* dys = dY.data.data() + base;
        double sum_dxh = 0, sum_dxh_xh = 0;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = gr * cpg + cc;
          double dgs = 0, dbs = 0;
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t j = cc * plane + p;
            const T xh = (xs[j] - mu) * rs;
            dgs += dys[j] * xh;
            dbs += dys[j];
            const double dxh = dys[j] * gv[ch];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          if (dg) dg[ch] += static_cast<T>(dgs);
          if (db) db[ch] += static_cast<T>(dbs);
        }
        if (dx) {
          const T a = static_cast<T>(sum_dxh / m);
          const T bb = static_cast<T>(sum_dxh_xh / m);
          T* dxs = dx + base;
          for (int cc = 0; cc < cpg; ++cc) {
            const T gch = gv[gr * cpg + cc];
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t j = cc * plane + p;
              const T xh = (xs[j] - mu) * rs;
              dxs[j] += rs * (dys[j] * gch - a - xh * bb);
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var silu(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> Y(X.n, X.c, X.h, X.w);
  for (std::size_t i = 0; i < X.size(); ++i) {
    const T v = X.data[i];
    Y.data[i] = v / (T(1) + std::exp(-v));
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Xv = tp.value(x);
    Tensor<T>& dX = tp.grad_mut(x);
    for (std::size_t i = 0; i < Xv.size(); ++i) {
      const T v = Xv.data[i];
      const T s = T(1) / (T(1) + std::exp(-v));
      dX.data[i] += dY.data[i] * s * (T(1) + v * (T(1) - s));
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> Y(X.n, X.c, X.h, X.w);
  for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = X.data[i] > T(0) ? X.data[i] : T(0);
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Xv = tp.value(x);
    Tensor<T>& dX = tp.grad_mut(x);
    for (std::size_t i = 0; i < Xv.size(); ++i)
      if (Xv.data[i] >= T(0)) dX.data[i] += dY.data[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  check(A.same_shape(B), "add", A.shape_str() + " vs " + B.shape_str());
  Tensor<T> Y = A;
  for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] += B.data[i];
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(a) || tape.requires_grad(b), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    for (Var v : {a, b}) {
      if (!tp.requires_grad(v)) continue;
      Tensor<T>& d = tp.grad_mut(v);
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += dY.data[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  check(A.same_shape(B), "mul", A.shape_str() + " vs " + B.shape_str());
  Tensor<T> Y = A;
  for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] *= B.data[i];
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(a) || tape.requires_grad(b), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& va = tp.value(a);
    const Tensor<T>& vb = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor<T>& d = tp.grad_mut(a);
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += dY.data[i] * vb.data[i];
    }
    if (tp.requires_grad(b)) {
      Tensor<T>& d = tp.grad_mut(b);
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += dY.data[i] * va.data[i];
    }
  });
}

template <typename T>
Var add_channel_bias(Tape<T>& tape, Var x, Var e) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& E = tape.value(e);
  check(E.n == X.n && E.sample_size() == static_cast<std::size_t>(X.c), "add_channel_bias",
        X.shape_str() + " vs " + E.shape_str());
  Tensor<T> Y = X;
  const std::size_t plane = X.plane();
  for (int i = 0; i < X.n; ++i)
    for (int ch = 0; ch < X.c; ++ch) {
      T* y = Y.sample(i) + ch * plane;
      const T v = E.data[static_cast<std::size_t>(i) * X.c + ch];
      for (std::size_t p = 0; p < plane; ++p) y[p] += v;
    }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x) || tape.requires_grad(e), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    if (tp.requires_grad(x)) {
      Tensor<T>& dX = tp.grad_mut(x);
      for (std::size_t i = 0; i < dX.size(); ++i) dX.data[i] += dY.data[i];
    }
    if (tp.requires_grad(e)) {
      Tensor<T>& dE = tp.grad_mut(e);
      const int C = dY.c;
      for (int i = 0; i < dY.n; ++i)
        for (int ch = 0; ch < C; ++ch) {
          const T* d = dY.sample(i) + ch * plane;
          T s = 0;
          for (std::size_t p = 0; p < plane; ++p) s += d[p];
          dE.data[static_cast<std::size_t>(i) * C + ch] += s;
        }
    }
  });
}

template <typename T>
Var avg_pool2(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  check(X.h % 2 == 0 && X.w % 2 == 0, "avg_pool2", "odd spatial size " + X.shape_str());
  const int H = X.h / 2, W = X.w / 2;
  Tensor<T> Y(X.n, X.c, H, W);
  const int planes = X.n * X.c;
  for (int pl = 0; pl < planes; ++pl) {
    const T* src = X.data.data() + static_cast<std::size_t>(pl) * X.h * X.w;
    T* dst = Y.data.data() + static_cast<std::size_t>(pl) * H * W;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const T* s0 = src + (2 * r) * X.w + 2 * c;
        dst[r * W + c] = T(0.25) * (s0[0] + s0[1] + s0[X.w] + s0[X.w + 1]);
      }
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    Tensor<T>& dX = tp.grad_mut(x);
    const int Wi = dX.w;
    for (int pl = 0; pl < planes; ++pl) {
      const T* src = dY.data.data() + static_cast<std::size_t>(pl) * H * W;
      T* dst = dX.data.data() + static_cast<std::size_t>(pl) * dX.h * Wi;
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
          const T g = T(0.25) * src[r * W + c];
          T* d0 = dst + (2 * r) * Wi + 2 * c;
          d0[0] += g;
          d0[1] += g;
          d0[Wi] += g;
          d0[Wi + 1] += g;
        }
    }
  });
}

template <typename T>
Var spatial_mean(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  const std::size_t plane = X.plane();
  const int planes = X.n * X.c;
  Tensor<T> Y(X.n, X.c, 1, 1);
  for (int pl = 0; pl < planes; ++pl) {
    const T* src = X.data.data() + static_cast<std::size_t>(pl) * plane;
    T s = 0;
    for (std::size_t p = 0; p < plane; ++p) s += src[p];
    Y.data[pl] = s / static_cast<T>(plane);
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    Tensor<T>& dX = tp.grad_mut(x);
    for (int pl = 0; pl < planes; ++pl) {
      const T g = dY.data[pl] / static_cast<T>(plane);
      T* dst = dX.data.data() + static_cast<std::size_t>(pl) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += g;
    }
  });
}

template <typename T>
Var upsample2(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  const int H = X.h * 2, W = X.w * 2;
  Tensor<T> Y(X.n, X.c, H, W);
  const int planes = X.n * X.c;
  for (int pl = 0; pl < planes; ++pl) {
    const T* src = X.data.data() + static_cast<std::size_t>(pl) * X.h * X.w;
    T* dst = Y.data.data() + static_cast<std::size_t>(pl) * H * W;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) dst[r * W + c] = src[(r / 2) * X.w + c / 2];
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    Tensor<T>& dX = tp.grad_mut(x);
    for (int pl = 0; pl < planes; ++pl) {
      const T* src = dY.data.data() + static_cast<std::size_t>(pl) * H * W;
      T* dst = dX.data.data() + static_cast<std::size_t>(pl) * dX.h * dX.w;
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) dst[(r / 2) * dX.w + c / 2] += src[r * W + c];
    }
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  check(A.n == B.n && A.h == B.h && A.w == B.w, "concat_channels", A.shape_str() + " vs " + B.shape_str());
  Tensor<T> Y(A.n, A.c + B.c, A.h, A.w);
  const std::size_t sa = A.sample_size(), sb = B.sample_size();
  for (int i = 0; i < A.n; ++i) {
    std::copy(A.sample(i), A.sample(i) + sa, Y.sample(i));
    std::copy(B.sample(i), B.sample(i) + sb, Y.sample(i) + sa);
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(a) || tape.requires_grad(b), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const int N = dY.n;
    if (tp.requires_grad(a)) {
      Tensor<T>& dA = tp.grad_mut(a);
      for (int i = 0; i < N; ++i)
        for (std::size_t j = 0; j < sa; ++j) dA.sample(i)[j] += dY.sample(i)[j];
    }
    if (tp.requires_grad(b)) {
      Tensor<T>& dB = tp.grad_mut(b);
      for (int i = 0; i < N; ++i)
        for (std::size_t j = 0; j < sb; ++j) dB.sample(i)[j] += dY.sample(i)[sa + j];
    }
  });
}

template <typename T>
Var per_sample_affine(Tape<T>& tape, Var a, Var b, std::vector<T> ca, std::vector<T> cb) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  check(A.same_shape(B), "per_sample_affine", A.shape_str() + " vs " + B.shape_str());
  check(ca.size() == static_cast<std::size_t>(A.n) && cb.size() == ca.size(), "per_sample_affine",
        "coefficient count");
  Tensor<T> Y(A.n, A.c, A.h, A.w);
  const std::size_t ss = A.sample_size();
  for (int i = 0; i < A.n; ++i)
    for (std::size_t j = 0; j < ss; ++j) Y.sample(i)[j] = ca[i] * A.sample(i)[j] + cb[i] * B.sample(i)[j];
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(a) || tape.requires_grad(b),
                   [=, ca = std::move(ca), cb = std::move(cb)](Tape<T>& tp) {
                     const Tensor<T>& dY = tp.grad_mut(Var{self});
                     const int N = dY.n;
                     if (tp.requires_grad(a)) {
                       Tensor<T>& dA = tp.grad_mut(a);
                       for (int i = 0; i < N; ++i)
                         for (std::size_t j = 0; j < ss; ++j) dA.sample(i)[j] += ca[i] * dY.sample(i)[j];
                     }
                     if (tp.requires_grad(b)) {
                       Tensor<T>& dB = tp.grad_mut(b);
                       for (int i = 0; i < N; ++i)
                         for (std::size_t j = 0; j < ss; ++j) dB.sample(i)[j] += cb[i] * dY.sample(i)[j];
                     }
                   });
}

template <typename T>
Var clamp(Tape<T>& tape, Var x, T lo, T hi) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> Y(X.n, X.c, X.h, X.w);
  for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = std::clamp(X.data[i], lo, hi);
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Xv = tp.value(x);
    Tensor<T>& dX = tp.grad_mut(x);
    for (std::size_t i = 0; i < Xv.size(); ++i)
      if (Xv.data[i] > lo && Xv.data[i] < hi) dX.data[i] += dY.data[i];
  });
}

template <typename T>
Var select_samples(Tape<T>& tape, Var x, std::vector<int> indices) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> Y(static_cast<int>(indices.size()), X.c, X.h, X.w);
  const std::size_t ss = X.sample_size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    check(indices[k] >= 0 && indices[k] < X.n, "select_samples", "index out of range");
    std::copy(X.sample(indices[k]), X.sample(indices[k]) + ss, Y.sample(static_cast<int>(k)));
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=, indices = std::move(indices)](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    Tensor<T>& dX = tp.grad_mut(x);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const T* s = dY.sample(static_cast<int>(k));
      T* d = dX.sample(indices[k]);
      for (std::size_t j = 0; j < ss; ++j) d[j] += s[j];
    }
  });
}

template <typename T>
Var sq_diff_per_sample(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  check(A.same_shape(B), "sq_diff_per_sample", A.shape_str() + " vs " + B.shape_str());
  Tensor<T> Y(A.n, 1, 1, 1);
  const std::size_t ss = A.sample_size();
  for (int i = 0; i < A.n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < ss; ++j) {
      const T d = A.sample(i)[j] - B.sample(i)[j];
      s += d * d;
    }
    Y.data[i] = s;
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(a) || tape.requires_grad(b), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    const Tensor<T>& Av = tp.value(a);
    const Tensor<T>& Bv = tp.value(b);
    const bool ga = tp.requires_grad(a), gb = tp.requires_grad(b);
    T* da = ga ? tp.grad_mut(a).data.data() : nullptr;
    T* db = gb ? tp.grad_mut(b).data.data() : nullptr;
    for (int i = 0; i < Av.n; ++i) {
      const T g = T(2) * dY.data[i];
      for (std::size_t j = 0; j < ss; ++j) {
        const std::size_t idx = i * ss + j;
        const T d = g * (Av.data[idx] - Bv.data[idx]);
        if (da) da[idx] += d;
        if (db) db[idx] -= d;
      }
    }
  });
}

template <typename T>
Var weighted_sum(Tape<T>& tape, Var v, std::vector<T> weights) {
  const Tensor<T>& V = tape.value(v);
  check(V.size() == weights.size(), "weighted_sum", "weight count");
  T s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * V.data[i];
  const int self = static_cast<int>(tape.size());
  return tape.push(Tensor<T>(1, 1, 1, 1, s), tape.requires_grad(v),
                   [=, weights = std::move(weights)](Tape<T>& tp) {
                     const T g = tp.grad_mut(Var{self}).data[0];
                     Tensor<T>& dV = tp.grad_mut(v);
                     for (std::size_t i = 0; i < weights.size(); ++i) dV.data[i] += g * weights[i];
                   });
}

template <typename T>
Var embed_rows(Tape<T>& tape, Var table, std::vector<int> rows) {
  const Tensor<T>& Tb = tape.value(table);
  const std::size_t D = Tb.sample_size();
  Tensor<T> Y(static_cast<int>(rows.size()), static_cast<int>(D), 1, 1);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    check(rows[k] < Tb.n, "embed_rows", "row out of range");
    if (rows[k] >= 0) std::copy(Tb.sample(rows[k]), Tb.sample(rows[k]) + D, Y.sample(static_cast<int>(k)));
  }
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(table), [=, rows = std::move(rows)](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    Tensor<T>& dT = tp.grad_mut(table);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] < 0) continue;
      const T* s = dY.sample(static_cast<int>(k));
      T* d = dT.sample(rows[k]);
      for (std::size_t j = 0; j < D; ++j) d[j] += s[j];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
  Tensor<T> Y = tape.value(x);
  for (T& v : Y.data) v *= factor;
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(Y), tape.requires_grad(x), [=](Tape<T>& tp) {
    const Tensor<T>& dY = tp.grad_mut(Var{self});
    Tensor<T>& dX = tp.grad_mut(x);
    for (std::size_t i = 0; i < dX.size(); ++i) dX.data[i] += factor * dY.data[i];
  });
}

#define CDAUG_INSTANTIATE_OPS(T)                                                         \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var);                                       \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                       \
  template Var group_norm<T>(Tape<T>&, Var, Var, Var, int);                              \
  template Var silu<T>(Tape<T>&, Var);                                                   \
  template Var relu<T>(Tape<T>&, Var);                                                   \
  template Var add<T>(Tape<T>&, Var, Var);                                               \
  template Var mul<T>(Tape<T>&, Var, Var);                                               \
  template Var add_channel_bias<T>(Tape<T>&, Var, Var);                                  \
  template Var avg_pool2<T>(Tape<T>&, Var);                                              \
  template Var spatial_mean<T>(Tape<T>&, Var);                                           \
  template Var upsample2<T>(Tape<T>&, Var);                                              \
  template Var concat_channels<T>(Tape<T>&, Var, Var);                                   \
  template Var per_sample_affine<T>(Tape<T>&, Var, Var, std::vector<T>, std::vector<T>); \
  template Var clamp<T>(Tape<T>&, Var, T, T);                                            \
  template Var select_samples<T>(Tape<T>&, Var, std::vector<int>);                       \
  template Var sq_diff_per_sample<T>(Tape<T>&, Var, Var);                                \
  template Var weighted_sum<T>(Tape<T>&, Var, std::vector<T>);                           \
  template Var embed_rows<T>(Tape<T>&, Var, std::vector<int>);                           \
  template Var scale<T>(Tape<T>&, Var, T);

CDAUG_INSTANTIATE_OPS(float)
CDAUG_INSTANTIATE_OPS(double)

#undef CDAUG_INSTANTIATE_OPS

}  // namespace cdaug::nn

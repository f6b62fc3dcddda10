#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mbp/common.hpp"
#include "mbp/tensor.hpp"

// Plain CHW tensor kernels shared by the autodiff tape and the streaming
// evaluator. Every reduction runs in a fixed order on one thread, so results
// are bitwise reproducible regardless of the thread count.

namespace mbp::kernels {

// Grow-only scratch: resize() never shrinks these, so alternating between
// small and large convolutions does not re-value-initialize the big buffer.
template <typename T>
T* scratch_a(size_t n) {
  static thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}
template <typename T>
T* scratch_b(size_t n) {
  static thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// col is R x N with R = cin*k*k, N = ho*wo; row r = (ic*k + ky)*k + kx.
template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, int ho, int wo, T* col) {
  const int cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int64_t n = int64_t(ho) * wo;
  for (int ic = 0; ic < cin; ++ic)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((int64_t(ic) * k + ky) * k + kx) * n;
        for (int oy = 0; oy < ho; ++oy, dst += wo) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x.data() + (int64_t(ic) * h + iy) * w;
          if (stride == 1) {
            const int ix0 = kx - pad;
            const int lo = std::max(0, -ix0);
            const int hi = std::min(wo, w - ix0);
            if (lo > 0) std::fill(dst, dst + lo, T(0));
            if (hi < wo) std::fill(dst + std::max(lo, hi), dst + wo, T(0));
            if (hi > lo) std::copy(src + ix0 + lo, src + ix0 + hi, dst + lo);
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
}

template <typename T>
Shape conv2d_out_shape(const Shape& x, const Shape& w, int stride, int pad) {
  const int k = w[2];
  const int ho = (x[1] + 2 * pad - k) / stride + 1;
  const int wo = (x[2] + 2 * pad - k) / stride + 1;
  return Shape{w[0], ho, wo};
}

// C[m][0..n) += A[m][0..r) * B[r][0..n) with B rows contiguous (leading
// dimension ldb). Strips of 32 columns are held in register accumulators
// across the whole r loop for four C rows at a time, so the hot loop is pure
// load+FMA. Each C element is summed over r in one fixed sequential order,
// which keeps results bitwise reproducible.
template <typename T>
void gemm_rows(const T* a, const T* b, T* c, int m, int r, int64_t n, int64_t ldb) {
  constexpr int S = 32;
  for (int64_t n0 = 0; n0 < n; n0 += S) {
    const int len = static_cast<int>(std::min<int64_t>(S, n - n0));
    const T* bcol = b + n0;
    int m0 = 0;
    // eight-row tiles first: one loaded B strip feeds eight accumulators,
    // which roughly halves the streamed traffic against four-row tiles
    for (; m0 + 8 <= m && len == S; m0 += 8) {
      T acc0[S] = {}, acc1[S] = {}, acc2[S] = {}, acc3[S] = {};
      T acc4[S] = {}, acc5[S] = {}, acc6[S] = {}, acc7[S] = {};
      const T* a0 = a + int64_t(m0) * r;
      const T* a1 = a0 + r;
      const T* a2 = a1 + r;
      const T* a3 = a2 + r;
      const T* a4 = a3 + r;
      const T* a5 = a4 + r;
      const T* a6 = a5 + r;
      const T* a7 = a6 + r;
      for (int rr = 0; rr < r; ++rr) {
        const T* brow = bcol + int64_t(rr) * ldb;
        const T v0 = a0[rr], v1 = a1[rr], v2 = a2[rr], v3 = a3[rr];
        const T v4 = a4[rr], v5 = a5[rr], v6 = a6[rr], v7 = a7[rr];
        for (int i = 0; i < S; ++i) {
          const T bv = brow[i];
          acc0[i] += v0 * bv;
          acc1[i] += v1 * bv;
          acc2[i] += v2 * bv;
          acc3[i] += v3 * bv;
          acc4[i] += v4 * bv;
          acc5[i] += v5 * bv;
          acc6[i] += v6 * bv;
          acc7[i] += v7 * bv;
        }
      }
      T* crow = c + int64_t(m0) * n + n0;
      const T* accs[8] = {acc0, acc1, acc2, acc3, acc4, acc5, acc6, acc7};
      for (int j = 0; j < 8; ++j, crow += n)
        for (int i = 0; i < S; ++i) crow[i] += accs[j][i];
    }
    for (; m0 + 4 <= m; m0 += 4) {
      T acc0[S] = {}, acc1[S] = {}, acc2[S] = {}, acc3[S] = {};
      const T* a0 = a + int64_t(m0) * r;
      const T* a1 = a0 + r;
      const T* a2 = a1 + r;
      const T* a3 = a2 + r;
      if (len == S) {
        for (int rr = 0; rr < r; ++rr) {
          const T* brow = bcol + int64_t(rr) * ldb;
          const T v0 = a0[rr], v1 = a1[rr], v2 = a2[rr], v3 = a3[rr];
          for (int i = 0; i < S; ++i) {
            const T bv = brow[i];
            acc0[i] += v0 * bv;
            acc1[i] += v1 * bv;
            acc2[i] += v2 * bv;
            acc3[i] += v3 * bv;
          }
        }
      } else {
        for (int rr = 0; rr < r; ++rr) {
          const T* brow = bcol + int64_t(rr) * ldb;
          const T v0 = a0[rr], v1 = a1[rr], v2 = a2[rr], v3 = a3[rr];
          for (int i = 0; i < len; ++i) {
            const T bv = brow[i];
            acc0[i] += v0 * bv;
            acc1[i] += v1 * bv;
            acc2[i] += v2 * bv;
            acc3[i] += v3 * bv;
          }
        }
      }
      T* crow = c + int64_t(m0) * n + n0;
      for (int i = 0; i < len; ++i) crow[i] += acc0[i];
      crow += n;
      for (int i = 0; i < len; ++i) crow[i] += acc1[i];
      crow += n;
      for (int i = 0; i < len; ++i) crow[i] += acc2[i];
      crow += n;
      for (int i = 0; i < len; ++i) crow[i] += acc3[i];
    }
    for (; m0 < m; ++m0) {
      T acc[S] = {};
      const T* arow = a + int64_t(m0) * r;
      for (int rr = 0; rr < r; ++rr) {
        const T* brow = bcol + int64_t(rr) * ldb;
        const T v = arow[rr];
        for (int i = 0; i < len; ++i) acc[i] += v * brow[i];
      }
      T* crow = c + int64_t(m0) * n + n0;
      for (int i = 0; i < len; ++i) crow[i] += acc[i];
    }
  }
}

// C[m][q] += sum_n A[m][n] * B[q][n], all rows contiguous. Both operands are
// streamed strip-wise with per-lane register accumulators; lanes are folded in
// a fixed order at the end, so every C element sees one deterministic
// summation order.
template <typename T>
void gemm_abt(const T* a, const T* b, T* c, int m, int q, int64_t n, int ldc) {
  constexpr int S = 16;
  int m0 = 0;
  for (; m0 + 4 <= m; m0 += 4) {
    int q0 = 0;
    for (; q0 + 4 <= q; q0 += 4) {
      T acc[4][4][S] = {};
      const int64_t strips = n / S;
      for (int64_t s = 0; s < strips; ++s) {
        const int64_t off = s * S;
        for (int i = 0; i < 4; ++i) {
          const T* arow = a + int64_t(m0 + i) * n + off;
          for (int j = 0; j < 4; ++j) {
            const T* brow = b + int64_t(q0 + j) * n + off;
            T* lane = acc[i][j];
            for (int l = 0; l < S; ++l) lane[l] += arow[l] * brow[l];
          }
        }
      }
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          T total = T(0);
          for (int l = 0; l < S; ++l) total += acc[i][j][l];
          const T* arow = a + int64_t(m0 + i) * n;
          const T* brow = b + int64_t(q0 + j) * n;
          for (int64_t t = strips * S; t < n; ++t) total += arow[t] * brow[t];
          c[int64_t(m0 + i) * ldc + (q0 + j)] += total;
        }
    }
    for (; q0 < q; ++q0)
      for (int i = 0; i < 4; ++i) {
        const T* arow = a + int64_t(m0 + i) * n;
        const T* brow = b + int64_t(q0) * n;
        T total = T(0);
        for (int64_t t = 0; t < n; ++t) total += arow[t] * brow[t];
        c[int64_t(m0 + i) * ldc + q0] += total;
      }
  }
  for (; m0 < m; ++m0)
    for (int q0 = 0; q0 < q; ++q0) {
      const T* arow = a + int64_t(m0) * n;
      const T* brow = b + int64_t(q0) * n;
      T total = T(0);
      for (int64_t t = 0; t < n; ++t) total += arow[t] * brow[t];
      c[int64_t(m0) * ldc + q0] += total;
    }
}

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& out,
                    int stride, int pad) {
  const int cout = w.shape()[0], cin = w.shape()[1], k = w.shape()[2];
  const int ho = out.shape()[1], wo = out.shape()[2];
  const int r = cin * k * k;
  const int64_t n = int64_t(ho) * wo;
  T* col = scratch_a<T>(size_t(r) * n);
  im2col(x, k, stride, pad, ho, wo, col);
  for (int oc = 0; oc < cout; ++oc) {
    T* orow = out.data() + int64_t(oc) * n;
    std::fill(orow, orow + n, b[oc]);
  }
  if (num_threads() <= 1 || cout < 8) {
    gemm_rows(w.data(), col, out.data(), cout, r, n, n);
  } else {
    const int groups = (cout + 3) / 4;
    parallel_for(groups, [&](int64_t gidx) {
      const int m0 = static_cast<int>(gidx * 4);
      const int mrows = std::min(4, cout - m0);
      gemm_rows(w.data() + int64_t(m0) * r, col, out.data() + int64_t(m0) * n, mrows, r, n, n);
    });
  }
}

// scatter-add of a col buffer back onto the input image
template <typename T>
void col2im_add(const T* col, int cin, int h, int w, int k, int stride, int pad, int ho, int wo,
                T* img) {
  const int64_t n = int64_t(ho) * wo;
  for (int ic = 0; ic < cin; ++ic)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((int64_t(ic) * k + ky) * k + kx) * n;
        for (int oy = 0; oy < ho; ++oy, src += wo) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (int64_t(ic) * h + iy) * w;
          if (stride == 1) {
            const int ix0 = kx - pad;
            const int lo = std::max(0, -ix0);
            const int hi = std::min(wo, w - ix0);
            for (int ox = lo; ox < hi; ++ox) dst[ix0 + ox] += src[ox];
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
}

// Accumulates into whichever of gx/gw/gb is non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout, int stride,
                     int pad, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const int cout = w.shape()[0], cin = w.shape()[1], k = w.shape()[2];
  const int ho = gout.shape()[1], wo = gout.shape()[2];
  const int h = x.shape()[1], wid = x.shape()[2];
  const int r = cin * k * k;
  const int64_t n = int64_t(ho) * wo;

  if (gb) {
    for (int oc = 0; oc < cout; ++oc) {
      const T* g = gout.data() + oc * n;
      T acc = T(0);
      for (int64_t i = 0; i < n; ++i) acc += g[i];
      (*gb)[oc] += acc;
    }
  }

  if (gw) {
    // dW (cout x r) += dOut (cout x n) * col (r x n)^T
    T* col = scratch_a<T>(size_t(r) * n);
    im2col(x, k, stride, pad, ho, wo, col);
    if (num_threads() <= 1 || cout < 8) {
      gemm_abt(gout.data(), col, gw->data(), cout, r, n, r);
    } else {
      const int groups = (cout + 3) / 4;
      parallel_for(groups, [&](int64_t gidx) {
        const int m0 = static_cast<int>(gidx * 4);
        const int mrows = std::min(4, cout - m0);
        gemm_abt(gout.data() + int64_t(m0) * n, col, gw->data() + int64_t(m0) * r, mrows, r, n,
                 r);
      });
    }
  }

  if (gx) {
    // dcol (r x n) = W^T (r x cout) * dOut (cout x n), then scatter to dX
    T* wt = scratch_b<T>(size_t(r) * cout);
    for (int oc = 0; oc < cout; ++oc)
      for (int rr = 0; rr < r; ++rr) wt[size_t(rr) * cout + oc] = w[int64_t(oc) * r + rr];
    T* dcol = scratch_a<T>(size_t(r) * n);
    std::fill(dcol, dcol + size_t(r) * n, T(0));
    if (num_threads() <= 1 || r < 8) {
      gemm_rows(wt, gout.data(), dcol, r, cout, n, n);
    } else {
      const int groups = (r + 3) / 4;
      parallel_for(groups, [&](int64_t gidx) {
        const int m0 = static_cast<int>(gidx * 4);
        const int mrows = std::min(4, r - m0);
        gemm_rows(wt + int64_t(m0) * cout, gout.data(), dcol + int64_t(m0) * n, mrows, cout, n,
                  n);
      });
    }
    col2im_add(dcol, cin, h, wid, k, stride, pad, ho, wo, gx->data());
  }
}

// ---- bilinear x2 (half-pixel sample points, indices clamped at borders) ----

template <typename T>
struct Tap {
  int i0, i1;
  T w1;
};

template <typename T>
void up2_taps(int out_n, int in_n, std::vector<Tap<T>>& taps) {
  taps.resize(out_n);
  for (int o = 0; o < out_n; ++o) {
    const double s = (o + 0.5) / 2.0 - 0.5;
    int i0 = static_cast<int>(std::floor(s));
    const T w1 = static_cast<T>(s - i0);
    int i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 > in_n - 1) i1 = in_n - 1;
    taps[o] = {i0, i1, w1};
  }
}

template <typename T>
void bilinear_up2(const Tensor<T>& x, Tensor<T>& out) {
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int ho = 2 * h, wo = 2 * w;
  std::vector<Tap<T>> ty, tx;
  up2_taps(ho, h, ty);
  up2_taps(wo, w, tx);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y) {
      const Tap<T>& a = ty[y];
      const T* r0 = x.data() + (int64_t(ch) * h + a.i0) * w;
      const T* r1 = x.data() + (int64_t(ch) * h + a.i1) * w;
      T* o = out.data() + (int64_t(ch) * ho + y) * wo;
      for (int xo = 0; xo < wo; ++xo) {
        const Tap<T>& bx = tx[xo];
        const T top = r0[bx.i0] * (T(1) - bx.w1) + r0[bx.i1] * bx.w1;
        const T bot = r1[bx.i0] * (T(1) - bx.w1) + r1[bx.i1] * bx.w1;
        o[xo] = top * (T(1) - a.w1) + bot * a.w1;
      }
    }
}

template <typename T>
void bilinear_up2_backward(const Tensor<T>& gout, Tensor<T>& gx) {
  const int c = gx.shape()[0], h = gx.shape()[1], w = gx.shape()[2];
  const int ho = 2 * h, wo = 2 * w;
  std::vector<Tap<T>> ty, tx;
  up2_taps(ho, h, ty);
  up2_taps(wo, w, tx);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y) {
      const Tap<T>& a = ty[y];
      T* r0 = gx.data() + (int64_t(ch) * h + a.i0) * w;
      T* r1 = gx.data() + (int64_t(ch) * h + a.i1) * w;
      const T* g = gout.data() + (int64_t(ch) * ho + y) * wo;
      for (int xo = 0; xo < wo; ++xo) {
        const Tap<T>& bx = tx[xo];
        const T gy0 = g[xo] * (T(1) - a.w1);
        const T gy1 = g[xo] * a.w1;
        r0[bx.i0] += gy0 * (T(1) - bx.w1);
        r0[bx.i1] += gy0 * bx.w1;
        r1[bx.i0] += gy1 * (T(1) - bx.w1);
        r1[bx.i1] += gy1 * bx.w1;
      }
    }
}

template <typename T>
void avg_pool2(const Tensor<T>& x, Tensor<T>& out) {
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int x2 = 0; x2 < w / 2; ++x2)
        out.at(ch, y, x2) = (x.at(ch, 2 * y, 2 * x2) + x.at(ch, 2 * y, 2 * x2 + 1) +
                             x.at(ch, 2 * y + 1, 2 * x2) + x.at(ch, 2 * y + 1, 2 * x2 + 1)) /
                            T(4);
}

}  // namespace mbp::kernels

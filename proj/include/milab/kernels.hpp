#pragma once

#include <cstdint>
#include <vector>

#include "milab/tensor.hpp"

// Raw kernels on contiguous double arrays. Row-major everywhere. Convolutions
// go through im2col + GEMM; the GEMM inner loops run over the contiguous
// dimension so they vectorize.

namespace milab::detail {

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const double* __restrict A,
                    const double* __restrict B, double* __restrict C) {
    for (std::int64_t i = 0; i < M; ++i) {
        const double* __restrict a_row = A + i * K;
        double* __restrict c_row = C + i * N;
        std::int64_t k = 0;
        for (; k + 1 < K; k += 2) {
            double a0 = a_row[k], a1 = a_row[k + 1];
            const double* __restrict b0 = B + k * N;
            const double* __restrict b1 = b0 + N;
            for (std::int64_t j = 0; j < N; ++j) c_row[j] += a0 * b0[j] + a1 * b1[j];
        }
        for (; k < K; ++k) {
            double a = a_row[k];
            const double* __restrict b_row = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const double* __restrict A,
                    const double* __restrict B, double* __restrict C) {
    const std::int64_t N4 = N & ~std::int64_t{3};
    for (std::int64_t i = 0; i < M; ++i) {
        const double* __restrict a_row = A + i * K;
        double* __restrict c_row = C + i * N;
        std::int64_t j = 0;
        for (; j < N4; j += 4) {
            const double* __restrict b0 = B + j * K;
            const double* __restrict b1 = b0 + K;
            const double* __restrict b2 = b1 + K;
            const double* __restrict b3 = b2 + K;
            double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
            for (std::int64_t k = 0; k < K; ++k) {
                double a = a_row[k];
                acc0 += a * b0[k];
                acc1 += a * b1[k];
                acc2 += a * b2[k];
                acc3 += a * b3[k];
            }
            c_row[j] += acc0;
            c_row[j + 1] += acc1;
            c_row[j + 2] += acc2;
            c_row[j + 3] += acc3;
        }
        for (; j < N; ++j) {
            const double* __restrict b_row = B + j * K;
            double acc = 0.0;
            for (std::int64_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
            c_row[j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const double* __restrict A,
                    const double* __restrict B, double* __restrict C) {
    for (std::int64_t k = 0; k < K; ++k) {
        const double* __restrict a_row = A + k * M;
        const double* __restrict b_row = B + k * N;
        for (std::int64_t i = 0; i < M; ++i) {
            double a = a_row[i];
            if (a == 0.0) continue;
            double* __restrict c_row = C + i * N;
            for (std::int64_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

struct ConvDims {
    int ci, h, w;        // input channels / spatial
    int co, kh, kw;      // filters
    int stride, pad;
    int ho, wo;          // output spatial

    static ConvDims make(int ci, int h, int w, int co, int kh, int kw, int stride, int pad) {
        ConvDims d{ci, h, w, co, kh, kw, stride, pad, 0, 0};
        d.ho = (h + 2 * pad - kh) / stride + 1;
        d.wo = (w + 2 * pad - kw) / stride + 1;
        return d;
    }
    std::int64_t col_rows() const { return static_cast<std::int64_t>(ci) * kh * kw; }
    std::int64_t col_cols() const { return static_cast<std::int64_t>(ho) * wo; }
};

// x: [ci,h,w] -> col: [ci*kh*kw, ho*wo]
inline void im2col(const double* x, const ConvDims& d, double* col) {
    for (int c = 0; c < d.ci; ++c) {
        const double* xc = x + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int r = 0; r < d.kh; ++r) {
            for (int s = 0; s < d.kw; ++s) {
                double* row = col + (static_cast<std::int64_t>(c) * d.kh * d.kw + r * d.kw + s) * d.col_cols();
                for (int oh = 0; oh < d.ho; ++oh) {
                    int ih = oh * d.stride - d.pad + r;
                    double* out = row + static_cast<std::int64_t>(oh) * d.wo;
                    if (ih < 0 || ih >= d.h) {
                        for (int ow = 0; ow < d.wo; ++ow) out[ow] = 0.0;
                        continue;
                    }
                    const double* xr = xc + static_cast<std::int64_t>(ih) * d.w;
                    for (int ow = 0; ow < d.wo; ++ow) {
                        int iw = ow * d.stride - d.pad + s;
                        out[ow] = (iw >= 0 && iw < d.w) ? xr[iw] : 0.0;
                    }
                }
            }
        }
    }
}

// col: [ci*kh*kw, ho*wo] scatter-added into x: [ci,h,w]
inline void col2im(const double* col, const ConvDims& d, double* x) {
    for (int c = 0; c < d.ci; ++c) {
        double* xc = x + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int r = 0; r < d.kh; ++r) {
            for (int s = 0; s < d.kw; ++s) {
                const double* row =
                    col + (static_cast<std::int64_t>(c) * d.kh * d.kw + r * d.kw + s) * d.col_cols();
                for (int oh = 0; oh < d.ho; ++oh) {
                    int ih = oh * d.stride - d.pad + r;
                    if (ih < 0 || ih >= d.h) continue;
                    double* xr = xc + static_cast<std::int64_t>(ih) * d.w;
                    const double* in = row + static_cast<std::int64_t>(oh) * d.wo;
                    for (int ow = 0; ow < d.wo; ++ow) {
                        int iw = ow * d.stride - d.pad + s;
                        if (iw >= 0 && iw < d.w) xr[iw] += in[ow];
                    }
                }
            }
        }
    }
}

inline std::vector<double>& conv_scratch() {
    thread_local std::vector<double> buf;
    return buf;
}

// y[n] = W * im2col(x[n]);  x: [N,ci,h,w], w: [co,ci,kh,kw], y: [N,co,ho,wo]
inline void conv2d_forward(const double* x, const double* w, double* y, std::int64_t batch,
                           const ConvDims& d) {
    std::int64_t in_sz = static_cast<std::int64_t>(d.ci) * d.h * d.w;
    std::int64_t out_sz = static_cast<std::int64_t>(d.co) * d.ho * d.wo;
    parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
        auto& col = conv_scratch();
        col.resize(static_cast<std::size_t>(d.col_rows() * d.col_cols()));
        for (std::int64_t n = lo; n < hi; ++n) {
            im2col(x + n * in_sz, d, col.data());
            double* yn = y + n * out_sz;
            for (std::int64_t i = 0; i < out_sz; ++i) yn[i] = 0.0;
            gemm_nn(d.co, d.col_cols(), d.col_rows(), w, col.data(), yn);
        }
    });
}

// gx[n] = col2im(W^T * gy[n]);  gy: [N,co,ho,wo] -> gx: [N,ci,h,w]
inline void conv2d_input_grad(const double* gy, const double* w, double* gx, std::int64_t batch,
                              const ConvDims& d) {
    std::int64_t in_sz = static_cast<std::int64_t>(d.ci) * d.h * d.w;
    std::int64_t out_sz = static_cast<std::int64_t>(d.co) * d.ho * d.wo;
    parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
        auto& col = conv_scratch();
        col.resize(static_cast<std::size_t>(d.col_rows() * d.col_cols()));
        for (std::int64_t n = lo; n < hi; ++n) {
            std::fill(col.begin(), col.end(), 0.0);
            gemm_tn(d.col_rows(), d.col_cols(), d.co, w, gy + n * out_sz, col.data());
            double* gxn = gx + n * in_sz;
            for (std::int64_t i = 0; i < in_sz; ++i) gxn[i] = 0.0;
            col2im(col.data(), d, gxn);
        }
    });
}

// gw += sum_n gy[n] * im2col(x[n])^T;  single-threaded accumulation into gw
inline void conv2d_weight_grad(const double* x, const double* gy, double* gw, std::int64_t batch,
                               const ConvDims& d) {
    std::int64_t in_sz = static_cast<std::int64_t>(d.ci) * d.h * d.w;
    std::int64_t out_sz = static_cast<std::int64_t>(d.co) * d.ho * d.wo;
    std::int64_t w_sz = static_cast<std::int64_t>(d.co) * d.col_rows();
    for (std::int64_t i = 0; i < w_sz; ++i) gw[i] = 0.0;
    auto& col = conv_scratch();
    col.resize(static_cast<std::size_t>(d.col_rows() * d.col_cols()));
    for (std::int64_t n = 0; n < batch; ++n) {
        im2col(x + n * in_sz, d, col.data());
        gemm_nt(d.co, d.col_rows(), d.col_cols(), gy + n * out_sz, col.data(), gw);
    }
}

// 2x2-style max pooling with kernel == stride. Records flat argmax per output.
inline void maxpool_forward(const double* x, double* y, std::int64_t* argmax, std::int64_t batch,
                            int channels, int h, int w, int k) {
    int ho = h / k;
    int wo = w / k;
    std::int64_t in_sz = static_cast<std::int64_t>(channels) * h * w;
    std::int64_t out_sz = static_cast<std::int64_t>(channels) * ho * wo;
    for (std::int64_t n = 0; n < batch; ++n) {
        for (int c = 0; c < channels; ++c) {
            const double* xc = x + n * in_sz + static_cast<std::int64_t>(c) * h * w;
            std::int64_t base = n * in_sz + static_cast<std::int64_t>(c) * h * w;
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    double best = xc[(oh * k) * w + ow * k];
                    std::int64_t best_idx = base + (oh * k) * w + ow * k;
                    for (int r = 0; r < k; ++r) {
                        for (int s = 0; s < k; ++s) {
                            std::int64_t idx = (oh * k + r) * w + (ow * k + s);
                            if (xc[idx] > best) {
                                best = xc[idx];
                                best_idx = base + idx;
                            }
                        }
                    }
                    std::int64_t oidx = n * out_sz + (static_cast<std::int64_t>(c) * ho + oh) * wo + ow;
                    y[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
    }
}

}  // namespace milab::detail

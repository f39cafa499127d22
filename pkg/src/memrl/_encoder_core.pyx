# Fused inference-only encoder forward.
#
# Mirrors the autodiff forward pass exactly (same residual/normalization
# order, same masked-softmax stabilization) but runs embed + all layers in
# one C call per window batch: BLAS dgemm for the projections, tight loops
# for softmax/ReLU/residual/layer-norm. No gradients; the training tape
# stays in numpy. memrl.backend picks this lane up at import when present.

from libc.math cimport exp, sqrt

from scipy.linalg.cython_blas cimport dgemm


cdef inline void gemm_nn(int m, int k, int n,
                         const double* a, int lda,
                         const double* b, int ldb,
                         double* c, int ldc,
                         double alpha) noexcept nogil:
    # Row-major C(m,n) = alpha * A(m,k) @ B(k,n); ld* are row strides.
    # Column-major BLAS computes C^T = B^T @ A^T under the hood.
    cdef double beta = 0.0
    dgemm("N", "N", &n, &m, &k, &alpha,
          <double*> b, &ldb, <double*> a, &lda, &beta, c, &ldc)


cdef inline void gemm_nt(int m, int k, int n,
                         const double* a, int lda,
                         const double* b, int ldb,
                         double* c, int ldc,
                         double alpha) noexcept nogil:
    # Row-major C(m,n) = alpha * A(m,k) @ B(n,k)^T; ld* are row strides.
    cdef double beta = 0.0
    dgemm("T", "N", &n, &m, &k, &alpha,
          <double*> b, &ldb, <double*> a, &lda, &beta, c, &ldc)


cdef inline void causal_softmax_rows(double* s, int n) noexcept nogil:
    # In-place row softmax over the lower triangle; columns j > i forced to 0.
    cdef int i, j
    cdef double mx, tot
    for i in range(n):
        mx = s[i * n]
        for j in range(1, i + 1):
            if s[i * n + j] > mx:
                mx = s[i * n + j]
        tot = 0.0
        for j in range(i + 1):
            s[i * n + j] = exp(s[i * n + j] - mx)
            tot += s[i * n + j]
        for j in range(i + 1):
            s[i * n + j] /= tot
        for j in range(i + 1, n):
            s[i * n + j] = 0.0


cdef inline void layer_norm_rows(double* x, const double* gain, const double* bias,
                                 int n, int d, double eps) noexcept nogil:
    cdef int i, j
    cdef double mu, var, diff, inv
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i * d + j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i * d + j] - mu
            var += diff * diff
        var /= d
        inv = 1.0 / sqrt(var + eps)
        for j in range(d):
            x[i * d + j] = (x[i * d + j] - mu) * inv * gain[j] + bias[j]


def forward_stack(double[:, :, ::1] feats,
                  double[:, ::1] w_embed,
                  double[:, ::1] pos,
                  double[:, :, ::1] wq, double[:, :, ::1] wk,
                  double[:, :, ::1] wv, double[:, :, ::1] wo,
                  double[:, :, ::1] w1, double[:, ::1] b1,
                  double[:, :, ::1] w2, double[:, ::1] b2,
                  double[:, ::1] ln1_g, double[:, ::1] ln1_b,
                  double[:, ::1] ln2_g, double[:, ::1] ln2_b,
                  int n_heads, bint use_ln,
                  double[:, ::1] ws_x, double[:, ::1] ws_q,
                  double[:, ::1] ws_k, double[:, ::1] ws_v,
                  double[:, ::1] ws_s, double[:, ::1] ws_c,
                  double[:, ::1] ws_h,
                  double[:, :, :, ::1] out_stack,
                  bint want_attn,
                  double[:, :, :, :, ::1] out_attn):
    """Fill out_stack (B, L+1, N, d) with per-layer memories for each window.

    ws_* are caller-allocated scratch buffers: x/q/k/v/c (N, d), s (N, N),
    h (N, d_ff). When want_attn, out_attn (B, L, H, N, N) receives the
    attention weights.
    """
    cdef int B = feats.shape[0]
    cdef int N = feats.shape[1]
    cdef int F = feats.shape[2]
    cdef int d = w_embed.shape[1]
    cdef int L = wq.shape[0]
    cdef int dff = w1.shape[2]
    cdef int dh = d // n_heads
    cdef double scale = 1.0 / sqrt(<double> dh)
    cdef double eps = 1e-5

    cdef int b, l, h, i, j
    cdef double* x = &ws_x[0, 0]
    cdef double* q = &ws_q[0, 0]
    cdef double* k = &ws_k[0, 0]
    cdef double* v = &ws_v[0, 0]
    cdef double* s = &ws_s[0, 0]
    cdef double* c = &ws_c[0, 0]
    cdef double* hbuf = &ws_h[0, 0]

    with nogil:
        for b in range(B):
            # embed + positions
            gemm_nn(N, F, d, &feats[b, 0, 0], F, &w_embed[0, 0], d, x, d, 1.0)
            for i in range(N):
                for j in range(d):
                    x[i * d + j] += pos[i, j]
                    out_stack[b, 0, i, j] = x[i * d + j]

            for l in range(L):
                gemm_nn(N, d, d, x, d, &wq[l, 0, 0], d, q, d, 1.0)
                gemm_nn(N, d, d, x, d, &wk[l, 0, 0], d, k, d, 1.0)
                gemm_nn(N, d, d, x, d, &wv[l, 0, 0], d, v, d, 1.0)
                for h in range(n_heads):
                    gemm_nt(N, dh, N, q + h * dh, d, k + h * dh, d, s, N, scale)
                    causal_softmax_rows(s, N)
                    if want_attn:
                        for i in range(N):
                            for j in range(N):
                                out_attn[b, l, h, i, j] = s[i * N + j]
                    gemm_nn(N, N, dh, s, N, v + h * dh, d, c + h * dh, d, 1.0)
                # attention output projection + residual (q reused as scratch)
                gemm_nn(N, d, d, c, d, &wo[l, 0, 0], d, q, d, 1.0)
                for i in range(N * d):
                    x[i] += q[i]
                if use_ln:
                    layer_norm_rows(x, &ln1_g[l, 0], &ln1_b[l, 0], N, d, eps)
                # position-wise feed-forward + residual
                gemm_nn(N, d, dff, x, d, &w1[l, 0, 0], dff, hbuf, dff, 1.0)
                for i in range(N):
                    for j in range(dff):
                        hbuf[i * dff + j] += b1[l, j]
                        if hbuf[i * dff + j] < 0.0:
                            hbuf[i * dff + j] = 0.0
                gemm_nn(N, dff, d, hbuf, dff, &w2[l, 0, 0], d, q, d, 1.0)
                for i in range(N):
                    for j in range(d):
                        x[i * d + j] += q[i * d + j] + b2[l, j]
                if use_ln:
                    layer_norm_rows(x, &ln2_g[l, 0], &ln2_b[l, 0], N, d, eps)
                for i in range(N):
                    for j in range(d):
                        out_stack[b, l + 1, i, j] = x[i * d + j]

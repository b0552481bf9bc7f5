# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused forward/backward kernel for the batched training step.

Computes the combined loss (next-token term on positive rows plus the
trajectory- or detailed-balance term over all rows) and its gradients with
respect to every policy parameter, for a whole trajectory batch in one call.
Matrix products go through BLAS dgemm; everything else is explicit loops.

The math mirrors `trainstep.pure_loss` exactly; the test suite asserts
gradient agreement between the two backends.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _mm_nn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, double beta) noexcept nogil:
    # C(m,n) = A(m,k) @ B(k,n) + beta*C, row-major
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[1]
    cdef double alpha = 1.0
    dgemm("N", "N", &n, &m, &k, &alpha, &B[0, 0], &n, &A[0, 0], &k, &beta, &C[0, 0], &n)


cdef void _mm_nt(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, double beta) noexcept nogil:
    # C(m,n) = A(m,k) @ B(n,k).T + beta*C
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[0]
    cdef double alpha = 1.0
    dgemm("T", "N", &n, &m, &k, &alpha, &B[0, 0], &k, &A[0, 0], &k, &beta, &C[0, 0], &n)


cdef void _mm_tn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, double beta) noexcept nogil:
    # C(m,n) = A(k,m).T @ B(k,n) + beta*C
    cdef int k = A.shape[0], m = A.shape[1], n = B.shape[1]
    cdef double alpha = 1.0
    dgemm("N", "T", &n, &m, &k, &alpha, &B[0, 0], &n, &A[0, 0], &m, &beta, &C[0, 0], &n)


def fused_step(list params,
               cnp.int64_t[::1] vocabs,
               int input_dim, int hidden, int token_dim, int user_z,
               cnp.int64_t[:, ::1] tokens,
               double[:, ::1] step_mask,
               cnp.int64_t[:, ::1] limits,
               double[:, ::1] pooled,
               double[::1] is_positive,
               double[::1] log_reward,
               int include_gr, int variant_db, double lam, int num_records):
    cdef int R = tokens.shape[0]
    cdef int T = tokens.shape[1]
    cdef int H = hidden
    cdef int td = token_dim
    cdef int trunk_in = H + T * td
    cdef int r, l, j, h, v, tok, lim, vl
    cdef double inv_b = 1.0 / num_records
    cdef double acc, mx, denom, coef, dlp, df

    # --- unpack parameters (canonical order, see policy.param_names) ---
    cdef double[:, ::1] user_w = params[0]
    cdef double[::1] user_b = params[1]
    cdef int base = 2
    cdef double[:, ::1] trunk1_w = params[base + T]
    cdef double[::1] trunk1_b = params[base + T + 1]
    cdef double[:, ::1] trunk2_w = params[base + T + 2]
    cdef double[::1] trunk2_b = params[base + T + 3]
    heads_w = [params[base + T + 4 + 2 * i] for i in range(T)]
    heads_b = [params[base + T + 5 + 2 * i] for i in range(T)]
    cdef double[::1] flow_w = params[base + 3 * T + 4]
    cdef double flow_b = float(params[base + 3 * T + 5])
    cdef double log_z = float(params[base + 3 * T + 6])
    cdef double[::1] log_z_w = None
    if user_z:
        log_z_w = params[base + 3 * T + 7]

    # --- gradients ---
    grads = [np.zeros_like(np.asarray(p)) for p in params]
    cdef double[:, ::1] g_user_w = grads[0]
    cdef double[::1] g_user_b = grads[1]
    cdef double[:, ::1] g_trunk1_w = grads[base + T]
    cdef double[::1] g_trunk1_b = grads[base + T + 1]
    cdef double[:, ::1] g_trunk2_w = grads[base + T + 2]
    cdef double[::1] g_trunk2_b = grads[base + T + 3]
    cdef double[::1] g_flow_w = grads[base + 3 * T + 4]
    cdef double g_flow_b = 0.0
    cdef double g_log_z = 0.0
    cdef double[::1] g_log_z_w = None
    if user_z:
        g_log_z_w = grads[base + 3 * T + 7]

    # --- forward workspace ---
    u_pre = np.empty((R, H))
    cdef double[:, ::1] u_enc = u_pre
    _mm_nn(pooled, user_w, u_enc, 0.0)
    for r in range(R):
        for h in range(H):
            u_enc[r, h] = tanh(u_enc[r, h] + user_b[h])

    cdef int vmax = 0
    for l in range(T):
        if vocabs[l] > vmax:
            vmax = vocabs[l]

    X_np = np.zeros((T, R, trunk_in))
    Z1_np = np.empty((T, R, H))
    Z2_np = np.empty((T, R, H))
    probs_np = np.zeros((T, R, vmax))
    logp_np = np.zeros((R, T))
    flow_np = np.zeros((R, T))
    lengths_np = np.zeros(R, dtype=np.int64)
    cdef double[:, :, ::1] X = X_np
    cdef double[:, :, ::1] Z1 = Z1_np
    cdef double[:, :, ::1] Z2 = Z2_np
    cdef double[:, :, ::1] probs = probs_np
    cdef double[:, ::1] logp = logp_np
    cdef double[:, ::1] flow = flow_np
    cdef cnp.int64_t[::1] lengths = lengths_np

    for r in range(R):
        for l in range(T):
            if step_mask[r, l] > 0.5:
                lengths[r] += 1

    cdef double[:, ::1] emb_l
    cdef double[:, ::1] head_w
    cdef double[::1] head_b
    cdef double[:, ::1] Xl, Z1l, Z2l, probs_l, logits_l

    for l in range(T):
        Xl = X[l]
        # state input: [user encoding | filled prefix slots | zero slots]
        for r in range(R):
            for h in range(H):
                Xl[r, h] = u_enc[r, h]
        for j in range(l):
            emb_l = params[base + j]
            for r in range(R):
                tok = tokens[r, j]
                for h in range(td):
                    Xl[r, H + j * td + h] = emb_l[tok, h]
        Z1l = Z1[l]
        _mm_nn(Xl, trunk1_w, Z1l, 0.0)
        for r in range(R):
            for h in range(H):
                Z1l[r, h] = tanh(Z1l[r, h] + trunk1_b[h])
        Z2l = Z2[l]
        _mm_nn(Z1l, trunk2_w, Z2l, 0.0)
        for r in range(R):
            for h in range(H):
                Z2l[r, h] = tanh(Z2l[r, h] + trunk2_b[h])
        head_w = heads_w[l]
        head_b = heads_b[l]
        vl = vocabs[l]
        logits_l = np.empty((R, vl))
        _mm_nn(Z2l, head_w, logits_l, 0.0)
        probs_l = probs[l]
        for r in range(R):
            lim = limits[r, l]
            if lim > vl:
                lim = vl
            mx = logits_l[r, 0] + head_b[0]
            for v in range(lim):
                logits_l[r, v] += head_b[v]
                if logits_l[r, v] > mx:
                    mx = logits_l[r, v]
            denom = 0.0
            for v in range(lim):
                probs_l[r, v] = exp(logits_l[r, v] - mx)
                denom += probs_l[r, v]
            for v in range(lim):
                probs_l[r, v] /= denom
            tok = tokens[r, l]
            logp[r, l] = logits_l[r, tok] - mx - log(denom)
            acc = flow_b
            for h in range(H):
                acc += Z2l[r, h] * flow_w[h]
            flow[r, l] = acc

    # --- loss and gradients of logp / flow / log_z / log_reward ---
    sum_logp_np = np.zeros(R)
    logz_rows_np = np.empty(R)
    dlogp_np = np.zeros((R, T))
    dflow_np = np.zeros((R, T))
    du_enc_np = np.zeros((R, H))
    dl_dlogr_np = np.zeros(R)
    cdef double[::1] sum_logp = sum_logp_np
    cdef double[::1] logz_rows = logz_rows_np
    cdef double[:, ::1] dlogp = dlogp_np
    cdef double[:, ::1] dflow = dflow_np
    cdef double[:, ::1] du_enc = du_enc_np
    cdef double[::1] dl_dlogr = dl_dlogr_np

    for r in range(R):
        acc = 0.0
        for l in range(T):
            acc += step_mask[r, l] * logp[r, l]
        sum_logp[r] = acc
        logz_rows[r] = log_z
        if user_z:
            acc = 0.0
            for h in range(H):
                acc += u_enc[r, h] * log_z_w[h]
            logz_rows[r] += acc

    cdef double gr_val = 0.0
    cdef double gfn_val = 0.0
    cdef double delta, nxt
    cdef int ln

    if include_gr:
        for r in range(R):
            gr_val -= is_positive[r] * sum_logp[r]
        gr_val *= inv_b
        for r in range(R):
            if is_positive[r] != 0.0:
                for l in range(T):
                    dlogp[r, l] -= is_positive[r] * step_mask[r, l] * inv_b

    if lam > 0.0:
        if variant_db == 0:
            for r in range(R):
                delta = logz_rows[r] + sum_logp[r] - log_reward[r]
                gfn_val += delta * delta
                coef = lam * 2.0 * delta * inv_b
                for l in range(T):
                    dlogp[r, l] += coef * step_mask[r, l]
                g_log_z += coef
                if user_z:
                    for h in range(H):
                        g_log_z_w[h] += coef * u_enc[r, h]
                        du_enc[r, h] += coef * log_z_w[h]
                dl_dlogr[r] -= coef
        else:
            for r in range(R):
                ln = lengths[r]
                for l in range(ln):
                    if l + 1 < ln:
                        nxt = flow[r, l + 1]
                    else:
                        nxt = log_reward[r]
                    delta = flow[r, l] + logp[r, l] - nxt
                    gfn_val += delta * delta
                    coef = lam * 2.0 * delta * inv_b
                    dlogp[r, l] += coef
                    dflow[r, l] += coef
                    if l + 1 < ln:
                        dflow[r, l + 1] -= coef
                    else:
                        dl_dlogr[r] -= coef
        gfn_val *= inv_b

    # --- backprop through the network, level by level ---
    dZ2_np = np.empty((R, H))
    dZ1_np = np.empty((R, H))
    dX_np = np.empty((R, trunk_in))
    cdef double[:, ::1] dZ2 = dZ2_np
    cdef double[:, ::1] dZ1 = dZ1_np
    cdef double[:, ::1] dX = dX_np
    cdef double[:, ::1] g_head_w, g_emb
    cdef double[::1] g_head_b
    cdef double[:, ::1] dlogits_l

    for l in range(T):
        vl = vocabs[l]
        Xl = X[l]
        Z1l = Z1[l]
        Z2l = Z2[l]
        probs_l = probs[l]
        head_w = heads_w[l]
        g_head_w = grads[base + T + 4 + 2 * l]
        g_head_b = grads[base + T + 5 + 2 * l]
        dlogits_l = np.empty((R, vl))
        for r in range(R):
            dlp = dlogp[r, l]
            tok = tokens[r, l]
            lim = limits[r, l]
            if lim > vl:
                lim = vl
            for v in range(vl):
                dlogits_l[r, v] = 0.0
            if dlp != 0.0:
                for v in range(lim):
                    dlogits_l[r, v] = -dlp * probs_l[r, v]
                dlogits_l[r, tok] += dlp
        # head backward
        _mm_tn(Z2l, dlogits_l, g_head_w, 1.0)
        for v in range(vl):
            acc = 0.0
            for r in range(R):
                acc += dlogits_l[r, v]
            g_head_b[v] += acc
        _mm_nt(dlogits_l, head_w, dZ2, 0.0)
        # flow head backward
        for r in range(R):
            df = dflow[r, l]
            if df != 0.0:
                for h in range(H):
                    dZ2[r, h] += df * flow_w[h]
                    g_flow_w[h] += df * Z2l[r, h]
                g_flow_b += df
        # trunk backward
        for r in range(R):
            for h in range(H):
                dZ2[r, h] *= (1.0 - Z2l[r, h] * Z2l[r, h])
        _mm_tn(Z1l, dZ2, g_trunk2_w, 1.0)
        for h in range(H):
            acc = 0.0
            for r in range(R):
                acc += dZ2[r, h]
            g_trunk2_b[h] += acc
        _mm_nt(dZ2, trunk2_w, dZ1, 0.0)
        for r in range(R):
            for h in range(H):
                dZ1[r, h] *= (1.0 - Z1l[r, h] * Z1l[r, h])
        _mm_tn(Xl, dZ1, g_trunk1_w, 1.0)
        for h in range(H):
            acc = 0.0
            for r in range(R):
                acc += dZ1[r, h]
            g_trunk1_b[h] += acc
        _mm_nt(dZ1, trunk1_w, dX, 0.0)
        for r in range(R):
            for h in range(H):
                du_enc[r, h] += dX[r, h]
        for j in range(l):
            g_emb = grads[base + j]
            for r in range(R):
                tok = tokens[r, j]
                for h in range(td):
                    g_emb[tok, h] += dX[r, H + j * td + h]

    # --- user encoder backward ---
    for r in range(R):
        for h in range(H):
            du_enc[r, h] *= (1.0 - u_enc[r, h] * u_enc[r, h])
    _mm_tn(pooled, du_enc, g_user_w, 1.0)
    for h in range(H):
        acc = 0.0
        for r in range(R):
            acc += du_enc[r, h]
        g_user_b[h] += acc

    grads[base + 3 * T + 5] = np.array(g_flow_b)
    grads[base + 3 * T + 6] = np.array(g_log_z)
    return gr_val, gfn_val, grads, dl_dlogr_np

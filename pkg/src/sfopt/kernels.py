"""Small dense kernels on the O(N)-dimensional subspace.

Each kernel exists twice: a loop form compiled with numba and a vectorized
numpy form. ``SFOPT_DISABLE_NUMBA=1`` selects the numpy forms; both are
importable directly (``*_nb`` / ``*_np``) for cross-checks and benchmarks.
"""
import numpy as np

from ._jit import HAS_NUMBA, njit


# -- ordered Gram-Schmidt with one re-orthogonalization pass ---------------

def orthonormalize_np(V, tol):
    """Orthonormal basis for the columns of ``V`` taken in order.

    A column whose residual after projecting out the earlier basis vectors is
    below ``tol`` times its own norm is treated as dependent and contributes
    no basis vector. Returns ``(Q, R, rank)`` with ``V = Q[:, :rank] @
    R[:rank]`` up to the dropped residuals.
    """
    n, m = V.shape
    Q = np.zeros((n, m))
    R = np.zeros((m, m))
    rank = 0
    for k in range(m):
        v = V[:, k]
        vnorm = np.sqrt(v @ v)
        if vnorm == 0.0:
            continue
        Qr = Q[:, :rank]
        h = Qr.T @ v
        q = v - Qr @ h
        h2 = Qr.T @ q
        q -= Qr @ h2
        h += h2
        qnorm = np.sqrt(q @ q)
        R[:rank, k] = h
        if qnorm > tol * vnorm:
            Q[:, rank] = q / qnorm
            R[rank, k] = qnorm
            rank += 1
    return Q, R, rank


@njit
def orthonormalize_nb(V, tol):
    n, m = V.shape
    Q = np.zeros((n, m))
    R = np.zeros((m, m))
    rank = 0
    q = np.empty(n)
    for k in range(m):
        vnorm = 0.0
        for a in range(n):
            q[a] = V[a, k]
            vnorm += q[a] * q[a]
        vnorm = np.sqrt(vnorm)
        if vnorm == 0.0:
            continue
        for _ in range(2):
            for b in range(rank):
                h = 0.0
                for a in range(n):
                    h += Q[a, b] * q[a]
                R[b, k] += h
                for a in range(n):
                    q[a] -= h * Q[a, b]
        qnorm = 0.0
        for a in range(n):
            qnorm += q[a] * q[a]
        qnorm = np.sqrt(qnorm)
        if qnorm > tol * vnorm:
            for a in range(n):
                Q[a, rank] = q[a] / qnorm
            R[rank, k] = qnorm
            rank += 1
    return Q, R, rank


# -- BFGS chain in a small orthonormal coordinate system -------------------

def bfgs_core_np(S, Y, beta, eps):
    """Apply the BFGS update for each column pair (S[:, s], Y[:, s]) in order,
    starting from ``beta * I``. Pairs that fail the curvature test are skipped."""
    r, c = S.shape
    B = beta * np.eye(r)
    for s in range(c):
        dx = S[:, s]
        dg = Y[:, s]
        sy = dg @ dx
        if not sy > eps * np.sqrt((dx @ dx) * (dg @ dg)):
            continue
        Bs = B @ dx
        sBs = dx @ Bs
        if not sBs > 0.0:
            continue
        B += np.outer(dg, dg) / sy - np.outer(Bs, Bs) / sBs
    return 0.5 * (B + B.T)


@njit
def bfgs_core_nb(S, Y, beta, eps):
    r, c = S.shape
    B = np.zeros((r, r))
    for a in range(r):
        B[a, a] = beta
    Bs = np.empty(r)
    for s in range(c):
        sy = 0.0
        ss = 0.0
        yy = 0.0
        for a in range(r):
            sy += S[a, s] * Y[a, s]
            ss += S[a, s] * S[a, s]
            yy += Y[a, s] * Y[a, s]
        if not sy > eps * np.sqrt(ss * yy):
            continue
        sBs = 0.0
        for a in range(r):
            acc = 0.0
            for b in range(r):
                acc += B[a, b] * S[b, s]
            Bs[a] = acc
            sBs += S[a, s] * acc
        if not sBs > 0.0:
            continue
        for a in range(r):
            for b in range(r):
                B[a, b] += Y[a, s] * Y[b, s] / sy - Bs[a] * Bs[b] / sBs
    for a in range(r):
        for b in range(a + 1, r):
            m = 0.5 * (B[a, b] + B[b, a])
            B[a, b] = m
            B[b, a] = m
    return B


# -- per-subfunction quadratic forms ---------------------------------------

def lowrank_quadforms_np(D, idx, diag, U, E, ranks):
    """delta_n^T H_i delta_n with i = idx[n] and
    H_i = diag[i] I + U[i] E[i] U[i]^T.

    D is (n, Kc); U is (N, Kc, R) and E is (N, R, R), zero-padded beyond
    ``ranks[i]`` (and beyond the live subspace size) so padding contributes
    nothing.
    """
    Z = np.einsum("nkr,nk->nr", U[idx], D)
    return diag[idx] * np.einsum("nk,nk->n", D, D) + np.einsum("nr,nrs,ns->n", Z, E[idx], Z)


@njit
def lowrank_quadforms_nb(D, idx, diag, U, E, ranks):
    n, K = D.shape
    out = np.empty(n)
    z = np.empty(U.shape[2])
    for m in range(n):
        i = idx[m]
        r = ranks[i]
        acc = 0.0
        for k in range(K):
            acc += D[m, k] * D[m, k]
        acc *= diag[i]
        for a in range(r):
            z[a] = 0.0
        for k in range(K):
            dk = D[m, k]
            if dk != 0.0:
                for a in range(r):
                    z[a] += U[i, k, a] * dk
        for a in range(r):
            t = 0.0
            for b in range(r):
                t += E[i, a, b] * z[b]
            acc += z[a] * t
        out[m] = acc
    return out


def dense_quadforms_np(D, H):
    """delta_n^T H delta_n for a shared matrix H."""
    return np.einsum("nk,nk->n", D @ H, D)


def farthest_np(x, pos, act, use_total, H, diag, U, E, ranks):
    """Position in ``act`` of the subfunction whose last evaluation is
    farthest from x, measured by the summed Hessian H (``use_total``) or
    by each subfunction's own Hessian. Ties go to the first entry."""
    K = x.shape[0]
    D = x - pos[act, :K]
    if use_total:
        dist = dense_quadforms_np(D, H[:K, :K])
    else:
        dist = lowrank_quadforms_np(D, act, diag, U[:, :K, :], E, ranks)
    return int(np.argmax(dist))


@njit
def farthest_nb(x, pos, act, use_total, H, diag, U, E, ranks):
    K = x.shape[0]
    d = np.empty(K)
    z = np.empty(U.shape[2])
    best = -np.inf
    arg = 0
    for m in range(act.shape[0]):
        i = act[m]
        for k in range(K):
            d[k] = x[k] - pos[i, k]
        acc = 0.0
        if use_total:
            for k in range(K):
                t = 0.0
                for l in range(K):
                    t += H[k, l] * d[l]
                acc += d[k] * t
        else:
            r = ranks[i]
            for k in range(K):
                acc += d[k] * d[k]
            acc *= diag[i]
            for a in range(r):
                z[a] = 0.0
            for k in range(K):
                for a in range(r):
                    z[a] += U[i, k, a] * d[k]
            for a in range(r):
                t = 0.0
                for c in range(r):
                    t += E[i, a, c] * z[c]
                acc += z[a] * t
        if acc > best:
            best = acc
            arg = m
    return arg


# -- Cholesky of the summed Hessian ----------------------------------------

def cholesky_np(A):
    """Lower Cholesky factor and a success flag (False if not positive definite)."""
    try:
        Lf = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.zeros_like(A), False
    return Lf, bool(np.all(np.isfinite(Lf)))


@njit
def cholesky_nb(A):
    n = A.shape[0]
    Lf = np.zeros((n, n))
    for j in range(n):
        d = A[j, j]
        for k in range(j):
            d -= Lf[j, k] * Lf[j, k]
        if not d > 0.0:
            return Lf, False
        d = np.sqrt(d)
        Lf[j, j] = d
        for i in range(j + 1, n):
            v = A[i, j]
            for k in range(j):
                v -= Lf[i, k] * Lf[j, k]
            Lf[i, j] = v / d
    return Lf, True


def cho_solve_np(Lf, B):
    """Solve (Lf Lf^T) X = B for a vector or a K x m block."""
    import scipy.linalg
    y = scipy.linalg.solve_triangular(Lf, B, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(Lf.T, y, lower=False, check_finite=False)


@njit
def _cho_solve_block(Lf, B):
    n, m = B.shape
    X = B.copy()
    for c in range(m):
        for i in range(n):
            v = X[i, c]
            for k in range(i):
                v -= Lf[i, k] * X[k, c]
            X[i, c] = v / Lf[i, i]
        for i in range(n - 1, -1, -1):
            v = X[i, c]
            for k in range(i + 1, n):
                v -= Lf[k, i] * X[k, c]
            X[i, c] = v / Lf[i, i]
    return X


def cho_solve_nb(Lf, B):
    if B.ndim == 1:
        return _cho_solve_block(Lf, np.ascontiguousarray(B).reshape(-1, 1))[:, 0]
    return _cho_solve_block(Lf, np.ascontiguousarray(B))


# -- congruence remap of a low-rank Hessian --------------------------------

def remap_lowrank_np(T, U, E, rank, tol):
    """Map H = d I + U E U^T (old coordinates) to T H T^T in new coordinates.

    T has orthonormal rows, so the scaled identity carries over unchanged and
    only the low-rank part needs a new orthonormal basis. Returns
    ``(U_new, E_new, rank_new)`` padded to the input's column count.
    """
    Kn = T.shape[0]
    R = U.shape[1]
    W = T @ U[:, :rank]
    Q, Rf, r2 = orthonormalize_np(W, tol)
    U_new = np.zeros((Kn, R))
    E_new = np.zeros((R, R))
    r2 = min(r2, R)
    U_new[:, :r2] = Q[:, :r2]
    Rr = Rf[:r2, :rank]
    E_new[:r2, :r2] = Rr @ E[:rank, :rank] @ Rr.T
    return U_new, E_new, r2


@njit
def remap_lowrank_nb(T, U, E, rank, tol):
    Kn = T.shape[0]
    R = U.shape[1]
    W = T @ np.ascontiguousarray(U[:, :rank])
    Q, Rf, r2 = orthonormalize_nb(W, tol)
    U_new = np.zeros((Kn, R))
    E_new = np.zeros((R, R))
    r2 = min(r2, R)
    U_new[:, :r2] = Q[:, :r2]
    Rr = np.ascontiguousarray(Rf[:r2, :rank])
    E_new[:r2, :r2] = Rr @ np.ascontiguousarray(E[:rank, :rank]) @ Rr.T
    return U_new, E_new, r2


# -- fused per-subfunction Hessian rebuild ------------------------------------

@njit
def _span_basis(V, tol):
    """Orthonormal basis for the columns of V in order (dependent columns
    dropped). Householder QR when every column is independent enough,
    ordered Gram-Schmidt otherwise."""
    m = V.shape[1]
    if V.shape[0] >= m:
        Q, Rq = np.linalg.qr(V)
        ok = True
        for k in range(m):
            cn = np.sqrt(np.sum(V[:, k] ** 2))
            if not abs(Rq[k, k]) > 1e3 * tol * cn:
                ok = False
                break
        if ok:
            return Q, m
    Q, _, r = orthonormalize(V, tol)
    return Q, r


@njit
def _pd_with_margin(B, shift):
    """True when B - shift I is positive definite."""
    r = B.shape[0]
    C = B.copy()
    for a in range(r):
        C[a, a] -= shift
    for j in range(r):
        d = C[j, j]
        for k in range(j):
            d -= C[j, k] * C[j, k]
        if not d > 0.0:
            return False
        d = np.sqrt(d)
        C[j, j] = d
        for i in range(j + 1, r):
            v = C[i, j]
            for k in range(j):
                v -= C[i, k] * C[j, k]
            C[i, j] = v / d
    return True


def _history_hessian(DX, DG, K, R, gamma, eps, span_tol, rcond, cutoff):
    """Hessian estimate of one subfunction from its history rows (oldest first).

    Runs the whole rebuild in one call: beta from the secant-consistent
    matrix, the BFGS chain in the span of the history, and eigenvalue
    clipping. Written in the numba-compatible subset so the same source is
    both the compiled kernel and the numpy fallback.

    Returns ``(diag, U, E, rank, clipped)`` with U (K x R) and E (R x R)
    zero-padded; ``rank = -1`` flags a history without curvature.
    """
    n = DX.shape[0]
    U = np.zeros((K, R))
    E = np.zeros((R, R))
    dxT = np.ascontiguousarray(DX[:, :K].T)
    dgT = np.ascontiguousarray(DG[:, :K].T)
    # singular values / right vectors of dx from its Gram matrix when that is
    # well conditioned, otherwise from an SVD
    gw, gV = np.linalg.eigh(dxT.T @ dxT)
    if gw[0] > 1e-12 * gw[-1]:
        s = np.sqrt(gw[::-1])
        Vr = np.ascontiguousarray(gV[:, ::-1])
    else:
        _, s, Vt = np.linalg.svd(dxT, full_matrices=False)
        Vr = np.ascontiguousarray(Vt.T)
    kk = 0
    for a in range(s.size):
        if s[a] > rcond * s[0]:
            kk += 1
    A = dgT @ np.ascontiguousarray(Vr[:, :kk])
    for a in range(kk):
        A[:, a] /= s[a]
    lam2 = np.linalg.eigvalsh(A.T @ A)
    top = np.sqrt(max(lam2.max(), 0.0))
    if not top > 0.0:
        return 1.0, U, E, -1, 0
    beta = np.inf
    for a in range(lam2.size):
        lam = np.sqrt(max(lam2[a], 0.0))
        if lam > cutoff * top and lam < beta:
            beta = lam
    V = np.empty((K, 2 * n))
    V[:, :n] = dxT
    V[:, n:] = dgT
    Q, r = _span_basis(V, span_tol)
    r = min(r, R)
    basis = np.ascontiguousarray(Q[:, :r])
    S = np.ascontiguousarray(basis.T @ dxT)
    Y = np.ascontiguousarray(basis.T @ dgT)
    B = bfgs_core(S, Y, beta, eps)
    n_comp = K - r
    tau = max(np.trace(B), beta)
    if r > 0 and (n_comp == 0 or beta >= gamma * tau) and _pd_with_margin(B, gamma * tau):
        # lambda_max <= tau, so every eigenvalue already clears gamma * lambda_max
        U[:, :r] = basis
        for a in range(r):
            for b in range(r):
                E[a, b] = B[a, b]
            E[a, a] -= beta
        return beta, U, E, r, 0
    w, W = np.linalg.eigh(B)
    lam_max = w.max() if r > 0 else -np.inf
    if n_comp > 0 and beta > lam_max:
        lam_max = beta
    d = beta
    clipped = 0
    if not lam_max > 0.0:
        U[:, :r] = basis
        return 1.0, U, E, r, K
    floor = gamma * lam_max
    low_d = n_comp > 0 and d < floor
    n_low = 0
    for a in range(r):
        if w[a] < floor:
            n_low += 1
    if n_low > 0 or low_d:
        n_pos = 0
        for a in range(r):
            if w[a] > 0.0:
                n_pos += 1
        n_d = n_comp if d > 0.0 else 0
        pos = np.empty(n_pos + n_d)
        m = 0
        for a in range(r):
            if w[a] > 0.0:
                pos[m] = w[a]
                m += 1
        pos[m:] = d
        fill = np.median(pos)
        for a in range(r):
            if w[a] < floor:
                w[a] = fill
        if low_d:
            d = fill
        clipped = n_low + (n_comp if low_d else 0)
        B = (W * w) @ W.T
    U[:, :r] = basis
    for a in range(r):
        for b in range(r):
            E[a, b] = 0.5 * (B[a, b] + B[b, a])
        E[a, a] -= d
    return d, U, E, r, clipped


def lowrank_aggregate_update_np(H, b, sign, d, U, E, r, a, g, f):
    """Add ``sign`` times the model (f, g, d I + U E U^T) anchored at ``a``
    to the summed model (H, b) in place; returns the constant-term change."""
    K = a.shape[0]
    Ur = U[:K, :r]
    Ha = d * a + Ur @ (E[:r, :r] @ (Ur.T @ a))
    H[:K, :K] += sign * (d * np.eye(K) + Ur @ E[:r, :r] @ Ur.T)
    b[:K] += sign * (g - Ha)
    return sign * (f - g @ a + 0.5 * a @ Ha)


@njit
def lowrank_aggregate_update_nb(H, b, sign, d, U, E, r, a, g, f):
    K = a.shape[0]
    Ur = np.ascontiguousarray(U[:K, :r])
    Er = np.ascontiguousarray(E[:r, :r])
    Ha = d * a + Ur @ (Er @ (Ur.T @ a))
    UEU = (Ur @ Er) @ Ur.T
    const = f
    for k in range(K):
        const += -g[k] * a[k] + 0.5 * a[k] * Ha[k]
        b[k] += sign * (g[k] - Ha[k])
        H[k, k] += sign * d
        for m in range(K):
            H[k, m] += sign * UEU[k, m]
    return sign * const


def _refresh_model(j, K, p, g, value, reanchor, hist_dx, hist_dg, hist_n, pos, grad, val, nevals,
                   anchor, anchor_grad, anchor_val, has_model, h_diag, h_basis, h_excess, h_rank,
                   H, b, gamma, eps, span_tol, rcond, cutoff, first_scale):
    """Record an evaluation (p, g, value) of subfunction j and rebuild its
    model in the stacked buffers, keeping the summed model (H, b) current.

    Returns ``(c0_change, clipped)``. Same-source kernel like
    ``_history_hessian``.
    """
    L = hist_dx.shape[1]
    R = h_basis.shape[2]
    c0 = 0.0
    if nevals[j] > 0:
        dx = p - pos[j, :K]
        dg = g - grad[j, :K]
        if dx @ dg > eps * np.sqrt((dx @ dx) * (dg @ dg)):
            n = hist_n[j]
            if n == L:
                for a in range(L - 1):
                    hist_dx[j, a] = hist_dx[j, a + 1]
                    hist_dg[j, a] = hist_dg[j, a + 1]
                n -= 1
            hist_dx[j, n] = 0.0
            hist_dg[j, n] = 0.0
            hist_dx[j, n, :K] = dx
            hist_dg[j, n, :K] = dg
            hist_n[j] = n + 1
    pos[j] = 0.0
    grad[j] = 0.0
    pos[j, :K] = p
    grad[j, :K] = g
    val[j] = value
    nevals[j] += 1

    had_model = has_model[j]
    if had_model:
        c0 += lowrank_aggregate_update(H, b, -1.0, h_diag[j], h_basis[j], h_excess[j], h_rank[j],
                                       anchor[j, :K], anchor_grad[j, :K], anchor_val[j])
    if reanchor or not had_model:
        anchor[j] = 0.0
        anchor_grad[j] = 0.0
        anchor[j, :K] = p
        anchor_grad[j, :K] = g
        anchor_val[j] = value

    clipped = 0
    done = False
    n = hist_n[j]
    if n > 0:
        d, U, E, r, clipped = history_hessian(hist_dx[j, :n], hist_dg[j, :n], K, R, gamma, eps,
                                              span_tol, rcond, cutoff)
        if r >= 0:
            h_diag[j] = d
            h_basis[j] = 0.0
            h_basis[j, :K] = U
            h_excess[j] = E
            h_rank[j] = r
            done = True
    if not done:
        # no usable history: median eigenvalue of the other models' mean
        count = 0
        for i in range(has_model.shape[0]):
            if has_model[i] and i != j:
                count += 1
        if count > 0:
            scale = np.median(np.linalg.eigvalsh(H[:K, :K] / count))
        else:
            scale = first_scale
        if not scale > 0.0:
            scale = 1.0
            clipped = K
        h_diag[j] = scale
        h_basis[j] = 0.0
        h_excess[j] = 0.0
        h_rank[j] = 0
    has_model[j] = True
    c0 += lowrank_aggregate_update(H, b, 1.0, h_diag[j], h_basis[j], h_excess[j], h_rank[j],
                                   anchor[j, :K], anchor_grad[j, :K], anchor_val[j])
    return c0, clipped


if HAS_NUMBA:
    orthonormalize = orthonormalize_nb
    bfgs_core = bfgs_core_nb
    lowrank_quadforms = lowrank_quadforms_nb
    remap_lowrank = remap_lowrank_nb
    lowrank_aggregate_update = lowrank_aggregate_update_nb
    farthest = farthest_nb
    cholesky = cholesky_nb
    cho_solve = cho_solve_nb
else:
    orthonormalize = orthonormalize_np
    bfgs_core = bfgs_core_np
    lowrank_quadforms = lowrank_quadforms_np
    remap_lowrank = remap_lowrank_np
    lowrank_aggregate_update = lowrank_aggregate_update_np
    farthest = farthest_np
    cholesky = cholesky_np
    cho_solve = cho_solve_np

dense_quadforms = dense_quadforms_np

# compiled after dispatch so it binds the selected helpers
history_hessian_np = _history_hessian
history_hessian_nb = njit(_history_hessian) if HAS_NUMBA else _history_hessian
history_hessian = history_hessian_nb
refresh_model_np = _refresh_model
refresh_model_nb = njit(_refresh_model) if HAS_NUMBA else _refresh_model
refresh_model = refresh_model_nb

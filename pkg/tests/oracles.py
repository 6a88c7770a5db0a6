"""Hand-rolled reference implementations used as independent test oracles.

Everything here deliberately avoids the library's code paths: the
eigensolver is a from-scratch cyclic Jacobi iteration (no LAPACK), the
selection and attention references are straight-line loops, and the
solver oracle is a plain exhaustive scan. Each oracle is itself
cross-checked in test_oracles.py before other tests rely on it.
"""

import math

import numpy as np


def jacobi_eigh(a, sweeps=200, tol=1e-14):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue;
    columns of the vector matrix are the eigenvectors.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    v = np.eye(n)
    base = np.linalg.norm(a)
    for _ in range(sweeps):
        off = math.sqrt(sum(a[p, q] ** 2 for p in range(n) for q in range(n) if p != q))
        if off <= tol * max(base, 1.0):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w)
    return w[order], v[:, order]


def gram_top_r(m, r):
    """Top-r right singular subspace of m via the Gram matrix m^T m."""
    m = np.asarray(m, dtype=float)
    _, vecs = jacobi_eigh(m.T @ m)
    return vecs[:, :r]


def gram_residual(m, r):
    """Frobenius residual of the best rank-r right projection of m,
    computed from the Gram spectrum: sqrt(sum of trailing eigenvalues)."""
    m = np.asarray(m, dtype=float)
    w, _ = jacobi_eigh(m.T @ m)
    tail = np.clip(w[r:], 0.0, None)
    return math.sqrt(float(np.sum(tail)))


def brute_force_select(scores, group_size, m):
    """Literal sum -> per-group max -> top-m scan, all in Python loops."""
    scores = np.asarray(scores, dtype=float)
    n_heads, n = scores.shape
    token = [sum(scores[h][t] for h in range(n_heads)) for t in range(n)]
    n_groups = (n + group_size - 1) // group_size
    group = []
    for j in range(n_groups):
        members = token[j * group_size : (j + 1) * group_size]
        group.append(max(members))
    remaining = list(range(n_groups))
    picked = []
    for _ in range(m):
        best = remaining[0]
        for j in remaining[1:]:
            if group[j] > group[best]:
                best = j
        picked.append(best)
        remaining.remove(best)
    return sorted(picked)


def straight_line_attention(q, k, v, kv_of_head):
    """Scalar-loop scaled softmax attention with GQA head sharing."""
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    h_q, d = q.shape
    n = k.shape[0]
    out = np.zeros((h_q, d))
    for h in range(h_q):
        g = kv_of_head(h)
        logits = []
        for t in range(n):
            acc = 0.0
            for e in range(d):
                acc += q[h, e] * k[t, g, e]
            logits.append(acc / math.sqrt(d))
        mx = max(logits)
        weights = [math.exp(l - mx) for l in logits]
        z = sum(weights)
        for t in range(n):
            for e in range(d):
                out[h, e] += weights[t] / z * v[t, g, e]
    return out


def materialized_mapping(selected, payload_arrays, rolling_k, rolling_v):
    """Copy-based reference for the logical KV view: decode every selected
    group in ascending id order, then append rolling tokens."""
    ks, vs = [], []
    for gid in sorted(selected):
        k, v = payload_arrays[gid]
        ks.append(np.array(k, copy=True))
        vs.append(np.array(v, copy=True))
    rolling_k = np.asarray(rolling_k)
    if rolling_k.size:
        ks.append(np.array(rolling_k, copy=True))
        vs.append(np.array(np.asarray(rolling_v), copy=True))
    if not ks:
        return np.empty((0, 0, 0)), np.empty((0, 0, 0))
    return np.concatenate(ks, axis=0), np.concatenate(vs, axis=0)


def exhaustive_first_feasible(alpha, c_start, delta, g_max, t_io, t_model_of,
                              sigma_for, max_c_steps=1000):
    """Enumerate the (capacity step, G) lattice in lexicographic order and
    return the first point where (1-alpha) of the I/O hides under compute.
    ``t_io(g, c)`` and ``t_model_of(c, sigma)`` are plain callables;
    ``sigma_for(c)`` returns the budget-derived ratio or None."""
    c = c_start
    last = None
    for _ in range(max_c_steps):
        sigma = sigma_for(c)
        if sigma is None:
            return last, False
        for g in range(1, g_max + 1):
            last = (g, sigma, c)
            if (1.0 - alpha) * t_io(g, c) <= t_model_of(c, sigma):
                return last, True
        c += delta
    return last, False

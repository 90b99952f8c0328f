"""Independent oracles shared by the test suite.

These deliberately avoid the library's own code paths: finite differences
for gradients, exhaustive scans for nearest neighbors, explicit path
enumeration for DTW, and eigen-decomposition for Markov stationary
distributions.
"""

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() with respect to array x.

    f must read x by reference (the array is perturbed in place).
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor on the scale."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_nearest(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Exhaustive nearest-neighbor scan, direct squared distances."""
    out = np.empty(z.shape[0], dtype=np.int64)
    for t in range(z.shape[0]):
        d = ((z[t][None, :] - codes) ** 2).sum(axis=1)
        out[t] = int(np.argmin(d))
    return out


def cosine_cost(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity with the zero-vector convention used by eval."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 0.0
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - float(np.dot(a, b) / (na * nb))


def dtw_brute_force(s1: np.ndarray, s2: np.ndarray) -> float:
    """Exhaustive minimization over all monotone alignment paths.

    Enumerates every path from (0,0) to (n-1,m-1) with steps right/down/
    diagonal, minimizes total node cost, and returns total / path length
    for the minimizing path.  Only feasible for short sequences.
    """
    n, m = s1.shape[0], s2.shape[0]
    cost = np.array([[cosine_cost(s1[i], s2[j]) for j in range(m)]
                     for i in range(n)])
    best = [np.inf, np.inf]  # (total, length)

    def walk(i, j, total, length):
        total += cost[i, j]
        length += 1
        if i == n - 1 and j == m - 1:
            if total < best[0]:
                best[0], best[1] = total, length
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total, length)
        if i + 1 < n:
            walk(i + 1, j, total, length)
        if j + 1 < m:
            walk(i, j + 1, total, length)

    walk(0, 0, 0.0, 0)
    return best[0] / best[1]


def stationary_by_eigen(transition: np.ndarray) -> np.ndarray:
    """Stationary distribution via the left eigenvector for eigenvalue 1."""
    vals, vecs = np.linalg.eig(transition.T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    v = np.real(vecs[:, k])
    v = np.abs(v)
    return v / v.sum()


def reference_adam(grad_fn, w0: np.ndarray, lr: float, steps: int,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> np.ndarray:
    """Textbook Adam loop, written independently of the library optimizer."""
    w = np.array(w0, dtype=np.float64)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        w = w - lr * mhat / (np.sqrt(vhat) + eps)
    return w

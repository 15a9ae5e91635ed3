"""Independent reference implementations the tests check against.

Everything here is deliberately written without touching the package's own
computation paths: plain loops, textbook formulas, or scipy calls.
"""

import math

import numpy as np
import scipy.stats


def finite_difference(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. a mutable array."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = f()
        arr[idx] = orig - h
        f_minus = f()
        arr[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad


def surface_voxels_bruteforce(fg: np.ndarray) -> list[tuple[int, int, int]]:
    """Six-connected surface voxels via plain loops."""
    nx, ny, nz = fg.shape
    out = []
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not fg[x, y, z]:
                    continue
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    px, py, pz = x + dx, y + dy, z + dz
                    if not (0 <= px < nx and 0 <= py < ny and 0 <= pz < nz) \
                            or not fg[px, py, pz]:
                        out.append((x, y, z))
                        break
    return out


def surface_stats_bruteforce(fg_a: np.ndarray, fg_b: np.ndarray,
                             spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """(HD95, ASSD) by exhaustive pairwise distances between surfaces."""
    sa = surface_voxels_bruteforce(fg_a)
    sb = surface_voxels_bruteforce(fg_b)
    sx, sy, sz = spacing

    def dist(p, q):
        return math.sqrt(((p[0] - q[0]) * sx) ** 2 + ((p[1] - q[1]) * sy) ** 2
                         + ((p[2] - q[2]) * sz) ** 2)

    d_ab = [min(dist(p, q) for q in sb) for p in sa]
    d_ba = [min(dist(q, p) for p in sa) for q in sb]
    both = np.asarray(d_ab + d_ba)
    return float(np.percentile(both, 95)), float(both.mean())


def adam_reference(theta0: float, grads: list[float], lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[float]:
    """Scalar Adam trajectory from the textbook update equations."""
    theta, m, v = theta0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def paired_t_reference(a, b) -> tuple[float, float]:
    """Textbook paired t statistic; p from scipy's t distribution."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * scipy.stats.t.sf(abs(t), n - 1)
    return float(t), float(p)

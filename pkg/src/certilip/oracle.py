"""Brute-force reference computations.

Nothing here calls into :mod:`certilip.attack` or :mod:`certilip.certify`;
the enumerations and samplers only rely on plain numpy arithmetic and the
model parameters, so they can be used to check those modules.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ValidationError
from .model import GaussianKernelModel, LinearModel, OneHiddenLayerModel

MAX_ENUM_DIM = 8


@dataclass(frozen=True)
class OracleResult:
    value: float
    certificate: Any
    method: str
    tolerance: float
    feasible: bool = True


def _problem_arrays(direction, gap, base_point):
    v = np.asarray(direction, dtype=float)
    x = np.asarray(base_point, dtype=float)
    if v.shape != x.shape or v.ndim != 1:
        raise ValidationError("direction and base_point must be vectors of equal length")
    return v, float(gap), x


def _enum_guard(d):
    if d > MAX_ENUM_DIM:
        raise ValidationError(f"enumeration oracles are limited to d <= {MAX_ENUM_DIM}, got {d}")


def _patterns(d: int) -> np.ndarray:
    # 0 = free, 1 = lower face, 2 = upper face
    return np.array(list(itertools.product((0, 1, 2), repeat=d)), dtype=np.int8).reshape(-1, d)


def oracle_box_qp(direction, gap, base_point, tol: float = 1e-12) -> OracleResult:
    """Minimal ||delta||_2 with <v, delta> <= gap and 0 <= x + delta <= 1, by clamp-pattern enumeration."""
    v, gap, x = _problem_arrays(direction, gap, base_point)
    d = v.size
    _enum_guard(d)
    if gap >= 0:
        return OracleResult(0.0, np.zeros(d), "clamp-enumeration", tol)

    lo, hi = -x, 1.0 - x
    pats = _patterns(d)
    fixed = np.where(pats == 1, lo, np.where(pats == 2, hi, 0.0))
    free = pats == 0
    s = fixed @ v
    vf = np.where(free, v, 0.0)
    vsq = np.einsum("ij,ij->i", vf, vf)
    need = gap - s  # what the free coordinates must still contribute
    # a vanishing vsq gives non-finite candidates; the box check rejects them
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        scale = np.where((need < 0) & (vsq > 0), need / vsq, 0.0)
        delta = fixed + vf * scale[:, None]
        ok = (need >= 0) | (vsq > 0)
        ok &= np.all(delta >= lo - tol, axis=1) & np.all(delta <= hi + tol, axis=1)
        ok &= delta @ v <= gap + 1e-9 * max(1.0, abs(gap))
    if not ok.any():
        return OracleResult(np.inf, None, "clamp-enumeration", tol, feasible=False)
    norms = np.where(ok, np.linalg.norm(delta, axis=1), np.inf)
    best = int(np.argmin(norms))
    return OracleResult(float(norms[best]), {"pattern": pats[best], "delta": delta[best]},
                        "clamp-enumeration", tol)


def oracle_box_l1(direction, gap, base_point, tol: float = 1e-12) -> OracleResult:
    """Minimal ||delta||_1: at most one coordinate strictly inside its bounds, all others at 0 or a face."""
    v, gap, x = _problem_arrays(direction, gap, base_point)
    d = v.size
    _enum_guard(d)
    if gap >= 0:
        return OracleResult(0.0, np.zeros(d), "basic-solution-enumeration", tol)

    lo, hi = -x, 1.0 - x
    # per coordinate: 0 -> stays at zero, 1 -> lower face, 2 -> upper face
    pats = _patterns(d)
    at = np.where(pats == 1, lo, np.where(pats == 2, hi, 0.0))
    best_val, best = np.inf, None
    for f in range(-1, d):
        delta = at.copy()
        if f >= 0:
            delta[:, f] = 0.0
        s = delta @ v
        # a tiny v[f] can push the fractional coordinate to inf; the box check rejects it
        with np.errstate(over="ignore", invalid="ignore"):
            if f >= 0 and v[f] != 0.0:
                delta[:, f] = np.where(s > gap, (gap - s) / v[f], 0.0)
            ok = (delta @ v <= gap + 1e-9 * max(1.0, abs(gap)))
        ok &= np.all(delta >= lo - tol, axis=1) & np.all(delta <= hi + tol, axis=1)
        if not ok.any():
            continue
        norms = np.where(ok, np.abs(delta).sum(axis=1), np.inf)
        i = int(np.argmin(norms))
        if norms[i] < best_val:
            best_val, best = float(norms[i]), {"fractional": f, "delta": delta[i].copy()}
    if best is None:
        return OracleResult(np.inf, None, "basic-solution-enumeration", tol, feasible=False)
    return OracleResult(best_val, best, "basic-solution-enumeration", tol)


def oracle_box_linf(direction, gap, base_point, iterations: int = 60) -> OracleResult:
    """Minimal t = ||delta||_inf by bisection on the smallest reachable <v, delta> at fixed t."""
    v, gap, x = _problem_arrays(direction, gap, base_point)

    def reach(t):
        # most negative <v, delta> with |delta_r| <= t inside the box
        lo = np.maximum(-t, -x)
        hi = np.minimum(t, 1.0 - x)
        return float(np.sum(np.where(v > 0, v * lo, v * hi)))

    if gap >= 0:
        return OracleResult(0.0, 0.0, "bisection", 0.0)
    if reach(1.0) > gap:
        return OracleResult(np.inf, None, "bisection", 0.0, feasible=False)
    a, b = 0.0, 1.0
    for _ in range(iterations):
        m = 0.5 * (a + b)
        if reach(m) <= gap:
            b = m
        else:
            a = m
    return OracleResult(b, b, "bisection", b - a)


# ---------------------------------------------------------------------------
# gradient differences over a ball


def _grad_diff_batch(model, y: np.ndarray, j: int, c: int) -> np.ndarray:
    """Rows ``grad f_j(y_i) - grad f_c(y_i)``, written out from the parameters."""
    if isinstance(model, LinearModel):
        return np.broadcast_to(model.weights[j] - model.weights[c], y.shape)
    if isinstance(model, GaussianKernelModel):
        beta = model.coefficients[j] - model.coefficients[c]
        out = np.empty_like(y)
        for start in range(0, y.shape[0], 4096):
            yb = y[start : start + 4096]
            diff = model.anchors[None, :, :] - yb[:, None, :]
            k = np.exp(-model.width * np.sum(diff * diff, axis=2))
            out[start : start + 4096] = 2.0 * model.width * np.einsum("r,br,brd->bd", beta, k, diff)
        return out
    if isinstance(model, OneHiddenLayerModel):
        pre = y @ model.hidden_weights.T
        if model.hidden_bias is not None:
            pre = pre + model.hidden_bias
        s = 1.0 / (1.0 + np.exp(-model.steepness * pre))
        dw = model.output_weights[j] - model.output_weights[c]
        return (s * dw) @ model.hidden_weights
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def sample_ball(center, radius: float, samples: int, rng) -> np.ndarray:
    """Half uniform in the Euclidean ball, half on its boundary sphere."""
    center = np.asarray(center, dtype=float)
    d = center.size
    g = rng.standard_normal((samples, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = np.full(samples, float(radius))
    n_inner = samples - samples // 2
    r[:n_inner] *= rng.random(n_inner) ** (1.0 / d)
    return center + g * r[:, None]


def oracle_ball_max_gradient(model, x, j: int, c: int, radius: float, samples: int,
                             seed: int = 0) -> OracleResult:
    """Sampled maximum of ``||grad f_j(y) - grad f_c(y)||_2`` over ``B_2(x, radius)``."""
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    x = np.asarray(x, dtype=float)
    y = np.vstack([x[None, :], sample_ball(x, radius, samples, np.random.default_rng(seed))])
    norms = np.linalg.norm(_grad_diff_batch(model, y, j, c), axis=1)
    i = int(np.argmax(norms))
    return OracleResult(float(norms[i]), y[i], "ball-sampling", 0.0)


# ---------------------------------------------------------------------------
# misc


def finite_diff_gradient(fun: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if step <= 0:
        raise ValidationError("step must be positive")
    x = np.array(x, dtype=float)
    grad = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fun(x)
        flat[i] = old - step
        fm = fun(x)
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def jacobi_eigenvalues(sym, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(sym, dtype=float)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 or abs(apq) <= 1e-18 * (abs(a[p, p]) + abs(a[q, q])):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = cs * rp - sn * rq
                a[q, :] = sn * rp + cs * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cs * cp - sn * cq
                a[:, q] = sn * cp + cs * cq
    return np.sort(np.diag(a))


def oracle_spectral_norm(matrix) -> OracleResult:
    m = np.asarray(matrix, dtype=float)
    eig = jacobi_eigenvalues(m.T @ m)
    return OracleResult(float(np.sqrt(max(eig[-1], 0.0))), eig, "jacobi", 1e-12)

"""Certified lower bounds on the perturbation needed to change a decision.

For the predicted class ``c`` and any radius ``R`` the decision cannot change
within ``min(g(R), R)`` where::

    g(R) = min_{j != c} (f_c(x) - f_j(x)) / L_j(R)

and ``L_j(R)`` bounds ``||grad f_c(y) - grad f_j(y)||_q`` over the ball of
radius ``R`` around ``x``.  The certified radius is the best such value over
``R``.  Backends supply ``L_j(R)``:

``linear_exact``  exact dual norm of ``w_c - w_j`` (any p)
``kernel_local``  element-wise ball bound for Gaussian kernel expansions (p=2)
``nn_local``      element-wise ball bound for one-hidden-layer softplus nets (p=2)
``nn_global``     ``||w_c - w_j||_2 * ||U||_2``, independent of ``R`` (p=2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .attack import p_label, parse_p
from .errors import NumericalError, ValidationError
from .model import (
    GaussianKernelModel,
    LinearModel,
    Model,
    OneHiddenLayerModel,
    predict,
    softplus_prime,
)

BACKENDS = ("linear_exact", "kernel_local", "nn_local", "nn_global")

R_START = 1e-3
R_RTOL = 1e-4
R_MAX_ITER = 60


def dual_exponent(p: float) -> float:
    p = parse_p(p)
    if p == 1:
        return np.inf
    if np.isinf(p):
        return 1.0
    return p / (p - 1.0)


def default_backend(model: Model, local: bool = True) -> str:
    if isinstance(model, LinearModel):
        return "linear_exact"
    if isinstance(model, GaussianKernelModel):
        return "kernel_local"
    if isinstance(model, OneHiddenLayerModel):
        return "nn_local" if local else "nn_global"
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def _check_backend(model: Model, backend: str, p: float) -> None:
    family = {
        "linear_exact": LinearModel,
        "kernel_local": GaussianKernelModel,
        "nn_local": OneHiddenLayerModel,
        "nn_global": OneHiddenLayerModel,
    }
    if backend not in family:
        raise ValidationError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if not isinstance(model, family[backend]):
        raise ValidationError(f"backend {backend!r} does not apply to a {type(model).__name__}")
    if backend != "linear_exact" and p != 2:
        raise ValidationError(f"backend {backend!r} only certifies p=2")


# ---------------------------------------------------------------------------
# Gaussian kernel


class BallExtrema(NamedTuple):
    inner_max: float
    inner_min: float
    exp_max: float
    exp_min: float


def kernel_ball_extrema(x, x_r, x_s, width: float, radius: float) -> BallExtrema:
    """Extremes of ``<y - x_r, y - x_s>`` and ``exp(-width(||y-x_r||^2 + ||y-x_s||^2))`` over ``B_2(x, radius)``."""
    x, x_r, x_s = (np.asarray(a, dtype=float) for a in (x, x_r, x_s))
    a, b = x - x_r, x - x_s
    inner = float(a @ b)
    s = float(np.linalg.norm(a + b))
    m = min(s / 2.0, radius)
    sq = float(a @ a + b @ b)
    return BallExtrema(
        inner + radius * s + radius**2,
        inner - m * s + m**2,
        math.exp(-width * (sq - 2.0 * m * s + 2.0 * m**2)),
        math.exp(-width * (sq + 2.0 * radius * s + 2.0 * radius**2)),
    )


class _KernelBallBound:
    """Pairwise terms of the kernel bound that do not depend on ``R``, for one input."""

    def __init__(self, model: GaussianKernelModel, x: np.ndarray):
        self.model = model
        diff = x - model.anchors
        self.inner = diff @ diff.T
        sq = np.diag(self.inner).copy()
        self.sq_sum = sq[:, None] + sq[None, :]
        self.s = np.sqrt(np.maximum(self.sq_sum + 2.0 * self.inner, 0.0))

    def pair_terms(self, radius: float):
        """Bounds for pairs with ``beta_r beta_s >= 0`` (upper) and ``< 0`` (lower)."""
        gam, s, inner = self.model.width, self.s, self.inner
        m = np.minimum(s / 2.0, radius)
        ub = inner + radius * s + radius**2
        lb = inner - m * s + m * m
        e_max = np.exp(-gam * (self.sq_sum - 2.0 * m * s + 2.0 * m * m))
        e_min = np.exp(-gam * (self.sq_sum + 2.0 * radius * s + 2.0 * radius**2))
        same = np.maximum(ub, 0.0) * e_max + np.minimum(ub, 0.0) * e_min
        opposite = np.maximum(lb, 0.0) * e_min + np.minimum(lb, 0.0) * e_max
        return same, opposite

    def bounds(self, c: int, targets, radius: float) -> np.ndarray:
        same, opposite = self.pair_terms(radius)
        coef = self.model.coefficients
        out = np.empty(len(targets))
        for k, j in enumerate(targets):
            beta = coef[j] - coef[c]
            bp, bm = np.maximum(beta, 0.0), np.maximum(-beta, 0.0)
            total = bp @ same @ bp + bm @ same @ bm - 2.0 * (bp @ opposite @ bm)
            out[k] = 2.0 * self.model.width * math.sqrt(max(total, 0.0))
        return out


def cross_lip_bound_kernel(model: GaussianKernelModel, x, j: int, c: int, radius: float) -> float:
    """Upper bound on ``max ||grad f_j(y) - grad f_c(y)||_2`` over ``B_2(x, radius)``."""
    if j == c:
        raise ValidationError("j and c must differ")
    x = model._check_input(x)
    return float(_KernelBallBound(model, x).bounds(c, [j], radius)[0])


# ---------------------------------------------------------------------------
# one hidden layer


class _NNBallBound:
    def __init__(self, model: OneHiddenLayerModel, x: np.ndarray):
        self.model = model
        self.pre = model.preactivation(x)
        self.unorm = np.sqrt(np.maximum(np.diag(model.hidden_gram), 0.0))

    def bounds(self, c: int, targets, radius: float) -> np.ndarray:
        mdl = self.model
        s_hi = softplus_prime(self.pre + radius * self.unorm, mdl.steepness)
        s_lo = softplus_prime(self.pre - radius * self.unorm, mdl.steepness)
        out = np.empty(len(targets))
        for k, j in enumerate(targets):
            dw = mdl.output_weights[j] - mdl.output_weights[c]
            beta = np.outer(dw, dw) * mdl.hidden_gram
            total = s_hi @ np.maximum(beta, 0.0) @ s_hi + s_lo @ np.minimum(beta, 0.0) @ s_lo
            out[k] = math.sqrt(max(total, 0.0))
        return out


def cross_lip_bound_nn(model: OneHiddenLayerModel, x, j: int, c: int, radius: float) -> float:
    """Upper bound on ``max ||grad f_j(y) - grad f_c(y)||_2`` over ``B_2(x, radius)``."""
    if j == c:
        raise ValidationError("j and c must differ")
    x = model._check_input(x)
    return float(_NNBallBound(model, x).bounds(c, [j], radius)[0])


def cross_lip_global_nn(model: OneHiddenLayerModel, j: int, c: int) -> float:
    """Radius-free bound ``||w_c - w_j||_2 * sigma_max(U)`` (softplus' is at most 1)."""
    if j == c:
        raise ValidationError("j and c must differ")
    dw = model.output_weights[c] - model.output_weights[j]
    return float(np.linalg.norm(dw) * model.hidden_spectral_norm)


# ---------------------------------------------------------------------------
# guarantees


@dataclass
class TargetTerm:
    target: int
    gap: float
    bound: float
    ratio: float


@dataclass
class GuaranteeReport:
    predicted: int
    guarantee_radius: float
    r_star: float
    backend: str
    p: float
    per_target: list[TargetTerm] = field(default_factory=list)
    instance_id: object = None

    def to_record(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")

        return {
            "id": self.instance_id,
            "predicted": self.predicted,
            "guarantee_radius": self.guarantee_radius,
            "r_star": num(self.r_star),
            "backend": self.backend,
            "p": p_label(self.p),
            "per_target": [
                {"class": t.target, "gap": t.gap, "bound": t.bound, "ratio": num(t.ratio)}
                for t in self.per_target
            ],
        }


def _ratios(gaps: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    # a target whose bound is 0 can never be reached: ratio +inf
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(bounds > 0, gaps / bounds, np.inf)
    return np.where(gaps <= 0, 0.0, r)


def search_radius(g: Callable[[float], float], r_max: float, r_start: float = R_START,
                  rtol: float = R_RTOL, max_iter: int = R_MAX_ITER) -> tuple[float, float]:
    """Maximise ``min(g(R), R)`` for non-increasing ``g``.

    Brackets the crossing ``g(R) = R`` by doubling (or halving) from
    ``r_start`` and bisects it.  Returns ``(value, R)``; the value is
    ``min(g(R), R)`` at an evaluated ``R``, so it is a valid certificate
    regardless of how accurately the crossing was located.
    """
    cache: dict[float, float] = {}

    def gv(r):
        if r not in cache:
            cache[r] = g(r)
        return cache[r]

    r_start = min(r_start, r_max)
    if gv(r_start) >= r_start:
        lo = r_start
        hi = min(2.0 * lo, r_max)
        while gv(hi) >= hi:
            if hi >= r_max:
                return min(gv(r_max), r_max), r_max
            lo, hi = hi, min(2.0 * hi, r_max)
    else:
        hi = r_start
        lo = hi / 2.0
        for _ in range(1100):
            if gv(lo) >= lo:
                break
            hi, lo = lo, lo / 2.0
        else:
            return 0.0, 0.0
    for _ in range(max_iter):
        if hi - lo <= rtol * hi:
            break
        mid = 0.5 * (lo + hi)
        if gv(mid) >= mid:
            lo = mid
        else:
            hi = mid
    cand = [(min(gv(r), r), r) for r in (lo, hi)]
    return max(cand)


def guarantee(model: Model, x, backend: str | None = None, p=2, instance_id=None,
              r_max: float | None = None) -> GuaranteeReport:
    """Certified radius for ``x`` under the chosen bound backend."""
    p = parse_p(p)
    backend = backend or default_backend(model)
    _check_backend(model, backend, p)
    x = model._check_input(x)
    out = model.outputs(x)
    if not np.all(np.isfinite(out)):
        raise NumericalError("model produced non-finite outputs")
    c = int(np.argmax(out))
    targets = [j for j in range(model.n_classes) if j != c]
    gaps = out[c] - out[targets]

    if backend == "linear_exact":
        q = dual_exponent(p)
        w = model.weights
        bounds = np.array([np.linalg.norm(w[c] - w[j], ord=q) for j in targets])
        ratios = _ratios(gaps, bounds)
        alpha = float(ratios.min())
        return _report(c, alpha, alpha, backend, p, targets, gaps, bounds, ratios, instance_id)

    if backend == "nn_global":
        glob = np.array([cross_lip_global_nn(model, j, c) for j in targets])
        bound_fn = lambda r: glob  # noqa: E731
    elif backend == "nn_local":
        bound_fn = lambda r, _b=_NNBallBound(model, x): _b.bounds(c, targets, r)  # noqa: E731
    else:
        bound_fn = lambda r, _b=_KernelBallBound(model, x): _b.bounds(c, targets, r)  # noqa: E731

    if r_max is None:
        r_max = math.sqrt(model.n_features)
    if gaps.min() <= 0:
        b0 = bound_fn(0.0)
        return _report(c, 0.0, 0.0, backend, p, targets, gaps, b0, _ratios(gaps, b0), instance_id)

    alpha, r_star = search_radius(lambda r: float(_ratios(gaps, bound_fn(r)).min()), r_max)
    bounds = bound_fn(r_star)
    return _report(c, alpha, r_star, backend, p, targets, gaps, bounds, _ratios(gaps, bounds),
                   instance_id)


def _report(c, alpha, r_star, backend, p, targets, gaps, bounds, ratios, instance_id):
    terms = [TargetTerm(int(j), float(g), float(b), float(r))
             for j, g, b, r in zip(targets, gaps, bounds, ratios)]
    return GuaranteeReport(c, float(alpha), float(r_star), backend, p, terms, instance_id)


def linear_guarantee(model: LinearModel, x, p=2) -> float:
    """Exact minimal ``||delta||_p`` that reaches a decision tie (no box)."""
    q = dual_exponent(p)
    c, out = predict(model, x)
    w = model.weights
    vals = []
    for j in range(model.n_classes):
        if j == c:
            continue
        den = np.linalg.norm(w[c] - w[j], ord=q)
        gap = out[c] - out[j]
        vals.append(np.inf if den == 0 and gap > 0 else (gap / den if den > 0 else 0.0))
    return float(min(vals))


def local_global_ratio(model: OneHiddenLayerModel, X, y=None) -> dict:
    """Per-instance ``alpha_global / alpha_local``.

    Only correctly classified points are used when labels are given.  When
    both guarantees are zero the ratio is defined as 1.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    idx = np.arange(X.shape[0])
    if y is not None:
        pred = np.argmax(model.outputs(X), axis=1)
        idx = idx[pred == np.asarray(y)]
    ratios, local, glob = [], [], []
    for i in idx:
        a_loc = guarantee(model, X[i], "nn_local").guarantee_radius
        a_glob = guarantee(model, X[i], "nn_global").guarantee_radius
        local.append(a_loc)
        glob.append(a_glob)
        ratios.append(1.0 if a_loc == 0 and a_glob == 0 else a_glob / a_loc)
    ratios = np.array(ratios)
    return {
        "indices": idx.tolist(),
        "ratios": ratios,
        "alpha_local": np.array(local),
        "alpha_global": np.array(glob),
        "mean_ratio": float(ratios.mean()) if ratios.size else None,
        "subset": "correctly_classified" if y is not None else "all",
    }

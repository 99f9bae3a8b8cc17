"""Cross-entropy training with none / weight-decay / Cross-Lipschitz regularisation.

The Cross-Lipschitz penalty of a model ``f`` over anchor points ``x_1..x_n`` is::

    Omega(f) = 1/(n K^2) sum_i sum_{l,m} ||grad f_l(x_i) - grad f_m(x_i)||^2

Because ``sum_{l,m} ||g_l - g_m||^2 = 2K ||C G||_F^2`` with the centring matrix
``C = I - 11^T/K``, both model families reduce it to a cheap closed form:

* kernel: ``Omega(A) = 2/(nK) tr(A^T C A H)`` with a fixed PSD matrix ``H``
  built from kernel values at the anchors, so the kernel problem stays convex;
* one hidden layer: ``Omega = 2/(nK) sum_{r,s} (W^T C W)_{rs} <u_r,u_s> (S^T S)_{rs}``
  where ``S_ir = softplus'(<u_r, x_i>)``.

:func:`omega_pairwise` evaluates the defining double sum from per-anchor
Jacobians and is kept as the reference route.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .errors import NumericalError, ValidationError
from .model import GaussianKernelModel, OneHiddenLayerModel, softplus, softplus_prime, softplus_second

logger = logging.getLogger(__name__)

REGULARIZERS = ("none", "weight_decay", "cross_lipschitz")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    model: str = "nn"
    regularizer: str = "none"
    lam: float = 0.0
    # kernel
    width_factor: float = 1.0
    knn: int = 40
    optimizer: str = "lbfgs"
    max_anchors: int = 1000
    # one hidden layer
    hidden_units: int = 64
    steepness: float = 10.0
    use_bias: bool = False
    step_size: float = 0.2
    batch_size: int = 64
    adv_fraction: float = 0.0
    adv_p: str = "inf"
    adv_iterations: int = 8
    # shared
    epochs: int = 50
    seed: int = 0
    tol: float | None = None

    def __post_init__(self):
        if self.model not in ("kernel", "nn"):
            raise ValidationError(f"model must be 'kernel' or 'nn', got {self.model!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValidationError(f"regularizer must be one of {REGULARIZERS}")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValidationError("adv_fraction must lie in [0, 1]")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ValidationError("optimizer must be 'lbfgs' or 'gd'")
        if self.width_factor <= 0 or self.steepness <= 0:
            raise ValidationError("width_factor and steepness must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


_KEY_ALIASES = {"lambda": "lam"}


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a :class:`TrainConfig`."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in fields:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        kind = str(fields[key].type)
        try:
            if value.lower() in ("none", "") and "None" in kind:
                kwargs[key] = None
            elif kind.startswith("bool"):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                kwargs[key] = value.lower() in ("true", "1", "yes")
            elif kind.startswith("int"):
                kwargs[key] = int(value)
            elif kind.startswith("float"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError:
            raise ValidationError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return TrainConfig(**kwargs)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


@dataclass
class TrainReport:
    config: dict
    final_objective: float
    objective_history: list[float]
    loss_history: list[float]
    omega_history: list[float]
    grad_norm: float
    iterations: int
    converged: bool
    train_error: float
    test_error: float | None = None
    wall_time: float = 0.0
    omega_anchors: str = "training set"
    extra: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


# ---------------------------------------------------------------------------
# loss


def cross_entropy(outputs, label: int) -> tuple[float, np.ndarray]:
    """``log(1 + sum_{k != y} exp(f_k - f_y))`` and its gradient (softmax minus one-hot)."""
    f = np.asarray(outputs, dtype=float)
    loss = float(logsumexp(f) - f[label])
    grad = softmax(f)
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_batch(F: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over rows of ``F`` and its gradient with respect to ``F``."""
    n = F.shape[0]
    rows = np.arange(n)
    lse = logsumexp(F, axis=1)
    loss = float(np.mean(lse - F[rows, y]))
    g = np.exp(F - lse[:, None])
    g[rows, y] -= 1.0
    return loss, g / n


def _centring(K: int) -> np.ndarray:
    return np.eye(K) - np.full((K, K), 1.0 / K)


# ---------------------------------------------------------------------------
# Cross-Lipschitz regulariser


def omega_pairwise(model, anchor_points) -> float:
    """Reference evaluation: explicit pairwise sum over per-anchor Jacobians."""
    X = np.atleast_2d(np.asarray(anchor_points, dtype=float))
    if X.shape[0] == 0:
        raise ValidationError("anchor set is empty")
    K = model.n_classes
    total = 0.0
    for x in X:
        J = model.jacobian(x)
        diff = J[:, None, :] - J[None, :, :]
        total += float(np.sum(diff * diff))
    return total / (X.shape[0] * K * K)


def kernel_omega_matrix(anchors: np.ndarray, points: np.ndarray, width: float) -> np.ndarray:
    """``H_rs = sum_i <grad k(x_r, x_i), grad k(x_s, x_i)>`` over the points ``x_i``."""
    G_pa = points @ anchors.T
    sq_a = np.einsum("ij,ij->i", anchors, anchors)
    sq_p = np.einsum("ij,ij->i", points, points)
    Kpa = np.exp(-width * np.maximum(sq_p[:, None] + sq_a[None, :] - 2.0 * G_pa, 0.0))
    P = Kpa * G_pa
    H = (anchors @ anchors.T) * (Kpa.T @ Kpa) - P.T @ Kpa - Kpa.T @ P + (Kpa.T * sq_p) @ Kpa
    H = 4.0 * width**2 * H
    return 0.5 * (H + H.T)


def omega_kernel_closed_form(model: GaussianKernelModel, anchor_points) -> float:
    X = np.atleast_2d(np.asarray(anchor_points, dtype=float))
    H = kernel_omega_matrix(model.anchors, X, model.width)
    A = model.coefficients
    K = A.shape[0]
    CA = _centring(K) @ A
    return float(2.0 / (X.shape[0] * K) * np.sum((CA @ H) * CA))


def _nn_omega_parts(U, W, b, steepness, X):
    a = X @ U.T
    if b is not None:
        a = a + b
    S = softplus_prime(a, steepness)
    G = U @ U.T
    M = W.T @ _centring(W.shape[0]) @ W
    return a, S, G, M


def omega_nn_closed_form(model: OneHiddenLayerModel, anchor_points) -> float:
    X = np.atleast_2d(np.asarray(anchor_points, dtype=float))
    _, S, G, M = _nn_omega_parts(model.hidden_weights, model.output_weights, model.hidden_bias,
                                 model.steepness, X)
    K = model.n_classes
    return float(2.0 / (X.shape[0] * K) * np.sum(M * G * (S.T @ S)))


def _nn_omega_and_grad(U, W, b, steepness, X):
    n, K = X.shape[0], W.shape[0]
    a, S, G, M = _nn_omega_parts(U, W, b, steepness, X)
    Q = S.T @ S
    c = 2.0 / (n * K)
    omega = c * float(np.sum(M * G * Q))
    C = _centring(K)
    dW = 2.0 * c * (C @ W) @ (G * Q)
    dU = 2.0 * c * (M * Q) @ U
    dS = 2.0 * c * S @ (M * G)
    dA = dS * softplus_second(a, steepness)
    dU += dA.T @ X
    db = dA.sum(axis=0) if b is not None else None
    return omega, dU, dW, db


def omega_cross_lip(model, anchor_points) -> float:
    """Cross-Lipschitz penalty of ``model`` at the given anchor points."""
    X = np.atleast_2d(np.asarray(anchor_points, dtype=float))
    if X.shape[0] == 0:
        raise ValidationError("anchor set is empty")
    if isinstance(model, GaussianKernelModel):
        return omega_kernel_closed_form(model, X)
    if isinstance(model, OneHiddenLayerModel):
        return omega_nn_closed_form(model, X)
    raise ValidationError(f"Cross-Lipschitz penalty is defined for kernel and nn models, not {model.kind}")


def omega_cross_lip_grad(model, anchor_points) -> tuple[float, dict]:
    """Penalty value and its gradient with respect to each parameter array."""
    X = np.atleast_2d(np.asarray(anchor_points, dtype=float))
    if isinstance(model, GaussianKernelModel):
        H = kernel_omega_matrix(model.anchors, X, model.width)
        A = model.coefficients
        K = A.shape[0]
        C = _centring(K)
        c = 2.0 / (X.shape[0] * K)
        CAH = C @ A @ H
        return float(c * np.sum(CAH * A)), {"coefficients": 2.0 * c * CAH}
    if isinstance(model, OneHiddenLayerModel):
        om, dU, dW, db = _nn_omega_and_grad(model.hidden_weights, model.output_weights,
                                            model.hidden_bias, model.steepness, X)
        grads = {"hidden_weights": dU, "output_weights": dW}
        if model.hidden_bias is not None:
            grads["hidden_bias"] = db
        if model.output_bias is not None:
            grads["output_bias"] = np.zeros_like(model.output_bias)
        return om, grads
    raise ValidationError(f"Cross-Lipschitz penalty is defined for kernel and nn models, not {model.kind}")


# ---------------------------------------------------------------------------
# kernel training


def knn_mean_distance(X: np.ndarray, k: int = 40, chunk: int = 512) -> float:
    """Mean distance from each point to its ``k`` nearest neighbours (self excluded)."""
    n = X.shape[0]
    if n < 2:
        raise ValidationError("need at least two points for the nearest-neighbour width rule")
    k = min(k, n - 1)
    sq = np.einsum("ij,ij->i", X, X)
    total = 0.0
    for s in range(0, n, chunk):
        D = sq[s : s + chunk, None] + sq[None, :] - 2.0 * X[s : s + chunk] @ X.T
        D[np.arange(D.shape[0]), np.arange(s, s + D.shape[0])] = np.inf
        part = np.partition(D, k - 1, axis=1)[:, :k]
        total += float(np.sqrt(np.maximum(part, 0.0)).sum())
    return total / (n * k)


def kernel_width(X: np.ndarray, factor: float = 1.0, k: int = 40) -> float:
    """Gaussian width ``factor / rho^2`` with ``rho`` the mean k-NN distance.

    Repeated points carry no scale information, so the distances are taken
    between distinct points only.
    """
    distinct = np.unique(np.asarray(X, dtype=float), axis=0)
    if distinct.shape[0] < 2:
        raise ValidationError("training points are all identical; width rule undefined")
    rho = knn_mean_distance(distinct, k)
    return factor / rho**2


class KernelProblem:
    """Regularised cross-entropy objective in the coefficient matrix ``(K, n_anchors)``."""

    def __init__(self, X, y, anchors, width, n_classes, regularizer="none", lam=0.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y)
        self.anchors = np.asarray(anchors, dtype=float)
        self.width = float(width)
        self.K = n_classes
        self.regularizer = regularizer
        self.lam = float(lam)
        sq_a = np.einsum("ij,ij->i", self.anchors, self.anchors)
        sq_x = np.einsum("ij,ij->i", self.X, self.X)
        self.gram = np.exp(-self.width * np.maximum(
            sq_x[:, None] + sq_a[None, :] - 2.0 * self.X @ self.anchors.T, 0.0))
        self.H = None
        self.rkhs = None
        if regularizer == "cross_lipschitz":
            self.H = kernel_omega_matrix(self.anchors, self.X, self.width)
            self.C = _centring(n_classes)
        elif regularizer == "weight_decay":
            sq = sq_a[:, None] + sq_a[None, :] - 2.0 * self.anchors @ self.anchors.T
            self.rkhs = np.exp(-self.width * np.maximum(sq, 0.0))

    @property
    def shape(self):
        return (self.K, self.anchors.shape[0])

    def evaluate(self, A) -> tuple[float, np.ndarray, float, float]:
        """``(objective, gradient, loss, penalty)`` at coefficients ``A``."""
        A = np.asarray(A, dtype=float).reshape(self.shape)
        loss, gF = cross_entropy_batch(self.gram @ A.T, self.y)
        grad = gF.T @ self.gram
        if self.regularizer == "cross_lipschitz":
            c = 2.0 / (self.X.shape[0] * self.K)
            CAH = self.C @ A @ self.H
            pen = c * float(np.sum(CAH * A))
            grad = grad + self.lam * 2.0 * c * CAH
        elif self.regularizer == "weight_decay":
            AK = A @ self.rkhs
            pen = float(np.sum(AK * A))
            grad = grad + self.lam * 2.0 * AK
        else:
            pen = 0.0
        return loss + self.lam * pen, grad, loss, pen

    def objective(self, A) -> float:
        return self.evaluate(A)[0]


def train_kernel(X, y, config: TrainConfig, X_test=None, y_test=None, n_classes: int | None = None):
    """Fit a Gaussian kernel classifier; returns ``(model, report)``."""
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if config.model != "kernel":
        raise ValidationError("config.model must be 'kernel'")
    K = n_classes or int(y.max()) + 1
    n = X.shape[0]
    width = kernel_width(X, config.width_factor, config.knn)
    if n > config.max_anchors:
        sel = np.sort(np.random.default_rng(config.seed).permutation(n)[: config.max_anchors])
        anchors = X[sel]
    else:
        anchors = X
    prob = KernelProblem(X, y, anchors, width, K, config.regularizer, config.lam)
    tol = config.tol if config.tol is not None else 1e-5 * n

    hist_obj, hist_loss, hist_pen = [], [], []
    last = {}

    def record(A):
        obj, g, loss, pen = prob.evaluate(A)
        if not math.isfinite(obj):
            raise NumericalError("kernel objective became non-finite")
        hist_obj.append(obj)
        hist_loss.append(loss)
        hist_pen.append(pen)
        last["g"] = g
        return obj, g

    A0 = np.zeros(prob.shape)
    record(A0)
    if config.optimizer == "lbfgs":

        def fun(a):
            obj, g, _, _ = prob.evaluate(a)
            if not math.isfinite(obj):
                raise NumericalError("kernel objective became non-finite")
            return obj, g.ravel()

        def callback(intermediate_result):
            _, g = record(intermediate_result.x)
            if np.linalg.norm(g) < tol:
                raise StopIteration

        res = minimize(fun, A0.ravel(), jac=True, method="L-BFGS-B", callback=callback,
                       options={"maxiter": config.epochs, "gtol": 0.0, "ftol": 0.0, "maxcor": 20})
        A = res.x.reshape(prob.shape)
        iterations = int(res.nit)
    else:
        A = A0
        obj, g = hist_obj[-1], last["g"]
        step = 1.0
        iterations = 0
        for iterations in range(1, config.epochs + 1):
            gsq = float(np.sum(g * g))
            if math.sqrt(gsq) < tol:
                break
            while True:
                cand = A - step * g
                c_obj = prob.objective(cand)
                if c_obj <= obj - 1e-4 * step * gsq:
                    break
                step *= 0.5
                if step < 1e-20:
                    raise NumericalError("backtracking line search failed")
            A = cand
            obj, g = record(A)
            step *= 2.0

    obj, g, _, _ = prob.evaluate(A)
    model = GaussianKernelModel(anchors, A, width)
    report = TrainReport(
        config=config.to_dict(),
        final_objective=float(obj),
        objective_history=hist_obj,
        loss_history=hist_loss,
        omega_history=hist_pen,
        grad_norm=float(np.linalg.norm(g)),
        iterations=iterations,
        converged=bool(np.linalg.norm(g) < tol),
        train_error=error_rate(model, X, y),
        test_error=error_rate(model, X_test, y_test) if X_test is not None else None,
        wall_time=time.perf_counter() - t0,
        omega_anchors="training set",
        extra={"width": width, "n_anchors": int(anchors.shape[0]), "tol": tol},
    )
    return model, report


# ---------------------------------------------------------------------------
# one-hidden-layer training


@dataclass
class NNParams:
    U: np.ndarray
    W: np.ndarray
    b: np.ndarray | None
    c: np.ndarray | None
    steepness: float

    def model(self) -> OneHiddenLayerModel:
        return OneHiddenLayerModel(self.U, self.W, self.steepness, self.b, self.c)

    def arrays(self):
        return [a for a in (self.U, self.W, self.b, self.c) if a is not None]


def init_nn(d: int, hidden: int, K: int, steepness: float, use_bias: bool, rng) -> NNParams:
    lim_u = math.sqrt(6.0 / (d + hidden))
    lim_w = math.sqrt(6.0 / (hidden + K))
    U = rng.uniform(-lim_u, lim_u, size=(hidden, d))
    W = rng.uniform(-lim_w, lim_w, size=(K, hidden))
    b = np.zeros(hidden) if use_bias else None
    c = np.zeros(K) if use_bias else None
    return NNParams(U, W, b, c, steepness)


def nn_objective_grad(params: NNParams, X, y, regularizer="none", lam=0.0):
    """Mean cross-entropy plus ``lam`` times the penalty on the batch, with gradients.

    Returns ``(objective, loss, penalty, grads)`` where ``grads`` follows
    ``params.arrays()`` order.
    """
    U, W, b, c, alpha = params.U, params.W, params.b, params.c, params.steepness
    a = X @ U.T
    if b is not None:
        a = a + b
    h = softplus(a, alpha)
    F = h @ W.T
    if c is not None:
        F = F + c
    loss, gF = cross_entropy_batch(F, y)
    dW = gF.T @ h
    dA = (gF @ W) * softplus_prime(a, alpha)
    dU = dA.T @ X
    db = dA.sum(axis=0) if b is not None else None
    dc = gF.sum(axis=0) if c is not None else None

    pen = 0.0
    if regularizer == "cross_lipschitz" and lam > 0:
        pen, pU, pW, pb = _nn_omega_and_grad(U, W, b, alpha, X)
        dU = dU + lam * pU
        dW = dW + lam * pW
        if db is not None:
            db = db + lam * pb
    elif regularizer == "cross_lipschitz":
        pen = _nn_omega_and_grad(U, W, b, alpha, X)[0]
    elif regularizer == "weight_decay":
        pen = float(np.sum(U * U) + np.sum(W * W))
        dU = dU + lam * 2.0 * U
        dW = dW + lam * 2.0 * W
    grads = [g for g in (dU, dW, db, dc) if g is not None]
    return loss + lam * pen, loss, pen, grads


def _adversarial_batch(params: NNParams, Xb, yb, fraction, p, iterations):
    from .attack import attack_boundary_search

    n_adv = int(round(fraction * Xb.shape[0]))
    if n_adv == 0:
        return Xb
    model = params.model()
    Xb = Xb.copy()
    for i in range(n_adv):
        s = attack_boundary_search(model, Xb[i], p, iterations=iterations, max_expand=4)
        if s.flipped:
            Xb[i] = np.clip(Xb[i] + s.delta, 0.0, 1.0)
    return Xb


def train_nn(X, y, config: TrainConfig, X_test=None, y_test=None, n_classes: int | None = None):
    """Mini-batch SGD for a one-hidden-layer softplus network; returns ``(model, report)``."""
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if config.model != "nn":
        raise ValidationError("config.model must be 'nn'")
    K = n_classes or int(y.max()) + 1
    n, d = X.shape
    rng = np.random.default_rng(config.seed)
    params = init_nn(d, config.hidden_units, K, config.steepness, config.use_bias, rng)
    bs = config.batch_size

    hist_obj, hist_loss, hist_pen = [], [], []
    grad_norm = float("nan")
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        s_obj = s_loss = s_pen = 0.0
        nb = 0
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            Xb, yb = X[idx], y[idx]
            if config.adv_fraction > 0:
                Xb = _adversarial_batch(params, Xb, yb, config.adv_fraction, config.adv_p,
                                        config.adv_iterations)
            obj, loss, pen, grads = nn_objective_grad(params, Xb, yb, config.regularizer, config.lam)
            if not math.isfinite(obj):
                raise NumericalError(f"training diverged in epoch {epoch + 1}")
            for arr, g in zip(params.arrays(), grads):
                arr -= config.step_size * g
            grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            s_obj, s_loss, s_pen, nb = s_obj + obj, s_loss + loss, s_pen + pen, nb + 1
        hist_obj.append(s_obj / nb)
        hist_loss.append(s_loss / nb)
        hist_pen.append(s_pen / nb)
        logger.debug("epoch %d objective %.6f", epoch + 1, hist_obj[-1])

    model = params.model()
    report = TrainReport(
        config=config.to_dict(),
        final_objective=hist_obj[-1] if hist_obj else float("nan"),
        objective_history=hist_obj,
        loss_history=hist_loss,
        omega_history=hist_pen,
        grad_norm=grad_norm,
        iterations=config.epochs,
        converged=bool(config.tol is not None and grad_norm < config.tol),
        train_error=error_rate(model, X, y),
        test_error=error_rate(model, X_test, y_test) if X_test is not None else None,
        wall_time=time.perf_counter() - t0,
        omega_anchors="mini-batch",
    )
    return model, report


def train(X, y, config: TrainConfig, X_test=None, y_test=None, n_classes=None):
    if config.model == "kernel":
        return train_kernel(X, y, config, X_test, y_test, n_classes)
    return train_nn(X, y, config, X_test, y_test, n_classes)


def error_rate(model, X, y) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return float(np.mean(np.argmax(model.outputs(X), axis=1) != np.asarray(y)))

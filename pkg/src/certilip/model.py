"""Classifier families, prediction, input gradients and model files.

Three families are supported, all mapping ``R^d -> R^K``:

* :class:`LinearModel` -- ``f_j(x) = <w_j, x> (+ b_j)``
* :class:`GaussianKernelModel` -- ``f_j(x) = sum_r a_jr exp(-gamma ||x_r - x||^2)``
* :class:`OneHiddenLayerModel` -- ``f_j(x) = sum_r w_jr softplus(<u_r, x> (+ b_r)) (+ c_j)``

Models are immutable: their arrays are flagged read-only on construction so
they can be shared between threads and worker processes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

FORMAT_TAG = "certilip-model"
FORMAT_VERSION = 1


class ConvergenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# numeric primitives


def softplus(z, steepness: float = 1.0):
    """Smooth ReLU ``log(1 + exp(steepness*z)) / steepness``, overflow-safe."""
    z = np.asarray(z, dtype=float)
    return np.logaddexp(0.0, steepness * z) / steepness


def softplus_prime(z, steepness: float = 1.0):
    """Derivative of :func:`softplus`, the logistic ``1 / (1 + exp(-steepness*z))``."""
    return expit(steepness * np.asarray(z, dtype=float))


def softplus_second(z, steepness: float = 1.0):
    s = softplus_prime(z, steepness)
    return steepness * s * (1.0 - s)


@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool


def power_iteration(matrix, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0) -> PowerIterationResult:
    """Largest singular value of ``matrix`` by power iteration on ``M^T M``.

    Stops once the Rayleigh quotient changes by less than ``tol`` (relative).
    On non-convergence the best iterate is returned with ``converged=False``.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValidationError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix has non-finite entries")
    n = m.shape[1]
    if m.size == 0:
        return PowerIterationResult(0.0, np.zeros(n), 0, True)

    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        w = m.T @ (m @ v)
        new_est = float(v @ w)  # Rayleigh quotient of M^T M, i.e. sigma^2
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return PowerIterationResult(0.0, v, it, True)
        v = w / norm_w
        if abs(new_est - est) <= tol * abs(new_est):
            est = new_est
            break
        est = new_est
    else:
        warnings.warn(
            f"power iteration did not reach rtol={tol} in {max_iter} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
        sigma = float(np.linalg.norm(m @ v))
        return PowerIterationResult(sigma, v, max_iter, False)
    sigma = float(np.linalg.norm(m @ v))
    return PowerIterationResult(sigma, v, it, True)


def spectral_norm(matrix, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0) -> float:
    return power_iteration(matrix, tol=tol, max_iter=max_iter, seed=seed).value


# ---------------------------------------------------------------------------
# models


def _frozen(a, name: str, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _optional(a, name: str, length: int):
    if a is None:
        return None
    arr = _frozen(a, name, 1)
    if arr.shape[0] != length:
        raise ValidationError(f"{name} has length {arr.shape[0]}, expected {length}")
    return arr


class _Model:
    kind: str

    @property
    def n_classes(self) -> int:
        raise NotImplementedError

    @property
    def n_features(self) -> int:
        raise NotImplementedError

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ValidationError(
                f"input has {x.shape[-1]} features, model expects {self.n_features}"
            )
        return x

    def outputs(self, x) -> np.ndarray:
        """Class scores for one input ``(d,)`` or a batch ``(n, d)``."""
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        """Input Jacobian ``(K, d)`` at a single point."""
        raise NotImplementedError

    def input_gradient(self, x, j: int) -> np.ndarray:
        if not 0 <= j < self.n_classes:
            raise ValidationError(f"class index {j} out of range for K={self.n_classes}")
        return self.jacobian(x)[j]


@dataclass(frozen=True, eq=False)
class LinearModel(_Model):
    weights: np.ndarray
    bias: np.ndarray | None = None
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        w = _frozen(self.weights, "weights", 2)
        if w.shape[0] < 2:
            raise ValidationError("a classifier needs at least two classes")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", _optional(self.bias, "bias", w.shape[0]))

    @property
    def n_classes(self):
        return self.weights.shape[0]

    @property
    def n_features(self):
        return self.weights.shape[1]

    def outputs(self, x):
        x = self._check_input(x)
        out = x @ self.weights.T
        if self.bias is not None:
            out = out + self.bias
        return out

    def jacobian(self, x):
        self._check_input(x)
        return np.array(self.weights)


@dataclass(frozen=True, eq=False)
class GaussianKernelModel(_Model):
    """Kernel expansion over ``anchors`` with coefficient matrix ``(K, n)``."""

    anchors: np.ndarray
    coefficients: np.ndarray
    width: float
    kind: str = field(default="kernel", init=False)

    def __post_init__(self):
        xa = _frozen(self.anchors, "anchors", 2)
        a = _frozen(self.coefficients, "coefficients", 2)
        if a.shape[1] != xa.shape[0]:
            raise ValidationError(
                f"coefficients have {a.shape[1]} columns but there are {xa.shape[0]} anchors"
            )
        if a.shape[0] < 2:
            raise ValidationError("a classifier needs at least two classes")
        if not (np.isfinite(self.width) and self.width > 0):
            raise ValidationError(f"kernel width must be positive, got {self.width}")
        object.__setattr__(self, "anchors", xa)
        object.__setattr__(self, "coefficients", a)
        object.__setattr__(self, "width", float(self.width))

    @property
    def n_classes(self):
        return self.coefficients.shape[0]

    @property
    def n_features(self):
        return self.anchors.shape[1]

    @cached_property
    def _anchor_sq(self):
        return np.einsum("ij,ij->i", self.anchors, self.anchors)

    def kernel_row(self, x) -> np.ndarray:
        """``k(x_r, x)`` for all anchors; ``(n,)`` or ``(batch, n)``."""
        x = self._check_input(x)
        x2 = np.einsum("...j,...j->...", x, x)
        sq = x2[..., None] + self._anchor_sq - 2.0 * (x @ self.anchors.T)
        return np.exp(-self.width * np.maximum(sq, 0.0))

    def outputs(self, x):
        return self.kernel_row(x) @ self.coefficients.T

    def jacobian(self, x):
        x = self._check_input(x)
        diff = self.anchors - x
        k = np.exp(-self.width * np.einsum("ij,ij->i", diff, diff))
        return 2.0 * self.width * (self.coefficients * k) @ diff


@dataclass(frozen=True, eq=False)
class OneHiddenLayerModel(_Model):
    """``hidden_weights`` is ``(U, d)``, ``output_weights`` is ``(K, U)``."""

    hidden_weights: np.ndarray
    output_weights: np.ndarray
    steepness: float = 10.0
    hidden_bias: np.ndarray | None = None
    output_bias: np.ndarray | None = None
    kind: str = field(default="nn", init=False)

    def __post_init__(self):
        u = _frozen(self.hidden_weights, "hidden_weights", 2)
        w = _frozen(self.output_weights, "output_weights", 2)
        if w.shape[1] != u.shape[0]:
            raise ValidationError(
                f"output_weights expect {w.shape[1]} hidden units, hidden_weights has {u.shape[0]}"
            )
        if w.shape[0] < 2:
            raise ValidationError("a classifier needs at least two classes")
        if not (np.isfinite(self.steepness) and self.steepness > 0):
            raise ValidationError(f"softplus steepness must be positive, got {self.steepness}")
        object.__setattr__(self, "hidden_weights", u)
        object.__setattr__(self, "output_weights", w)
        object.__setattr__(self, "steepness", float(self.steepness))
        object.__setattr__(self, "hidden_bias", _optional(self.hidden_bias, "hidden_bias", u.shape[0]))
        object.__setattr__(self, "output_bias", _optional(self.output_bias, "output_bias", w.shape[0]))

    @property
    def n_classes(self):
        return self.output_weights.shape[0]

    @property
    def n_features(self):
        return self.hidden_weights.shape[1]

    @property
    def n_hidden(self):
        return self.hidden_weights.shape[0]

    @cached_property
    def hidden_gram(self) -> np.ndarray:
        """``<u_r, u_m>`` for all pairs of hidden units."""
        return self.hidden_weights @ self.hidden_weights.T

    @cached_property
    def hidden_spectral_norm(self) -> float:
        return spectral_norm(self.hidden_weights)

    def preactivation(self, x):
        x = self._check_input(x)
        a = x @ self.hidden_weights.T
        if self.hidden_bias is not None:
            a = a + self.hidden_bias
        return a

    def outputs(self, x):
        h = softplus(self.preactivation(x), self.steepness)
        out = h @ self.output_weights.T
        if self.output_bias is not None:
            out = out + self.output_bias
        return out

    def jacobian(self, x):
        s = softplus_prime(self.preactivation(x), self.steepness)
        return (self.output_weights * s) @ self.hidden_weights


Model = Union[LinearModel, GaussianKernelModel, OneHiddenLayerModel]


def predict(model: Model, x) -> tuple[int, np.ndarray]:
    """Predicted class (lowest index on ties) and the full output vector."""
    out = model.outputs(x)
    if out.ndim != 1:
        raise ValidationError("predict takes a single input; use model.outputs for batches")
    if not np.all(np.isfinite(out)):
        raise NumericalError("model produced non-finite outputs")
    return int(np.argmax(out)), out


def predict_batch(model: Model, x) -> np.ndarray:
    return np.argmax(model.outputs(np.atleast_2d(x)), axis=1)


def input_gradient(model: Model, x, j: int) -> np.ndarray:
    return model.input_gradient(x, j)


# ---------------------------------------------------------------------------
# model files
#
#   certilip-model 1
#   kind nn
#   param steepness 10
#   block hidden_weights 64 784
#   <row-major values, one matrix row per line, %.17g>
#   end


def _blocks(model: Model) -> tuple[dict, dict]:
    if isinstance(model, LinearModel):
        params = {}
        blocks = {"weights": model.weights, "bias": model.bias}
    elif isinstance(model, GaussianKernelModel):
        params = {"width": model.width}
        blocks = {"anchors": model.anchors, "coefficients": model.coefficients}
    elif isinstance(model, OneHiddenLayerModel):
        params = {"steepness": model.steepness}
        blocks = {
            "hidden_weights": model.hidden_weights,
            "output_weights": model.output_weights,
            "hidden_bias": model.hidden_bias,
            "output_bias": model.output_bias,
        }
    else:
        raise ValidationError(f"unsupported model type {type(model).__name__}")
    return params, {k: v for k, v in blocks.items() if v is not None}


def dumps_model(model: Model) -> str:
    params, blocks = _blocks(model)
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION}", f"kind {model.kind}"]
    lines += [f"param {k} {v!r}" for k, v in params.items()]
    for name, arr in blocks.items():
        mat = np.atleast_2d(arr)
        lines.append(f"block {name} {arr.ndim} " + " ".join(str(s) for s in arr.shape))
        lines += [" ".join(f"{v:.17g}" for v in row) for row in mat]
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> Model:
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [FORMAT_TAG]:
        raise ValidationError("not a certilip model file (missing header)")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise ValidationError("model file header has no version") from None
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported model file version {version}")

    kind = None
    params: dict[str, float] = {}
    blocks: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        tag = parts[0]
        if tag == "end":
            break
        if tag == "kind":
            kind = parts[1]
        elif tag == "param":
            params[parts[1]] = float(parts[2])
        elif tag == "block":
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(s) for s in parts[3 : 3 + ndim])
            nrows = shape[0] if ndim == 2 else 1
            rows = lines[i : i + nrows]
            if len(rows) != nrows:
                raise ValidationError(f"block {name!r} is truncated (line {i + 1})")
            i += nrows
            try:
                data = np.array([[float(v) for v in r.split()] for r in rows], dtype=float)
            except ValueError as exc:
                raise ValidationError(f"block {name!r}: {exc}") from None
            if data.size != int(np.prod(shape)):
                raise ValidationError(f"block {name!r} has {data.size} values, expected shape {shape}")
            blocks[name] = data.reshape(shape)
        else:
            raise ValidationError(f"unknown record {tag!r} on line {i}")
    else:
        raise ValidationError("model file has no 'end' record")

    try:
        if kind == "linear":
            return LinearModel(blocks["weights"], blocks.get("bias"))
        if kind == "kernel":
            return GaussianKernelModel(blocks["anchors"], blocks["coefficients"], params["width"])
        if kind == "nn":
            return OneHiddenLayerModel(
                blocks["hidden_weights"],
                blocks["output_weights"],
                params["steepness"],
                blocks.get("hidden_bias"),
                blocks.get("output_bias"),
            )
    except KeyError as exc:
        raise ValidationError(f"model file of kind {kind!r} is missing {exc}") from None
    raise ValidationError(f"unknown model kind {kind!r}")


def save_model(model: Model, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> Model:
    return loads_model(Path(path).read_text())

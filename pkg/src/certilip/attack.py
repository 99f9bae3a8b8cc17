"""Box-constrained adversarial samples from a first-order model.

For a predicted class ``c`` and a target ``j`` the linearised problem is::

    min ||delta||_p   s.t.   <v, delta> <= gap,   0 <= x + delta <= 1

with ``v = grad f_c(x) - grad f_j(x)`` and ``gap = f_j(x) - f_c(x)``.  The
three solvers below are exact for p = 2, 1 and inf.  Each locates the first
coordinate breakpoint at which the clipped move reaches the gap: large
problems are first narrowed to the breakpoints between two sampled pivots by
a bisection of streaming passes, and only that band is sorted and scanned
with prefix sums (O(d log d) in the worst case, near-linear in practice).

Solvers return ``None`` when no point of the box meets the constraint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ValidationError
from .model import Model, predict

logger = logging.getLogger(__name__)

P_VALUES = (1, 2, np.inf)


def parse_p(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        p = np.inf if p in ("inf", "infinity", "linf") else float(p)
    p = float(p)
    if p not in P_VALUES:
        raise ValidationError(f"p must be one of 1, 2, inf; got {p}")
    return p


def p_label(p) -> str:
    return "inf" if np.isinf(p) else str(int(p))


@dataclass(frozen=True)
class BoxLinearProblem:
    direction: np.ndarray
    gap: float
    base_point: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=float)
        x = np.asarray(self.base_point, dtype=float)
        if v.ndim != 1 or v.shape != x.shape:
            raise ValidationError(
                f"direction {v.shape} and base_point {x.shape} must be vectors of equal length"
            )
        object.__setattr__(self, "direction", v)
        object.__setattr__(self, "base_point", x)
        object.__setattr__(self, "gap", float(self.gap))

    @cached_property
    def _limits(self) -> np.ndarray:
        v, x = self.direction, self.base_point
        # branch-free: 1 - x where v < 0, -x elsewhere, then 0 where v == 0
        lim = (v < 0).astype(float)
        lim -= x
        if np.count_nonzero(v) < v.size:
            lim[v == 0] = 0.0
        lim.setflags(write=False)
        return lim

    def box_limits(self) -> np.ndarray:
        """The face each coordinate is pushed towards: -x_r where v_r > 0, 1 - x_r where v_r < 0."""
        return self._limits

    def saturated_value(self) -> float:
        """Smallest reachable ``<v, delta>`` over the box."""
        return float(self.direction @ self._limits)

    def feasible(self) -> bool:
        return self.gap >= 0 or self.saturated_value() <= self.gap


def _suffix_sum(a: np.ndarray) -> np.ndarray:
    """``out[k] = sum(a[k+1:])`` without the cancellation of ``total - cumsum``."""
    out = np.zeros_like(a)
    out[:-1] = np.cumsum(a[::-1])[::-1][1:]
    return out


def _crossing_values(pre, key, post):
    # pre - key * post, where an empty remainder (post == 0) contributes nothing even at key = inf
    with np.errstate(invalid="ignore"):
        return np.where(post > 0, pre - key * post, pre)


_SCAN_MAX = 2048
_PIVOTS = 64


def _scan(key, s, q, gap, s_base, q_base, upper):
    order = np.argsort(key)
    key, s, q = key[order], s[order], q[order]
    pre = s_base + np.cumsum(s)
    post = q_base + _suffix_sum(q)
    reached = np.flatnonzero(_crossing_values(pre, key, post) <= gap)
    if reached.size:
        k = int(reached[0])
    elif upper is not None:
        # the crossing lies beyond these keys, at the pivot that bounds them
        return upper, float(pre[-1]), q_base
    else:
        k = key.size - 1
    return float(key[k]), float(pre[k] - s[k]), float(post[k] + q[k])


def _first_crossing(key, s, q, gap):
    """First breakpoint, in ascending ``key`` order, at which the piecewise linear
    ``h_k = sum_{i<=k} s_i - key_k * sum_{i>k} q_i`` reaches ``gap``.

    Returns ``(key_k, sum_{i<k} s_i, sum_{i>=k} q_i)``; the last breakpoint is used
    when ``h`` never reaches ``gap``.  Large inputs are first narrowed to the keys
    between two consecutive pivots (taken from a strided sample) by bisection over
    the pivots, each step costing a few streaming passes; only that band is sorted.
    """
    s_base = q_base = 0.0
    upper = None  # smallest key above the current candidates, if any
    while key.size > _SCAN_MAX:
        piv = np.unique(key[:: max(1, key.size // _PIVOTS)])
        lo, hi = -1, piv.size  # h(piv[lo]) > gap >= h(piv[hi]); the ends stand for -inf and +inf
        s_lo, q_hi = s_base, q_base
        while hi - lo > 1:
            mid = (lo + hi) // 2
            below = key < piv[mid]
            s_below = s_base + float(s @ below)
            q_above = q_base + float(q @ ~below)
            if _crossing_values(s_below, piv[mid], q_above) <= gap:
                hi, q_hi = mid, q_above
            else:
                lo, s_lo = mid, s_below
        if lo >= 0 and hi < piv.size:
            band = (key >= piv[lo]) & (key < piv[hi])
        elif lo >= 0:
            band = key >= piv[lo]
        else:
            band = key < piv[hi]
        sel = np.flatnonzero(band)
        if hi < piv.size:
            upper = float(piv[hi])
        s_base, q_base = s_lo, q_hi
        if sel.size == 0:
            return upper, s_base, q_base
        if sel.size == key.size:
            break  # a single repeated key; nothing left to split
        key, s, q = key[sel], s[sel], q[sel]
    return _scan(key, s, q, gap, s_base, q_base, upper)


def _nonzero_view(problem: BoxLinearProblem, v: np.ndarray):
    """Direction, limits and zero mask restricted to coordinates that can move."""
    limit = problem.box_limits()
    if np.count_nonzero(v) == v.size:
        return v, limit, None
    zero = v == 0
    keep = ~zero
    return v[keep], limit[keep], zero


def solve_box_l2(problem: BoxLinearProblem) -> np.ndarray | None:
    v, x, gap = problem.direction, problem.base_point, problem.gap
    d = v.size
    if gap >= 0:
        return np.zeros(d)
    if not problem.feasible():
        return None

    # the solution is invariant to scaling (v, gap) together; normalising keeps
    # the breakpoints finite for tiny directions
    scale = float(np.max(np.abs(v)))
    vn = v / scale
    gap = gap / scale
    vi, limit, zero = _nonzero_view(problem, vn)
    # delta(lambda) = clip(-lambda * v); coordinate r reaches its face at
    # lambda = limit_r / -v_r, an infinite breakpoint being one that never saturates
    with np.errstate(over="ignore"):
        thresh = limit / -vi
    t_k, sat_before, sq_from = _first_crossing(thresh, vi * limit, vi * vi, gap)
    lam = (sat_before - gap) / sq_from if sq_from > 0 else t_k
    delta = vn * -lam
    np.maximum(delta, -x, out=delta)
    np.minimum(delta, 1.0 - x, out=delta)
    if zero is not None:
        delta[zero] = 0.0
    return delta


def solve_box_l1(problem: BoxLinearProblem) -> np.ndarray | None:
    v, gap = problem.direction, problem.gap
    d = v.size
    if gap >= 0:
        return np.zeros(d)
    if not problem.feasible():
        return None

    # greedy: saturate coordinates by decreasing |v| until the gap is reached
    limit = problem.box_limits()
    av = np.abs(v)
    contrib = v * limit
    a = -_first_crossing(-av, contrib, np.zeros(d), gap)[0]
    # coordinates with a larger |v| saturate; those tied with the split fill in index order
    full = av > a
    tied = np.flatnonzero(av == a)
    before = float(np.sum(contrib[full]))
    tc = before + np.cumsum(contrib[tied])
    t = min(int(np.searchsorted(-tc, -gap, side="left")), tied.size - 1)
    delta = np.zeros(d)
    delta[full] = limit[full]
    delta[tied[:t]] = limit[tied[:t]]
    prev = tc[t - 1] if t > 0 else before
    r = tied[t]
    if v[r] != 0:
        delta[r] = np.clip((gap - prev) / v[r], min(0.0, limit[r]), max(0.0, limit[r]))
    return delta


def solve_box_linf(problem: BoxLinearProblem) -> np.ndarray | None:
    v, x = problem.direction, problem.base_point
    t = linf_radius(problem)
    if t is None:
        return None
    delta = np.where(v > 0, np.maximum(-t, -x), np.minimum(t, 1.0 - x))
    delta[v == 0] = 0.0
    return delta


def linf_radius(problem: BoxLinearProblem) -> float | None:
    """Smallest t >= 0 at which the clipped move ``|delta_r| <= t`` reaches ``gap``."""
    v, gap = problem.direction, problem.gap
    if gap >= 0:
        return 0.0
    if not problem.feasible():
        return None
    vi, limit, _ = _nonzero_view(problem, v)
    # coordinate r saturates at t = |limit_r|, after which it contributes v_r * limit_r
    b_k, sat_before, slope_from = _first_crossing(np.abs(limit), vi * limit, np.abs(vi), gap)
    return float((sat_before - gap) / slope_from) if slope_from > 0 else b_k


SOLVERS = {1.0: solve_box_l1, 2.0: solve_box_l2, np.inf: solve_box_linf}


def solve_box(problem: BoxLinearProblem, p) -> np.ndarray | None:
    return SOLVERS[parse_p(p)](problem)


# ---------------------------------------------------------------------------
# attacks on models


@dataclass
class AdversarialSample:
    delta: np.ndarray | None
    norm_value: float
    p: float
    target_class: int
    achieved_class: int
    feasible: bool
    original_class: int
    gap_multiplier_trace: list[tuple[int, float, bool]] = field(default_factory=list)
    multiplier: float | None = None

    @property
    def flipped(self) -> bool:
        return self.feasible and self.achieved_class != self.original_class

    def to_record(self, instance_id) -> dict:
        return {
            "id": instance_id,
            "p": p_label(self.p),
            "predicted": self.original_class,
            "target_class": self.target_class,
            "achieved_class": self.achieved_class,
            "norm": self.norm_value if self.feasible else None,
            "feasible": self.feasible,
            "flipped": self.flipped,
        }


def _failure(c: int, p: float) -> AdversarialSample:
    return AdversarialSample(None, np.inf, p, -1, c, False, c)


def _target_problems(model: Model, x, c: int, out: np.ndarray):
    jac = model.jacobian(x)
    for j in range(model.n_classes):
        if j != c:
            yield j, BoxLinearProblem(jac[c] - jac[j], out[j] - out[c], x)


def attack_linearized(model: Model, x, p=2) -> AdversarialSample:
    """Minimum-norm solution of the linearised problem over all targets.

    Exact for linear models (the returned point sits on the decision boundary).
    """
    p = parse_p(p)
    x = np.asarray(x, dtype=float)
    c, out = predict(model, x)
    best = _failure(c, p)
    for j, prob in _target_problems(model, x, c, out):
        delta = SOLVERS[p](prob)
        if delta is None:
            continue
        nrm = float(np.linalg.norm(delta, ord=p))
        if nrm < best.norm_value:
            best = AdversarialSample(delta, nrm, p, j, -1, True, c)
    if best.feasible:
        best.achieved_class = predict(model, x + best.delta)[0]
    return best


def attack_boundary_search(model: Model, x, p=2, m_lo: float = 0.25, m_hi: float = 16.0,
                           iterations: int = 40, max_expand: int = 20) -> AdversarialSample:
    """Scale the linearised gap by a multiplier until the true model flips.

    Per target the gradients are frozen at ``x``; a bisection over the
    multiplier ``m`` finds the smallest ``m`` for which the solution of the
    linearised problem with gap ``m * (f_j - f_c)`` changes the prediction.
    The trace records every ``(target, m, flipped)`` probe.
    """
    p = parse_p(p)
    x = np.asarray(x, dtype=float)
    c, out = predict(model, x)
    solver = SOLVERS[p]
    best = _failure(c, p)
    trace: list[tuple[int, float, bool]] = []

    for j, prob in _target_problems(model, x, c, out):
        if prob.gap >= 0:
            continue

        sat = prob.saturated_value()

        def probe(m):
            # m never exceeds m_feas; the clamp only absorbs rounding at m_feas itself
            delta = solver(BoxLinearProblem(prob.direction, max(m * prob.gap, sat), x))
            if delta is None:
                trace.append((j, m, False))
                return None, None
            cls = predict(model, x + delta)[0]
            trace.append((j, m, cls != c))
            return (delta, cls) if cls != c else (None, None)

        # largest multiplier whose linearised problem is still feasible in the box
        m_feas = sat / prob.gap
        lo, hi = min(m_lo, 0.5 * m_feas), min(m_hi, m_feas)
        hit = probe(lo)
        if hit[0] is not None:
            hi, hi_hit, lo = lo, hit, 0.0
            for _ in range(max_expand):
                cand = hi / 2.0
                h = probe(cand)
                if h[0] is None:
                    lo = cand
                    break
                hi, hi_hit = cand, h
        else:
            hi_hit = probe(hi)
            n = 0
            while hi_hit[0] is None and hi < m_feas and n < max_expand:
                lo, hi = hi, min(2.0 * hi, m_feas)
                hi_hit = probe(hi)
                n += 1
            if hi_hit[0] is None:
                continue
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            h = probe(mid)
            if h[0] is None:
                lo = mid
            else:
                hi, hi_hit = mid, h
        delta, cls = hi_hit
        nrm = float(np.linalg.norm(delta, ord=p))
        if nrm < best.norm_value:
            best = AdversarialSample(delta, nrm, p, j, cls, True, c, multiplier=hi)
    best.gap_multiplier_trace = trace
    return best


def adversarial_resistance(model: Model, X, y, p=2, **search) -> dict:
    """Boundary-search statistics over correctly classified points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    pred = np.argmax(model.outputs(X), axis=1)
    norms, failures, samples = [], 0, []
    for i in np.flatnonzero(pred == y):
        s = attack_boundary_search(model, X[i], p, **search)
        samples.append((int(i), s))
        if s.flipped:
            norms.append(s.norm_value)
        else:
            failures += 1
    summary = {
        "p": p_label(parse_p(p)),
        "n_points": int(X.shape[0]),
        "n_correct": int(np.sum(pred == y)),
        "n_flipped": len(norms),
        "n_failed": failures,
    }
    if norms:
        a = np.array(norms)
        summary.update(
            mean=float(a.mean()),
            median=float(np.median(a)),
            q1=float(np.quantile(a, 0.25)),
            q3=float(np.quantile(a, 0.75)),
        )
    else:
        summary.update(mean=None, median=None, q1=None, q3=None)
    summary["samples"] = samples
    return summary

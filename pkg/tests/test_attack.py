import numpy as np
import pytest

import certilip.attack as attack_mod

from certilip.attack import (
    BoxLinearProblem,
    adversarial_resistance,
    attack_boundary_search,
    attack_linearized,
    linf_radius,
    parse_p,
    solve_box,
    solve_box_l1,
    solve_box_l2,
    solve_box_linf,
)
from certilip.certify import guarantee, linear_guarantee
from certilip.errors import ValidationError
from certilip.model import LinearModel, OneHiddenLayerModel, predict
from certilip.oracle import oracle_box_l1, oracle_box_linf, oracle_box_qp

from factories import all_targets_interior, random_kernel, random_linear, random_nn, random_problem

ORACLES = {1.0: oracle_box_l1, 2.0: oracle_box_qp, np.inf: oracle_box_linf}


def prob(v, gap, x):
    return BoxLinearProblem(np.array(v, float), gap, np.array(x, float))


# ---------------------------------------------------------------------------
# worked examples


def test_l2_interior_example():
    d = solve_box_l2(prob([1, 0], -0.5, [0.5, 0.5]))
    np.testing.assert_allclose(d, [-0.5, 0.0], atol=1e-15)


def test_l2_clamped_example():
    d = solve_box_l2(prob([3, 1], -2.0, [0.5, 0.5]))
    np.testing.assert_allclose(d, [-0.5, -0.5], atol=1e-15)
    ref = oracle_box_qp([3, 1], -2.0, [0.5, 0.5])
    assert ref.value == pytest.approx(np.linalg.norm(d), abs=1e-12)


def test_l2_infeasible_example():
    assert solve_box_l2(prob([1, 0], -2.0, [0.5, 0.5])) is None


def test_l1_examples():
    d = solve_box_l1(prob([3, 1], -1.0, [0.5, 0.5]))
    np.testing.assert_allclose(d, [-1 / 3, 0.0], atol=1e-15)
    assert oracle_box_l1([3, 1], -1.0, [0.5, 0.5]).value == pytest.approx(1 / 3, abs=1e-12)
    np.testing.assert_array_equal(solve_box_l1(prob([1, 1], 0.0, [0.5, 0.5])), [0.0, 0.0])


def test_l1_unreachable_gap_is_infeasible():
    # from x = (0.9, 0.9) the best reachable value of delta_1 - delta_2 is -0.9 - 0.1 = -1.0
    p = prob([1, -1], -1.2, [0.9, 0.9])
    assert p.saturated_value() == pytest.approx(-1.0)
    assert solve_box_l1(p) is None
    assert not oracle_box_l1([1, -1], -1.2, [0.9, 0.9]).feasible
    d = solve_box_l1(prob([1, -1], -0.95, [0.9, 0.9]))
    np.testing.assert_allclose(d, [-0.9, 0.05], atol=1e-15)


def test_linf_examples():
    d = solve_box_linf(prob([3, 1], -1.0, [0.5, 0.5]))
    np.testing.assert_allclose(d, [-0.25, -0.25], atol=1e-15)
    assert oracle_box_linf([3, 1], -1.0, [0.5, 0.5]).value == pytest.approx(0.25, abs=1e-12)
    np.testing.assert_allclose(solve_box_linf(prob([1], -0.5, [0.5])), [-0.5], atol=1e-15)
    np.testing.assert_array_equal(solve_box_linf(prob([1, 2], 0.0, [0.3, 0.3])), [0.0, 0.0])
    assert linf_radius(prob([1, 2], 0.0, [0.3, 0.3])) == 0.0


def test_zero_direction_coordinates_stay_put():
    for p in (1, 2, np.inf):
        d = solve_box(prob([2.0, 0.0, -1.0], -0.4, [0.5, 0.5, 0.5]), p)
        assert d[1] == 0.0


def test_zero_direction_is_infeasible_for_negative_gap():
    for p in (1, 2, np.inf):
        assert solve_box(prob([0.0, 0.0], -0.1, [0.5, 0.5]), p) is None


def test_problem_shape_validation():
    with pytest.raises(ValidationError):
        BoxLinearProblem(np.ones(3), -1.0, np.ones(2))


def test_parse_p():
    assert parse_p("inf") == np.inf and parse_p(2) == 2.0 and parse_p("1") == 1.0
    with pytest.raises(ValidationError):
        parse_p(3)


# ---------------------------------------------------------------------------
# optimality and feasibility against the oracles


@pytest.mark.parametrize("p", [1.0, 2.0, np.inf])
def test_solvers_match_oracles(p):
    rng = np.random.default_rng(int(p) if np.isfinite(p) else 9)
    for _ in range(300):
        v, gap, x = random_problem(rng, int(rng.integers(1, 7)))
        pr = BoxLinearProblem(v, gap, x)
        delta = solve_box(pr, p)
        ref = ORACLES[p](v, gap, x)
        assert (delta is None) == (not ref.feasible)
        assert (delta is None) == (not pr.feasible())
        if delta is not None:
            assert abs(np.linalg.norm(delta, ord=p) - ref.value) <= 1e-8
            assert np.all(x + delta >= -1e-12) and np.all(x + delta <= 1 + 1e-12)
            assert v @ delta <= gap + 1e-9


@pytest.mark.parametrize("p", [1.0, 2.0, np.inf])
def test_block_narrowing_matches_oracles(p, monkeypatch):
    # force the partition stage on tiny problems, where the oracles are exact
    monkeypatch.setattr(attack_mod, "_SCAN_MAX", 1)
    monkeypatch.setattr(attack_mod, "_PIVOTS", 3)
    rng = np.random.default_rng(31)
    for _ in range(300):
        v, gap, x = random_problem(rng, int(rng.integers(2, 7)))
        if rng.random() < 0.3:
            v = np.round(v)  # ties and zeros
        delta = solve_box(BoxLinearProblem(v, gap, x), p)
        ref = ORACLES[p](v, gap, x)
        assert (delta is None) == (not ref.feasible)
        if delta is not None:
            assert abs(np.linalg.norm(delta, ord=p) - ref.value) <= 1e-8


@pytest.mark.parametrize("p", [1.0, 2.0, np.inf])
def test_block_narrowing_matches_full_scan_at_large_d(p, monkeypatch):
    rng = np.random.default_rng(32)
    for k in range(6):
        d = 20_000
        v = rng.standard_normal(d)
        if k % 2:
            v = np.round(v * 2) / 2  # many ties and zeros
        x = rng.random(d)
        x[rng.random(d) < 0.05] = 0.0
        pr = BoxLinearProblem(v, -float(rng.uniform(1, 50)), x)
        fast = solve_box(pr, p)
        with monkeypatch.context() as m:
            m.setattr(attack_mod, "_SCAN_MAX", 10**9)
            ref = solve_box(pr, p)
        assert np.linalg.norm(fast, ord=p) == pytest.approx(np.linalg.norm(ref, ord=p), rel=1e-10)
        if p == 1.0:
            np.testing.assert_array_equal(fast, ref)


def test_no_solver_beats_another_in_its_own_norm():
    rng = np.random.default_rng(11)
    for _ in range(200):
        v, gap, x = random_problem(rng, int(rng.integers(2, 7)))
        pr = BoxLinearProblem(v, gap, x)
        sols = {p: solve_box(pr, p) for p in (1.0, 2.0, np.inf)}
        if sols[2.0] is None:
            continue
        for p, own in sols.items():
            for other in sols.values():
                assert np.linalg.norm(own, ord=p) <= np.linalg.norm(other, ord=p) + 1e-9


def test_scaling_invariance():
    rng = np.random.default_rng(12)
    for _ in range(100):
        v, gap, x = random_problem(rng, 5)
        for p in (1.0, 2.0, np.inf):
            a = solve_box(BoxLinearProblem(v, gap, x), p)
            b = solve_box(BoxLinearProblem(7.5 * v, 7.5 * gap, x), p)
            if a is None:
                assert b is None
            else:
                np.testing.assert_allclose(a, b, atol=1e-12)


def test_tied_thresholds_are_deterministic():
    v = np.array([1.0, 1.0, 1.0, 1.0])
    x = np.full(4, 0.5)
    for p in (1.0, 2.0, np.inf):
        a = solve_box(BoxLinearProblem(v, -0.7, x), p)
        b = solve_box(BoxLinearProblem(v, -0.7, x), p)
        np.testing.assert_array_equal(a, b)
    # greedy L1 fills equal |v| in index order
    np.testing.assert_allclose(solve_box_l1(BoxLinearProblem(v, -0.7, x)), [-0.5, -0.2, 0, 0])


def test_solvers_handle_large_d():
    rng = np.random.default_rng(13)
    d = 100_000
    v = rng.standard_normal(d)
    x = rng.random(d)
    pr = BoxLinearProblem(v, -5.0, x)
    for p in (1.0, 2.0, np.inf):
        delta = solve_box(pr, p)
        assert v @ delta == pytest.approx(-5.0, rel=1e-9)
        assert np.all(x + delta >= -1e-12) and np.all(x + delta <= 1 + 1e-12)


# ---------------------------------------------------------------------------
# attacks on models


def test_attack_linearized_linear_example():
    m = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0]]))
    x = np.array([0.75, 0.25])
    s = attack_linearized(m, x, 2)
    assert s.feasible and s.target_class == 1
    assert s.norm_value == pytest.approx(0.5 / np.sqrt(2), rel=1e-12)
    direction = np.array([-1.0, 1.0]) / np.sqrt(2)
    np.testing.assert_allclose(s.delta / np.linalg.norm(s.delta), direction, atol=1e-12)
    assert predict(m, x + s.delta + 1e-9 * direction)[0] == 1


def test_attack_linearized_matches_linear_guarantee_when_box_inactive():
    rng = np.random.default_rng(14)
    checked = 0
    for _ in range(300):
        m = random_linear(rng, K=4, d=5)
        x = 0.4 + 0.2 * rng.random(5)
        for p in (1.0, 2.0, np.inf):
            if not all_targets_interior(m, x, p):
                continue
            s = attack_linearized(m, x, p)
            checked += 1
            assert s.norm_value == pytest.approx(linear_guarantee(m, x, p), rel=1e-9, abs=1e-12)
    assert checked > 100


def test_identical_rows_make_target_infeasible():
    w = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
    m = LinearModel(w, np.array([0.0, -1.0, 0.0]))
    x = np.array([0.5, 0.5])
    c, out = predict(m, x)
    assert c == 0
    v = m.weights[0] - m.weights[1]
    assert solve_box(BoxLinearProblem(v, out[1] - out[0], x), 2) is None
    assert attack_linearized(m, x, 2).target_class == 2


def test_boundary_search_on_linear_model_converges_to_one():
    rng = np.random.default_rng(15)
    checked = 0
    for _ in range(40):
        m = random_linear(rng, K=3, d=4)
        x = 0.4 + 0.2 * rng.random(4)
        lin = attack_linearized(m, x, 2)
        s = attack_boundary_search(m, x, 2)
        if not all_targets_interior(m, x, 2.0):
            continue
        checked += 1
        assert s.flipped
        assert s.multiplier == pytest.approx(1.0, abs=1e-9)
        assert s.norm_value == pytest.approx(lin.norm_value, rel=1e-9)
    assert checked >= 10


def test_boundary_search_respects_box_and_flips():
    rng = np.random.default_rng(16)
    for _ in range(30):
        m = random_nn(rng)
        x = rng.random(4)
        for p in (1.0, 2.0, np.inf):
            s = attack_boundary_search(m, x, p)
            if not s.flipped:
                continue
            y = x + s.delta
            assert np.all(y >= -1e-12) and np.all(y <= 1 + 1e-12)
            assert predict(m, y)[0] == s.achieved_class != s.original_class
            assert s.norm_value == pytest.approx(np.linalg.norm(s.delta, ord=p), rel=1e-15)


def test_boundary_search_trace_is_upward_closed():
    rng = np.random.default_rng(17)
    for _ in range(100):
        m = random_nn(rng)
        s = attack_boundary_search(m, rng.random(4), 2)
        for j in {t[0] for t in s.gap_multiplier_trace}:
            probes = [(mult, flipped) for jj, mult, flipped in s.gap_multiplier_trace if jj == j]
            flips = [mult for mult, f in probes if f]
            stays = [mult for mult, f in probes if not f]
            if flips and stays:
                assert max(stays) < min(flips)


def test_sandwich_on_random_networks():
    rng = np.random.default_rng(18)
    for _ in range(50):
        m = random_nn(rng)
        x = rng.random(4)
        s = attack_boundary_search(m, x, 2)
        g = guarantee(m, x, "nn_local", 2)
        if s.flipped:
            assert g.guarantee_radius <= s.norm_value


def test_sandwich_on_random_kernels():
    rng = np.random.default_rng(19)
    for _ in range(30):
        m = random_kernel(rng)
        x = rng.random(3)
        s = attack_boundary_search(m, x, 2)
        if s.flipped:
            assert guarantee(m, x, "kernel_local", 2).guarantee_radius <= s.norm_value


def test_resistance_with_everything_misclassified():
    m = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0]]))
    X = np.array([[0.9, 0.1], [0.8, 0.3]])
    out = adversarial_resistance(m, X, np.array([1, 1]), 2)
    assert out["n_correct"] == 0 and out["n_flipped"] == 0
    assert out["mean"] is None and out["samples"] == []


def test_resistance_duplicate_rows_give_identical_results():
    rng = np.random.default_rng(20)
    m = random_nn(rng, d=3, K=2)
    x = rng.random(3)
    c = predict(m, x)[0]
    out = adversarial_resistance(m, np.vstack([x, x, x]), np.array([c, c, c]), 2)
    recs = [s.to_record(0) for _, s in out["samples"]]
    assert recs[0] == recs[1] == recs[2]
    if out["n_flipped"]:
        assert out["q1"] <= out["median"] <= out["q3"]


def test_attack_record_fields():
    m = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0]]))
    rec = attack_boundary_search(m, np.array([0.75, 0.25]), "inf").to_record(3)
    assert rec["id"] == 3 and rec["p"] == "inf" and rec["feasible"] and rec["flipped"]
    assert rec["target_class"] == 1 == rec["achieved_class"]


def test_failure_when_box_blocks_every_target():
    # the other class would need x_0 < -1
    m = OneHiddenLayerModel(np.eye(2), np.array([[1.0, 0.0], [-1.0, 0.0]]) * 0.1, 10.0,
                            None, np.array([1.0, 0.0]))
    s = attack_boundary_search(m, np.array([0.5, 0.5]), 2)
    assert not s.feasible and not s.flipped and s.delta is None

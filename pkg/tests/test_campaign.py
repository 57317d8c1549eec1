import math
import xml.etree.ElementTree as ET
from types import SimpleNamespace

import numpy as np
import pytest

from dampedvi import (
    HEATMAP_COLORS,
    IntegratorConfig,
    SweepOutcome,
    SweepPlan,
    classify_outcome,
    congruence_check,
    emit_heatmap,
    formation_model,
    integrate,
    read_outcomes_csv,
    regular_tetrahedron,
    run_campaign,
    square_with_diagonals,
    step_size_bound_alpha,
    write_outcomes_csv,
)

SVG = "{http://www.w3.org/2000/svg}"

SHAPE, BASE = regular_tetrahedron(2.0)
TARGET = BASE[9:12]


def plan(**kw):
    args = dict(
        shape=SHAPE,
        base_configuration=BASE,
        displaced_agent=3,
        region_lo=tuple(TARGET - [1.5, 1.5, 0]),
        region_hi=tuple(TARGET + [1.5, 1.5, 0]),
        count=40,
        seed=11,
    )
    args.update(kw)
    return SweepPlan(**args)


def svg_groups(path):
    root = ET.parse(path).getroot()
    return {g.get("id"): g for g in root.iter(SVG + "g") if g.get("id")}


def markers(group):
    return [(float(u.get("x")), float(u.get("y")), u.get("style")) for u in group.iter(SVG + "use")]


# ---------------------------------------------------------------------------
# plan


def test_default_step_and_horizon():
    p = plan()
    h, r = p.resolved_step()
    alpha = step_size_bound_alpha(SHAPE, 13.0)
    assert h <= min(alpha, 0.014)
    assert h * r == pytest.approx(5.0, rel=1e-14)
    assert r == math.ceil(5.0 / min(alpha, 0.014))


def test_explicit_step_is_adjusted_to_horizon():
    h, r = plan(h=0.014, horizon=5.0).resolved_step()
    assert r == 358 and h == pytest.approx(5.0 / 358) and h <= 0.014


def test_enforce_alpha():
    alpha = step_size_bound_alpha(SHAPE, 13.0)
    assert plan(enforce_alpha=True).resolved_step()[0] <= alpha
    with pytest.raises(ValueError, match="alpha"):
        plan(h=0.05, enforce_alpha=True)


@pytest.mark.parametrize(
    "kw",
    [
        dict(displaced_agent=4),
        dict(region_lo=(0, 0), region_hi=(1, 1)),
        dict(region_lo=(1, 0, 0), region_hi=(0, 1, 1)),
        dict(sampling="grid"),
        dict(sampling="sobol"),
        dict(count=0),
        dict(horizon=0.0),
        dict(base_configuration=BASE[:9]),
    ],
)
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        plan(**kw)


def test_samples_deterministic_and_inside_region():
    a, b = plan().samples(), plan().samples()
    np.testing.assert_array_equal(a, b)
    lo, hi = np.array(plan().region_lo), np.array(plan().region_hi)
    assert np.all(a >= lo) and np.all(a <= hi)
    np.testing.assert_array_equal(a[:, 2], TARGET[2])
    assert not np.array_equal(a, plan(seed=12).samples())


def test_grid_samples():
    p = plan(sampling="grid", grid_counts=(3, 2, 1))
    s = p.samples()
    assert s.shape == (6, 3) and p.sample_count == 6
    np.testing.assert_allclose(np.unique(s[:, 0]), TARGET[0] + np.array([-1.5, 0, 1.5]))


# ---------------------------------------------------------------------------
# campaign


def test_equilibrium_sample_converges_immediately():
    [o] = run_campaign(plan(region_lo=tuple(TARGET), region_hi=tuple(TARGET), count=1))
    assert o.converged and not o.diverged
    assert o.steps_to_converge == 0 and o.final_discrepancy == 0.0


def test_far_sample_fails():
    far = tuple(TARGET + 1e3)
    [o] = run_campaign(plan(region_lo=far, region_hi=far, count=1))
    assert not o.converged
    assert o.diverged or o.final_discrepancy > 0.01


def test_local_grid_all_converge():
    p = plan(region_lo=tuple(TARGET - [0.01, 0.01, 0]), region_hi=tuple(TARGET + [0.01, 0.01, 0]),
             sampling="grid", grid_counts=(3, 3, 1))
    out = run_campaign(p)
    assert [o.converged for o in out] == [True] * 9


def test_outcome_invariants():
    p = plan(count=60)
    h, r = p.resolved_step()
    for o in run_campaign(p):
        assert not (o.converged and o.diverged)
        if o.steps_to_converge is not None:
            assert 0 <= o.steps_to_converge <= r


def test_batched_run_matches_single_integrations():
    p = plan(count=12)
    h, r = p.resolved_step()
    model = formation_model(SHAPE, 13.0)
    for o in run_campaign(p):
        q0 = BASE.copy()
        q0[9:12] = o.initial_position
        tr = integrate(model, IntegratorConfig(h, r, q0, np.zeros(12)))
        c = classify_outcome(SHAPE, BASE, tr)
        assert (c["converged"], c["diverged"], c["steps_to_converge"]) == (o.converged, o.diverged, o.steps_to_converge)
        assert c["final_discrepancy"] == pytest.approx(o.final_discrepancy, rel=1e-6, abs=1e-12)
        if o.converged:
            assert congruence_check(BASE, tr.q[-1], tr.velocity[-1], 3)


def test_order_independent_of_threads_and_batches():
    p = plan(count=50)
    ref = run_campaign(p)
    assert [o.sample_index for o in ref] == list(range(50))
    assert run_campaign(p, threads=3, batch_size=7) == ref


def test_converged_and_failed_both_present():
    out = run_campaign(plan(count=80))
    assert any(o.converged for o in out) and any(not o.converged for o in out)


# ---------------------------------------------------------------------------
# classification of single runs


def test_classify_rigid_motion_at_rest():
    shape, q = square_with_diagonals(1.0, 2)
    c, s = np.cos(0.4), np.sin(0.4)
    moved = (q.reshape(4, 2) @ np.array([[c, -s], [s, c]]).T + [3.0, -1.0]).ravel()

    run = SimpleNamespace(q=np.stack([1.3 * q, moved]), velocity=np.zeros((2, 8)))
    got = classify_outcome(shape, q, run)
    assert got["converged"] and got["steps_to_converge"] == 1


def test_classify_diverged():
    run = SimpleNamespace(q=np.zeros((3, 12)), velocity=np.zeros((3, 12)), diverged=True)
    got = classify_outcome(SHAPE, BASE, run)
    assert got["diverged"] and not got["converged"] and got["steps_to_converge"] is None


def test_classify_planar_start_never_reaches_solid_shape():
    # coplanar data stays coplanar, so a regular tetrahedron is unreachable
    q0 = BASE.copy().reshape(4, 3)
    q0[:, 2] = 0.0
    model = formation_model(SHAPE, 13.0)
    tr = integrate(model, IntegratorConfig(0.01, 500, q0.ravel(), np.zeros(12)))
    got = classify_outcome(SHAPE, BASE, tr)
    assert not got["converged"] and not got["diverged"]
    assert got["final_discrepancy"] > 0.01


# ---------------------------------------------------------------------------
# artifacts


def test_csv_round_trip_and_determinism(tmp_path):
    p = plan(count=30)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_outcomes_csv(run_campaign(p), a, 3)
    write_outcomes_csv(run_campaign(p, threads=2, batch_size=4), b, 3)
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0]
    assert header == "sample_index,x0,y0,z0,converged,diverged,steps_to_converge,final_discrepancy,final_max_speed"
    back = read_outcomes_csv(a)
    assert back == run_campaign(p)


def test_csv_two_dimensional_header_and_missing_steps(tmp_path):
    o = SweepOutcome(0, (0.1, 0.2), False, True, None, float("nan"), float("nan"))
    path = tmp_path / "o.csv"
    write_outcomes_csv([o], path, 2)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("sample_index,x0,y0,converged")
    assert lines[1].split(",")[3:6] == ["0", "1", "-1"]


def test_csv_seventeen_digits(tmp_path):
    x = 0.1 + 0.2
    o = SweepOutcome(0, (x, 1 / 3, 2.0), True, False, 5, x, 1e-300)
    path = tmp_path / "o.csv"
    write_outcomes_csv([o], path, 3)
    assert "0.30000000000000004" in path.read_text()
    assert read_outcomes_csv(path)[0] == o


def test_heatmap_empty(tmp_path):
    path = tmp_path / "empty.svg"
    emit_heatmap([], plan(), path)
    groups = svg_groups(path)
    assert {"converged", "not_converged", "diverged", "desired"} <= set(groups)
    assert all(not markers(groups[c]) for c in HEATMAP_COLORS)
    assert "legend" in {g.get("id", "").split("_")[0] for g in ET.parse(path).getroot().iter(SVG + "g")}


def test_heatmap_all_converged_grid(tmp_path):
    p = plan(region_lo=tuple(TARGET - [0.01, 0.01, 0]), region_hi=tuple(TARGET + [0.01, 0.01, 0]),
             sampling="grid", grid_counts=(3, 3, 1))
    path = tmp_path / "grid.svg"
    emit_heatmap(run_campaign(p), p, path)
    groups = svg_groups(path)
    conv = markers(groups["converged"])
    assert len(conv) == 9
    assert all(HEATMAP_COLORS["converged"] in style for *_, style in conv)
    assert not markers(groups["not_converged"]) and not markers(groups["diverged"])


def test_heatmap_matches_csv(tmp_path):
    p = plan(count=120)
    out = run_campaign(p)
    csv_path, svg_path = tmp_path / "s.csv", tmp_path / "s.svg"
    write_outcomes_csv(out, csv_path, 3)
    emit_heatmap(out, p, svg_path)
    rows = read_outcomes_csv(csv_path)
    groups = svg_groups(svg_path)
    data, pix = [], []
    for cls, test in (("converged", lambda o: o.converged),
                      ("not_converged", lambda o: not o.converged and not o.diverged),
                      ("diverged", lambda o: o.diverged)):
        expected = [o.initial_position[:2] for o in rows if test(o)]
        got = markers(groups[cls])
        assert len(got) == len(expected)
        assert all(HEATMAP_COLORS[cls] in style for *_, style in got)
        data += expected
        pix += [(x, y) for x, y, _ in got]
    # marker positions are one affine image of the CSV coordinates
    data, pix = np.array(data), np.array(pix)
    design = np.column_stack([data, np.ones(len(data))])
    coef, *_ = np.linalg.lstsq(design, pix, rcond=None)
    assert np.max(np.abs(design @ coef - pix)) < 0.01


def test_heatmap_is_deterministic(tmp_path):
    p = plan(count=20)
    out = run_campaign(p)
    emit_heatmap(out, p, tmp_path / "a.svg")
    emit_heatmap(out, p, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_heatmap_errors(tmp_path):
    with pytest.raises(OSError):
        emit_heatmap([], plan(), tmp_path / "missing" / "x.svg")
    solid = plan(region_lo=tuple(TARGET - 1), region_hi=tuple(TARGET + 1))
    with pytest.raises(ValueError):
        emit_heatmap([], solid, tmp_path / "x.svg")

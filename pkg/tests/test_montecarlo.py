import math

import numpy as np
import pytest

from sketchcpd.montecarlo import (
    CalibrationError,
    EstimationError,
    SimPlan,
    arl_curve,
    calibrate_b_mc,
    simulate,
    simulate_arl,
    simulate_edd,
    simulate_records,
)

SMALL = dict(N=20, M=5, window=20, replicates=60, target_arl=200.0, root_seed=3)


def test_plan_config_round_trip():
    plan = SimPlan(kind="timevarying", N=30, M=7, threshold=12.5, fresh_projection=True, root_seed=9)
    text = plan.to_config()
    parsed = dict(line.split(" = ", 1) for line in text.strip().splitlines())
    assert SimPlan.from_mapping(parsed) == plan


def test_plan_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ValueError, match="unknown"):
        SimPlan.from_mapping({"colour": "red"})
    with pytest.raises(ValueError):
        SimPlan(kind="bogus")
    with pytest.raises(ValueError):
        SimPlan(M=10, N=5)
    with pytest.raises(ValueError):
        SimPlan(mu_fraction=0.0)


def test_default_cap_is_twenty_times_target():
    assert SimPlan(target_arl=5000).cap == 100_000
    assert SimPlan(target_arl=5000, horizon_cap=123).cap == 123


def test_all_capped_is_an_error():
    with pytest.raises(EstimationError):
        simulate_arl(SimPlan(**SMALL, threshold=1e9, horizon_cap=50))


def test_partially_capped_is_flagged():
    res = simulate_arl(SimPlan(**SMALL, threshold=12.0, horizon_cap=30))
    assert 0 < res.capped_count < res.replicates_used and not res.clean


@pytest.mark.parametrize("kind", ["fixed", "cusum", "timevarying", "grid"])
def test_determinism_across_threads(kind):
    extra = dict(grid_nodes=30, grid_edges=45, M=4) if kind == "grid" else {}
    plan = SimPlan(kind=kind, **{**SMALL, **extra}, threshold=8.0)
    a = simulate_arl(plan.with_(threads=1))
    b = simulate_arl(plan.with_(threads=4))
    assert a == b


def test_arl_monotone_in_b_with_crn():
    plan = SimPlan(**SMALL)
    records = simulate_records(plan, 12.0)
    arls = [arl_curve(records, b, plan.cap) for b in (6.0, 8.0, 10.0, 11.0)]
    assert arls == sorted(arls)
    # records reproduce direct simulation at each threshold
    for b in (6.0, 10.0):
        assert simulate_arl(plan.with_(threshold=b)).mean == pytest.approx(arl_curve(records, b, plan.cap))


def test_pathwise_monotone_each_replicate():
    plan = SimPlan(**SMALL)
    lo = simulate_records(plan, 8.0)
    hi = simulate_records(plan, 9.0)
    assert all(h.alarm_time(9.0, plan.cap) >= l.alarm_time(8.0, plan.cap) for l, h in zip(lo, hi))


def test_huge_signal_detected_at_first_sample():
    for kind in ("fixed", "timevarying"):
        res = simulate_edd(SimPlan(kind=kind, **SMALL, threshold=10.0, mu_value=100.0))
        assert res.mean == 1.0 and res.std == 0.0


def test_edd_requires_signal():
    with pytest.raises(ValueError):
        simulate_edd(SimPlan(**SMALL, threshold=5.0))


def test_stderr_shrinks_like_root_n():
    plan = SimPlan(**{**SMALL, "replicates": 800}, threshold=9.0)
    a = simulate_arl(plan)
    b = simulate_arl(plan.with_(replicates=1600))
    assert b.stderr / a.stderr == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_edd_far_below_arl():
    plan = SimPlan(N=100, M=50, window=200, replicates=100, root_seed=1, threshold=51.04)
    arl = simulate_arl(plan)
    edd = simulate_edd(plan.with_(mu_value=0.5))
    assert edd.mean * 10 < arl.mean


def test_sparse_support_and_fresh_projection_paths_run():
    plan = SimPlan(**SMALL, threshold=8.0, mu_value=1.0, mu_fraction=0.25, fresh_projection=True)
    res = simulate_edd(plan)
    assert res.mean >= 1 and res.replicates_used == SMALL["replicates"]
    exp = SimPlan(**{**SMALL, "M": 10}, projection="expander", degree=2, threshold=8.0, mu_value=1.0)
    assert simulate_edd(exp).mean >= 1


def test_calibration_is_deterministic_and_on_target():
    plan = SimPlan(**{**SMALL, "replicates": 300})
    a = calibrate_b_mc(plan, 200.0, rel_tol=0.02)
    b = calibrate_b_mc(plan.with_(threads=3), 200.0, rel_tol=0.02)
    assert a.b == b.b
    assert abs(a.estimate.mean - 200.0) <= 0.02 * 200.0 or a.estimate.stderr > 0
    check = simulate_arl(plan.with_(threshold=a.b))
    assert check.mean == pytest.approx(a.estimate.mean)


def test_small_target_calibrates():
    cal = calibrate_b_mc(SimPlan(**SMALL), 10.0)
    assert 0 < cal.b < 10 and abs(cal.estimate.mean - 10.0) <= 0.5 + 3 * cal.estimate.stderr


def test_calibration_argument_checks():
    with pytest.raises(ValueError):
        calibrate_b_mc(SimPlan(**SMALL), 200.0, rel_tol=0.001)
    with pytest.raises(CalibrationError):
        calibrate_b_mc(SimPlan(**{**SMALL, "horizon_cap": 5}), 200.0, max_expansions=2)


def test_no_change_edd_equals_arl():
    plan = SimPlan(**SMALL, threshold=9.0)
    assert simulate(plan.with_(change="start")) == simulate_arl(plan)

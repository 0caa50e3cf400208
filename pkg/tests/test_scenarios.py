import importlib.resources as resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vscopf import powerflow as pf, scenarios as sc
from vscopf.netmodel import parse_case_text
from vscopf.scenarios import (
    PlantSpec,
    ScenarioError,
    ScenarioSynthSpec,
    build_vsi_dataset,
    control_bounds,
    lhs_sample,
    load_scenarios,
    rank_correlation,
    synth_scenarios,
    write_scenarios,
)


@pytest.fixture(scope="module")
def case14():
    return parse_case_text((resources.files("vscopf") / "cases" / "case14.m").read_text())


CSV = """# three plants, hourly snapshots
9,14,6
# morning
12.0,30.5,8.25
0.0,61.0,16.5
# evening
30.0,0.0,0.0
"""


def test_load_scenarios_parses_and_converts(tmp_path):
    f = tmp_path / "scen.csv"
    f.write_text(CSV)
    scen = load_scenarios(f, base_mva=100.0)
    assert scen.buses == [9, 14, 6]
    assert scen.values.shape == (3, 3)
    assert scen.values[0, 0] == pytest.approx(0.12)
    assert scen.values[1, 2] == pytest.approx(0.165)
    assert scen.mean_injection()[9] == pytest.approx((12 + 0 + 30) / 3 / 100)


def test_load_scenarios_bad_cell_reports_line(tmp_path):
    f = tmp_path / "scen.csv"
    f.write_text("9,14\n1.0,2.0\n1.0,oops\n")
    with pytest.raises(ScenarioError, match=r"line 3.*oops"):
        load_scenarios(f, base_mva=100.0)


def test_load_scenarios_ragged_row_rejected(tmp_path):
    f = tmp_path / "scen.csv"
    f.write_text("9,14\n1.0,2.0,3.0\n")
    with pytest.raises(ScenarioError, match=r"line 2"):
        load_scenarios(f, base_mva=100.0)


def test_load_scenarios_duplicate_plant_rejected(tmp_path):
    f = tmp_path / "scen.csv"
    f.write_text("9,9\n1.0,2.0\n")
    with pytest.raises(ScenarioError, match="duplicate"):
        load_scenarios(f, base_mva=100.0)


def test_scenario_csv_round_trip(tmp_path):
    f = tmp_path / "scen.csv"
    f.write_text(CSV)
    scen = load_scenarios(f, base_mva=100.0)
    g = tmp_path / "back.csv"
    write_scenarios(g, scen, base_mva=100.0)
    again = load_scenarios(g, base_mva=100.0)
    assert again.buses == scen.buses
    assert np.array_equal(again.values, scen.values)


def _synth_spec(k=3):
    plants = [
        PlantSpec(bus=9, capacity_mw=60.0, family="beta", params={"a": 2.0, "b": 5.0}),
        PlantSpec(bus=14, capacity_mw=60.0, family="uniform", params={"lo": 0.0, "hi": 1.0}),
        PlantSpec(bus=6, capacity_mw=45.0, family="lognormal", params={"mu": 2.3, "sigma": 0.6}),
    ][:k]
    R = np.eye(k)
    if k >= 2:
        R[0, 1] = R[1, 0] = 0.7
    if k >= 3:
        R[0, 2] = R[2, 0] = 0.2
        R[1, 2] = R[2, 1] = 0.3
    return ScenarioSynthSpec(plants=plants, rank_corr=R)


def test_synth_is_deterministic_per_seed():
    spec = _synth_spec()
    a = synth_scenarios(spec, 500, seed=42)
    b = synth_scenarios(spec, 500, seed=42)
    c = synth_scenarios(spec, 500, seed=43)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()


def test_synth_hits_target_rank_correlation():
    spec = _synth_spec()
    scen = synth_scenarios(spec, 5000, seed=7)
    R_emp = rank_correlation(scen.values)
    assert np.max(np.abs(R_emp - spec.rank_corr)) < 0.05


def test_synth_respects_capacity_and_family_support():
    spec = _synth_spec()
    scen = synth_scenarios(spec, 2000, seed=1)
    mw = scen.values * spec.base_mva
    caps = np.array([p.capacity_mw for p in spec.plants])
    assert np.all(mw >= 0.0)
    assert np.all(mw <= caps[None, :] + 1e-12)
    # beta(2,5) mean is 2/7 of capacity
    assert mw[:, 0].mean() == pytest.approx(60 * 2 / 7, rel=0.1)


def test_synth_rejects_bad_correlation_matrix():
    spec = _synth_spec(2)
    spec.rank_corr = np.array([[1.0, 0.9], [0.8, 1.0]])  # asymmetric
    with pytest.raises(ScenarioError, match="symmetric"):
        synth_scenarios(spec, 100, seed=0)
    spec.rank_corr = np.array([[1.0, 1.2], [1.2, 1.0]])  # not PD
    with pytest.raises(ScenarioError, match="positive definite"):
        synth_scenarios(spec, 100, seed=0)


@given(seed=st.integers(min_value=0, max_value=2**31), n=st.integers(min_value=3, max_value=40))
@settings(max_examples=20, deadline=None)
def test_lhs_has_one_point_per_stratum(seed, n):
    bounds = sc.ControlBounds(
        names=["a", "b"], lo=np.array([0.0, -1.0]), hi=np.array([2.0, 1.0])
    )
    pts = lhs_sample(bounds, n, seed=seed)
    assert pts.shape == (n, 2)
    for j in range(2):
        cells = np.floor((pts[:, j] - bounds.lo[j]) / (bounds.hi[j] - bounds.lo[j]) * n)
        assert sorted(cells.astype(int)) == list(range(n))


def test_control_bounds_layout(case14):
    b = control_bounds(case14)
    assert b.dim == case14.n_gen + case14.vset_bus_index.size
    assert b.names[0].startswith("pg0@bus1")
    assert all(n.startswith("v@bus") for n in b.names[case14.n_gen :])
    assert np.all(b.lo < b.hi)


def test_build_vsi_dataset_collects_and_rejects(case14):
    bounds = control_bounds(case14)
    y = lhs_sample(bounds, 40, seed=3)
    # rescale active power so total generation tracks the load
    disp = pf.base_dispatch(case14)
    y[:, : case14.n_gen] = disp.p_g[None, :] * np.random.default_rng(0).uniform(
        0.9, 1.1, size=(40, case14.n_gen)
    )
    y[5, : case14.n_gen] *= 150.0  # beyond static transfer capability, must be rejected
    ds = build_vsi_dataset(case14, y, xi={9: 0.1})
    assert ds.accepted + ds.rejected == 40
    assert ds.rejected >= 1
    assert ds.z.shape == (ds.accepted, 2 * case14.n_bus - 1)
    assert np.all(ds.sigma > 0)
    assert len(ds.col_labels) == 2 * case14.n_bus - 1
    # deterministic rebuild, bit for bit
    ds2 = build_vsi_dataset(case14, y, xi={9: 0.1})
    assert ds.z.tobytes() == ds2.z.tobytes()
    assert ds.sigma.tobytes() == ds2.sigma.tobytes()


def test_build_vsi_dataset_all_infeasible_raises(case14):
    disp = pf.base_dispatch(case14)
    y = np.concatenate([disp.p_g * 150.0, np.ones(case14.vset_bus_index.size)])
    with pytest.raises(ScenarioError, match="empty dataset"):
        build_vsi_dataset(case14, y[None, :])


def test_vsi_dataset_csv_round_trip(case14, tmp_path):
    bounds = control_bounds(case14)
    disp = pf.base_dispatch(case14)
    y = lhs_sample(bounds, 10, seed=5)
    y[:, : case14.n_gen] = disp.p_g[None, :]
    ds = build_vsi_dataset(case14, y)
    f = tmp_path / "ds.csv"
    sc.write_vsi_dataset(f, ds)
    back = sc.load_vsi_dataset(f)
    assert np.array_equal(back.z, ds.z)
    assert np.array_equal(back.sigma, ds.sigma)
    assert back.col_labels == ds.col_labels
    assert back.accepted == ds.accepted
    assert back.rejected == ds.rejected

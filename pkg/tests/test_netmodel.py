import importlib.resources as resources
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vscopf import netmodel
from vscopf.netmodel import (
    BranchRecord,
    BusRecord,
    CaseError,
    GenRecord,
    NetworkCase,
    build_admittance,
    parse_case_text,
    serialize_case,
    validate_case,
)

TWO_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0    0   0 0 1 1.0 0 0 1 1.1 0.9;
    2 1 50.0 10. 0 0 1 1.0 0 0 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 100 -100 1.0 100 1 200 0;
];
mpc.branch = [
    1 2 0.01 0.1 0.0 0 0 0 0 0 1 -360 360;
];
"""


def test_parse_two_bus():
    case = parse_case_text(TWO_BUS)
    assert case.n_bus == 2
    assert case.n_branch == 1
    assert case.n_gen == 1
    assert case.buses[0].bus_type == "ref"
    assert case.buses[1].bus_type == "PQ"
    # MW converted to per-unit on the 100 MVA base
    assert case.buses[1].p_load == pytest.approx(0.5)
    assert case.buses[1].q_load == pytest.approx(0.1)


def test_parse_bundled_case14():
    text = (resources.files("vscopf") / "cases" / "case14.m").read_text()
    case = parse_case_text(text)
    assert case.n_bus == 14
    assert case.n_branch == 20
    assert case.n_gen == 5


def test_parse_bundled_case30():
    text = (resources.files("vscopf") / "cases" / "case30.m").read_text()
    case = parse_case_text(text)
    assert case.n_bus == 30
    assert case.n_branch == 41
    assert case.n_gen == 6


def test_malformed_row_reports_line_number():
    bad = TWO_BUS.replace("1 2 0.01 0.1 0.0", "1 2 bogus 0.1 0.0")
    with pytest.raises(CaseError, match=r"line \d+.*bogus"):
        parse_case_text(bad)


def test_missing_reference_bus_rejected():
    no_ref = TWO_BUS.replace("1 3 0", "1 2 0")
    with pytest.raises(CaseError, match="reference"):
        parse_case_text(no_ref)


def test_duplicate_bus_id_rejected():
    dup = TWO_BUS.replace("2 1 50.0", "1 1 50.0")
    with pytest.raises(CaseError, match="duplicate"):
        parse_case_text(dup)


def test_branch_to_unknown_bus_rejected():
    bad = TWO_BUS.replace("1 2 0.01", "1 7 0.01")
    with pytest.raises(CaseError, match="unknown bus"):
        parse_case_text(bad)


def test_zero_impedance_branch_rejected():
    bad = TWO_BUS.replace("1 2 0.01 0.1", "1 2 0.0 0.0")
    with pytest.raises(CaseError, match=r"line \d+.*zero impedance"):
        parse_case_text(bad)


def test_json_syntax_error_reports_line():
    with pytest.raises(CaseError, match=r"line \d+"):
        parse_case_text('{\n "base_mva": 100,,\n}')


def _two_bus_case(x=0.1, b=0.0, tap=1.0):
    buses = [
        BusRecord(id=1, bus_type="ref", p_load=0.0, q_load=0.0, v_min=0.9, v_max=1.1),
        BusRecord(id=2, bus_type="PQ", p_load=0.5, q_load=0.1, v_min=0.9, v_max=1.1),
    ]
    branches = [BranchRecord(from_bus=1, to_bus=2, r=0.0, x=x, b=b, tap=tap)]
    gens = [GenRecord(bus=1, p_min=0, p_max=2, q_min=-1, q_max=1, v_setpoint=1.0)]
    return NetworkCase(base_mva=100.0, buses=buses, branches=branches, generators=gens)


def test_admittance_single_reactive_line():
    # series z = j0.1 gives y = -j10, so the off-diagonal entry is +j10
    Y = build_admittance(_two_bus_case())
    assert Y.G[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert Y.B[0, 1] == pytest.approx(10.0)
    assert Y.B[1, 0] == pytest.approx(10.0)
    assert Y.B[0, 0] == pytest.approx(-10.0)


def test_admittance_branch_addition_touches_four_positions():
    text = (resources.files("vscopf") / "cases" / "case14.m").read_text()
    case = parse_case_text(text)
    Y0 = build_admittance(case)
    grown = NetworkCase(
        base_mva=case.base_mva,
        buses=case.buses,
        branches=case.branches + [BranchRecord(from_bus=4, to_bus=13, r=0.02, x=0.2, b=0.01)],
        generators=case.generators,
    )
    Y1 = build_admittance(grown)
    i, j = case.index_of(4), case.index_of(13)
    diff = (np.abs(Y1.G - Y0.G) > 0) | (np.abs(Y1.B - Y0.B) > 0)
    changed = {tuple(pos) for pos in np.argwhere(diff)}
    assert changed == {(i, j), (j, i), (i, i), (j, j)}
    off_diag = {p for p in changed if p[0] != p[1]}
    assert off_diag == {(i, j), (j, i)}


def test_validate_clean_case_has_no_diagnostics():
    assert validate_case(_two_bus_case()) == []


def test_validate_names_offending_components():
    case = _two_bus_case()
    case.buses[1].v_min = 1.2  # above v_max
    case.generators[0].q_min = 2.0  # above q_max
    diags = validate_case(case)
    assert len(diags) == 2
    assert any("bus 2" in d.message for d in diags)
    assert any("bus 1" in d.message for d in diags)


finite = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False, allow_infinity=False)
positive = st.floats(min_value=0.01, max_value=0.5, allow_nan=False, allow_infinity=False)


@st.composite
def network_cases(draw):
    n = draw(st.integers(min_value=2, max_value=6))
    ids = draw(st.permutations(list(range(1, 3 * n)))).copy()[:n]
    buses = []
    for k, bid in enumerate(ids):
        lo = draw(st.floats(min_value=0.8, max_value=0.95))
        hi = draw(st.floats(min_value=1.05, max_value=1.2))
        buses.append(
            BusRecord(
                id=bid,
                bus_type="ref" if k == 0 else draw(st.sampled_from(["PQ", "PV"])),
                p_load=draw(finite),
                q_load=draw(finite),
                v_min=lo,
                v_max=hi,
                g_shunt=draw(finite),
                b_shunt=draw(finite),
            )
        )
    branches = [
        BranchRecord(
            from_bus=ids[k],
            to_bus=ids[k + 1],
            r=draw(positive),
            x=draw(positive),
            b=draw(positive),
            tap=draw(st.sampled_from([1.0, 0.95, 1.05])),
            i_max=draw(st.sampled_from([math.inf, 1.5, 2.0])),
        )
        for k in range(n - 1)
    ]
    gens = []
    for k, bid in enumerate(ids):
        if buses[k].bus_type == "PQ":
            continue
        pmin = draw(st.floats(min_value=0.0, max_value=0.5))
        qmin = draw(st.floats(min_value=-1.0, max_value=0.0))
        gens.append(
            GenRecord(
                bus=bid,
                p_min=pmin,
                p_max=pmin + draw(positive),
                q_min=qmin,
                q_max=qmin + draw(positive),
                v_setpoint=draw(st.floats(min_value=0.95, max_value=1.05)),
                p_start=pmin,
                cost=(draw(positive), draw(positive), 0.0),
            )
        )
    return NetworkCase(base_mva=100.0, buses=buses, branches=branches, generators=gens)


@given(case=network_cases())
@settings(max_examples=40, deadline=None)
def test_serialize_parse_round_trip(case):
    assert parse_case_text(serialize_case(case)) == case

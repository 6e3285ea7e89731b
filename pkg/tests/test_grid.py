import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofoflex.fixtures import WPP_LABEL, WPP_RATING_MW, cigre_mv_fixture, lv_feeder_fixture
from ofoflex.grid import (
    PQ,
    SLACK,
    Actuator,
    Branch,
    Bus,
    GridError,
    Network,
    build_admittance,
    from_pu,
    load_network,
    network_from_dict,
    network_to_dict,
    replace_network,
    save_network,
    to_pu,
)
from ofoflex.powerflow import solve_power_flow


def two_bus(z=0.1j, b_shunt=0.0, tap=1.0, is_transformer=False):
    return Network(
        buses=(Bus(0, SLACK), Bus(1, PQ)),
        branches=(Branch(0, 1, z, b_shunt=b_shunt, tap=tap, is_transformer=is_transformer),),
        actuators=(),
        injections=(0j, 0j),
    )


def test_two_bus_admittance():
    Y = build_admittance(two_bus())
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-14)


def test_unconnected_pairs_are_zero():
    Y = build_admittance(cigre_mv_fixture())
    assert Y[2, 12] == 0
    assert Y[1, 14] == 0


def test_empty_branch_list_rejected():
    with pytest.raises(GridError):
        Network(buses=(Bus(0, SLACK), Bus(1, PQ)), branches=(), actuators=(), injections=(0j, 0j))


def test_zero_impedance_rejected():
    with pytest.raises(GridError):
        Branch(0, 1, 0j)


def test_fixture_row_sums_equal_shunt_totals():
    net = cigre_mv_fixture()
    Y = build_admittance(net)
    expected = np.array([b.shunt for b in net.buses], dtype=complex)
    for br in net.branches:
        yff, yft, ytf, ytt = br.admittances()
        expected[br.from_bus] += yff + yft
        expected[br.to_bus] += ytt + ytf
    np.testing.assert_allclose(Y.sum(axis=1), expected, atol=1e-10)
    # untapped lines contribute only their charging
    line_only = [i for i in range(3, 12) if i not in (7,)]
    for i in line_only:
        charging = sum(
            0.5j * br.b_shunt for br in net.branches if i in (br.from_bus, br.to_bus)
        )
        assert Y[i].sum() == pytest.approx(charging, abs=1e-10)


def test_admittance_symmetric_without_taps():
    Y = build_admittance(cigre_mv_fixture())
    np.testing.assert_allclose(Y, Y.T, atol=1e-12)


def test_tap_breaks_symmetry_only_through_off_nominal_ratio():
    Y = build_admittance(lv_feeder_fixture(0))
    assert Y[0, 1] == pytest.approx(Y[1, 0])
    assert Y[0, 0] != pytest.approx(Y[1, 1])


def _permute(net: Network, perm: list[int]) -> Network:
    """Relabel buses so that old bus i becomes perm[i]."""
    inv = np.argsort(perm)
    buses = tuple(
        Bus(new, net.buses[inv[new]].kind, shunt=net.buses[inv[new]].shunt) for new in range(net.n_bus)
    )
    branches = tuple(
        Branch(perm[b.from_bus], perm[b.to_bus], b.z, b.b_shunt, b.s_max, b.is_transformer, b.tap)
        for b in net.branches
    )
    inj = tuple(net.injections[inv[new]] for new in range(net.n_bus))
    return Network(buses=buses, branches=branches, actuators=(), injections=inj)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(15))))
def test_admittance_permutation_equivariant(perm):
    net = replace_network(cigre_mv_fixture(), actuators=(), pcc_branch=None)
    Y = build_admittance(net)
    Yp = build_admittance(_permute(net, perm))
    P = np.zeros((15, 15))
    P[perm, np.arange(15)] = 1.0
    np.testing.assert_allclose(Yp, P @ Y @ P.T, atol=1e-12)


@settings(max_examples=200)
@given(
    st.floats(min_value=-1e4, max_value=1e4, allow_nan=False),
    st.floats(min_value=0.01, max_value=1e3),
)
def test_per_unit_round_trip(mw, base):
    back = from_pu(to_pu(mw, base), base)
    assert back == pytest.approx(mw, rel=1e-12, abs=1e-300)


def test_cigre_fixture_contract():
    net = cigre_mv_fixture()
    assert sum(b.kind == SLACK for b in net.buses) == 1
    assert net.n_bus == 15
    wpp = net.actuators[net.actuator_index(WPP_LABEL)]
    assert wpp.bus == 7
    assert wpp.p_max == pytest.approx(WPP_RATING_MW / net.base_mva)
    for b in net.buses:
        assert b.v_min == pytest.approx(0.95 * b.v_nominal)
        assert b.v_max == pytest.approx(1.05 * b.v_nominal)
    sol = solve_power_flow(net, net.nominal_inputs())
    assert sol.mismatch_norm < 1e-8


def test_cigre_base_scaling_preserves_voltages():
    a = solve_power_flow(cigre_mv_fixture(1.0), cigre_mv_fixture(1.0).nominal_inputs())
    net10 = cigre_mv_fixture(10.0)
    b = solve_power_flow(net10, net10.nominal_inputs())
    np.testing.assert_allclose(a.vm, b.vm, atol=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_lv_fixture_contract(seed):
    net = lv_feeder_fixture(seed)
    assert net.n_bus <= 10
    assert net.n_actuators >= 2
    assert net.pcc_branch is not None
    br = net.branches[net.pcc_branch]
    assert net.slack in (br.from_bus, br.to_bus)
    assert sum(a.p_max for a in net.actuators) > 0
    sol = solve_power_flow(net, net.nominal_inputs())
    vm = sol.vm[net.pq_buses]
    assert np.all(vm >= 0.95) and np.all(vm <= 1.05)


def test_lv_fixture_is_deterministic():
    assert network_to_dict(lv_feeder_fixture(3)) == network_to_dict(lv_feeder_fixture(3))
    assert network_to_dict(lv_feeder_fixture(3)) != network_to_dict(lv_feeder_fixture(4))


def test_actuator_invariants():
    with pytest.raises(GridError):
        Actuator(1, 0.0, 1.0, 0.0, 0.0, p_nominal=2.0)
    with pytest.raises(GridError):
        Actuator(1, 0.0, 1.0, 0.5, -0.5)


def test_actuator_on_slack_rejected():
    net = two_bus()
    with pytest.raises(GridError):
        replace_network(net, actuators=(Actuator(0, 0, 1, -1, 1),))


def test_two_slacks_rejected():
    with pytest.raises(GridError):
        Network(
            buses=(Bus(0, SLACK), Bus(1, SLACK)),
            branches=(Branch(0, 1, 0.1j),),
            actuators=(),
            injections=(0j, 0j),
        )


def test_disconnected_rejected():
    with pytest.raises(GridError, match="not connected"):
        Network(
            buses=(Bus(0, SLACK), Bus(1, PQ), Bus(2, PQ), Bus(3, PQ)),
            branches=(Branch(0, 1, 0.1j), Branch(2, 3, 0.1j)),
            actuators=(),
            injections=(0j,) * 4,
        )


def test_json_round_trip(tmp_path):
    net = cigre_mv_fixture()
    path = tmp_path / "net.json"
    save_network(net, path)
    back = load_network(path)
    assert network_to_dict(back) == network_to_dict(net)
    np.testing.assert_allclose(build_admittance(back), build_admittance(net), atol=1e-15)


def test_shipped_network_file_matches_fixture():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "networks" / "cigre_mv.json"
    assert network_to_dict(load_network(path)) == network_to_dict(cigre_mv_fixture())


def test_json_errors_name_the_problem(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"buses": [\n  {"id": 0,}\n]}')
    with pytest.raises(GridError, match=r"line 2"):
        load_network(bad)
    with pytest.raises(GridError, match="not found"):
        load_network(tmp_path / "missing.json")
    data = network_to_dict(cigre_mv_fixture())
    del data["branches"][0]["x"]
    with pytest.raises(GridError, match=r"branches\[0\].*'x'"):
        network_from_dict(json.loads(json.dumps(data)))

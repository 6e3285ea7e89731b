"""
Built-in benchmark networks.

``cigre_mv_fixture`` follows the topology of the CIGRE MV benchmark with its
switches S1-S3 open (two radial feeders behind two 110/20 kV transformers).
Line data use the benchmark's cable/overhead-line types; loads and DER ratings
are chosen for this package and are not the published benchmark values. Buses
keep the benchmark numbering, so the wind plant sits at bus 7 and the LV
coupling points at buses 5 and 8.

``lv_feeder_fixture`` draws a small radial 0.4 kV feeder behind a
0.4 MVA transformer from a seeded RNG.
"""

from __future__ import annotations

import numpy as np

from .grid import PQ, SLACK, Actuator, Branch, Bus, Network

MV_KV = 20.0
LV_KV = 0.4
FREQ = 50.0

# (from, to, length_km, kind); open-switch branches 6-7, 11-4, 14-8 omitted
_MV_LINES = [
    (1, 2, 2.82, "cable"),
    (2, 3, 4.42, "cable"),
    (3, 4, 0.61, "cable"),
    (4, 5, 0.56, "cable"),
    (5, 6, 1.54, "cable"),
    (7, 8, 1.67, "cable"),
    (8, 9, 0.32, "cable"),
    (9, 10, 0.77, "cable"),
    (10, 11, 0.33, "cable"),
    (3, 8, 1.30, "cable"),
    (12, 13, 4.89, "ohl"),
    (13, 14, 2.99, "ohl"),
]

# ohm/km, ohm/km, nF/km, ampacity kA
_LINE_TYPES = {
    "cable": (0.501, 0.716, 151.1, 0.145),
    "ohl": (0.510, 0.366, 10.09, 0.195),
}

# MW, Mvar consumed
_MV_LOADS = {
    1: (12.0, 3.6),
    3: (0.53, 0.14),
    4: (0.44, 0.09),
    5: (0.74, 0.15),
    6: (0.55, 0.11),
    7: (0.09, 0.03),
    8: (0.59, 0.12),
    9: (0.64, 0.21),
    10: (0.56, 0.12),
    11: (0.33, 0.07),
    12: (12.0, 3.9),
    13: (0.04, 0.01),
    14: (0.58, 0.16),
}

# label, bus, p_min, p_max, q_min, q_max, p_nominal  [MW / Mvar]
_MV_DER = [
    ("PV3", 3, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("PV4", 4, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("PV5", 5, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("PV6", 6, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("WPP7", 7, 0.0, 1.5, -0.6, 0.6, 1.2),
    ("PV8", 8, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("PV9", 9, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("PV10", 10, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("PV11", 11, 0.0, 0.6, -0.3, 0.3, 0.4),
    ("BAT5", 5, -0.6, 0.6, -0.4, 0.4, 0.0),
    ("FC5", 5, 0.0, 0.3, -0.15, 0.15, 0.15),
    ("BAT10", 10, -0.4, 0.4, -0.3, 0.3, 0.0),
    ("FC10", 10, 0.0, 0.3, -0.15, 0.15, 0.15),
    ("FC9", 9, 0.0, 0.4, -0.2, 0.2, 0.2),
    ("CHP9", 9, 0.0, 0.8, -0.4, 0.4, 0.5),
    ("FL4", 4, -0.6, -0.2, -0.1, 0.1, -0.4),
    ("FL11", 11, -0.6, -0.2, -0.1, 0.1, -0.4),
    ("BAT6", 6, -0.4, 0.4, -0.3, 0.3, 0.0),
    ("BAT8", 8, -0.4, 0.4, -0.3, 0.3, 0.0),
    # electrolyser, unity power factor
    ("EL3", 3, -0.4, 0.0, 0.0, 0.0, -0.2),
]

WPP_LABEL = "WPP7"
WPP_RATING_MW = 1.5


def _line(f, t, length, kind, kv, base_mva) -> Branch:
    r, x, c_nf, amp = _LINE_TYPES[kind]
    zbase = kv**2 / base_mva
    z = complex(r * length, x * length) / zbase
    b = 2 * np.pi * FREQ * c_nf * 1e-9 * length * zbase
    s_max = np.sqrt(3) * kv * amp / base_mva
    return Branch(f, t, z, b_shunt=b, s_max=float(s_max), name=f"L{f}-{t}")


def _trafo(f, t, s_mva, uk, ur, base_mva, tap=1.0) -> Branch:
    z = complex(ur, np.sqrt(uk**2 - ur**2)) * base_mva / s_mva
    return Branch(
        f, t, z, s_max=s_mva / base_mva, is_transformer=True, tap=tap, name=f"T{f}-{t}"
    )


def cigre_mv_fixture(base_mva: float = 1.0) -> Network:
    """15-bus (HV slack + 14 MV buses) feeder network with left-feeder DER."""
    buses = [Bus(0, kind=SLACK, v_nominal=1.0, name="HV")]
    buses += [Bus(i, kind=PQ, name=f"MV{i}") for i in range(1, 15)]
    branches = [
        _trafo(0, 1, 25.0, 0.1201, 0.0016, base_mva),
        _trafo(0, 12, 25.0, 0.1201, 0.0016, base_mva),
    ]
    branches += [_line(f, t, ln, kind, MV_KV, base_mva) for f, t, ln, kind in _MV_LINES]
    inj = [0j] * 15
    for bus, (p, q) in _MV_LOADS.items():
        inj[bus] = -complex(p, q) / base_mva
    acts = [
        Actuator(
            bus=bus,
            p_min=pmin / base_mva,
            p_max=pmax / base_mva,
            q_min=qmin / base_mva,
            q_max=qmax / base_mva,
            p_nominal=pnom / base_mva,
            label=label,
        )
        for label, bus, pmin, pmax, qmin, qmax, pnom in _MV_DER
    ]
    return Network(
        buses=tuple(buses),
        branches=tuple(branches),
        actuators=tuple(acts),
        injections=tuple(inj),
        base_mva=base_mva,
        pcc_branch=0,
        name="cigre_mv",
    )


def lv_feeder_fixture(seed: int, base_mva: float = 1.0) -> Network:
    """Radial LV feeder (9 buses) behind a 0.4 MVA transformer.

    Bus 0 is the MV side of the transformer and the slack; the transformer is
    branch 0 and marks the PCC. The off-nominal tap lifts the LV voltage by
    3 %, as is common for load-dominated feeders.
    """
    rng = np.random.default_rng(seed)
    buses = [Bus(0, kind=SLACK, v_nominal=1.0, name="MV")]
    buses += [Bus(i, kind=PQ, name=f"LV{i}") for i in range(1, 9)]
    branches = [_trafo(0, 1, 0.4, 0.04, 0.01, base_mva, tap=0.97)]
    zbase = LV_KV**2 / base_mva
    # NAYY 4x150 SE
    r, x, amp = 0.208, 0.080, 0.270
    s_max = np.sqrt(3) * LV_KV * amp / base_mva
    edges = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (3, 7), (7, 8)]
    for f, t in edges:
        length = rng.uniform(0.04, 0.09)
        branches.append(
            Branch(f, t, complex(r, x) * length / zbase, s_max=float(s_max), name=f"L{f}-{t}")
        )
    inj = [0j]
    for _ in range(1, 9):
        p = rng.uniform(0.008, 0.025)
        inj.append(-complex(p, 0.25 * p) / base_mva)
    pv_buses = sorted(rng.choice(np.arange(2, 9), size=3, replace=False).tolist())
    acts = []
    for bus in pv_buses:
        cap = rng.uniform(0.035, 0.06)
        acts.append(
            Actuator(
                bus=int(bus),
                p_min=0.0,
                p_max=cap / base_mva,
                q_min=-0.015 / base_mva,
                q_max=0.015 / base_mva,
                p_nominal=0.5 * cap / base_mva,
                label=f"PV{bus}",
            )
        )
    acts.append(
        Actuator(
            bus=6,
            p_min=-0.03 / base_mva,
            p_max=0.03 / base_mva,
            q_min=-0.015 / base_mva,
            q_max=0.015 / base_mva,
            p_nominal=0.0,
            label="BAT6",
        )
    )
    return Network(
        buses=tuple(buses),
        branches=tuple(branches),
        actuators=tuple(acts),
        injections=tuple(inj),
        base_mva=base_mva,
        pcc_branch=0,
        name=f"lv_feeder_{seed}",
    )


FIXTURES = {
    "cigre_mv": lambda **kw: cigre_mv_fixture(**kw),
    "lv_feeder": lambda seed=0, **kw: lv_feeder_fixture(seed, **kw),
}

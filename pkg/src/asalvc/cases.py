"""Synthetic radial feeders.

The 123-bus feeder produced here is *synthetic*: it has the size, voltage
and power bases of the single-phase 123-bus benchmark used for the static
and dynamic studies, but its impedances, topology and DER placement are
generated, not the benchmark data.
"""

from __future__ import annotations

import numpy as np

from .network import NetworkCase

BASE_KV = 4.16
BASE_KVA = 100.0


def random_tree(n_bus: int, rng: np.random.Generator, p_extend: float = 0.6) -> list[int]:
    """Parent list for buses 1..n: extend the newest lateral or branch off."""
    parents = []
    for j in range(1, n_bus + 1):
        if j == 1 or rng.random() < p_extend:
            parents.append(j - 1)
        else:
            parents.append(int(rng.integers(0, j)))
    return parents


def make_synthetic_feeder(
    n_bus: int = 123,
    seed: int = 0,
    load_kw: float = 1.0,
    load_kvar: float = 0.5,
    der_kvar: float = 10.0,
    der_capacity_kva: float | None = None,
    ohm_per_mile: tuple[float, float] = (0.4576, 1.078),
    miles: tuple[float, float] = (0.02, 0.15),
    p_extend: float = 0.6,
    rx_spread: float = 0.0,
    slack_voltage: float = 1.0,
    name: str | None = None,
) -> NetworkCase:
    """Feeder with a DER at every bus.

    All segments share one overhead conductor (``ohm_per_mile`` as r, x) with
    lengths drawn from ``miles``; ``rx_spread`` perturbs the r/x ratio per line.

    With ``der_capacity_kva`` unset the DERs have a fixed ``+/- der_kvar``
    box; otherwise the box is derived from the inverter capacity.
    """
    rng = np.random.default_rng(seed)
    parents = random_tree(n_bus, rng, p_extend)
    z_base = BASE_KV**2 * 1000.0 / BASE_KVA
    length = rng.uniform(*miles, size=n_bus)
    ratio = rng.uniform(1.0 - rx_spread, 1.0 + rx_spread, size=n_bus)
    r = ohm_per_mile[0] * ratio * length / z_base
    x = ohm_per_mile[1] * length / z_base
    if der_capacity_kva is None:
        cap = np.full(n_bus, der_kvar / BASE_KVA)
        fixed = (True,) * n_bus
    else:
        cap = np.full(n_bus, der_capacity_kva / BASE_KVA)
        fixed = (False,) * n_bus
    return NetworkCase(
        labels=tuple(str(i) for i in range(n_bus + 1)),
        parent=tuple(parents),
        r=r,
        x=x,
        p_load=np.full(n_bus, -load_kw / BASE_KVA),
        q_load=np.full(n_bus, -load_kvar / BASE_KVA),
        der_capacity=cap,
        q_min=-cap,
        q_max=cap.copy(),
        fixed_limits=fixed,
        slack_voltage=slack_voltage,
        base_kv=BASE_KV,
        base_kva=BASE_KVA,
        name=name or f"synthetic-{n_bus}-s{seed}",
    )


def random_case(rng: np.random.Generator, n_bus: int | None = None, q_bound: float | None = None):
    """Small random per-unit case for property tests (loads and VAr box vary)."""
    if n_bus is None:
        n_bus = int(rng.integers(2, 41))
    parents = random_tree(n_bus, rng, p_extend=float(rng.uniform(0.2, 0.9)))
    x = rng.uniform(0.002, 0.02, n_bus)
    r = x * rng.uniform(0.3, 1.5, n_bus)
    p = -rng.uniform(0.0, 0.05, n_bus)
    q = -rng.uniform(0.0, 0.03, n_bus)
    qb = rng.uniform(0.005, 0.1, n_bus) if q_bound is None else np.full(n_bus, q_bound)
    return NetworkCase(
        labels=tuple(str(i) for i in range(n_bus + 1)),
        parent=tuple(parents),
        r=r,
        x=x,
        p_load=p,
        q_load=q,
        der_capacity=qb,
        q_min=-qb,
        q_max=qb.copy(),
        fixed_limits=(True,) * n_bus,
        name="random",
    )


# 24 h study: 50 kVA inverters whose VAr headroom shrinks with PV output,
# substation held at 1.02 pu and midday PV strong enough to push the
# uncontrolled feeder above 1.05 pu
DYNAMIC_CAPACITY_KVA = 50.0
DYNAMIC_SLACK_VOLTAGE = 1.02
DYNAMIC_PV_PEAK = 0.45


def make_dynamic_study(seed: int = 0, n_bus: int = 123, steps: int | None = None):
    """Feeder and 24 h timeline (6 s steps) for the continuous-change study."""
    from .simulator import make_scenario

    case = make_synthetic_feeder(
        n_bus=n_bus, seed=seed, der_capacity_kva=DYNAMIC_CAPACITY_KVA,
        slack_voltage=DYNAMIC_SLACK_VOLTAGE, name=f"synthetic-{n_bus}-s{seed}-dynamic",
    )
    timeline = make_scenario("continuous", case, {"pv_peak": DYNAMIC_PV_PEAK, "steps": steps}, seed=seed)
    return case, timeline

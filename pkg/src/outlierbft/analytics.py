"""Fault-tolerance analytics: operating points, sweeps, ROC curves.

The surface sweep replaces the subspace detector by an abstract one with a
given ``(P_d, P_fa)``: each malicious device is flagged with probability
``P_d`` and each clean one with ``P_fa``.  Every organization owns one
device and its peers turn Byzantine (silent) when that device is
malicious; flagged organizations are excluded and one PBFT round decides
whether the slot reaches consensus.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .config import ScenarioConfig, config_from_dict, validate_dict, _merge
from .consensus import ToleranceInputs, f_raw_max, pbft_quorum, tolerance_bound
from .detector import DetectorModel, detect
from .errors import ConfigError
from .netsim import corrupt_count, run_scenario
from .synth import make_rng

SUCCESS_LEVEL = 0.95
FAIL_ZONE = "fail zone"


@dataclass(frozen=True)
class OperatingPoint:
    p_d: float
    p_fa: float

    @property
    def f_det_at_third(self) -> float:
        return tolerance_bound(ToleranceInputs(1.0 / 3.0, self.p_d, self.p_fa))[0]

    @property
    def fail_zone(self) -> bool:
        return self.f_det_at_third > 1.0 / 3.0

    def f_det(self, f_raw: float) -> float:
        return tolerance_bound(ToleranceInputs(f_raw, self.p_d, self.p_fa))[0]

    @property
    def f_raw_max(self) -> float | None:
        return f_raw_max(self.p_d, self.p_fa)


def seed_for(base_seed: int, point: int, trial: int | None = None) -> int:
    """Point seed is ``base + point``; trials draw a 64-bit sub-seed from it."""
    s = (int(base_seed) + int(point)) % 2 ** 64
    if trial is None:
        return s
    st = np.random.SeedSequence(s, spawn_key=(int(trial),)).generate_state(2, np.uint32)
    return int(st[0]) | (int(st[1]) << 32)


def axis_values(spec) -> list[float]:
    """A list, or a ``{start, stop, step}`` table (stop inclusive)."""
    if isinstance(spec, Mapping):
        try:
            start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        except KeyError as exc:
            raise ConfigError(f"axis range needs start/stop/step, missing {exc}") from None
        if step <= 0 or stop < start:
            raise ConfigError("axis range needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        vals = [round(start + i * step, 12) for i in range(n)]
    elif isinstance(spec, (list, tuple)):
        vals = [float(v) if not isinstance(v, bool) else v for v in spec]
    else:
        vals = [spec]
    if not vals:
        raise ConfigError("axis ranges must be non-empty")
    return vals


# --- surface sweep (abstract detector) ----------------------------------------------------

@dataclass(frozen=True)
class SurfaceTopology:
    devices: int = 30
    regular_per_org: int = 0
    delay_low: float = 1.0
    delay_high: float = 5.0
    quorum_basis: str = "active"     # "active" | "original"

    def __post_init__(self):
        if self.devices < 1 or self.regular_per_org < 0:
            raise ConfigError("surface topology needs devices >= 1 and regular_per_org >= 0")
        if self.quorum_basis not in ("active", "original"):
            raise ConfigError(f"quorum_basis: unknown basis {self.quorum_basis!r}")


def surface_trial(p_d: float, p_fa: float, f_raw: float, topo: SurfaceTopology,
                  rng: np.random.Generator) -> dict:
    """One slot with an abstract detector; returns counts and the consensus result."""
    N = topo.devices
    per_org = 1 + topo.regular_per_org
    k = corrupt_count(f_raw, N)
    bad = np.zeros(N, dtype=bool)
    if k:
        bad[rng.choice(N, k, replace=False)] = True
    u = rng.random(N)
    flagged = np.where(bad, u < p_d, u < p_fa)
    org_of_peer = np.repeat(np.arange(N), per_org)
    n = N * per_org
    role = np.where(bad[org_of_peer], 2, np.where(flagged[org_of_peer], 1, 0)).astype(np.int64)
    trusted = (~flagged[org_of_peer]).astype(np.uint8)
    n_active = int(trusted.sum())
    basis = n_active if topo.quorum_basis == "active" else n
    success = False
    if n_active and (role == 0).any():
        q = pbft_quorum(basis)[1]
        delay = lambda shape: rng.uniform(topo.delay_low, topo.delay_high, shape)
        pp = delay(n)
        pd_, cd_ = delay((n, n)), delay((n, n))
        np.fill_diagonal(pd_, 0.0)
        np.fill_diagonal(cd_, 0.0)
        deadline = 10.0 * topo.delay_high
        _, committed = kernels.pbft_round(pp, 0.0, pd_, cd_, role, trusted, q, deadline)
        success = bool(np.all(np.isfinite(committed[role == 0])))
    missed = int(np.sum(bad & ~flagged))
    false_alarms = int(np.sum(~bad & flagged))
    return {
        "malicious": k,
        "flagged_malicious": int(np.sum(bad & flagged)),
        "false_alarms": false_alarms,
        "fault_fraction": (missed + false_alarms) / N,
        "active_peers": n_active,
        "byzantine_active": int(np.sum((role == 2) & (trusted == 1))),
        "success": success,
    }


@dataclass
class SweepResult:
    grid_header: list[str]
    grid_rows: list[list]
    surface_header: list[str]
    surface_rows: list[list]
    meta: dict = field(default_factory=dict)


def _fmt_opt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def sweep_surface(p_d_values: Sequence[float], p_fa_values: Sequence[float], f_raw_values: Sequence[float],
                  trials: int, seed: int, topo: SurfaceTopology = SurfaceTopology(), workers: int = 1,
                  level: float = SUCCESS_LEVEL) -> SweepResult:
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    for v in (*p_d_values, *p_fa_values, *f_raw_values):
        if not 0.0 <= v <= 1.0:
            raise ConfigError("probabilities and F_raw must lie in [0, 1]")
    cells = [(pd, pf) for pd in p_d_values for pf in p_fa_values]
    f_sorted = sorted(f_raw_values)
    points = [(c, f) for c in range(len(cells)) for f in range(len(f_sorted))]

    def run_point(idx: int):
        c, fi = points[idx]
        pd, pf = cells[c]
        out = []
        for t in range(trials):
            rng = make_rng(seed_for(seed, idx), t)
            out.append(surface_trial(pd, pf, f_sorted[fi], topo, rng))
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run_point, range(len(points))))
    else:
        results = [run_point(i) for i in range(len(points))]

    grid_header = ["point", "trial", "p_d", "p_fa", "f_raw", "malicious", "flagged_malicious", "false_alarms",
                   "fault_fraction", "active_peers", "byzantine_active", "success"]
    grid_rows = []
    rate = {}
    for idx, trial_rows in enumerate(results):
        c, fi = points[idx]
        pd, pf = cells[c]
        for t, r in enumerate(trial_rows):
            grid_rows.append([idx, t, pd, pf, f_sorted[fi], r["malicious"], r["flagged_malicious"], r["false_alarms"],
                              r["fault_fraction"], r["active_peers"], r["byzantine_active"], r["success"]])
        rate[(c, fi)] = sum(r["success"] for r in trial_rows) / trials
    surface_header = ["p_d", "p_fa", "f_det_at_third", "zone", "analytic_f_raw_max", "empirical_f_raw_max",
                      "abs_diff"]
    surface_rows = []
    for c, (pd, pf) in enumerate(cells):
        op = OperatingPoint(pd, pf)
        ok = [f_sorted[fi] for fi in range(len(f_sorted)) if rate[(c, fi)] >= level]
        emp = max(ok) if ok else None
        ana = op.f_raw_max
        diff = abs(ana - emp) if ana is not None and emp is not None else None
        surface_rows.append([pd, pf, op.f_det_at_third, FAIL_ZONE if op.fail_zone else "ok", ana, emp, diff])
    return SweepResult(grid_header, grid_rows, surface_header, surface_rows,
                       {"mode": "surface", "trials": trials, "seed": seed, "level": level,
                        "quorum_basis": topo.quorum_basis, "devices": topo.devices})


def agreement_fraction(result: SweepResult, tol: float = 0.05) -> float:
    """Share of cells whose empirical and analytic max F_raw agree within ``tol``.

    Cells where both sides are empty count as agreeing; one-sided ones do not.
    """
    i_a = result.surface_header.index("analytic_f_raw_max")
    i_e = result.surface_header.index("empirical_f_raw_max")
    good = 0
    for row in result.surface_rows:
        a, e = row[i_a], row[i_e]
        if a is None and e is None:
            good += 1
        elif a is not None and e is not None and abs(a - e) <= tol + 1e-12:
            good += 1
    return good / len(result.surface_rows) if result.surface_rows else 0.0


# --- scenario sweep (full simulator) -------------------------------------------------------

_SCENARIO_AXES = {
    "malicious_fraction": ("adversary", "malicious_fraction"),
    "f_raw": ("adversary", "malicious_fraction"),
    "p_fa": ("detector", "p_fa"),
    "epsilon": ("detector", "epsilon"),
    "magnitude": ("adversary", "magnitude"),
    "orgs": ("topology", "orgs"),
    "endorsing_peers": ("topology", "endorsing_peers"),
    "regular_peers": ("topology", "regular_peers"),
}


def sweep_scenarios(base: Mapping, axes: Mapping[str, Sequence], trials: int, seed: int,
                    workers: int = 1) -> SweepResult:
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    names = list(axes)
    for a in names:
        if a not in _SCENARIO_AXES:
            raise ConfigError(f"axes: unknown scenario axis {a!r} (known: {', '.join(sorted(_SCENARIO_AXES))})")
    grids = [list(axes[a]) for a in names]
    combos = [()]
    for g in grids:
        combos = [c + (v,) for c in combos for v in g]
    base = validate_dict(base)

    def run_point(idx: int):
        over: dict = {}
        for a, v in zip(names, combos[idx]):
            sec, key = _SCENARIO_AXES[a]
            if key in ("orgs", "endorsing_peers", "regular_peers"):
                v = int(v)
            over.setdefault(sec, {})[key] = v
        if "orgs" in names and "endorsing_peers" not in names:
            over.setdefault("topology", {}).setdefault("endorsing_peers", over["topology"]["orgs"])
        out = []
        for t in range(trials):
            raw = _merge(base, over)
            raw = _merge(raw, {"scenario": {"seed": seed_for(seed, idx, t)}, "run": {"trace": False, "workers": 1}})
            cfg = config_from_dict(raw)
            out.append(run_scenario(cfg).summary)
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run_point, range(len(combos))))
    else:
        results = [run_point(i) for i in range(len(combos))]
    grid_header = ["point", "trial", *names, "p_d", "p_fa", "success_rate", "mean_fault_fraction",
                   "mean_byzantine_ratio", "f_det_bound"]
    grid_rows, surface_rows = [], []
    for idx, sums in enumerate(results):
        for t, s in enumerate(sums):
            grid_rows.append([idx, t, *combos[idx], s["p_d"], s["p_fa"], s["success_rate"],
                              s["mean_post_filter_fault_fraction"], s["mean_post_filter_byzantine_ratio"],
                              s["f_det_bound"]])
        rates = [s["success_rate"] or 0.0 for s in sums]
        surface_rows.append([idx, *combos[idx], sum(rates) / len(rates),
                             sum(1 for r in rates if r >= SUCCESS_LEVEL) / len(rates)])
    surface_header = ["point", *names, "mean_success_rate", "share_trials_at_level"]
    return SweepResult(grid_header, grid_rows, surface_header, surface_rows,
                       {"mode": "scenario", "trials": trials, "seed": seed})


_SWEEP_KEYS = {"schema", "mode", "trials", "seed", "workers", "level", "axes", "topology", "base"}


def run_sweep_spec(spec: Mapping, workers: int | None = None, seed: int | None = None) -> SweepResult:
    """Validate and run a sweep description (already parsed from TOML)."""
    for k in spec:
        if k not in _SWEEP_KEYS:
            raise ConfigError(f"unknown sweep key {k!r}")
    if spec.get("schema", 1) != 1:
        raise ConfigError("schema: unsupported sweep schema version")
    mode = spec.get("mode", "surface")
    trials = spec.get("trials", 100)
    if not isinstance(trials, int) or isinstance(trials, bool) or trials < 1:
        raise ConfigError("trials must be an integer >= 1")
    seed = spec.get("seed", 0) if seed is None else seed
    workers = spec.get("workers", 1) if workers is None else workers
    axes = spec.get("axes", {})
    if not isinstance(axes, Mapping):
        raise ConfigError("axes must be a table")
    if mode == "surface":
        for a in axes:
            if a not in ("p_d", "p_fa", "f_raw"):
                raise ConfigError(f"axes: unknown surface axis {a!r} (known: f_raw, p_d, p_fa)")
        topo_raw = dict(spec.get("topology", {}))
        for k in topo_raw:
            if k not in {f.name for f in dataclasses.fields(SurfaceTopology)}:
                raise ConfigError(f"unknown sweep key topology.{k!r}")
        topo = SurfaceTopology(**topo_raw)
        p_d = axis_values(axes.get("p_d", {"start": 0.0, "stop": 1.0, "step": 0.1}))
        p_fa = axis_values(axes.get("p_fa", {"start": 0.0, "stop": 0.5, "step": 0.05}))
        f_raw = axis_values(axes.get("f_raw", {"start": 0.0, "stop": 1.0, "step": 0.05}))
        return sweep_surface(p_d, p_fa, f_raw, trials, seed, topo, workers, spec.get("level", SUCCESS_LEVEL))
    if mode == "scenario":
        return sweep_scenarios(spec.get("base", {"preset": "fig1"}),
                               {a: axis_values(v) for a, v in axes.items()}, trials, seed, workers)
    raise ConfigError(f"mode: unknown sweep mode {mode!r}")


# --- ROC -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class RocPoint:
    multiplier: float
    p_d: float
    p_fa: float


def device_rates(model: DetectorModel, D: np.ndarray, labels: np.ndarray, multiplier: float = 1.0,
                 masked: bool = False) -> tuple[float | None, float | None]:
    """Device-level (P_d, P_fa) of ``model`` with thresholds scaled by ``multiplier``."""
    m = dataclasses.replace(model, thresholds=model.thresholds * multiplier) if multiplier != 1.0 else model
    names = model.layout.names
    tp = fn = fp = tn = 0
    for t in range(D.shape[1]):
        flagged = detect(m, D[:, t], masked=masked).flagged_devices
        for n, name in enumerate(names):
            hit = name in flagged
            if labels[t, n]:
                tp += hit
                fn += not hit
            else:
                fp += hit
                tn += not hit
    return (tp / (tp + fn) if tp + fn else None), (fp / (fp + tn) if fp + tn else None)


def roc_curve(model: DetectorModel, D: np.ndarray, labels: np.ndarray, multipliers: Iterable[float]) -> list[RocPoint]:
    """Literal projection residuals against ``multiplier * h``.

    The residuals do not depend on the thresholds, so both rates are
    nonincreasing in the multiplier.
    """
    Dn = (np.asarray(D, dtype=float) - model.norm_stats.mean[:, None]) / model.norm_stats.scale[:, None]
    U = model.span
    Z = np.abs(Dn - U @ np.linalg.solve(U.T @ U, U.T @ Dn))
    owner = model._owner
    n_dev = model.layout.device_count
    labels = np.asarray(labels, dtype=bool)
    out = []
    for m in multipliers:
        m = float(m)
        flagged = (Z > (model.thresholds[:, None] * m))
        dev_flag = np.zeros((n_dev, Z.shape[1]), dtype=bool)
        for n in range(n_dev):
            dev_flag[n] = flagged[owner == n].any(axis=0)
        dev_flag = dev_flag.T
        mal, clean = labels.sum(), (~labels).sum()
        p_d = float((dev_flag & labels).sum() / mal) if mal else 0.0
        p_fa = float((dev_flag & ~labels).sum() / clean) if clean else 0.0
        out.append(RocPoint(m, p_d, p_fa))
    return out


# --- tolerance-bound Monte-Carlo ----------------------------------------------------------

@dataclass(frozen=True)
class BoundCheck:
    f_raw: float
    slots: int
    p_d: float
    p_fa: float
    mean_fault_fraction: float
    bound: float

    @property
    def gap(self) -> float:
        return abs(self.mean_fault_fraction - self.bound)


def bound_config(f_raw: float, slots: int, seed: int, devices: int = 40, orgs: int = 4,
               magnitude: float = 1.5, p_fa: float = 0.05) -> ScenarioConfig:
    """Scenario for checking the tolerance bound against the full simulator."""
    return config_from_dict({
        "name": "bound-check",
        "scenario": {"slots": slots, "training_slots": 100, "seed": seed},
        "topology": {"devices": devices, "dims": 2, "orgs": orgs, "endorsing_peers": orgs},
        "data": {"rank": 5, "sigma": 0.01},
        "detector": {"enabled": True, "epsilon": 0.05, "p_fa": p_fa, "update": False, "window": 100},
        "adversary": {"malicious_fraction": f_raw, "model": "spike", "magnitude": magnitude,
                      "unit": "threshold", "persistence": "resample"},
        "run": {"engine": "kernel", "trace": False},
    })


def bound_montecarlo(f_raw: float, slots: int = 1000, seed: int = 0, **kw) -> BoundCheck:
    """Mean post-filter fault fraction vs the tolerance bound at the measured (P_d, P_fa)."""
    res = run_scenario(bound_config(f_raw, slots, seed, **kw))
    s = res.summary
    p_d = s["p_d"] if s["p_d"] is not None else 0.0
    p_fa = s["p_fa"] if s["p_fa"] is not None else 0.0
    bound = tolerance_bound(ToleranceInputs(s["f_raw"], p_d, p_fa))[0]
    return BoundCheck(f_raw, slots, p_d, p_fa, s["mean_post_filter_fault_fraction"], bound)

"""Scenario configuration: dataclasses, TOML loading and built-in presets.

Config files are TOML with a top-level ``schema = 1``.  Every section and
key is checked against the schema; unknown names are errors that name the
offending key.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError
from .fusion import DeviceLayout

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DelayModel:
    kind: str = "uniform"           # "fixed" | "uniform"
    low: float = 1.0
    high: float = 5.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ConfigError(f"network.delay: unknown delay model {self.kind!r}")
        if self.low < 0 or (self.kind == "uniform" and self.high < self.low):
            raise ConfigError("network.delay_low/delay_high: need 0 <= low <= high")

    @property
    def max_delay(self) -> float:
        return self.low if self.kind == "fixed" else self.high

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(shape, float(self.low))
        return rng.uniform(self.low, self.high, shape)


@dataclass(frozen=True)
class DetectorSettings:
    enabled: bool = True
    epsilon: float = 0.05
    p_fa: float = 0.05
    update: bool = True
    window: int = 100
    masked: bool = True


@dataclass(frozen=True)
class DataSettings:
    rank: int = 5
    sigma: float = 0.01
    heterogeneous: bool = True


@dataclass(frozen=True)
class AdversaryConfig:
    malicious_fraction: float = 0.0
    model: str = "spike"            # "spike" | "replace" | "drift"
    magnitude: float = 10.0
    unit: str = "threshold"         # "threshold" (h) | "scale" (feature std)
    replace_low: float = -10.0
    replace_high: float = 10.0
    drift_step: float = 1.0
    persistence: str = "fixed"      # "fixed" | "resample"
    byzantine_peers: tuple[str, ...] = ()
    byzantine_fraction: float = 0.0
    byzantine_malicious_orgs: bool = False
    byzantine_mode: str = "silent"  # "silent" | "equivocate"
    corrupt_endorsements: bool = False

    def __post_init__(self):
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ConfigError("adversary.malicious_fraction must lie in [0, 1]")
        if not 0.0 <= self.byzantine_fraction <= 1.0:
            raise ConfigError("adversary.byzantine_fraction must lie in [0, 1]")
        if self.model not in ("spike", "replace", "drift"):
            raise ConfigError(f"adversary.model: unknown corruption model {self.model!r}")
        if self.model == "spike" and not self.magnitude > 0:
            raise ConfigError("adversary.magnitude must be positive")
        if self.model == "replace" and self.replace_high < self.replace_low:
            raise ConfigError("adversary.replace_high must be >= replace_low")
        if self.unit not in ("threshold", "scale"):
            raise ConfigError(f"adversary.unit: unknown unit {self.unit!r}")
        if self.persistence not in ("fixed", "resample"):
            raise ConfigError(f"adversary.persistence: unknown mode {self.persistence!r}")
        if self.byzantine_mode not in ("silent", "equivocate"):
            raise ConfigError(f"adversary.byzantine_mode: unknown mode {self.byzantine_mode!r}")
        object.__setattr__(self, "byzantine_peers", tuple(self.byzantine_peers))


@dataclass(frozen=True)
class ScenarioConfig:
    layout: DeviceLayout
    device_orgs: tuple[str, ...]
    org_count: int
    endorsing_peers: int
    regular_peers: int = 0
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    data: DataSettings = field(default_factory=DataSettings)
    delay: DelayModel = field(default_factory=DelayModel)
    slots: int = 10
    training_slots: int = 100
    seed: int = 0
    timeout: float | None = None
    quarantine: int = 1
    compute_rate: float = 1e7        # simulated flops per time unit
    engine: str = "events"           # "events" | "kernel"
    trace: bool = True
    workers: int = 1
    name: str = "custom"

    def __post_init__(self):
        n = self.org_count
        if n < 1 or self.endorsing_peers < 1 or self.regular_peers < 0:
            raise ConfigError("topology: organization and endorsing-peer counts must be >= 1")
        if n > self.endorsing_peers:
            raise ConfigError("topology.endorsing_peers: every organization needs an endorsing peer (n <= m)")
        if len(self.device_orgs) != self.layout.device_count:
            raise ConfigError("topology.device_orgs: one organization per device required")
        orgs = set(org_ids(n))
        for o in self.device_orgs:
            if o not in orgs:
                raise ConfigError(f"topology.device_orgs: unknown organization {o!r}")
        if self.slots < 0:
            raise ConfigError("scenario.slots must be nonnegative")
        if self.training_slots < 10:
            raise ConfigError("scenario.training_slots must be >= 10 (detector calibration minimum)")
        if self.detector.window < 10:
            raise ConfigError("detector.window must be >= 10")
        if not 0 < self.detector.epsilon < 1 or not 0 < self.detector.p_fa < 1:
            raise ConfigError("detector.epsilon and detector.p_fa must lie in (0, 1)")
        if not 1 <= self.data.rank < self.layout.total_dim:
            raise ConfigError("data.rank must satisfy 1 <= rank < total feature count")
        if self.data.sigma < 0:
            raise ConfigError("data.sigma must be nonnegative")
        if self.quarantine < 1:
            raise ConfigError("scenario.quarantine must be >= 1")
        if self.engine not in ("events", "kernel"):
            raise ConfigError(f"run.engine: unknown engine {self.engine!r}")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.timeout is not None and not self.timeout > 0:
            raise ConfigError("network.timeout must be positive")
        if not self.compute_rate > 0:
            raise ConfigError("network.compute_rate must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("scenario.seed must be an unsigned 64-bit integer")

    @property
    def effective_timeout(self) -> float:
        return self.timeout if self.timeout is not None else 10.0 * max(self.delay.max_delay, 1e-9)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return config_to_dict(self)

    def hash(self) -> str:
        """Digest of everything that can change the output (worker count excluded)."""
        d = self.to_dict()
        d["run"].pop("workers", None)
        d["scenario"].pop("seed", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def org_ids(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"org{i:0{width}d}" for i in range(n)]


# --- dict <-> config ------------------------------------------------------------

_SECTIONS: dict[str, dict[str, type | tuple]] = {
    "scenario": {"slots": int, "training_slots": int, "seed": int, "quarantine": int},
    "topology": {"devices": int, "dims": (int, list), "device_names": list, "orgs": int,
                 "device_orgs": list, "endorsing_peers": int, "regular_peers": int},
    "data": {"rank": int, "sigma": float, "heterogeneous": bool},
    "detector": {"enabled": bool, "epsilon": float, "p_fa": float, "update": bool, "window": int,
                 "masked": bool},
    "adversary": {"malicious_fraction": float, "model": str, "magnitude": float, "unit": str,
                  "replace_low": float, "replace_high": float, "drift_step": float,
                  "persistence": str, "byzantine_peers": list, "byzantine_fraction": float,
                  "byzantine_malicious_orgs": bool, "byzantine_mode": str,
                  "corrupt_endorsements": bool},
    "network": {"delay": str, "delay_low": float, "delay_high": float, "timeout": float,
                "compute_rate": float},
    "run": {"engine": str, "trace": bool, "workers": int},
}
_TOP = {"schema", "name", "preset"}


def _check_type(path: str, value, kind) -> Any:
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if bool not in kinds and isinstance(value, bool):
        raise ConfigError(f"{path}: expected {'/'.join(k.__name__ for k in kinds)}, got bool")
    if not isinstance(value, kinds):
        raise ConfigError(f"{path}: expected {'/'.join(k.__name__ for k in kinds)}, got {type(value).__name__}")
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    return value


def validate_dict(raw: Mapping) -> dict:
    """Schema check; returns a normalized deep copy."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a table")
    out: dict = {}
    for key, value in raw.items():
        if key in _TOP:
            out[key] = value
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key}: expected a section")
        sec = {}
        for k, v in value.items():
            if k not in _SECTIONS[key]:
                raise ConfigError(f"unknown config key {key}.{k!r}")
            sec[k] = _check_type(f"{key}.{k}", v, _SECTIONS[key][k])
        out[key] = sec
    schema = out.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"schema: unsupported version {schema!r} (expected {SCHEMA_VERSION})")
    out["schema"] = SCHEMA_VERSION
    return out


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(raw: Mapping) -> ScenarioConfig:
    d = validate_dict(raw)
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (known: {', '.join(sorted(PRESETS))})")
        d = _merge(PRESETS[preset], d)
        d.pop("preset", None)
    sc, topo = d.get("scenario", {}), d.get("topology", {})
    net, run = d.get("network", {}), d.get("run", {})

    n_dev = topo.get("devices", 16)
    if n_dev < 1:
        raise ConfigError("topology.devices must be >= 1")
    dims = topo.get("dims", 1)
    dims = [dims] * n_dev if isinstance(dims, int) else list(dims)
    names = topo.get("device_names")
    if names is None:
        width = max(2, len(str(n_dev - 1)))
        names = [f"dev{i:0{width}d}" for i in range(n_dev)]
    if len(names) != n_dev or len(dims) != n_dev:
        raise ConfigError("topology.dims/device_names: one entry per device required")
    try:
        layout = DeviceLayout(tuple(str(x) for x in names), tuple(int(x) for x in dims))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"topology: {exc}") from None
    n_org = topo.get("orgs", n_dev)
    if n_org < 1:
        raise ConfigError("topology.orgs must be >= 1")
    ids = org_ids(n_org)
    dev_orgs = topo.get("device_orgs")
    if dev_orgs is None:
        dev_orgs = [ids[i % n_org] for i in range(n_dev)]
    else:
        dev_orgs = [ids[o] if isinstance(o, int) and not isinstance(o, bool) and 0 <= o < n_org else str(o)
                    for o in dev_orgs]
    try:
        adv = AdversaryConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in d.get("adversary", {}).items()})
        cfg = ScenarioConfig(
            layout=layout,
            device_orgs=tuple(dev_orgs),
            org_count=n_org,
            endorsing_peers=topo.get("endorsing_peers", n_org),
            regular_peers=topo.get("regular_peers", 0),
            detector=DetectorSettings(**d.get("detector", {})),
            adversary=adv,
            data=DataSettings(**d.get("data", {})),
            delay=DelayModel(net.get("delay", "uniform"), net.get("delay_low", 1.0), net.get("delay_high", 5.0)),
            slots=sc.get("slots", 10),
            training_slots=sc.get("training_slots", 100),
            seed=sc.get("seed", 0),
            timeout=net.get("timeout"),
            quarantine=sc.get("quarantine", 1),
            compute_rate=net.get("compute_rate", 1e7),
            engine=run.get("engine", "events"),
            trace=run.get("trace", True),
            workers=run.get("workers", 1),
            name=str(d.get("name", preset or "custom")),
        )
    except TypeError as exc:  # pragma: no cover - guarded by the schema
        raise ConfigError(str(exc)) from None
    return cfg


def config_to_dict(cfg: ScenarioConfig) -> dict:
    adv = dataclasses.asdict(cfg.adversary)
    adv["byzantine_peers"] = list(cfg.adversary.byzantine_peers)
    net = {"delay": cfg.delay.kind, "delay_low": float(cfg.delay.low), "delay_high": float(cfg.delay.high),
           "compute_rate": float(cfg.compute_rate)}
    if cfg.timeout is not None:
        net["timeout"] = float(cfg.timeout)
    return {
        "schema": SCHEMA_VERSION,
        "name": cfg.name,
        "scenario": {"slots": cfg.slots, "training_slots": cfg.training_slots, "seed": cfg.seed,
                     "quarantine": cfg.quarantine},
        "topology": {"devices": cfg.layout.device_count, "dims": list(cfg.layout.dims),
                     "device_names": list(cfg.layout.names), "orgs": cfg.org_count,
                     "device_orgs": list(cfg.device_orgs), "endorsing_peers": cfg.endorsing_peers,
                     "regular_peers": cfg.regular_peers},
        "data": dataclasses.asdict(cfg.data),
        "detector": dataclasses.asdict(cfg.detector),
        "adversary": adv,
        "network": net,
        "run": {"engine": cfg.engine, "trace": cfg.trace, "workers": cfg.workers},
    }


def load_config(path, overrides: Mapping | None = None) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if overrides:
        raw = _merge(raw, overrides)
    return config_from_dict(raw)


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --- presets --------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    # Sixteen single-device organizations, six of them compromised: their
    # application sends spiked data and both of their peers go silent.
    "fig1": {
        "name": "fig1",
        "scenario": {"slots": 200, "training_slots": 100, "seed": 1},
        "topology": {"devices": 16, "dims": 4, "orgs": 16, "endorsing_peers": 16, "regular_peers": 16},
        "data": {"rank": 5, "sigma": 0.01},
        "detector": {"enabled": True, "epsilon": 0.05, "p_fa": 0.01, "update": True, "window": 100},
        "adversary": {"malicious_fraction": 0.375, "model": "spike", "magnitude": 10.0, "unit": "threshold",
                      "persistence": "fixed", "byzantine_malicious_orgs": True, "byzantine_mode": "silent"},
        "network": {"delay": "uniform", "delay_low": 1.0, "delay_high": 5.0},
        "run": {"engine": "events", "trace": True, "workers": 1},
    },
    "baseline": {
        "name": "baseline",
        "scenario": {"slots": 20, "training_slots": 100, "seed": 0},
        "topology": {"devices": 16, "dims": 4, "orgs": 16, "endorsing_peers": 16, "regular_peers": 16},
        "data": {"rank": 5, "sigma": 0.01},
        "detector": {"enabled": False},
        "run": {"engine": "events"},
    },
    # Default desk-scale topology: 100 devices spread over 16 organizations.
    "desk": {
        "name": "desk",
        "scenario": {"slots": 50, "training_slots": 100, "seed": 0},
        "topology": {"devices": 100, "dims": 1, "orgs": 16, "endorsing_peers": 16, "regular_peers": 16},
        "data": {"rank": 5, "sigma": 0.01},
        "detector": {"enabled": True, "epsilon": 0.05, "p_fa": 0.01},
        "adversary": {"malicious_fraction": 0.1, "model": "spike", "magnitude": 10.0, "persistence": "resample"},
        "run": {"engine": "kernel", "trace": False},
    },
}

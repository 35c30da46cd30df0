"""``outlierbft`` command line: gen, train, detect, simulate, sweep, roc.

Exit codes are fixed for scripting: 0 success, 2 validation error,
3 data error, 4 internal assertion (including safety violations).
"""
from __future__ import annotations

import argparse
import io
import os
import sys
from typing import Mapping

import numpy as np

from . import __version__
from .analytics import axis_values, roc_curve, run_sweep_spec, _fmt_opt
from .config import PRESETS, config_from_dict, load_toml
from .detector import DetectorConfig, detect, load_model, save_model, train
from .errors import ConfigError, DataError, LedgerError, DimensionMismatchError
from .fusion import DeviceLayout, read_matrix_csv, write_matrix_csv
from .io_utils import atomic_write, csv_text, dump_json
from .netsim import run_scenario, write_run
from .synth import PRNG_NAME, LowRankSource, make_rng, plant_spikes, planted_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

U64_MAX = 2 ** 64 - 1


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, *parts) -> None:
        if not self.quiet:
            print(*parts)


def _section(raw: Mapping, name: str, allowed: Mapping[str, type]) -> dict:
    """Typed lookup of one TOML table; unknown keys are an error."""
    sec = raw.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"{name}: expected a section")
    out = {}
    for k, v in sec.items():
        if k not in allowed:
            raise ConfigError(f"unknown config key {name}.{k!r}")
        kind = allowed[k]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if (kind is not bool and isinstance(v, bool)) or not isinstance(v, kind):
            raise ConfigError(f"{name}.{k}: expected {getattr(kind, '__name__', kind)}")
        out[k] = v
    return out


def _load(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return load_toml(path)


def _only(raw: Mapping, sections: set[str]) -> None:
    for k in raw:
        if k not in sections:
            raise ConfigError(f"unknown config key {k!r}")


# --- gen -------------------------------------------------------------------------

_GEN_KEYS = {"devices": int, "dims": int, "slots": int, "rank": int, "sigma": float,
             "corrupt_fraction": float, "spike": float, "heterogeneous": bool, "seed": int}
_GEN_DEFAULTS = {"devices": 100, "dims": 1, "slots": 100, "rank": 5, "sigma": 0.01,
                 "corrupt_fraction": 0.0, "spike": 10.0, "heterogeneous": True, "seed": 0}


def write_labels_csv(path, layout: DeviceLayout, labels: np.ndarray) -> None:
    rows = [[int(x) for x in row] for row in labels]
    atomic_write(path, csv_text(["slot", *layout.names], [[t, *r] for t, r in enumerate(rows)]))


def cmd_gen(args, say) -> int:
    raw = _load(args.config)
    _only(raw, {"gen"})
    p = {**_GEN_DEFAULTS, **_section(raw, "gen", _GEN_KEYS)}
    for k in ("devices", "dims", "slots", "rank", "sigma", "corrupt_fraction", "spike"):
        v = getattr(args, k)
        if v is not None:
            p[k] = v
    if args.seed is not None:
        p["seed"] = args.seed
    if p["devices"] < 1 or p["dims"] < 1 or p["slots"] < 1:
        raise ConfigError("devices, dims and slots must be positive")
    b = p["devices"] * p["dims"]
    if not 1 <= p["rank"] < min(b, p["slots"]):
        raise ConfigError(f"rank must satisfy 1 <= rank < min(b, T) = {min(b, p['slots'])}, got {p['rank']}")
    layout = DeviceLayout.uniform(p["devices"], p["dims"])
    D, labels = planted_dataset(layout, p["slots"], p["rank"], p["sigma"], p["seed"],
                                p["corrupt_fraction"], p["spike"], p["heterogeneous"])
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    buf = io.StringIO()
    write_matrix_csv(buf, layout, D)
    atomic_write(os.path.join(out, "data.csv"), buf.getvalue())
    write_labels_csv(os.path.join(out, "labels.csv"), layout, labels)
    say(f"wrote {os.path.join(out, 'data.csv')} ({b} features x {p['slots']} slots, rank {p['rank']})")
    return EXIT_OK


# --- train / detect -----------------------------------------------------------------

_DET_KEYS = {"epsilon": float, "p_fa": float}


def cmd_train(args, say) -> int:
    raw = _load(args.config)
    _only(raw, {"detector"})
    p = {"epsilon": 0.05, "p_fa": 0.05, **_section(raw, "detector", _DET_KEYS)}
    if args.epsilon is not None:
        p["epsilon"] = args.epsilon
    if args.p_fa is not None:
        p["p_fa"] = args.p_fa
    cfg = DetectorConfig(p["epsilon"], p["p_fa"])
    layout, D = read_matrix_csv(args.data)
    model = train((layout, D), cfg)
    path = args.model_out or os.path.join(args.out or ".", "model.json")
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    save_model(model, path)
    h = model.thresholds
    say(f"rank {model.rank}")
    say(f"thresholds min {h.min():.6g} median {float(np.median(h)):.6g} max {h.max():.6g} (b={model.b})")
    say(f"model written to {path}")
    return EXIT_OK


DETECT_COLUMNS = ["slot", "flagged_devices", "max_residual_ratio"]


def cmd_detect(args, say) -> int:
    model = load_model(args.model)
    with open(args.data, encoding="utf-8", newline="") as fh:
        text = fh.read()
    rows = []
    if text.strip():
        layout, D = read_matrix_csv(io.StringIO(text))
        if layout != model.layout:
            raise DimensionMismatchError(
                f"data has {layout.total_dim} features over {layout.device_count} devices; "
                f"model expects {model.b} over {model.layout.device_count}")
        order = {n: i for i, n in enumerate(model.layout.names)}
        for t in range(D.shape[1]):
            rep = detect(model, D[:, t], masked=args.masked)
            flagged = ";".join(sorted(rep.flagged_devices, key=order.__getitem__))
            rows.append([t, flagged, repr(float(rep.max_residual_ratio))])
    text_out = csv_text(DETECT_COLUMNS, rows) if rows else ""
    if args.out:
        path = args.out if args.out.endswith(".csv") else os.path.join(args.out, "detections.csv")
        atomic_write(path, text_out)
        say(f"{len(rows)} slots, {sum(1 for r in rows if r[1])} with flags -> {path}")
    else:
        sys.stdout.write(text_out)
    return EXIT_OK


# --- simulate ------------------------------------------------------------------------

def cmd_simulate(args, say) -> int:
    raw = _load(args.config)
    if args.preset is not None:
        raw = {**raw, "preset": args.preset}
    if not raw:
        raise ConfigError("simulate needs --config or --preset")
    over: dict = {}
    if args.seed is not None:
        over.setdefault("scenario", {})["seed"] = args.seed
    if args.slots is not None:
        over.setdefault("scenario", {})["slots"] = args.slots
    if args.workers is not None:
        over.setdefault("run", {})["workers"] = args.workers
    for k, v in over.items():
        raw[k] = {**raw.get(k, {}), **v}
    cfg = config_from_dict(raw)
    result = run_scenario(cfg)
    d = write_run(result, args.out or "runs")
    s = result.summary
    say(f"{d}: {s['outcome']} ({s['success_count']}/{s['slots']} slots), "
        f"mean post-filter Byzantine ratio {_fmt_opt(s['mean_post_filter_byzantine_ratio'])}")
    return EXIT_OK


# --- sweep -----------------------------------------------------------------------------

def cmd_sweep(args, say) -> int:
    if args.config is None:
        raise ConfigError("sweep needs --config")
    spec = _load(args.config)
    res = run_sweep_spec(spec, workers=args.workers, seed=args.seed)
    out = args.out or "sweep"
    os.makedirs(out, exist_ok=True)
    fmt = lambda rows: [[_fmt_opt(x) for x in r] for r in rows]  # noqa: E731
    atomic_write(os.path.join(out, "grid.csv"), csv_text(res.grid_header, fmt(res.grid_rows)))
    atomic_write(os.path.join(out, "surface.csv"), csv_text(res.surface_header, fmt(res.surface_rows)))
    atomic_write(os.path.join(out, "sweep.json"), dump_json({**res.meta, "prng": PRNG_NAME}))
    say(f"{len(res.surface_rows)} cells, {len(res.grid_rows)} grid rows -> {out}")
    return EXIT_OK


# --- roc -------------------------------------------------------------------------------

# "large number of faulty devices": half the devices corrupted in every slot
_ROC_DATA = {"devices": int, "dims": int, "rank": int, "sigma": float, "train_slots": int,
             "test_slots": int, "corrupt_fraction": float, "spike": float, "heterogeneous": bool}
_ROC_DEFAULTS = {"devices": 50, "dims": 2, "rank": 5, "sigma": 0.01, "train_slots": 200,
                 "test_slots": 200, "corrupt_fraction": 0.5, "spike": 3.0, "heterogeneous": True}
# literal residuals of a half-corrupted slot sit far above h, so the default
# grid is geometric and reaches well past 1
_ROC_MULTIPLIERS = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0]


def cmd_roc(args, say) -> int:
    raw = _load(args.config)
    _only(raw, {"data", "detector", "roc", "seed"})
    p = {**_ROC_DEFAULTS, **_section(raw, "data", _ROC_DATA)}
    det = {"epsilon": 0.05, "p_fa": 0.05, **_section(raw, "detector", _DET_KEYS)}
    roc = raw.get("roc", {})
    if not isinstance(roc, Mapping) or set(roc) - {"multipliers"}:
        raise ConfigError("roc: only the 'multipliers' key is allowed")
    mults = axis_values(roc.get("multipliers", _ROC_MULTIPLIERS))
    if any(m < 0 for m in mults):
        raise ConfigError("roc.multipliers must be nonnegative")
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if p["devices"] < 1 or p["dims"] < 1 or p["train_slots"] < 1 or p["test_slots"] < 1:
        raise ConfigError("devices, dims and slot counts must be positive")
    layout = DeviceLayout.uniform(p["devices"], p["dims"])
    src = LowRankSource.create(layout, p["rank"], p["sigma"], seed, p["heterogeneous"])
    model = train((layout, src.sample(p["train_slots"], make_rng(seed, 1))),
                  DetectorConfig(det["epsilon"], det["p_fa"]))
    rng = make_rng(seed, 2)
    D = src.sample(p["test_slots"], rng)
    labels = plant_spikes(src, D, p["corrupt_fraction"], p["spike"], rng)
    pts = roc_curve(model, D, labels, sorted(mults))
    out = args.out or "."
    path = os.path.join(out, "roc.csv")
    atomic_write(path, csv_text(["multiplier", "p_d", "p_fa"],
                                [[repr(x.multiplier), repr(x.p_d), repr(x.p_fa)] for x in pts]))
    say(f"{len(pts)} operating points (model rank {model.rank}) -> {path}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration file")
    common.add_argument("--seed", type=_u64, metavar="U64", help="override the seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    ap = argparse.ArgumentParser(prog="outlierbft", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic low-rank data set and labels")
    g.add_argument("--devices", type=int)
    g.add_argument("--dims", type=int)
    g.add_argument("--slots", type=int)
    g.add_argument("--rank", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--corrupt-fraction", type=float)
    g.add_argument("--spike", type=float, help="spike size in clean standard deviations")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="fit a detector model on a data CSV")
    t.add_argument("data", help="data CSV, one row per slot")
    t.add_argument("--epsilon", type=float)
    t.add_argument("--p-fa", type=float)
    t.add_argument("--model-out", metavar="PATH", help="model file (default: <out>/model.json)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", parents=[common], help="list flagged devices per slot")
    d.add_argument("data", help="data CSV, one row per slot")
    d.add_argument("--model", required=True, metavar="PATH")
    d.add_argument("--masked", action="store_true", help="refit after masking each flagged device")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("simulate", parents=[common], help="run a consensus scenario")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--slots", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", parents=[common], help="fault-tolerance surface or scenario sweep")
    w.add_argument("--workers", type=int)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("roc", parents=[common], help="detector ROC over a threshold multiplier")
    r.set_defaults(func=cmd_roc)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    say = _Out(args.quiet)
    try:
        return args.func(args, say)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LedgerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # safety violations and anything unexpected
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

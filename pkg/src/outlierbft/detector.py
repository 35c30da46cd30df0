"""Low-rank subspace outlier detector.

Training learns ``[U, R_est, h]`` from a window of fused measurements:
the dominant left singular vectors, how many of them to keep, and a
per-feature residual threshold calibrated to a target false-alarm rate.
At run time a slot is projected onto ``span(U)`` and every feature whose
residual magnitude exceeds its threshold is flagged, together with the
device owning it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    DataError,
    DegenerateInputError,
    DimensionMismatchError,
    InsufficientDataError,
    NonFiniteError,
)
from .fusion import (
    DeviceLayout,
    FusedVector,
    NormStats,
    TrainingWindow,
    denormalize,
    fit_norm,
    normalize,
)
from .io_utils import atomic_write

MIN_CALIBRATION_COLUMNS = 10
# thresholds below this (normalized units) are roundoff, not signal
THRESHOLD_FLOOR = 1e-9
# caps the leverage correction at a 10x inflation
MIN_LEVERAGE_COMPLEMENT = 0.1
MODEL_FORMAT = "outlierbft.detector/1"


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    @property
    def max_rank(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = self.max_rank if rank is None else rank
        return (self.U[:, :r] * self.singular_values[:r]) @ self.V[:, :r].T


@dataclass(frozen=True)
class DetectorConfig:
    epsilon: float = 0.05
    p_fa: float = 0.05

    def __post_init__(self):
        from .errors import ConfigError
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 < self.p_fa < 1.0:
            raise ConfigError(f"p_fa must lie in (0, 1), got {self.p_fa}")


@dataclass(frozen=True)
class CalibrationData:
    """Training residuals ``Z = D - D~`` plus what calibration needs to read them.

    ``leverage[t]`` is the in-sample leverage of training column ``t``; the
    residuals used for calibration are ``Z / (1 - leverage)``, which undoes
    the shrinkage of fitting the span and mean on the same columns.
    ``censor`` overrides single entries (NaN where unused) with a residual
    magnitude recorded when the entry was sanitized.
    """

    residual_matrix: np.ndarray
    leverage: np.ndarray | None = None
    censor: np.ndarray | None = None

    def calibration_residuals(self) -> np.ndarray:
        A = np.abs(self.residual_matrix)
        if self.leverage is not None:
            A = A / np.maximum(1.0 - self.leverage, MIN_LEVERAGE_COMPLEMENT)[None, :]
        if self.censor is not None:
            A = np.where(np.isnan(self.censor), A, self.censor)
        return A


@dataclass(frozen=True)
class DetectorModel:
    span: np.ndarray
    rank: int
    thresholds: np.ndarray
    norm_stats: NormStats
    layout: DeviceLayout
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    epsilon: float | None = None
    p_fa: float | None = None

    def __post_init__(self):
        for name in ("span", "thresholds", "singular_values"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        b = self.layout.total_dim
        if self.span.shape != (b, self.rank):
            raise DimensionMismatchError(f"span must be {b}x{self.rank}, got {self.span.shape}")
        if self.thresholds.shape != (b,):
            raise DimensionMismatchError(f"thresholds must have length {b}")
        if np.any(self.thresholds < 0):
            raise DataError("thresholds must be nonnegative")
        object.__setattr__(self, "_owner", self.layout.feature_owner())

    @property
    def b(self) -> int:
        return self.layout.total_dim

    def projector(self) -> np.ndarray:
        return self.span @ self.span.T


@dataclass(frozen=True)
class OutlierReport:
    slot: int | None
    residual: np.ndarray
    flagged_features: frozenset[int]
    flagged_devices: frozenset[str]
    max_residual_ratio: float = 0.0

    @property
    def feature_mask(self) -> np.ndarray:
        mask = np.zeros(self.residual.shape[0], dtype=bool)
        mask[list(self.flagged_features)] = True
        return mask


# --- training ---------------------------------------------------------------

def compute_svd(D: np.ndarray) -> SvdFactors:
    """Thin SVD of ``D`` with singular values in nonincreasing order."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.size == 0:
        raise DataError(f"SVD needs a non-empty matrix, got shape {D.shape}")
    if not np.all(np.isfinite(D)):
        raise NonFiniteError("matrix contains non-finite entries")
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    return SvdFactors(U, s, Vt.T)


def residual_ratios(singular_values: np.ndarray) -> np.ndarray:
    """Relative Frobenius residual of the rank-R truncation, for R = 0..R_max."""
    sq = np.asarray(singular_values, dtype=float) ** 2
    total = sq.sum()
    if total <= 0.0:
        raise DegenerateInputError("all singular values are zero")
    # tail sums from the small end to avoid cancellation
    tail = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    return np.sqrt(tail / total)


def estimate_rank(factors: SvdFactors | np.ndarray, epsilon: float) -> int:
    """Smallest rank whose truncation leaves relative residual <= epsilon (at least 1)."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    s = factors.singular_values if isinstance(factors, SvdFactors) else np.asarray(factors, dtype=float)
    ratios = residual_ratios(s)
    ok = np.flatnonzero(ratios <= epsilon)
    r = int(ok[0]) if ok.size else s.shape[0]
    return max(r, 1)


def quantile_index(m: int, p_fa: float) -> int:
    """Index into ``m`` ascending samples of the lower (1 - p_fa) empirical quantile."""
    k = math.ceil(round((1.0 - p_fa) * m, 9)) - 1
    return min(max(k, 0), m - 1)


def calibrate_thresholds(Z: CalibrationData | np.ndarray, p_fa: float) -> np.ndarray:
    """Per-feature (row) empirical (1 - p_fa) quantile of absolute residuals.

    A plain matrix is used as is; :class:`CalibrationData` first applies its
    leverage correction and censor overrides.
    """
    A = Z.calibration_residuals() if isinstance(Z, CalibrationData) else np.abs(np.asarray(Z, dtype=float))
    if not 0.0 < p_fa < 1.0:
        raise ValueError(f"p_fa must lie in (0, 1), got {p_fa}")
    if A.ndim != 2 or A.shape[1] < MIN_CALIBRATION_COLUMNS:
        raise InsufficientDataError(
            f"threshold calibration needs at least {MIN_CALIBRATION_COLUMNS} columns")
    k = quantile_index(A.shape[1], p_fa)
    return np.sort(A, axis=1)[:, k]


def _project(U: np.ndarray, X: np.ndarray) -> np.ndarray:
    # U (U^T U)^{-1} U^T X; U^T U is the identity for SVD bases
    return U @ np.linalg.solve(U.T @ U, U.T @ X)


def _window_arrays(window) -> tuple[DeviceLayout, np.ndarray, np.ndarray | None]:
    if isinstance(window, TrainingWindow):
        censor = window.censor_matrix()
        return window.layout, window.matrix(), censor if not np.all(np.isnan(censor)) else None
    layout, D = window
    return layout, np.asarray(D, dtype=float), None


def train(window: TrainingWindow | tuple[DeviceLayout, np.ndarray], config: DetectorConfig) -> DetectorModel:
    """Fit normalization, span, rank and thresholds on a training window."""
    layout, D, censor_raw = _window_arrays(window)
    if D.ndim != 2 or D.shape[1] < MIN_CALIBRATION_COLUMNS:
        raise InsufficientDataError(
            f"training needs at least {MIN_CALIBRATION_COLUMNS} columns, got {0 if D.ndim != 2 else D.shape[1]}")
    stats = fit_norm(D)
    Dn = normalize(D, stats)
    factors = compute_svd(Dn)
    rank = estimate_rank(factors, config.epsilon)
    if D.shape[1] < 2 * rank:
        raise InsufficientDataError(
            f"estimated rank {rank} needs at least {2 * rank} training columns, got {D.shape[1]}")
    U = factors.U[:, :rank]
    Z = Dn - _project(U, Dn)
    leverage = 1.0 / D.shape[1] + np.sum(factors.V[:, :rank] ** 2, axis=1)
    censor = None if censor_raw is None else censor_raw / stats.scale[:, None]
    h = np.maximum(calibrate_thresholds(CalibrationData(Z, leverage, censor), config.p_fa), THRESHOLD_FLOOR)
    return DetectorModel(U, rank, h, stats, layout, factors.singular_values, config.epsilon, config.p_fa)


def training_residuals(model: DetectorModel, D: np.ndarray) -> CalibrationData:
    """Residuals ``Z`` of a matrix under a trained model (no corrections)."""
    Dn = normalize(np.asarray(D, dtype=float), model.norm_stats)
    return CalibrationData(Dn - _project(model.span, Dn))


# --- online -----------------------------------------------------------------

def _values(d) -> tuple[np.ndarray, int | None]:
    if isinstance(d, FusedVector):
        return d.values, d.slot
    return np.asarray(d, dtype=float), None


def project(model: DetectorModel, d):
    """Projection of a normalized vector (or ``b x k`` matrix) onto the span."""
    vals, slot = _values(d)
    if vals.shape[0] != model.b:
        raise DimensionMismatchError(f"expected length {model.b}, got {vals.shape[0]}")
    out = _project(model.span, vals)
    return FusedVector(slot, out) if slot is not None else out


def _masked_residual(model: DetectorModel, dn: np.ndarray) -> np.ndarray:
    """Residual with outlying devices excluded from the span fit.

    Starts from the plain projection residual; while some unmasked feature
    exceeds its threshold, masks every feature of the device owning the
    worst one (largest |z|/h) and refits the span coefficients on the
    unmasked features.  Keeps at least ``rank`` unmasked features.
    """
    U, h, owner = model.span, model.thresholds, model._owner
    G = U.T @ U
    rhs = U.T @ dn
    z = dn - U @ np.linalg.solve(G, rhs)
    keep = np.ones(model.b, dtype=bool)
    safe_h = np.where(h > 0, h, THRESHOLD_FLOOR)
    while True:
        ratio = np.where(keep, np.abs(z) / safe_h, 0.0)
        worst = int(np.argmax(ratio))
        if ratio[worst] <= 1.0 or np.abs(z[worst]) <= h[worst]:
            return z
        drop = keep & (owner == owner[worst])
        if keep.sum() - drop.sum() < model.rank:
            return z
        keep &= ~drop
        Ud = U[drop]
        G = G - Ud.T @ Ud
        rhs = rhs - Ud.T @ dn[drop]
        try:
            coef = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(U[keep], dn[keep], rcond=None)[0]
        z = dn - U @ coef


def detect(model: DetectorModel, d, masked: bool = False) -> OutlierReport:
    """Flag features (and their devices) whose residual exceeds the threshold.

    The residual is ``d - U (U^T U)^{-1} U^T d`` in normalized units.  With
    ``masked=True`` it is instead taken against the span fitted without the
    outlying devices, so that a large attack on a few devices does not leak
    into the residuals of the clean ones.  Either way the report flags
    exactly the features whose reported residual exceeds ``h``.
    """
    vals, slot = _values(d)
    if vals.shape[0] != model.b:
        raise DimensionMismatchError(f"expected length {model.b}, got {vals.shape[0]}")
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("fused vector contains non-finite values")
    dn = normalize(vals, model.norm_stats)
    z = _masked_residual(model, dn) if masked else dn - _project(model.span, dn)
    mag = np.abs(z)
    hit = mag > model.thresholds
    feats = np.flatnonzero(hit)
    devices = frozenset(model.layout.names[i] for i in np.unique(model._owner[feats]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(model.thresholds > 0, mag / np.where(model.thresholds > 0, model.thresholds, 1.0),
                         np.where(mag > 0, np.inf, 0.0))
    return OutlierReport(slot, z, frozenset(int(i) for i in feats), devices,
                         float(ratio.max()) if ratio.size else 0.0)


# flagged entries whose residual is within this many thresholds keep their
# observed residual for recalibration; larger ones are pinned at the threshold
CENSOR_PIN = 2.0


def _mask(b: int, flagged) -> np.ndarray:
    if isinstance(flagged, np.ndarray) and flagged.dtype == bool:
        return flagged.copy()
    mask = np.zeros(b, dtype=bool)
    mask[list(flagged)] = True
    return mask


def sanitize(model: DetectorModel, d, flagged) -> tuple[np.ndarray, np.ndarray]:
    """Replace flagged features of a raw fused vector by their model estimate.

    The estimate is the projection onto the span fitted on the unflagged
    features only, so the outliers themselves do not leak into it.  Returns
    the sanitized raw vector and a censor column (raw units, NaN where not
    flagged) for later threshold calibration.
    """
    vals, _ = _values(d)
    mask = _mask(model.b, flagged)
    out = np.array(vals, dtype=float)
    censor = np.full(model.b, np.nan)
    if not mask.any():
        return out, censor
    dn = normalize(vals, model.norm_stats)
    keep = ~mask
    U = model.span
    if keep.sum() >= model.rank:
        coef = np.linalg.lstsq(U[keep], dn[keep], rcond=None)[0]
        estimate = U @ coef
    else:
        estimate = _project(U, dn)
    clean = np.where(mask, estimate, dn)
    out[mask] = denormalize(clean, model.norm_stats)[mask]
    z = np.abs(dn - _project(U, dn))
    h = model.thresholds
    pinned = np.where(z <= CENSOR_PIN * h, z, h)
    censor[mask] = (pinned * model.norm_stats.scale)[mask]
    return out, censor


def update_model(model: DetectorModel, window: TrainingWindow, config: DetectorConfig,
                 flagged: Mapping[int, object] | None = None) -> DetectorModel:
    """Retrain on the current window.

    ``flagged`` maps slot -> flagged feature indices for columns that were
    reported as outliers but are still stored raw; they are sanitized with
    the previous ``model`` before retraining.
    """
    if flagged:
        window = window.copy()
        present = set(window.slots)
        for slot, feats in flagged.items():
            if slot in present and len(feats):
                col = window.column(window.slots.index(slot))
                values, censor = sanitize(model, col, feats)
                window.replace_column(slot, values, censor)
    return train(window, config)


# --- serialization ----------------------------------------------------------

def model_to_dict(model: DetectorModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "layout": model.layout.to_dict(),
        "rank": model.rank,
        "epsilon": model.epsilon,
        "p_fa": model.p_fa,
        "norm_stats": {"mean": model.norm_stats.mean.tolist(), "scale": model.norm_stats.scale.tolist()},
        "span_shape": list(model.span.shape),
        "span": model.span.reshape(-1).tolist(),
        "thresholds": model.thresholds.tolist(),
        "singular_values": model.singular_values.tolist(),
    }


def model_from_dict(d: dict) -> DetectorModel:
    if d.get("format") != MODEL_FORMAT:
        raise DataError(f"unsupported model format {d.get('format')!r}")
    layout = DeviceLayout.from_dict(d["layout"])
    rows, cols = d["span_shape"]
    span = np.array(d["span"], dtype=float).reshape(rows, cols)
    stats = NormStats(np.array(d["norm_stats"]["mean"]), np.array(d["norm_stats"]["scale"]))
    return DetectorModel(span, int(d["rank"]), np.array(d["thresholds"], dtype=float), stats, layout,
                         np.array(d.get("singular_values", []), dtype=float), d.get("epsilon"), d.get("p_fa"))


def save_model(model: DetectorModel, path) -> None:
    # json writes floats with repr, which round-trips exactly
    atomic_write(path, json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> DetectorModel:
    try:
        with open(path, encoding="utf-8") as fh:
            return model_from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot read model file {path}: {exc}") from exc

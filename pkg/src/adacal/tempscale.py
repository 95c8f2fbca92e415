"""Constant (vanilla) temperature scaling fit by grid search.

The fit minimizes a calibration objective over a fixed temperature grid;
because ECE is piecewise constant in T, ties are common and always resolve
to the smallest candidate temperature.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import metrics
from .dataset import CalibrationDataset
from .errors import ModelFormatError

OBJECTIVES = ("ece", "nll")


def softmax_with_temperature(s: np.ndarray, t: float) -> np.ndarray:
    """softmax(s / t) over the last axis, max-subtracted for stability.

    ``t`` must be a positive scalar; raises ValueError otherwise (NaN
    included). Never produces NaN for finite ``s``.
    """
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t!r}")
    s = np.asarray(s, dtype=np.float64)
    z = s / t
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Arithmetic temperature grid: lo, lo + step, ... up to hi inclusive
    (within floating-point tolerance of the step count)."""

    lo: float = 0.05
    hi: float = 10.0
    step: float = 0.005

    def __post_init__(self):
        if not (0.0 < self.lo < self.hi):
            raise ValueError(f"need 0 < lo < hi, got lo={self.lo}, hi={self.hi}")
        if self.step <= 0.0:
            raise ValueError(f"step must be positive, got {self.step}")

    def values(self) -> np.ndarray:
        count = int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(count)


@dataclasses.dataclass(frozen=True)
class VanillaScaler:
    """A fitted constant temperature plus fit provenance.

    ``fit_metadata`` carries the grid (grid_lo / grid_hi / grid_step), the
    bin count, and ``achieved_objective``, the objective value at the
    stored temperature computed through the same code path the metrics
    module uses, so re-evaluating reproduces it exactly.
    """

    temperature: float
    fit_objective: str
    fit_metadata: dict

    @property
    def achieved_objective(self) -> float:
        return self.fit_metadata["achieved_objective"]


def fit_vanilla(dataset: CalibrationDataset, objective: str = "ece",
                grid: GridSpec = GridSpec(), bins: int = metrics.DEFAULT_BINS,
                metadata: dict | None = None) -> VanillaScaler:
    """Grid-search the temperature minimizing ECE or NLL on ``dataset``."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    temps = grid.values()
    correct = np.argmax(dataset.logits, axis=1) == dataset.labels
    values = np.empty(len(temps))
    for i, t in enumerate(temps):
        if objective == "ece":
            conf = metrics.probabilities(dataset.logits, float(t)).max(axis=1)
            values[i] = metrics.ece_from_scores(conf, correct, bins)
        else:
            values[i] = metrics.nll_from_logits(dataset.logits, dataset.labels,
                                                float(t))
    best = int(np.argmin(values))  # first minimum: ties go to the smallest T
    meta = {"grid_lo": grid.lo, "grid_hi": grid.hi, "grid_step": grid.step,
            "bins": bins, "achieved_objective": float(values[best]),
            "n_samples": dataset.n}
    if metadata:
        meta.update(metadata)
    return VanillaScaler(temperature=float(temps[best]), fit_objective=objective,
                         fit_metadata=meta)


def apply_vanilla(scaler: VanillaScaler, dataset: CalibrationDataset) -> np.ndarray:
    """Calibrated probabilities softmax(s / T) for the fitted T."""
    return softmax_with_temperature(dataset.logits, scaler.temperature)


def save_scaler(scaler: VanillaScaler, path) -> None:
    fit = dict(scaler.fit_metadata)
    fit["objective"] = scaler.fit_objective
    payload = {
        "kind": "vanilla",
        "version": 1,
        "temperature": scaler.temperature,
        "fit": fit,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scaler(path) -> VanillaScaler:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "vanilla":
        raise ModelFormatError("not a vanilla scaler file (missing kind == 'vanilla')")
    if payload.get("version") != 1:
        raise ModelFormatError(f"unsupported scaler version {payload.get('version')!r}")
    t = payload.get("temperature")
    if not isinstance(t, (int, float)) or not np.isfinite(t) or t <= 0:
        raise ModelFormatError(f"temperature must be a positive number, got {t!r}")
    fit = dict(payload.get("fit", {}))
    objective = fit.pop("objective", "ece")
    return VanillaScaler(temperature=float(t), fit_objective=objective,
                         fit_metadata=fit)

"""Calibration and selective-prediction metrics.

All metrics operate on a :class:`~adacal.dataset.CalibrationDataset` plus a
temperature, which may be a scalar (constant scaling) or a per-sample
vector. Conventions pinned here and relied on elsewhere:

* Probabilities are ``softmax(s / T)`` row-wise.
* Confidence is the maximum probability; correctness compares
  ``argmax(logits)`` (temperature-independent, ties to the lowest index)
  against the label.
* Equal-width binning uses edges ``i / bins`` on [0, 1]; bin i covers
  ``[i/bins, (i+1)/bins)`` except the last, which is closed at 1.0.
* Equal-mass binning sorts confidences ascending (stable) and splits the
  order into ``bins`` contiguous groups whose sizes differ by at most one,
  earlier groups taking the extra samples.
* An empty bin contributes zero weight; its mean confidence and accuracy
  are NaN (serialized as null).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import logsumexp, xlogy

from .dataset import CalibrationDataset

DEFAULT_BINS = 15

SCORE_KINDS = ("confidence", "entropy", "dempster_shafer")


def _as_temps(n: int, temps) -> np.ndarray:
    """Validate a scalar or (n,) temperature and return it as (n, 1)."""
    arr = np.asarray(temps, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValueError(f"temps must be a scalar or shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("temperatures must be finite and strictly positive")
    return arr[:, None]


def log_probabilities(logits: np.ndarray, temps) -> np.ndarray:
    """Row-wise ``log softmax(s / T)``, computed via logsumexp."""
    logits = np.asarray(logits, dtype=np.float64)
    scaled = logits / _as_temps(logits.shape[0], temps)
    return scaled - logsumexp(scaled, axis=1, keepdims=True)


def probabilities(logits: np.ndarray, temps) -> np.ndarray:
    """Row-wise ``softmax(s / T)``."""
    return np.exp(log_probabilities(logits, temps))


def confidences_and_correctness(dataset: CalibrationDataset, temps):
    """Per-sample (confidence, correct) pair.

    Confidence is ``max softmax(s/T)``; correctness is temperature
    independent because positive scaling never reorders a logit row.
    """
    probs = probabilities(dataset.logits, temps)
    conf = probs.max(axis=1)
    correct = np.argmax(dataset.logits, axis=1) == dataset.labels
    return conf, correct


def _equal_width_bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    # interior edges i/bins for i = 1..bins-1; digitize puts x in
    # [edge[i-1], edge[i]), so the last bin absorbs conf == 1.0
    edges = np.arange(1, bins) / bins
    return np.digitize(conf, edges)


def _equal_mass_groups(conf: np.ndarray, bins: int) -> list:
    order = np.argsort(conf, kind="stable")
    return np.array_split(order, bins)


def _validate_bins(bins: int) -> int:
    if not isinstance(bins, (int, np.integer)) or bins < 1:
        raise ValueError(f"bins must be a positive integer, got {bins!r}")
    return int(bins)


@dataclasses.dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclasses.dataclass(frozen=True)
class ReliabilityDiagram:
    """Per-bin confidence/accuracy summary.

    ``weighted_gap()`` equals :func:`ece` (equal-width scheme) or
    :func:`ada_ece` (equal-mass scheme) exactly; those functions are thin
    wrappers over this aggregation.
    """

    scheme: str
    bins: tuple
    total: int

    def weighted_gap(self) -> float:
        gap = 0.0
        for b in self.bins:
            if b.count:
                gap += (b.count / self.total) * abs(b.accuracy - b.mean_confidence)
        return gap

    def to_json_dict(self) -> dict:
        def _val(x):
            return None if math.isnan(x) else x
        return {
            "scheme": self.scheme,
            "total": self.total,
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "count": b.count,
                    "mean_confidence": _val(b.mean_confidence),
                    "accuracy": _val(b.accuracy),
                }
                for b in self.bins
            ],
        }

    def csv_rows(self) -> list:
        header = ["lower", "upper", "count", "mean_confidence", "accuracy"]
        rows = [header]
        for b in self.bins:
            rows.append([repr(b.lower), repr(b.upper), str(b.count),
                         "" if math.isnan(b.mean_confidence) else repr(b.mean_confidence),
                         "" if math.isnan(b.accuracy) else repr(b.accuracy)])
        return rows


def _diagram_from_groups(scheme, conf, correct, groups, edges) -> ReliabilityDiagram:
    out = []
    for i, idx in enumerate(groups):
        if len(idx):
            out.append(ReliabilityBin(
                lower=edges[i][0], upper=edges[i][1], count=len(idx),
                mean_confidence=float(conf[idx].mean()),
                accuracy=float(correct[idx].mean())))
        else:
            out.append(ReliabilityBin(
                lower=edges[i][0], upper=edges[i][1], count=0,
                mean_confidence=float("nan"), accuracy=float("nan")))
    return ReliabilityDiagram(scheme=scheme, bins=tuple(out), total=len(conf))


def reliability_from_scores(conf: np.ndarray, correct: np.ndarray,
                            bins: int = DEFAULT_BINS,
                            scheme: str = "equal-width") -> ReliabilityDiagram:
    bins = _validate_bins(bins)
    n = len(conf)
    if scheme == "equal-width":
        assignment = _equal_width_bin_index(conf, bins)
        groups = [np.flatnonzero(assignment == i) for i in range(bins)]
        edges = [(i / bins, (i + 1) / bins) for i in range(bins)]
    elif scheme == "equal-mass":
        if bins > n:
            raise ValueError(f"equal-mass binning needs bins <= n ({bins} > {n})")
        groups = _equal_mass_groups(conf, bins)
        # group boundaries in confidence space, for labeling only
        edges = [(float(conf[g].min()), float(conf[g].max())) for g in groups]
    else:
        raise ValueError(f"unknown binning scheme {scheme!r}")
    return _diagram_from_groups(scheme, conf, correct, groups, edges)


def reliability(dataset: CalibrationDataset, temps, bins: int = DEFAULT_BINS,
                scheme: str = "equal-width") -> ReliabilityDiagram:
    conf, correct = confidences_and_correctness(dataset, temps)
    return reliability_from_scores(conf, correct, bins, scheme)


def ece_from_scores(conf: np.ndarray, correct: np.ndarray,
                    bins: int = DEFAULT_BINS) -> float:
    return reliability_from_scores(conf, correct, bins, "equal-width").weighted_gap()


def ada_ece_from_scores(conf: np.ndarray, correct: np.ndarray,
                        bins: int = DEFAULT_BINS) -> float:
    return reliability_from_scores(conf, correct, bins, "equal-mass").weighted_gap()


def ece(dataset: CalibrationDataset, temps, bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error with equal-width confidence bins."""
    conf, correct = confidences_and_correctness(dataset, temps)
    return ece_from_scores(conf, correct, bins)


def ada_ece(dataset: CalibrationDataset, temps, bins: int = DEFAULT_BINS) -> float:
    """Adaptive (equal-mass) expected calibration error."""
    conf, correct = confidences_and_correctness(dataset, temps)
    return ada_ece_from_scores(conf, correct, bins)


@dataclasses.dataclass(frozen=True)
class ContributionHistogram:
    """Per-sample calibration contributions.

    ``per_sample[i] = confidence[i] - accuracy(bin containing i)`` under
    equal-width binning, so positive values mark overconfident samples.
    Every value lies in [-1, 1].
    """

    per_sample: np.ndarray
    bin_assignment: np.ndarray
    bins: int
    total: int

    def to_json_dict(self) -> dict:
        summary = []
        for i in range(self.bins):
            mask = self.bin_assignment == i
            summary.append({
                "lower": i / self.bins,
                "upper": (i + 1) / self.bins,
                "count": int(mask.sum()),
                "mean_contribution": float(self.per_sample[mask].mean()) if mask.any() else None,
            })
        return {"bins": self.bins, "total": self.total, "per_bin": summary}

    def csv_rows(self) -> list:
        rows = [["index", "bin", "contribution"]]
        for i in range(self.total):
            rows.append([str(i), str(int(self.bin_assignment[i])),
                         repr(float(self.per_sample[i]))])
        return rows


def contribution_histogram(dataset: CalibrationDataset, temps,
                           bins: int = DEFAULT_BINS) -> ContributionHistogram:
    bins = _validate_bins(bins)
    conf, correct = confidences_and_correctness(dataset, temps)
    assignment = _equal_width_bin_index(conf, bins)
    per_sample = np.empty(dataset.n)
    for i in range(bins):
        mask = assignment == i
        if mask.any():
            per_sample[mask] = conf[mask] - correct[mask].mean()
    return ContributionHistogram(per_sample=per_sample, bin_assignment=assignment,
                                 bins=bins, total=dataset.n)


def nll_from_logits(logits: np.ndarray, labels: np.ndarray, temps) -> float:
    logp = log_probabilities(logits, temps)
    return float(-logp[np.arange(len(labels)), labels].mean())


def nll(dataset: CalibrationDataset, temps) -> float:
    """Mean negative log-likelihood of the labels under softmax(s/T)."""
    return nll_from_logits(dataset.logits, dataset.labels, temps)


def brier(dataset: CalibrationDataset, temps) -> float:
    """Mean squared distance between the probability vector and the label
    one-hot, summed over classes."""
    probs = probabilities(dataset.logits, temps)
    onehot = np.zeros_like(probs)
    onehot[np.arange(dataset.n), dataset.labels] = 1.0
    return float(np.sum((probs - onehot) ** 2, axis=1).mean())


def accuracy(dataset: CalibrationDataset) -> float:
    """Top-1 accuracy; independent of any positive temperature."""
    return float((np.argmax(dataset.logits, axis=1) == dataset.labels).mean())


def rejection_scores(dataset: CalibrationDataset, temps, score: str) -> np.ndarray:
    """Per-sample ordering score for rejection curves (higher = keep longer).

    confidence        max softmax(s/T)
    entropy           negated Shannon entropy of softmax(s/T)
    dempster_shafer   1 - k / (k + sum_j exp(s_j / T)), the complement of
                      the uniform-belief mass; computed in log space
    """
    if score == "confidence":
        return probabilities(dataset.logits, temps).max(axis=1)
    if score == "entropy":
        probs = probabilities(dataset.logits, temps)
        return np.sum(xlogy(probs, probs), axis=1)
    if score == "dempster_shafer":
        scaled = dataset.logits / _as_temps(dataset.n, temps)
        lse = logsumexp(scaled, axis=1)
        return np.exp(lse - np.logaddexp(np.log(dataset.k), lse))
    raise ValueError(f"unknown rejection score {score!r}; choose from {SCORE_KINDS}")


@dataclasses.dataclass(frozen=True)
class RejectionCurve:
    """Accuracy over retained samples as low-score samples are rejected.

    Point m (m = n..0 retained) rejects the n - m lowest-scoring samples;
    ties keep their dataset order (stable sort). ``rejection_rates[j]`` is
    ``j / n`` and ``retained_accuracies[j]`` the accuracy over the j-th
    retained set, with the empty set pinned to accuracy 1.0. ``aurra`` is
    the trapezoidal area under the curve.
    """

    score_kind: str
    rejection_rates: np.ndarray
    retained_accuracies: np.ndarray
    aurra: float

    def to_json_dict(self) -> dict:
        return {
            "score_kind": self.score_kind,
            "aurra": self.aurra,
            "points": [
                {"rejection_rate": float(r), "retained_accuracy": float(a)}
                for r, a in zip(self.rejection_rates, self.retained_accuracies)
            ],
        }

    def csv_rows(self) -> list:
        rows = [["rejection_rate", "retained_accuracy"]]
        for r, a in zip(self.rejection_rates, self.retained_accuracies):
            rows.append([repr(float(r)), repr(float(a))])
        return rows


def rejection_curve(dataset: CalibrationDataset, temps, score: str) -> RejectionCurve:
    scores = rejection_scores(dataset, temps, score)
    correct = (np.argmax(dataset.logits, axis=1) == dataset.labels).astype(np.float64)
    order = np.argsort(-scores, kind="stable")
    n = dataset.n
    kept = np.cumsum(correct[order])
    retained = np.empty(n + 1)
    retained[0] = kept[-1] / n            # reject nothing
    ms = np.arange(n - 1, 0, -1)          # retain m = n-1 .. 1
    retained[1:n] = kept[ms - 1] / ms
    retained[n] = 1.0                     # empty retained set
    rates = np.arange(n + 1) / n
    area = float(np.trapezoid(retained, rates))
    return RejectionCurve(score_kind=score, rejection_rates=rates,
                          retained_accuracies=retained, aurra=area)


def aurra(dataset: CalibrationDataset, temps, score: str = "confidence") -> float:
    """Area under the rejection/retained-accuracy curve."""
    return rejection_curve(dataset, temps, score).aurra

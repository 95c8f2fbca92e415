"""Closed-form gradients, finite-difference verification, and diagnostics.

The first half of this module is the package's analytic backbone: the exact
derivative of the scaled-softmax NLL with respect to temperature, its
commonly quoted unnormalized variant, and the classifier last-layer
gradient, each verifiable against central finite differences. The
self-check bundle re-derives all of them (plus the latent-model gradients
from :mod:`adacal.adats`) numerically on randomized instances and is what
``adacal selfcheck`` runs.

The second half is model forensics: temperature behavior along class-mean
interpolations, temperature histograms by class or correctness, and a
latent-space CSV export.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np
from scipy.special import logsumexp

from . import adats, metrics, nncore
from .dataset import CalibrationDataset
from .errors import DatasetValidationError


def _require_positive_temperature(t: float) -> None:
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t!r}")


def scaled_nll(logits: np.ndarray, y: int, t: float) -> float:
    """-log softmax(s / t)[y] for one sample."""
    _require_positive_temperature(t)
    scaled = np.asarray(logits, dtype=np.float64) / t
    return float(logsumexp(scaled) - scaled[y])


def nll_temperature_gradient(logits: np.ndarray, y: int, t: float) -> float:
    """Exact d/dt of ``-log softmax(s/t)[y]``.

    Writing p = softmax(s/t), the derivative is

        (1 / t^2) * (s_y - sum_i p_i s_i),

    i.e. positive whenever the labeled logit sits above the probability-
    weighted mean logit (confident correct predictions want t smaller).
    Evaluated as ``-sum_i p_i (s_i - s_y)`` so constant logit vectors give
    an exact zero instead of a rounding residue.
    """
    _require_positive_temperature(t)
    logits = np.asarray(logits, dtype=np.float64)
    p = nncore.softmax(logits / t)
    return float(-np.dot(p, logits - logits[y]) / (t * t))


def nll_temperature_gradient_unnormalized(logits: np.ndarray, y: int,
                                          t: float) -> float:
    """The temperature derivative as often quoted, without the softmax
    normalizer:

        (1 / t^2) * (s_y * sum_{i != y} e^{s_i/t} - sum_{j != y} s_j e^{s_j/t})

    This equals :func:`nll_temperature_gradient` multiplied by
    ``sum_i exp(s_i / t)``, so it has the right sign and zero set but not
    the right magnitude. Evaluated literally (naive exp), so keep logits
    moderate; it exists to document and test that relationship.
    """
    _require_positive_temperature(t)
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits / t)
    mask = np.ones(len(logits), dtype=bool)
    mask[y] = False
    return float((logits[y] * e[mask].sum() - np.dot(logits[mask], e[mask]))
                 / (t * t))


def last_layer_gradient(weights: np.ndarray, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of ``-log softmax(x @ W)[y]`` with respect to W (d, k):
    ``outer(x, softmax(s) - onehot(y))``."""
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    s = x @ weights
    return np.outer(x, nncore.softmax_ce_logit_grad(s, y))


# ---------------------------------------------------------------------------
# finite differences

def central_difference(f, x: float, h: float = 1e-5) -> float:
    """(f(x+h) - f(x-h)) / 2h."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def central_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        bumped = x.copy()
        bumped[idx] = x[idx] + h
        hi = f(bumped)
        bumped[idx] = x[idx] - h
        lo = f(bumped)
        grad[idx] = (hi - lo) / (2.0 * h)
    return grad


def _scaled_errors(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float) -> np.ndarray:
    """|a - f| / max(floor, |a| + |f|).

    Entries where both values sit below ``floor`` are effectively compared
    absolutely (a pure ratio at a zero crossing only measures rounding
    noise); everywhere else this is a relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(floor, np.abs(a) + np.abs(f))


def verify_last_layer_grad(weights: np.ndarray, x: np.ndarray, y: int,
                           h: float = 1e-5) -> float:
    """Max scaled error between :func:`last_layer_gradient` and central
    finite differences over every weight entry."""
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    analytic = last_layer_gradient(weights, x, y)

    def loss(w):
        s = x @ w
        return float(logsumexp(s) - s[y])

    numeric = central_difference_gradient(loss, weights, h)
    return float(_scaled_errors(analytic, numeric, floor=1e-4).max())


def verify_temperature_gradient(logits: np.ndarray, y: int, t: float,
                                h: float = 1e-6) -> float:
    """Scaled error between the exact temperature derivative and a central
    difference of the scalar NLL."""
    analytic = nll_temperature_gradient(logits, y, t)
    numeric = central_difference(lambda tt: scaled_nll(logits, y, tt), t, h)
    return float(_scaled_errors(np.array(analytic), np.array(numeric),
                               floor=1e-8))


# ---------------------------------------------------------------------------
# self-check bundle

@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    passed: bool


@dataclasses.dataclass(frozen=True)
class SelfCheckReport:
    results: tuple
    seed: int

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "passed": self.passed,
            "checks": [dataclasses.asdict(r) for r in self.results],
        }


def _check_last_layer(g: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        d = int(g.integers(2, 9))
        k = int(g.integers(2, 11))
        w = g.standard_normal((d, k))
        x = g.standard_normal(d)
        y = int(g.integers(k))
        worst = max(worst, verify_last_layer_grad(w, x, y))
    return CheckResult("last_layer_gradient", instances, worst, 1e-4,
                       worst < 1e-4)


def _draw_temperature_instance(g: np.random.Generator):
    # redraw when the derivative nearly vanishes: a relative comparison at
    # a zero crossing would only measure finite-difference noise
    while True:
        k = int(g.integers(2, 11))
        s = 2.0 * g.standard_normal(k)
        y = int(g.integers(k))
        t = float(g.uniform(0.5, 3.0))
        if abs(nll_temperature_gradient(s, y, t)) >= 1e-2:
            return s, y, t


def _check_temperature_gradient(g: np.random.Generator,
                                instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        s, y, t = _draw_temperature_instance(g)
        worst = max(worst, verify_temperature_gradient(s, y, t))
    return CheckResult("temperature_gradient_vs_fd", instances, worst, 1e-6,
                       worst < 1e-6)


def _check_normalizer_identity(g: np.random.Generator,
                               instances: int) -> CheckResult:
    # unnormalized variant == exact * sum_i exp(s_i / t)
    worst = 0.0
    for _ in range(instances):
        k = int(g.integers(2, 11))
        s = 2.0 * g.standard_normal(k)
        y = int(g.integers(k))
        t = float(g.uniform(0.5, 3.0))
        loose = nll_temperature_gradient_unnormalized(s, y, t)
        tight = nll_temperature_gradient(s, y, t) * np.exp(s / t).sum()
        worst = max(worst, float(_scaled_errors(np.array(loose),
                                               np.array(tight), floor=1e-8)))
    return CheckResult("temperature_gradient_normalizer", instances, worst,
                       1e-8, worst < 1e-8)


def _latent_fd_instance(g: np.random.Generator):
    """A small random model plus one labeled sample, redrawn until every
    ReLU preactivation and Laplace residual is at least 1e-3 from its kink
    (finite differences are meaningless across a kink)."""
    while True:
        d = int(g.integers(2, 6))
        k = int(g.integers(2, 6))
        cfg = adats.TrainConfig(d_z=int(g.integers(1, 4)),
                                encoder_hidden=(5,), decoder_hidden=(5,),
                                temp_hidden=(4,), seed=0)
        model = adats.init_model(d, k, cfg, g)
        phi = g.standard_normal(d)
        logits = 2.0 * g.standard_normal(k)
        y = int(g.integers(k))
        noise = g.standard_normal(cfg.d_z)

        post = adats.encode(model, phi)
        z = nncore.reparameterize(post, noise)
        qt = adats.pseudo_likelihood_vector(model, z)
        margins = []
        for mlp, inp in ((model.encoder, phi), (model.decoder, z),
                         (model.temp_mlp, qt)):
            _, _, preacts = nncore._forward_cache(mlp, inp[None, :])
            margins.extend(float(np.abs(p).min()) for p in preacts[:-1])
        loc = nncore.mlp_forward(model.decoder, z)
        margins.append(float(np.abs(phi - loc).min()))
        if min(margins) > 1e-3:
            return model, phi, logits, y, noise


def _max_param_fd_error(model, value_fn, analytic: "adats.ModelGrads",
                        h: float = 1e-5) -> float:
    worst = 0.0
    params = adats._model_params(model)
    grads = adats._grad_arrays(analytic)
    for arr, grad in zip(params, grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = value_fn()
            flat[i] = keep - h
            lo = value_fn()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * h)
            err = float(_scaled_errors(np.array(gflat[i]), np.array(numeric),
                                      floor=1e-4))
            worst = max(worst, err)
    return worst


def _check_latent_gradients(g: np.random.Generator, instances: int,
                            joint: bool) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        model, phi, logits, y, noise = _latent_fd_instance(g)
        if joint:
            _, grads = adats.joint_objective(model, phi, logits, y, noise)
            value_fn = lambda: adats.joint_objective(model, phi, logits, y,
                                                     noise)[0]
        else:
            _, grads = adats.elbo(model, phi, y, noise)
            value_fn = lambda: adats.elbo(model, phi, y, noise)[0]
        worst = max(worst, _max_param_fd_error(model, value_fn, grads))
    name = "joint_objective_gradients" if joint else "elbo_gradients"
    return CheckResult(name, instances, worst, 1e-4, worst < 1e-4)


def run_selfcheck(seed: int = 0, instances: int = 1000,
                  latent_instances: int = 50) -> SelfCheckReport:
    """Numerically re-derive every hand-written gradient in the package.

    Checks, in order: the classifier last-layer gradient against central
    finite differences; the exact temperature derivative of the scaled
    softmax NLL against a scalar central difference; the identity tying the
    unnormalized temperature-derivative variant to the exact one; and the
    latent-model gradients (elbo alone, then the joint objective) against
    finite differences over every parameter of randomized small models.
    """
    g = nncore.rng(seed)
    results = (
        _check_last_layer(g, instances),
        _check_temperature_gradient(g, instances),
        _check_normalizer_identity(g, instances),
        _check_latent_gradients(g, latent_instances, joint=False),
        _check_latent_gradients(g, latent_instances, joint=True),
    )
    return SelfCheckReport(results=results, seed=seed)


# ---------------------------------------------------------------------------
# model forensics

@dataclasses.dataclass(frozen=True)
class InterpolationTrace:
    """Temperatures along the segment between two class-mean embeddings."""

    class_pair: tuple
    alphas: np.ndarray
    temperatures: np.ndarray

    def to_json_dict(self) -> dict:
        return {"class_pair": list(self.class_pair),
                "alphas": self.alphas.tolist(),
                "temperatures": self.temperatures.tolist()}


def class_mean_interpolation(model: adats.AdaTsModel,
                             dataset: CalibrationDataset,
                             class_i: int, class_j: int,
                             steps: int = 21) -> InterpolationTrace:
    """Predicted temperature at ``alpha * mean_i + (1 - alpha) * mean_j``
    for alpha on a uniform [0, 1] grid, so alpha = 1 sits at class i's mean
    embedding. Each point goes through the single-sample prediction path,
    which makes the endpoints equal direct predictions bit for bit.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    for c in (class_i, class_j):
        if not 0 <= c < dataset.k:
            raise DatasetValidationError(f"class {c} out of range [0, {dataset.k})")
        if not np.any(dataset.labels == c):
            raise DatasetValidationError(f"class {c} has no samples")
    mean_i = dataset.features[dataset.labels == class_i].mean(axis=0)
    mean_j = dataset.features[dataset.labels == class_j].mean(axis=0)
    alphas = np.linspace(0.0, 1.0, steps)
    points = alphas[:, None] * mean_i + (1.0 - alphas)[:, None] * mean_j
    temps = np.array([adats.predict_temperature(model, p) for p in points])
    return InterpolationTrace(class_pair=(class_i, class_j),
                              alphas=alphas, temperatures=temps)


@dataclasses.dataclass(frozen=True)
class TemperatureHistogram:
    """Predicted temperatures grouped by class or by correctness."""

    partition: str
    groups: dict
    stats: dict

    def to_json_dict(self) -> dict:
        return {"partition": self.partition, "stats": self.stats,
                "groups": {k: v.tolist() for k, v in self.groups.items()}}


def temperature_histogram(model: adats.AdaTsModel,
                          dataset: CalibrationDataset,
                          partition: str = "class") -> TemperatureHistogram:
    temps = adats.predict_temperature(model, dataset.features)
    if partition == "class":
        groups = {f"class_{c}": temps[dataset.labels == c]
                  for c in range(dataset.k)}
    elif partition == "correctness":
        correct = np.argmax(dataset.logits, axis=1) == dataset.labels
        groups = {"correct": temps[correct], "incorrect": temps[~correct]}
    else:
        raise ValueError(f"unknown partition {partition!r}")
    stats = {}
    for name, values in groups.items():
        stats[name] = {
            "count": int(values.size),
            "mean": float(values.mean()) if values.size else None,
            "std": float(values.std()) if values.size else None,
        }
    return TemperatureHistogram(partition=partition, groups=groups, stats=stats)


def export_latents(model: adats.AdaTsModel, dataset: CalibrationDataset,
                   path, bins: int = metrics.DEFAULT_BINS) -> None:
    """Write one CSV row per sample: index, label, correctness, raw
    confidence, predicted temperature, calibration contribution (at T = 1,
    equal-width bins), and the posterior-mean latent coordinates."""
    post = adats.encode(model, dataset.features)
    temps = adats.predict_temperature(model, dataset.features)
    conf, correct = metrics.confidences_and_correctness(dataset, 1.0)
    contrib = metrics.contribution_histogram(dataset, 1.0, bins).per_sample
    header = (["index", "label", "correct", "confidence", "temperature",
               "contribution"] + [f"z_{j}" for j in range(model.d_z)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            writer.writerow([i, int(dataset.labels[i]), int(correct[i]),
                             repr(float(conf[i])), repr(float(temps[i])),
                             repr(float(contrib[i]))]
                            + [repr(float(v)) for v in post.mean[i]])

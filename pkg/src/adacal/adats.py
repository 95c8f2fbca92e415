"""Sample-adaptive temperature scaling.

A latent-variable model is fit over the frozen classifier's feature
embeddings: an encoder maps ``phi(x)`` to a diagonal Gaussian posterior, a
decoder reconstructs ``phi(x)`` under a unit-scale factorized Laplace
likelihood, and every class ``y`` owns a diagonal Gaussian prior over the
latent space, so the evidence lower bound for a labeled sample is

    elbo = E_q[ log Laplace(phi; decoder(z)) ] - KL(q(z|phi) || prior_y).

For a latent ``z`` the per-class prior log-density vector

    qt_j = log N(z; prior_mean_j, diag exp(prior_log_std_j)^2)

describes where the sample sits relative to every class region. A small
MLP maps ``qt`` to one number; the sample's temperature is
``softplus(raw) + temp_floor``. Training jointly maximizes
``elbo_weight * elbo + ce_weight * log softmax(s / T)[y]`` with Adam over
encoder, decoder, priors, and the temperature head. All gradients are
hand-derived against the nncore primitives and checked against central
finite differences by the test suite and the self-check command.

Training draws one shared reparameterization sample per row per step (used
by both the reconstruction and ``qt``). Inference uses the posterior mean,
so predicted temperatures are deterministic.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np
from scipy.special import logsumexp

from . import metrics, nncore
from .dataset import CalibrationDataset
from .errors import ModelFormatError, TrainingDivergedError

_LOG_2PI = np.log(2.0 * np.pi)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the reference configuration.

    ``freeze_vae`` zeroes the encoder/decoder and makes all class priors
    identical standard normals, then trains only the temperature head; the
    model then has no sample-dependent signal and should collapse to a
    constant temperature. ``route_ce_through_vae=False`` stops the label
    likelihood gradient at the temperature head's input, leaving encoder
    and priors trained by the elbo alone. Both exist for ablations.
    """

    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    d_z: int = 16
    elbo_weight: float = 1.0
    ce_weight: float = 1.0
    temp_floor: float = 0.05
    encoder_hidden: tuple = (128,)
    decoder_hidden: tuple = (128,)
    temp_hidden: tuple = (64, 64)
    freeze_vae: bool = False
    route_ce_through_vae: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.d_z < 1:
            raise ValueError("epochs, batch_size and d_z must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.temp_floor < 1.0:
            # the floor is a numerical guard below the neutral T = 1, not
            # an offset; the head's output layer is initialized so that
            # softplus(bias) + temp_floor == 1 exactly
            raise ValueError("temp_floor must lie in (0, 1)")
        if self.elbo_weight < 0 or self.ce_weight < 0:
            raise ValueError("objective weights must be non-negative")

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder_hidden"] = list(self.encoder_hidden)
        out["decoder_hidden"] = list(self.decoder_hidden)
        out["temp_hidden"] = list(self.temp_hidden)
        return out


@dataclasses.dataclass
class AdaTsModel:
    """Encoder/decoder/priors plus the temperature head.

    Parameter arrays are owned and writeable (the optimizer updates them in
    place). The temperature head consumes ``qt / d_z`` (the per-dimension
    mean prior log-density, which stays O(1) regardless of latent width)
    and emits a raw score; the temperature is ``softplus(raw) + temp_floor``.
    """

    encoder: nncore.Mlp
    decoder: nncore.Mlp
    prior_means: np.ndarray
    prior_log_stds: np.ndarray
    temp_mlp: nncore.Mlp
    temp_floor: float
    metadata: dict

    @property
    def d(self) -> int:
        return self.encoder.dims[0]

    @property
    def k(self) -> int:
        return self.prior_means.shape[0]

    @property
    def d_z(self) -> int:
        return self.prior_means.shape[1]

    def priors(self) -> nncore.DiagonalGaussian:
        return nncore.DiagonalGaussian(self.prior_means, self.prior_log_stds)


def _config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_json_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def init_model(d: int, k: int, cfg: TrainConfig,
               generator: np.random.Generator) -> AdaTsModel:
    """Fresh model. Draw order: encoder, decoder, temperature head weights
    (He normal each), then prior means ~ N(0, 0.1^2); prior log-stds start
    at zero. Two output layers are shrunk to a tenth of their He draw:

    * the encoder's, so initial posteriors sit near N(0, 1) and hence near
      the priors (small KL, pseudo-likelihoods of sane magnitude) instead
      of wherever a full-scale random head happens to throw them;
    * the temperature head's, whose bias is also set so that
      softplus(bias) + temp_floor == 1. Temperatures then start in a
      narrow band around 1 with a live gradient, while the small nonzero
      weights let the label-likelihood gradient reach the encoder and
      priors from the first step instead of waiting for the output layer
      to grow off zero.

    Under ``freeze_vae`` the draws still happen (keeping the stream
    position stable) but encoder, decoder and priors are zeroed.
    """
    encoder = nncore.Mlp.create([d, *cfg.encoder_hidden, 2 * cfg.d_z], generator)
    encoder.weights[-1] *= 0.1
    decoder = nncore.Mlp.create([cfg.d_z, *cfg.decoder_hidden, d], generator)
    temp_mlp = nncore.Mlp.create([k, *cfg.temp_hidden, 1], generator)
    temp_mlp.weights[-1] *= 0.1
    temp_mlp.biases[-1][:] = np.log(np.expm1(1.0 - cfg.temp_floor))
    prior_means = 0.1 * generator.standard_normal((k, cfg.d_z))
    prior_log_stds = np.zeros((k, cfg.d_z))
    if cfg.freeze_vae:
        for mlp in (encoder, decoder):
            for w in mlp.weights:
                w[:] = 0.0
        prior_means[:] = 0.0
    metadata = {"d": d, "k": k, "d_z": cfg.d_z, "seed": cfg.seed,
                "train_config": cfg.to_json_dict(),
                "train_config_hash": _config_hash(cfg)}
    return AdaTsModel(encoder=encoder, decoder=decoder,
                      prior_means=prior_means, prior_log_stds=prior_log_stds,
                      temp_mlp=temp_mlp, temp_floor=cfg.temp_floor,
                      metadata=metadata)


def encode(model: AdaTsModel, phi: np.ndarray) -> nncore.DiagonalGaussian:
    """Posterior q(z | phi): first half of the encoder output is the mean,
    second half the log-std."""
    out = nncore.mlp_forward(model.encoder, phi)
    dz = model.d_z
    return nncore.DiagonalGaussian(mean=out[..., :dz], log_std=out[..., dz:])


def pseudo_likelihood_vector(model: AdaTsModel, z: np.ndarray) -> np.ndarray:
    """Per-class prior log-densities at z; shape (..., k)."""
    z = np.asarray(z, dtype=np.float64)
    return nncore.gaussian_logpdf(model.priors(), z[..., None, :])


def temperature_from_latent(model: AdaTsModel, z: np.ndarray) -> np.ndarray:
    qt = pseudo_likelihood_vector(model, z)
    raw = nncore.mlp_forward(model.temp_mlp, qt / model.d_z)[..., 0]
    return nncore.softplus(raw) + model.temp_floor


def predict_temperature(model: AdaTsModel, phi: np.ndarray):
    """Deterministic per-sample temperature via the posterior mean latent."""
    t = temperature_from_latent(model, encode(model, phi).mean)
    return float(t) if t.ndim == 0 else t


def calibrate(model: AdaTsModel, dataset: CalibrationDataset):
    """Returns (temps, probs): per-sample temperatures and softmax(s/T)."""
    if dataset.d != model.d or dataset.k != model.k:
        raise ModelFormatError(
            f"model expects d={model.d}, k={model.k}; dataset has "
            f"d={dataset.d}, k={dataset.k}")
    temps = predict_temperature(model, dataset.features)
    return temps, metrics.probabilities(dataset.logits, temps)


@dataclasses.dataclass
class ModelGrads:
    """Gradients mirroring AdaTsModel's parameters."""

    encoder: nncore.MlpGrads
    decoder: nncore.MlpGrads
    prior_means: np.ndarray
    prior_log_stds: np.ndarray
    temp: nncore.MlpGrads


def _model_params(model: AdaTsModel) -> list:
    return (nncore.mlp_params(model.encoder)
            + nncore.mlp_params(model.decoder)
            + [model.prior_means, model.prior_log_stds]
            + nncore.mlp_params(model.temp_mlp))


def _grad_arrays(grads: ModelGrads) -> list:
    return (nncore.mlp_grad_arrays(grads.encoder)
            + nncore.mlp_grad_arrays(grads.decoder)
            + [grads.prior_means, grads.prior_log_stds]
            + nncore.mlp_grad_arrays(grads.temp))


def _batch_terms(model: AdaTsModel, phi, logits, labels, noise,
                 elbo_weight, ce_weight, route_ce, scale):
    """Forward + hand-written backward for one batch.

    Returns ``(elbo_rows, ce_rows, temps, grads)`` where ``grads`` is the
    gradient (ascent direction) of

        scale * sum_rows (elbo_weight * elbo + ce_weight * ce)

    with ce the label log-likelihood ``log softmax(s / T)[y]``. The same
    latent sample z feeds the reconstruction and the temperature path.
    """
    B = phi.shape[0]
    dz = model.d_z

    post = encode(model, phi)
    mu, ls = post.mean, post.log_std
    sig = np.exp(ls)
    z = mu + sig * noise
    loc = nncore.mlp_forward(model.decoder, z)
    recon = nncore.laplace_logpdf(loc, 1.0, phi)
    pm_y = model.prior_means[labels]
    pl_y = model.prior_log_stds[labels]
    kl = nncore.gaussian_kl(post, nncore.DiagonalGaussian(pm_y, pl_y))
    elbo_rows = recon - kl

    diff = z[:, None, :] - model.prior_means[None, :, :]
    inv_var = np.exp(-2.0 * model.prior_log_stds)
    qt = -0.5 * np.sum(_LOG_2PI + 2.0 * model.prior_log_stds[None, :, :]
                       + diff * diff * inv_var[None, :, :], axis=2)
    head_in = qt / dz
    raw = nncore.mlp_forward(model.temp_mlp, head_in)[:, 0]
    temps = nncore.softplus(raw) + model.temp_floor

    scaled = logits / temps[:, None]
    lse = logsumexp(scaled, axis=1)
    rows = np.arange(B)
    ce_rows = scaled[rows, labels] - lse

    # ---- backward ----
    we = scale * elbo_weight
    wc = scale * ce_weight

    dz_total = np.zeros((B, dz))
    dpm = np.zeros_like(model.prior_means)
    dpl = np.zeros_like(model.prior_log_stds)

    if ce_weight != 0.0:
        probs = np.exp(scaled - lse[:, None])
        s_y = logits[rows, labels]
        mean_s = np.sum(probs * logits, axis=1)
        # d ce / d T = -(1/T^2) (s_y - sum_i p_i s_i)
        dT = wc * (-(s_y - mean_s) / (temps * temps))
        draw = dT * nncore.sigmoid(raw)
        temp_grads, dhead_in = nncore.mlp_backward(model.temp_mlp, head_in,
                                                   draw[:, None])
        dqt = dhead_in / dz
        if route_ce:
            dvi = diff * inv_var[None, :, :]
            dz_total += np.einsum("bk,bkd->bd", dqt, -dvi)
            dpm += np.einsum("bk,bkd->kd", dqt, dvi)
            dpl += np.einsum("bk,bkd->kd", dqt, diff * dvi - 1.0)
    else:
        temp_grads = nncore.MlpGrads(
            dweights=[np.zeros_like(w) for w in model.temp_mlp.weights],
            dbiases=[np.zeros_like(b) for b in model.temp_mlp.biases])

    if elbo_weight != 0.0:
        dloc = we * np.sign(phi - loc)
        dec_grads, dz_rec = nncore.mlp_backward(model.decoder, z, dloc)
        dz_total += dz_rec
    else:
        dec_grads = nncore.MlpGrads(
            dweights=[np.zeros_like(w) for w in model.decoder.weights],
            dbiases=[np.zeros_like(b) for b in model.decoder.biases])

    inv_var_y = np.exp(-2.0 * pl_y)
    dmu = dz_total.copy()
    dls = dz_total * (sig * noise)
    if elbo_weight != 0.0:
        # KL partials, entering the objective with weight -we
        dmu -= we * (mu - pm_y) * inv_var_y
        dls -= we * (np.exp(2.0 * (ls - pl_y)) - 1.0)
        np.add.at(dpm, labels, we * (mu - pm_y) * inv_var_y)
        np.add.at(dpl, labels,
                  -we * (1.0 - (np.exp(2.0 * ls) + (mu - pm_y) ** 2) * inv_var_y))
    enc_grads, _ = nncore.mlp_backward(model.encoder, phi,
                                       np.concatenate([dmu, dls], axis=1))

    grads = ModelGrads(encoder=enc_grads, decoder=dec_grads,
                       prior_means=dpm, prior_log_stds=dpl, temp=temp_grads)
    return elbo_rows, ce_rows, temps, grads


def elbo(model: AdaTsModel, phi: np.ndarray, y: int, noise: np.ndarray):
    """Single-sample evidence lower bound and its ascent gradients."""
    phi = np.asarray(phi, dtype=np.float64)
    elbo_rows, _, _, grads = _batch_terms(
        model, phi[None, :], np.zeros((1, model.k)), np.array([y]),
        np.asarray(noise, dtype=np.float64)[None, :],
        elbo_weight=1.0, ce_weight=0.0, route_ce=False, scale=1.0)
    return float(elbo_rows[0]), grads


def joint_objective(model: AdaTsModel, phi: np.ndarray, logits: np.ndarray,
                    y: int, noise: np.ndarray):
    """Single-sample ``elbo + log softmax(s / T)[y]`` and ascent gradients;
    the label-likelihood gradient flows through the temperature head and,
    via the prior log-densities, into priors and encoder."""
    phi = np.asarray(phi, dtype=np.float64)
    elbo_rows, ce_rows, _, grads = _batch_terms(
        model, phi[None, :], np.asarray(logits, dtype=np.float64)[None, :],
        np.array([y]), np.asarray(noise, dtype=np.float64)[None, :],
        elbo_weight=1.0, ce_weight=1.0, route_ce=True, scale=1.0)
    return float(elbo_rows[0] + ce_rows[0]), grads


@dataclasses.dataclass
class TrainReport:
    """Per-epoch means (over samples) plus final holdout-free summary."""

    epoch_elbo: list
    epoch_label_loglik: list
    epoch_temperature: list
    final_ece_raw: float
    final_ece_calibrated: float

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


def train(dataset: CalibrationDataset, cfg: TrainConfig = TrainConfig()):
    """Fit a model on a calibration dataset; returns (model, report).

    Deterministic for fixed (dataset, config): one generator seeded with
    ``cfg.seed`` drives, in order, model init, then per epoch a permutation
    and per batch one reparameterization draw per row. Batches are
    ``ceil(n / batch_size)`` contiguous slices of the epoch permutation.

    Raises TrainingDivergedError if a batch objective turns non-finite.
    """
    g = nncore.rng(cfg.seed)
    model = init_model(dataset.d, dataset.k, cfg, g)
    if cfg.freeze_vae:
        params = nncore.mlp_params(model.temp_mlp)
    else:
        params = _model_params(model)
    opt = nncore.AdamState.create(params, lr=cfg.lr)

    n = dataset.n
    epoch_elbo, epoch_ce, epoch_temp = [], [], []
    for epoch in range(cfg.epochs):
        perm = g.permutation(n)
        sums = np.zeros(3)
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            noise = g.standard_normal((len(idx), cfg.d_z))
            elbo_rows, ce_rows, temps, grads = _batch_terms(
                model, dataset.features[idx], dataset.logits[idx],
                dataset.labels[idx], noise,
                elbo_weight=cfg.elbo_weight, ce_weight=cfg.ce_weight,
                route_ce=cfg.route_ce_through_vae, scale=1.0 / len(idx))
            value = (cfg.elbo_weight * elbo_rows.mean()
                     + cfg.ce_weight * ce_rows.mean())
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite objective at epoch {epoch}, batch {batch_index}")
            if cfg.freeze_vae:
                garr = nncore.mlp_grad_arrays(grads.temp)
            else:
                garr = _grad_arrays(grads)
            nncore.adam_step(opt, params, [-a for a in garr])
            sums += (elbo_rows.sum(), ce_rows.sum(), temps.sum())
        epoch_elbo.append(sums[0] / n)
        epoch_ce.append(sums[1] / n)
        epoch_temp.append(sums[2] / n)

    temps, _ = calibrate(model, dataset)
    report = TrainReport(
        epoch_elbo=epoch_elbo, epoch_label_loglik=epoch_ce,
        epoch_temperature=epoch_temp,
        final_ece_raw=metrics.ece(dataset, 1.0),
        final_ece_calibrated=metrics.ece(dataset, temps))
    return model, report


# ---------------------------------------------------------------------------
# persistence

def _mlp_to_json(mlp: nncore.Mlp) -> dict:
    return {"dims": mlp.dims,
            "output_activation": mlp.output_activation,
            "weights": [w.tolist() for w in mlp.weights],
            "biases": [b.tolist() for b in mlp.biases]}


def _mlp_from_json(payload: dict) -> nncore.Mlp:
    try:
        weights = [np.asarray(w, dtype=np.float64) for w in payload["weights"]]
        biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
        dims = list(payload["dims"])
        activation = payload["output_activation"]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed MLP block: {exc}") from exc
    mlp = nncore.Mlp(weights=weights, biases=biases, output_activation=activation)
    if len(weights) != len(biases) or not weights:
        raise ModelFormatError("malformed MLP block: layer count mismatch")
    for w, b in zip(weights, biases):
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise ModelFormatError("malformed MLP block: bad layer shapes")
    if mlp.dims != dims:
        raise ModelFormatError("MLP dims do not match stored weights")
    return mlp


def save_model(model: AdaTsModel, path) -> None:
    payload = {
        "kind": "adats",
        "version": 1,
        "dims": {"d": model.d, "k": model.k, "d_z": model.d_z},
        "temp_floor": model.temp_floor,
        "encoder": _mlp_to_json(model.encoder),
        "decoder": _mlp_to_json(model.decoder),
        "temp_mlp": _mlp_to_json(model.temp_mlp),
        "priors": [{"mean": m.tolist(), "log_std": s.tolist()}
                   for m, s in zip(model.prior_means, model.prior_log_stds)],
        "metadata": model.metadata,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> AdaTsModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "adats":
        raise ModelFormatError("not an adaptive scaler file (missing kind == 'adats')")
    if payload.get("version") != 1:
        raise ModelFormatError(f"unsupported model version {payload.get('version')!r}")
    try:
        priors = payload["priors"]
        model = AdaTsModel(
            encoder=_mlp_from_json(payload["encoder"]),
            decoder=_mlp_from_json(payload["decoder"]),
            temp_mlp=_mlp_from_json(payload["temp_mlp"]),
            prior_means=np.asarray([p["mean"] for p in priors],
                                   dtype=np.float64),
            prior_log_stds=np.asarray([p["log_std"] for p in priors],
                                      dtype=np.float64),
            temp_floor=float(payload["temp_floor"]),
            metadata=payload.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc
    pm, pl = model.prior_means, model.prior_log_stds
    if pm.ndim != 2 or pm.shape != pl.shape:
        raise ModelFormatError("prior arrays must be (k, d_z) and congruent")
    k, dz = pm.shape
    dims = payload.get("dims", {})
    if dims != {"d": model.d, "k": k, "d_z": dz}:
        raise ModelFormatError("dims block disagrees with stored parameters")
    enc_dims, dec_dims, t_dims = (model.encoder.dims, model.decoder.dims,
                                  model.temp_mlp.dims)
    if enc_dims[-1] != 2 * dz or dec_dims[0] != dz or dec_dims[-1] != enc_dims[0]:
        raise ModelFormatError("encoder/decoder/latent dimensions disagree")
    if t_dims[0] != k or t_dims[-1] != 1:
        raise ModelFormatError("temperature head must map k prior scores to 1 value")
    if model.temp_floor <= 0 or not np.isfinite(model.temp_floor):
        raise ModelFormatError("temp_floor must be a positive finite number")
    return model

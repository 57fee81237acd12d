"""Latent estimation with a dependency-sparsity penalty.

Trains a deterministic autoencoder or a Gaussian-posterior VAE whose
objective adds ``alpha *`` (mean absolute decoder-Jacobian entry) to the
usual reconstruction / KL terms, then extracts the decoder's empirical
support. Observations are standardized per coordinate inside the trainer;
the scaler is stored with the estimator, and reconstruction quality is
reported in original units. Training is bit-reproducible given the seed.

The penalty is evaluated at the latents the decoder is actually queried
with: one posterior draw per datum per step in VAE mode, the encoder
output in AE mode. With ``alpha == 0`` the penalty term is skipped
entirely and reported as zero, so the trainer reduces to a plain
beta-VAE/AE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np

from . import nnet
from .errors import ConfigError, FormatError, TrainingError
from .ioutil import atomic_write_text
from .setalg import SupportMatrix
from .synth import Dataset, support_of_jacobian

_STREAM_INIT = 41
_STREAM_EPOCH = 42

SUPPORT_SLICE = 1000  # trailing samples used for empirical support extraction
RECON_FLAG_RATIO = 0.05  # flag runs whose MSE exceeds this fraction of var(x)

# learning-rate schedule: constant, then a cosine tail down to a small floor
# so penalized entries settle instead of jittering around zero
DECAY_START_FRACTION = 0.6
DECAY_FLOOR = 0.02


def _scheduled_lr(base: float, epoch: int, epochs: int) -> float:
    frac = (epoch - DECAY_START_FRACTION * epochs) / ((1 - DECAY_START_FRACTION) * epochs)
    if frac <= 0:
        return base
    return base * (DECAY_FLOOR + (1 - DECAY_FLOOR) * 0.5 * (1 + np.cos(np.pi * frac)))


@dataclass(frozen=True)
class EstimatorConfig:
    """Architecture, objective weights, and schedule of one training run."""

    mode: str = "vae"
    d_z: int = 3
    depth: int = 2
    width: int = 64
    alpha: float = 0.05
    beta: float = 0.05
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 3e-3
    seed: int = 0
    tau: float = 0.05

    def __post_init__(self):
        if self.mode not in ("vae", "ae"):
            raise ConfigError(f"mode must be 'vae' or 'ae', got {self.mode!r}")
        if self.d_z < 1:
            raise ConfigError(f"d_z must be >= 1, got {self.d_z}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.depth < 0 or (self.depth > 0 and self.width < 1):
            raise ConfigError("bad architecture")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must be in [0, 1), got {self.tau}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "d_z": self.d_z,
            "depth": self.depth,
            "width": self.width,
            "alpha": self.alpha,
            "beta": self.beta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        return cls(**d)


class LossComponents(NamedTuple):
    total: float
    recon: float
    kl: float
    penalty: float  # the weighted term alpha * mean|J|; 0 when alpha == 0


class EpochStats(NamedTuple):
    epoch: int
    total: float
    recon: float
    kl: float
    penalty: float


def _split_posterior(enc_out: np.ndarray, d_z: int) -> tuple[np.ndarray, np.ndarray]:
    return enc_out[:, :d_z], enc_out[:, d_z:]


def loss(
    batch: np.ndarray,
    encoder: nnet.NetParams,
    decoder: nnet.NetParams,
    alpha: float,
    beta: float,
    mode: str = "vae",
    noise: Optional[np.ndarray] = None,
) -> tuple[float, LossComponents]:
    """Objective value on one batch.

    VAE: batch-mean squared reconstruction error (summed over observed
    coordinates) + beta * batch-mean KL(posterior || standard normal)
    + alpha * batch-mean of the mean absolute decoder-Jacobian entry at the
    sampled latents. ``noise`` is the reparameterization draw (one row per
    datum); AE mode ignores it and drops the KL.
    """
    total, comps, _, _ = _loss_and_grads(
        batch, encoder, decoder, alpha, beta, mode, noise, want_grads=False
    )
    return total, comps


def _loss_and_grads(
    batch: np.ndarray,
    encoder: nnet.NetParams,
    decoder: nnet.NetParams,
    alpha: float,
    beta: float,
    mode: str,
    noise: Optional[np.ndarray],
    want_grads: bool = True,
):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a nonempty 2-D array")
    n = x.shape[0]
    d_z = decoder.in_dim

    enc_out, enc_cache = nnet.forward(encoder, x)
    if mode == "vae":
        if noise is None:
            raise ValueError("VAE mode needs a reparameterization draw")
        mu, logvar = _split_posterior(enc_out, d_z)
        sigma = np.exp(0.5 * logvar)
        z = mu + sigma * noise
        kl = float(np.sum(0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar)) / n)
    elif mode == "ae":
        z = enc_out
        kl = 0.0
    else:
        raise ValueError(f"unknown mode {mode!r}")

    x_hat, dec_cache = nnet.forward(decoder, z)
    resid = x_hat - x
    recon = float(np.sum(resid**2) / n)

    pen_value = 0.0
    pen_grads = None
    if alpha > 0:
        pen_grads, pen_value = nnet.jacobian_penalty_grad(decoder, z)
    penalty_term = alpha * pen_value
    total = recon + beta * kl + penalty_term
    comps = LossComponents(total, recon, kl, penalty_term)
    if not want_grads:
        return total, comps, None, None

    dec_grads, dz = nnet.backward(decoder, dec_cache, 2.0 * resid / n)
    if pen_grads is not None:
        dec_grads = [
            (gw + alpha * pw, gb + alpha * pb)
            for (gw, gb), (pw, pb) in zip(dec_grads, pen_grads)
        ]
    if mode == "vae":
        # the penalty depends on z only through piecewise-constant rectifier
        # slopes, so no penalty gradient flows into the encoder
        dmu = dz + beta * mu / n
        dlogvar = dz * (0.5 * sigma * noise) + beta * (np.exp(logvar) - 1.0) / (2 * n)
        enc_out_grad = np.concatenate([dmu, dlogvar], axis=1)
    else:
        enc_out_grad = dz
    enc_grads, _ = nnet.backward(encoder, enc_cache, enc_out_grad)
    return total, comps, enc_grads, dec_grads


@dataclass(frozen=True)
class TrainedEstimator:
    """Fitted encoder/decoder with history and extracted empirical support."""

    encoder: nnet.NetParams
    decoder: nnet.NetParams
    config: EstimatorConfig
    history: tuple[EpochStats, ...]
    empirical_support: SupportMatrix
    x_mean: np.ndarray
    x_std: np.ndarray
    recon_ratio: float  # final reconstruction MSE / variance of x
    flagged: bool

    @property
    def d_x(self) -> int:
        return self.encoder.in_dim

    @property
    def d_z(self) -> int:
        return self.decoder.in_dim

    def to_dict(self) -> dict:
        def net_dict(net):
            return {
                "weights": [w.tolist() for w, _ in net.layers],
                "biases": [b.tolist() for _, b in net.layers],
                "slopes": list(net.slopes),
            }

        return {
            "config": self.config.to_dict(),
            "encoder": net_dict(self.encoder),
            "decoder": net_dict(self.decoder),
            "history": [list(h) for h in self.history],
            "empirical_support": self.empirical_support.to_text().splitlines(),
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "recon_ratio": self.recon_ratio,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedEstimator":
        def net_from(nd):
            return nnet.make_net(
                [
                    (np.asarray(w), np.asarray(b))
                    for w, b in zip(nd["weights"], nd["biases"])
                ],
                slope=nd["slopes"] if nd["slopes"] else 0.2,
            )

        return cls(
            encoder=net_from(d["encoder"]),
            decoder=net_from(d["decoder"]),
            config=EstimatorConfig.from_dict(d["config"]),
            history=tuple(EpochStats(int(h[0]), *map(float, h[1:])) for h in d["history"]),
            empirical_support=SupportMatrix.from_text(
                "\n".join(d["empirical_support"]), require_nonzero=False
            ),
            x_mean=np.asarray(d["x_mean"], dtype=np.float64),
            x_std=np.asarray(d["x_std"], dtype=np.float64),
            recon_ratio=float(d["recon_ratio"]),
            flagged=bool(d["flagged"]),
        )


def train(dataset: Dataset, config: EstimatorConfig) -> TrainedEstimator:
    """Shuffled-minibatch Adam on the sparsity-regularized objective.

    Deterministic given ``config.seed``. After training, the empirical
    support is extracted from the decoder Jacobian at the posterior means
    of the trailing support slice, thresholded at ``config.tau`` relative
    to the peak entry.
    """
    if dataset.n < 1:
        raise ConfigError("cannot train on an empty dataset")
    if config.d_z > dataset.d_x:
        raise ConfigError(
            f"estimator d_z={config.d_z} exceeds observed dimension {dataset.d_x}"
        )
    x_raw = dataset.x
    x_mean = x_raw.mean(axis=0)
    x_std = x_raw.std(axis=0)
    x_std = np.where(x_std < 1e-12, 1.0, x_std)
    x = (x_raw - x_mean) / x_std
    n, d_x = x.shape
    d_z = config.d_z

    init_rng = np.random.default_rng([config.seed, _STREAM_INIT])
    enc_out_dim = 2 * d_z if config.mode == "vae" else d_z
    hidden = [config.width] * config.depth
    encoder = nnet.init_mlp(init_rng, [d_x] + hidden + [enc_out_dim], slope=0.2)
    decoder = nnet.init_mlp(init_rng, [d_z] + hidden + [d_x], slope=0.2)
    enc_state = nnet.init_opt_state(encoder, learning_rate=config.learning_rate)
    dec_state = nnet.init_opt_state(decoder, learning_rate=config.learning_rate)

    epoch_rng = np.random.default_rng([config.seed, _STREAM_EPOCH])
    history: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        lr = _scheduled_lr(config.learning_rate, epoch, config.epochs)
        enc_state.learning_rate = dec_state.learning_rate = lr
        order = epoch_rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = x[idx]
            noise = (
                epoch_rng.standard_normal((len(idx), d_z))
                if config.mode == "vae"
                else None
            )
            total, comps, enc_grads, dec_grads = _loss_and_grads(
                batch, encoder, decoder, config.alpha, config.beta, config.mode, noise
            )
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size + 1}",
                    history,
                )
            encoder, enc_state = nnet.adam_step(encoder, enc_grads, enc_state)
            decoder, dec_state = nnet.adam_step(decoder, dec_grads, dec_state)
            sums += len(idx) * np.array([total, comps.recon, comps.kl, comps.penalty])
        history.append(EpochStats(epoch, *(sums / n)))

    def encode_std(batch: np.ndarray) -> np.ndarray:
        out, _ = nnet.forward(encoder, batch)
        return out[:, :d_z] if config.mode == "vae" else out

    slice_x = x[-min(SUPPORT_SLICE, n):]
    latents = encode_std(slice_x)
    empirical = support_of_jacobian(
        lambda zz: nnet.jacobian(decoder, zz), latents, config.tau
    )

    x_hat_std, _ = nnet.forward(decoder, encode_std(x))
    x_hat = x_hat_std * x_std + x_mean
    mse = float(np.mean((x_hat - x_raw) ** 2))
    var = float(np.mean(x_raw.var(axis=0)))
    ratio = mse / var if var > 0 else np.inf
    return TrainedEstimator(
        encoder=encoder,
        decoder=decoder,
        config=config,
        history=tuple(history),
        empirical_support=empirical,
        x_mean=x_mean,
        x_std=x_std,
        recon_ratio=ratio,
        flagged=ratio > RECON_FLAG_RATIO,
    )


def encode(estimator: TrainedEstimator, x: np.ndarray) -> np.ndarray:
    """Posterior means (VAE) or encoder outputs (AE), row-aligned with x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"x must be 2-D, got shape {x.shape}")
    if x.shape[1] != estimator.d_x:
        raise ValueError(f"x has {x.shape[1]} columns, expected {estimator.d_x}")
    if x.shape[0] == 0:
        return np.empty((0, estimator.d_z))
    std = (x - estimator.x_mean) / estimator.x_std
    out, _ = nnet.forward(estimator.encoder, std)
    return out[:, : estimator.d_z] if estimator.config.mode == "vae" else out


def decoder_mean_abs_jacobian(estimator: TrainedEstimator, x: np.ndarray) -> float:
    """Mean |decoder Jacobian entry| at the latents encoded from x."""
    latents = encode(estimator, x)
    return nnet.jacobian_penalty(estimator.decoder, latents)


def estimator_to_json(
    estimator: TrainedEstimator, path: Union[str, Path], meta: Optional[dict] = None
) -> None:
    d = estimator.to_dict()
    if meta:
        d["meta"] = meta
    atomic_write_text(path, json.dumps(d, sort_keys=True, indent=1) + "\n")


def estimator_from_json(path: Union[str, Path]) -> TrainedEstimator:
    try:
        return TrainedEstimator.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad estimator file {path}: {exc}") from exc


def write_train_log(
    history: tuple[EpochStats, ...], path: Union[str, Path], meta: Optional[dict] = None
) -> None:
    lines = []
    if meta:
        lines.append("# " + json.dumps(meta, sort_keys=True))
    lines.append("epoch,total,recon,kl,penalty")
    for h in history:
        lines.append(
            f"{h.epoch},{h.total:.17g},{h.recon:.17g},{h.kl:.17g},{h.penalty:.17g}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")

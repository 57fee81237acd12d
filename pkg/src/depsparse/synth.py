"""Ground-truth nonlinear mixing with prescribed Jacobian support.

Each observed coordinate gets its own small leaky-rectifier network over
exactly the latent coordinates in its support row, so the analytic
Jacobian of the composed map is identically zero off-support by
construction. Generators are deterministic given their seed; independent
substreams are derived as ``default_rng([seed, stream])``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import nnet
from .errors import ConfigError, DegenerateMapError, FormatError, GenerationError
from .ioutil import atomic_write_text
from .setalg import SupportMatrix, element_identifiability_predicted

LEAKY_SLOPE = 0.2

# substream tags so that one experiment seed drives independent generators
_STREAM_SUPPORT = 31
_STREAM_PARAMS = 21
_STREAM_PROBE = 22
_STREAM_LATENTS = 11
_STREAM_NOISE = 12


@dataclass(frozen=True)
class MixingArch:
    """Hidden depth and width of each per-output mixing network."""

    depth: int = 2
    width: int = 16

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.depth > 0 and self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class LatentPrior:
    """Latent distribution: independent standard normal, or a correlated
    zero-mean normal with the given covariance."""

    d_z: int
    kind: str = "standard-normal"
    cov: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("standard-normal", "correlated-normal"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if self.kind == "correlated-normal":
            if self.cov is None:
                raise ConfigError("correlated-normal prior needs a covariance")
            cov = np.asarray(self.cov, dtype=np.float64)
            if cov.shape != (self.d_z, self.d_z):
                raise ConfigError(f"covariance shape {cov.shape} != ({self.d_z}, {self.d_z})")
            if not np.allclose(cov, cov.T):
                raise ConfigError("covariance must be symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ConfigError("covariance must be positive definite") from exc
            object.__setattr__(self, "cov", cov)
        elif self.cov is not None:
            raise ConfigError("standard-normal prior takes no covariance")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.d_z))
        if self.kind == "correlated-normal":
            z = z @ np.linalg.cholesky(self.cov).T
        return z

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "d_z": self.d_z}
        if self.cov is not None:
            d["cov"] = self.cov.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LatentPrior":
        cov = np.asarray(d["cov"]) if d.get("cov") is not None else None
        return cls(d_z=int(d["d_z"]), kind=d["kind"], cov=cov)


@dataclass(frozen=True)
class GroundTruthModel:
    """Masked nonlinear mixing: one network per observed coordinate.

    Each output is ``scale * (anchor_gain * z[anchor] + net(z[row])) +
    offset``: a linear term on one matched latent plus a masked nonlinear
    network over exactly the supported coordinates. The anchor keeps the
    composed map well conditioned (near-invertible for square systems)
    while the network carries the nonlinearity; scale/offset standardize
    each output over the construction probe.
    """

    support: SupportMatrix
    nets: tuple[nnet.NetParams, ...]
    anchors: tuple[int, ...]  # 1-based latent column per output row
    anchor_gain: float
    out_scale: np.ndarray
    out_offset: np.ndarray
    prior: LatentPrior
    arch: MixingArch
    seed: int
    probe_min_singular: float
    probe_size: int
    attempts: int
    # orthogonal post-mixing applied to fully dense supports, where no axis
    # is structurally distinguished (None otherwise)
    output_mix: Optional[np.ndarray] = None

    @property
    def d_x(self) -> int:
        return self.support.d_x

    @property
    def d_z(self) -> int:
        return self.support.d_z

    def _columns(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.support.entries[i])

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        if z.shape[1] != self.d_z:
            raise ValueError(f"latent dimension {z.shape[1]} != {self.d_z}")
        raw = np.empty((z.shape[0], self.d_x))
        for i in range(self.d_x):
            out, _ = nnet.forward(self.nets[i], z[:, self._columns(i)])
            raw[:, i] = self.anchor_gain * z[:, self.anchors[i] - 1] + out[:, 0]
        if self.output_mix is not None:
            raw = raw @ self.output_mix.T
        x = self.out_scale * raw + self.out_offset
        return x[0] if single else x

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        """Batched d_x x d_z Jacobian; exact zeros outside the support."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        jac = np.zeros((z.shape[0], self.d_x, self.d_z))
        for i in range(self.d_x):
            cols = self._columns(i)
            ji = nnet.jacobian(self.nets[i], z[:, cols])
            jac[:, i, cols] = ji[:, 0, :]
            jac[:, i, self.anchors[i] - 1] += self.anchor_gain
        if self.output_mix is not None:
            jac = np.matmul(self.output_mix, jac)
        jac = self.out_scale[None, :, None] * jac
        return jac[0] if single else jac

    def to_dict(self) -> dict:
        return {
            "support": {
                "d_x": self.d_x,
                "d_z": self.d_z,
                "rows": self.support.to_text().splitlines()[1:],
            },
            "arch": {"depth": self.arch.depth, "width": self.arch.width},
            "slope": LEAKY_SLOPE,
            "prior": self.prior.to_dict(),
            "seed": self.seed,
            "anchors": list(self.anchors),
            "anchor_gain": self.anchor_gain,
            "out_scale": self.out_scale.tolist(),
            "out_offset": self.out_offset.tolist(),
            "output_mix": None if self.output_mix is None else self.output_mix.tolist(),
            "probe": {
                "min_singular_value": self.probe_min_singular,
                "n_probe": self.probe_size,
                "attempts": self.attempts,
            },
            "nets": [
                {
                    "weights": [w.tolist() for w, _ in net.layers],
                    "biases": [b.tolist() for _, b in net.layers],
                }
                for net in self.nets
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthModel":
        sup_d = d["support"]
        text = f"{sup_d['d_x']} {sup_d['d_z']}\n" + "\n".join(sup_d["rows"])
        support = SupportMatrix.from_text(text)
        nets = tuple(
            nnet.make_net(
                [
                    (np.asarray(w), np.asarray(b))
                    for w, b in zip(nd["weights"], nd["biases"])
                ],
                slope=d["slope"],
            )
            for nd in d["nets"]
        )
        return cls(
            support=support,
            nets=nets,
            anchors=tuple(int(a) for a in d["anchors"]),
            anchor_gain=float(d["anchor_gain"]),
            out_scale=np.asarray(d["out_scale"], dtype=np.float64),
            out_offset=np.asarray(d["out_offset"], dtype=np.float64),
            output_mix=(
                None
                if d.get("output_mix") is None
                else np.asarray(d["output_mix"], dtype=np.float64)
            ),
            prior=LatentPrior.from_dict(d["prior"]),
            arch=MixingArch(**d["arch"]),
            seed=int(d["seed"]),
            probe_min_singular=float(d["probe"]["min_singular_value"]),
            probe_size=int(d["probe"]["n_probe"]),
            attempts=int(d["probe"]["attempts"]),
        )


def _has_perfect_matching(entries: np.ndarray) -> bool:
    # square boolean matrix: a system diffeomorphism needs a nonzero
    # generalized diagonal in the support
    row, col = linear_sum_assignment(entries.astype(float), maximize=True)
    return bool(entries[row, col].all())


def make_support(
    d_x: int,
    d_z: int,
    pattern: str,
    seed: int = 0,
    *,
    density: float = 0.5,
    max_resamples: int = 1000,
    custom_path: Optional[Union[str, Path]] = None,
) -> SupportMatrix:
    """Build a dependency structure: ``dense``, ``diverse``, or ``custom``.

    ``diverse`` rejection-samples Bernoulli(density) matrices until every
    row and column is nonzero, a square matrix admits a perfect matching,
    and the structural diversity check predicts element-wise recovery.
    ``custom`` loads and validates a support text file.
    """
    if pattern == "custom":
        if custom_path is None:
            raise ConfigError("custom pattern requires a support file path")
        try:
            text = Path(custom_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read support file {custom_path}: {exc}") from exc
        support = SupportMatrix.from_text(text)
        if (d_x, d_z) != (support.d_x, support.d_z):
            raise ConfigError(
                f"support file is {support.d_x}x{support.d_z}, "
                f"config says {d_x}x{d_z}"
            )
        return support

    if not d_x >= d_z >= 1:
        raise ConfigError(f"need d_x >= d_z >= 1, got d_x={d_x}, d_z={d_z}")
    if pattern == "dense":
        return SupportMatrix.dense(d_x, d_z)
    if pattern != "diverse":
        raise ConfigError(f"unknown support pattern {pattern!r}")

    rng = np.random.default_rng([seed, _STREAM_SUPPORT])
    for _ in range(max_resamples):
        entries = rng.random((d_x, d_z)) < density
        if not (entries.any(axis=1).all() and entries.any(axis=0).all()):
            continue
        if d_x == d_z and not _has_perfect_matching(entries):
            continue
        support = SupportMatrix(entries)
        if element_identifiability_predicted(support):
            return support
    raise GenerationError(
        f"no diverse {d_x}x{d_z} support found in {max_resamples} resamples; "
        "try another seed or density"
    )


def _match_anchors(support: SupportMatrix) -> tuple[int, ...]:
    """One supported latent per row, via maximum matching where possible."""
    entries = support.entries.astype(float)
    rows, cols = linear_sum_assignment(entries, maximize=True)
    anchor = {}
    for r, c in zip(rows, cols):
        if support.entries[r, c]:
            anchor[int(r)] = int(c)
    out = []
    for i in range(support.d_x):
        out.append(anchor.get(i, int(np.flatnonzero(support.entries[i])[0])) + 1)
    return tuple(out)


ANCHOR_GAIN = 1.0  # linear term on the matched latent, pre-standardization
EDGE_LEVEL = 0.35  # target mean |Jacobian| of every supported edge, pre-standardization


def _haar_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _balance_net(net, probe_cols, target):
    """Equalize per-input mean |Jacobian| to ``target`` (two passes)."""
    for _ in range(2):
        jac = nnet.jacobian(net, probe_cols)[:, 0, :]
        mean_abs = np.abs(jac).mean(axis=0)
        if (mean_abs < 1e-9).any():
            return None
        w1, b1 = net.layers[0]
        w1 = w1 * (target / mean_abs)[None, :]
        net = nnet.make_net(((w1, b1),) + net.layers[1:], net.slopes)
    jac = nnet.jacobian(net, probe_cols)[:, 0, :]
    mean_abs = np.abs(jac).mean(axis=0)
    if (mean_abs < 1e-9).any():
        return None
    # output rescale so the weakest edge sits exactly at the target level
    w_last, b_last = net.layers[-1]
    s = target / mean_abs.min()
    return nnet.make_net(net.layers[:-1] + ((w_last * s, b_last * s),), net.slopes)


def make_ground_truth(
    support: SupportMatrix,
    arch: Optional[MixingArch] = None,
    seed: int = 0,
    *,
    prior: Optional[LatentPrior] = None,
    min_singular: float = 1e-3,
    n_probe: int = 1000,
    max_resamples: int = 50,
) -> GroundTruthModel:
    """Sample anchored masked networks, rejecting degenerate draws.

    Construction per output row: a linear anchor on one matched latent plus
    a random masked network whose per-input derivative mass is equalized,
    so every supported edge carries comparable influence. Outputs are
    standardized to mean 0, std 1 over a probe sample. A candidate is
    rejected when (a) for square systems the smallest Jacobian singular
    value over the probe does not exceed ``min_singular`` (injectivity
    proxy), or (b) the empirical support read back from the probe at the
    default threshold does not reproduce the declared support.
    """
    arch = arch or MixingArch()
    prior = prior or LatentPrior(support.d_z)
    if prior.d_z != support.d_z:
        raise ConfigError(f"prior dimension {prior.d_z} != support d_z {support.d_z}")
    rng = np.random.default_rng([seed, _STREAM_PARAMS])
    probe = prior.sample(np.random.default_rng([seed, _STREAM_PROBE]), n_probe)
    anchors = _match_anchors(support)

    dense = bool(support.entries.all()) and support.d_x > 1
    for attempt in range(1, max_resamples + 1):
        nets = []
        for i in range(1, support.d_x + 1):
            cols = [j - 1 for j in support.row_set(i)]
            sizes = [len(cols)] + [arch.width] * arch.depth + [1]
            net = nnet.init_mlp(rng, sizes, slope=LEAKY_SLOPE, bias_scale=0.5)
            net = _balance_net(net, probe[:, cols], EDGE_LEVEL * ANCHOR_GAIN)
            if net is None:
                break
            nets.append(net)
        if len(nets) != support.d_x:
            continue
        output_mix = _haar_orthogonal(rng, support.d_x) if dense else None

        def assemble(scale, offset, smin):
            return GroundTruthModel(
                support=support,
                nets=tuple(nets),
                anchors=anchors,
                anchor_gain=ANCHOR_GAIN,
                out_scale=scale,
                out_offset=offset,
                output_mix=output_mix,
                prior=prior,
                arch=arch,
                seed=seed,
                probe_min_singular=smin,
                probe_size=n_probe,
                attempts=attempt,
            )

        x = assemble(np.ones(support.d_x), np.zeros(support.d_x), np.nan)(probe)
        std = x.std(axis=0)
        if (std < 1e-8).any():
            continue
        model = assemble(1.0 / std, -x.mean(axis=0) / std, np.nan)
        jac = model.jacobian(probe)
        svals = np.linalg.svd(jac, compute_uv=False)
        smin = float(svals.min())
        if support.d_x == support.d_z and smin <= min_singular:
            continue
        peak = np.abs(jac).max(axis=0)
        if not np.array_equal(peak > 0.05 * peak.max(), support.entries):
            continue  # an edge too weak (or spurious) at the default threshold
        return assemble(model.out_scale, model.out_offset, smin)
    raise GenerationError(
        f"no well-conditioned mixing found in {max_resamples} resamples "
        f"(min singular value <= {min_singular} or unbalanced support); "
        "try a different seed or architecture"
    )


@dataclass(frozen=True)
class Dataset:
    """Paired latent/observed samples with optional additive noise."""

    z: np.ndarray
    x: np.ndarray
    noise_std: Union[float, np.ndarray]
    seed: int

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if z.ndim != 2 or x.ndim != 2 or z.shape[0] != x.shape[0]:
            raise ValueError(f"bad dataset shapes z={z.shape}, x={x.shape}")
        z.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def to_csv(self, path: Union[str, Path], meta: Optional[dict] = None) -> None:
        path = Path(path)
        header = ",".join(
            [f"z_{j}" for j in range(1, self.d_z + 1)]
            + [f"x_{j}" for j in range(1, self.d_x + 1)]
        )
        lines = []
        meta_full = dict(meta or {})
        meta_full.setdefault(
            "noise_std",
            self.noise_std.tolist()
            if isinstance(self.noise_std, np.ndarray)
            else float(self.noise_std),
        )
        meta_full.setdefault("seed", self.seed)
        lines.append("# " + json.dumps(meta_full, sort_keys=True))
        lines.append(header)
        both = np.hstack([self.z, self.x])
        for row in both:
            lines.append(",".join(f"{v:.17g}" for v in row))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Dataset":
        raw = Path(path).read_text().splitlines()
        meta: dict = {}
        idx = 0
        while idx < len(raw) and raw[idx].startswith("#"):
            try:
                meta = json.loads(raw[idx].lstrip("# "))
            except json.JSONDecodeError:
                pass
            idx += 1
        if idx >= len(raw):
            raise FormatError(f"{path}: no header row")
        names = raw[idx].split(",")
        d_z = sum(1 for c in names if c.startswith("z_"))
        d_x = sum(1 for c in names if c.startswith("x_"))
        if d_z + d_x != len(names) or d_z < 1 or d_x < 1:
            raise FormatError(f"{path}: bad header {raw[idx]!r}")
        body = [ln for ln in raw[idx + 1 :] if ln.strip()]
        data = (
            np.array([[float(v) for v in ln.split(",")] for ln in body])
            if body
            else np.empty((0, d_z + d_x))
        )
        if data.size and data.shape[1] != d_z + d_x:
            raise FormatError(f"{path}: row width != header width")
        noise = meta.get("noise_std", 0.0)
        if isinstance(noise, list):
            noise = np.asarray(noise, dtype=np.float64)
        return cls(
            z=data[:, :d_z],
            x=data[:, d_z:],
            noise_std=noise,
            seed=int(meta.get("seed", 0)),
        )


def sample_dataset(
    model: GroundTruthModel,
    n: int,
    noise_std: Union[float, np.ndarray] = 0.0,
    seed: int = 0,
) -> Dataset:
    """Draw latents from the prior and push them through the mixing.

    ``noise_std`` is the per-coordinate scale of independent additive
    Gaussian observation noise; a vector gives one scale per observed
    coordinate.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    noise = np.asarray(noise_std, dtype=np.float64)
    if (noise < 0).any():
        raise ValueError("noise_std must be nonnegative")
    if noise.ndim not in (0, 1) or (noise.ndim == 1 and noise.shape[0] != model.d_x):
        raise ValueError(f"noise_std must be scalar or length {model.d_x}")
    z = model.prior.sample(np.random.default_rng([seed, _STREAM_LATENTS]), n)
    x = model(z) if n > 0 else np.empty((0, model.d_x))
    if noise.any():
        eps = np.random.default_rng([seed, _STREAM_NOISE]).standard_normal(x.shape)
        x = x + eps * noise
    return Dataset(
        z=z,
        x=x,
        noise_std=noise_std if np.ndim(noise_std) else float(noise_std),
        seed=seed,
    )


JacobianSource = Union[GroundTruthModel, Callable[[np.ndarray], np.ndarray]]


def support_of_jacobian(
    jac_source: JacobianSource, samples: np.ndarray, tau: float
) -> SupportMatrix:
    """Empirical support: entries whose peak |Jacobian| over the samples
    exceeds ``tau`` times the global peak (any strictly nonzero entry when
    ``tau == 0``).

    Accepts a model with a ``.jacobian`` method or a callable mapping a
    sample batch to batched Jacobians. The result may contain all-zero
    rows/columns when the map genuinely ignores a coordinate.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be a nonempty 2-D array")
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    jac_fn = jac_source.jacobian if hasattr(jac_source, "jacobian") else jac_source
    jac = np.asarray(jac_fn(samples), dtype=np.float64)
    if jac.ndim != 3 or jac.shape[0] != samples.shape[0]:
        raise ValueError(f"expected batched Jacobians, got shape {jac.shape}")
    peak = np.abs(jac).max(axis=0)
    global_peak = peak.max()
    if global_peak == 0.0:
        raise DegenerateMapError("Jacobian is identically zero over the samples")
    entries = peak > (tau * global_peak if tau > 0 else 0.0)
    return SupportMatrix(entries, require_nonzero=False)


def model_to_json(model: GroundTruthModel, path: Union[str, Path], meta: Optional[dict] = None) -> None:
    d = model.to_dict()
    if meta:
        d["meta"] = meta
    atomic_write_text(path, json.dumps(d, sort_keys=True, indent=1) + "\n")


def model_from_json(path: Union[str, Path]) -> GroundTruthModel:
    try:
        d = json.loads(Path(path).read_text())
        return GroundTruthModel.from_dict(d)
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad model file {path}: {exc}") from exc

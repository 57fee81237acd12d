"""Identification metrics: matched correlations, group-wise R2 probes,
structure recovery, and the sample-based nonlinearity check.

Alignment convention: estimated latents are matched to true latents by
maximizing total absolute correlation (assignment problem); permutations
are stored as 1-based tuples where ``perm[i - 1]`` is the estimated column
matched to true latent ``i``. Spearman is the primary correlation because
rank statistics are exactly invariant under the per-coordinate monotone
reparameterizations left unresolved by element-wise recovery.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import EvaluationError
from .setalg import (
    IndexSet,
    SupportMatrix,
    check_sufficient_diversity,
    index_set,
    verdicts_to_dicts,
)

MCC_METHODS = ("spearman-abs", "pearson-abs")

# kernel-regression constants, recorded in every report
R2_RIDGE = 1e-3
R2_TEST_FRACTION = 0.3
R2_MAX_TRAIN = 2000
R2_MAX_TEST = 2000
R2_MEDIAN_SUBSAMPLE = 1000
RANK_TOL = 1e-6


def _abs_corr_matrix(z_true: np.ndarray, z_hat: np.ndarray, method: str) -> np.ndarray:
    if method not in MCC_METHODS:
        raise ValueError(f"method must be one of {MCC_METHODS}, got {method!r}")
    a, b = np.asarray(z_true, float), np.asarray(z_hat, float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"incompatible shapes {a.shape} vs {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two rows for correlations")
    if method == "spearman-abs":
        a = rankdata(a, axis=0)
        b = rankdata(b, axis=0)
    d = a.shape[1]
    const_a = a.std(axis=0) == 0
    const_b = b.std(axis=0) == 0
    if const_a.any() or const_b.any():
        warnings.warn("constant column in correlation input; its correlations are 0")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(a.T, b.T)[:d, d:]
    corr = np.nan_to_num(corr, nan=0.0)
    return np.abs(corr)


@dataclass(frozen=True)
class MccResult:
    """Mean matched absolute correlation plus the matching permutation."""

    score: float
    permutation: tuple[int, ...]
    method: str
    matched: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "permutation": list(self.permutation),
            "method": self.method,
            "matched": list(self.matched),
        }


def mcc(z_true: np.ndarray, z_hat: np.ndarray, method: str = "spearman-abs") -> MccResult:
    """Assignment-matched mean absolute correlation between latent sets."""
    corr = _abs_corr_matrix(z_true, z_hat, method)
    rows, cols = linear_sum_assignment(corr, maximize=True)
    matched = corr[rows, cols]
    perm = tuple(int(c) + 1 for c in cols)
    return MccResult(float(matched.mean()), perm, method, tuple(float(v) for v in matched))


def _median_pairwise_distance(points: np.ndarray, rng: np.random.Generator) -> float:
    n = points.shape[0]
    if n > R2_MEDIAN_SUBSAMPLE:
        idx = rng.choice(n, R2_MEDIAN_SUBSAMPLE, replace=False)
        points = points[idx]
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    upper = dist[np.triu_indices(points.shape[0], k=1)]
    return float(np.median(upper)) if upper.size else 0.0


def _rbf(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-sq / (2.0 * bandwidth * bandwidth))


@dataclass(frozen=True)
class R2GroupResult:
    reported: float  # clipped to [0, 1]
    raw: float


def r2_group(
    targets: np.ndarray,
    predictors: np.ndarray,
    *,
    seed: int = 0,
) -> R2GroupResult:
    """Held-out R2 of kernel ridge regressions from predictors to targets.

    RBF kernel with the median pairwise predictor distance as bandwidth,
    ridge 1e-3, a 70/30 split (capped at R2_MAX_TRAIN / R2_MAX_TEST rows),
    averaged over target columns. Zero predictor columns give R2 = 0;
    constant target columns contribute 0 with a warning. The reported
    value is clipped below at 0; the raw mean is returned alongside.
    """
    y = np.asarray(targets, float)
    p = np.asarray(predictors, float)
    if y.ndim != 2 or y.shape[1] < 1:
        raise ValueError("targets must be 2-D with at least one column")
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ValueError(f"predictor shape {p.shape} incompatible with targets {y.shape}")
    if p.shape[1] == 0:
        return R2GroupResult(0.0, 0.0)
    n = y.shape[0]
    if n < 10:
        raise ValueError("need at least 10 rows for a train/test split")

    rng = np.random.default_rng([seed, 0x52])
    order = rng.permutation(n)
    n_test = max(1, int(round(n * R2_TEST_FRACTION)))
    test_idx = order[:n_test][:R2_MAX_TEST]
    train_idx = order[n_test:][:R2_MAX_TRAIN]

    p_tr, p_te = p[train_idx], p[test_idx]
    y_tr, y_te = y[train_idx], y[test_idx]
    bandwidth = _median_pairwise_distance(p_tr, rng)
    if bandwidth <= 0:
        bandwidth = 1.0  # constant predictors; predictions will be constant
    k_tr = _rbf(p_tr, p_tr, bandwidth)
    k_te = _rbf(p_te, p_tr, bandwidth)
    solve = np.linalg.solve(
        k_tr + R2_RIDGE * np.eye(k_tr.shape[0]), y_tr - y_tr.mean(axis=0)
    )
    pred = k_te @ solve + y_tr.mean(axis=0)

    scores = []
    for col in range(y.shape[1]):
        ss_tot = float(((y_te[:, col] - y_te[:, col].mean()) ** 2).sum())
        if ss_tot == 0.0:
            warnings.warn(f"constant target column {col + 1}; its R2 is counted as 0")
            scores.append(0.0)
            continue
        ss_res = float(((y_te[:, col] - pred[:, col]) ** 2).sum())
        scores.append(1.0 - ss_res / ss_tot)
    raw = float(np.mean(scores))
    return R2GroupResult(min(max(raw, 0.0), 1.0), raw)


R2_SCORE_NAMES = ("Int", "SymDiff", "CompA", "CompB", "Ref")


@dataclass(frozen=True)
class R2Suite:
    """Group-wise disentanglement probes for one observed split (K, V)."""

    observed_k: tuple[int, ...]
    observed_v: tuple[int, ...]
    scores: dict[str, Optional[float]]
    raw: dict[str, Optional[float]]
    latent_sets: dict[str, tuple[int, ...]]

    def to_dict(self) -> dict:
        return {
            "observed_k": list(self.observed_k),
            "observed_v": list(self.observed_v),
            "scores": dict(self.scores),
            "raw": dict(self.raw),
            "latent_sets": {k: list(v) for k, v in self.latent_sets.items()},
        }


def r2_suite(
    z_true: np.ndarray,
    z_hat: np.ndarray,
    support: SupportMatrix,
    observed_k: Sequence[int],
    observed_v: Sequence[int],
    permutation: Sequence[int],
    *,
    seed: int = 0,
) -> R2Suite:
    """Cross-region predictability scores for one split of observed variables.

    Each score regresses true latents of one region on the estimated latents
    aligned (via ``permutation``) to the opposite region: Int = intersection
    from symmetric difference, SymDiff = the reverse, CompA/CompB = the two
    exclusive directions. Ref regresses all true latents on all estimated
    latents. Scores whose region is empty on either side are reported as
    None (absent), not 0.
    """
    d_z = support.d_z
    if len(permutation) != d_z or sorted(permutation) != list(range(1, d_z + 1)):
        raise ValueError(f"permutation must be a bijection on 1..{d_z}")
    i_k = index_set(support, observed_k)
    i_v = index_set(support, observed_v)
    inter = i_k & i_v
    sym = i_k ^ i_v
    only_k = i_k - i_v
    only_v = i_v - i_k

    def est_cols(latents: IndexSet) -> list[int]:
        return [permutation[i - 1] - 1 for i in latents]

    def true_cols(latents: IndexSet) -> list[int]:
        return [i - 1 for i in latents]

    pairs = {
        "Int": (inter, sym),
        "SymDiff": (sym, inter),
        "CompA": (only_k, only_v),
        "CompB": (only_v, only_k),
    }
    scores: dict[str, Optional[float]] = {}
    raw: dict[str, Optional[float]] = {}
    for name, (target_set, predictor_set) in pairs.items():
        if not target_set or not predictor_set:
            scores[name] = None
            raw[name] = None
            continue
        res = r2_group(
            z_true[:, true_cols(target_set)],
            z_hat[:, est_cols(predictor_set)],
            seed=seed,
        )
        scores[name] = res.reported
        raw[name] = res.raw
    ref = r2_group(z_true, z_hat, seed=seed)
    scores["Ref"] = ref.reported
    raw["Ref"] = ref.raw
    return R2Suite(
        observed_k=tuple(int(i) for i in observed_k),
        observed_v=tuple(int(i) for i in observed_v),
        scores=scores,
        raw=raw,
        latent_sets={
            "I_K": i_k.as_tuple(),
            "I_V": i_v.as_tuple(),
            "Int": inter.as_tuple(),
            "SymDiff": sym.as_tuple(),
            "CompA": only_k.as_tuple(),
            "CompB": only_v.as_tuple(),
        },
    )


@dataclass(frozen=True)
class StructureMatch:
    """Column matching between two supports and the residual disagreement."""

    permutation: tuple[int, ...]
    shd: int

    def to_dict(self) -> dict:
        return {"permutation": list(self.permutation), "shd": self.shd}


def structure_match(s_true: SupportMatrix, s_hat: SupportMatrix) -> StructureMatch:
    """Column permutation minimizing total Hamming disagreement, plus SHD."""
    if (s_true.d_x, s_true.d_z) != (s_hat.d_x, s_hat.d_z):
        raise ValueError(
            f"dimension mismatch: {s_true.d_x}x{s_true.d_z} vs {s_hat.d_x}x{s_hat.d_z}"
        )
    a = s_true.entries
    b = s_hat.entries
    cost = (a[:, :, None] != b[:, None, :]).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    perm = tuple(int(c) + 1 for c in cols)
    return StructureMatch(perm, int(cost[rows, cols].sum()))


@dataclass(frozen=True)
class NonlinearityVerdict:
    """Jacobian-row rank achieved vs. required for one observed variable."""

    row: int
    achieved: int
    required: int
    passed: bool


def check_sufficient_nonlinearity(
    model,
    support: SupportMatrix,
    samples: np.ndarray,
    rank_tol: float = RANK_TOL,
) -> tuple[NonlinearityVerdict, ...]:
    """Check that each row's Jacobian vectors span its support across samples.

    For each observed row the Jacobians restricted to the supported columns
    are stacked over the samples and the numerical rank (singular values
    above ``rank_tol`` relative to the largest) must reach the row's
    support size. A constant-Jacobian (linear) map fails every row with
    two or more parents.
    """
    samples = np.asarray(samples, float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be a nonempty 2-D array")
    jac_fn = model.jacobian if hasattr(model, "jacobian") else model
    jac = np.asarray(jac_fn(samples), float)
    verdicts = []
    for i in range(1, support.d_x + 1):
        cols = [j - 1 for j in support.row_set(i)]
        required = len(cols)
        stack = jac[:, i - 1, cols]
        svals = np.linalg.svd(stack, compute_uv=False)
        if svals.size == 0 or svals[0] == 0.0:
            achieved = 0
        else:
            achieved = int((svals > rank_tol * svals[0]).sum())
        verdicts.append(NonlinearityVerdict(i, achieved, required, achieved == required))
    return tuple(verdicts)


@dataclass(frozen=True)
class EvaluationReport:
    """Bundled metrics for one trained estimator against its ground truth."""

    mcc_spearman: MccResult
    mcc_pearson: MccResult
    structure: StructureMatch
    r2_suites: tuple[R2Suite, ...]
    diversity: tuple
    element_identifiable_predicted: bool
    nonlinearity: tuple[NonlinearityVerdict, ...]
    hyperparameters: dict

    def to_dict(self) -> dict:
        return {
            "mcc": {
                "spearman-abs": self.mcc_spearman.to_dict(),
                "pearson-abs": self.mcc_pearson.to_dict(),
            },
            "structure": self.structure.to_dict(),
            "r2": [s.to_dict() for s in self.r2_suites],
            "assumptions": {
                "diversity": verdicts_to_dicts(self.diversity),
                "element_identifiable_predicted": self.element_identifiable_predicted,
                "nonlinearity": [
                    {
                        "row": v.row,
                        "achieved": v.achieved,
                        "required": v.required,
                        "passed": v.passed,
                    }
                    for v in self.nonlinearity
                ],
            },
            "hyperparameters": dict(self.hyperparameters),
        }


def evaluate(
    estimator,
    dataset,
    truth,
    splits: Optional[Sequence[tuple[Sequence[int], Sequence[int]]]] = None,
    *,
    nonlinearity_samples: int = 1000,
    seed: int = 0,
) -> EvaluationReport:
    """Full evaluation: encode, match, score structure and group-wise R2.

    ``splits`` lists (K, V) pairs of observed index groups; the default is
    the first observed variable against the rest. The spearman matching
    permutation aligns estimated latents for the R2 probes.
    """
    from .trainer import encode  # local import to avoid a module cycle

    if splits is None:
        rest = tuple(range(2, truth.support.d_x + 1))
        splits = [((1,), rest)] if rest else [((1,), (1,))]

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise EvaluationError(f"stage {name}: {exc}") from exc

    z_hat = stage("encode", lambda: encode(estimator, dataset.x))
    mcc_s = stage("mcc", lambda: mcc(dataset.z, z_hat, "spearman-abs"))
    mcc_p = stage("mcc", lambda: mcc(dataset.z, z_hat, "pearson-abs"))
    structure = stage(
        "structure",
        lambda: structure_match(truth.support, estimator.empirical_support),
    )
    suites = tuple(
        stage(
            "r2",
            lambda k=k, v=v: r2_suite(
                dataset.z, z_hat, truth.support, k, v, mcc_s.permutation, seed=seed
            ),
        )
        for k, v in splits
    )
    diversity = stage("diversity", lambda: check_sufficient_diversity(truth.support))
    nonlin = stage(
        "nonlinearity",
        lambda: check_sufficient_nonlinearity(
            truth, truth.support, dataset.z[:nonlinearity_samples]
        ),
    )
    hyper = {
        "estimator": estimator.config.to_dict(),
        "recon_ratio": estimator.recon_ratio,
        "flagged": estimator.flagged,
        "mcc_primary": "spearman-abs",
        "r2": {
            "ridge": R2_RIDGE,
            "test_fraction": R2_TEST_FRACTION,
            "max_train": R2_MAX_TRAIN,
            "max_test": R2_MAX_TEST,
            "bandwidth": "median pairwise predictor distance",
            "seed": seed,
        },
        "rank_tol": RANK_TOL,
        "alignment": "spearman-abs assignment permutation",
        "nonlinearity_samples": nonlinearity_samples,
    }
    return EvaluationReport(
        mcc_spearman=mcc_s,
        mcc_pearson=mcc_p,
        structure=structure,
        r2_suites=suites,
        diversity=diversity,
        element_identifiable_predicted=all(v.satisfied for v in diversity),
        nonlinearity=nonlin,
        hyperparameters=hyper,
    )

"""Tests for identification metrics, with brute-force assignment oracles."""

import itertools
import warnings

import numpy as np
import pytest

from depsparse import nnet
from depsparse.errors import EvaluationError
from depsparse.setalg import SupportMatrix
from depsparse.synth import make_ground_truth, make_support, sample_dataset
from depsparse.metrics import (
    EvaluationReport,
    MccResult,
    check_sufficient_nonlinearity,
    evaluate,
    mcc,
    r2_group,
    r2_suite,
    structure_match,
)
from depsparse.trainer import EstimatorConfig, TrainedEstimator


# ---------------------------------------------------------------- oracles

def brute_force_mcc(corr_abs):
    d = corr_abs.shape[0]
    best = -1.0
    for perm in itertools.permutations(range(d)):
        best = max(best, float(np.mean([corr_abs[i, perm[i]] for i in range(d)])))
    return best


def brute_force_shd(a, b):
    d = a.shape[1]
    best = None
    for perm in itertools.permutations(range(d)):
        s = int(sum(np.sum(a[:, i] != b[:, perm[i]]) for i in range(d)))
        best = s if best is None else min(best, s)
    return best


def oracle_estimator(d):
    """Estimator whose encode returns the observations unchanged."""
    ident = nnet.make_net([(np.eye(d), np.zeros(d))])
    return TrainedEstimator(
        encoder=ident,
        decoder=ident,
        config=EstimatorConfig(mode="ae", d_z=d, depth=0, width=1, epochs=1),
        history=(),
        empirical_support=SupportMatrix.identity(d),
        x_mean=np.zeros(d),
        x_std=np.ones(d),
        recon_ratio=0.0,
        flagged=False,
    )


# ---------------------------------------------------------------- mcc

def test_mcc_monotone_permutation_is_one():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(500, 3))
    z_hat = np.stack([np.exp(z[:, 2]), z[:, 0] ** 3, np.tanh(z[:, 1])], axis=1)
    res = mcc(z, z_hat, "spearman-abs")
    assert res.score == pytest.approx(1.0, abs=1e-12)
    assert res.permutation == (2, 3, 1)


def test_mcc_independent_latents_scores_low():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(10000, 3))
    z_hat = rng.normal(size=(10000, 3))
    assert mcc(z, z_hat, "spearman-abs").score < 0.1


def test_mcc_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        d = int(rng.integers(2, 7))
        n = 50
        z = rng.normal(size=(n, d))
        z_hat = rng.normal(size=(n, d)) + 0.5 * z @ rng.normal(size=(d, d))
        for method in ("spearman-abs", "pearson-abs"):
            res = mcc(z, z_hat, method)
            from depsparse.metrics import _abs_corr_matrix

            corr = _abs_corr_matrix(z, z_hat, method)
            assert res.score == pytest.approx(brute_force_mcc(corr), abs=1e-12)


def test_mcc_permutation_invariance():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(200, 4))
    perm = [2, 0, 3, 1]
    assert mcc(z, z[:, perm], "spearman-abs").score == pytest.approx(1.0, abs=1e-12)


def test_mcc_monotone_map_invariance():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(300, 3))
    z_hat = rng.normal(size=(300, 3)) + z
    base = mcc(z, z_hat, "spearman-abs")
    warped = np.stack(
        [np.exp(z_hat[:, 0]), z_hat[:, 1] ** 3, np.arctan(z_hat[:, 2])], axis=1
    )
    res = mcc(z, warped, "spearman-abs")
    assert res.score == pytest.approx(base.score, abs=1e-12)
    assert res.permutation == base.permutation


def test_mcc_constant_column_warns_and_zeroes():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(100, 2))
    z_hat = z.copy()
    z_hat[:, 1] = 7.0
    with pytest.warns(UserWarning, match="constant"):
        res = mcc(z, z_hat)
    assert res.matched[1] == 0.0


def test_mcc_shape_validation():
    with pytest.raises(ValueError):
        mcc(np.zeros((10, 2)), np.zeros((9, 2)))
    with pytest.raises(ValueError):
        mcc(np.zeros((10, 2)), np.zeros((10, 3)))
    with pytest.raises(ValueError):
        mcc(np.zeros((10, 2)), np.zeros((10, 2)), method="kendall")


# ---------------------------------------------------------------- r2_group

def test_r2_self_prediction_high():
    rng = np.random.default_rng(6)
    y = rng.normal(size=(2000, 1))
    res = r2_group(y, y)
    assert res.reported >= 0.99


def test_r2_noise_predictors_low():
    rng = np.random.default_rng(7)
    y = rng.normal(size=(10000, 1))
    p = rng.normal(size=(10000, 2))
    res = r2_group(y, p)
    assert res.reported <= 0.05


def test_r2_captures_nonlinearity():
    rng = np.random.default_rng(8)
    u = rng.normal(size=(3000, 1))
    y = np.sin(3.0 * u)
    res = r2_group(y, u)
    assert res.reported >= 0.9


def test_r2_zero_predictor_columns():
    y = np.random.default_rng(9).normal(size=(100, 2))
    res = r2_group(y, np.empty((100, 0)))
    assert res.reported == 0.0 and res.raw == 0.0


def test_r2_constant_target_warns():
    rng = np.random.default_rng(10)
    y = np.full((200, 1), 3.0)
    p = rng.normal(size=(200, 1))
    with pytest.warns(UserWarning, match="constant target"):
        res = r2_group(y, p)
    assert res.reported == 0.0


def test_r2_reported_in_unit_interval():
    rng = np.random.default_rng(11)
    for _ in range(5):
        y = rng.normal(size=(500, 2))
        p = rng.normal(size=(500, 2))
        res = r2_group(y, p)
        assert 0.0 <= res.reported <= 1.0
        assert res.raw <= 1.0


def test_r2_deterministic():
    rng = np.random.default_rng(12)
    y = rng.normal(size=(400, 1))
    p = rng.normal(size=(400, 2))
    assert r2_group(y, p) == r2_group(y, p)


# ---------------------------------------------------------------- r2_suite

SUITE_SUPPORT = SupportMatrix(
    [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]]
)  # I_{X1}={1,2}, I_{X2}={2,3}, I_{X3}={3,4}


def test_r2_suite_identity_estimator_disentangled():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(4000, 4))
    suite = r2_suite(z, z, SUITE_SUPPORT, [1], [2, 3], (1, 2, 3, 4))
    # K={X1}: I_K={1,2}; V={X2,X3}: I_V={2,3,4}; Int={2}, SymDiff={1,3,4}
    assert suite.latent_sets["Int"] == (2,)
    assert suite.latent_sets["SymDiff"] == (1, 3, 4)
    assert suite.scores["Ref"] >= 0.95
    for name in ("Int", "SymDiff", "CompA", "CompB"):
        assert suite.scores[name] is not None
        assert suite.scores[name] <= 0.1, name


def test_r2_suite_entangled_estimator_scores_high():
    # Haar-random orthogonal mixing, measured once and frozen: every region
    # becomes predictable from the opposite group, unlike the identity case
    # above where all four scores stay below 0.1.
    from scipy.stats import ortho_group

    rng = np.random.default_rng(14)
    z = rng.normal(size=(4000, 4))
    z_hat = z @ ortho_group.rvs(4, random_state=2).T
    suite = r2_suite(z, z_hat, SUITE_SUPPORT, [1], [2, 3], (1, 2, 3, 4))
    assert suite.scores["Ref"] >= 0.95
    assert suite.scores["Int"] >= 0.9
    assert suite.scores["SymDiff"] >= 0.25
    assert suite.scores["CompA"] >= 0.1
    assert suite.scores["CompB"] >= 0.35
    region_scores = [suite.scores[n] for n in ("Int", "SymDiff", "CompA", "CompB")]
    assert np.mean(region_scores) >= 0.3


def test_r2_suite_empty_region_absent():
    support = SupportMatrix([[1, 1], [1, 1]])  # identical rows: empty SymDiff
    rng = np.random.default_rng(15)
    z = rng.normal(size=(600, 2))
    suite = r2_suite(z, z, support, [1], [2], (1, 2))
    assert suite.scores["Int"] is None  # no symmetric-difference predictors
    assert suite.scores["SymDiff"] is None
    assert suite.scores["CompA"] is None
    assert suite.scores["CompB"] is None
    assert suite.scores["Ref"] is not None


def test_r2_suite_validates_permutation():
    z = np.zeros((50, 2))
    with pytest.raises(ValueError):
        r2_suite(z, z, SupportMatrix.identity(2), [1], [2], (1, 1))


# ---------------------------------------------------------------- structure

def test_structure_match_recovers_permutation():
    s = make_support(4, 4, "diverse", seed=21)
    perm = [2, 0, 3, 1]
    permuted = SupportMatrix(s.entries[:, perm])
    res = structure_match(s, permuted)
    assert res.shd == 0
    # permutation maps true column i to matched estimated column
    inv = [perm.index(i) + 1 for i in range(4)]
    assert list(res.permutation) == inv


def test_structure_match_single_flip():
    s = SupportMatrix([[1, 1, 0], [0, 1, 1], [1, 0, 1]])
    flipped = s.entries.copy()
    flipped[0, 2] = True
    res = structure_match(s, SupportMatrix(flipped))
    assert res.shd == 1


def test_structure_match_brute_force_oracle():
    rng = np.random.default_rng(22)
    for _ in range(200):
        d_x = int(rng.integers(1, 6))
        d_z = int(rng.integers(1, 7))
        a = rng.random((d_x, d_z)) < 0.5
        b = rng.random((d_x, d_z)) < 0.5
        sa = SupportMatrix(a, require_nonzero=False)
        sb = SupportMatrix(b, require_nonzero=False)
        assert structure_match(sa, sb).shd == brute_force_shd(a, b)


def test_structure_match_symmetry():
    rng = np.random.default_rng(23)
    for _ in range(50):
        a = SupportMatrix(rng.random((3, 4)) < 0.5, require_nonzero=False)
        b = SupportMatrix(rng.random((3, 4)) < 0.5, require_nonzero=False)
        assert structure_match(a, b).shd == structure_match(b, a).shd


def test_structure_match_dimension_error():
    with pytest.raises(ValueError):
        structure_match(SupportMatrix.identity(2), SupportMatrix.identity(3))


# ---------------------------------------------------------------- nonlinearity

def test_nonlinearity_linear_map_fails_multi_parent_rows():
    w = np.array([[1.0, 2.0], [0.0, 1.0]])

    def jac(samples):
        return np.broadcast_to(w, (samples.shape[0], 2, 2))

    support = SupportMatrix([[1, 1], [0, 1]])
    verdicts = check_sufficient_nonlinearity(jac, support, np.zeros((50, 2)))
    assert verdicts[0].achieved == 1 and verdicts[0].required == 2
    assert not verdicts[0].passed
    assert verdicts[1].passed  # single-parent row needs rank 1 only


def test_nonlinearity_ground_truth_passes():
    support = make_support(4, 4, "diverse", seed=25)
    model = make_ground_truth(support, seed=25)
    samples = model.prior.sample(np.random.default_rng(0), 1000)
    verdicts = check_sufficient_nonlinearity(model, support, samples)
    assert all(v.passed for v in verdicts)


def test_nonlinearity_never_passes_linear_rows():
    rng = np.random.default_rng(26)
    for _ in range(20):
        d = int(rng.integers(2, 5))
        w = rng.normal(size=(d, d))

        def jac(samples, w=w):
            return np.broadcast_to(w, (samples.shape[0], d, d))

        support = SupportMatrix(np.abs(w) > 0, require_nonzero=False)
        verdicts = check_sufficient_nonlinearity(jac, support, rng.normal(size=(100, d)))
        for v in verdicts:
            if v.required >= 2:
                assert not v.passed


# ---------------------------------------------------------------- evaluate

def test_evaluate_oracle_estimator():
    model = make_ground_truth(SupportMatrix.identity(3), seed=31)
    # replace the mixing with the identity so x == z exactly
    ident_nets = tuple(
        nnet.make_net([(np.eye(1), np.zeros(1))]) for _ in range(3)
    )
    model = type(model)(
        support=model.support,
        nets=ident_nets,
        prior=model.prior,
        arch=model.arch,
        seed=model.seed,
        probe_min_singular=1.0,
        probe_size=1000,
        attempts=1,
    )
    dataset = sample_dataset(model, 500, seed=31)
    est = oracle_estimator(3)
    report = evaluate(est, dataset, model)
    assert report.mcc_spearman.score == pytest.approx(1.0, abs=1e-9)
    assert report.structure.shd == 0
    assert report.element_identifiable_predicted
    d = report.to_dict()
    assert d["mcc"]["spearman-abs"]["score"] == pytest.approx(1.0, abs=1e-9)
    assert "estimator" in d["hyperparameters"]


def test_evaluate_stages_tagged_on_error():
    model = make_ground_truth(SupportMatrix.identity(3), seed=32)
    dataset = sample_dataset(model, 200, seed=32)
    est = oracle_estimator(2)  # wrong dimension
    with pytest.raises(EvaluationError, match="stage encode"):
        evaluate(est, dataset, model)

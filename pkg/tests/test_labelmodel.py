import numpy as np
import pytest
from hypothesis import given, strategies as st

from txweak.labelmodel import (LabelModel, LabelModelError, LabelModelParams, fit_em, fit_moments, posterior,
                               predict_labels, sample_votes)
from txweak.weaksup import LabelMatrix

from oracles import all_vote_rows, brute_force_posterior, draw_votes, implied_agreement

TRUE_A = [0.9, 0.8, 0.75]
TRUE_B = [0.6, 0.5, 0.7]


def params(a, b=None, p=0.5):
    return LabelModelParams(a, b if b is not None else [0.5] * len(a), p)


def test_all_abstain_returns_prior_exactly():
    for p in (0.06, 0.11, 0.3, 0.5, 0.987654321):
        assert posterior(params([0.9, 0.7], p=p), [0, 0]) == p


def test_simple_posteriors():
    assert posterior(params([0.9]), [1]) == pytest.approx(0.9, abs=1e-15)
    assert posterior(params([0.8, 0.8]), [1, -1]) == pytest.approx(0.5, abs=1e-15)


def test_length_mismatch():
    with pytest.raises(LabelModelError):
        posterior(params([0.9, 0.8]), [1])
    with pytest.raises(LabelModelError):
        predict_labels(params([0.9, 0.8]), np.zeros((3, 3)))


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_brute_force_equivalence(m):
    rng = np.random.default_rng(m)
    for _ in range(5):
        a = rng.uniform(0.01, 0.99, m)
        b = rng.uniform(0.05, 1.0, m)
        p = float(rng.uniform(0.02, 0.98))
        pr = params(a, b, p)
        rows = all_vote_rows(m)
        got = [q for _, q in predict_labels(pr, np.array(rows))]
        for row, q in zip(rows, got):
            assert abs(q - brute_force_posterior(row, a, b, p)) < 1e-10


@given(st.lists(st.floats(0.51, 0.99), min_size=1, max_size=5), st.floats(0.01, 0.99), st.data())
def test_adding_positive_vote_is_monotone(a, p, data):
    row = data.draw(st.lists(st.sampled_from([-1, 0, 1]), min_size=len(a), max_size=len(a)))
    zeros = [j for j, v in enumerate(row) if v == 0]
    if not zeros:
        return
    j = data.draw(st.sampled_from(zeros))
    up = list(row)
    up[j] = 1
    pr = params(a, p=p)
    assert posterior(pr, up) >= posterior(pr, row) - 1e-15


def test_predict_permutation_equivariant():
    L, _ = draw_votes(TRUE_A, TRUE_B, 0.3, 200, 7)
    pr = params(TRUE_A, TRUE_B, 0.3)
    perm = np.random.default_rng(0).permutation(len(L))
    base = np.array([q for _, q in predict_labels(pr, L)])
    permuted = np.array([q for _, q in predict_labels(pr, L[perm])])
    assert np.array_equal(base[perm], permuted)


def test_predict_keeps_group_ids_and_abstain_rows():
    m = LabelMatrix(np.array([[0, 0], [1, 0]]), ["g1", "g2"], ["a", "b"])
    out = predict_labels(params([0.9, 0.8], p=0.11), m)
    assert out[0] == ("g1", 0.11) and out[1][0] == "g2"


def test_calibration_on_model_data():
    a, b, p = [0.85, 0.7, 0.65, 0.8], [0.5, 0.6, 0.4, 0.3], 0.3
    L, y = draw_votes(a, b, p, 50000, 11)
    q = np.array([v for _, v in predict_labels(params(a, b, p), L)])
    edges = np.quantile(q, np.linspace(0, 1, 11))
    bins = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, 9)
    for k in np.unique(bins):
        sel = bins == k
        assert abs(q[sel].mean() - (y[sel] == 1).mean()) < 0.05


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_moments_recovers_planted_accuracies(seed):
    L, _ = draw_votes(TRUE_A, TRUE_B, 0.3, 10000, seed)
    fit = fit_moments(L, 0.3)
    assert np.max(np.abs(fit.accuracies - TRUE_A)) <= 0.03
    np.testing.assert_allclose(fit.coverages, (L != 0).mean(axis=0))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_em_recovers_planted_accuracies(seed):
    L, _ = draw_votes(TRUE_A, TRUE_B, 0.3, 10000, seed)
    assert np.max(np.abs(fit_em(L, 0.3).accuracies - TRUE_A)) <= 0.03


def test_em_fixed_point_near_truth():
    L, _ = draw_votes(TRUE_A, TRUE_B, 0.3, 20000, 5)
    fit = fit_em(L, 0.3, init=np.array(TRUE_A))
    assert np.max(np.abs(fit.accuracies - TRUE_A)) < 0.01 + 0.02  # sampling noise at n=20000


def test_em_started_at_its_own_fit_stays_put():
    L, _ = draw_votes(TRUE_A, TRUE_B, 0.3, 10000, 5)
    first = fit_em(L, 0.3)
    again = fit_em(L, 0.3, init=first.accuracies)
    assert np.max(np.abs(again.accuracies - first.accuracies)) < 0.01


def test_em_single_lf_is_flat():
    L = np.array([[1], [-1], [0], [1]])
    assert fit_em(L, 0.5, init=0.7).accuracies[0] == pytest.approx(0.7)


def test_moments_and_em_agree_five_lfs():
    a, b = [0.9, 0.8, 0.7, 0.85, 0.65], [0.5, 0.6, 0.4, 0.3, 0.7]
    L, _ = draw_votes(a, b, 0.4, 10000, 3)
    assert np.max(np.abs(fit_moments(L, 0.4).accuracies - fit_em(L, 0.4).accuracies)) <= 0.05


def test_identical_lfs_saturate():
    col = np.array([1, -1, 0, 1, 1, -1, 0, 1])
    fit = fit_moments(np.stack([col, col], axis=1), 0.5)
    a = fit.accuracies
    assert implied_agreement(a[0], a[1]) == pytest.approx(1.0, abs=0.03) or min(a) >= 0.99


def test_half_agreement_fixed_point():
    L = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]] * 25)
    at_half = fit_moments(L, 0.5, init=0.5).accuracies
    assert np.array_equal(at_half, [0.5, 0.5])
    # the gradient vanishes cubically near 0.5, so from the default start it only creeps in
    a = fit_moments(L, 0.5).accuracies
    assert implied_agreement(a[0], a[1]) == pytest.approx(0.5, abs=0.005)


def test_sign_convention_and_clamp():
    L, _ = draw_votes([0.95, 0.99, 0.9], [0.9, 0.9, 0.9], 0.5, 5000, 2)
    a = fit_moments(L, 0.5).accuracies
    assert a.mean() >= 0.5 and a.min() >= 0.01 and a.max() <= 0.99
    flipped = fit_moments(-L, 0.5).accuracies
    np.testing.assert_allclose(a, flipped)


def test_needs_two_covering_lfs():
    with pytest.raises(LabelModelError):
        fit_moments(np.array([[1, 0], [-1, 0]]), 0.5)
    with pytest.raises(LabelModelError):
        fit_em(np.array([[1, 0], [-1, 0]]), 0.5)


def test_params_round_trip(tmp_path):
    pr = LabelModelParams([0.9, 0.6], [0.3, 0.4], 0.2, ["x", "y"], "moments")
    pr.save(tmp_path / "p.json")
    back = LabelModelParams.load(tmp_path / "p.json")
    assert back.to_dict() == pr.to_dict()
    with pytest.raises(LabelModelError):
        LabelModelParams([0.9], [0.3], 1.0)


def test_package_sampler_matches_model():
    L, y = sample_votes(TRUE_A, TRUE_B, 0.3, 20000, seed=0)
    assert abs((y == 1).mean() - 0.3) < 0.02
    np.testing.assert_allclose((L != 0).mean(axis=0), TRUE_B, atol=0.02)


def test_estimator_front_end():
    L, y = draw_votes(TRUE_A, TRUE_B, 0.3, 3000, 9)
    for method in ("moments", "em"):
        est = LabelModel(class_balance=0.3, method=method).fit(L)
        proba = est.predict_proba(L)
        assert proba.shape == (3000, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert set(np.unique(est.predict(L))) <= {0, 1}
    with pytest.raises(LabelModelError):
        LabelModel(method="nope").fit(L)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import lattice_oracle, majority_vote_oracle, weighted_mean_oracle
from retina_eit.ensemble import (
    PredictionSet,
    ensemble_report,
    format_report,
    grid_search_alpha,
    lattice_points,
    lattice_size,
    majority_vote_predict,
    member_subsets,
    mix,
    read_labels,
    read_predictions,
    weighted_mean_predict,
    write_labels,
    write_predictions,
)
from retina_eit.errors import ConfigError, ContractError, ValidationError


def pset(probs, names=None):
    probs = np.asarray(probs, dtype=np.float64)
    names = names or [f"m{j}" for j in range(probs.shape[0])]
    return PredictionSet(tuple(names), tuple(f"s{i}" for i in range(probs.shape[1])), probs)


def random_set(rng, n_models, n_samples, concentration=1.0):
    return pset(rng.dirichlet(np.full(5, concentration), size=(n_models, n_samples)))


def onehot_row(c, hi=0.9):
    row = np.full(5, (1 - hi) / 4)
    row[c] = hi
    return row


# -- weighted mean ------------------------------------------------------------------

def test_two_model_hand_example():
    preds = pset([[[0.6, 0.4, 0, 0, 0]], [[0.2, 0.8, 0, 0, 0]]])
    np.testing.assert_allclose(mix(preds, [0.5, 0.5])[0], [0.4, 0.6, 0, 0, 0])
    assert weighted_mean_predict(preds, [0.5, 0.5])[0] == 1


def test_single_model_and_one_hot_alpha(rng):
    preds = random_set(rng, 3, 40)
    np.testing.assert_array_equal(weighted_mean_predict(preds.select([1]), [1.0]), preds.single_argmax(1))
    for j in range(3):
        alpha = np.eye(3)[j]
        np.testing.assert_array_equal(weighted_mean_predict(preds, alpha), preds.single_argmax(j))


def test_alpha_validation(rng):
    preds = random_set(rng, 2, 3)
    with pytest.raises(ContractError):
        weighted_mean_predict(preds, [1.0])
    with pytest.raises(ValidationError):
        weighted_mean_predict(preds, [0.7, 0.7])
    with pytest.raises(ValidationError):
        weighted_mean_predict(preds, [1.5, -0.5])


def test_argmax_tie_goes_to_lowest_class():
    preds = pset([[[0.1, 0.3, 0.3, 0.2, 0.1]]])
    assert weighted_mean_predict(preds, [1.0])[0] == 1


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_weighted_mean_matches_oracle(seed, n_models):
    rng = np.random.default_rng(seed)
    preds = random_set(rng, n_models, 12)
    alpha = rng.dirichlet(np.ones(n_models))
    alpha /= alpha.sum()
    got = weighted_mean_predict(preds, alpha)
    assert got.tolist() == weighted_mean_oracle(preds.probs.tolist(), alpha.tolist())


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_weighted_mean_rescale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    preds = random_set(rng, 3, 15, concentration=0.5)
    alpha = rng.dirichlet(np.ones(3))
    scaled = alpha * scale
    scaled = scaled / scaled.sum()
    mixed = mix(preds, alpha)
    gaps = np.sort(mixed, axis=1)
    clear = gaps[:, -1] - gaps[:, -2] > 1e-9  # skip rows where rounding could flip a near-tie
    np.testing.assert_array_equal(weighted_mean_predict(preds, scaled)[clear],
                                  weighted_mean_predict(preds, alpha)[clear])


def test_identical_models_combiners_agree(rng):
    one = rng.dirichlet(np.ones(5), size=20)
    preds = pset(np.stack([one, one, one]))
    mv = majority_vote_predict(preds)
    for alpha in lattice_points(3, 0.25):
        np.testing.assert_array_equal(weighted_mean_predict(preds, alpha), mv)


# -- majority vote --------------------------------------------------------------------

def test_unique_mode():
    preds = pset([[onehot_row(c)] for c in (2, 2, 3, 1)])
    assert majority_vote_predict(preds)[0] == 2


def test_single_model_vote(rng):
    preds = random_set(rng, 1, 30)
    np.testing.assert_array_equal(majority_vote_predict(preds), preds.single_argmax(0))


def test_mode_tie_broken_by_mean_probability():
    rows = [onehot_row(2, 0.5), onehot_row(2, 0.5), onehot_row(3, 0.9), onehot_row(3, 0.9)]
    preds = pset([[r] for r in rows])
    assert majority_vote_predict(preds)[0] == 3
    assert majority_vote_oracle(preds.probs.tolist()) == [3]


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_majority_vote_matches_oracle(seed, n_models):
    rng = np.random.default_rng(seed)
    preds = random_set(rng, n_models, 15, concentration=0.3)
    assert majority_vote_predict(preds).tolist() == majority_vote_oracle(preds.probs.tolist())


@given(st.integers(0, 10_000))
def test_majority_vote_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    preds = random_set(rng, 3, 20)
    votes = np.argmax(preds.probs, axis=2)
    # cubing then renormalising keeps each model's argmax
    cubed = preds.probs**3
    cubed /= cubed.sum(axis=2, keepdims=True)
    counts = np.array([np.bincount(votes[:, i], minlength=5) for i in range(20)])
    unique_mode = (counts == counts.max(1, keepdims=True)).sum(1) == 1
    keep = unique_mode
    np.testing.assert_array_equal(majority_vote_predict(pset(cubed))[keep], majority_vote_predict(preds)[keep])


# -- lattice and grid search --------------------------------------------------------------

def test_lattice_half_step_two_models():
    np.testing.assert_array_equal(lattice_points(2, 0.5), [[0, 1], [0.5, 0.5], [1, 0]])
    assert lattice_size(2, 0.5) == 3


@pytest.mark.parametrize("n,step", [(1, 0.1), (2, 0.25), (3, 0.1), (4, 0.05), (4, 0.5)])
def test_lattice_matches_enumeration(n, step):
    pts = lattice_points(n, step)
    want = lattice_oracle(n, step)
    assert len(pts) == len(want) == lattice_size(n, step)
    np.testing.assert_allclose(pts, np.array([[float(x) for x in p] for p in want]), atol=1e-12)
    np.testing.assert_allclose(pts.sum(1), 1.0, atol=1e-12)


@pytest.mark.parametrize("step", [0.0, -0.1, 0.3, 1.5])
def test_lattice_rejects_bad_step(step):
    with pytest.raises(ConfigError):
        lattice_points(3, step)


def test_grid_search_finds_the_always_right_model(rng):
    labels = rng.integers(0, 5, 40)
    probs = rng.dirichlet(np.ones(5), size=(4, 40))
    # model 3 is confidently right; the others are confidently wrong
    probs[3] = np.stack([onehot_row(c, 0.96) for c in labels])
    for j in range(3):
        probs[j] = np.stack([onehot_row((c + 1 + j) % 5, 0.96) for c in labels])
    res = grid_search_alpha(pset(probs), labels, step=0.1)
    np.testing.assert_array_equal(res.alpha, [0, 0, 0, 1])
    assert res.accuracy == 1.0


def test_grid_search_flat_for_identical_models(rng):
    one = rng.dirichlet(np.ones(5), size=25)
    labels = rng.integers(0, 5, 25)
    res = grid_search_alpha(pset(np.stack([one, one])), labels, step=0.1)
    assert res.n_optimal == res.n_points == 11
    np.testing.assert_array_equal(res.alpha, [0, 1])  # first lattice point wins ties


@given(st.integers(0, 10_000), st.sampled_from([0.25, 0.2, 0.1]))
def test_grid_search_beats_every_lattice_point(seed, step):
    rng = np.random.default_rng(seed)
    preds = random_set(rng, 3, 16, concentration=0.7)
    labels = rng.integers(0, 5, 16)
    res = grid_search_alpha(preds, labels, step)
    scores = []
    for point in lattice_oracle(3, step):
        alpha = [float(a) for a in point]
        pred = weighted_mean_oracle(preds.probs.tolist(), alpha)
        scores.append(sum(int(p == t) for p, t in zip(pred, labels)) / 16)
    assert res.accuracy == max(scores)
    assert res.n_optimal == scores.count(max(scores))
    again = grid_search_alpha(preds, labels, step)
    assert np.array_equal(res.alpha, again.alpha) and res.accuracy == again.accuracy


def test_grid_search_agrees_with_weighted_mean(rng):
    preds = random_set(rng, 3, 30)
    labels = rng.integers(0, 5, 30)
    res = grid_search_alpha(preds, labels, 0.1)
    assert res.accuracy == np.mean(weighted_mean_predict(preds, res.alpha) == labels)


# -- report ------------------------------------------------------------------------------

def test_subset_enumeration():
    assert member_subsets(2) == [(0,), (1,), (0, 1)]
    assert len(member_subsets(4)) == 15


def test_report_rows_and_cross_check(rng):
    preds = random_set(rng, 4, 30, concentration=0.5)
    labels = rng.integers(0, 5, 30)
    rows = ensemble_report(preds, labels, step=0.25)
    assert len(rows) == 15
    for row in rows:
        sub = preds.select(row.members)
        if len(row.members) == 1:
            assert row.alpha == (1.0,) and row.wm_accuracy == row.mv_accuracy
        assert row.wm_accuracy == np.mean(weighted_mean_predict(sub, row.alpha) == labels)
        assert row.mv_accuracy == np.mean(majority_vote_predict(sub) == labels)
        assert row.alpha == tuple(grid_search_alpha(sub, labels, 0.25).alpha)
    text = format_report(rows)
    assert len(text.splitlines()) == 16 and "m0 + m1 + m2 + m3" in text


def test_report_tunes_on_separate_set(rng):
    test, tune = random_set(rng, 2, 20), random_set(rng, 2, 20)
    labels, tune_labels = rng.integers(0, 5, 20), rng.integers(0, 5, 20)
    rows = ensemble_report(test, labels, 0.1, tune=(tune, tune_labels))
    assert rows[-1].alpha == tuple(grid_search_alpha(tune, tune_labels, 0.1).alpha)


# -- files -------------------------------------------------------------------------------

def test_prediction_csv_round_trip(tmp_path, rng):
    preds = random_set(rng, 2, 7)
    write_predictions(preds.select([0]), tmp_path / "a.csv")
    write_predictions(preds.select([1]), tmp_path / "b.csv")
    back = read_predictions(tmp_path / "a.csv", tmp_path / "b.csv")
    assert back.model_names == preds.model_names and back.sample_ids == preds.sample_ids
    np.testing.assert_array_equal(back.probs, preds.probs)


def test_prediction_files_must_cover_same_ids(tmp_path, rng):
    a = random_set(rng, 1, 4)
    b = PredictionSet(("m1",), ("s0", "s1", "s2", "x"), random_set(rng, 1, 4).probs)
    write_predictions(a, tmp_path / "a.csv")
    write_predictions(b, tmp_path / "b.csv")
    with pytest.raises(ContractError):
        read_predictions(tmp_path / "a.csv", tmp_path / "b.csv")


def test_label_csv(tmp_path):
    write_labels(["a", "b"], [3, 0], tmp_path / "l.csv")
    ids, labels = read_labels(tmp_path / "l.csv", ["b", "a"])
    assert ids == ["b", "a"] and labels.tolist() == [0, 3]
    with pytest.raises(ContractError):
        read_labels(tmp_path / "l.csv", ["c"])
    (tmp_path / "bad.csv").write_text("sample_id,label\na,9\n")
    with pytest.raises(ValidationError):
        read_labels(tmp_path / "bad.csv")


def test_prediction_set_validation():
    with pytest.raises(ValidationError):
        pset([[[0.5, 0.6, 0, 0, 0]]])
    with pytest.raises(ContractError):
        pset(np.full((2, 3, 5), 0.2), names=["a", "a"])

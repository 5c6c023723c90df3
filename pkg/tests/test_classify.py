import itertools

import numpy as np
import pytest

from texscale.classify import (SvmModel, VotingEnsemble, aggregate_scales, dual_cd, load_svm,
                               save_svm, train_svm, vote, write_predictions)


def blobs(seed=0, per=10):
    rng = np.random.default_rng(seed)
    centers = np.array([[2, 2], [-2, 2], [-2, -2], [2, -2]], dtype=float)
    X = np.vstack([c + rng.standard_normal((per, 2)) * 0.9 for c in centers])
    y = np.repeat(["a", "b", "c", "d"], per)
    return X, y


def primal(w, b, X, yy, C):
    return 0.5 * (w @ w + b * b) + C * np.maximum(0, 1 - yy * (X @ w + b)).sum()


def grid_reference(X, y, classes, C=1.0, steps=41, span=3.0):
    """Exhaustive search of the one-vs-rest primal on a (w1, w2, b) grid."""
    g = np.linspace(-span, span, steps)
    P = np.array(list(itertools.product(g, g, g)))  # (G, 3)
    W = np.zeros((len(classes), 2))
    B = np.zeros(len(classes))
    for k, c in enumerate(classes):
        yy = np.where(y == c, 1.0, -1.0)
        marg = yy[None, :] * (P[:, :2] @ X.T + P[:, 2:3])
        obj = 0.5 * (P ** 2).sum(axis=1) + C * np.maximum(0, 1 - marg).sum(axis=1)
        best = P[np.argmin(obj)]
        W[k], B[k] = best[:2], best[2]
    return W, B


def test_antipodal_pair():
    m = train_svm(np.array([[1.0, 0.0], [-1.0, 0.0]]), ["x", "y"])
    assert m.C == 1.0 and m.predict(np.array([[1.0, 0.0], [-1.0, 0.0]])) == ["x", "y"]


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_svm(np.zeros((3, 2)), ["a"] * 3)
    with pytest.raises(ValueError):
        train_svm(np.zeros((3, 2)), ["a", "b"])


def test_matches_grid_reference_on_blobs():
    X, y = blobs()
    m = train_svm(X, y)
    W, B = grid_reference(X, y, m.classes)
    ours = np.mean(np.array(m.predict(X)) == y)
    ref = np.mean(np.array(m.classes)[np.argmax(X @ W.T + B, axis=1)] == y)
    assert abs(ours - ref) <= 0.02
    # the solver is at least as good as the grid on its own objective
    for k, c in enumerate(m.classes):
        yy = np.where(y == c, 1.0, -1.0)
        assert primal(m.W[k], m.b[k], X, yy, 1.0) <= primal(W[k], B[k], X, yy, 1.0) + 1e-6


def test_dual_cd_deterministic():
    X, y = blobs(1)
    Y = np.where(y[:, None] == np.array(["a", "b", "c", "d"])[None], 1.0, -1.0)
    a = dual_cd(X, Y, seed=3)
    b = dual_cd(X, Y, seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(a[:2], b[:2]))
    assert 1 <= a[2] <= 1000


def test_zero_dimensions_do_not_change_scores():
    X, y = blobs(2)
    m = train_svm(X, y)
    wide = SvmModel(m.classes, np.hstack([m.W, np.zeros((4, 3))]), m.b)
    Xw = np.hstack([X, np.zeros((len(X), 3))])
    assert np.allclose(m.decision_function(X), wide.decision_function(Xw))
    with pytest.raises(ValueError):
        m.decision_function(Xw)


def ensemble_with_scores(rows):
    """Three one-feature models whose decision scores on input [1] are ``rows``."""
    models = [SvmModel(["A", "B", "C"], np.array(r, dtype=float)[:, None], np.zeros(3)) for r in rows]
    return VotingEnsemble(models), [np.array([[1.0]])] * 3


def test_vote_examples():
    ens, fv = ensemble_with_scores([[3, 0, 0], [2, 1, 0], [5, 0, 1]])
    assert vote(ens, fv) == "A"
    ens, fv = ensemble_with_scores([[3, 0, 0], [2, 1, 0], [0, 4, 1]])
    assert vote(ens, fv) == "A"
    # one vote each: C has the largest summed score
    rows = [[1, 0, 0.9], [0, 1, 0.9], [0, 0, 1]]
    ens, fv = ensemble_with_scores(rows)
    assert vote(ens, fv) == "C"
    for perm in itertools.permutations(range(3)):
        e, f = ensemble_with_scores([rows[i] for i in perm])
        assert vote(e, f) == "C"
    with pytest.raises(ValueError):
        vote(ens, fv[:2])
    with pytest.raises(ValueError):
        VotingEnsemble([SvmModel(["A"], np.zeros((1, 1)), np.zeros(1)), ens.models[0]])


def test_aggregate_examples():
    assert aggregate_scales(["A"]) == "A"
    assert aggregate_scales(["A", "B", "A"]) == "A"
    sc = np.array([[2.0, 0.0], [0.0, 1.0]])
    assert aggregate_scales(["A", "B"], sc, ["A", "B"]) == "A"
    assert aggregate_scales(["B", "A"], sc[::-1], ["A", "B"]) == "A"
    with pytest.raises(ValueError):
        aggregate_scales([])


def test_svm_file_and_predictions_csv(tmp_path):
    X, y = blobs(3)
    m = train_svm(X, y, C=0.5)
    save_svm(m, tmp_path / "m.svm")
    back = load_svm(tmp_path / "m.svm")
    assert back.classes == m.classes and back.C == 0.5
    assert np.array_equal(back.W, m.W) and np.array_equal(back.b, m.b)
    write_predictions(tmp_path / "p.csv", [("x.png", "0,0", "a", "a")])
    assert (tmp_path / "p.csv").read_text().splitlines()[1] == 'x.png,"0,0",a,a'
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_svm(tmp_path / "bad")

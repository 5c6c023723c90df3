import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texscale.genetic import (GaConfig, UnitString, crossover, crossover_positions, ga_train,
                              mutation, write_generation_log)
from texscale.net import ConvNet


def ustring(n, seed, layer=1, c_in=2):
    rng = np.random.default_rng(seed)
    return UnitString(layer, rng.standard_normal((n, c_in, 3, 3)), rng.standard_normal(n))


def unit_set(*strings):
    return sorted(tuple(s.unit(i)) for s in strings for i in range(len(s)))


def test_crossover_count_examples():
    assert crossover_positions(64, 0.10) == 7
    assert crossover_positions(10, 0.10) == 1
    assert crossover_positions(8, 0.10) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_crossover_conserves_multiset(n, frac, seed):
    a, b = ustring(n, seed), ustring(n, seed + 1)
    a2, b2 = crossover(a, b, frac, np.random.default_rng(seed))
    assert unit_set(a, b) == unit_set(a2, b2)
    moved = sum(not np.array_equal(a.unit(i), a2.unit(i)) for i in range(n))
    assert moved == crossover_positions(n, frac)
    assert len(a2) == n and a2.unit_shape == a.unit_shape


def test_operators_reject_mismatched_strings():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        crossover(ustring(4, 0, layer=1), ustring(4, 1, layer=2), 0.1, rng)
    with pytest.raises(ValueError):
        crossover(ustring(4, 0, c_in=2), ustring(4, 1, c_in=3), 0.1, rng)
    with pytest.raises(ValueError):
        mutation(ustring(4, 0), ustring(5, 1), [True] * 4, [False] * 5, 0.5, rng)


def test_mutation_replaces_only_semantic_units_from_nonsemantic_donors():
    a, b = ustring(100, 0), ustring(100, 1)
    sem_a = np.ones(100, bool)
    sem_b = np.zeros(100, bool)
    sem_b[:50] = True
    b_before = b.copy()
    out, pos = mutation(a, b, sem_a, sem_b, q=0.05, rng=np.random.default_rng(3))
    assert len(pos) <= 5
    assert np.array_equal(b.W, b_before.W) and np.array_equal(b.b, b_before.b)
    donors = {tuple(b.unit(i)) for i in range(50, 100)}
    for i in range(100):
        if i in pos:
            assert tuple(out.unit(i)) in donors
        else:
            assert np.array_equal(out.unit(i), a.unit(i))


def test_mutation_rate_is_binomial_with_cap():
    a, b = ustring(100, 0), ustring(100, 1)
    rng = np.random.default_rng(0)
    counts = [len(mutation(a, b, np.ones(100, bool), np.zeros(100, bool), 0.05, rng, cap_fraction=1.0)[1])
              for _ in range(400)]
    assert abs(np.mean(counts) - 5.0) < 0.5
    capped = [len(mutation(a, b, np.ones(100, bool), np.zeros(100, bool), 0.5, rng)[1]) for _ in range(20)]
    assert max(capped) == 5


def test_mutation_noops(caplog):
    a, b = ustring(10, 0), ustring(10, 1)
    out, pos = mutation(a, b, np.zeros(10, bool), np.zeros(10, bool), 0.5, np.random.default_rng(0))
    assert len(pos) == 0 and np.array_equal(out.W, a.W)
    with caplog.at_level(logging.INFO, logger="texscale.genetic"):
        out, pos = mutation(a, b, np.ones(10, bool), np.ones(10, bool), 0.5, np.random.default_rng(0))
    assert len(pos) == 0 and "no non-semantic" in caplog.text


def small_problem(seed=0):
    rng = np.random.default_rng(seed)
    nets = [ConvNet.random(2, (4, 4), seed=seed + i) for i in range(3)]
    subsets = []
    for _ in range(3):
        X = rng.random((6, 12, 12))
        y = np.array([0, 1] * 3)
        X[y == 1, :, ::2] *= 0.3
        subsets.append((X, y))
    calib = [rng.random((12, 12)) for _ in range(3)]
    return nets, subsets, calib


def test_zero_generations_leave_nets_unchanged():
    nets, subsets, calib = small_problem()
    res = ga_train(nets, subsets, GaConfig(generations=0), calib)
    for a, b in zip(nets, res.nets):
        assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert res.history == []


def test_ga_train_is_deterministic_and_logs(tmp_path):
    nets, subsets, calib = small_problem()
    cfg = GaConfig(generations=3, epochs_per_generation=1, seed=5, p_crossover=1.0, q=0.5, batch=3)
    r1 = ga_train(nets, subsets, cfg, calib)
    r2 = ga_train(nets, subsets, cfg, calib)
    for a, b in zip(r1.nets, r2.nets):
        assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert len(r1.history) == 9
    assert sum(h["crossovers_applied"] for h in r1.history) > 0
    # no operators after the final generation
    assert all(h["crossovers_applied"] == 0 and h["mutations_applied"] == 0
               for h in r1.history if h["generation"] == 3)
    assert len(r1.final_fractions()) == 3
    write_generation_log(tmp_path / "g.csv", r1.history)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "generation,net,loss,semantic_fraction,crossovers_applied,mutations_applied"
    assert len(lines) == 10


def test_ga_train_preconditions():
    nets, subsets, calib = small_problem()
    with pytest.raises(ValueError):
        ga_train(nets[:2], subsets[:2], GaConfig(), calib)
    odd = [nets[0], nets[1], ConvNet.random(2, (4, 5))]
    with pytest.raises(ValueError):
        ga_train(odd, subsets, GaConfig(), calib)
    with pytest.raises(ValueError):
        GaConfig(q=0.0)

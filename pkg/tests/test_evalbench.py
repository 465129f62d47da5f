from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mt3d.config import Config
from mt3d.evalbench import (Score, aggregate, attention_terms, flops_attention_baseline,
                            loglog_slope, precision_auc, run_bench, success_auc)
from mt3d.mip import flops_mip


def brute(values, cap, strict_above):
    total = Fraction(0)
    for i in range(101):
        tau = cap * i / 100
        hits = sum(1 for v in values if (v > tau if strict_above else v < tau))
        total += Fraction(hits, len(values))
    return total / 101


def test_grid_examples():
    assert abs(success_auc([1.0] * 7).auc - 100 / 101) < 1e-15
    assert success_auc([0.0] * 3).auc == 0.0
    assert abs(precision_auc([0.0] * 4).auc - 100 / 101) < 1e-15
    assert precision_auc([2.5, 3.0]).auc == 0.0
    for bad in ([], [1.2], [-0.1]):
        with pytest.raises(ValueError):
            success_auc(bad)
    with pytest.raises(ValueError):
        precision_auc([])
    with pytest.raises(ValueError):
        precision_auc([1.0], cap=0.0)


@settings(max_examples=60)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_success_matches_brute_force(xs):
    c = success_auc(xs)
    assert c.auc == float(brute(xs, 1.0, True))
    assert np.all(np.diff(c.fractions) <= 0)


@settings(max_examples=60)
@given(st.lists(st.floats(0, 3), min_size=1, max_size=40))
def test_precision_matches_brute_force(xs):
    c = precision_auc(xs, cap=2.0)
    assert c.auc == float(brute(xs, 2.0, False))
    assert np.all(np.diff(c.fractions) >= 0)  # more frames pass as the threshold grows
    assert 0.0 <= c.auc <= 1.0


def test_aggregate_examples():
    one = aggregate([Score("Car", 0.7, 0.8, 10)])
    assert one.mean.success == 0.7 and len(one.rows) == 1
    tab = aggregate([Score("Car", 70.0, 80.0, 6424), Score("Pedestrian", 64.3, 70.0, 6088)])
    assert abs(tab.mean.success - (70.0 * 6424 + 64.3 * 6088) / 12512) < 1e-12
    assert round(tab.mean.success, 2) == 67.23
    eq = aggregate([Score("A", 0.5, 0.5, 3), Score("B", 0.5, 0.5, 9)])
    assert abs(eq.mean.success - 0.5) < 1e-15
    assert [r.label for r in aggregate([Score("b", 1, 1, 1), Score("a", 1, 1, 1)]).rows] == ["a", "b"]
    with pytest.raises(ValueError):
        aggregate([])
    assert "Mean" in tab.to_text() and tab.to_dict()["mean"]["frames"] == 12512


@settings(max_examples=40)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 1000)), min_size=1, max_size=6),
       st.floats(0.1, 10))
def test_aggregate_scale_equivariant(rows, c):
    base = [Score(f"c{i % 3}", s, s, n) for i, (s, n) in enumerate(rows)]
    scaled = [Score(s.label, s.success * c, s.precision * c, s.frames) for s in base]
    assert abs(aggregate(scaled).mean.success - c * aggregate(base).mean.success) < 1e-9


def test_attention_baseline_closed_form():
    cfg = Config()
    for n in (1, 100, 1024):
        assert attention_terms(cfg, 2 * n)[1] == 4 * attention_terms(cfg, n)[1]
        assert flops_attention_baseline(cfg, n) > 0
    sizes = [1024, 2048, 4096, 8192]
    assert loglog_slope(sizes, [flops_attention_baseline(cfg, n) for n in sizes]) >= 1.8
    wide = [512, 1024, 2048, 4096, 8192]
    assert loglog_slope(wide, [flops_mip(cfg, n) for n in wide]) <= 1.2


def test_run_bench_rows_and_stability():
    cfg = Config(n_tokens=32, channels=16, state_dim=4, layers=1)
    a = run_bench(cfg, [256, 512, 1024], repetitions=3)
    assert [r.n for r in a.rows] == [256, 512, 1024]
    assert a.slope_ours < a.slope_attn
    assert "slope" in a.summary()
    with pytest.raises(ValueError):
        run_bench(cfg, [512, 256])
    with pytest.raises(ValueError):
        run_bench(cfg, [256], repetitions=2)
    # stability smoke: medians of repeated runs agree within 20%, best of three attempts
    for _ in range(3):
        b = run_bench(cfg, [1024], repetitions=5)
        c = run_bench(cfg, [1024], repetitions=5)
        if abs(b.rows[0].seconds / c.rows[0].seconds - 1) < 0.2:
            break
    else:
        pytest.fail("bench timings unstable")

import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimmu.evalharness import (
    EvalConfig,
    RelearnConfig,
    breakdown_probe,
    csv_text,
    evaluate,
    mi_drop,
    model_mi,
    relearn_pool,
    relearn_protocol,
    retain_accuracy,
    retained_distance,
    sequential_protocol,
    sliced_wasserstein,
    unconditional_drift,
    unlearning_accuracy,
    unlearning_rate_from,
    write_csv,
)
from mimmu.infotheory import LogSnrGrid
from mimmu.unlearn import UnlearnConfig
from mimmu.world import NULL_PROMPT, ConceptPrompt, build_fine_grained_world

FAST = EvalConfig(n=20, n_seeds=2, sw_n=100, sw_projections=16, mi_n=20, mi_n_eps=4, mi_nodes=16)


def blind(model):
    p = model.params.data.copy()
    for name in ("emb_a", "emb_b"):
        _, start, stop, _ = model.params.entry(name)
        p[start:stop] = 0.0
    return model.with_params(model.params.replace(p))


def quantile_w2(u, v, levels=200_000):
    """W2 between 1-D empirical laws by integrating the quantile functions on a fine level grid."""
    q = (np.arange(levels) + 0.5) / levels
    qu = np.quantile(u, q, method="inverted_cdf")
    qv = np.quantile(v, q, method="inverted_cdf")
    return np.sqrt(np.mean((qu - qv) ** 2))


# ---------------------------------------------------------------------------
# sliced Wasserstein


def test_sw_identical_sets(rng):
    a = rng.standard_normal((300, 2))
    assert sliced_wasserstein(a, a, 32, 0) == 0.0


def test_sw_one_dimensional_shift(rng):
    a = rng.standard_normal((500, 1))
    assert sliced_wasserstein(a, a + 2.5, 8, 0) == pytest.approx(2.5, rel=1e-12)
    assert sliced_wasserstein(a, a - 0.7, 8, 0) == pytest.approx(0.7, rel=1e-12)


def test_one_dimensional_w2_against_quantiles(rng):
    u = rng.normal(0, 1, 10_000)[:, None]
    v = rng.normal(8, 2, 7_000)[:, None]
    assert sliced_wasserstein(u, v, 1, 0) == pytest.approx(quantile_w2(u[:, 0], v[:, 0]), rel=1e-3)


def test_sw_far_gaussians_against_quantiles(rng):
    a = rng.normal([0, 0], 1.0, size=(10_000, 2))
    b = rng.normal([12, -5], 0.5, size=(10_000, 2))
    n_proj = 24
    dirs = np.random.default_rng([3]).standard_normal((n_proj, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    brute = np.mean([quantile_w2(a @ d, b @ d) for d in dirs])
    assert sliced_wasserstein(a, b, n_proj, 3) == pytest.approx(brute, rel=0.02)


def test_sw_errors(rng):
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))


@given(st.integers(0, 2**31), st.integers(2, 40), st.integers(2, 40), st.integers(2, 40))
@settings(max_examples=50, deadline=None)
def test_sw_pseudometric(seed, n1, n2, n3):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal((n, 2)) * rng.uniform(0.1, 3) + rng.normal(0, 3, 2) for n in (n1, n2, n3))
    ab = sliced_wasserstein(a, b, 16, seed)
    assert ab == sliced_wasserstein(b, a, 16, seed)
    assert ab >= 0
    assert ab <= sliced_wasserstein(a, c, 16, seed) + sliced_wasserstein(c, b, 16, seed) + 1e-9


# ---------------------------------------------------------------------------
# metrics on a small model


def test_report_consistency(small_teacher, world):
    rep = evaluate(small_teacher, world, [1], FAST)
    for v in (rep.ua, rep.ira, rep.cra, rep.ra):
        assert 0.0 <= v <= 1.0
    for conf in rep.confusion.values():
        assert sum(conf["a"]) == sum(conf["b"]) == FAST.n * FAST.n_seeds
    # UA and the target's share of the confusion table are complementary
    assert unlearning_rate_from(rep, 1, world) == pytest.approx(rep.ua, abs=1e-12)
    assert rep.nra is None and rep.sw_distance is None and rep.mi_drop is None
    assert set(rep.spread) == {"ua", "ira", "cra"}


def test_reports_are_deterministic(small_teacher, world):
    a = evaluate(small_teacher, world, [1], FAST, teacher=small_teacher)
    b = evaluate(small_teacher, world, [1], FAST, teacher=small_teacher)
    assert a.to_json() == b.to_json()
    assert a.mi_drop == 0.0 and a.sw_distance >= 0 and a.sw_reference >= 0


def test_single_metrics_agree_with_ranges(small_teacher, world):
    ua = unlearning_accuracy(small_teacher, world, 2, n=20, seed=4)
    ira = retain_accuracy(small_teacher, world, 2, "in_domain", n=20, seed=4)
    cra = retain_accuracy(small_teacher, world, 2, "cross_domain", n=20, seed=4)
    assert all(0 <= v <= 1 for v in (ua, ira, cra))
    with pytest.raises(ValueError):
        retain_accuracy(small_teacher, world, 2, "sideways", n=2)


def test_mi_drop_undefined_for_blind_teacher(small_teacher, world):
    b = blind(small_teacher)
    assert mi_drop(b, small_teacher, world, 1, FAST) is None


def test_mi_drop_scores_both_with_teacher(small_teacher, world):
    cfg = EvalConfig(mi_n=30, mi_n_eps=4, mi_nodes=16, seed=2)
    student = blind(small_teacher)
    grid = LogSnrGrid.uniform(16)
    args = (ConceptPrompt(a=1), 30, cfg.gamma, grid, 4, [2, 41])
    ref = model_mi(small_teacher, *args)
    val = model_mi(student, *args, discriminator=small_teacher)
    expected = float(np.clip(1 - val / ref, 0, 1))
    assert mi_drop(small_teacher, student, world, 1, cfg) == expected
    assert val != model_mi(student, *args)


def test_fine_grained_report_has_neighbour_rates(small_teacher):
    fg = build_fine_grained_world()
    rep = evaluate(small_teacher, fg, [1], EvalConfig(n=10, n_seeds=1), fine_grained=True)
    assert rep.nra is not None and 0 <= rep.nra <= 1


def test_retained_distance_is_deterministic(small_teacher, world):
    d = retained_distance(small_teacher, small_teacher, world, 1, n=30, n_projections=8)
    assert d > 0
    assert d == retained_distance(small_teacher, small_teacher, world, 1, n=30, n_projections=8)


def test_unconditional_drift(small_teacher, world, rng):
    x, _ = world.sample_arrays(NULL_PROMPT, 50, 0)
    t = rng.integers(1, 51, 50)
    eps = rng.standard_normal(x.shape)
    assert unconditional_drift(small_teacher, small_teacher, x, t, eps) == 0.0
    moved = small_teacher.with_params(small_teacher.params.replace(small_teacher.params.data * 1.01))
    assert unconditional_drift(moved, small_teacher, x, t, eps) > 0


# ---------------------------------------------------------------------------
# protocols


def test_relearn_pool_excludes_target(world):
    x, lab = relearn_pool(world, 2, "random_subset", RelearnConfig(pool_per_cell=3))
    assert 2 not in lab[:, 0] and len(x) == 3 * (world.n_a - 1) * world.n_b
    _, lab = relearn_pool(world, 0, "class_wise", RelearnConfig(pool_per_cell=3))
    assert set(lab[:, 0]) == {1}
    with pytest.raises(ValueError):
        relearn_pool(world, 2, "class_wise", RelearnConfig(class_a=2))
    with pytest.raises(ValueError):
        relearn_pool(world, 2, "everything", RelearnConfig())


def test_relearn_protocol(small_teacher, world):
    ev = EvalConfig(n=10)
    rep = relearn_protocol(small_teacher, world, 1, "random_subset", RelearnConfig(epochs=0), ev)
    assert rep.delta_ua == 0.0 and rep.epochs == [0]
    rep = relearn_protocol(small_teacher, world, 1, "class_wise", RelearnConfig(epochs=2, steps_per_epoch=3), ev)
    assert rep.epochs == [0, 1, 2] and len(rep.ua) == 3
    assert rep.delta_ua == pytest.approx(rep.ua[0] - rep.ua[-1])


def test_sequential_protocol_structure(small_teacher, world):
    cfg = UnlearnConfig(steps=5, batch_size=8)
    rep = sequential_protocol(small_teacher, world, [1, 3], cfg, EvalConfig(n=10, n_seeds=1), forget_per_b=2)
    assert rep.ua[1][0] is None and rep.ua[0][0] is not None and rep.ua[1][1] is not None
    assert len(rep.ra) == 2
    for f in rep.rebound:
        assert f["drop"] > 0.05
    assert json.loads(rep.to_json())["targets"] == [1, 3]
    with pytest.raises(ValueError):
        sequential_protocol(small_teacher, world, [1], cfg)


def test_breakdown_starts_at_teacher(small_teacher, world):
    ev = EvalConfig(n=10, n_seeds=1)
    rep = breakdown_probe(small_teacher, world, 1, [4, 2], config=UnlearnConfig(steps=4, batch_size=8),
                          eval_config=ev, forget_per_b=2)
    assert rep.steps == [0, 2, 4]
    base = evaluate(small_teacher, world, [1], ev)
    for curves in rep.curves.values():
        assert curves["ua"][0] == base.ua and curves["ira"][0] == base.ira and curves["drift"][0] == 0.0
        assert len(curves["cra"]) == 3


def test_csv_rows(small_teacher, world, tmp_path):
    rep = evaluate(small_teacher, world, [1], EvalConfig(n=10, n_seeds=1))
    rows = rep.rows(method="mim_mu")
    text = csv_text(rows)
    write_csv(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text() == text
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert [r["metric"] for r in parsed] == ["ua", "ira", "cra"]
    assert list(parsed[0]) == ["protocol", "method", "request", "metric", "value", "se", "seed"]


# ---------------------------------------------------------------------------
# with the default teacher


@pytest.mark.slow
def test_teacher_baseline(teacher, world):
    rep = evaluate(teacher, world, [1], EvalConfig(n_seeds=1))
    assert rep.ua <= 0.05
    assert rep.ira >= 0.95 and rep.cra >= 0.95

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from mimmu.infotheory import (
    LogSnrGrid,
    estimate_records,
    gaussian_reference_mmse,
    joint_mi,
    mi_at_timestep,
    mi_naive,
    mi_nonneg,
    mi_over_timesteps,
    mmse_point,
    neg_log_density,
    orthogonality_integral,
    orthogonality_residual,
    paired_terms,
    write_jsonl,
)
from mimmu.diffusion import NoiseSchedule
from mimmu.world import NULL_PROMPT, ConceptPrompt, build_grid_world, standard_normal_world

GRID = LogSnrGrid.uniform()


def y_blind(world):
    return lambda z, lam, prompt: world.analytic_denoiser_logsnr(z, lam, NULL_PROMPT)


def test_grid_validation():
    assert GRID.size == 64 and GRID.grid_id == "trap64[-10,10]+tails"
    with pytest.raises(ValueError):
        LogSnrGrid.uniform(15)
    with pytest.raises(ValueError):
        LogSnrGrid(np.linspace(-1, 1, 20), np.ones(20), -1, 1)
    with pytest.raises(ValueError):
        LogSnrGrid(np.linspace(1, -1, 20), -np.ones(20), -1, 1)
    with pytest.raises(ValueError):
        LogSnrGrid(np.linspace(5, -1, 20), np.ones(20), -1, 1)


def test_plain_trapezoid_weights_sum_to_range():
    g = LogSnrGrid.uniform(33, -4, 4, tails=False)
    assert g.weights.sum() == pytest.approx(8.0)


def test_gaussian_reference_closed_form(rng):
    for alpha in (-3.0, 0.0, 2.5):
        ab = expit(alpha)
        assert gaussian_reference_mmse(np.zeros((1, 2)), alpha)[0] == pytest.approx(ab * ab * 2)
    assert gaussian_reference_mmse(np.ones((1, 2)), -60.0)[0] == pytest.approx(0.0, abs=1e-20)


def test_gaussian_reference_matches_monte_carlo(rng):
    w = standard_normal_world()
    x = rng.standard_normal((1, 2)) * 2
    for alpha in (-2.0, 0.5, 3.0):
        mc = mmse_point(w, x, alpha, NULL_PROMPT, n_eps=40_000, seed=1)
        assert mc == pytest.approx(gaussian_reference_mmse(x, alpha)[0], rel=0.03)


def test_zero_predictor_mmse_is_dimension():
    zero = lambda z, lam, prompt: np.zeros_like(z)
    assert mmse_point(zero, np.ones((1, 2)), 0.3, NULL_PROMPT, n_eps=20_000, seed=2) == pytest.approx(2.0, rel=0.03)


def test_density_decomposition_is_exact(world, rng):
    x = rng.normal(6, 4, size=(10, 2))
    est = neg_log_density(world, x, NULL_PROMPT, GRID, 8, 0)
    assert np.array_equal(est.value, est.gaussian_reference_term + est.correction_integral)
    assert est.mmse_table.shape == (10, 64)


def test_density_of_standard_normal_world_needs_no_correction(rng):
    w = standard_normal_world()
    x = rng.standard_normal((20, 2))
    est = neg_log_density(w, x, NULL_PROMPT, GRID, 64, 0)
    assert np.all(np.abs(est.correction_integral) <= 4 * est.se)
    assert np.allclose(est.gaussian_reference_term, -w.log_density(x), atol=1e-10)


def test_density_matches_world(world):
    x, _ = world.sample_arrays(NULL_PROMPT, 40, 3)
    est = neg_log_density(world, x, NULL_PROMPT, GRID, 64, 4)
    err = est.value + world.log_density(x)
    assert np.mean(np.abs(err)) <= 0.05 + 3 * np.mean(est.se)
    # the sign: a flipped correction would be off by tens of nats here
    assert abs(np.mean(err)) < 0.1


def test_conditional_density_matches_world(world):
    p = ConceptPrompt(a=2)
    x, _ = world.sample_arrays(p, 30, 5)
    est = neg_log_density(world, x, p, GRID, 64, 6)
    assert np.mean(np.abs(est.value + world.log_density(x, p))) <= 0.05 + 3 * np.mean(est.se)


def test_density_grid_refinement(world):
    x, _ = world.sample_arrays(NULL_PROMPT, 100, 8)
    coarse = neg_log_density(world, x, NULL_PROMPT, GRID, 32, 9)
    fine = neg_log_density(world, x, NULL_PROMPT, LogSnrGrid.uniform(128), 32, 9)
    assert abs(coarse.value.mean() - fine.value.mean()) < np.mean(coarse.se)


def test_density_rejects_coarse_grid(world):
    with pytest.raises(ValueError):
        neg_log_density(world, np.zeros((1, 2)), NULL_PROMPT, LogSnrGrid.uniform(8))


def test_density_bayes_consistency():
    w = build_grid_world(2, 2, 2, 2.0, 1.0)
    p = ConceptPrompt(a=1)
    x, _ = w.sample_arrays(p, 60, 1)
    cond = neg_log_density(w, x, p, GRID, 64, 2)
    marg = neg_log_density(w, x, NULL_PROMPT, GRID, 64, 2)
    ratio = marg.value - cond.value
    truth = w.log_density(x, p) - w.log_density(x)
    se = np.hypot(cond.se, marg.se)
    assert abs(np.mean(ratio - truth)) <= 0.05 + 3 * np.mean(se) / np.sqrt(len(x))


def test_mi_estimators_vanish_for_y_blind_model(world):
    x, _ = world.sample_arrays(ConceptPrompt(a=1), 20, 0)
    blind = y_blind(world)
    assert mi_nonneg(blind, x, ConceptPrompt(a=1), GRID, 8, 0).value == 0.0
    naive = mi_naive(blind, x, ConceptPrompt(a=1), GRID, 8, 0)
    assert naive.value == pytest.approx(0.0, abs=1e-12)


def test_null_prompt_rejected(world):
    with pytest.raises(ValueError):
        mi_nonneg(world, np.zeros((1, 2)), NULL_PROMPT, GRID)


def test_far_attribute_gives_log_two():
    w = build_grid_world(2, 2, 2, 20.0, 1.0)
    value, se = joint_mi(w, w, "a", 100, GRID, 16, 0)
    assert abs(value - np.log(2)) <= 0.05 + 3 * se
    naive, nse = joint_mi(w, w, "a", 100, GRID, 16, 0, kind="naive")
    assert abs(naive - np.log(2)) <= 0.05 + 3 * nse


def test_naive_is_signed_pointwise():
    w = build_grid_world(2, 2, 2, 0.5, 1.0)
    x, _ = w.sample_arrays(ConceptPrompt(a=0), 200, 0)
    est = mi_naive(w, x, ConceptPrompt(a=0), GRID, 2, 0)
    assert np.any(est.pointwise < 0)
    assert np.all(mi_nonneg(w, x, ConceptPrompt(a=0), GRID, 2, 0).pointwise >= 0)


def test_nonneg_has_lower_seed_variance():
    w = build_grid_world(2, 2, 2, 2.0, 1.0)
    p = ConceptPrompt(a=1)
    x, _ = w.sample_arrays(p, 30, 0)
    naive = [mi_naive(w, x, p, GRID, 4, s).value for s in range(12)]
    nonneg = [mi_nonneg(w, x, p, GRID, 4, s).value for s in range(12)]
    assert np.var(nonneg, ddof=1) < np.var(naive, ddof=1)


def test_standard_error_shrinks_with_draws():
    w = build_grid_world(2, 2, 2, 2.0, 1.0)
    p = ConceptPrompt(a=1)
    x, _ = w.sample_arrays(p, 5, 0)
    small = mi_naive(w, x, p, GRID, 8, 1).pointwise_se.mean()
    large = mi_naive(w, x, p, GRID, 128, 1).pointwise_se.mean()
    assert 2.5 < small / large < 6.5


def test_node_contributions_sum_to_value(world):
    x, _ = world.sample_arrays(ConceptPrompt(a=3), 10, 0)
    est = mi_nonneg(world, x, ConceptPrompt(a=3), GRID, 4, 0)
    assert est.node_contrib.sum() == pytest.approx(est.value, rel=1e-12)
    assert est.pointwise.mean() == pytest.approx(est.value, rel=1e-12)


def test_decomposition_identity(world):
    p = ConceptPrompt(a=2)
    x, _ = world.sample_arrays(p, 15, 0)
    noisy = lambda z, lam, prompt: world.analytic_denoiser_logsnr(z, lam, prompt) + 0.1 * np.sin(z)
    for model in (world, noisy):
        gap = mi_naive(model, x, p, GRID, 8, 3).value - mi_nonneg(model, x, p, GRID, 8, 3).value
        assert gap == pytest.approx(orthogonality_integral(model, x, p, GRID, 8, 3).value, abs=1e-10)


def test_paired_terms_share_draws(world):
    p = ConceptPrompt(a=1)
    x, _ = world.sample_arrays(p, 4, 0)
    t = paired_terms(world, x, p, GRID, 4, 0)
    assert np.allclose(t.err_u - t.err_c, t.gap + 2 * t.orth, atol=1e-12)


def test_orthogonality_residual_of_oracle(world):
    res = orthogonality_residual(world, ConceptPrompt(a=1), GRID, 256, 8, 0, world=world)
    assert np.all(np.abs(res.values) <= 3 * res.se + 1e-15)


def test_corrupted_denoiser_breaks_orthogonality(world):
    def corrupted(z, lam, prompt):
        out = world.analytic_denoiser_logsnr(z, lam, prompt)
        return out if prompt.is_null else out + 0.5

    res = orthogonality_residual(corrupted, ConceptPrompt(a=1), GRID, 256, 8, 0, world=world)
    assert np.max(np.abs(res.values) / res.se) > 10


def test_timestep_information():
    w = build_grid_world(2, 2, 2, 2.0, 1.0)
    sched = NoiseSchedule()
    p = ConceptPrompt(a=1)
    x, _ = w.sample_arrays(p, 40, 0)
    assert np.all(mi_at_timestep(w, x, 50, NULL_PROMPT, 4, 0, sched) == 0)
    assert np.all(mi_at_timestep(y_blind(w), x, 50, p, 4, 0, sched) == 0)
    total = mi_over_timesteps(w, x, p, 16, 0, sched)
    est = mi_nonneg(w, x, p, LogSnrGrid.uniform(tails=False), 16, 1)
    assert total == pytest.approx(est.value, abs=0.05 + 3 * est.se)


def test_records_schema(world, tmp_path):
    x, _ = world.sample_arrays(ConceptPrompt(a=1), 3, 0)
    recs = estimate_records(mi_nonneg(world, x, ConceptPrompt(a=1), GRID, 4, 7))
    recs += estimate_records(neg_log_density(world, x, NULL_PROMPT, GRID, 4, 7))
    path = tmp_path / "r.jsonl"
    write_jsonl(path, recs)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 6
    assert all(set(r) == {"kind", "value", "se", "grid_id", "n_eps", "seed"} for r in lines)
    assert {r["kind"] for r in lines} == {"nonneg", "neg_log_density"}


def test_estimates_are_deterministic(world):
    x, _ = world.sample_arrays(ConceptPrompt(a=1), 5, 0)
    a = mi_naive(world, x, ConceptPrompt(a=1), GRID, 4, [3, 1])
    b = mi_naive(world, x, ConceptPrompt(a=1), GRID, 4, [3, 1])
    assert a.pointwise.tobytes() == b.pointwise.tobytes()
    # item noise is keyed by position, so a prefix batch reproduces its rows
    c = mi_naive(world, x[:2], ConceptPrompt(a=1), GRID, 4, [3, 1])
    assert np.array_equal(c.pointwise, a.pointwise[:2])


@given(st.integers(0, 2**31), st.floats(-8, 8), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_nonneg_is_nonnegative_for_arbitrary_models(seed, scale, n_eps):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((2, 2)) * scale
    model = lambda z, lam, prompt: np.tanh(z @ A + (0 if prompt.is_null else prompt.a)) * scale
    x = rng.standard_normal((3, 2)) * 5
    assert mi_nonneg(model, x, ConceptPrompt(a=1), LogSnrGrid.uniform(16), n_eps, seed).value >= 0.0

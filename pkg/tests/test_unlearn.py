import json

import numpy as np
import pytest

from mimmu.diffusion import Architecture, DenoiserModel, NumericalError, forward_noise, model_from_bytes
from mimmu.numerics import relative_error
from mimmu.unlearn import (
    ForgetSet,
    MAX_JACOBIAN_PARAMS,
    RetainSpec,
    UnlearnConfig,
    build_forget_set,
    forget_loss,
    full_mi_gradient,
    jacobian_free_gradient,
    mim_mu_analytic_gradient,
    mim_mu_loss,
    multi_concept_unlearn,
    retarget_loss,
    run_unlearn,
    sdd_analytic_gradient,
    sdd_latents,
    sdd_loss,
    student_checkpoint,
    tiny_pair,
    trainable_mask,
    verify_gradient_identities,
)
from mimmu.world import NULL_PROMPT, ConceptPrompt

Y = ConceptPrompt(a=1)


def blind(model):
    """Copy whose predictions ignore the prompt."""
    p = model.params.data.copy()
    for name in ("emb_a", "emb_b"):
        _, start, stop, _ = model.params.entry(name)
        p[start:stop] = 0.0
    return model.with_params(model.params.replace(p))


def draws(model, world, n=8, seed=0):
    rng = np.random.default_rng(seed)
    x, _ = world.sample_arrays(Y, n, seed)
    t = rng.integers(1, model.schedule.T + 1, size=n)
    return x, t, rng.standard_normal(x.shape)


class Refuses:
    """Stands in for a world that must never be read."""

    def __getattr__(self, name):
        raise AssertionError(f"world.{name} read by a compensation-free method")


def test_forget_set_covers_every_b(world):
    fs = build_forget_set(world, 2, per_b=3, seed=1)
    assert fs.target == 2 and fs.prompt == ConceptPrompt(a=2)
    labels = np.array([s.label for s in fs.samples])
    assert np.all(labels[:, 0] == 2)
    assert np.bincount(labels[:, 1], minlength=world.n_b).min() == 3
    assert fs.x.shape == (3 * world.n_b, 2)


def test_forget_set_validation(world):
    fs = build_forget_set(world, 2, per_b=2)
    with pytest.raises(ValueError):
        ForgetSet(fs.samples, ConceptPrompt(a=3), world.n_b)
    with pytest.raises(ValueError):
        ForgetSet(fs.samples, ConceptPrompt(a=2, b=0), world.n_b)
    with pytest.raises(ValueError):
        ForgetSet(fs.samples[:2], ConceptPrompt(a=2), world.n_b)


def test_config_validation():
    UnlearnConfig(method="retarget", retain=RetainSpec())
    with pytest.raises(ValueError):
        UnlearnConfig(method="retarget")
    with pytest.raises(ValueError):
        UnlearnConfig(method="mim_mu", retain=RetainSpec())
    with pytest.raises(ValueError):
        UnlearnConfig(method="sdd", anchor_prompt=ConceptPrompt(a=0))
    for bad in ({"method": "salun"}, {"steps": -1}, {"ema_decay": 1.0}, {"trainable": "head"},
                {"t_sampling": "lognormal"}, {"distill_target": "noise"}):
        with pytest.raises(ValueError):
            UnlearnConfig(**bad)
    assert json.loads(json.dumps(UnlearnConfig().to_dict()))["method"] == "mim_mu"


def test_mim_mu_loss_vanishes_for_blind_teacher(world):
    teacher, _ = tiny_pair(world)
    b = blind(teacher)
    assert mim_mu_loss(b, b, *draws(b, world), Y).value == 0.0


def test_mim_mu_loss_at_init_is_squared_guidance_gap(world):
    teacher, _ = tiny_pair(world)
    x, t, eps = draws(teacher, world)
    x_t = forward_noise(x, t, eps, teacher.schedule)
    lam = teacher.schedule.logsnr_at(t)
    gap = teacher.predict_logsnr(x_t, lam, Y) - teacher.predict_logsnr(x_t, lam, NULL_PROMPT)
    info = 0.5 * np.sum(gap**2, axis=1)
    assert mim_mu_loss(teacher, teacher, x, t, eps, Y).value == pytest.approx(np.mean(2 * info), rel=1e-12)


def test_mim_mu_gradient_identity(world):
    teacher, student = tiny_pair(world, seed=4)
    x, t, eps = draws(student, world, seed=2)
    rec = mim_mu_loss(student, teacher, x, t, eps, Y)
    analytic = mim_mu_analytic_gradient(student, teacher, x, t, eps, Y)
    assert relative_error(rec.gradient(), 2 * analytic) <= 1e-10


def test_mim_mu_rejects_null_prompt(world):
    teacher, _ = tiny_pair(world)
    with pytest.raises(ValueError):
        mim_mu_loss(teacher, teacher, *draws(teacher, world), NULL_PROMPT)


def test_sdd_loss_and_gradient(world):
    teacher, student = tiny_pair(world, seed=5)
    b = blind(student)
    assert sdd_loss(b, teacher, None, 60, Y, 2.0, 0, n=6).value == 0.0
    rec = sdd_loss(student, teacher, None, 60, Y, 2.0, [1, 2], n=6)
    latents = sdd_latents(teacher, 60, Y, 2.0, [1, 2], 6)
    assert relative_error(rec.gradient(), sdd_analytic_gradient(student, latents, 60, Y)) <= 1e-10


def test_retarget_terms(world):
    teacher, _ = tiny_pair(world)
    rng = np.random.default_rng(0)
    fx, _ = world.sample_arrays(Y, 4, 0)
    rx, rl = world.sample_arrays(ConceptPrompt(0, 2), 3, 1)
    t = rng.integers(1, 201, size=7)
    eps = rng.standard_normal((7, 2))
    assert retarget_loss(teacher, teacher, fx, rx, rl, t, eps, Y, anchor_prompt=Y).value == 0.0
    # default null anchor: only the forget rows contribute, as the squared guidance gap
    expected = mim_mu_loss(teacher, teacher, fx, t[:4], eps[:4], Y).value
    assert retarget_loss(teacher, teacher, fx, rx, rl, t, eps, Y).value == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        retarget_loss(teacher, teacher, fx, np.zeros((0, 2)), np.zeros((0, 2), int), t[:4], eps[:4], Y)


def test_gradient_identities_hold(world):
    rows = verify_gradient_identities(world, seed=1, timesteps=(40, 150))
    assert {r["check"] for r in rows} >= {"full_vs_finite_difference", "kl_over_free_ratio", "mim_mu_analytic"}
    assert all(r["passed"] for r in rows), [r for r in rows if not r["passed"]]


def test_gradients_vanish_for_blind_teacher(world):
    teacher, student = tiny_pair(world)
    x = np.random.default_rng(0).standard_normal((3, 2)) * 5
    b = blind(teacher)
    assert np.max(np.abs(full_mi_gradient(student, b, x, 100, Y, 0))) == 0.0
    assert np.max(np.abs(jacobian_free_gradient(student, b, x, 100, Y, 0))) == 0.0


def test_full_gradient_size_guard(world):
    arch = Architecture.for_world(world, hidden=(128, 128))
    big = DenoiserModel.init(arch, seed=0)
    assert big.params.size > MAX_JACOBIAN_PARAMS
    with pytest.raises(ValueError):
        full_mi_gradient(big, big, np.zeros((1, 2)), 10, Y)


def test_trainable_masks(tiny_model):
    m = tiny_model
    assert trainable_mask(m, "all").sum() == m.params.size
    shared = trainable_mask(m, "shared")
    assert m.params.size - shared.sum() == 2 * m.arch.emb_dim
    cond = trainable_mask(m, "conditioning")
    _, s, e, _ = m.params.entry("emb_a")
    assert cond[s:e].all()
    _, s, e, _ = m.params.entry("W_out")
    assert not cond[s:e].any()


def test_zero_steps_return_teacher(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=4)
    rep = run_unlearn(small_teacher, fs, UnlearnConfig(steps=0))
    assert rep.student.params.to_bytes() == small_teacher.params.to_bytes()
    assert rep.loss_curve == []


@pytest.mark.parametrize("method", ["mim_mu", "sdd"])
def test_run_is_compensation_free_and_keeps_teacher(small_teacher, world, method):
    before = small_teacher.params.to_bytes()
    fs = build_forget_set(world, 1, per_b=4)
    cfg = UnlearnConfig(method=method, steps=15, batch_size=8, lr=1e-3)
    rep = run_unlearn(small_teacher, fs, cfg, world=Refuses())
    assert small_teacher.params.to_bytes() == before
    assert rep.student.params.to_bytes() != before
    assert len(rep.loss_curve) == 15


def test_retarget_reads_replay_data(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=4)
    cfg = UnlearnConfig(method="retarget", retain=RetainSpec(per_cell=2), steps=3, batch_size=8)
    with pytest.raises(ValueError):
        run_unlearn(small_teacher, fs, cfg)
    assert len(run_unlearn(small_teacher, fs, cfg, world=world).loss_curve) == 3


def test_blind_teacher_is_a_fixed_point(small_teacher, world):
    b = blind(small_teacher)
    fs = build_forget_set(world, 1, per_b=4)
    rep = run_unlearn(b, fs, UnlearnConfig(steps=20, batch_size=8, lr=1e-2))
    assert rep.student.params.to_bytes() == b.params.to_bytes()
    assert max(rep.loss_curve) == 0.0


def test_runs_are_deterministic(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=4)
    cfg = UnlearnConfig(steps=20, batch_size=8, seed=9)
    a = run_unlearn(small_teacher, fs, cfg)
    b = run_unlearn(small_teacher, fs, cfg)
    assert a.student_digest == b.student_digest and a.loss_curve == b.loss_curve
    c = run_unlearn(small_teacher, fs, UnlearnConfig(steps=20, batch_size=8, seed=10))
    assert c.student_digest != a.student_digest


def test_single_target_multi_matches_run(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=4)
    cfg = UnlearnConfig(steps=10, batch_size=8)
    assert multi_concept_unlearn(small_teacher, [fs], cfg).student_digest == run_unlearn(small_teacher, fs, cfg).student_digest


def test_multi_rejects_duplicates(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=4)
    with pytest.raises(ValueError):
        multi_concept_unlearn(small_teacher, [fs, fs], UnlearnConfig(steps=1))


def test_multi_runs_steps_per_target(small_teacher, world):
    forgets = [build_forget_set(world, a, per_b=4) for a in (1, 2)]
    rep = multi_concept_unlearn(small_teacher, forgets, UnlearnConfig(steps=6, batch_size=8))
    assert rep.targets == [1, 2] and len(rep.loss_curve) == 12


def test_nan_aborts_with_state(small_teacher, world):
    p = small_teacher.params.data.copy()
    _, start, _, _ = small_teacher.params.entry("W_out")
    p[start] = np.nan
    broken = small_teacher.with_params(small_teacher.params.replace(p))
    fs = build_forget_set(world, 1, per_b=4)
    with pytest.raises(NumericalError, match="step 0"):
        run_unlearn(broken, fs, UnlearnConfig(steps=3, batch_size=8))


def test_snapshots_are_ordered(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=4)
    rep = run_unlearn(small_teacher, fs, UnlearnConfig(steps=12, batch_size=8),
                      snapshot=lambda m, s: {"norm": float(np.linalg.norm(m.params.data))},
                      snapshot_steps=[12, 0, 5])
    assert [s["step"] for s in rep.snapshots] == [0, 5, 12]
    body = json.loads(rep.to_json())
    assert body["student_digest"] == rep.student_digest and len(body["loss_curve"]) == 12


def test_checkpoint_round_trip(small_teacher, world):
    rep = run_unlearn(small_teacher, build_forget_set(world, 1, per_b=4), UnlearnConfig(steps=5, batch_size=8))
    model, header = model_from_bytes(student_checkpoint(rep, {"method": "mim_mu"}))
    assert model.params.to_bytes() == rep.student.params.to_bytes()
    assert header["seed_lineage"]["method"] == "mim_mu"


def test_forget_loss_drops_on_small_model(small_teacher, world):
    fs = build_forget_set(world, 1, per_b=8)
    rep = run_unlearn(small_teacher, fs, UnlearnConfig(steps=400, batch_size=32, lr=1e-3))
    assert rep.final_forget_loss < 0.3 * rep.initial_forget_loss
    assert rep.initial_forget_loss == pytest.approx(forget_loss(small_teacher, small_teacher, [fs]))


@pytest.mark.slow
def test_default_run_converges(teacher, world):
    rep = run_unlearn(teacher, build_forget_set(world, 1), UnlearnConfig())
    assert rep.final_forget_loss <= 0.05 * rep.initial_forget_loss

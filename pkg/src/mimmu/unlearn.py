"""Concept erasure by fine-tuning a copy of a pretrained denoiser.

Three training objectives share one loop:

* ``mim_mu``: pull the student's prediction under the erased prompt onto the
  frozen teacher's unconditional prediction, on noised forget-set points;
* ``sdd``: pull the student's conditional prediction onto its own (detached)
  unconditional prediction, on latents from partial chains of an EMA copy;
* ``retarget``: pull the erased prompt onto an anchor prompt of the teacher,
  plus a retain term that replays non-target data.

The remaining functions differentiate the per-timestep information
``I_t = 1/2 ||eps_P(x_t | y) - eps_P(x_t)||^2`` of a point regenerated by the
student, either exactly (through the teacher) or with the teacher Jacobian
dropped, and check the closed forms those gradients reduce to.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .diffusion import (
    Architecture,
    DenoiserModel,
    NumericalError,
    checkpoint_bytes,
    forward_noise,
    partial_sample,
    sample,
)
from .numerics import (
    GradientRecorder,
    Node,
    OptimizerState,
    adam_step,
    ema_update,
    finite_difference,
    grad,
    relative_error,
    vjp,
)
from .world import NULL_PROMPT, ConceptPrompt, ConceptWorld, LabeledSample

log = logging.getLogger(__name__)

METHODS = ("mim_mu", "sdd", "retarget")
DISTILL_TARGETS = ("teacher_uncond", "gaussian", "zero")
TRAINABLE = ("all", "conditioning", "shared")
MAX_JACOBIAN_PARAMS = 10_000


# ---------------------------------------------------------------------------
# data and configuration


@dataclass(frozen=True)
class ForgetSet:
    """Points carrying the erased A-value, covering every B-value."""

    samples: tuple
    prompt: ConceptPrompt
    n_b: int
    min_per_b: int = 1

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.prompt.a is None or self.prompt.b is not None:
            raise ValueError("forget prompt must name an A-value and leave B null")
        counts = np.zeros(self.n_b, dtype=int)
        for s in self.samples:
            if s.label[0] != self.prompt.a:
                raise ValueError(f"sample label {s.label} does not carry target A-value {self.prompt.a}")
            counts[s.label[1]] += 1
        if counts.min() < self.min_per_b:
            raise ValueError(f"every B-value needs at least {self.min_per_b} samples, got {counts.tolist()}")

    @property
    def target(self) -> int:
        return self.prompt.a

    @property
    def x(self) -> np.ndarray:
        return np.stack([s.x for s in self.samples])


def build_forget_set(world: ConceptWorld, target_a: int, per_b: int = 16, seed=0) -> ForgetSet:
    samples: List[LabeledSample] = []
    base = [int(s) for s in np.atleast_1d(seed)]
    for b in range(world.n_b):
        samples.extend(world.sample(ConceptPrompt(target_a, b), per_b, base + [target_a, b]))
    return ForgetSet(tuple(samples), ConceptPrompt(a=target_a), world.n_b, per_b)


@dataclass(frozen=True)
class RetainSpec:
    """Replay data for the retargeting baseline: ``per_cell`` points per non-target label."""

    per_cell: int = 16
    seed: int = 0


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "mim_mu"
    steps: int = 3000
    lr: float = 1e-4
    batch_size: int = 32
    t_sampling: str = "uniform"
    seed: int = 0
    ema_decay: float = 0.999
    gamma: float = 2.0
    anchor_prompt: Optional[ConceptPrompt] = None
    retain: Optional[RetainSpec] = None
    distill_target: str = "teacher_uncond"
    refresh_every: int = 0
    refresh_size: int = 80
    trainable: str = "all"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if (self.retain is not None) != (self.method == "retarget"):
            raise ValueError("a retain set is required for retarget and forbidden otherwise")
        if self.anchor_prompt is not None and self.method != "retarget":
            raise ValueError("anchor prompt only applies to retarget")
        if self.t_sampling != "uniform":
            raise ValueError(f"unsupported t sampling {self.t_sampling!r}")
        if self.trainable not in TRAINABLE:
            raise ValueError(f"unknown trainable subset {self.trainable!r}")
        if self.distill_target not in DISTILL_TARGETS:
            raise ValueError(f"unknown distillation target {self.distill_target!r}")
        if self.steps < 0 or self.batch_size < 1 or self.refresh_every < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and refresh_every >= 0 required")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["anchor_prompt"] = None if self.anchor_prompt is None else [self.anchor_prompt.a, self.anchor_prompt.b]
        return out


@dataclass
class UnlearnRunReport:
    method: str
    targets: List[int]
    loss_curve: List[float]
    snapshots: List[dict]
    wall_clock: float
    initial_forget_loss: float
    final_forget_loss: float
    student: DenoiserModel = field(repr=False)
    student_digest: str = ""

    def to_json(self) -> str:
        body = {
            "method": self.method,
            "targets": self.targets,
            "loss_curve": self.loss_curve,
            "snapshots": self.snapshots,
            "initial_forget_loss": self.initial_forget_loss,
            "final_forget_loss": self.final_forget_loss,
            "student_digest": self.student_digest,
        }
        return json.dumps(body, indent=1)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossRecord:
    value: float
    recorder: GradientRecorder
    output: Node

    def gradient(self) -> np.ndarray:
        return grad(self.recorder, self.output)["params"]


def _recorded(model: DenoiserModel, x_t, logsnr, prompts):
    """Record the prediction of ``model`` for one or more prompt blocks stacked row-wise."""
    rec = GradientRecorder()
    flat = rec.register("params", model.params.data)
    a, b = _indices(model, prompts, np.asarray(x_t).shape[0])
    return rec, model.forward(rec, flat, np.asarray(x_t), logsnr, a, b)


def _indices(model, prompts, n):
    if isinstance(prompts, ConceptPrompt):
        return model.prompt_indices(prompts, n)
    a, b = prompts
    return np.asarray(a), np.asarray(b)


def _sq_mean(rec, pred, target):
    return rec.mean(rec.sum(rec.square(rec.sub(pred, target)), axis=1))


def distill_target(teacher: DenoiserModel, x_t, logsnr, kind: str = "teacher_uncond") -> np.ndarray:
    """Prompt-independent regression target for the erased prompt."""
    if kind == "teacher_uncond":
        return teacher.predict_logsnr(x_t, logsnr, NULL_PROMPT)
    if kind == "gaussian":
        lam = np.broadcast_to(np.asarray(logsnr, dtype=np.float64), (x_t.shape[0],))
        return np.sqrt(expit(-lam))[:, None] * x_t
    if kind == "zero":
        return np.zeros_like(x_t)
    raise ValueError(f"unknown distillation target {kind!r}")


def mim_mu_loss(student: DenoiserModel, teacher: DenoiserModel, x, t, eps, prompt_y: ConceptPrompt,
                target: str = "teacher_uncond") -> LossRecord:
    """``mean ||eps_U(x_t | y) - eps_P(x_t)||^2``; the teacher side is a constant."""
    if prompt_y.is_null:
        raise ValueError("the erased prompt must not be fully null")
    sched = student.schedule
    x_t = forward_noise(x, t, eps, sched)
    lam = sched.logsnr_at(t)
    tgt = distill_target(teacher, x_t, lam, target)
    rec, pred = _recorded(student, x_t, lam, prompt_y)
    out = _sq_mean(rec, pred, tgt)
    return LossRecord(float(out.value), rec, out)


def mim_mu_analytic_gradient(student: DenoiserModel, teacher: DenoiserModel, x, t, eps,
                             prompt_y: ConceptPrompt) -> np.ndarray:
    """``mean[(eps_U(x_t|y) - eps_P(x_t)) . d eps_U(x_t|y) / d theta]``.

    This is half the gradient of :func:`mim_mu_loss`; the constant 2 of the
    squared norm is left out as in the noise-alignment identity.
    """
    sched = student.schedule
    x_t = forward_noise(x, t, eps, sched)
    lam = sched.logsnr_at(t)
    rec, pred = _recorded(student, x_t, lam, prompt_y)
    resid = pred.value - teacher.predict_logsnr(x_t, lam, NULL_PROMPT)
    return vjp(rec, pred, resid / x_t.shape[0])["params"]


def sdd_latents(ema_model: DenoiserModel, t: int, prompt_y: ConceptPrompt, gamma: float, seed, n: int):
    return partial_sample(ema_model, None, prompt_y, gamma, int(t), seed, n=n)


def sdd_loss(student: DenoiserModel, ema_model: DenoiserModel, schedule, t: int, prompt_y: ConceptPrompt,
             gamma: float = 2.0, seed=0, n: int = 32, x_tilde=None) -> LossRecord:
    """``mean ||eps_U(x~_t | y) - sg(eps_U(x~_t))||^2`` on EMA partial-chain latents."""
    if schedule is not None and schedule != student.schedule:
        raise ValueError("student and schedule disagree")
    if x_tilde is None:
        x_tilde = sdd_latents(ema_model, t, prompt_y, gamma, seed, n)
    lam = student.schedule.logsnr_at(t)
    uncond = student.predict_logsnr(x_tilde, lam, NULL_PROMPT)
    rec, cond = _recorded(student, x_tilde, lam, prompt_y)
    out = _sq_mean(rec, cond, uncond)
    return LossRecord(float(out.value), rec, out)


def sdd_analytic_gradient(student: DenoiserModel, x_tilde, t: int, prompt_y: ConceptPrompt) -> np.ndarray:
    """``mean[2 (eps_U(x~|y) - eps_U(x~)) . d eps_U(x~|y) / d theta]``."""
    lam = student.schedule.logsnr_at(t)
    rec, cond = _recorded(student, x_tilde, lam, prompt_y)
    gap = cond.value - student.predict_logsnr(x_tilde, lam, NULL_PROMPT)
    return vjp(rec, cond, 2.0 * gap / x_tilde.shape[0])["params"]


def retarget_loss(student: DenoiserModel, teacher: DenoiserModel, forget_x, retain_x, retain_labels,
                  t, eps, prompt_y: ConceptPrompt, anchor_prompt: ConceptPrompt = NULL_PROMPT) -> LossRecord:
    """Anchor term on forget rows plus replay term on retain rows.

    ``t`` and ``eps`` cover the forget rows followed by the retain rows; each
    retain row is conditioned on its own label.
    """
    forget_x = np.asarray(forget_x)
    retain_x = np.asarray(retain_x)
    if retain_x.shape[0] == 0:
        raise ValueError("retain data is required")
    nf = forget_x.shape[0]
    sched = student.schedule
    t = np.asarray(t)
    x_t = forward_noise(np.concatenate([forget_x, retain_x]), t, eps, sched)
    lam = sched.logsnr_at(t)
    labels = np.asarray(retain_labels)
    fa, fb = student.prompt_indices(prompt_y, nf)
    ta, tb = teacher.prompt_indices(anchor_prompt, nf)
    a = np.concatenate([fa, labels[:, 0]])
    b = np.concatenate([fb, labels[:, 1]])
    tgt = np.concatenate([
        teacher.predict_indices(x_t[:nf], lam[:nf], ta, tb),
        teacher.predict_indices(x_t[nf:], lam[nf:], labels[:, 0], labels[:, 1]),
    ])
    rec = GradientRecorder()
    flat = rec.register("params", student.params.data)
    pred = student.forward(rec, flat, x_t, lam, a, b)
    sq = rec.sum(rec.square(rec.sub(pred, tgt)), axis=1)
    w = np.concatenate([np.full(nf, 1.0 / nf), np.full(retain_x.shape[0], 1.0 / retain_x.shape[0])])
    out = rec.sum(rec.mul(sq, w))
    return LossRecord(float(out.value), rec, out)


# ---------------------------------------------------------------------------
# gradients of the per-timestep information of a regenerated point


@dataclass(frozen=True)
class RegeneratedPoint:
    """Quantities around ``x = (x~_t - sqrt(1-abar) eps_U(x~_t|y)) / sqrt(abar)``.

    ``x_t`` re-noises that point with fresh noise; ``gap`` is the teacher's
    ``eps_P(x_t|y) - eps_P(x_t)``.
    """

    x_t: np.ndarray
    gap: np.ndarray
    abar: float


def _renoise_noise(seed, shape):
    return np.random.default_rng([int(s) for s in np.atleast_1d(seed)]).standard_normal(shape)


def regenerate(student: DenoiserModel, teacher: DenoiserModel, x_tilde, t: int, prompt_y: ConceptPrompt,
               seed=0) -> RegeneratedPoint:
    sched = student.schedule
    lam = float(sched.logsnr_at(t))
    abar, omab = expit(lam), expit(-lam)
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64))
    eps_u = student.predict_logsnr(x_tilde, lam, prompt_y)
    x0 = (x_tilde - np.sqrt(omab) * eps_u) / np.sqrt(abar)
    x_t = np.sqrt(abar) * x0 + np.sqrt(omab) * _renoise_noise(seed, x_tilde.shape)
    gap = teacher.predict_logsnr(x_t, lam, prompt_y) - teacher.predict_logsnr(x_t, lam, NULL_PROMPT)
    return RegeneratedPoint(x_t, gap, abar)


def regenerated_information(student: DenoiserModel, teacher: DenoiserModel, x_tilde, t: int,
                            prompt_y: ConceptPrompt, seed=0) -> float:
    """Batch mean of ``I_t`` at the student's regenerated points; the objective being differentiated."""
    point = regenerate(student, teacher, x_tilde, t, prompt_y, seed)
    return float(np.mean(0.5 * np.sum(point.gap**2, axis=1)))


def full_mi_gradient(student: DenoiserModel, teacher: DenoiserModel, x_tilde, t: int,
                     prompt_y: ConceptPrompt, seed=0) -> np.ndarray:
    """Exact gradient of :func:`regenerated_information`, through the teacher's input Jacobian."""
    if student.params.size > MAX_JACOBIAN_PARAMS:
        raise ValueError(
            f"full gradient is for verification on models with at most {MAX_JACOBIAN_PARAMS} parameters"
        )
    sched = student.schedule
    lam = float(sched.logsnr_at(t))
    abar, omab = expit(lam), expit(-lam)
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64))
    n = x_tilde.shape[0]
    rec = GradientRecorder()
    flat = rec.register("params", student.params.data)
    a, b = student.prompt_indices(prompt_y, n)
    eps_u = student.forward(rec, flat, x_tilde, lam, a, b)
    x0 = rec.mul(rec.sub(x_tilde, rec.mul(eps_u, np.sqrt(omab))), 1.0 / np.sqrt(abar))
    x_t = rec.add(rec.mul(x0, np.sqrt(abar)), np.sqrt(omab) * _renoise_noise(seed, x_tilde.shape))
    tflat = teacher.params.data
    na, nb = teacher.prompt_indices(NULL_PROMPT, n)
    ca, cb = teacher.prompt_indices(prompt_y, n)
    cond = teacher.forward(rec, tflat, x_t, lam, ca, cb)
    uncond = teacher.forward(rec, tflat, x_t, lam, na, nb)
    info = rec.mul(rec.mean(rec.sum(rec.square(rec.sub(cond, uncond)), axis=1)), 0.5)
    return grad(rec, info)["params"]


def _student_vjp(student, x_tilde, t, prompt_y, cotangent):
    lam = float(student.schedule.logsnr_at(t))
    rec, pred = _recorded(student, np.atleast_2d(x_tilde), lam, prompt_y)
    return vjp(rec, pred, cotangent)["params"]


def jacobian_free_gradient(student: DenoiserModel, teacher: DenoiserModel, x_tilde, t: int,
                           prompt_y: ConceptPrompt, seed=0) -> np.ndarray:
    """``mean[w(t) (eps_P(x_t|y) - eps_P(x_t)) . d eps_U(x~_t|y) / d theta]``, ``w = -sqrt(1-abar)``."""
    point = regenerate(student, teacher, x_tilde, t, prompt_y, seed)
    w = -np.sqrt(1.0 - point.abar)
    return _student_vjp(student, x_tilde, t, prompt_y, w * point.gap / point.gap.shape[0])


def jacobian_path_gradient(student: DenoiserModel, teacher: DenoiserModel, x_tilde, t: int,
                           prompt_y: ConceptPrompt, seed=0) -> np.ndarray:
    """The part of the full gradient that the Jacobian-free form leaves out.

    The full gradient pulls ``(J_c - J_u)^T gap`` back through the student, the
    Jacobian-free one pulls ``gap``; this returns the pullback of the difference.
    """
    point = regenerate(student, teacher, x_tilde, t, prompt_y, seed)
    n = point.x_t.shape[0]
    lam = float(student.schedule.logsnr_at(t))
    rec = GradientRecorder()
    xin = rec.register("x_t", point.x_t)
    ca, cb = teacher.prompt_indices(prompt_y, n)
    na, nb = teacher.prompt_indices(NULL_PROMPT, n)
    diff = rec.sub(teacher.forward(rec, teacher.params.data, xin, lam, ca, cb),
                   teacher.forward(rec, teacher.params.data, xin, lam, na, nb))
    pulled = vjp(rec, diff, point.gap)["x_t"]
    w = -np.sqrt(1.0 - point.abar)
    return _student_vjp(student, x_tilde, t, prompt_y, w * (pulled - point.gap) / n)


def kl_surrogate_gradient(student: DenoiserModel, teacher: DenoiserModel, x_tilde, t: int,
                          prompt_y: ConceptPrompt, seed=0) -> np.ndarray:
    """Recorder gradient of the surrogate whose gradient is the KL objective's.

    ``d KL(p(x_t) || p(x_t|y)) / d x_t`` is the score difference
    ``(eps_P(x_t|y) - eps_P(x_t)) / sqrt(1-abar)``; holding it fixed and taking
    its inner product with the student-dependent ``x_t(theta)`` gives a scalar
    with the same parameter gradient.
    """
    point = regenerate(student, teacher, x_tilde, t, prompt_y, seed)
    sched = student.schedule
    lam = float(sched.logsnr_at(t))
    omab = expit(-lam)
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64))
    n = x_tilde.shape[0]
    rec = GradientRecorder()
    flat = rec.register("params", student.params.data)
    a, b = student.prompt_indices(prompt_y, n)
    eps_u = student.forward(rec, flat, x_tilde, lam, a, b)
    # x_t(theta) = x~_t - sqrt(1-abar) eps_U(x~_t|y) + sqrt(1-abar) eps'
    x_t = rec.add(rec.sub(x_tilde, rec.mul(eps_u, np.sqrt(omab))), point.x_t - x_tilde + np.sqrt(omab) * eps_u.value)
    score_gap = point.gap / np.sqrt(omab)
    surrogate = rec.mul(rec.sum(rec.mul(x_t, score_gap)), 1.0 / n)
    return grad(rec, surrogate)["params"]


# ---------------------------------------------------------------------------
# training loop


def trainable_mask(model: DenoiserModel, subset: str) -> np.ndarray:
    """1 on trainable parameters.

    ``conditioning`` keeps the attribute embeddings and the first-layer rows that
    read them; ``shared`` trains everything except the two null-token rows.
    """
    mask = np.ones(model.params.size)
    if subset == "all":
        return mask
    arch = model.arch
    if subset == "shared":
        for name, row in (("emb_a", arch.n_a), ("emb_b", arch.n_b)):
            _, start, _, shape = model.params.entry(name)
            mask[start + row * shape[1]:start + (row + 1) * shape[1]] = 0.0
        return mask
    mask[:] = 0.0
    for name in ("emb_a", "emb_b"):
        _, start, stop, _ = model.params.entry(name)
        mask[start:stop] = 1.0
    _, start, stop, shape = model.params.entry("W0")
    block = np.zeros(shape)
    block[arch.d + arch.time_dim:, :] = 1.0
    mask[start:stop] = block.reshape(-1)
    return mask


def _digest(model: DenoiserModel) -> str:
    return hashlib.sha256(model.params.to_bytes()).hexdigest()


def _seed_words(seed) -> list:
    return [int(s) for s in np.atleast_1d(seed)]


def _retain_pool(world: ConceptWorld, targets: Sequence[int], spec: RetainSpec):
    xs, labels = [], []
    for a in range(world.n_a):
        if a in targets:
            continue
        for b in range(world.n_b):
            x, lab = world.sample_arrays(ConceptPrompt(a, b), spec.per_cell, [spec.seed, a, b])
            xs.append(x)
            labels.append(lab)
    if not xs:
        raise ValueError("no non-target labels left for retain data")
    return np.concatenate(xs), np.concatenate(labels)


def forget_loss(student: DenoiserModel, teacher: DenoiserModel, forgets: Sequence[ForgetSet],
                target: str = "teacher_uncond", draws: int = 8, seed=0) -> float:
    """MiM-MU loss over the whole forget set(s) with fixed ``(t, eps)`` draws."""
    rng = np.random.default_rng(_seed_words(seed) + [7])
    total = 0.0
    for fs in forgets:
        x = np.repeat(fs.x, draws, axis=0)
        t = rng.integers(1, student.schedule.T + 1, size=x.shape[0])
        eps = rng.standard_normal(x.shape)
        total += mim_mu_loss(student, teacher, x, t, eps, fs.prompt, target).value
    return total / len(forgets)


def multi_concept_unlearn(teacher: DenoiserModel, forgets: Sequence[ForgetSet], config: UnlearnConfig,
                          world: Optional[ConceptWorld] = None,
                          snapshot: Optional[Callable[[DenoiserModel, int], dict]] = None,
                          snapshot_steps: Sequence[int] = ()) -> UnlearnRunReport:
    """Fine-tune a copy of ``teacher``, cycling through forget sets one batch at a time.

    Runs ``config.steps`` optimizer steps per forget set. ``world`` is consulted
    only by ``retarget`` (for replay data); the other methods never read it.
    """
    targets = [fs.target for fs in forgets]
    if len(set(targets)) != len(targets):
        raise ValueError(f"duplicate erasure targets {targets}")
    if not forgets:
        raise ValueError("at least one forget set is required")
    cfg = config
    sched = teacher.schedule
    rng = np.random.default_rng(_seed_words(cfg.seed) + [101])
    params = teacher.params
    opt = OptimizerState("adam", lr=cfg.lr)
    ema = teacher.params
    pools = [fs.x for fs in forgets]
    retain = None
    if cfg.method == "retarget":
        if world is None:
            raise ValueError("retarget needs the world to draw retain data")
        retain = _retain_pool(world, targets, cfg.retain)
    anchor = cfg.anchor_prompt or NULL_PROMPT
    mask = trainable_mask(teacher, cfg.trainable)
    start = time.perf_counter()
    init_loss = forget_loss(teacher, teacher, forgets, cfg.distill_target, seed=cfg.seed)
    curve: List[float] = []
    snaps: List[dict] = []
    wanted = sorted(set(int(s) for s in snapshot_steps))
    total = cfg.steps * len(forgets)

    def take_snapshot(step, model):
        if snapshot is not None and step in wanted:
            snaps.append({"step": step, **snapshot(model, step)})

    take_snapshot(0, teacher)
    B = cfg.batch_size
    for step in range(total):
        k = step % len(forgets)
        fs = forgets[k]
        student = teacher.with_params(params)
        if cfg.refresh_every and step and step % cfg.refresh_every == 0 and cfg.method == "mim_mu":
            pools[k] = sample(student, None, fs.prompt, cfg.gamma, cfg.refresh_size, _seed_words(cfg.seed) + [step, k])
        if cfg.method == "sdd":
            t = int(rng.integers(1, sched.T + 1))
            rec = sdd_loss(student, teacher.with_params(ema), None, t, fs.prompt, cfg.gamma,
                           _seed_words(cfg.seed) + [step], n=B)
        else:
            pool = pools[k]
            x = pool[rng.integers(0, pool.shape[0], size=B)]
            t = rng.integers(1, sched.T + 1, size=B)
            eps = rng.standard_normal(x.shape)
            if cfg.method == "mim_mu":
                rec = mim_mu_loss(student, teacher, x, t, eps, fs.prompt, cfg.distill_target)
            else:
                pick = rng.integers(0, retain[0].shape[0], size=B)
                t_all = np.concatenate([t, rng.integers(1, sched.T + 1, size=B)])
                eps_all = np.concatenate([eps, rng.standard_normal((B, x.shape[1]))])
                rec = retarget_loss(student, teacher, x, retain[0][pick], retain[1][pick], t_all, eps_all,
                                    fs.prompt, anchor)
        if not np.isfinite(rec.value):
            raise NumericalError(
                f"unlearning loss is {rec.value} at step {step}; "
                f"state: method={cfg.method} target={fs.target} lr={cfg.lr} last_losses={curve[-5:]}"
            )
        params, opt = adam_step(params, rec.gradient() * mask, opt)
        if cfg.method == "sdd":
            ema = ema_update(ema, params, cfg.ema_decay)
        curve.append(rec.value)
        take_snapshot(step + 1, teacher.with_params(params))
    student = teacher.with_params(params)
    wall = time.perf_counter() - start
    final_loss = forget_loss(student, teacher, forgets, cfg.distill_target, seed=cfg.seed)
    return UnlearnRunReport(cfg.method, targets, curve, snaps, wall, init_loss, final_loss, student,
                            _digest(student))


def run_unlearn(teacher: DenoiserModel, forget: ForgetSet, config: UnlearnConfig,
                world: Optional[ConceptWorld] = None,
                snapshot: Optional[Callable[[DenoiserModel, int], dict]] = None,
                snapshot_steps: Sequence[int] = ()) -> UnlearnRunReport:
    return multi_concept_unlearn(teacher, [forget], config, world, snapshot, snapshot_steps)


def student_checkpoint(report: UnlearnRunReport, lineage: Optional[dict] = None) -> bytes:
    return checkpoint_bytes(report.student, lineage)


# ---------------------------------------------------------------------------
# identity checks on a tiny model

IDENTITY_TOLERANCES = {
    "full_vs_finite_difference": 1e-5,
    "full_eq_free_plus_path": 1e-10,
    "kl_over_free_ratio": 1e-6,
    "kl_free_cosine": 1e-8,
    "free_zero_for_y_blind_teacher": 1e-12,
    "mim_mu_analytic": 1e-10,
    "sdd_analytic": 1e-10,
}


def tiny_pair(world: ConceptWorld, seed: int = 0, hidden=(16, 16)):
    """Teacher and student of a few hundred parameters for gradient checks."""
    arch = Architecture.for_world(world, hidden=tuple(hidden), time_dim=8, emb_dim=4)
    return DenoiserModel.init(arch, seed=[seed, 1]), DenoiserModel.init(arch, seed=[seed, 2])


def verify_gradient_identities(world: ConceptWorld, seed: int = 0, timesteps=(20, 100, 180),
                               n_points: int = 4) -> List[dict]:
    """Residual of every gradient identity on a tiny model; one row per check and timestep."""
    teacher, student = tiny_pair(world, seed)
    rng = np.random.default_rng([seed, 3])
    prompt = ConceptPrompt(a=1 % world.n_a)
    scale = np.asarray(student.arch.data_scale)
    shift = np.asarray(student.arch.data_shift)
    x_tilde = shift + scale * rng.standard_normal((n_points, world.d))
    # a teacher whose conditional ignores y: zero both embedding tables
    blind = teacher.params.data.copy()
    for name in ("emb_a", "emb_b"):
        _, start, stop, _ = teacher.params.entry(name)
        blind[start:stop] = 0.0
    blind_teacher = teacher.with_params(teacher.params.replace(blind))
    rows = []

    def add(check, t, residual):
        tol = IDENTITY_TOLERANCES[check]
        rows.append({"check": check, "t": t, "residual": float(residual), "tolerance": tol,
                     "passed": bool(residual <= tol)})

    for t in timesteps:
        s = [seed, 4, t]
        full = full_mi_gradient(student, teacher, x_tilde, t, prompt, s)
        f = lambda p: regenerated_information(student.with_params(student.params.replace(p)), teacher,
                                              x_tilde, t, prompt, s)
        fd = finite_difference(f, student.params.data.copy())
        free = jacobian_free_gradient(student, teacher, x_tilde, t, prompt, s)
        path = jacobian_path_gradient(student, teacher, x_tilde, t, prompt, s)
        kl = kl_surrogate_gradient(student, teacher, x_tilde, t, prompt, s)
        abar = float(student.schedule.abar_at(t))
        cos = free @ kl / (np.linalg.norm(free) * np.linalg.norm(kl))
        add("full_vs_finite_difference", t, relative_error(full, fd))
        add("full_eq_free_plus_path", t, relative_error(full, free + path))
        add("kl_over_free_ratio", t, relative_error(kl, free / np.sqrt(1.0 - abar)))
        add("kl_free_cosine", t, abs(1.0 - cos))
        add("free_zero_for_y_blind_teacher", t,
            float(np.max(np.abs(jacobian_free_gradient(student, blind_teacher, x_tilde, t, prompt, s)))))
    x = shift + scale * rng.standard_normal((8, world.d))
    tt = rng.integers(1, student.schedule.T + 1, size=8)
    eps = rng.standard_normal(x.shape)
    rec = mim_mu_loss(student, teacher, x, tt, eps, prompt)
    # the recorder differentiates a mean of squares, hence the factor 2 on the analytic form
    add("mim_mu_analytic", -1,
        relative_error(rec.gradient(), 2.0 * mim_mu_analytic_gradient(student, teacher, x, tt, eps, prompt)))
    t_sdd = int(timesteps[len(timesteps) // 2])
    rec = sdd_loss(student, teacher, None, t_sdd, prompt, 2.0, [seed, 5], n=8)
    latents = sdd_latents(teacher, t_sdd, prompt, 2.0, [seed, 5], 8)
    add("sdd_analytic", t_sdd, relative_error(rec.gradient(), sdd_analytic_gradient(student, latents, t_sdd, prompt)))
    return rows

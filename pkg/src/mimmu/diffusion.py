"""Variance-preserving diffusion: schedule, conditional noise predictor, training, sampling.

The network is conditioned on log-SNR rather than the integer step, so the same
model can be queried on the discrete sampling grid and on the continuous log-SNR
nodes used by the information estimators.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .numerics import (
    DTYPE,
    Eager,
    GradientRecorder,
    OptimizerState,
    ParamVector,
    adam_step,
    grad,
)
from .world import NULL_PROMPT, ConceptPrompt, ConceptWorld

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EAGER = Eager()


class NumericalError(RuntimeError):
    """Raised when a computation produces NaN/Inf."""


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete schedule ``abar_1 > ... > abar_T`` with the matching log-SNR table.

    ``cosine`` is ``abar(u) = cos^2(a u + b)`` with ``a, b`` chosen so the log-SNR
    runs from ``logsnr_max`` at ``t = 1`` to ``logsnr_min`` at ``t = T``.
    """

    kind: str = "cosine"
    T: int = 200
    logsnr_max: float = 10.0
    logsnr_min: float = -10.0
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    logsnr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be at least 2")
        t = np.arange(1, self.T + 1)
        if self.kind == "cosine":
            if not self.logsnr_max > self.logsnr_min:
                raise ValueError("logsnr_max must exceed logsnr_min")
            b = np.arctan(np.exp(-0.5 * self.logsnr_max))
            a = np.arctan(np.exp(-0.5 * self.logsnr_min)) - b
            u = (t - 1) / (self.T - 1)
            lam = -2.0 * np.log(np.tan(a * u + b))
        elif self.kind == "linear":
            betas = np.linspace(self.beta_start, self.beta_end, self.T)
            abar = np.cumprod(1.0 - betas)
            lam = np.log(abar) - np.log1p(-abar)
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        lam = np.asarray(lam, dtype=DTYPE)
        lam.setflags(write=False)
        object.__setattr__(self, "logsnr", lam)
        if not np.all(np.diff(lam) < 0):
            raise ValueError("log-SNR must be strictly decreasing")

    @property
    def abar(self) -> np.ndarray:
        return expit(self.logsnr)

    @property
    def one_minus_abar(self) -> np.ndarray:
        return expit(-self.logsnr)

    @property
    def betas(self) -> np.ndarray:
        prev = np.concatenate([[1.0], self.abar[:-1]])
        return 1.0 - self.abar / prev

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return t

    def logsnr_at(self, t):
        return self.logsnr[self.check_t(t) - 1]

    def abar_at(self, t):
        return expit(self.logsnr_at(t))

    def descriptor(self) -> dict:
        if self.kind == "cosine":
            return {"kind": "cosine", "T": self.T, "logsnr_max": self.logsnr_max, "logsnr_min": self.logsnr_min}
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "NoiseSchedule":
        return cls(**desc)


def forward_noise(x, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    eps = np.asarray(eps, dtype=DTYPE)
    if x.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match x shape {x.shape}")
    lam = np.asarray(schedule.logsnr_at(t))
    return noise_at_logsnr(x, lam, eps)


def noise_at_logsnr(x, logsnr, eps) -> np.ndarray:
    """``sqrt(sigmoid(l)) x + sqrt(sigmoid(-l)) eps`` with per-row or scalar log-SNR."""
    lam = np.asarray(logsnr, dtype=DTYPE)
    if lam.ndim == 1 and np.ndim(x) == 2:
        lam = lam[:, None]
    return np.sqrt(expit(lam)) * x + np.sqrt(expit(-lam)) * eps


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Architecture:
    d: int
    n_a: int
    n_b: int
    hidden: Tuple[int, ...] = (128, 128, 128)
    time_dim: int = 32
    emb_dim: int = 16
    data_shift: Tuple[float, ...] = ()
    data_scale: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.data_shift:
            object.__setattr__(self, "data_shift", (0.0,) * self.d)
        if not self.data_scale:
            object.__setattr__(self, "data_scale", (1.0,) * self.d)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "data_shift", tuple(float(v) for v in self.data_shift))
        object.__setattr__(self, "data_scale", tuple(float(v) for v in self.data_scale))
        if len(self.data_shift) != self.d or len(self.data_scale) != self.d:
            raise ValueError("data_shift/data_scale must have length d")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @classmethod
    def for_world(cls, world: ConceptWorld, **kw) -> "Architecture":
        mean = world.weights @ world.means
        second = np.einsum("k,kij->ij", world.weights, world.covs) + np.einsum(
            "k,ki,kj->ij", world.weights, world.means - mean, world.means - mean
        )
        return cls(world.d, world.n_a, world.n_b, data_shift=tuple(mean),
                   data_scale=tuple(np.sqrt(np.diag(second))), **kw)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {
            "emb_a": (self.n_a + 1, self.emb_dim),
            "emb_b": (self.n_b + 1, self.emb_dim),
        }
        width = self.d + self.time_dim + 2 * self.emb_dim
        for i, h in enumerate(self.hidden):
            shapes[f"W{i}"] = (width, h)
            shapes[f"b{i}"] = (h,)
            width = h
        shapes["W_out"] = (width, self.d)
        shapes["b_out"] = (self.d,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def descriptor(self) -> dict:
        desc = asdict(self)
        desc["hidden"] = list(self.hidden)
        desc["data_shift"] = list(self.data_shift)
        desc["data_scale"] = list(self.data_scale)
        return desc


def time_embedding(logsnr: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(0.02), np.log(2.0), half))
    ang = np.asarray(logsnr, dtype=DTYPE)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class DenoiserModel:
    """Conditional noise predictor ``eps_hat(x_t, logsnr, a, b)``.

    Attribute index ``n_a`` (resp. ``n_b``) selects the null token of that axis.
    The output is the Gaussian-fit denoiser of the data plus a learned residual.
    """

    arch: Architecture
    params: ParamVector
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    @classmethod
    def init(cls, arch: Architecture, schedule: Optional[NoiseSchedule] = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        pv = ParamVector.from_shapes(arch.shapes())
        data = np.empty(pv.size)
        for name, start, stop, shape in pv.layout:
            if name.startswith("emb"):
                block = rng.standard_normal(shape)
            elif name.startswith("W"):
                block = rng.standard_normal(shape) / np.sqrt(shape[0])
                if name == "W_out":
                    block *= 0.1
            else:
                block = np.zeros(shape)
            data[start:stop] = block.reshape(-1)
        return cls(arch, pv.replace(data), schedule or NoiseSchedule())

    def with_params(self, params: ParamVector) -> "DenoiserModel":
        return DenoiserModel(self.arch, params, self.schedule)

    # -- evaluation ------------------------------------------------------

    def prompt_indices(self, prompt: ConceptPrompt, n: int) -> Tuple[np.ndarray, np.ndarray]:
        a = self.arch.n_a if prompt.a is None else prompt.a
        b = self.arch.n_b if prompt.b is None else prompt.b
        if not (0 <= a <= self.arch.n_a and 0 <= b <= self.arch.n_b):
            raise ValueError(f"prompt {prompt} out of range for this model")
        return np.full(n, a, dtype=np.int64), np.full(n, b, dtype=np.int64)

    def forward(self, ops, flat, x_t, logsnr, a_idx, b_idx):
        """Network evaluation through ``ops`` (an :class:`Eager` or a recorder).

        ``flat`` is the flat parameter array or a recorder node holding it; ``x_t``
        may also be a node when input gradients are wanted.
        """
        arch = self.arch
        pv = self.params
        xv = x_t.value if hasattr(x_t, "value") else x_t
        if xv.ndim != 2 or xv.shape[1] != arch.d:
            raise ValueError(f"expected x_t of shape (n, {arch.d}), got {xv.shape}")
        n = xv.shape[0]
        lam = np.broadcast_to(np.asarray(logsnr, dtype=DTYPE), (n,))
        abar, omab = expit(lam)[:, None], expit(-lam)[:, None]
        shift = np.asarray(arch.data_shift)[None, :]
        var = np.asarray(arch.data_scale)[None, :] ** 2
        denom = abar * var + omab
        centered = ops.sub(x_t, np.sqrt(abar) * shift)

        def piece(name):
            _, start, stop, shape = pv.entry(name)
            return ops.piece(flat, start, stop, shape)

        h = ops.concat(
            [
                ops.mul(centered, 1.0 / np.sqrt(denom)),
                time_embedding(lam, arch.time_dim),
                ops.take(piece("emb_a"), a_idx),
                ops.take(piece("emb_b"), b_idx),
            ],
            axis=1,
        )
        for i in range(len(arch.hidden)):
            h = ops.silu(ops.add(ops.matmul(h, piece(f"W{i}")), piece(f"b{i}")))
        out = ops.add(ops.matmul(h, piece("W_out")), piece("b_out"))
        return ops.add(out, ops.mul(centered, np.sqrt(omab) / denom))

    def predict_logsnr(self, x_t, logsnr, prompt: ConceptPrompt = NULL_PROMPT) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
        a, b = self.prompt_indices(prompt, x_t.shape[0])
        return self.forward(EAGER, self.params.data, x_t, logsnr, a, b)

    def predict_indices(self, x_t, logsnr, a_idx, b_idx) -> np.ndarray:
        return self.forward(EAGER, self.params.data, np.asarray(x_t, dtype=DTYPE), logsnr, a_idx, b_idx)


def predict_noise(model: DenoiserModel, x_t, t, prompt: ConceptPrompt = NULL_PROMPT) -> np.ndarray:
    return model.predict_logsnr(x_t, model.schedule.logsnr_at(t), prompt)


def cfg_prediction(model: DenoiserModel, x_t, t, prompt: ConceptPrompt, gamma: float) -> np.ndarray:
    """``gamma * eps(x_t | c) + (1 - gamma) * eps(x_t)`` from a single batched pass."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    n = x_t.shape[0]
    a, b = model.prompt_indices(prompt, n)
    na, nb = model.prompt_indices(NULL_PROMPT, n)
    lam = np.broadcast_to(np.asarray(model.schedule.logsnr_at(t), dtype=DTYPE), (n,))
    both = model.predict_indices(
        np.concatenate([x_t, x_t]), np.concatenate([lam, lam]), np.concatenate([a, na]), np.concatenate([b, nb])
    )
    return gamma * both[:n] + (1.0 - gamma) * both[n:]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 60
    steps_per_epoch: int = 200
    batch_size: int = 256
    lr: float = 3e-3
    lr_final: float = 2e-5
    # 0.1 leaves only ~1% fully-null rows per batch and a poor unconditional branch
    p_drop_a: float = 0.3
    p_drop_b: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for p in (self.p_drop_a, self.p_drop_b):
            if not 0.0 <= p <= 1.0:
                raise ValueError("condition-dropout probability must lie in [0, 1]")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, steps_per_epoch >= 1 and batch_size >= 1 required")


def denoising_loss(model: DenoiserModel, x, t, eps, a_idx, b_idx):
    """Mean squared noise-prediction error and its parameter gradient."""
    rec = GradientRecorder()
    flat = rec.register("params", model.params.data)
    x_t = forward_noise(x, t, eps, model.schedule)
    pred = model.forward(rec, flat, x_t, model.schedule.logsnr_at(t), a_idx, b_idx)
    loss = rec.mean(rec.sum(rec.square(rec.sub(pred, eps)), axis=1))
    return float(loss.value), grad(rec, loss)["params"]


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    if total <= 1:
        return lr
    frac = step / (total - 1)
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + np.cos(np.pi * frac))


def pretrain(
    model: DenoiserModel,
    world: ConceptWorld,
    schedule: Optional[NoiseSchedule] = None,
    config: Optional[TrainConfig] = None,
    data=None,
) -> Tuple[DenoiserModel, List[float]]:
    """Classifier-free denoising pretraining with independent per-attribute dropout.

    Fresh world samples are drawn every step unless ``data`` (an ``(x, labels)``
    pair) restricts training to a fixed pool. Returns the trained model and the
    per-epoch mean loss.
    """
    config = config or TrainConfig()
    if schedule is not None and schedule != model.schedule:
        model = DenoiserModel(model.arch, model.params, schedule)
    sched = model.schedule
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState("adam", lr=config.lr)
    params = model.params
    total = config.epochs * config.steps_per_epoch
    curve: List[float] = []
    step = 0
    for epoch in range(config.epochs):
        running = 0.0
        for _ in range(config.steps_per_epoch):
            B = config.batch_size
            if data is None:
                x, labels = world.sample_arrays(NULL_PROMPT, B, rng)
            else:
                pick = rng.integers(0, data[0].shape[0], size=B)
                x, labels = data[0][pick], data[1][pick]
            a_idx = np.where(rng.random(B) < config.p_drop_a, model.arch.n_a, labels[:, 0])
            b_idx = np.where(rng.random(B) < config.p_drop_b, model.arch.n_b, labels[:, 1])
            t = rng.integers(1, sched.T + 1, size=B)
            eps = rng.standard_normal(x.shape)
            loss, g = denoising_loss(model.with_params(params), x, t, eps, a_idx, b_idx)
            if not np.isfinite(loss):
                raise NumericalError(f"pretraining loss diverged at epoch {epoch}, step {step}: {loss}")
            params, opt = adam_step(params, g, opt, lr=cosine_lr(step, total, config.lr, config.lr_final))
            running += loss
            step += 1
        curve.append(running / config.steps_per_epoch)
        log.debug("pretrain epoch %d loss %.5f", epoch, curve[-1])
    return model.with_params(_tie_unseen_tokens(params, config)), curve


def _tie_unseen_tokens(params: ParamVector, config: TrainConfig) -> ParamVector:
    # an axis dropped with probability 1 never trains its value embeddings; map them onto the null token
    data = params.data.copy()
    for name, p in (("emb_a", config.p_drop_a), ("emb_b", config.p_drop_b)):
        if p >= 1.0:
            _, start, stop, shape = params.entry(name)
            table = data[start:stop].reshape(shape)
            table[:-1] = table[-1]
    return params.replace(data)


# ---------------------------------------------------------------------------
# sampling


def chain_noise(seed, n: int, steps: int, d: int, offset: int = 0) -> np.ndarray:
    """Per-chain Gaussian draws ``(n, steps, d)``; chain ``i`` is seeded by ``(seed, offset + i)``."""
    out = np.empty((n, steps, d))
    base = _seed_words(seed)
    for i in range(n):
        out[i] = np.random.default_rng(base + [offset + i]).standard_normal((steps, d))
    return out


def _seed_words(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def ancestral_chain(model: DenoiserModel, a_idx, b_idx, gamma: float, noise: np.ndarray,
                    stop_t: int = 1) -> np.ndarray:
    """DDPM ancestral sampling with CFG from ``t = T`` down to ``stop_t``.

    ``noise[:, 0]`` is the initial draw, ``noise[:, k]`` the noise injected on the
    k-th transition. With ``stop_t = 1`` the final clean-step output is returned,
    otherwise the latent at ``stop_t``.
    """
    sched = model.schedule
    T = sched.T
    stop_t = int(sched.check_t(stop_t))
    n = noise.shape[0]
    a_idx = np.asarray(a_idx)
    b_idx = np.asarray(b_idx)
    null_a = np.full(n, model.arch.n_a)
    null_b = np.full(n, model.arch.n_b)
    aa = np.concatenate([a_idx, null_a])
    bb = np.concatenate([b_idx, null_b])
    abar = sched.abar
    omab = sched.one_minus_abar
    x = noise[:, 0].copy()
    k = 1
    last = 0 if stop_t == 1 else stop_t
    for t in range(T, last, -1):
        lam = np.full(2 * n, sched.logsnr[t - 1])
        both = model.predict_indices(np.concatenate([x, x]), lam, aa, bb)
        eps_hat = gamma * both[:n] + (1.0 - gamma) * both[n:]
        abar_prev = abar[t - 2] if t > 1 else 1.0
        alpha_t = abar[t - 1] / abar_prev
        beta_t = 1.0 - alpha_t
        mean = (x - beta_t / np.sqrt(omab[t - 1]) * eps_hat) / np.sqrt(alpha_t)
        if t > 1:
            var = beta_t * (1.0 - abar_prev) / omab[t - 1]
            x = mean + np.sqrt(var) * noise[:, k]
            k += 1
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"sampling chain produced non-finite values at step t={t}")
    return x


def sample(model: DenoiserModel, schedule: Optional[NoiseSchedule], prompt: ConceptPrompt,
           gamma: float, n: int, seed) -> np.ndarray:
    """``n`` points from the full T-step chain; chains are seeded by ``(seed, chain index)``."""
    return partial_sample(model, schedule, prompt, gamma, 1, seed, n=n)


def partial_sample(model: DenoiserModel, schedule: Optional[NoiseSchedule], prompt: ConceptPrompt,
                   gamma: float, stop_t: int, seed, n: int = 1) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    if schedule is not None and schedule != model.schedule:
        model = DenoiserModel(model.arch, model.params, schedule)
    T = model.schedule.T
    noise = chain_noise(seed, n, T, model.arch.d)
    a, b = model.prompt_indices(prompt, n)
    return ancestral_chain(model, a, b, gamma, noise, stop_t)


def sample_cells(model: DenoiserModel, prompts: Sequence[ConceptPrompt], gamma: float, n: int,
                 seeds: Sequence) -> List[np.ndarray]:
    """Samples for several prompts in one batched chain; cell ``i`` uses ``seeds[i]``."""
    T, d = model.schedule.T, model.arch.d
    noise = np.concatenate([chain_noise(s, n, T, d) for s in seeds])
    a = np.concatenate([model.prompt_indices(p, n)[0] for p in prompts])
    b = np.concatenate([model.prompt_indices(p, n)[1] for p in prompts])
    x = ancestral_chain(model, a, b, gamma, noise)
    return [x[i * n:(i + 1) * n] for i in range(len(prompts))]


# ---------------------------------------------------------------------------
# quality gate


def oracle_gap(model: DenoiserModel, world: ConceptWorld, prompt: ConceptPrompt = NULL_PROMPT,
               t_grid: Optional[Sequence[int]] = None, n: int = 512, seed=0) -> Tuple[float, float]:
    """Mean squared deviation from the analytic denoiser and the oracle's own MSE.

    Returns ``(gap, oracle_mse)`` averaged over ``t_grid`` and ``n`` world samples
    drawn from the prompt's conditional.
    """
    sched = model.schedule
    if t_grid is None:
        t_grid = np.unique(np.linspace(1, sched.T, 12).round().astype(int))
    rng = np.random.default_rng(seed)
    gaps, mses = [], []
    for t in t_grid:
        x, _ = world.sample_arrays(prompt, n, rng)
        eps = rng.standard_normal(x.shape)
        x_t = forward_noise(x, t, eps, sched)
        lam = sched.logsnr_at(t)
        star = world.analytic_denoiser_logsnr(x_t, lam, prompt)
        pred = model.predict_logsnr(x_t, lam, prompt)
        gaps.append(np.mean(np.sum((pred - star) ** 2, axis=1)))
        mses.append(np.mean(np.sum((star - eps) ** 2, axis=1)))
    return float(np.mean(gaps)), float(np.mean(mses))


def quality_gate(model: DenoiserModel, world: ConceptWorld, threshold: float = 0.1, seed=0) -> Tuple[bool, float]:
    """Unconditional oracle gap against ``threshold``; unlearning runs assume a teacher that passes."""
    gap, _ = oracle_gap(model, world, NULL_PROMPT, seed=seed)
    return gap < threshold, gap


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: DenoiserModel, seed_lineage: Optional[dict] = None) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.arch.descriptor(),
        "schedule": model.schedule.descriptor(),
        "param_count": model.params.size,
        "seed_lineage": seed_lineage or {},
    }
    head = json.dumps(header, separators=(",", ":"), sort_keys=False).encode()
    return head + b"\n" + model.params.to_bytes()


def model_from_bytes(blob: bytes) -> Tuple[DenoiserModel, dict]:
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise ValueError("checkpoint header terminator missing")
    header = json.loads(head)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    desc = dict(header["architecture"])
    desc["hidden"] = tuple(desc["hidden"])
    desc["data_shift"] = tuple(desc["data_shift"])
    desc["data_scale"] = tuple(desc["data_scale"])
    arch = Architecture(**desc)
    count = int(header["param_count"])
    if len(body) != 8 * count or count != arch.param_count():
        raise ValueError(f"parameter block holds {len(body)} bytes, expected {8 * count}")
    data = np.frombuffer(body, dtype="<f8").astype(DTYPE)
    params = ParamVector.from_shapes(arch.shapes(), data)
    return DenoiserModel(arch, params, NoiseSchedule.from_descriptor(header["schedule"])), header


def save_checkpoint(model: DenoiserModel, path, seed_lineage: Optional[dict] = None) -> bytes:
    blob = checkpoint_bytes(model, seed_lineage)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path) -> Tuple[DenoiserModel, dict]:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())

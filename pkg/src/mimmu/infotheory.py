"""Noise-level integrals of denoising error: densities and mutual information.

All estimators integrate over the log-SNR ``alpha`` of the channel
``x_alpha = sqrt(sigmoid(alpha)) x + sqrt(sigmoid(-alpha)) eps`` and work in
noise-prediction space. A denoiser is anything accepted by :func:`as_denoiser`:
a :class:`~mimmu.world.ConceptWorld` (its exact MMSE predictor), an object with
``predict_logsnr(x, logsnr, prompt)`` such as a trained model, or a plain
callable with that signature.

Noise draws for item ``i`` come from the stream seeded by ``(seed, i)`` and are
laid out ``(node, draw, d)``, so paired estimators evaluated with the same seed
see identical noise and results do not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import expit, log1p

from .world import LOG_2PI, NULL_PROMPT, ConceptPrompt, ConceptWorld

MIN_NODES = 16

Denoiser = Callable[[np.ndarray, np.ndarray, ConceptPrompt], np.ndarray]


def as_denoiser(model) -> Denoiser:
    if isinstance(model, ConceptWorld):
        return model.analytic_denoiser_logsnr
    if hasattr(model, "predict_logsnr"):
        return model.predict_logsnr
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a denoiser")


@dataclass(frozen=True)
class LogSnrGrid:
    """Trapezoidal quadrature over log-SNR, nodes in decreasing order.

    With ``tails`` the end weights are extended by the integral of an exponential
    tail matched at the end node: the gap integrands decay like ``exp(-alpha)``
    at high SNR and like ``sigmoid(alpha)`` at low SNR.
    """

    nodes: np.ndarray
    weights: np.ndarray
    alpha_min: float
    alpha_max: float
    tails: bool = False

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if nodes.size < MIN_NODES:
            raise ValueError(f"grid needs at least {MIN_NODES} nodes, got {nodes.size}")
        if nodes.shape != weights.shape:
            raise ValueError("nodes and weights differ in length")
        if not np.all(np.diff(nodes) < 0):
            raise ValueError("nodes must be strictly decreasing")
        if not np.all(weights > 0):
            raise ValueError("quadrature weights must be positive")
        if nodes[0] > self.alpha_max or nodes[-1] < self.alpha_min:
            raise ValueError("nodes fall outside the truncation bounds")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, n: int = 64, alpha_min: float = -10.0, alpha_max: float = 10.0,
                tails: bool = True) -> "LogSnrGrid":
        if n < MIN_NODES:
            raise ValueError(f"grid needs at least {MIN_NODES} nodes, got {n}")
        nodes = np.linspace(alpha_max, alpha_min, n)
        h = (alpha_max - alpha_min) / (n - 1)
        weights = np.full(n, h)
        weights[[0, -1]] = 0.5 * h
        if tails:
            weights[0] += 1.0
            weights[-1] += log1p(np.exp(alpha_min)) / expit(alpha_min)
        return cls(nodes, weights, float(alpha_min), float(alpha_max), tails)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def grid_id(self) -> str:
        tail = "+tails" if self.tails else ""
        return f"trap{self.size}[{self.alpha_min:g},{self.alpha_max:g}]{tail}"


@dataclass(frozen=True)
class DensityEstimate:
    """``value = gaussian_reference_term + correction_integral``.

    Fields carry a leading item axis when the estimate was computed on a batch.
    ``mmse_table`` is ``(items, nodes)``.
    """

    value: np.ndarray
    gaussian_reference_term: np.ndarray
    correction_integral: np.ndarray
    mmse_table: np.ndarray
    se: np.ndarray
    n_eps: int
    seed: int
    grid_id: str


@dataclass(frozen=True)
class MIEstimate:
    """Batch-mean MI with pointwise values and the per-node contribution table.

    ``node_contrib[k]`` is the batch mean of the quadrature-weighted integrand at
    node ``k``, so ``node_contrib.sum() == value``.
    """

    kind: str
    value: float
    pointwise: np.ndarray
    pointwise_se: np.ndarray
    node_contrib: np.ndarray
    se: float
    n_eps: int
    seed: int
    grid_id: str


def _check_x(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a point or a batch of points, got shape {x.shape}")
    return x, False


def _noise(seed, n_items: int, n_nodes: int, n_eps: int, d: int) -> np.ndarray:
    """Draws ``(items, nodes, n_eps, d)``; item ``i`` uses the stream ``(seed, i)``."""
    if n_eps < 1:
        raise ValueError("n_eps must be at least 1")
    base = [int(s) for s in np.atleast_1d(seed)]
    out = np.empty((n_items, n_nodes, n_eps, d))
    for i in range(n_items):
        out[i] = np.random.default_rng(base + [i]).standard_normal((n_nodes, n_eps, d))
    return out


def _noised(x, alpha, eps):
    # x: (n, d), eps: (n, m, d) -> flat rows (n*m, d)
    z = np.sqrt(expit(alpha)) * x[:, None, :] + np.sqrt(expit(-alpha)) * eps
    return z.reshape(-1, x.shape[1])


# ---------------------------------------------------------------------------
# pointwise MMSE and densities


def gaussian_reference_mmse(x, alpha) -> np.ndarray:
    """Pointwise noise-prediction MMSE when the source is a standard normal."""
    x = np.asarray(x, dtype=np.float64)
    abar = expit(np.asarray(alpha, dtype=np.float64))
    d = x.shape[-1]
    sq = np.sum(x * x, axis=-1)
    return abar * (abar * d + expit(-np.asarray(alpha, dtype=np.float64)) * sq)


def _mmse_draws(predict, x, alpha, prompt, eps):
    n, m, d = eps.shape
    z = _noised(x, alpha, eps)
    pred = predict(z, np.full(n * m, alpha), prompt).reshape(n, m, d)
    return np.sum((eps - pred) ** 2, axis=2)


def mmse_point(model, x, alpha: float, prompt: ConceptPrompt = NULL_PROMPT, n_eps: int = 32,
               seed=0):
    """Monte Carlo ``E_eps ||eps - eps_hat(x_alpha)||^2``; per row for a batch."""
    xb, single = _check_x(x)
    eps = _noise(seed, xb.shape[0], 1, n_eps, xb.shape[1])[:, 0]
    out = _mmse_draws(as_denoiser(model), xb, float(alpha), prompt, eps).mean(axis=1)
    return float(out[0]) if single else out


def neg_log_density(model, x, prompt: ConceptPrompt = NULL_PROMPT, grid: Optional[LogSnrGrid] = None,
                    n_eps: int = 32, seed=0) -> DensityEstimate:
    """``-log p(x) = -log N(x; 0, I) - 1/2 int (mmse_G - mmse) dalpha``.

    Per-draw errors are paired with the control ``abar (||eps||^2 - d)``, which
    has mean zero and removes most of the chi-square spread at high SNR where
    every denoiser error is close to ``eps`` itself.
    """
    grid = grid or LogSnrGrid.uniform()
    predict = as_denoiser(model)
    xb, single = _check_x(x)
    n, d = xb.shape
    eps = _noise(seed, n, grid.size, n_eps, d)
    table = np.empty((n, grid.size))
    reduced = np.empty((n, grid.size))
    var = np.empty((n, grid.size))
    for k, alpha in enumerate(grid.nodes):
        e = eps[:, k]
        err = _mmse_draws(predict, xb, alpha, prompt, e)
        adj = err - expit(alpha) * (np.sum(e * e, axis=2) - d)
        table[:, k] = err.mean(axis=1)
        reduced[:, k] = adj.mean(axis=1)
        var[:, k] = adj.var(axis=1, ddof=1) / n_eps if n_eps > 1 else 0.0
    ref = gaussian_reference_mmse(xb[:, None, :], grid.nodes[None, :])
    gauss = 0.5 * (d * LOG_2PI + np.sum(xb * xb, axis=1))
    corr = -0.5 * ((ref - reduced) @ grid.weights)
    se = 0.5 * np.sqrt(var @ grid.weights**2)

    def pick(v):
        return v[0] if single else v

    return DensityEstimate(
        value=pick(gauss + corr),
        gaussian_reference_term=pick(gauss),
        correction_integral=pick(corr),
        mmse_table=pick(table),
        se=pick(se),
        n_eps=n_eps,
        seed=seed,
        grid_id=grid.grid_id,
    )


# ---------------------------------------------------------------------------
# mutual information


@dataclass(frozen=True)
class PairedTerms:
    """Per-draw quantities shared by the MI estimators, each ``(items, nodes, n_eps)``.

    ``err_u`` / ``err_c`` are squared errors of the unconditional / conditional
    predictions, ``gap`` is their squared difference and ``orth`` the cross term
    ``(u - c) . (c - eps)``.
    """

    err_u: np.ndarray
    err_c: np.ndarray
    gap: np.ndarray
    orth: np.ndarray


def paired_terms(model, x, prompt: ConceptPrompt, grid: LogSnrGrid, n_eps: int = 32, seed=0) -> PairedTerms:
    if prompt.is_null:
        raise ValueError("mutual information needs a non-null prompt")
    predict = as_denoiser(model)
    xb, _ = _check_x(x)
    n, d = xb.shape
    eps = _noise(seed, n, grid.size, n_eps, d)
    shape = (n, grid.size, n_eps)
    err_u, err_c, gap, orth = (np.empty(shape) for _ in range(4))
    for k, alpha in enumerate(grid.nodes):
        z = _noised(xb, alpha, eps[:, k])
        lam = np.full(z.shape[0], alpha)
        u = predict(z, lam, NULL_PROMPT).reshape(n, n_eps, d)
        c = predict(z, lam, prompt).reshape(n, n_eps, d)
        e = eps[:, k]
        err_u[:, k] = np.sum((e - u) ** 2, axis=2)
        err_c[:, k] = np.sum((e - c) ** 2, axis=2)
        gap[:, k] = np.sum((u - c) ** 2, axis=2)
        orth[:, k] = np.sum((u - c) * (c - e), axis=2)
    return PairedTerms(err_u, err_c, gap, orth)


def _integrate(kind, integrand, grid, n_eps, seed) -> MIEstimate:
    # integrand: (items, nodes, n_eps), already including the 1/2 where it applies
    per_draw = np.einsum("inm,n->im", integrand, grid.weights)
    pointwise = per_draw.mean(axis=1)
    if n_eps > 1:
        pointwise_se = per_draw.std(axis=1, ddof=1) / np.sqrt(n_eps)
    else:
        pointwise_se = np.zeros_like(pointwise)
    n = pointwise.size
    if n > 1:
        se = float(pointwise.std(ddof=1) / np.sqrt(n))
    else:
        se = float(pointwise_se[0])
    node_contrib = integrand.mean(axis=(0, 2)) * grid.weights
    return MIEstimate(kind, float(pointwise.mean()), pointwise, pointwise_se, node_contrib, se,
                      n_eps, seed, grid.grid_id)


def mi_naive(model, x, prompt: ConceptPrompt, grid: Optional[LogSnrGrid] = None, n_eps: int = 32,
             seed=0) -> MIEstimate:
    """``1/2 int E[||eps - u||^2 - ||eps - c||^2] dalpha``; unbounded below pointwise."""
    grid = grid or LogSnrGrid.uniform()
    terms = paired_terms(model, x, prompt, grid, n_eps, seed)
    return _integrate("naive", 0.5 * (terms.err_u - terms.err_c), grid, n_eps, seed)


def mi_nonneg(model, x, prompt: ConceptPrompt, grid: Optional[LogSnrGrid] = None, n_eps: int = 32,
              seed=0) -> MIEstimate:
    """``1/2 int E||u - c||^2 dalpha``; a positively weighted sum of squares."""
    grid = grid or LogSnrGrid.uniform()
    terms = paired_terms(model, x, prompt, grid, n_eps, seed)
    return _integrate("nonneg", 0.5 * terms.gap, grid, n_eps, seed)


def orthogonality_integral(model, x, prompt: ConceptPrompt, grid: Optional[LogSnrGrid] = None,
                           n_eps: int = 32, seed=0) -> MIEstimate:
    """``int E[(u - c).(c - eps)] dalpha``, the exact difference naive minus nonneg."""
    grid = grid or LogSnrGrid.uniform()
    terms = paired_terms(model, x, prompt, grid, n_eps, seed)
    return _integrate("orthogonality", terms.orth, grid, n_eps, seed)


@dataclass(frozen=True)
class NodeResidual:
    nodes: np.ndarray
    values: np.ndarray
    se: np.ndarray


def orthogonality_residual(model, prompt: ConceptPrompt, grid: Optional[LogSnrGrid] = None,
                           n_x: int = 256, n_eps: int = 8, seed=0, *,
                           world: ConceptWorld) -> NodeResidual:
    """Per-node mean of ``(u - c).(c - eps)`` with ``x`` drawn from ``world`` given ``prompt``.

    Vanishes for the exact MMSE predictors because their error is orthogonal to
    every function of the noised input.
    """
    grid = grid or LogSnrGrid.uniform()
    x, _ = world.sample_arrays(prompt, n_x, [int(s) for s in np.atleast_1d(seed)] + [1 << 20])
    terms = paired_terms(model, x, prompt, grid, n_eps, seed)
    # draws sharing an x are correlated, so the error bar is taken across points
    per_x = terms.orth.mean(axis=2)
    return NodeResidual(grid.nodes.copy(), per_x.mean(axis=0), per_x.std(axis=0, ddof=1) / np.sqrt(per_x.shape[0]))


def joint_mi(model, world: ConceptWorld, axis: str = "a", n_x: int = 200,
             grid: Optional[LogSnrGrid] = None, n_eps: int = 32, seed=0, kind: str = "nonneg"):
    """Estimate of ``I(x; attribute)`` averaged over ``p(x, attribute)``.

    Each attribute value contributes ``n_x`` draws from its conditional; values
    are combined with the world's attribute prior. Returns ``(value, se)``.
    """
    estimator = {"nonneg": mi_nonneg, "naive": mi_naive}[kind]
    prior = world.attribute_prior(axis)
    base = [int(s) for s in np.atleast_1d(seed)]
    total, var = 0.0, 0.0
    for v, w in enumerate(prior):
        prompt = ConceptPrompt(a=v) if axis in ("a", "A") else ConceptPrompt(b=v)
        x, _ = world.sample_arrays(prompt, n_x, base + [v, 0])
        est = estimator(model, x, prompt, grid, n_eps, base + [v, 1])
        total += w * est.value
        var += (w * est.se) ** 2
    return total, float(np.sqrt(var))


# ---------------------------------------------------------------------------
# per-timestep information


def _schedule_of(model, schedule):
    if schedule is not None:
        return schedule
    if hasattr(model, "schedule"):
        return model.schedule
    raise ValueError("a schedule is required for this denoiser")


def mi_at_timestep(teacher, x, t: int, prompt: ConceptPrompt, n_eps: int = 32, seed=0,
                   schedule=None):
    """``E_eps 1/2 ||eps_hat(x_t | y) - eps_hat(x_t)||^2`` at discrete step ``t``; per row for a batch."""
    sched = _schedule_of(teacher, schedule)
    alpha = float(sched.logsnr_at(t))
    xb, single = _check_x(x)
    if prompt.is_null:
        out = np.zeros(xb.shape[0])
        return float(out[0]) if single else out
    predict = as_denoiser(teacher)
    n, d = xb.shape
    eps = _noise(seed, n, 1, n_eps, d)[:, 0]
    z = _noised(xb, alpha, eps)
    lam = np.full(z.shape[0], alpha)
    diff = predict(z, lam, prompt) - predict(z, lam, NULL_PROMPT)
    out = 0.5 * np.sum(diff**2, axis=1).reshape(n, n_eps).mean(axis=1)
    return float(out[0]) if single else out


def mi_over_timesteps(teacher, x, prompt: ConceptPrompt, n_eps: int = 32, seed=0, schedule=None) -> float:
    """Trapezoid sum of :func:`mi_at_timestep` against the log-SNR spacing of the schedule."""
    sched = _schedule_of(teacher, schedule)
    lam = np.asarray(sched.logsnr)
    vals = np.array([np.mean(mi_at_timestep(teacher, x, t, prompt, n_eps, [*np.atleast_1d(seed), t], sched))
                     for t in range(1, sched.T + 1)])
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * -np.diff(lam)))


# ---------------------------------------------------------------------------
# reports


def estimate_records(estimate) -> List[dict]:
    """One JSON-ready record per item of a density or MI estimate."""
    if isinstance(estimate, DensityEstimate):
        kind = "neg_log_density"
        values, ses = np.atleast_1d(estimate.value), np.atleast_1d(estimate.se)
    else:
        kind = estimate.kind
        values, ses = estimate.pointwise, estimate.pointwise_se
    seed = estimate.seed if np.ndim(estimate.seed) == 0 else list(np.atleast_1d(estimate.seed))
    return [
        {"kind": kind, "value": float(v), "se": float(s), "grid_id": estimate.grid_id,
         "n_eps": estimate.n_eps, "seed": seed}
        for v, s in zip(values, ses)
    ]


def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")

"""Synthetic two-attribute concept worlds with closed-form everything.

A world is a Gaussian mixture with one component per ``(a, b)`` label pair.
Attribute A plays the role of a style and B of an object. Densities, the Bayes
posterior over labels, the MMSE noise predictor of the variance-preserving
channel and the label/data mutual information are all exact, which makes the
world the oracle every learned quantity is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

WORLD_FORMAT_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ConceptPrompt:
    """Conditioning prompt; ``None`` on an axis is the null token."""

    a: Optional[int] = None
    b: Optional[int] = None

    @property
    def is_null(self) -> bool:
        return self.a is None and self.b is None

    def __str__(self):
        fa = "-" if self.a is None else str(self.a)
        fb = "-" if self.b is None else str(self.b)
        return f"({fa},{fb})"


NULL_PROMPT = ConceptPrompt()


@dataclass(frozen=True)
class MixtureComponent:
    mean: np.ndarray
    cov: np.ndarray
    weight: float
    label: Tuple[int, int]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not np.allclose(cov, cov.T, atol=0.0, rtol=0.0):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("covariance must be positive definite")
        if not self.weight > 0.0:
            raise ValueError("component weight must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "label", (int(self.label[0]), int(self.label[1])))


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    label: Tuple[int, int]


class ConceptWorld:
    """Immutable mixture over an ``n_a x n_b`` label grid."""

    def __init__(self, components: Sequence[MixtureComponent], n_a: int, n_b: int):
        comps = sorted(components, key=lambda c: c.label)
        labels = [c.label for c in comps]
        expected = [(a, b) for a in range(n_a) for b in range(n_b)]
        if labels != expected:
            raise ValueError("components must cover every (a, b) label exactly once")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"component weights sum to {total}, expected 1")
        self.components: Tuple[MixtureComponent, ...] = tuple(comps)
        self.n_a, self.n_b = int(n_a), int(n_b)
        self.d = int(comps[0].mean.shape[0])
        self.means = np.stack([c.mean for c in comps])
        self.covs = np.stack([c.cov for c in comps])
        self.weights = np.array([c.weight for c in comps])
        self.labels = np.array(labels, dtype=np.int64)
        self.log_weights = np.log(self.weights)
        self._chol = np.linalg.cholesky(self.covs)
        self._logdet = 2.0 * np.log(np.diagonal(self._chol, axis1=1, axis2=2)).sum(axis=1)
        diag = np.diagonal(self.covs, axis1=1, axis2=2)
        iso = np.all(self.covs == diag[:, :, None] * np.eye(self.d), axis=(1, 2)) & np.all(diag == diag[:, :1], axis=1)
        self._iso_var = diag[:, 0].copy() if iso.all() else None

    # -- selection -------------------------------------------------------

    def component_mask(self, prompt: ConceptPrompt) -> np.ndarray:
        mask = np.ones(len(self.components), dtype=bool)
        if prompt.a is not None:
            if not 0 <= prompt.a < self.n_a:
                raise ValueError(f"attribute-A index {prompt.a} out of range")
            mask &= self.labels[:, 0] == prompt.a
        if prompt.b is not None:
            if not 0 <= prompt.b < self.n_b:
                raise ValueError(f"attribute-B index {prompt.b} out of range")
            mask &= self.labels[:, 1] == prompt.b
        if not mask.any():
            raise ValueError(f"prompt {prompt} matches no component")
        return mask

    def _restricted_log_weights(self, prompt: ConceptPrompt):
        mask = self.component_mask(prompt)
        lw = self.log_weights[mask]
        return mask, lw - logsumexp(lw)

    # -- densities -------------------------------------------------------

    def _component_logpdf(self, x: np.ndarray, means, chol, logdet) -> np.ndarray:
        """log N(x; mean_k, cov_k) for every row of x and component k -> (n, K)."""
        diff = x[:, None, :] - means[None, :, :]
        out = np.empty(diff.shape[:2])
        for k in range(means.shape[0]):
            z = np.linalg.solve(chol[k], diff[:, k, :].T)
            out[:, k] = -0.5 * (np.sum(z * z, axis=0) + logdet[k] + self.d * LOG_2PI)
        return out

    def log_density(self, x, prompt: ConceptPrompt = NULL_PROMPT) -> np.ndarray:
        x, single = _as_batch(x, self.d)
        mask, lw = self._restricted_log_weights(prompt)
        lp = self._component_logpdf(x, self.means[mask], self._chol[mask], self._logdet[mask])
        out = logsumexp(lp + lw, axis=1)
        return out[0] if single else out

    def bayes_posterior(self, x) -> np.ndarray:
        """p(label | x) as an array of shape (n, n_a, n_b); rows sum to one."""
        x, single = _as_batch(x, self.d)
        lp = self._component_logpdf(x, self.means, self._chol, self._logdet) + self.log_weights
        post = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        # far from every mean the log-normaliser carries ~1e-12 rounding; renormalise
        post /= post.sum(axis=1, keepdims=True)
        post = post.reshape(-1, self.n_a, self.n_b)
        return post[0] if single else post

    def classify(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Marginal argmax labels along each attribute axis."""
        post = self.bayes_posterior(np.atleast_2d(x))
        return post.sum(axis=2).argmax(axis=1), post.sum(axis=1).argmax(axis=1)

    # -- sampling --------------------------------------------------------

    def sample_arrays(self, prompt: ConceptPrompt, n: int, seed) -> Tuple[np.ndarray, np.ndarray]:
        if n < 1:
            raise ValueError("n must be at least 1")
        mask, lw = self._restricted_log_weights(prompt)
        idx = np.flatnonzero(mask)
        rng = np.random.default_rng(seed)
        pick = idx[rng.choice(idx.size, size=n, p=np.exp(lw))]
        z = rng.standard_normal((n, self.d))
        x = self.means[pick] + np.einsum("nij,nj->ni", self._chol[pick], z)
        return x, self.labels[pick]

    def sample(self, prompt: ConceptPrompt, n: int, seed) -> List[LabeledSample]:
        x, labels = self.sample_arrays(prompt, n, seed)
        return [LabeledSample(xi, (int(l[0]), int(l[1]))) for xi, l in zip(x, labels)]

    # -- optimal denoiser ------------------------------------------------

    def analytic_denoiser(self, x_noisy, abar, prompt: ConceptPrompt = NULL_PROMPT) -> np.ndarray:
        """Posterior-mean noise E[eps | x_noisy] for x_noisy = sqrt(abar) x + sqrt(1-abar) eps.

        ``abar`` may be a scalar or one value per row.
        """
        x, single = _as_batch(x_noisy, self.d)
        abar = np.broadcast_to(np.asarray(abar, dtype=np.float64), (x.shape[0],))
        if np.any(abar <= 0.0) or np.any(abar >= 1.0):
            raise ValueError("abar must lie strictly inside (0, 1)")
        out = self._posterior_noise(x, abar, 1.0 - abar, prompt)
        return out[0] if single else out

    def analytic_denoiser_logsnr(self, x_noisy, logsnr, prompt: ConceptPrompt = NULL_PROMPT) -> np.ndarray:
        """Same as :meth:`analytic_denoiser` but parametrized by log-SNR, exact in both tails."""
        x, single = _as_batch(x_noisy, self.d)
        logsnr = np.broadcast_to(np.asarray(logsnr, dtype=np.float64), (x.shape[0],))
        out = self._posterior_noise(x, expit(logsnr), expit(-logsnr), prompt)
        return out[0] if single else out

    def _posterior_noise(self, x, abar, omab, prompt):
        mask, lw = self._restricted_log_weights(prompt)
        means, covs = self.means[mask], self.covs[mask]
        eye = np.eye(self.d)
        sa = np.sqrt(abar)
        sn = np.sqrt(omab)
        n, K = x.shape[0], means.shape[0]
        if self._iso_var is not None:
            # Isotropic components: the noised marginal covariance is a scalar multiple of I.
            var = abar[:, None] * self._iso_var[mask][None, :] + omab[:, None]
            diff = x[:, None, :] - sa[:, None, None] * means[None, :, :]
            sq = np.sum(diff * diff, axis=2)
            logr = lw[None, :] - 0.5 * (sq / var + self.d * np.log(var) + self.d * LOG_2PI)
            r = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))
            return sn[:, None] * np.einsum("nk,nkd->nd", r / var, diff)
        logr = np.empty((n, K))
        eps_k = np.empty((n, K, self.d))
        # Marginal of x_noisy under component k: N(sa m_k, abar C_k + (1-abar) I).
        for k in range(K):
            S = abar[:, None, None] * covs[k] + omab[:, None, None] * eye
            L = np.linalg.cholesky(S)
            diff = x - sa[:, None] * means[k]
            sol = np.linalg.solve(S, diff[..., None])[..., 0]
            z = np.linalg.solve(L, diff[..., None])[..., 0]
            logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
            logr[:, k] = lw[k] - 0.5 * (np.sum(z * z, axis=1) + logdet + self.d * LOG_2PI)
            eps_k[:, k, :] = sn[:, None] * sol
        r = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))
        return np.einsum("nk,nkd->nd", r, eps_k)

    def noisy_log_density(self, x_noisy, abar: float, prompt: ConceptPrompt = NULL_PROMPT):
        """log density of the noised mixture at noise level ``abar``."""
        x, single = _as_batch(x_noisy, self.d)
        mask, lw = self._restricted_log_weights(prompt)
        means = np.sqrt(abar) * self.means[mask]
        covs = abar * self.covs[mask] + (1.0 - abar) * np.eye(self.d)
        chol = np.linalg.cholesky(covs)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        out = logsumexp(self._component_logpdf(x, means, chol, logdet) + lw, axis=1)
        return out[0] if single else out

    # -- information -----------------------------------------------------

    def analytic_mi(self, attribute_axis: str, n_mc: int, seed) -> Tuple[float, float]:
        """Monte Carlo I(x; attribute) in nats with its standard error."""
        if n_mc < 1000:
            raise ValueError("n_mc must be at least 1000")
        x, labels = self.sample_arrays(NULL_PROMPT, n_mc, seed)
        col = _axis_column(attribute_axis)
        n_vals = self.n_a if col == 0 else self.n_b
        log_cond = np.empty(n_mc)
        for v in range(n_vals):
            sel = labels[:, col] == v
            if sel.any():
                prompt = ConceptPrompt(a=v) if col == 0 else ConceptPrompt(b=v)
                log_cond[sel] = self.log_density(x[sel], prompt)
        terms = log_cond - self.log_density(x)
        return float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(n_mc))

    def attribute_prior(self, attribute_axis: str) -> np.ndarray:
        w = self.weights.reshape(self.n_a, self.n_b)
        return w.sum(axis=1) if _axis_column(attribute_axis) == 0 else w.sum(axis=0)

    # -- serialization ---------------------------------------------------

    def to_json(self) -> str:
        comps = []
        for c in self.components:
            comps.append(
                "{"
                f'"mean": {_floats(c.mean)}, '
                f'"cov": [{", ".join(_floats(row) for row in c.cov)}], '
                f'"weight": {_float(c.weight)}, '
                f'"label": [{c.label[0]}, {c.label[1]}]'
                "}"
            )
        return (
            "{"
            f'"version": {WORLD_FORMAT_VERSION}, "d": {self.d}, "n_a": {self.n_a}, "n_b": {self.n_b}, '
            f'"components": [{", ".join(comps)}]'
            "}\n"
        )

    @classmethod
    def from_json(cls, text: str) -> "ConceptWorld":
        doc = json.loads(text)
        if doc.get("version") != WORLD_FORMAT_VERSION:
            raise ValueError(f"unsupported world format version {doc.get('version')!r}")
        comps = [
            MixtureComponent(np.array(c["mean"]), np.array(c["cov"]), float(c["weight"]), tuple(c["label"]))
            for c in doc["components"]
        ]
        world = cls(comps, doc["n_a"], doc["n_b"])
        if world.d != doc["d"]:
            raise ValueError("declared dimension does not match component means")
        return world

    def __eq__(self, other):
        if not isinstance(other, ConceptWorld):
            return NotImplemented
        return (
            self.n_a == other.n_a
            and self.n_b == other.n_b
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash(self.to_json())


def build_grid_world(n_a: int = 4, n_b: int = 5, d: int = 2, spacing: float = 6.0,
                     sigma: float = 0.5, seed: int = 0) -> ConceptWorld:
    """Means on a grid: coordinate 0 indexed by a, coordinate 1 by b.

    ``seed`` is accepted for interface symmetry; the grid is fully determined by
    the other arguments.
    """
    if n_a < 2 or n_b < 2:
        raise ValueError("need at least two values per attribute")
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if not (spacing > 0 and sigma > 0):
        raise ValueError("spacing and sigma must be positive")
    comps = []
    w = 1.0 / (n_a * n_b)
    for a in range(n_a):
        for b in range(n_b):
            mean = np.zeros(d)
            mean[0], mean[1] = a * spacing, b * spacing
            comps.append(MixtureComponent(mean, sigma**2 * np.eye(d), w, (a, b)))
    return ConceptWorld(comps, n_a, n_b)


def build_fine_grained_world(n_b: int = 5, d: int = 2, spacing: float = 6.0, sigma: float = 0.5,
                             near_spacing: float = 0.75) -> ConceptWorld:
    """Two A-values ``near_spacing`` apart (1.5 sigma by default); B laid out as usual."""
    comps = []
    w = 1.0 / (2 * n_b)
    for a in range(2):
        for b in range(n_b):
            mean = np.zeros(d)
            mean[0], mean[1] = a * near_spacing, b * spacing
            comps.append(MixtureComponent(mean, sigma**2 * np.eye(d), w, (a, b)))
    return ConceptWorld(comps, 2, n_b)


def standard_normal_world(d: int = 2) -> ConceptWorld:
    """Degenerate 1x1 world holding a single standard normal; handy for closed forms."""
    return ConceptWorld([MixtureComponent(np.zeros(d), np.eye(d), 1.0, (0, 0))], 1, 1)


def _axis_column(axis: str) -> int:
    if axis in ("a", "A", 0):
        return 0
    if axis in ("b", "B", 1):
        return 1
    raise ValueError(f"unknown attribute axis {axis!r}")


def _as_batch(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != d:
            raise ValueError(f"expected a point in R^{d}, got shape {x.shape}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected shape (n, {d}), got {x.shape}")
    return x, False


def _float(v: float) -> str:
    return format(float(v), ".17g")


def _floats(vs) -> str:
    return "[" + ", ".join(_float(v) for v in vs) + "]"

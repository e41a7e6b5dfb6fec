"""Metrics and protocols for judging an erased model against the world oracle.

Generated samples are labelled by the world's Bayes classifier. UA counts the
fraction of generations under ``(target, b)`` prompts that are *not* classified
as the target; IRA and CRA count correct A- and B-labels under retained
prompts.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .diffusion import DenoiserModel, denoising_loss, sample_cells
from .infotheory import LogSnrGrid, mi_nonneg
from .numerics import OptimizerState, adam_step
from .unlearn import ForgetSet, UnlearnConfig, build_forget_set, run_unlearn
from .world import NULL_PROMPT, ConceptPrompt, ConceptWorld

REBOUND_THRESHOLD = 0.05
MI_FLOOR = 1e-3


@dataclass(frozen=True)
class EvalConfig:
    n: int = 200
    n_seeds: int = 5
    gamma: float = 2.0
    seed: int = 0
    sw_projections: int = 128
    sw_n: int = 2000
    mi_n: int = 100
    mi_n_eps: int = 8
    mi_nodes: int = 64


def _words(seed) -> list:
    return [int(s) for s in np.atleast_1d(seed)]


def generate(model: DenoiserModel, prompts: Sequence[ConceptPrompt], n: int, gamma: float, seed):
    """Generations per prompt; prompt cell ``i`` draws its chains from ``(seed, i)``."""
    base = _words(seed)
    return sample_cells(model, list(prompts), gamma, n, [base + [i] for i in range(len(prompts))])


def _ua_prompts(world, targets):
    return [ConceptPrompt(a, b) for a in targets for b in range(world.n_b)]


def _retain_prompts(world, targets):
    return [ConceptPrompt(a, b) for a in range(world.n_a) if a not in targets for b in range(world.n_b)]


def _b_only_prompts(world):
    return [ConceptPrompt(None, b) for b in range(world.n_b)]


# ---------------------------------------------------------------------------
# single metrics


def unlearning_accuracy(model: DenoiserModel, world: ConceptWorld, target_a: int, n: int = 200,
                        gamma: float = 2.0, seed=0) -> float:
    prompts = _ua_prompts(world, [target_a])
    cells = generate(model, prompts, n, gamma, seed)
    return float(np.mean([np.mean(world.classify(x)[0] != target_a) for x in cells]))


def retain_accuracy(model: DenoiserModel, world: ConceptWorld, target_a, axis: str = "in_domain",
                    n: int = 200, gamma: float = 2.0, seed=0) -> float:
    """In-domain: correct A on ``(a != target, b)``. Cross-domain: correct B on those plus ``(-, b)``."""
    targets = list(np.atleast_1d(target_a))
    prompts = _retain_prompts(world, targets)
    if axis == "cross_domain":
        prompts = prompts + _b_only_prompts(world)
    elif axis != "in_domain":
        raise ValueError(f"unknown retain axis {axis!r}")
    cells = generate(model, prompts, n, gamma, seed)
    hits = []
    for p, x in zip(prompts, cells):
        a_hat, b_hat = world.classify(x)
        hits.append(np.mean(a_hat == p.a) if axis == "in_domain" else np.mean(b_hat == p.b))
    return float(np.mean(hits))


def _w2_1d(u: np.ndarray, v: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between two 1-D empirical measures."""
    u, v = np.sort(u), np.sort(v)
    if u.size == v.size:
        return float(np.sqrt(np.mean((u - v) ** 2)))
    levels = np.union1d(np.arange(1, u.size + 1) / u.size, np.arange(1, v.size + 1) / v.size)
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - 0.5 * widths
    qu = u[np.minimum((mids * u.size).astype(int), u.size - 1)]
    qv = v[np.minimum((mids * v.size).astype(int), v.size - 1)]
    return float(np.sqrt(np.sum(widths * (qu - qv) ** 2)))


def sliced_wasserstein(set_a, set_b, n_projections: int = 128, seed=0) -> float:
    """Mean over random unit directions of the 1-D W2 distance between projections."""
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both sets must be non-empty")
    dirs = np.random.default_rng(_words(seed)).standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([_w2_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))


def model_mi(model: DenoiserModel, prompt: ConceptPrompt, n: int, gamma: float, grid: LogSnrGrid,
             n_eps: int, seed, discriminator: Optional[DenoiserModel] = None) -> float:
    """Non-negative MI on ``model``'s generations under ``prompt``, scored by ``discriminator``."""
    x = generate(model, [prompt], n, gamma, _words(seed) + [0])[0]
    judge = model if discriminator is None else discriminator
    return mi_nonneg(judge, x, prompt, grid, n_eps, _words(seed) + [1]).value


def mi_drop(teacher: DenoiserModel, student: DenoiserModel, world: ConceptWorld, target_a: int,
            config: EvalConfig = EvalConfig()) -> Optional[float]:
    """``1 - I+(student generations) / I+(teacher generations)`` under the target prompt, clamped to [0, 1].

    The frozen teacher scores both sets of generations. ``None`` when the
    teacher's value is below the noise floor.
    """
    grid = LogSnrGrid.uniform(config.mi_nodes)
    prompt = ConceptPrompt(a=target_a)
    args = (prompt, config.mi_n, config.gamma, grid, config.mi_n_eps, [config.seed, 41])
    ref = model_mi(teacher, *args)
    if ref < MI_FLOOR:
        return None
    if student is teacher or student.params.to_bytes() == teacher.params.to_bytes():
        return 0.0
    val = model_mi(student, *args, discriminator=teacher)
    return float(np.clip(1.0 - val / ref, 0.0, 1.0))


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    ua: float
    ira: float
    cra: float
    nra: Optional[float] = None
    ora: Optional[float] = None
    sw_distance: Optional[float] = None
    sw_reference: Optional[float] = None
    mi_drop: Optional[float] = None
    spread: Dict[str, float] = field(default_factory=dict)
    confusion: Dict[str, Dict[str, List[int]]] = field(default_factory=dict)
    n: int = 0
    seeds: List[int] = field(default_factory=list)
    targets: List[int] = field(default_factory=list)

    @property
    def ra(self) -> float:
        return 0.5 * (self.ira + self.cra)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def rows(self, protocol: str = "eval", method: str = "", request: int = 0) -> List[list]:
        out = []
        for name in ("ua", "ira", "cra", "nra", "ora", "sw_distance", "sw_reference", "mi_drop"):
            val = getattr(self, name)
            if val is not None:
                out.append([protocol, method, request, name, val, self.spread.get(name, ""), self.seeds[0] if self.seeds else ""])
        return out


def _neighbour_split(world: ConceptWorld, targets: Sequence[int]):
    """Non-target A-values whose centroid is nearest the targets' versus the rest."""
    cent = np.array([world.means[world.labels[:, 0] == a].mean(axis=0) for a in range(world.n_a)])
    others = [a for a in range(world.n_a) if a not in targets]
    dist = {a: min(np.linalg.norm(cent[a] - cent[t]) for t in targets) for a in others}
    best = min(dist.values())
    near = [a for a in others if np.isclose(dist[a], best)]
    return near, [a for a in others if a not in near]


def evaluate(model: DenoiserModel, world: ConceptWorld, targets, config: EvalConfig = EvalConfig(),
             teacher: Optional[DenoiserModel] = None, fine_grained: bool = False) -> EvalReport:
    """UA/IRA/CRA averaged over ``n_seeds`` generation seeds; distances and MI-drop when a teacher is given.

    ``sw_distance`` compares null-prompt generations of ``model`` and ``teacher``;
    ``sw_reference`` is the distance between two independent teacher draws.
    """
    targets = [int(a) for a in np.atleast_1d(targets)]
    ua_p = _ua_prompts(world, targets)
    ret_p = _retain_prompts(world, targets)
    b_p = _b_only_prompts(world)
    prompts = ua_p + ret_p + b_p
    near, far = _neighbour_split(world, targets) if fine_grained else ([], [])
    per_seed: Dict[str, List[float]] = {k: [] for k in ("ua", "ira", "cra", "nra", "ora")}
    confusion: Dict[str, Dict[str, List[int]]] = {}
    seeds = [config.seed + s for s in range(config.n_seeds)]
    for s in seeds:
        cells = generate(model, prompts, config.n, config.gamma, [s, 11])
        labels = [world.classify(x) for x in cells]
        for p, (a_hat, b_hat) in zip(prompts, labels):
            key = str(p)
            conf = confusion.setdefault(key, {"a": [0] * world.n_a, "b": [0] * world.n_b})
            conf["a"] = (np.array(conf["a"]) + np.bincount(a_hat, minlength=world.n_a)).tolist()
            conf["b"] = (np.array(conf["b"]) + np.bincount(b_hat, minlength=world.n_b)).tolist()
        k_ua, k_ret = len(ua_p), len(ret_p)
        ua = [np.mean(a != p.a) for p, (a, _) in zip(ua_p, labels[:k_ua])]
        ira = [np.mean(a == p.a) for p, (a, _) in zip(ret_p, labels[k_ua:k_ua + k_ret])]
        cra = [np.mean(b == p.b) for p, (_, b) in zip(ret_p + b_p, labels[k_ua:])]
        per_seed["ua"].append(float(np.mean(ua)))
        per_seed["ira"].append(float(np.mean(ira)))
        per_seed["cra"].append(float(np.mean(cra)))
        if fine_grained:
            ret_a = [p.a for p in ret_p]
            per_seed["nra"].append(float(np.mean([v for v, a in zip(ira, ret_a) if a in near])))
            if far:
                per_seed["ora"].append(float(np.mean([v for v, a in zip(ira, ret_a) if a in far])))

    def agg(k):
        vals = per_seed[k]
        return float(np.mean(vals)) if vals else None

    spread = {k: float(np.std(v, ddof=1)) for k, v in per_seed.items() if len(v) > 1}
    report = EvalReport(agg("ua"), agg("ira"), agg("cra"), agg("nra"), agg("ora"), spread=spread,
                        confusion=confusion, n=config.n * config.n_seeds, seeds=seeds, targets=targets)
    if teacher is not None:
        base = [config.seed, 23]
        own = generate(model, [NULL_PROMPT], config.sw_n, config.gamma, base + [0])[0]
        ref_a = generate(teacher, [NULL_PROMPT], config.sw_n, config.gamma, base + [1])[0]
        ref_b = generate(teacher, [NULL_PROMPT], config.sw_n, config.gamma, base + [2])[0]
        report.sw_distance = sliced_wasserstein(own, ref_a, config.sw_projections, config.seed)
        report.sw_reference = sliced_wasserstein(ref_b, ref_a, config.sw_projections, config.seed)
        if len(targets) == 1:
            report.mi_drop = mi_drop(teacher, model, world, targets[0], config)
    return report


def retained_distance(model: DenoiserModel, teacher: DenoiserModel, world: ConceptWorld, target_a: int,
                      n: int = 200, gamma: float = 2.0, seed=0, n_projections: int = 128) -> float:
    """Mean sliced-Wasserstein gap between model and teacher generations over retained prompts."""
    prompts = _retain_prompts(world, [target_a])
    own = generate(model, prompts, n, gamma, _words(seed) + [0])
    ref = generate(teacher, prompts, n, gamma, _words(seed) + [1])
    return float(np.mean([sliced_wasserstein(a, b, n_projections, seed) for a, b in zip(own, ref)]))


# ---------------------------------------------------------------------------
# protocols


def write_csv(path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "method", "request", "metric", "value", "se", "seed"])
        w.writerows(rows)


def csv_text(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "method", "request", "metric", "value", "se", "seed"])
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class SequentialReport:
    """``ua[i][j]``: UA of request ``i`` after request ``j`` (``None`` for ``j < i``)."""

    targets: List[int]
    method: str
    ua: List[List[Optional[float]]]
    ra: List[float]
    ira: List[float]
    cra: List[float]
    rebound: List[dict]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def rows(self) -> List[list]:
        out = []
        for i, row in enumerate(self.ua):
            for j, v in enumerate(row):
                if v is not None:
                    out.append(["sequential", self.method, j, f"ua[T{i + 1}]", v, "", ""])
        for j, v in enumerate(self.ra):
            out.append(["sequential", self.method, j, "ra", v, "", ""])
        return out


def sequential_protocol(teacher: DenoiserModel, world: ConceptWorld, targets: Sequence[int],
                        config: UnlearnConfig, eval_config: EvalConfig = EvalConfig(),
                        forget_per_b: int = 16) -> SequentialReport:
    """Erase ``targets`` one after another, each request starting from the previous result.

    After request ``j`` UA is measured for every target erased so far and RA is
    the mean of IRA and CRA over prompts excluding all erased targets.
    """
    targets = [int(a) for a in targets]
    if len(targets) < 2:
        raise ValueError("sequential protocol needs at least two targets")
    k = len(targets)
    ua: List[List[Optional[float]]] = [[None] * k for _ in range(k)]
    ra, ira, cra, flags = [], [], [], []
    model = teacher
    for j, target in enumerate(targets):
        fs = build_forget_set(world, target, forget_per_b, [config.seed, 500 + j])
        cfg = _reseeded(config, [config.seed, j])
        model = run_unlearn(model, fs, cfg, world).student
        rep = evaluate(model, world, targets[: j + 1], eval_config)
        for i in range(j + 1):
            ua[i][j] = unlearning_rate_from(rep, targets[i], world)
            if j > i and ua[i][j] < ua[i][j - 1] - REBOUND_THRESHOLD:
                flags.append({"request": i, "after": j, "drop": ua[i][j - 1] - ua[i][j]})
        ira.append(rep.ira)
        cra.append(rep.cra)
        ra.append(rep.ra)
    return SequentialReport(targets, config.method, ua, ra, ira, cra, flags)


def unlearning_rate_from(report: EvalReport, target: int, world: ConceptWorld) -> float:
    """UA of one target recomputed from the pooled confusion tables of a report."""
    vals = []
    for b in range(world.n_b):
        conf = report.confusion[str(ConceptPrompt(target, b))]["a"]
        vals.append(1.0 - conf[target] / sum(conf))
    return float(np.mean(vals))


def _reseeded(config: UnlearnConfig, seed) -> UnlearnConfig:
    seed_int = int(np.random.SeedSequence(_words(seed)).generate_state(1)[0])
    return UnlearnConfig(**{**_config_fields(config), "seed": seed_int})


def _config_fields(config: UnlearnConfig) -> dict:
    return {f: getattr(config, f) for f in config.__dataclass_fields__}


@dataclass(frozen=True)
class RelearnConfig:
    epochs: int = 8
    steps_per_epoch: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    pool_per_cell: int = 40
    class_a: Optional[int] = None
    p_drop_a: float = 0.3
    p_drop_b: float = 0.3
    seed: int = 0


@dataclass
class RelearnReport:
    data_spec: str
    ua: List[float]
    delta_ua: float
    epochs: List[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def rows(self, method: str = "") -> List[list]:
        out = [["relearn", method, e, "ua", v, "", ""] for e, v in zip(self.epochs, self.ua)]
        out.append(["relearn", method, self.epochs[-1], "delta_ua", self.delta_ua, "", ""])
        return out


def relearn_pool(world: ConceptWorld, target_a: int, data_spec: str, config: RelearnConfig):
    if data_spec == "class_wise":
        keep = [config.class_a if config.class_a is not None else min(a for a in range(world.n_a) if a != target_a)]
    elif data_spec == "random_subset":
        keep = [a for a in range(world.n_a) if a != target_a]
    else:
        raise ValueError(f"unknown fine-tune data spec {data_spec!r}")
    if target_a in keep:
        raise ValueError("fine-tune data must not include the erased concept")
    xs, labels = [], []
    for a in keep:
        for b in range(world.n_b):
            x, lab = world.sample_arrays(ConceptPrompt(a, b), config.pool_per_cell, [config.seed, 900, a, b])
            xs.append(x)
            labels.append(lab)
    return np.concatenate(xs), np.concatenate(labels)


def relearn_protocol(student: DenoiserModel, world: ConceptWorld, target_a: int, data_spec: str = "random_subset",
                     config: RelearnConfig = RelearnConfig(), eval_config: EvalConfig = EvalConfig()) -> RelearnReport:
    """Benign fine-tuning on retain-only data with the denoising loss; UA after every epoch."""
    x_pool, lab_pool = relearn_pool(world, target_a, data_spec, config)
    rng = np.random.default_rng([config.seed, 901])
    opt = OptimizerState("adam", lr=config.lr)
    params = student.params
    n_a, n_b = student.arch.n_a, student.arch.n_b

    def ua_of(model):
        return unlearning_accuracy(model, world, target_a, eval_config.n, eval_config.gamma, [eval_config.seed, 31])

    ua = [ua_of(student)]
    for _ in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            pick = rng.integers(0, x_pool.shape[0], size=config.batch_size)
            x, lab = x_pool[pick], lab_pool[pick]
            a_idx = np.where(rng.random(len(pick)) < config.p_drop_a, n_a, lab[:, 0])
            b_idx = np.where(rng.random(len(pick)) < config.p_drop_b, n_b, lab[:, 1])
            t = rng.integers(1, student.schedule.T + 1, size=len(pick))
            eps = rng.standard_normal(x.shape)
            _, g = denoising_loss(student.with_params(params), x, t, eps, a_idx, b_idx)
            params, opt = adam_step(params, g, opt)
        ua.append(ua_of(student.with_params(params)))
    return RelearnReport(data_spec, ua, ua[0] - ua[-1], list(range(config.epochs + 1)))


@dataclass
class BreakdownReport:
    steps: List[int]
    curves: Dict[str, Dict[str, List[float]]]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def rows(self) -> List[list]:
        out = []
        for method, curves in self.curves.items():
            for metric, vals in curves.items():
                for s, v in zip(self.steps, vals):
                    out.append(["breakdown", method, s, metric, v, "", ""])
        return out


def unconditional_drift(model: DenoiserModel, teacher: DenoiserModel, probe_x, probe_t, probe_eps) -> float:
    """Mean squared gap between the model's and teacher's unconditional predictions on fixed probes."""
    sched = teacher.schedule
    lam = sched.logsnr_at(probe_t)
    x_t = np.sqrt(sched.abar_at(probe_t))[:, None] * probe_x + np.sqrt(1 - sched.abar_at(probe_t))[:, None] * probe_eps
    diff = model.predict_logsnr(x_t, lam, NULL_PROMPT) - teacher.predict_logsnr(x_t, lam, NULL_PROMPT)
    return float(np.mean(np.sum(diff**2, axis=1)))


def breakdown_probe(teacher: DenoiserModel, world: ConceptWorld, target_a: int, step_grid: Sequence[int],
                    methods: Sequence[str] = ("mim_mu", "sdd"), config: UnlearnConfig = UnlearnConfig(),
                    eval_config: EvalConfig = EvalConfig(n_seeds=1), forget_per_b: int = 16) -> BreakdownReport:
    """Run each method to ``max(step_grid)`` with shared seeds, snapshotting metrics on the grid."""
    steps = sorted(set(int(s) for s in step_grid) | {0})
    fs = build_forget_set(world, target_a, forget_per_b, [config.seed, 500])
    rng = np.random.default_rng([config.seed, 77])
    probe_x, _ = world.sample_arrays(NULL_PROMPT, 512, rng)
    probe_t = rng.integers(1, teacher.schedule.T + 1, size=512)
    probe_eps = rng.standard_normal(probe_x.shape)
    curves = {}
    for method in methods:
        cfg = UnlearnConfig(**{**_config_fields(config), "method": method, "steps": max(steps)})

        def snap(model, step):
            rep = evaluate(model, world, [target_a], eval_config)
            return {"ua": rep.ua, "ira": rep.ira, "cra": rep.cra,
                    "drift": unconditional_drift(model, teacher, probe_x, probe_t, probe_eps)}

        run = run_unlearn(teacher, fs, cfg, world, snap, steps)
        curves[method] = {k: [s[k] for s in run.snapshots] for k in ("ua", "ira", "cra", "drift")}
    return BreakdownReport(steps, curves)

"""Command-line entry point: ``mimmu <command> [--config PATH] [--set k=v ...]``.

Every command writes content-addressed artifacts (``<stem>-<sha12>.<ext>``) plus
``manifest-<command>.json`` into the output directory. Commands that consume a
checkpoint find it through the producing command's manifest unless a path is
given, and refuse it if its bytes no longer match the recorded digest.
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import io
import json
import os
import re
import subprocess
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import plotting
from .config import ConfigError, ExperimentConfig, derive_seed, load_config
from .diffusion import (
    Architecture,
    DenoiserModel,
    NoiseSchedule,
    NumericalError,
    TrainConfig,
    checkpoint_bytes,
    model_from_bytes,
    oracle_gap,
    pretrain,
)
from .evalharness import (
    EvalConfig,
    RelearnConfig,
    breakdown_probe,
    csv_text,
    evaluate,
    generate,
    relearn_protocol,
    sequential_protocol,
    unlearning_rate_from,
)
from .infotheory import LogSnrGrid, estimate_records, mi_naive, mi_nonneg, neg_log_density, orthogonality_integral
from .unlearn import (
    RetainSpec,
    UnlearnConfig,
    build_forget_set,
    multi_concept_unlearn,
    verify_gradient_identities,
)
from .world import NULL_PROMPT, ConceptPrompt, ConceptWorld, build_fine_grained_world, build_grid_world

OUT_ENV = "MIMMU_OUT"
DEFAULT_OUT = "mimmu-out"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERICAL = 4


class ArtifactError(RuntimeError):
    """Referenced artifact is missing or its bytes do not match the recorded digest."""


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# artifact store


class Store:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, stem: str, ext: str, data: bytes) -> dict:
        digest = sha256(data)
        name = f"{stem}-{digest[:12]}.{ext}"
        path = self.root / name
        if path.exists():
            # write-once: identical content is already there
            if sha256(path.read_bytes()) != digest:
                raise ArtifactError(f"{path} exists with different content")
        else:
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return {"name": name, "sha256": digest, "bytes": len(data)}

    def manifest_path(self, command: str) -> Path:
        return self.root / f"manifest-{command}.json"

    def output_of(self, command: str, role: str) -> Path:
        mpath = self.manifest_path(command)
        if not mpath.exists():
            raise ArtifactError(f"no {command} run in {self.root}; run `mimmu {command}` first or pass a path")
        manifest = json.loads(mpath.read_text())
        for out in manifest["outputs"]:
            if out["role"] == role:
                path = self.root / out["name"]
                verify_digest(path, out["sha256"])
                return path
        raise ArtifactError(f"{mpath} lists no {role!r} output")


def verify_digest(path: Path, expected: Optional[str] = None) -> str:
    if not path.exists():
        raise ArtifactError(f"artifact {path} is missing")
    digest = sha256(path.read_bytes())
    if expected is None:
        m = re.search(r"-([0-9a-f]{12})\.[a-z]+$", path.name)
        expected = m.group(1) if m else None
    if expected is not None and not digest.startswith(expected):
        raise ArtifactError(f"digest mismatch for {path}: expected {expected[:12]}, found {digest[:12]}")
    return digest


@contextmanager
def directory_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise ArtifactError(f"{root} is locked by another writer") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig, store: Store):
        self.command = command
        self.cfg = cfg
        self.store = store
        self.inputs: List[dict] = []
        self.outputs: List[dict] = []
        self.seeds: Dict[str, int] = {}
        self.extras: dict = {}
        self.started = _now()
        self.t0 = time.perf_counter()

    def seed(self, label: str) -> int:
        self.seeds[label] = derive_seed(self.cfg.seed, label)
        return self.seeds[label]

    def load_model(self, role: str, path: Optional[str], producer: str, producer_role: str = "checkpoint"):
        p = Path(path) if path else self.store.output_of(producer, producer_role)
        digest = verify_digest(p)
        shown = p.name if p.resolve().parent == self.store.root.resolve() else str(p)
        self.inputs.append({"role": role, "path": shown, "sha256": digest})
        try:
            return model_from_bytes(p.read_bytes())
        except (ValueError, KeyError) as exc:
            raise ArtifactError(f"{p} is not a valid checkpoint: {exc}") from exc

    def put(self, role: str, stem: str, ext: str, data: bytes) -> dict:
        entry = {"role": role, **self.store.put(stem, ext, data)}
        self.outputs.append(entry)
        return entry

    def put_json(self, role, stem, obj):
        return self.put(role, stem, "json", _json_bytes(obj))

    def put_csv(self, role, stem, rows):
        return self.put(role, stem, "csv", csv_text(rows).encode())

    def put_png(self, role, stem, draw, *args, **kw):
        buf = io.BytesIO()
        draw(buf, *args, **kw)
        return self.put(role, stem, "png", buf.getvalue())

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "tool_version": _version(),
            "git_describe": _git_describe(),
            "config_digest": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": _now(),
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
            **self.extras,
        }
        path = self.store.manifest_path(self.command)
        path.write_bytes(_json_bytes(manifest))
        return path

    def lineage(self, **extra) -> dict:
        return {"command": self.command, "config_digest": self.cfg.digest(), "seed": self.cfg.seed,
                "seeds": dict(self.seeds), **extra}


# ---------------------------------------------------------------------------
# builders


def build_world(cfg: ExperimentConfig) -> ConceptWorld:
    w = cfg.world
    if w.kind == "fine_grained":
        return build_fine_grained_world(w.n_b, w.d, w.spacing, w.sigma, w.near_spacing)
    return build_grid_world(w.n_a, w.n_b, w.d, w.spacing, w.sigma)


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    try:
        return NoiseSchedule(kind=s.kind, T=s.T, logsnr_max=s.logsnr_max, logsnr_min=s.logsnr_min)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def unlearn_config(cfg: ExperimentConfig, seed: int, **changes) -> UnlearnConfig:
    u = cfg.unlearn
    fields = dict(method=u.method, steps=u.steps, lr=u.lr, batch_size=u.batch_size, seed=seed,
                  ema_decay=u.ema_decay, gamma=u.gamma, distill_target=u.distill_target,
                  refresh_every=u.refresh_every, refresh_size=u.refresh_size, trainable=u.trainable)
    fields.update(changes)
    if fields["method"] == "retarget":
        fields["retain"] = RetainSpec(u.retain_per_cell, derive_seed(cfg.seed, "retain"))
        if u.anchor is not None:
            fields["anchor_prompt"] = ConceptPrompt(*u.anchor)
    try:
        return UnlearnConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"unlearn: {exc}") from exc


def eval_config(cfg: ExperimentConfig, seed: int) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(n=e.n, n_seeds=e.n_seeds, gamma=e.gamma, seed=seed, sw_projections=e.sw_projections,
                      sw_n=e.sw_n, mi_n=e.mi_n, mi_n_eps=e.mi_n_eps, mi_nodes=e.mi_nodes)


def _check_world(model: DenoiserModel, world: ConceptWorld):
    a = model.arch
    if (a.d, a.n_a, a.n_b) != (world.d, world.n_a, world.n_b):
        raise ArtifactError(
            f"checkpoint built for d={a.d}, n_a={a.n_a}, n_b={a.n_b}; config world has "
            f"d={world.d}, n_a={world.n_a}, n_b={world.n_b}"
        )


def _forget_sets(run: Run, world: ConceptWorld, targets):
    per_b = run.cfg.unlearn.forget_per_b
    return [build_forget_set(world, a, per_b, run.seed(f"forget/{a}")) for a in targets]


def _sample_cells_png(run: Run, model, world, prompts, stem, title):
    cells = generate(model, prompts, 200, run.cfg.eval.gamma, run.seed(f"{stem}/figure"))
    run.put_png("figure", stem, plotting.plot_samples, cells, [str(p) for p in prompts], world, title)


# ---------------------------------------------------------------------------
# commands


def cmd_world(run: Run, args) -> dict:
    world = build_world(run.cfg)
    run.put("world", "world", "json", world.to_json().encode())
    rows = []
    for i, c in enumerate(world.components):
        rows.append(["world", "", i, f"component[{c.label[0]},{c.label[1]}].weight", c.weight, "", ""])
    run.put_csv("table", "world", rows)
    prompts = [ConceptPrompt(a, None) for a in range(world.n_a)]
    cells = [world.sample_arrays(p, 200, run.seed(f"world/figure/{i}"))[0] for i, p in enumerate(prompts)]
    run.put_png("figure", "world", plotting.plot_samples, cells, [str(p) for p in prompts], world, "world samples")
    return {"components": len(world.components), "d": world.d}


def cmd_pretrain(run: Run, args) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    try:
        arch = Architecture.for_world(world, hidden=tuple(cfg.architecture.hidden),
                                      time_dim=cfg.architecture.time_dim, emb_dim=cfg.architecture.emb_dim)
        tc = cfg.train
        train = TrainConfig(epochs=tc.epochs, steps_per_epoch=tc.steps_per_epoch, batch_size=tc.batch_size,
                            lr=tc.lr, lr_final=tc.lr_final, p_drop_a=tc.p_drop_a, p_drop_b=tc.p_drop_b,
                            seed=run.seed("pretrain"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = DenoiserModel.init(arch, schedule, seed=run.seed("init"))
    model, curve = pretrain(model, world, schedule, train)
    gap_null, oracle_null = oracle_gap(model, world, NULL_PROMPT, seed=run.seed("oracle_gap/null"))
    gap_cond, oracle_cond = oracle_gap(model, world, ConceptPrompt(0, 0), seed=run.seed("oracle_gap/cond"))
    world_digest = sha256(world.to_json().encode())
    run.put("checkpoint", "teacher", "ckpt", checkpoint_bytes(model, run.lineage(world_sha256=world_digest)))
    report = {"loss_curve": curve, "param_count": model.params.size,
              "oracle_gap": {"null": gap_null, "cell_0_0": gap_cond},
              "oracle_mse": {"null": oracle_null, "cell_0_0": oracle_cond}, "world_sha256": world_digest}
    run.put_json("report", "pretrain", report)
    run.put_csv("table", "pretrain", [["pretrain", "", e, "loss", v, "", ""] for e, v in enumerate(curve)]
                + [["pretrain", "", 0, "oracle_gap_null", gap_null, "", ""]])
    run.put_png("figure", "pretrain-loss", plotting.plot_loss, curve, "pretraining loss", 5)
    return {"final_loss": curve[-1] if curve else None, "oracle_gap_null": gap_null}


def _unlearn(run: Run, args, targets, method_label: str) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    teacher, _ = run.load_model("teacher", args.teacher, "pretrain")
    _check_world(teacher, world)
    uc = unlearn_config(cfg, run.seed("unlearn"))
    forgets = _forget_sets(run, world, targets)
    try:
        report = multi_concept_unlearn(teacher, forgets, uc, world if uc.method == "retarget" else None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run.extras["unlearn_wall_clock_s"] = round(report.wall_clock, 3)
    lineage = run.lineage(targets=list(targets), method=uc.method, teacher_sha256=run.inputs[0]["sha256"])
    run.put("checkpoint", "student", "ckpt", checkpoint_bytes(report.student, lineage))
    body = json.loads(report.to_json())
    body["config"] = uc.to_dict()
    run.put_json("report", method_label, body)
    run.put_csv("table", method_label,
                [["unlearn", uc.method, s, "loss", v, "", ""] for s, v in enumerate(report.loss_curve)]
                + [["unlearn", uc.method, 0, "forget_loss_initial", report.initial_forget_loss, "", ""],
                   ["unlearn", uc.method, len(report.loss_curve), "forget_loss_final", report.final_forget_loss, "", ""]])
    run.put_png("figure", f"{method_label}-loss", plotting.plot_loss, report.loss_curve, f"{uc.method} loss")
    return {"method": uc.method, "targets": list(targets),
            "forget_loss_ratio": report.final_forget_loss / report.initial_forget_loss
            if report.initial_forget_loss > 0 else None, "student": report.student, "teacher": teacher,
            "world": world}


def cmd_unlearn(run: Run, args) -> dict:
    targets = run.cfg.unlearn.targets
    if len(targets) != 1:
        raise ConfigError("unlearn erases one target; use `mimmu multi` for several")
    res = _unlearn(run, args, targets, "unlearn")
    return {k: res[k] for k in ("method", "targets", "forget_loss_ratio")}


def cmd_multi(run: Run, args) -> dict:
    targets = run.cfg.unlearn.targets
    if len(targets) < 2:
        raise ConfigError("multi needs at least two unlearn.targets")
    res = _unlearn(run, args, targets, "multi")
    ec = eval_config(run.cfg, run.seed("eval"))
    rep = evaluate(res["student"], res["world"], targets, ec)
    run.put_json("eval", "multi-eval", json.loads(rep.to_json()))
    per_target = {}
    for a in targets:
        per_target[str(a)] = unlearning_rate_from(rep, a, res["world"])
    run.put_csv("eval_table", "multi-eval", rep.rows("multi", res["method"])
                + [["multi", res["method"], 0, f"ua[a={a}]", v, "", ""] for a, v in per_target.items()])
    return {"method": res["method"], "targets": targets, "ua": per_target, "ira": rep.ira, "cra": rep.cra}


def cmd_eval(run: Run, args) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    student, header = run.load_model("student", args.student, "unlearn")
    teacher, _ = run.load_model("teacher", args.teacher, "pretrain")
    _check_world(student, world)
    targets = header.get("seed_lineage", {}).get("targets") or cfg.unlearn.targets
    ec = eval_config(cfg, run.seed("eval"))
    rep = evaluate(student, world, targets, ec, teacher=teacher, fine_grained=cfg.world.kind == "fine_grained")
    run.put_json("report", "eval", json.loads(rep.to_json()))
    run.put_csv("table", "eval", rep.rows("eval", header.get("seed_lineage", {}).get("method", "")))
    prompts = [ConceptPrompt(targets[0], b) for b in range(world.n_b)] + [NULL_PROMPT]
    _sample_cells_png(run, student, world, prompts, "eval-samples", f"student generations, target a={targets[0]}")
    return {"ua": rep.ua, "ira": rep.ira, "cra": rep.cra, "sw_distance": rep.sw_distance,
            "sw_reference": rep.sw_reference, "mi_drop": rep.mi_drop}


def cmd_mi(run: Run, args) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    if args.model == "analytic":
        model, label = world, "analytic"
    else:
        model, _ = run.load_model("model", None if args.model in (None, "teacher") else args.model, "pretrain")
        _check_world(model, world)
        label = "checkpoint"
    m = cfg.mi
    grid = LogSnrGrid.uniform(m.nodes)
    records, rows, contribs, names = [], [], [], []
    prior = world.attribute_prior("a")
    joint, joint_var = 0.0, 0.0
    for a in range(world.n_a):
        prompt = ConceptPrompt(a=a)
        x, _ = world.sample_arrays(prompt, m.n_x, run.seed(f"mi/x/{a}"))
        s = run.seed(f"mi/eps/{a}")
        naive = mi_naive(model, x, prompt, grid, m.n_eps, s)
        nonneg = mi_nonneg(model, x, prompt, grid, m.n_eps, s)
        orth = orthogonality_integral(model, x, prompt, grid, m.n_eps, s)
        for est in (naive, nonneg):
            records.extend(estimate_records(est))
            rows.append(["mi", label, a, f"mi_{est.kind}", est.value, est.se, s])
        rows.append(["mi", label, a, "orthogonality", orth.value, orth.se, s])
        joint += prior[a] * nonneg.value
        joint_var += (prior[a] * nonneg.se) ** 2
        contribs.append(nonneg.node_contrib)
        names.append(f"a={a}")
    x0, _ = world.sample_arrays(NULL_PROMPT, m.density_points, run.seed("mi/density/x"))
    dens = neg_log_density(model, x0, NULL_PROMPT, grid, m.n_eps, run.seed("mi/density/eps"))
    records.extend(estimate_records(dens))
    err = dens.value - (-world.log_density(x0))
    analytic, analytic_se = world.analytic_mi("a", 20000, run.seed("mi/analytic"))
    summary = {"model": label, "grid_id": grid.grid_id, "joint_mi_nonneg": joint, "joint_mi_se": float(np.sqrt(joint_var)),
               "analytic_mi": analytic, "analytic_mi_se": analytic_se,
               "density_mean_abs_error": float(np.mean(np.abs(err))), "density_mean_se": float(np.mean(dens.se))}
    rows += [["mi", label, 0, "joint_mi_nonneg", joint, float(np.sqrt(joint_var)), ""],
             ["mi", label, 0, "analytic_mi", analytic, analytic_se, ""],
             ["mi", label, 0, "density_mean_abs_error", summary["density_mean_abs_error"], summary["density_mean_se"], ""]]
    run.put("records", "mi", "jsonl", "".join(json.dumps(r) + "\n" for r in records).encode())
    run.put_json("report", "mi", summary)
    run.put_csv("table", "mi", rows)
    run.put_png("figure", "mi-nodes", plotting.plot_mi_nodes, grid.nodes, contribs, names)
    return summary


def cmd_sequential(run: Run, args) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    teacher, _ = run.load_model("teacher", args.teacher, "pretrain")
    _check_world(teacher, world)
    uc = unlearn_config(cfg, run.seed("sequential"))
    rep = sequential_protocol(teacher, world, cfg.protocol.sequential_targets, uc, eval_config(cfg, run.seed("eval")),
                              cfg.unlearn.forget_per_b)
    run.put_json("report", "sequential", json.loads(rep.to_json()))
    run.put_csv("table", "sequential", rep.rows())
    run.put_png("figure", "sequential-ua", plotting.plot_sequential, rep.ua, rep.targets)
    return {"rebound_flags": len(rep.rebound), "ra": rep.ra}


def cmd_relearn(run: Run, args) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    student, header = run.load_model("student", args.student, "unlearn")
    _check_world(student, world)
    lineage = header.get("seed_lineage", {})
    targets = lineage.get("targets") or cfg.unlearn.targets
    p = cfg.protocol
    rc = RelearnConfig(epochs=p.relearn_epochs, steps_per_epoch=p.relearn_steps_per_epoch,
                       batch_size=p.relearn_batch_size, lr=p.relearn_lr, seed=run.seed("relearn"))
    ec = eval_config(cfg, run.seed("eval"))
    try:
        rep = relearn_protocol(student, world, targets[0], p.relearn_data, rc, ec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    method = lineage.get("method", "")
    run.put_json("report", "relearn", json.loads(rep.to_json()))
    run.put_csv("table", "relearn", rep.rows(method))
    run.put_png("figure", "relearn", plotting.plot_relearn, rep.epochs, {method or "student": rep.ua})
    return {"delta_ua": rep.delta_ua, "ua": rep.ua}


def cmd_breakdown(run: Run, args) -> dict:
    cfg = run.cfg
    world = build_world(cfg)
    teacher, _ = run.load_model("teacher", args.teacher, "pretrain")
    _check_world(teacher, world)
    uc = unlearn_config(cfg, run.seed("breakdown"))
    ec = eval_config(cfg, run.seed("eval"))
    rep = breakdown_probe(teacher, world, cfg.unlearn.targets[0], cfg.protocol.breakdown_steps,
                          cfg.protocol.breakdown_methods, uc, ec, cfg.unlearn.forget_per_b)
    run.put_json("report", "breakdown", json.loads(rep.to_json()))
    run.put_csv("table", "breakdown", rep.rows())
    run.put_png("figure", "breakdown", plotting.plot_breakdown, rep.steps, rep.curves)
    return {"steps": rep.steps, **{m: c["ua"][-1] for m, c in rep.curves.items()}}


def cmd_verify_grad(run: Run, args) -> dict:
    world = build_world(run.cfg)
    rows = verify_gradient_identities(world, run.seed("verify_grad"))
    run.put_json("report", "verify-grad", rows)
    run.put_csv("table", "verify-grad",
                [["verify_grad", r["check"], r["t"], "residual", r["residual"], "", run.seeds["verify_grad"]] for r in rows])
    for r in rows:
        print(f"{'ok ' if r['passed'] else 'FAIL'} {r['check']:<32} t={r['t']:>4} residual={r['residual']:.3e} "
              f"tol={r['tolerance']:.0e}")
    failed = [r for r in rows if not r["passed"]]
    if failed:
        run.finish()
        raise NumericalError(f"{len(failed)} gradient identity checks failed")
    return {"checks": len(rows), "failed": 0}


COMMANDS = {
    "world": cmd_world,
    "pretrain": cmd_pretrain,
    "unlearn": cmd_unlearn,
    "eval": cmd_eval,
    "mi": cmd_mi,
    "sequential": cmd_sequential,
    "relearn": cmd_relearn,
    "multi": cmd_multi,
    "breakdown": cmd_breakdown,
    "verify-grad": cmd_verify_grad,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. --set unlearn.steps=500 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")
    common.add_argument("--teacher", help="teacher checkpoint (default: latest pretrain output)")
    common.add_argument("--student", help="student checkpoint (default: latest unlearn output)")
    common.add_argument("--model", help="for mi: 'teacher' (default), 'analytic', or a checkpoint path")
    parser = argparse.ArgumentParser(prog="mimmu", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _fail(category: str, code: int, message: str) -> int:
    print(json.dumps({"error": category, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = args.out or os.environ.get(OUT_ENV)
        cfg = load_config(args.config, args.overrides, args.seed, out)
        root = Path(cfg.out or DEFAULT_OUT)
        store = Store(root)
        with directory_lock(root), threadpool_limits(limits=max(1, args.threads)):
            run = Run(args.command, cfg, store)
            summary = COMMANDS[args.command](run, args)
            mpath = run.finish()
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except ArtifactError as exc:
        return _fail("artifact", EXIT_ARTIFACT, str(exc))
    except (NumericalError, FloatingPointError) as exc:
        return _fail("numerical", EXIT_NUMERICAL, str(exc))
    print(json.dumps({"command": args.command, "manifest": str(mpath), **summary}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

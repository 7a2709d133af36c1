"""Command-line experiment runner.

Usage::

    reptile <subcommand> [--config FILE] --out DIR [--seed N] [--paper-scale] [--svg] [--workers N]

Every run writes ``config.resolved`` (all defaults spelled out), CSV files
starting with ``# schema=v1`` and an ``eval_summary.json``. Exit codes: 0
success, 2 configuration error, 3 numerical divergence, 4 failed check
(``taylor-check`` and ``manifold-demo`` tolerances).
"""

from __future__ import annotations

import argparse
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import TaskBatches, coefficient_table, residual_study
from .config import DEFAULTS, Config, ConfigError, load_config
from .core import DivergenceError, RngStream
from .innerloop import InnerLoopConfig, run_inner
from .io import svg_line_chart, write_csv, write_json
from .meta import MetaAlgorithm, meta_evaluate, meta_train
from .models import MlpSpec, mlp_init, mlp_predict
from .optim import OuterSchedule
from .tasks import (
    SINE_GRID,
    AffineManifoldTask,
    FewShotConfig,
    FewShotFamily,
    QuadraticFamily,
    SineFamily,
    manifold_fixed_point_oracle,
    manifold_sgd_iterate,
)
from .tasks.fewshot import default_spec

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4


@dataclass
class RunArtifact:
    out: Path
    files: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    passed: bool = True


def stream(seed: int, *names) -> RngStream:
    """RNG keyed by names, so adding or removing runs never shifts the others."""
    return RngStream(seed, stream_id=zlib.crc32("/".join(map(str, names)).encode()))


def _iterations(cfg: Config, paper_scale: bool) -> int:
    return cfg["outer"]["paper_iterations"] if paper_scale else cfg["outer"]["iterations"]


def _inner(cfg: Config, **overrides) -> InnerLoopConfig:
    i = cfg["inner"]
    kw = dict(
        k=i["k"],
        batch_size=i["batch_size"],
        step_size=i["step_size"],
        optimizer=i["optimizer"],
        sampling=i.get("sampling", "cycle"),
        beta1=i.get("beta1", 0.0),
        beta2=i.get("beta2", 0.999),
        record_trajectory=False,
    )
    kw.update(overrides)
    return InnerLoopConfig(**kw)


def _eval_inner(cfg: Config) -> InnerLoopConfig:
    e = cfg["eval"]
    return InnerLoopConfig(
        k=e["steps"],
        batch_size=e["batch_size"],
        step_size=e["step_size"],
        optimizer=cfg["inner"]["optimizer"],
        beta1=cfg["inner"].get("beta1", 0.0),
        beta2=cfg["inner"].get("beta2", 0.999),
        record_trajectory=False,
    )


def _log_rows(name, log):
    for r in log:
        yield [name, r["iteration"], r["eps"], r["direction_norm"], r["inner_first_loss"], r["inner_last_loss"], r["eval_metric"]]


LOG_HEADER = ["run", "iteration", "eps", "direction_norm", "inner_first_loss", "inner_last_loss", "eval_metric"]


# --- sine --------------------------------------------------------------------

def cmd_sine_demo(cfg: Config, out: Path, paper_scale: bool = False, svg: bool = False) -> RunArtifact:
    seed, workers = cfg["experiment"]["seed"], cfg["experiment"]["workers"]
    spec = MlpSpec((1, *cfg["model"]["hidden"], 1), activation=cfg["model"]["activation"])
    train_family = SineFamily(spec, n_points=cfg["task"]["train_points"])
    eval_family = SineFamily(spec, n_points=cfg["task"]["eval_points"])
    ev = _eval_inner(cfg)
    phi0 = mlp_init(spec, stream(seed, "init"))
    eval_rng = stream(seed, "eval")
    art = RunArtifact(out)

    runs = {"random-init": (phi0, [])}
    for name in cfg["run"]["algorithms"]:
        iters = _iterations(cfg, paper_scale) if name != "maml" else min(cfg["run"]["maml_iterations"], _iterations(cfg, paper_scale))
        inner = _inner(cfg, record_trajectory=name == "maml")
        res = meta_train(
            train_family, MetaAlgorithm(name), inner, OuterSchedule(cfg["outer"]["step_size"], iters),
            stream(seed, "train", name), phi0, meta_batch_size=cfg["outer"]["meta_batch"], workers=workers,
        )
        runs[name] = (res.phi, res.log)

    curves, summary, log_rows = [], {}, []
    held_out = eval_family.sample(eval_rng.child(0, 0))
    for name, (phi, log) in runs.items():
        log_rows.extend(_log_rows(name, log))
        r = meta_evaluate(phi, eval_family, ev, cfg["eval"]["trials"], eval_rng)
        reduction = 1.0 - r.values / r.pre_values
        f0 = mlp_predict(spec, phi, SINE_GRID[:, None])[:, 0]
        summary[name] = {
            "pre_loss_mean": r.pre_mean,
            "post_loss_mean": r.mean,
            "post_loss_stderr": r.stderr,
            "tasks_reduced": int(np.sum(reduction >= cfg["eval"]["reduction"])),
            "trials": cfg["eval"]["trials"],
            "mean_abs_pre_output": float(np.mean(np.abs(f0))),
        }
        adapted = run_inner(phi, held_out, ev, eval_rng.child(0, 1)).end
        f1 = mlp_predict(spec, adapted, SINE_GRID[:, None])[:, 0]
        for x, a, b, t in zip(SINE_GRID, f0, f1, held_out.target(SINE_GRID)):
            curves.append([name, float(x), float(a), float(b), float(t)])

    art.files.append(write_csv(out / "train_log.csv", LOG_HEADER, log_rows))
    art.files.append(write_csv(out / "study_sine_curves.csv", ["run", "x", "f_pre", "f_post", "f_true"], curves))
    art.files.append(write_json(out / "eval_summary.json", summary))
    if svg:
        series = {"true": (SINE_GRID, held_out.target(SINE_GRID))}
        for name in runs:
            rows = [c for c in curves if c[0] == name]
            series[f"{name} pre"] = ([c[1] for c in rows], [c[2] for c in rows])
            series[f"{name} post"] = ([c[1] for c in rows], [c[3] for c in rows])
        art.files.append(svg_line_chart(out / "sine_curves.svg", series, "held-out sine task", "x", "f(x)"))
    art.summary = summary
    return art


# --- few-shot ----------------------------------------------------------------

def _fewshot_families(cfg: Config):
    t = cfg["task"]
    common = dict(n_way=t["n_way"], dim=t["dim"], signal_dim=t["signal_dim"], noise=t["noise"], nuisance=t["nuisance"], basis_seed=t["basis_seed"])
    train_cfg = FewShotConfig(shots=t["train_shots"], query_per_class=t["query_per_class"], tail_shots=t["tail_shots"], **common)
    eval_cfg = FewShotConfig(shots=t["eval_shots"], query_per_class=t["query_per_class"], **common)
    spec = default_spec(train_cfg, cfg["model"]["hidden"])
    return FewShotFamily(train_cfg, spec), FewShotFamily(eval_cfg, spec), spec


def _train_and_score(cfg, name, algo, inner, train_family, eval_family, spec, rng_name, iters, outer_step=None):
    """Meta-train one configuration; return (final EvalResult, curve rows, log rows)."""
    seed, workers = cfg["experiment"]["seed"], cfg["experiment"]["workers"]
    phi0 = mlp_init(spec, stream(seed, "init"))
    ev = _eval_inner(cfg)
    curve_rng = stream(seed, "curve")
    every = cfg["eval"]["every"]
    curve = []

    def evaluate(phi, state):
        r = meta_evaluate(phi, eval_family, ev, cfg["eval"]["curve_trials"], curve_rng, state)
        return r.mean

    step = cfg["outer"]["step_size"] if outer_step is None else outer_step
    res = meta_train(
        train_family, algo, inner, OuterSchedule(step, iters), stream(seed, "train", rng_name), phi0,
        meta_batch_size=cfg["outer"]["meta_batch"], evaluate=evaluate if every else None, eval_every=every,
        workers=workers,
    )
    for row in res.log:
        if row["eval_metric"] != "":
            curve.append([name, row["iteration"] + 1, row["eval_metric"]])
    final = meta_evaluate(res.phi, eval_family, ev, cfg["eval"]["trials"], stream(seed, "eval"), res.state)
    return final, curve, list(_log_rows(name, res.log))


def _joint(k):
    return MetaAlgorithm("combo", (1.0,) + (0.0,) * (k - 1), "sum")


def cmd_fewshot(cfg: Config, out: Path, paper_scale: bool = False, svg: bool = False) -> RunArtifact:
    train_family, eval_family, spec = _fewshot_families(cfg)
    iters = _iterations(cfg, paper_scale)
    k = cfg["inner"]["k"]
    art = RunArtifact(out)
    summary, curves, logs = {}, [], []
    for name in cfg["run"]["algorithms"]:
        algo = _joint(k) if name == "joint" else MetaAlgorithm(name)
        inner = _inner(cfg, record_trajectory=name == "maml")
        # one-step directions are about k times shorter than Reptile's, so they get their own outer step
        step = cfg["outer"]["step_size"] if name == "reptile" else cfg["outer"]["gradient_step_size"]
        final, curve, log = _train_and_score(cfg, name, algo, inner, train_family, eval_family, spec, name, iters, step)
        summary[name] = {"accuracy": final.mean, "stderr": final.stderr, "episodes": len(final.values)}
        curves += curve
        logs += log
    art.files.append(write_csv(out / "train_log.csv", LOG_HEADER, logs))
    art.files.append(write_csv(out / "study_fewshot_curves.csv", ["algorithm", "iteration", "accuracy"], curves))
    art.files.append(write_json(out / "eval_summary.json", summary))
    if svg and curves:
        art.files.append(_curve_svg(out / "fewshot_curves.svg", curves, "few-shot learning curves"))
    art.summary = summary
    return art


def _curve_svg(path, curves, title):
    series = {}
    for name, it, acc in curves:
        xs, ys = series.setdefault(name, ([], []))
        xs.append(it)
        ys.append(acc)
    return svg_line_chart(path, series, title, "outer iteration", "accuracy")


def combo_name(weights, normalize) -> str:
    terms = "+".join(f"g{i + 1}" if w == 1 else f"{w:g}g{i + 1}" for i, w in enumerate(weights) if w)
    return f"{terms}_{normalize}"


def cmd_combo_sweep(cfg: Config, out: Path, paper_scale: bool = False, svg: bool = False) -> RunArtifact:
    train_family, eval_family, spec = _fewshot_families(cfg)
    iters = _iterations(cfg, paper_scale)
    inner = _inner(cfg, sampling="cycle", record_trajectory=True)
    art = RunArtifact(out)
    summary, rows, all_curves, logs = {}, [], [], []
    for norm in cfg["run"]["normalizations"]:
        for weights in cfg["run"]["combos"]:
            name = combo_name(weights, norm)
            algo = MetaAlgorithm("combo", tuple(float(w) for w in weights), norm)
            final, curve, log = _train_and_score(cfg, name, algo, inner, train_family, eval_family, spec, name, iters)
            art.files.append(write_csv(out / f"study_combo_{name}.csv", ["combo", "iteration", "accuracy"], curve))
            summary[name] = {"accuracy": final.mean, "stderr": final.stderr, "episodes": len(final.values)}
            rows.append([name, norm, int(sum(1 for w in weights if w)), final.mean, final.stderr])
            all_curves += curve
            logs += log
    art.files.append(write_csv(out / "train_log.csv", LOG_HEADER, logs))
    art.files.append(write_csv(out / "study_combo_final.csv", ["combo", "normalize", "n_gradients", "accuracy", "stderr"], rows))
    art.files.append(write_json(out / "eval_summary.json", summary))
    if svg and all_curves:
        art.files.append(_curve_svg(out / "combo_curves.svg", all_curves, "inner-gradient combinations"))
    art.summary = summary
    return art


def _overlap_arm(arm: str):
    """(algorithm, sampling, tail) of one overlap-sweep arm."""
    return {
        "shared-cycle": (MetaAlgorithm("fomaml"), "cycle", "shared"),
        "shared-replacement": (MetaAlgorithm("fomaml"), "replacement", "shared"),
        "separate-tail": (MetaAlgorithm("fomaml"), "cycle", "separate"),
        "reptile": (MetaAlgorithm("reptile"), "cycle", "shared"),
    }[arm]


def cmd_overlap_sweep(cfg: Config, out: Path, paper_scale: bool = False, svg: bool = False) -> RunArtifact:
    train_family, eval_family, spec = _fewshot_families(cfg)
    if "separate-tail" in cfg["sweep"]["arms"] and cfg["task"]["tail_shots"] < 1:
        raise ConfigError("task.tail_shots: the separate-tail arm needs a tail split")
    iters = _iterations(cfg, paper_scale)
    axis = cfg["sweep"]["axis"]
    art = RunArtifact(out)
    rows, logs, summary = [], [], {}
    for value in cfg["sweep"]["values"]:
        k, bs, step = cfg["inner"]["k"], cfg["inner"]["batch_size"], None
        if axis == "iterations":
            k = int(value)
        elif axis == "batch_size":
            bs = int(value)
        else:
            step = float(value)
        for arm in cfg["sweep"]["arms"]:
            algo, sampling, tail = _overlap_arm(arm)
            if step is not None:
                arm_step = step
            elif algo.variant == "reptile":
                arm_step = cfg["outer"]["step_size"]
            else:
                arm_step = cfg["outer"]["gradient_step_size"]
            inner = _inner(cfg, k=k, batch_size=bs, sampling=sampling, tail=tail)
            name = f"{arm}@{axis}={value:g}"
            final, _, log = _train_and_score(cfg, name, algo, inner, train_family, eval_family, spec, arm, iters, arm_step)
            rows.append([axis, float(value), arm, final.mean, final.stderr])
            summary[name] = {"accuracy": final.mean, "stderr": final.stderr}
            logs += log
    art.files.append(write_csv(out / "train_log.csv", LOG_HEADER, logs))
    art.files.append(write_csv(out / "study_overlap.csv", ["axis", "value", "arm", "accuracy", "stderr"], rows))
    art.files.append(write_json(out / "eval_summary.json", summary))
    if svg:
        series = {}
        for _, value, arm, acc, _ in rows:
            xs, ys = series.setdefault(arm, ([], []))
            xs.append(value)
            ys.append(acc)
        art.files.append(svg_line_chart(out / "overlap.svg", series, f"final accuracy vs {axis}", axis, "accuracy"))
    art.summary = summary
    return art


# --- analysis ----------------------------------------------------------------

def cmd_taylor_check(cfg: Config, out: Path, paper_scale: bool = False, svg: bool = False) -> RunArtifact:
    seed = cfg["experiment"]["seed"]
    t, s = cfg["task"], cfg["study"]
    if t["family"] == "sine":
        spec = MlpSpec((1, *t["hidden"], 1))
        sampler = TaskBatches(SineFamily(spec, n_points=t["points"]), t["batch_size"])
        phi = mlp_init(spec, stream(seed, "init"))
    else:
        sampler = TaskBatches(QuadraticFamily(dim=t["quadratic_dim"], n_examples=t["points"]), t["batch_size"])
        phi = np.zeros(t["quadratic_dim"])
    art = RunArtifact(out)
    coef_rows = []
    for k in s["ks"]:
        for algo, (cg, ci) in coefficient_table(k).items():
            coef_rows.append([k, algo, str(cg), str(ci)])
    art.files.append(write_csv(out / "study_coefficients.csv", ["k", "algorithm", "c_avg_grad", "c_avg_grad_inner"], coef_rows))

    summary = {}
    for k in s["ks"]:
        for algo in s["algorithms"]:
            study = residual_study(phi, sampler, algo, k, s["alphas"], s["n_samples"], stream(seed, "taylor", k))
            rows = [[p.alpha, p.residual_norm, p.stderr, p.n, p.flag] for p in study.points]
            rows.append(["slope", study.slope, study.slope_stderr, s["n_samples"], study.flag])
            art.files.append(write_csv(out / f"study_taylor_{algo}_k{k}.csv", ["alpha", "residual_norm", "stderr", "n", "flag"], rows))
            if algo in s["check"]:
                ok = study.flag == "exact" or abs(study.slope - s["slope_target"]) <= s["slope_tolerance"]
            else:
                ok = True
            summary[f"{algo}_k{k}"] = {"slope": study.slope, "slope_stderr": study.slope_stderr, "flag": study.flag, "checked": algo in s["check"], "pass": bool(ok)}
            art.passed &= bool(ok)
            if svg:
                good = [p for p in study.points if np.isfinite(p.residual_norm) and p.residual_norm > 0]
                if good:
                    svg_line_chart(
                        out / f"taylor_{algo}_k{k}.svg",
                        {algo: (np.log10([p.alpha for p in good]), np.log10([p.residual_norm for p in good]))},
                        f"{algo} k={k} remainder", "log10 alpha", "log10 residual",
                    )
    art.files.append(write_json(out / "eval_summary.json", summary))
    art.summary = summary
    return art


def manifold_tasks(cfg: Config, seed: int):
    m = cfg["manifold"]
    if m["scenario"] == "lines":
        return [AffineManifoldTask([[0.0, 1.0]], [0.0]), AffineManifoldTask([[1.0, 0.0]], [1.0])]
    root = stream(seed, "manifold")
    return [AffineManifoldTask.random(m["dim"], m["codim"], root.child(i)) for i in range(m["n_manifolds"])]


def cmd_manifold_demo(cfg: Config, out: Path, paper_scale: bool = False, svg: bool = False) -> RunArtifact:
    seed, m = cfg["experiment"]["seed"], cfg["manifold"]
    tasks = manifold_tasks(cfg, seed)
    dim = tasks[0].dim
    phi0 = stream(seed, "phi0").generator().normal(size=dim)
    oracle = manifold_fixed_point_oracle(tasks)
    trace = manifold_sgd_iterate(
        phi0, tasks, m["eps"], m["iterations"], order=m["order"], anneal=m["anneal"],
        rng=stream(seed, "order"), record_every=m["record_every"],
    )
    steps = [min(j * m["record_every"], m["iterations"]) for j in range(len(trace))]
    dist = np.linalg.norm(trace - oracle.point, axis=1)
    art = RunArtifact(out)
    rows = [[it, *map(float, phi), float(d)] for it, phi, d in zip(steps, trace, dist)]
    art.files.append(write_csv(out / "study_manifold_trace.csv", ["iter", *[f"phi{i}" for i in range(dim)], "distance"], rows))
    final = float(dist[-1])
    art.passed = final <= m["tolerance"]
    art.summary = {
        "oracle": oracle.point.tolist(),
        "oracle_minimal_norm": oracle.minimal_norm,
        "final": trace[-1].tolist(),
        "final_distance": final,
        "converged": art.passed,
        "anneal": m["anneal"],
    }
    art.files.append(write_json(out / "eval_summary.json", art.summary))
    if svg:
        good = dist > 0
        art.files.append(svg_line_chart(
            out / "manifold_distance.svg", {"distance": (np.array(steps)[good], np.log10(dist[good]))},
            "distance to fixed point", "iteration", "log10 distance",
        ))
    return art


COMMANDS: dict[str, Callable[..., RunArtifact]] = {
    "sine-demo": cmd_sine_demo,
    "fewshot": cmd_fewshot,
    "combo-sweep": cmd_combo_sweep,
    "overlap-sweep": cmd_overlap_sweep,
    "taylor-check": cmd_taylor_check,
    "manifold-demo": cmd_manifold_demo,
}
assert set(COMMANDS) == set(DEFAULTS)

# subcommands whose internal checks decide the exit code
_CHECKED = {"taylor-check", "manifold-demo"}


def run(command: str, config_path=None, out=".", seed=None, paper_scale=False, svg=False, workers=None, text=None) -> RunArtifact:
    cfg = load_config(command, config_path, text)
    if seed is not None:
        cfg.set("experiment.seed", int(seed))
    if workers is not None:
        cfg.set("experiment.workers", int(workers))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved")
    art = COMMANDS[command](cfg, out, paper_scale, svg)
    art.files.insert(0, out / "config.resolved")
    return art


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reptile", description="Meta-learning experiments with Reptile, FOMAML and MAML.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="sectioned key=value file overriding the defaults")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--paper-scale", action="store_true", help="use the long iteration counts")
        s.add_argument("--svg", action="store_true", help="also render SVG charts")
        s.add_argument("--workers", type=int, help="threads for meta-batch tasks")
    d = sub.add_parser("defaults", help="print the default config of a subcommand")
    d.add_argument("name", choices=sorted(COMMANDS))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "defaults":
            print(load_config(args.name).to_text(), end="")
            return EXIT_OK
        art = run(args.command, args.config, args.out, args.seed, args.paper_scale, args.svg, args.workers)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    for f in art.files:
        print(f"wrote {f}")
    if args.command in _CHECKED:
        print("check passed" if art.passed else "check FAILED")
        if not art.passed:
            return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``jointtask <command> [options]``.

Every config key is also a flag (``max_iters`` -> ``--max-iters``); flags win
over ``--config``. The default output root comes from ``JOINTTASK_OUT``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import random
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis as A
from . import config as C
from . import data as D
from . import sweep as S
from .errors import JointTaskError, RunDirExists
from .perm import build_perm_dataset
from .train import Mixture, load_run, train_mixture, write_run

ENV_OUT = "JOINTTASK_OUT"
ALIASES = {"modulus": ["--mod"], "out_dir": ["--out"]}


def _out_root() -> str:
    return os.environ.get(ENV_OUT, "runs")


def _add_config_flags(p: argparse.ArgumentParser, sections: Sequence[str]):
    p.add_argument("--config", help="experiment config file")
    seen = set()
    for section in sections:
        for f in fields(C.SECTIONS[section]):
            if f.name in seen:
                continue
            seen.add(f.name)
            names = ["--" + f.name.replace("_", "-")] + ALIASES.get(f.name, [])
            p.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar="V",
                           help=f"[{section}] {f.name}")


def _experiment(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if "out_dir" not in overrides and not args.config:
        overrides["out_dir"] = _out_root()
    return cfg.with_overrides(**overrides)


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise RunDirExists(f"{path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_row(row: dict):
    print(json.dumps(row), flush=True)


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _experiment(args)
    mix = cfg.task
    spec = D.TaskSpec(tuple(mix.ops), mix.modulus, mix.shuffle_seed, mix.max_depth, mix.max_args, mix.cot)
    out = _fresh_dir(Path(cfg.experiment.out_dir))
    split = D.build_dataset(spec, args.seed, mix.count)
    D.write_dataset(out, split, D.spec_meta(spec, args.seed))
    print(f"wrote {len(split.train)} train / {len(split.test)} test lines to {out}")
    return 0


def cmd_perm_gen(args) -> int:
    cfg = _experiment(args)
    mix = cfg.task
    out = _fresh_dir(Path(cfg.experiment.out_dir))
    split = build_perm_dataset(mix.ops, args.seed, mix.count or 50_000, max_depth=mix.max_depth,
                               max_args=mix.max_args, cot=mix.cot)
    meta = {"family": "perm", "ops": list(mix.ops), "seed": args.seed, "max_depth": mix.max_depth,
            "max_args": mix.max_args, "cot": mix.cot}
    D.write_dataset(out, split, meta)
    print(f"wrote {len(split.train)} train / {len(split.test)} test lines to {out}")
    return 0


def _run_one(cfg: C.ExperimentConfig, schedule=None) -> int:
    out = Path(cfg.experiment.out_dir)
    if out.exists() and any(out.iterdir()):
        raise RunDirExists(f"{out} already exists and is not empty")
    rec = train_mixture(cfg.task, cfg.model.n_embed, cfg.train, schedule=schedule, log=_print_row,
                        **cfg.model.kwargs())
    write_run(rec, out)
    C.save(cfg, out / "experiment.conf")
    print(json.dumps({"accuracy": rec.accuracy, "params": rec.param_count, "steps": rec.steps}))
    return 0


def cmd_train(args) -> int:
    return _run_one(_experiment(args))


def cmd_curriculum(args) -> int:
    cfg = _experiment(args)
    sched = cfg.curriculum
    if sched is None:
        raise JointTaskError("curriculum needs --phase-a/--phase-b or a [curriculum] section")
    ops = tuple(dict.fromkeys(sched.phase_a + sched.phase_b))
    cfg = replace(cfg, task=replace(cfg.task, ops=ops))
    return _run_one(cfg, schedule=sched)


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    out = Path(cfg.experiment.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mixes = [cfg.task] + [replace(cfg.task, ops=tuple(m.split("+"))) for m in args.mix or []]
    if args.mix and not args.keep_base:
        mixes = mixes[1:]
    rows = S.run_grid(mixes, cfg.experiment.embed_dims, cfg.experiment.seeds, cfg.train,
                      manifest=out / "sweep_manifest.csv", jobs=cfg.experiment.jobs, run_root=out / "runs",
                      model_kwargs=cfg.model.kwargs(), log=_print_row)
    if not (out / "experiment.conf").exists():
        C.save(cfg, out / "experiment.conf")
    curves = S.fit_manifest(rows, cfg.experiment.pooled_fit)
    S.write_transitions(curves, out / "transitions.csv")
    for c in curves:
        print(c.legend())
    return 0


def cmd_fit(args) -> int:
    rows = S.read_manifest(args.manifest)
    mixes = [args.mix] if args.mix else list(dict.fromkeys(r["mix"] for r in rows))
    curves = []
    for mix in mixes:
        tasks = args.task or sorted({c[4:] for r in rows if r["mix"] == mix for c in r
                                     if c.startswith("acc_") and r.get(c) not in ("", None)})
        for task in tasks:
            curves.append(S.transition_curve(rows, mix, task, pooled=args.pooled))
    out = Path(args.out) if args.out else Path(args.manifest).with_name("transitions.csv")
    S.write_transitions(curves, out)
    for c in curves:
        print(c.legend())
    return 0


def _read_transitions(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [r for r in csv.DictReader(fh)]


def ratio_table(transitions: Sequence[dict]) -> list:
    """Joint-vs-pure ratio for every (mix, task) whose pure single-task mix was also fitted."""
    fitted = {(r["mix"], r["task"]): float(r["p_star"]) for r in transitions if r.get("p_star")}
    out = []
    for (mix, task), p_joint in sorted(fitted.items()):
        suffix = mix.rsplit("_", 1)[1]
        pure = f"{task}_{suffix}"
        if mix == pure or (pure, task) not in fitted:
            continue
        p_pure = fitted[(pure, task)]
        out.append({"task": task, "pure": pure, "joint": mix, "p_pure": p_pure, "p_joint": p_joint,
                    "ratio": p_pure / p_joint})
    return out


def cmd_report(args) -> int:
    table = ratio_table(_read_transitions(args.transitions))
    out = Path(args.out) if args.out else Path(args.transitions).with_name("ratios.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["task", "pure", "joint", "p_pure", "p_joint", "ratio"])
        w.writeheader()
        w.writerows(table)
    for r in table:
        print(f"{r['task']}: {r['pure']} -> {r['joint']}  ratio {r['ratio']:.3f}")
    return 0


def cmd_analyze(args) -> int:
    runs = [load_run(p) for p in args.runs]
    out = _fresh_dir(Path(args.out))
    sim = A.average_sims(runs, args.threshold, args.task)
    n_values = runs[0].vocab.n_values
    pca = A.pca_numbers(sim, n_values, k=min(args.k, n_values))
    np.savetxt(out / "similarity.csv", sim.matrix, delimiter=",", fmt="%.10g", header=",".join(sim.tokens))
    mix_name = ",".join(sorted({r.summary.get("mixture", "") for r in runs}))
    with open(out / "pca.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "value"] + [f"PC{j + 1}" for j in range(pca.coords.shape[1])])
        for value, (tok, row) in enumerate(zip(sim.tokens[:n_values], pca.coords)):
            w.writerow([tok, value] + [f"{v:.10g}" for v in row])
    with open(out / "explained.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "eigenvalue"])
        w.writerows([f"PC{j + 1}", f"{v:.10g}"] for j, v in enumerate(pca.explained))
    divisors = [int(d) for d in args.divisors.split(",")] if args.divisors else A.candidate_divisors(n_values)
    with open(out / "separation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n_pc = pca.coords.shape[1]
        w.writerow(["mix", "n", "d"] + [f"score_PC{j + 1}" for j in range(n_pc)] + ["avg", "null_mean"])
        for d in divisors:
            rep = A.separation_score(pca.coords, n_values, d, n_pc)
            null = A.null_separation(n_values, d, args.null_trials, seed=0, n_pcs=n_pc).mean()
            w.writerow([mix_name, n_values, d] + [f"{s:.10g}" for s in rep.scores]
                       + [f"{rep.average:.10g}", f"{null:.10g}"])
            print(f"divisor {d}: separation {rep.average:.3f} (null {null:.3f})")
    if args.compare:
        a, b = load_run(args.compare[0]), load_run(args.compare[1])
        # lines from the tasks both models know
        shared = tuple(op for op in a.mixture.ops if op in b.mixture.ops)
        if not shared:
            raise JointTaskError("compared runs share no task")
        mix = replace(a.mixture, ops=shared)
        datasets, vocab = mix.build()
        rng = random.Random(0)
        lines = [line for split in datasets.values() for line in split.test]
        lines = rng.sample(lines, min(args.lines, len(lines)))
        res = A.compare_norm_ratios(a.load_model(), b.load_model(), lines, a.vocab, b.vocab)
        with open(out / "normratio.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "mean_a", "mean_b", "std_a", "std_b", "cohens_d", "ks"])
            for name, st in res.items():
                w.writerow([name, st.mean_a, st.mean_b, st.std_a, st.std_b, st.cohens_d, st.ks])
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointtask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate an arithmetic dataset")
    _add_config_flags(p, ["task", "experiment"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("perm-gen", help="generate a permutation-group dataset")
    _add_config_flags(p, ["task", "experiment"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perm_gen, cfg_family="perm")

    for name, func, help_ in (("train", cmd_train, "train one model"),
                              ("curriculum", cmd_curriculum, "train with a task curriculum")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p, ["task", "model", "train", "curriculum", "experiment"])
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="grid over sizes and seeds, then fit transitions")
    _add_config_flags(p, ["task", "model", "train", "experiment"])
    p.add_argument("--mix", action="append", help="extra mixture such as add+prod (repeatable)")
    p.add_argument("--keep-base", action="store_true", help="also sweep the --ops mixture when --mix is given")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="fit logistic curves to an existing manifest")
    p.add_argument("manifest")
    p.add_argument("--mix")
    p.add_argument("--task", action="append")
    p.add_argument("--pooled", action="store_true", help="fit every seed point instead of seed means")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="joint-vs-pure transition ratios")
    p.add_argument("transitions")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("analyze", help="similarity, PCA, separation and norm-ratio tables")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--task")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--divisors")
    p.add_argument("--null-trials", type=int, default=200)
    p.add_argument("--compare", nargs=2, metavar=("RUN_A", "RUN_B"))
    p.add_argument("--lines", type=int, default=200)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cfg_family", None) == "perm" and args.command == "perm-gen" and args.cfg_ops is None:
        args.cfg_ops = "OP"
    try:
        return args.func(args)
    except JointTaskError as exc:
        name = type(exc).__name__
        msg = str(exc)
        print(f"error: {msg if msg.startswith(name) else f'{name}: {msg}'}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

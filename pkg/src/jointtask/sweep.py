"""Size sweeps, logistic transition fits and joint-vs-pure ratios."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateCurve, InsufficientPoints
from .train import Mixture, TrainConfig, train_mixture, write_run

LN4 = math.log(4.0)
BASE_COLUMNS = ["key", "mix", "family", "modulus", "n_embed", "params", "seed", "steps",
                "stopped_early", "wall", "status", "loss"]


# -- logistic fit -----------------------------------------------------------

@dataclass
class LogisticFit:
    L: float
    k: float
    x0: float
    sse: float
    history: list = field(default_factory=list)  # objective after each accepted refinement step

    @property
    def p_star(self) -> float:
        """Parameter count where the fitted curve reaches 80% of its asymptote.

        A flat fit (k underflowed to 0) never gets there, so p* is infinite.
        """
        if self.k <= 0:
            return math.inf
        try:
            return math.exp(self.x0 + LN4 / self.k)
        except OverflowError:
            return math.inf

    def predict(self, params) -> np.ndarray:
        x = np.log(np.asarray(params, dtype=np.float64))
        return self.L / (1.0 + np.exp(-self.k * (x - self.x0)))


@dataclass
class TransitionCurve:
    points: list  # (param_count, accuracy, seed)
    fit: Optional[LogisticFit] = None
    mix: str = ""
    task: str = ""

    @property
    def p_star(self) -> Optional[float]:
        return self.fit.p_star if self.fit is not None else None

    @property
    def extrapolated(self) -> bool:
        """p* lies outside the sampled parameter counts."""
        if self.fit is None or not self.points:
            return False
        sizes = [float(pt[0]) for pt in self.points]
        return not min(sizes) <= self.p_star <= max(sizes)

    def legend(self) -> str:
        if self.fit is None:
            return f"{self.mix}/{self.task}: no fit"
        note = " (extrapolated beyond the sampled sizes)" if self.extrapolated else ""
        return f"{self.mix}/{self.task}: 80% accuracy transition point p* = {self.p_star:,.0f} params{note}"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def aggregate_points(points: Sequence, pooled: bool = False) -> tuple:
    """(x = ln params, accuracy) arrays; seed-mean per size unless ``pooled``."""
    by_p = defaultdict(list)
    for pt in points:
        by_p[float(pt[0])].append(float(pt[1]))
    if len(by_p) < 4:
        raise InsufficientPoints(f"InsufficientPoints: need >= 4 distinct sizes, got {len(by_p)}")
    sizes = sorted(by_p)
    if pooled:
        x = np.array([math.log(p) for p in sizes for _ in by_p[p]])
        y = np.array([a for p in sizes for a in by_p[p]])
    else:
        x = np.log(np.array(sizes))
        y = np.array([np.mean(by_p[p]) for p in sizes])
    if np.ptp(y) == 0:
        raise DegenerateCurve("DegenerateCurve: all accuracies are equal")
    return x, y


def _refine(x: np.ndarray, y: np.ndarray, start: tuple, max_iter: int) -> tuple:
    """Levenberg-Marquardt on (L, ln k, x0) from a grid cell; only decreasing steps are taken."""

    def residual(theta):
        L, logk, x0 = theta
        return L * _sigmoid(np.exp(logk) * (x - x0)) - y

    def jacobian(theta):
        L, logk, x0 = theta
        k = np.exp(logk)
        s = _sigmoid(k * (x - x0))
        ds = s * (1.0 - s)
        return np.column_stack([s, L * ds * k * (x - x0), -L * ds * k])

    theta = np.array([start[1], math.log(start[2]), start[3]])
    r = residual(theta)
    sse = float(r @ r)
    history = [sse]
    lam = 1e-3
    for _ in range(max_iter):
        J = jacobian(theta)
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = theta + step
            cand[0] = min(max(cand[0], 1e-9), 1.0)
            rc = residual(cand)
            sc = float(rc @ rc)
            if sc < sse:
                improved = True
                gain = sse - sc
                theta, r, sse = cand, rc, sc
                history.append(sse)
                lam = max(lam / 3, 1e-12)
                break
            lam *= 4
        if not improved or gain <= 1e-18 * max(1.0, sse) or sse < 1e-28:
            break
    return theta, sse, history


def fit_logistic(points: Sequence, pooled: bool = False, max_iter: int = 500) -> LogisticFit:
    """Least-squares a(p) = L / (1 + exp(-k (ln p - x0))) with 0 < L <= 1, k > 0.

    A coarse grid over (k, x0), with L solved in closed form per cell, seeds
    Levenberg-Marquardt refinements that only accept steps lowering the error.
    """
    x, y = aggregate_points(points, pooled)
    span = max(x.max() - x.min(), 1e-9)
    ks = np.geomspace(0.05, 200.0 / span, 90)
    x0s = np.linspace(x.min() - 0.5 * span, x.max() + 0.5 * span, 161)
    per_k = []  # best (sse, L, k, x0) for each grid k
    for k in ks:
        s = _sigmoid(k * (x[None, :] - x0s[:, None]))  # x0 x points
        denom = np.maximum((s * s).sum(axis=1), 1e-300)
        Ls = np.clip((s @ y) / denom, 1e-9, 1.0)
        sse = ((Ls[:, None] * s - y[None, :]) ** 2).sum(axis=1)
        i = int(np.argmin(sse))
        per_k.append((float(sse[i]), float(Ls[i]), float(k), float(x0s[i])))
    # x0 is coarse on the grid, so a steep curve can rank below a near-step fit;
    # refine from several steepness levels and keep the best local optimum
    starts = [min(per_k)] + per_k[::9]
    theta, sse, history = min((_refine(x, y, st, max_iter) for st in starts), key=lambda res: res[1])
    return LogisticFit(float(theta[0]), float(math.exp(theta[1])), float(theta[2]), sse, history)


def transition_ratio(pure: TransitionCurve, joint: TransitionCurve) -> float:
    """p*_pure / p*_joint; above 1 means joint training lowers the transition."""
    if pure.fit is None or joint.fit is None:
        raise DegenerateCurve("both curves need a fit")
    if math.isinf(pure.p_star) and math.isinf(joint.p_star):
        raise DegenerateCurve("neither curve has a finite transition")
    return pure.p_star / joint.p_star


# -- manifests --------------------------------------------------------------

class Manifest:
    """CSV of sweep cells. Rows are only ever added; new task columns widen the header."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.rows: list = []
        self.columns = list(BASE_COLUMNS)
        if self.path is not None and self.path.exists():
            with open(self.path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                self.columns = list(reader.fieldnames or BASE_COLUMNS)
                self.rows = [dict(r) for r in reader]

    def find(self, key: str) -> Optional[dict]:
        for r in self.rows:
            if r.get("key") == key and r.get("status") == "ok":
                return r
        return None

    def append(self, row: dict):
        row = {k: ("" if v is None else v) for k, v in row.items()}
        new_cols = [c for c in row if c not in self.columns]
        self.rows.append(row)
        if self.path is None:
            self.columns += new_cols
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if new_cols or not self.path.exists():
            self.columns += new_cols
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=self.columns, restval="")
                w.writeheader()
                w.writerows(self.rows)
        else:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, fieldnames=self.columns, restval="").writerow(row)


def cell_key(mix: Mixture, n_embed: int, seed: int, cfg: TrainConfig, model_kwargs: dict) -> str:
    blob = json.dumps({"mix": asdict(mix), "n_embed": n_embed, "seed": seed,
                       "train": asdict(replace(cfg, seed=seed)), "model": model_kwargs},
                      sort_keys=True, default=str)
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Cell:
    mix: Mixture
    n_embed: int
    seed: int
    cfg: TrainConfig
    model_kwargs: tuple = ()
    run_root: Optional[str] = None


def run_cell(cell: Cell) -> dict:
    import torch

    torch.set_num_threads(1)
    kwargs = dict(cell.model_kwargs)
    key = cell_key(cell.mix, cell.n_embed, cell.seed, cell.cfg, kwargs)
    row = {"key": key, "mix": cell.mix.name, "family": cell.mix.family, "modulus": cell.mix.modulus,
           "n_embed": cell.n_embed, "seed": cell.seed}
    try:
        rec = train_mixture(cell.mix, cell.n_embed, replace(cell.cfg, seed=cell.seed), **kwargs)
    except Exception as exc:  # recorded as a missing cell, never imputed
        row["status"] = f"error: {type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc(limit=3).replace("\n", " | ")
        return row
    row.update(params=rec.param_count, steps=rec.steps, stopped_early=int(rec.stopped_early),
               wall=round(rec.wall_clock, 2), status="ok",
               loss=float(np.mean(list(rec.eval_loss.values()))))
    for task, acc in rec.accuracy.items():
        row[f"acc_{task}"] = acc
    if cell.run_root is not None:
        run_dir = Path(cell.run_root) / cell.mix.name / f"e{cell.n_embed}_s{cell.seed}_{key}"
        write_run(rec, run_dir)
        row["run_dir"] = str(run_dir)
    return row


def run_grid(mixtures: Sequence[Mixture], embed_dims: Sequence[int], seeds: Sequence[int],
             train_config: TrainConfig, manifest=None, jobs: int = 1, run_root=None,
             model_kwargs: Optional[dict] = None, log=None) -> list:
    """Train every (mixture, n_embed, seed) cell; returns the manifest rows of this grid.

    Cells already present (status ok, same configuration key) in the manifest
    are reused instead of retrained, so an interrupted sweep resumes.
    """
    if not mixtures or not embed_dims or not seeds:
        raise ValueError("grids must be nonempty")
    man = manifest if isinstance(manifest, Manifest) else Manifest(manifest)
    model_kwargs = dict(model_kwargs or {})
    cells, rows = [], {}
    for mix in mixtures:
        for d in embed_dims:
            for s in seeds:
                key = cell_key(mix, d, s, train_config, model_kwargs)
                hit = man.find(key)
                if hit is not None:
                    rows[key] = hit
                else:
                    cells.append(Cell(mix, d, s, train_config, tuple(sorted(model_kwargs.items())),
                                      None if run_root is None else str(run_root)))
    order = [cell_key(m, d, s, train_config, model_kwargs) for m in mixtures for d in embed_dims for s in seeds]

    def done(row):
        man.append(row)
        rows[row["key"]] = row
        if log is not None:
            log(row)

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(run_cell, cells):
                done(row)
    else:
        for cell in cells:
            done(run_cell(cell))
    return [rows[k] for k in order]


# -- curves from manifests --------------------------------------------------

def _num(v) -> Optional[float]:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return None
    return None if math.isnan(f) else f


def curve_points(rows: Sequence[dict], mix: str, task: str) -> list:
    pts = []
    for r in rows:
        if r.get("mix") != mix or r.get("status") != "ok":
            continue
        acc, params = _num(r.get(f"acc_{task}")), _num(r.get("params"))
        if acc is None or params is None:
            continue
        pts.append((params, acc, int(float(r.get("seed", 0)))))
    return pts


def transition_curve(rows: Sequence[dict], mix: str, task: str, pooled: bool = False) -> TransitionCurve:
    pts = curve_points(rows, mix, task)
    return TransitionCurve(pts, fit_logistic(pts, pooled), mix, task)


def fit_manifest(rows: Sequence[dict], pooled: bool = False) -> list:
    """One curve per (mix, task) found in the rows; failed fits keep ``fit=None``."""
    pairs = []
    for r in rows:
        for col in r:
            if col.startswith("acc_") and r.get(col) not in ("", None):
                pair = (r["mix"], col[4:])
                if pair not in pairs:
                    pairs.append(pair)
    curves = []
    for mix, task in pairs:
        pts = curve_points(rows, mix, task)
        try:
            fit = fit_logistic(pts, pooled)
            curves.append(TransitionCurve(pts, fit, mix, task))
        except (InsufficientPoints, DegenerateCurve) as exc:
            c = TransitionCurve(pts, None, mix, task)
            c.error = type(exc).__name__
            curves.append(c)
    return curves


def write_transitions(curves: Sequence[TransitionCurve], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mix", "task", "L", "k", "x0", "p_star", "n_points", "status"])
        for c in curves:
            if c.fit is None:
                w.writerow([c.mix, c.task, "", "", "", "", len(c.points), getattr(c, "error", "nofit")])
            else:
                f = c.fit
                w.writerow([c.mix, c.task, f"{f.L:.10g}", f"{f.k:.10g}", f"{f.x0:.10g}", f"{f.p_star:.10g}",
                            len(c.points), "extrapolated" if c.extrapolated else "ok"])
    return path


def read_manifest(path) -> list:
    return Manifest(path).rows


# -- complexity grid --------------------------------------------------------

@dataclass
class ComplexityTable:
    p_star: dict  # (args, depth) -> transition point or None
    by_sum: dict  # args + depth -> mean transition point

    def rows(self) -> list:
        return [{"args": a, "depth": d, "p_star": p} for (a, d), p in sorted(self.p_star.items())]


def complexity_grid(args_list: Sequence[int], depths: Sequence[int], embed_dims: Sequence[int],
                    seeds: Sequence[int], train_config: TrainConfig, ops=("max", "med", "add"),
                    modulus: int = 10, manifest=None, count: Optional[int] = None, **kwargs) -> ComplexityTable:
    """Transition point per (operand count, nesting depth) on mixed-operation expressions."""
    table = {}
    for a in args_list:
        for dpt in depths:
            mix = Mixture(tuple(ops), modulus=modulus, max_args=a, max_depth=dpt, mixed=True, count=count)
            rows = run_grid([mix], embed_dims, seeds, train_config, manifest=manifest, **kwargs)
            try:
                table[(a, dpt)] = transition_curve(rows, mix.name, mix.tasks[0]).p_star
            except (InsufficientPoints, DegenerateCurve):
                table[(a, dpt)] = None
    sums = defaultdict(list)
    for (a, dpt), p in table.items():
        if p is not None:
            sums[a + dpt].append(p)
    return ComplexityTable(table, {s: float(np.mean(v)) for s, v in sorted(sums.items())})


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))

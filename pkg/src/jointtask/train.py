"""Training loop, joint-task mixing, curriculum ramps and greedy evaluation."""

from __future__ import annotations

import csv
import json
import math
import random
import time
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .errors import EmptyDataset, EmptyEvalSet, RunDirExists, VocabMismatch
from .model import ModelConfig, TinyTransformer, count_params, save_checkpoint, save_embedding
from .ops import OpKind
from .perm import GroupOp, build_perm_dataset, perm_vocab


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_iters: int = 20000
    lr: float = 1e-3
    min_lr: float = 1e-4
    eval_interval: int = 100
    delta_min: float = 2.5e-4
    patience: int = 10
    warmup: int = 2000  # no early stop before this many iterations
    early_stop: bool = True
    seed: int = 0
    eval_sample: int = 1000  # test lines per task for the final evaluation
    loss_sample: int = 128  # test lines per task for periodic teacher-forced eval loss
    acc_interval: int = 0  # 0 = accuracy only at the end
    acc_sample: int = 200
    batching: str = "pad"  # "pad": one line per row; "pack": lines concatenated to the context

    def __post_init__(self):
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if self.patience < 1 or self.batch_size < 1 or self.max_iters < 1 or self.eval_interval < 1:
            raise ValueError("patience, batch_size, max_iters and eval_interval must be >= 1")
        if self.batching not in ("pad", "pack"):
            raise ValueError(f"unknown batching {self.batching!r}")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Per-example draw from phase B with probability mix_ratio(step), else from phase A."""

    phase_a: tuple
    phase_b: tuple
    ramp_start: int = 10_000
    ramp_end: int = 20_000

    def __post_init__(self):
        if not self.phase_a or not self.phase_b:
            raise ValueError("both curriculum phases need at least one task")
        if not self.ramp_start < self.ramp_end:
            raise ValueError("ramp_start must be < ramp_end")

    def mix_ratio(self, step: int) -> float:
        if step < self.ramp_start:
            return 0.0
        if step >= self.ramp_end:
            return 1.0
        return (step - self.ramp_start) / (self.ramp_end - self.ramp_start)


def lr_at(it: int, cfg: TrainConfig) -> float:
    frac = min(it / max(cfg.max_iters, 1), 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


# -- task mixtures ----------------------------------------------------------

@dataclass(frozen=True)
class Mixture:
    """A named set of tasks sharing one vocabulary.

    Each operation gets its own single-operation dataset (``mixed=False``), so
    per-task accuracy is measured on expressions of that operation alone.
    ``family`` is ``"arith"`` or ``"perm"``.
    """

    ops: tuple
    modulus: int = 36
    family: str = "arith"
    shuffle_seed: Optional[int] = None
    max_depth: int = 2
    max_args: int = 3
    cot: bool = True
    mixed: bool = False
    data_seed: int = 0
    count: Optional[int] = None  # lines per task before splitting; None = 5000 * modulus (50k for perm)

    def __post_init__(self):
        if self.family == "perm":
            ops = tuple(k.value for k in GroupOp if k in {GroupOp.parse(o) for o in self.ops})
        else:
            ops = tuple(k.value for k in OpKind if k in {OpKind.parse(o) for o in self.ops})
            if OpKind.SHUF_ADD.value in ops and self.shuffle_seed is None:
                object.__setattr__(self, "shuffle_seed", 0)
        if not ops:
            raise ValueError("a mixture needs at least one operation")
        object.__setattr__(self, "ops", ops)

    @property
    def name(self) -> str:
        suffix = "perm" if self.family == "perm" else str(self.modulus)
        return "+".join(self.ops) + f"_{suffix}"

    @property
    def tasks(self) -> tuple:
        return ("+".join(self.ops),) if self.mixed else self.ops

    def task_spec(self, ops) -> D.TaskSpec:
        return D.TaskSpec(tuple(ops), self.modulus,
                          self.shuffle_seed if OpKind.SHUF_ADD.value in ops else None,
                          self.max_depth, self.max_args, self.cot)

    def vocab(self) -> D.Vocab:
        if self.family == "perm":
            return perm_vocab([GroupOp(o) for o in self.ops])
        return D.Vocab.for_specs([self.task_spec(self.ops)])

    def build(self) -> tuple:
        """Return ({task: DatasetSplit}, vocab)."""
        return _build_mixture(self), self.vocab()


def _task_seed(data_seed: int, task: str) -> int:
    return data_seed * 1_000_003 + zlib.crc32(task.encode("utf-8"))


@lru_cache(maxsize=16)
def _build_mixture(mix: Mixture) -> dict:
    out = {}
    for task in mix.tasks:
        ops = task.split("+")
        seed = _task_seed(mix.data_seed, task)
        if mix.family == "perm":
            out[task] = build_perm_dataset(ops, seed, mix.count or 50_000, max_depth=mix.max_depth,
                                           max_args=mix.max_args, cot=mix.cot)
        else:
            out[task] = D.build_dataset(mix.task_spec(ops), seed, mix.count)
    return out


def parse_mixture(text: str, modulus: int = 20, **kwargs) -> Mixture:
    """``"add+prod"`` -> arithmetic mixture; ``"perm:OP+OP_TOP"`` -> permutation mixture."""
    text = text.strip()
    if text.startswith("perm:"):
        return Mixture(tuple(text[5:].split("+")), family="perm", **kwargs)
    return Mixture(tuple(text.split("+")), modulus=modulus, **kwargs)


# -- run record -------------------------------------------------------------

@dataclass
class RunRecord:
    model_config: ModelConfig
    train_config: TrainConfig
    tasks: tuple
    vocab_tokens: list
    history: list = field(default_factory=list)  # dicts: step, train_loss, eval_loss, acc_<task>
    accuracy: dict = field(default_factory=dict)
    eval_loss: dict = field(default_factory=dict)
    embedding: Optional[np.ndarray] = None
    param_count: int = 0
    wall_clock: float = 0.0
    steps: int = 0
    stopped_early: bool = False
    mixture: str = ""
    mixture_spec: dict = field(default_factory=dict)
    model: Optional[TinyTransformer] = field(default=None, repr=False, compare=False)

    def history_table(self) -> list:
        cols = ["step", "train_loss", "eval_loss"] + [f"acc_{t}" for t in self.tasks]
        return [{c: row.get(c, "") for c in cols} for row in self.history]


# -- batching ---------------------------------------------------------------

class _TokenBank:
    """Tokenized training lines of one task, right-padded into a matrix."""

    def __init__(self, lines: Sequence[str], vocab: D.Vocab, pad_id: int):
        seqs = [D.tokenize(line, vocab) for line in lines]
        self.lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        width = int(self.lengths.max())
        self.ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            self.ids[i, : len(s)] = s

    def __len__(self):
        return len(self.lengths)


class Batcher:
    def __init__(self, banks: Mapping[str, _TokenBank], cfg: TrainConfig, context: int,
                 schedule: Optional[CurriculumSchedule] = None):
        self.banks = dict(banks)
        self.names = list(self.banks)
        self.cfg = cfg
        self.context = context
        self.schedule = schedule
        self.rng = np.random.default_rng(cfg.seed)
        if schedule is not None:
            self.a_idx = np.array([self.names.index(t) for t in schedule.phase_a])
            self.b_idx = np.array([self.names.index(t) for t in schedule.phase_b])

    def draw_tasks(self, step: int, k: int) -> np.ndarray:
        if self.schedule is None:
            return self.rng.integers(0, len(self.names), size=k)
        lam = self.schedule.mix_ratio(step)
        use_b = self.rng.random(k) < lam
        a = self.a_idx[self.rng.integers(0, len(self.a_idx), size=k)]
        b = self.b_idx[self.rng.integers(0, len(self.b_idx), size=k)]
        return np.where(use_b, b, a)

    def draw_lines(self, step: int, k: int) -> tuple:
        tasks = self.draw_tasks(step, k)
        rows, lengths = [], []
        for t in tasks:
            bank = self.banks[self.names[t]]
            i = self.rng.integers(0, len(bank))
            rows.append(bank.ids[i])
            lengths.append(bank.lengths[i])
        return tasks, rows, np.array(lengths)

    def batch(self, step: int) -> tuple:
        if self.cfg.batching == "pack":
            return self._packed(step)
        _, rows, lengths = self.draw_lines(step, self.cfg.batch_size)
        width = min(int(lengths.max()), self.context + 1)
        ids = np.stack([r[:width] if len(r) >= width else np.pad(r, (0, width - len(r))) for r in rows])
        inputs = torch.from_numpy(ids[:, :-1].copy())
        targets = torch.from_numpy(ids[:, 1:].copy())
        pos = np.arange(width - 1)[None, :]
        targets[torch.from_numpy(pos >= (lengths[:, None] - 1))] = -100
        return inputs, targets

    def _packed(self, step: int) -> tuple:
        rows = []
        for _ in range(self.cfg.batch_size):
            buf: list = []
            while len(buf) < self.context + 1:
                _, r, ln = self.draw_lines(step, 1)
                buf.extend(r[0][: ln[0]].tolist())
            rows.append(buf[: self.context + 1])
        ids = torch.tensor(rows, dtype=torch.long)
        return ids[:, :-1], ids[:, 1:].clone()


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    loss: float
    n: int
    malformed: int = 0


def _prompt_and_answer(units: list, cot: bool = True) -> Optional[tuple]:
    if "=" not in units:
        return None
    eq = units.index("=")
    if eq + 1 >= len(units):
        return None
    cut = units.index(">") if ">" in units[:eq] else eq
    return cut + 1, units[eq + 1]


@torch.no_grad()
def greedy_answers(model, prompts: Sequence[Sequence[int]], eq_id: int, eos_id: int,
                   context: int, chunk: int = 256) -> list:
    """Greedy decode each prompt; return the first generated token after the first '='.

    A row stops at <eos>, at the context limit, or once the answer token is known.
    Returns None for rows that never produced an answer.
    """
    answers: list = [None] * len(prompts)
    for start in range(0, len(prompts), chunk):
        seqs = [list(p) for p in prompts[start:start + chunk]]
        seen_eq = [False] * len(seqs)
        active = [i for i in range(len(seqs)) if len(seqs[i]) < context]
        while active:
            width = max(len(seqs[i]) for i in active)
            batch = torch.full((len(active), width), eos_id, dtype=torch.long)
            for r, i in enumerate(active):
                batch[r, : len(seqs[i])] = torch.as_tensor(seqs[i])
            logits = model(batch)
            last = torch.as_tensor([len(seqs[i]) - 1 for i in active])
            nxt = logits[torch.arange(len(active)), last].argmax(-1).tolist()
            still = []
            for i, tok in zip(active, nxt):
                seqs[i].append(tok)
                if seen_eq[i]:
                    answers[start + i] = tok
                    continue
                if tok == eq_id:
                    seen_eq[i] = True
                elif tok == eos_id:
                    continue
                if len(seqs[i]) < context:
                    still.append(i)
            active = still
    return answers


@torch.no_grad()
def continuation_loss(model, seqs: Sequence[Sequence[int]], prompt_lens: Sequence[int],
                      chunk: int = 256) -> float:
    """Token-weighted mean cross-entropy of each reference continuation."""
    total, count = 0.0, 0
    for start in range(0, len(seqs), chunk):
        part = seqs[start:start + chunk]
        plens = prompt_lens[start:start + chunk]
        width = max(len(s) for s in part)
        ids = torch.zeros((len(part), width), dtype=torch.long)
        targets = torch.full((len(part), width), -100, dtype=torch.long)
        for r, (s, p) in enumerate(zip(part, plens)):
            s = torch.as_tensor(s)
            ids[r, : len(s)] = s
            # position j predicts token j+1; score tokens from index p on
            targets[r, p - 1: len(s) - 1] = s[p:]
        logits = model(ids)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]).double(), targets.reshape(-1),
                               ignore_index=-100, reduction="sum")
        total += float(loss)
        count += int((targets != -100).sum())
    return total / max(count, 1)


def evaluate(model, lines: Sequence[str], vocab: D.Vocab, sample: int = 1000,
             rng: Optional[random.Random] = None, context: Optional[int] = None,
             with_loss: bool = True) -> EvalResult:
    """Greedy-decoding accuracy on the final answer plus continuation loss."""
    if not lines:
        raise EmptyEvalSet("no test lines to evaluate")
    context = context or model.config.context
    rng = rng or random.Random(0)
    chosen = list(lines) if len(lines) <= sample else rng.sample(list(lines), sample)
    prompts, answers, seqs, plens = [], [], [], []
    malformed = 0
    for line in chosen:
        units = D.split_units(line)
        pa = _prompt_and_answer(units)
        if pa is None or len(units) > context:
            malformed += 1
            continue
        ids = [vocab.id(u) for u in units]
        prompts.append(ids[: pa[0]])
        answers.append(vocab.id(pa[1]))
        seqs.append(ids)
        plens.append(pa[0])
    if not prompts:
        raise EmptyEvalSet("every sampled line was malformed")
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    got = greedy_answers(model, prompts, vocab.id("="), vocab.id(D.EOS), context)
    acc = sum(g == a for g, a in zip(got, answers)) / len(answers)
    loss = continuation_loss(model, seqs, plens) if with_loss else float("nan")
    if was_training:
        model.train()
    return EvalResult(acc, loss, len(answers), malformed)


# -- training ---------------------------------------------------------------

def _check_datasets(datasets: Mapping[str, D.DatasetSplit], vocab: D.Vocab):
    if not datasets:
        raise EmptyDataset("no datasets given")
    for name, split in datasets.items():
        if not split.train or not split.test:
            raise EmptyDataset(f"task {name!r} has an empty train or test set")
        for line in split.train[:50] + split.test[:50]:
            for u in D.split_units(line):
                if u not in vocab.stoi:
                    raise VocabMismatch(f"token {u!r} of task {name!r} is not in the shared vocabulary")


def train(model_config: ModelConfig, train_config: TrainConfig,
          datasets: Mapping[str, D.DatasetSplit], vocab: D.Vocab,
          schedule: Optional[CurriculumSchedule] = None,
          log=None, mixture: str = "") -> RunRecord:
    """Train one model and return its record (the trained model rides along as ``.model``)."""
    cfg = train_config
    _check_datasets(datasets, vocab)
    if model_config.vocab_size != len(vocab):
        raise VocabMismatch(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    if schedule is not None:
        missing = set(schedule.phase_a + schedule.phase_b) - set(datasets)
        if missing:
            raise EmptyDataset(f"curriculum tasks without data: {sorted(missing)}")
        if schedule.ramp_end > cfg.max_iters:
            raise ValueError("ramp_end must not exceed max_iters")
    torch.manual_seed(cfg.seed)
    t0 = time.perf_counter()
    eos = vocab.id(D.EOS)
    banks = {name: _TokenBank(split.train, vocab, eos) for name, split in datasets.items()}
    batcher = Batcher(banks, cfg, model_config.context, schedule)
    model = TinyTransformer(model_config, seed=cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    eval_rng = random.Random(cfg.seed + 7919)
    loss_sets = {}
    for name, split in datasets.items():
        chosen = split.test if len(split.test) <= cfg.loss_sample else eval_rng.sample(split.test, cfg.loss_sample)
        seqs, plens = [], []
        for line in chosen:
            units = D.split_units(line)
            pa = _prompt_and_answer(units)
            if pa is not None and len(units) <= model_config.context:
                seqs.append([vocab.id(u) for u in units])
                plens.append(pa[0])
        loss_sets[name] = (seqs, plens)

    rec = RunRecord(model_config, cfg, tuple(datasets), list(vocab.tokens),
                    param_count=count_params(model_config), mixture=mixture)
    window: list = []
    prev_loss = None
    calm = 0
    step = 0
    for step in range(1, cfg.max_iters + 1):
        for g in opt.param_groups:
            g["lr"] = lr_at(step - 1, cfg)
        inputs, targets = batcher.batch(step - 1)
        logits = model(inputs)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        window.append(loss.item())

        if step % cfg.eval_interval == 0 or step == cfg.max_iters:
            train_loss = float(np.mean(window))
            window.clear()
            model.eval()
            row = {"step": step, "train_loss": train_loss}
            row["eval_loss"] = float(np.mean([continuation_loss(model, *loss_sets[n]) for n in datasets]))
            if cfg.acc_interval and step % cfg.acc_interval == 0:
                for name, split in datasets.items():
                    res = evaluate(model, split.test, vocab, cfg.acc_sample, random.Random(cfg.seed),
                                   with_loss=False)
                    row[f"acc_{name}"] = res.accuracy
            model.train()
            rec.history.append(row)
            if log is not None:
                log(row)
            if prev_loss is not None and step >= cfg.warmup and abs(train_loss - prev_loss) < cfg.delta_min:
                calm += 1
            else:
                calm = 0
            prev_loss = train_loss
            if cfg.early_stop and calm >= cfg.patience:
                rec.stopped_early = True
                break

    model.eval()
    for name, split in datasets.items():
        res = evaluate(model, split.test, vocab, cfg.eval_sample, random.Random(cfg.seed + 1))
        rec.accuracy[name] = res.accuracy
        rec.eval_loss[name] = res.loss
    if rec.history:
        last = rec.history[-1]
        for name in datasets:
            last[f"acc_{name}"] = rec.accuracy[name]
    rec.steps = step
    rec.embedding = model.embedding()
    rec.wall_clock = time.perf_counter() - t0
    rec.model = model
    return rec


def train_mixture(mix: Mixture, n_embed: int, train_config: TrainConfig,
                  schedule: Optional[CurriculumSchedule] = None, log=None, **model_kwargs) -> RunRecord:
    datasets, vocab = mix.build()
    mcfg = ModelConfig(n_embed=n_embed, vocab_size=len(vocab), **model_kwargs)
    rec = train(mcfg, train_config, datasets, vocab, schedule, log=log, mixture=mix.name)
    rec.mixture_spec = asdict(mix)
    return rec


# -- persistence ------------------------------------------------------------

def _echo(obj) -> list:
    return [f"{k} = {v}" for k, v in asdict(obj).items()]


def write_run(rec: RunRecord, run_dir) -> Path:
    """Write config.txt, metrics.csv, summary.json, checkpoint.bin and embedding.txt."""
    out = Path(run_dir)
    if out.exists() and any(out.iterdir()):
        raise RunDirExists(f"run directory {out} already exists")
    out.mkdir(parents=True, exist_ok=True)
    lines = ["[run]", f"mixture = {rec.mixture}", f"tasks = {','.join(rec.tasks)}",
             "", "[model]"] + _echo(rec.model_config) + ["", "[train]"] + _echo(rec.train_config)
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    table = rec.history_table()
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        cols = ["step", "train_loss", "eval_loss"] + [f"acc_{t}" for t in rec.tasks]
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(table)
    summary = {
        "mixture": rec.mixture, "tasks": list(rec.tasks), "param_count": rec.param_count,
        "accuracy": rec.accuracy, "eval_loss": rec.eval_loss, "steps": rec.steps,
        "stopped_early": rec.stopped_early, "wall_clock": rec.wall_clock,
        "mixture_spec": {k: list(v) if isinstance(v, tuple) else v for k, v in rec.mixture_spec.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    if rec.model is not None:
        save_checkpoint(rec.model, out / "checkpoint.bin")
        save_embedding(rec.model, out / "embedding.txt", rec.vocab_tokens)
    elif rec.embedding is not None:
        np.savetxt(out / "embedding.txt", rec.embedding, fmt="%.8e",
                   header="tokens: " + " ".join(rec.vocab_tokens))
    return out


@dataclass
class LoadedRun:
    """A run directory read back from disk."""

    path: Path
    accuracy: dict
    embedding: np.ndarray
    vocab_tokens: list
    summary: dict

    @property
    def mixture(self) -> Optional[Mixture]:
        spec = self.summary.get("mixture_spec")
        if not spec:
            return None
        spec = dict(spec)
        spec["ops"] = tuple(spec["ops"])
        return Mixture(**spec)

    @property
    def vocab(self) -> D.Vocab:
        n_values = 0
        for tok in self.vocab_tokens:
            if tok.isdigit() or (tok[:1] == "g" and tok[1:].isdigit()):
                n_values += 1
            else:
                break
        return D.Vocab(tuple(self.vocab_tokens), n_values)

    def load_model(self) -> TinyTransformer:
        from .model import load_checkpoint

        model = load_checkpoint(self.path / "checkpoint.bin")
        model.eval()
        return model


def load_run(run_dir) -> LoadedRun:
    from .model import load_embedding

    path = Path(run_dir)
    summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
    emb, tokens = load_embedding(path / "embedding.txt")
    return LoadedRun(path, summary.get("accuracy", {}), emb, tokens or [], summary)

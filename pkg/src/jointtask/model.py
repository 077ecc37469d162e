"""Tiny GPT-style transformer: one block applied recurrently, or a deep stack.

Pre-norm residual blocks with GELU, learned absolute positions added once
before the first block, untied unembedding without bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SequenceTooLong, TokenOutOfRange

RECURRENT = "recurrent"
DEEP = "deep"


@dataclass(frozen=True)
class ModelConfig:
    n_embed: int
    vocab_size: int
    n_head: int = 1
    variant: str = RECURRENT
    n_steps: int = 4  # recurrence steps T (recurrent variant)
    n_layers: int = 1  # stacked blocks L (deep variant)
    context: int = 128
    ffn_mult: int = 4
    pos_every_step: bool = False

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.n_embed < 1 or self.context < 1:
            raise ValueError("n_embed and context must be positive")
        if self.n_head not in (1, 4) or self.n_embed % self.n_head:
            raise ValueError(f"n_head must be 1 or 4 and divide n_embed (got {self.n_head})")
        if self.variant not in (RECURRENT, DEEP):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_steps < 1 or self.n_layers < 1:
            raise ValueError("n_steps and n_layers must be >= 1")

    @property
    def n_blocks(self) -> int:
        return 1 if self.variant == RECURRENT else self.n_layers

    @property
    def n_applications(self) -> int:
        return self.n_steps if self.variant == RECURRENT else self.n_layers


def count_params(config: ModelConfig) -> int:
    d, v, c, h = config.n_embed, config.vocab_size, config.context, config.ffn_mult * config.n_embed
    block = 2 * (2 * d) + 4 * d * d + (d * h + h) + (h * d + d)
    return v * d + c * d + config.n_blocks * block + 2 * d + d * v


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.n_embed
        self.n_head = config.n_head
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, config.ffn_mult * d)
        self.ffn_out = nn.Linear(config.ffn_mult * d, d)

    def attention(self, h: torch.Tensor) -> torch.Tensor:
        B, L, d = h.shape
        hd = d // self.n_head
        q = self.q(h).view(B, L, self.n_head, hd).transpose(1, 2)
        k = self.k(h).view(B, L, self.n_head, hd).transpose(1, 2)
        v = self.v(h).view(B, L, self.n_head, hd).transpose(1, 2)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.o(y.transpose(1, 2).reshape(B, L, d))

    def ffn(self, h: torch.Tensor) -> torch.Tensor:
        return self.ffn_out(F.gelu(self.ffn_in(h)))

    def forward(self, x: torch.Tensor, ratios: Optional[list] = None) -> torch.Tensor:
        a = self.attention(self.ln1(x))
        x1 = x + a
        f = self.ffn(self.ln2(x1))
        if ratios is not None:
            ratios.append(torch.stack([a.norm(dim=-1) / x.norm(dim=-1),
                                       f.norm(dim=-1) / x1.norm(dim=-1)], dim=-1))
        return x1 + f


class TinyTransformer(nn.Module):
    def __init__(self, config: ModelConfig, seed: Optional[int] = None, dtype=torch.float32):
        super().__init__()
        self.config = config
        d = config.n_embed
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.context, d)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_blocks))
        self.ln_f = nn.LayerNorm(d)
        self.unembed = nn.Linear(d, config.vocab_size, bias=False)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.reset_parameters(gen)
        self.to(dtype)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0)
            else:
                p.normal_(0.0, 0.02, generator=generator)

    def check_ids(self, ids: torch.Tensor):
        if ids.shape[-1] > self.config.context:
            raise SequenceTooLong(f"sequence of {ids.shape[-1]} exceeds context {self.config.context}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {self.config.vocab_size})")

    def forward(self, ids: torch.Tensor, ratios: Optional[list] = None) -> torch.Tensor:
        self.check_ids(ids)
        pos = self.pos_emb.weight[: ids.shape[-1]]
        x = self.tok_emb(ids) + pos
        for t in range(self.config.n_applications):
            block = self.blocks[0] if self.config.variant == RECURRENT else self.blocks[t]
            if t > 0 and self.config.pos_every_step:
                x = x + pos
            x = block(x, ratios)
        return self.unembed(self.ln_f(x))

    def embedding(self) -> np.ndarray:
        return self.tok_emb.weight.detach().cpu().double().numpy().copy()


# -- functional surface -----------------------------------------------------

def _as_batch(ids) -> torch.Tensor:
    t = torch.as_tensor(ids, dtype=torch.long)
    return t.unsqueeze(0) if t.dim() == 1 else t


def forward(model: TinyTransformer, token_ids) -> torch.Tensor:
    """Logits of shape [len, vocab] for one sequence (or [B, len, vocab] for a batch)."""
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    with torch.no_grad():
        out = model(_as_batch(ids))
    return out[0] if ids.dim() == 1 else out


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple:
    """Right-pad sequences; targets beyond each sequence are -100 (ignored)."""
    width = max(len(s) for s in seqs)
    inputs = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    targets = torch.full((len(seqs), width), -100, dtype=torch.long)
    for i, s in enumerate(seqs):
        s = torch.as_tensor(s, dtype=torch.long)
        inputs[i, : len(s)] = s
        targets[i, : len(s) - 1] = s[1:]
    return inputs, targets


def lm_loss(model: TinyTransformer, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logits = model(inputs)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def loss_and_grads(model: TinyTransformer, batch: Sequence[Sequence[int]]) -> tuple:
    """Mean next-token cross-entropy over all positions, and its gradients by parameter name."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    inputs, targets = pad_batch(batch)
    model.zero_grad(set_to_none=True)
    loss = lm_loss(model, inputs, targets)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return loss.item(), grads


def norm_ratios(model: TinyTransformer, token_ids) -> np.ndarray:
    """Array [applications, len, 2] of (r_attn, r_ffwd) per position and step."""
    ratios: list = []
    with torch.no_grad():
        model(_as_batch(token_ids), ratios=ratios)
    return torch.stack([r[0] for r in ratios]).double().numpy()


# -- persistence ------------------------------------------------------------

_HEADER_END = "end_header\n"


def save_checkpoint(model: TinyTransformer, path) -> Path:
    """Text header echoing the config, then raw little-endian tensors in declared order."""
    path = Path(path)
    tensors = [(name, p.detach().cpu()) for name, p in model.named_parameters()]
    dtype = tensors[0][1].dtype
    np_dtype = {torch.float32: "<f4", torch.float64: "<f8"}[dtype]
    lines = [f"{k} = {v}" for k, v in asdict(model.config).items()]
    lines.append(f"dtype = {np_dtype}")
    lines += [f"tensor {name} = {'x'.join(map(str, t.shape))}" for name, t in tensors]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n" + _HEADER_END).encode("utf-8"))
        for _, t in tensors:
            fh.write(t.numpy().astype(np_dtype).tobytes())
    return path


def load_checkpoint(path) -> TinyTransformer:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(_HEADER_END.encode("utf-8"))
    cfg, shapes, np_dtype = {}, [], "<f4"
    types = {f.name: f.type for f in fields(ModelConfig)}
    for line in head.decode("utf-8").splitlines():
        key, _, value = (s.strip() for s in line.partition("="))
        if key.startswith("tensor "):
            shapes.append((key[len("tensor "):], tuple(int(x) for x in value.split("x"))))
        elif key == "dtype":
            np_dtype = value
        elif types[key] in ("int", int):
            cfg[key] = int(value)
        elif types[key] in ("bool", bool):
            cfg[key] = value == "True"
        else:
            cfg[key] = value
    torch_dtype = torch.float64 if np_dtype == "<f8" else torch.float32
    model = TinyTransformer(ModelConfig(**cfg), dtype=torch_dtype)
    offset = 0
    params = dict(model.named_parameters())
    itemsize = np.dtype(np_dtype).itemsize
    with torch.no_grad():
        for name, shape in shapes:
            n = int(np.prod(shape))
            arr = np.frombuffer(body, dtype=np_dtype, count=n, offset=offset).reshape(shape)
            params[name].copy_(torch.from_numpy(arr.copy()))
            offset += n * itemsize
    return model


def save_embedding(model: TinyTransformer, path, tokens: Optional[Sequence[str]] = None) -> Path:
    header = "tokens: " + " ".join(tokens) if tokens is not None else ""
    np.savetxt(path, model.embedding(), fmt="%.8e", header=header)
    return Path(path)


def load_embedding(path) -> tuple:
    """Return (matrix, tokens or None)."""
    tokens = None
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# tokens: "):
        tokens = first[len("# tokens: "):].split()
    return np.loadtxt(path, ndmin=2), tokens


def param_l2(model: nn.Module) -> float:
    return math.sqrt(sum(float((p.detach() ** 2).sum()) for p in model.parameters()))

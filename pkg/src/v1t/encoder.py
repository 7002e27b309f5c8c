"""Transformer encoder stack with per-block behavioral modulation.

Each block runs, in order: add the behavior adjustment to every token,
then pre-norm multi-head attention with a residual, then a pre-norm MLP
with a residual.  Attention matrices can be captured into an
AttentionTrace for rollout analysis.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import CoreConfig
from .exceptions import DataError, DimensionError
from .tensor import (Tensor, dropout, gelu, layer_norm, softmax, tanh,
                     truncated_normal)
from .tokenizer import PatchGrid

LSA_MASK_VALUE = -1e9  # additive pre-softmax mask; exact -inf hurts gradients


class AttentionTrace:
    """Per-block, per-head attention weights captured during one forward pass."""

    def __init__(self):
        self.blocks: list[np.ndarray] = []  # each [B, n_heads, l, l]

    def add(self, attn: np.ndarray):
        self.blocks.append(attn)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def stacked(self) -> np.ndarray:
        """[n_blocks, B, n_heads, l, l]"""
        if not self.blocks:
            raise DataError("empty attention trace")
        return np.stack(self.blocks)

    def for_trial(self, t: int) -> np.ndarray:
        """[n_blocks, n_heads, l, l] for one trial of the traced batch."""
        return self.stacked()[:, t]


def save_attention_trace(path, trace: np.ndarray):
    """Write one trial's trace: 4 little-endian uint32 dims, then float32."""
    if trace.ndim != 4:
        raise DimensionError("trace must be [n_blocks, n_heads, l, l]")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *trace.shape))
        fh.write(np.ascontiguousarray(trace, dtype="<f4").tobytes())


def load_attention_trace(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    shape = struct.unpack("<4I", raw[:16])
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: trace payload does not match its shape header")
    return data.reshape(shape)


# -- parameters ---------------------------------------------------------------------


def _dense(params: dict, name: str, n_in: int, n_out: int, rng, dtype):
    params[f"{name}.w"] = Tensor(truncated_normal(rng, (n_in, n_out), dtype=dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def init_bmlp_params(params: dict, prefix: str, cfg: CoreConfig, rng, dtype):
    _dense(params, f"{prefix}.fc1", 5, cfg.embed_dim, rng, dtype)
    _dense(params, f"{prefix}.fc2", cfg.embed_dim, cfg.embed_dim, rng, dtype)


def init_block_params(params: dict, prefix: str, cfg: CoreConfig, rng, dtype):
    d = cfg.embed_dim
    for ln in ("ln1", "ln2"):
        params[f"{prefix}.{ln}.gamma"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        params[f"{prefix}.{ln}.beta"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    # heads split an inner dim of n_heads * (d // n_heads); identical to d
    # whenever d divides evenly
    inner = cfg.n_heads * (d // cfg.n_heads)
    _dense(params, f"{prefix}.attn.wq", d, inner, rng, dtype)
    _dense(params, f"{prefix}.attn.wv", d, inner, rng, dtype)
    _dense(params, f"{prefix}.attn.wo", inner, d, rng, dtype)
    # no key bias: a constant added to every key shifts each score row
    # uniformly, which softmax cancels, leaving a dead parameter
    params[f"{prefix}.attn.wk.w"] = Tensor(truncated_normal(rng, (d, inner), dtype=dtype), requires_grad=True)
    _dense(params, f"{prefix}.mlp.fc1", d, cfg.mlp_dim, rng, dtype)
    _dense(params, f"{prefix}.mlp.fc2", cfg.mlp_dim, d, rng, dtype)


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


# -- forward ------------------------------------------------------------------------


def bmlp_forward(behaviors: Tensor, params: dict, prefix: str, dropout_rate: float,
                 rng: np.random.Generator, train: bool) -> Tensor:
    """[B, 5] standardized behaviors -> [B, d] tanh-bounded adjustment."""
    h = tanh(_linear(behaviors, params, f"{prefix}.fc1"))
    h = dropout(h, dropout_rate, rng, train)
    return tanh(_linear(h, params, f"{prefix}.fc2"))


def mha(z: Tensor, params: dict, prefix: str, n_heads: int, lsa: bool,
        dropout_rate: float, rng: np.random.Generator, train: bool,
        trace: AttentionTrace | None = None) -> Tensor:
    """Multi-head self-attention over [B, l, d]; optionally LSA-masked."""
    b, l, d = z.shape
    if lsa and l < 2:
        raise DimensionError("LSA masks the diagonal; a single token would have no attention targets")
    dh = d // n_heads

    def split_heads(t):
        return t.reshape(b, l, n_heads, dh).transpose(0, 2, 1, 3)  # [B,h,l,dh]

    q = split_heads(_linear(z, params, f"{prefix}.wq"))
    k = split_heads(z @ params[f"{prefix}.wk.w"])
    v = split_heads(_linear(z, params, f"{prefix}.wv"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if lsa:
        mask = np.zeros((l, l), dtype=z.dtype)
        np.fill_diagonal(mask, LSA_MASK_VALUE)
        scores = scores + Tensor(mask)
    attn = softmax(scores, axis=-1)
    if trace is not None:
        trace.add(attn.data.copy())
    attn = dropout(attn, dropout_rate, rng, train)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, l, n_heads * dh)
    out = _linear(out, params, f"{prefix}.wo")
    return dropout(out, dropout_rate, rng, train)


def _mlp_forward(z: Tensor, params: dict, prefix: str, dropout_rate: float,
                 rng: np.random.Generator, train: bool) -> Tensor:
    h = gelu(_linear(z, params, f"{prefix}.fc1"))
    h = _linear(h, params, f"{prefix}.fc2")
    return dropout(h, dropout_rate, rng, train)


def _survival_mask(shape_b: int, drop_rate: float, rng, train: bool, dtype):
    """Per-sample stochastic-depth scaling, or None when the branch always runs."""
    if not train or drop_rate <= 0.0:
        return None
    keep = 1.0 - drop_rate
    mask = (rng.random((shape_b, 1, 1)) < keep).astype(dtype) / np.asarray(keep, dtype=dtype)
    return Tensor(mask)


def encoder_block(z: Tensor, behaviors: Tensor | None, params: dict, prefix: str,
                  bmlp_prefix: str | None, cfg: CoreConfig, rng: np.random.Generator,
                  train: bool, trace: AttentionTrace | None = None) -> Tensor:
    """One pre-norm transformer block with optional behavior adjustment."""
    if bmlp_prefix is not None and behaviors is not None:
        adj = bmlp_forward(behaviors, params, bmlp_prefix, cfg.mlp_dropout, rng, train)
        z = z + adj.reshape(adj.shape[0], 1, adj.shape[1])  # same adjustment for every token
    branch = mha(layer_norm(z, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]),
                 params, f"{prefix}.attn", cfg.n_heads, cfg.lsa,
                 cfg.mha_dropout, rng, train, trace)
    mask = _survival_mask(z.shape[0], cfg.stochastic_depth, rng, train, z.dtype)
    z = (branch if mask is None else branch * mask) + z
    branch = _mlp_forward(layer_norm(z, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"]),
                          params, f"{prefix}.mlp", cfg.mlp_dropout, rng, train)
    mask = _survival_mask(z.shape[0], cfg.stochastic_depth, rng, train, z.dtype)
    return (branch if mask is None else branch * mask) + z


def init_final_norm_params(params: dict, cfg: CoreConfig, dtype, core_prefix: str = "core"):
    d = cfg.embed_dim
    params[f"{core_prefix}.ln_f.gamma"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    params[f"{core_prefix}.ln_f.beta"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def bmlp_prefix_for_block(cfg: CoreConfig, block: int, core_prefix: str = "core") -> str | None:
    """Which behavior-MLP parameters block `block` uses, if any."""
    if cfg.mode != "v1t":
        return None
    if cfg.bmlp_first_block_only and block > 0:
        return None
    if cfg.bmlp_shared:
        return f"{core_prefix}.bmlp"
    return f"{core_prefix}.block{block}.bmlp"


def encoder_stack(z: Tensor, behaviors: Tensor | None, params: dict, cfg: CoreConfig,
                  rng: np.random.Generator, train: bool,
                  trace: AttentionTrace | None = None, core_prefix: str = "core") -> Tensor:
    for i in range(cfg.n_blocks):
        z = encoder_block(z, behaviors, params, f"{core_prefix}.block{i}",
                          bmlp_prefix_for_block(cfg, i, core_prefix), cfg, rng, train, trace)
    # final norm: pre-norm stacks leave the residual stream unnormalized,
    # which starves the readout of feature scale
    return layer_norm(z, params[f"{core_prefix}.ln_f.gamma"], params[f"{core_prefix}.ln_f.beta"])


def reshape_core_output(z: Tensor, grid: PatchGrid) -> Tensor:
    """[B, l, d] tokens -> [B, d, rows, cols] feature map (pure permutation)."""
    b, l, d = z.shape
    if l != grid.tokens:
        raise DimensionError(f"{l} tokens cannot fill a {grid.rows}x{grid.cols} grid")
    return z.reshape(b, grid.rows, grid.cols, d).transpose(0, 3, 1, 2)


def collect_bmlp_activations(model, records, split: str = "val",
                             batch_size: int = 512) -> dict[int, np.ndarray]:
    """Per-block distributions of behavior-MLP outputs over a split.

    Returns block index -> flat array of tanh activations pooled over all
    trials (and mice).  Only blocks that own a behavior module appear.
    """
    cfg = model.cfg
    out: dict[int, list] = {}
    for rec in records:
        idx = rec.trial_indices(split)
        for start in range(0, idx.size, batch_size):
            chunk = idx[start:start + batch_size]
            behaviors = Tensor(rec.behaviors[chunk].astype(model.dtype))
            for i in range(cfg.n_blocks):
                prefix = bmlp_prefix_for_block(cfg, i)
                if prefix is None:
                    continue
                act = bmlp_forward(behaviors, model.params, prefix, 0.0, None, train=False)
                out.setdefault(i, []).append(act.data.ravel().copy())
    return {i: np.concatenate(parts) for i, parts in out.items()}


def export_bmlp_activations(path, activations: dict[int, np.ndarray]):
    """CSV with one (block, value) row per activation sample."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "activation"])
        for block in sorted(activations):
            for v in activations[block]:
                writer.writerow([block, f"{v:.6g}"])

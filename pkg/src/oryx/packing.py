"""Sequence packing and variable-length (segment-local) self-attention.

Token sequences of different lengths are concatenated into a single
``[1, sum(N_i), C]`` tensor with cumulative offsets, mirroring the
``cu_seqlens`` convention of varlen attention kernels. Attention is then
computed independently inside each segment.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import IntegrityError, InvalidInputError, ShapeError

DEFAULT_HEADS = 4


@dataclass
class PackedBatch:
    tokens: torch.Tensor  # [1, total, C]
    offsets: torch.Tensor  # int64 [b + 1]

    def __post_init__(self):
        validate(self)

    @property
    def lengths(self) -> list[int]:
        return torch.diff(self.offsets).tolist()

    @property
    def num_segments(self) -> int:
        return self.offsets.numel() - 1

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    def segment(self, i: int) -> torch.Tensor:
        lo, hi = int(self.offsets[i]), int(self.offsets[i + 1])
        return self.tokens[0, lo:hi]

    def with_tokens(self, tokens: torch.Tensor) -> "PackedBatch":
        return PackedBatch(tokens, self.offsets)


def validate(batch: PackedBatch) -> None:
    off = batch.offsets
    if off.dim() != 1 or off.numel() < 2:
        raise IntegrityError("offsets must be a 1-D array with at least two entries")
    if off.dtype not in (torch.int32, torch.int64):
        raise IntegrityError(f"offsets must be integer, got {off.dtype}")
    if int(off[0]) != 0:
        raise IntegrityError(f"offsets[0] must be 0, got {int(off[0])}", offset=0)
    steps = torch.diff(off)
    bad = torch.nonzero(steps <= 0)
    if bad.numel():
        i = int(bad[0, 0]) + 1
        raise IntegrityError(f"offsets not strictly increasing at position {i}", offset=i)
    if batch.tokens.dim() != 3 or batch.tokens.shape[0] != 1:
        raise ShapeError(f"packed tokens must be [1, total, C], got {tuple(batch.tokens.shape)}")
    if int(off[-1]) != batch.tokens.shape[1]:
        raise IntegrityError(
            f"offsets end at {int(off[-1])} but {batch.tokens.shape[1]} tokens are packed",
            offset=off.numel() - 1)


def pack(sequences: Sequence[torch.Tensor]) -> PackedBatch:
    if len(sequences) == 0:
        raise InvalidInputError("cannot pack an empty list")
    channels = {s.shape[-1] for s in sequences}
    if len(channels) != 1 or any(s.dim() != 2 for s in sequences):
        raise ShapeError(f"sequences must be [N_i, C] with one shared C, got {[tuple(s.shape) for s in sequences]}")
    if any(s.shape[0] == 0 for s in sequences):
        raise InvalidInputError("empty sequence in pack()")
    lengths = torch.tensor([0] + [s.shape[0] for s in sequences], dtype=torch.int64)
    return PackedBatch(torch.cat(list(sequences), dim=0).unsqueeze(0), torch.cumsum(lengths, 0))


def unpack(batch: PackedBatch) -> list[torch.Tensor]:
    validate(batch)
    return [batch.segment(i) for i in range(batch.num_segments)]


class Attention(nn.Module):
    """Multi-head self-attention with fused qkv and output projections."""

    def __init__(self, dim: int, heads: int = DEFAULT_HEADS):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"channels {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def split_heads(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        n = x.shape[0]
        qkv = self.qkv(x).reshape(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        return qkv[0], qkv[1], qkv[2]  # each [heads, n, head_dim]

    def merge_heads(self, out: torch.Tensor) -> torch.Tensor:
        return self.proj(out.transpose(0, 1).reshape(out.shape[1], self.dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Dense attention over a single ``[N, C]`` sequence."""
        q, k, v = self.split_heads(x)
        return self.merge_heads(_sdpa(q, k, v))


def _sdpa(q, k, v, mask=None):
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.exp(logits)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ v


def segment_mask(offsets: torch.Tensor) -> torch.Tensor:
    """Block-diagonal boolean mask, True where query and key share a segment."""
    lengths = torch.diff(offsets)
    ids = torch.repeat_interleave(torch.arange(lengths.numel()), lengths)
    return ids[:, None] == ids[None, :]


def segment_attention(batch: PackedBatch, attn: Attention, strategy: str = "loop",
                      workers: int = 1) -> PackedBatch:
    """Self-attention restricted to each packed segment.

    ``strategy="loop"`` runs the dense kernel per segment (optionally over a
    thread pool); ``strategy="masked"`` runs one attention over the whole packed
    sequence with a block-diagonal mask.
    """
    if batch.channels != attn.dim:
        raise ShapeError(f"batch has {batch.channels} channels, attention expects {attn.dim}")
    if attn.dim % attn.heads:
        raise ShapeError(f"channels {attn.dim} not divisible by {attn.heads} heads")

    if strategy == "masked":
        x = batch.tokens[0]
        q, k, v = attn.split_heads(x)
        out = attn.merge_heads(_sdpa(q, k, v, mask=segment_mask(batch.offsets)))
        return batch.with_tokens(out.unsqueeze(0))
    if strategy != "loop":
        raise InvalidInputError(f"unknown attention strategy {strategy!r}")

    segments = unpack(batch)
    if workers > 1 and len(segments) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(attn, segments))
    else:
        outs = [attn(s) for s in segments]
    return batch.with_tokens(torch.cat(outs, dim=0).unsqueeze(0))


def _weights_np(attn: Attention) -> dict[str, np.ndarray]:
    return {name: p.detach().to(torch.float64).cpu().numpy() for name, p in attn.named_parameters()}


def dense_oracle_attention(x: np.ndarray, attn: Attention, return_probs: bool = False):
    """Textbook scaled dot-product attention in float64 numpy.

    Independent of the torch path: weights are read out of ``attn`` and every
    step is spelled out explicitly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != attn.dim:
        raise ShapeError(f"expected [N, {attn.dim}] input, got {x.shape}")
    w = _weights_np(attn)
    n, c = x.shape
    h, d = attn.heads, attn.head_dim
    qkv = x @ w["qkv.weight"].T + w["qkv.bias"]
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    heads_out = np.zeros((n, c))
    probs = np.zeros((h, n, n))
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        probs[head] = p
        heads_out[:, sl] = p @ v[:, sl]
    out = heads_out @ w["proj.weight"].T + w["proj.bias"]
    return (out, probs) if return_probs else out


def _padded_attention(sequences: list[torch.Tensor], attn: Attention) -> list[torch.Tensor]:
    """Conventional per-sample batching: pad to the longest sequence and mask keys."""
    lengths = [s.shape[0] for s in sequences]
    n_max = max(lengths)
    b = len(sequences)
    x = torch.zeros(b, n_max, attn.dim, dtype=sequences[0].dtype)
    for i, s in enumerate(sequences):
        x[i, :s.shape[0]] = s
    qkv = attn.qkv(x).reshape(b, n_max, 3, attn.heads, attn.head_dim).permute(2, 0, 3, 1, 4)
    key_mask = torch.arange(n_max)[None, :] < torch.tensor(lengths)[:, None]  # [b, n_max]
    out = _sdpa(qkv[0], qkv[1], qkv[2], mask=key_mask[:, None, None, :])
    out = attn.proj(out.transpose(1, 2).reshape(b, n_max, attn.dim))
    return [out[i, :n] for i, n in enumerate(lengths)]


def benchmark(lengths: Sequence[int], channels: int = 32, heads: int = DEFAULT_HEADS,
              repeats: int = 5, seed: int = 0) -> dict:
    """Tokens/second for packed (loop, masked) versus padded per-sample attention."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    attn = Attention(channels, heads)
    seqs = [torch.randn(n, channels, generator=gen) for n in lengths]
    batch = pack(seqs)
    total = int(batch.offsets[-1])

    def timed(fn):
        fn()
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    results = {}
    with torch.no_grad():
        for name, fn in [
            ("packed_loop", lambda: segment_attention(batch, attn, "loop")),
            ("packed_masked", lambda: segment_attention(batch, attn, "masked")),
            ("padded", lambda: _padded_attention(seqs, attn)),
        ]:
            secs = timed(fn)
            results[name] = {"seconds": secs, "tokens_per_second": total / secs}
    padded_tokens = len(lengths) * max(lengths)
    return {"segments": list(lengths), "total_tokens": total, "padded_tokens": padded_tokens,
            "channels": channels, "heads": heads, "results": results}

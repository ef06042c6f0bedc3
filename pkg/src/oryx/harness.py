"""Toy end-to-end stack with stage-wise freeze schedules and gradient checks.

encoder -> dynamic compressor (ratio per sample) -> one-layer sequence head.
The head stands in for the language model: token sequence in, loss out.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn

from .compressor import DownsampleVariant, DynamicCompressor, compress
from .encoder import LN_EPS, EncoderConfig, OryxViT, encode_packed
from .errors import InvalidInputError, NumericalFailure
from .geometry import plan_image_resolution, plan_video_resolution
from .packing import Attention, pack
from .planner import RATIO, Category, classify_input
from .structures import Modality, VisualInput

# full-size model rates, kept for reference; the toy stack trains with its own
FULL_SCALE_LEARNING_RATES = {
    "stage1_pretrain": 1e-3,
    "stage1_sft_7b": 2e-5,
    "stage1_sft_34b": 1e-5,
    "stage2_7b": 2e-5,
    "stage2_34b": 1e-5,
}

GROUPS = ("encoder", "compressor", "projector", "head")


class Stage(str, Enum):
    VIT_ADAPT = "ViTAdapt"
    STAGE1_PRETRAIN = "Stage1Pretrain"
    STAGE1_SFT = "Stage1SFT"
    STAGE2_JOINT = "Stage2Joint"


_TRAINABLE = {
    Stage.VIT_ADAPT: frozenset({"encoder"}),
    Stage.STAGE1_PRETRAIN: frozenset({"compressor", "projector"}),
    Stage.STAGE1_SFT: frozenset({"compressor", "projector", "head"}),
    Stage.STAGE2_JOINT: frozenset({"compressor", "projector", "head"}),
}


@dataclass(frozen=True)
class StageSchedule:
    stage: Stage | str
    trainable: frozenset[str]

    @classmethod
    def for_stage(cls, stage: Stage | str) -> "StageSchedule":
        stage = Stage(stage)
        return cls(stage, _TRAINABLE[stage])


class SequenceHead(nn.Module):
    """One attention layer over the visual tokens, mean-pooled into a prediction."""

    def __init__(self, dim: int, out_dim: int, heads: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.out = nn.Linear(dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens + self.attn(self.norm(tokens))
        return self.out(x.mean(dim=0))


@dataclass
class Sample:
    frames: list[VisualInput]
    target: torch.Tensor
    category: Category | None = None  # None: route by frame count

    @property
    def route(self) -> Category:
        if self.category is not None:
            return Category(self.category)
        return classify_input(len(self.frames))


class ToyOryx(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig | None = None, lm_channels: int = 32, out_dim: int = 4,
                 variant: DownsampleVariant | str = DownsampleVariant.AVGPOOL, seed: int = 0):
        super().__init__()
        enc_cfg = enc_cfg or EncoderConfig(seed=seed)
        self.encoder = OryxViT(enc_cfg)
        self.compressor = DynamicCompressor(enc_cfg.channels, lm_channels, variant=variant, seed=seed + 1)
        torch.manual_seed(seed + 2)
        self.head = SequenceHead(lm_channels, out_dim, heads=enc_cfg.heads if lm_channels % enc_cfg.heads == 0 else 1)

    def group_of(self, name: str) -> str:
        if name.startswith("encoder."):
            return "encoder"
        if name.startswith("compressor.shared_mlp."):
            return "projector"
        if name.startswith("compressor."):
            return "compressor"
        if name.startswith("head."):
            return "head"
        raise KeyError(name)

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append((name, p))
        return out

    def visual_tokens(self, samples: Sequence[Sample]) -> list[torch.Tensor]:
        """Compressed token sequence per sample; all frames share one packed encoder pass."""
        embedded, owners = [], []
        for si, s in enumerate(samples):
            for f in s.frames:
                embedded.append(self.encoder.embed(f))
                owners.append(si)
        batch = pack([t for t, _ in embedded])
        maps = encode_packed(batch, [g for _, g in embedded], self.encoder)
        per_sample: list[list[torch.Tensor]] = [[] for _ in samples]
        for fm, si in zip(maps, owners):
            per_sample[si].append(compress(fm, RATIO[samples[si].route], None, self.compressor))
        return [torch.cat(ts, dim=0) for ts in per_sample]

    def forward(self, samples: Sequence[Sample]) -> torch.Tensor:
        return torch.stack([self.head(t) for t in self.visual_tokens(samples)])

    def loss(self, samples: Sequence[Sample]) -> torch.Tensor:
        pred = self(samples)
        target = torch.stack([s.target.to(pred.dtype) for s in samples])
        return ((pred - target) ** 2).mean()


def apply_stage(model: ToyOryx, schedule: StageSchedule) -> list[nn.Parameter]:
    """Set ``requires_grad`` per group; return the trainable parameters."""
    unknown = set(schedule.trainable) - set(GROUPS)
    if unknown:
        raise InvalidInputError(f"unknown parameter group(s): {sorted(unknown)}")
    trainable = []
    for group, params in model.groups().items():
        on = group in schedule.trainable
        for _, p in params:
            p.requires_grad_(on)
            p.grad = None
            if on:
                trainable.append(p)
    return trainable


class Trainer:
    """Plain SGD over the groups a schedule leaves trainable.

    A fresh optimizer is built per stage; frozen parameters are not handed to it
    at all, so they cannot move.
    """

    def __init__(self, model: ToyOryx, schedule: StageSchedule, lr: float = 0.05):
        self.model = model
        self.schedule = schedule
        self.lr = lr
        self.params = apply_stage(model, schedule)
        self.optimizer = torch.optim.SGD(self.params, lr=lr) if self.params else None
        self.history: list[float] = []

    def train_step(self, samples: Sequence[Sample]) -> float:
        if not samples:
            raise InvalidInputError("train_step needs at least one sample")
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=False)
        loss = self.model.loss(samples)
        if not torch.isfinite(loss):
            raise NumericalFailure(
                f"non-finite loss at step {len(self.history)}",
                {"step": len(self.history), "loss": float(loss.detach()), "stage": Stage(self.schedule.stage).value,
                 "last_loss": self.history[-1] if self.history else None,
                 "param_norms": {n: float(p.detach().norm()) for n, p in self.model.named_parameters()}})
        if self.optimizer is not None:
            loss.backward()
            self.optimizer.step()
        value = float(loss.detach())
        self.history.append(value)
        return value

    def fit(self, samples: Sequence[Sample], steps: int) -> list[float]:
        for _ in range(steps):
            self.train_step(samples)
        return self.history

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(self.history):
            w.writerow([i, repr(v)])
        return buf.getvalue()


def train_step(trainer: Trainer, samples: Sequence[Sample]) -> float:
    return trainer.train_step(samples)


# synthetic data

def synthetic_frame(height: int, width: int, gen: torch.Generator, modality: Modality) -> VisualInput:
    return VisualInput(torch.rand(height, width, 3, generator=gen), modality)


def synthetic_batch(seed: int = 0, out_dim: int = 4, image_size: tuple[int, int] = (48, 64),
                    frame_size: tuple[int, int] = (40, 40), short_frames: int = 3, long_frames: int = 4,
                    video_clamp: tuple[int, int] = (32, 48), image_max_side: int = 64) -> list[Sample]:
    """One image (1x path), one short clip (2x path) and one needle-style long clip (4x path).

    Resolutions go through the same planners as real inputs, but with
    desk-scale clamps so a step stays cheap.
    """
    from .geometry import Resolution

    gen = torch.Generator().manual_seed(seed)
    img_res = plan_image_resolution(Resolution(*image_size), image_max_side)
    vid_res = plan_video_resolution(Resolution(*frame_size), *video_clamp)

    def target():
        return torch.randn(out_dim, generator=gen)

    image = Sample([synthetic_frame(img_res.height, img_res.width, gen, Modality.IMAGE)], target(), Category.IMAGE)
    short = Sample([synthetic_frame(vid_res.height, vid_res.width, gen, Modality.SHORT_VIDEO_FRAME)
                    for _ in range(short_frames)], target(), Category.SHORT_VIDEO)
    long = Sample([synthetic_frame(vid_res.height, vid_res.width, gen, Modality.LONG_VIDEO_FRAME)
                   for _ in range(long_frames)], target(), Category.LONG_VIDEO)
    return [image, short, long]


# finite differences

@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: list[dict] = field(default_factory=list)

    def by_prefix(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for p in self.probes:
            out[p["prefix"]] = max(out.get(p["prefix"], 0.0), p["rel_error"])
        return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(model: nn.Module, loss_fn: Callable[[], torch.Tensor], prefixes: Iterable[str],
                      probe_count: int, seed: int = 0, step: float = 1e-4) -> GradCheckResult:
    """Compare autograd against central differences on random scalar parameters.

    Probes cycle through ``prefixes`` (parameter-name prefixes) so each one is
    covered. The model must already be in float64.
    """
    prefixes = list(prefixes)
    named = dict(model.named_parameters())
    pools = {}
    for pre in prefixes:
        pool = [n for n in named if n.startswith(pre)]
        if not pool:
            raise InvalidInputError(f"no parameters match prefix {pre!r}")
        pools[pre] = pool
    if any(p.dtype != torch.float64 for p in named.values()):
        raise InvalidInputError("finite_diff_check needs a float64 model")

    saved = {n: p.requires_grad for n, p in named.items()}
    for p in named.values():
        p.requires_grad_(True)
        p.grad = None
    try:
        loss_fn().backward()
        grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                 for n, p in named.items()}
        rng = torch.Generator().manual_seed(seed)
        result = GradCheckResult(0.0)
        with torch.no_grad():
            for k in range(probe_count):
                pre = prefixes[k % len(prefixes)]
                pool = pools[pre]
                # weight names by size so every scalar is equally likely within a prefix
                sizes = torch.tensor([named[n].numel() for n in pool], dtype=torch.float64)
                name = pool[int(torch.multinomial(sizes, 1, generator=rng))]
                p = named[name]
                flat = p.view(-1)
                i = int(torch.randint(flat.numel(), (1,), generator=rng))
                theta = float(flat[i])
                h = step * max(1.0, abs(theta))
                flat[i] = theta + h
                up = float(loss_fn())
                flat[i] = theta - h
                down = float(loss_fn())
                flat[i] = theta
                numeric = (up - down) / (2 * h)
                analytic = float(grads[name].view(-1)[i])
                err = relative_error(analytic, numeric)
                result.probes.append({"prefix": pre, "param": name, "index": i, "analytic": analytic,
                                      "numeric": numeric, "rel_error": err})
                result.max_rel_error = max(result.max_rel_error, err)
        return result
    finally:
        for n, p in named.items():
            p.grad = None
            p.requires_grad_(saved[n])


STACK_PREFIXES = ("compressor.phi_q", "compressor.phi_k", "compressor.shared_mlp", "encoder.blocks", "head")


def jitter_(model: nn.Module, std: float, seed: int) -> nn.Module:
    """Add N(0, std) noise to every non-norm parameter, in place."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" not in name:
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return model


def stack_gradcheck(probes: int = 50, seed: int = 0, jitter: float = 0.05) -> GradCheckResult:
    """Gradient check of the full toy stack in float64 on the synthetic batch.

    At the 0.02-scale init many gradients sit near 1e-8, where central
    differences are dominated by roundoff, so the check is run at a jittered
    point instead.
    """
    model = jitter_(ToyOryx(EncoderConfig(seed=seed), seed=seed).double(), jitter, seed)
    samples = synthetic_batch(seed)
    for s in samples:
        for f in s.frames:
            f.pixels = f.pixels.double()
    return finite_diff_check(model, lambda: model.loss(samples), STACK_PREFIXES, probes, seed=seed)

"""Video needle-in-a-haystack data and retrieval-grid evaluation.

Haystacks are procedurally generated ``uint8`` frames. Every frame carries a
machine-readable payload (its caption id) in the first bytes of its raster, so
ground truth is exact and no captioning model is needed. The needle frame
carries the answer string and a flag bit.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

FRAME_SIZE = 16
FRAME_CHANNELS = 3
MAGIC = 0xA7
FLAG_HAYSTACK = 0
FLAG_NEEDLE = 1
HEADER = 3  # magic, flag, payload length
DEFAULT_DEPTHS = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_FRAME_COUNTS = tuple(range(100, 1700, 100))
DEFAULT_TRIALS = 5


# payload encoding

def payload_capacity(height: int = FRAME_SIZE, width: int = FRAME_SIZE, channels: int = FRAME_CHANNELS) -> int:
    return min(255, height * width * channels - HEADER)


def encode_payload(frame: np.ndarray, payload: str, flag: int = FLAG_HAYSTACK) -> np.ndarray:
    """Write ``payload`` into the leading raster bytes of a uint8 frame (copy)."""
    data = payload.encode("utf-8")
    if len(data) > payload_capacity(*frame.shape):
        raise InvalidInputError(f"payload of {len(data)} bytes does not fit a {frame.shape} frame")
    out = np.array(frame, dtype=np.uint8, copy=True)
    flat = out.reshape(-1)
    flat[:HEADER] = (MAGIC, flag, len(data))
    flat[HEADER:HEADER + len(data)] = np.frombuffer(data, dtype=np.uint8)
    return out


def decode_payload(frame: np.ndarray) -> tuple[str, int] | None:
    """Inverse of :func:`encode_payload`; ``None`` if the frame carries no payload."""
    flat = np.asarray(frame).reshape(-1)
    if flat.size < HEADER or int(flat[0]) != MAGIC:
        return None
    n = int(flat[2])
    return bytes(flat[HEADER:HEADER + n].astype(np.uint8)).decode("utf-8"), int(flat[1])


def caption_id(i: int) -> str:
    return f"frame-{i:05d}"


def make_haystack(n: int, seed: int, size: int = FRAME_SIZE) -> np.ndarray:
    """``[n, size, size, 3]`` uint8 noise frames, each tagged with its caption id."""
    if not 1 <= n <= 99_999:
        raise InvalidInputError(f"haystack length must be in [1, 99999], got {n}")
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n, size, size, FRAME_CHANNELS), dtype=np.uint8)
    ids = np.frombuffer("".join(caption_id(i) for i in range(n)).encode("ascii"), dtype=np.uint8)
    ids = ids.reshape(n, -1)
    if ids.shape[1] > payload_capacity(size, size):
        raise InvalidInputError(f"{size}x{size} frames are too small for caption ids")
    flat = frames.reshape(n, -1)
    flat[:, :HEADER] = (MAGIC, FLAG_HAYSTACK, ids.shape[1])
    flat[:, HEADER:HEADER + ids.shape[1]] = ids
    return frames


# needle insertion

@dataclass
class NeedleSpec:
    haystack_frames: int
    depth: float
    needle: np.ndarray | None = None
    payload: dict = field(default_factory=lambda: {"question": "What is the secret code?", "answer": "needle"})

    def __post_init__(self):
        if not 0.0 <= self.depth <= 1.0 or math.isnan(self.depth):
            raise InvalidInputError(f"depth must lie in [0, 1], got {self.depth}")
        if self.haystack_frames < 1:
            raise InvalidInputError("haystack_frames must be >= 1")


def needle_index(haystack_frames: int, depth: float) -> int:
    if not 0.0 <= depth <= 1.0:
        raise InvalidInputError(f"depth must lie in [0, 1], got {depth}")
    return min(max(math.floor(depth * haystack_frames), 0), haystack_frames - 1)


def make_needle(answer: str, seed: int, size: int = FRAME_SIZE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    frame = rng.integers(0, 256, size=(size, size, FRAME_CHANNELS), dtype=np.uint8)
    return encode_payload(frame, answer, FLAG_NEEDLE)


def insert_needle(spec: NeedleSpec, haystack: np.ndarray | None = None, seed: int = 0) -> tuple[np.ndarray, int]:
    """Return ``haystack_frames + 1`` frames with the needle at its depth index."""
    if haystack is None:
        haystack = make_haystack(spec.haystack_frames, seed)
    if len(haystack) != spec.haystack_frames:
        raise InvalidInputError(f"haystack has {len(haystack)} frames, expected {spec.haystack_frames}")
    needle = spec.needle
    if needle is None:
        needle = make_needle(spec.payload["answer"], seed + 1, size=haystack.shape[1])
    idx = needle_index(spec.haystack_frames, spec.depth)
    frames = np.concatenate([haystack[:idx], needle[None], haystack[idx:]], axis=0)
    return frames, idx


# tasks

class TaskMode(str, Enum):
    CAPTIONING = "captioning"
    DIFFERING = "differing"


@dataclass
class TaskRecord:
    mode: TaskMode
    indices: tuple[int, ...]
    prompt: str
    answer: str

    def to_json(self) -> dict:
        return {"mode": self.mode.value, "indices": list(self.indices), "prompt": self.prompt, "answer": self.answer}


CAPTION_PROMPT = "Describe frame {0}."
DIFFER_PROMPT = "What differs between frame {0} and frame {1}?"


def differing_patches(a: np.ndarray, b: np.ndarray, patch: int) -> list[tuple[int, int]]:
    diff = np.any(np.asarray(a) != np.asarray(b), axis=-1)
    rows, cols = diff.shape[0] // patch, diff.shape[1] // patch
    hits = diff[:rows * patch, :cols * patch].reshape(rows, patch, cols, patch).any(axis=(1, 3))
    return [tuple(map(int, rc)) for rc in np.argwhere(hits)]


def build_tasks(frames: np.ndarray, mode: TaskMode | str, indices: Sequence[int], patch: int = 4) -> TaskRecord:
    mode = TaskMode(mode)
    idx = tuple(int(i) for i in indices)
    for i in idx:
        if not 0 <= i < len(frames):
            raise InvalidInputError(f"frame index {i} out of range for {len(frames)} frames")
    if mode is TaskMode.CAPTIONING:
        if len(idx) != 1:
            raise InvalidInputError("captioning takes exactly one index")
        decoded = decode_payload(frames[idx[0]])
        if decoded is None:
            raise InvalidInputError(f"frame {idx[0]} carries no payload")
        return TaskRecord(mode, idx, CAPTION_PROMPT.format(*idx), decoded[0])
    if len(idx) != 2:
        raise InvalidInputError("differing takes exactly two indices")
    if idx[0] == idx[1]:
        raise InvalidInputError(f"differing needs two distinct indices, got {idx}")
    patches = differing_patches(frames[idx[0]], frames[idx[1]], patch)
    answer = "; ".join(f"patch ({r}, {c})" for r, c in patches) or "no difference"
    return TaskRecord(mode, idx, DIFFER_PROMPT.format(*idx), answer)


# evaluation grid

ModelFn = Callable[[np.ndarray, str], str]


def oracle_retriever(frames: np.ndarray, question: str) -> str:
    """Reads the flagged needle payload directly: the perfect-retrieval upper bound."""
    flat = np.asarray(frames).reshape(len(frames), -1)
    hits = np.flatnonzero((flat[:, 0] == MAGIC) & (flat[:, 1] == FLAG_NEEDLE))
    if hits.size == 0:
        return ""
    return decode_payload(frames[hits[0]])[0]


def constant_retriever(answer: str = "I don't know") -> ModelFn:
    def fn(frames: np.ndarray, question: str) -> str:
        return answer
    return fn


def _cell_seed(seed: int, di: int, ni: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, di, ni, trial]).generate_state(1)[0])


def _run_trial(model_fn: ModelFn, depth: float, n: int, seed: int) -> bool:
    answer = f"needle-{seed % 1_000_000:06d}"
    spec = NeedleSpec(n, depth, payload={"question": "Which code is hidden in the video?", "answer": answer})
    frames, _ = insert_needle(spec, seed=seed)
    return model_fn(frames, spec.payload["question"]) == answer


@dataclass
class GridResult:
    depths: list[float]
    frame_counts: list[int]
    accuracy: np.ndarray  # [len(depths), len(frame_counts)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth", "frames", "accuracy"])
        for i, d in enumerate(self.depths):
            for j, n in enumerate(self.frame_counts):
                w.writerow([str(float(d)), n, f"{self.accuracy[i, j]:.6f}"])
        return buf.getvalue()


def eval_grid(model_fn: ModelFn, depths: Sequence[float] = DEFAULT_DEPTHS,
              frame_counts: Sequence[int] = DEFAULT_FRAME_COUNTS, trials: int = DEFAULT_TRIALS,
              seed: int = 0, workers: int = 1) -> GridResult:
    """Retrieval accuracy for every (depth, frame count) cell.

    Each trial draws its haystack from a seed derived from ``(seed, cell,
    trial)``, so results do not depend on evaluation order or ``workers``.
    """
    depths, frame_counts = list(depths), list(frame_counts)
    if not depths or not frame_counts:
        raise InvalidInputError("eval_grid needs non-empty depth and frame-count axes")
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    jobs = [(di, ni, t) for di in range(len(depths)) for ni in range(len(frame_counts)) for t in range(trials)]

    def run(job):
        di, ni, t = job
        return _run_trial(model_fn, depths[di], frame_counts[ni], _cell_seed(seed, di, ni, t))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(run, jobs))
    else:
        hits = [run(j) for j in jobs]
    acc = np.zeros((len(depths), len(frame_counts)))
    for (di, ni, _), hit in zip(jobs, hits):
        acc[di, ni] += hit
    return GridResult(depths, frame_counts, acc / trials)


# coarse correspondences

@dataclass(frozen=True)
class TrackAnnotation:
    frame_index: int
    object_id: int
    box: tuple[int, int, int, int]  # x, y, w, h

    @classmethod
    def from_json(cls, d: dict) -> "TrackAnnotation":
        box = d["box"]
        if len(box) != 4:
            raise InvalidInputError(f"box must be [x, y, w, h], got {box}")
        return cls(int(d["frame_index"]), int(d["object_id"]), tuple(int(v) for v in box))


def read_tracks(lines: Iterable[str]) -> list[TrackAnnotation]:
    """Parse JSON-lines track records; blank lines are skipped."""
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(TrackAnnotation.from_json(json.loads(line)))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidInputError(f"bad track record on line {lineno}: {e}") from e
    return out


# 3x5 digit glyphs, rows top to bottom
_GLYPHS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "001", "001", "001"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    "-": ("000", "000", "111", "000", "000"),
}
GLYPH_H, GLYPH_W = 5, 3


def render_label(text: str) -> np.ndarray:
    """Boolean ``[5, 4*len(text)-1]`` bitmap of a numeric label."""
    cols = []
    for k, ch in enumerate(text):
        g = np.array([[c == "1" for c in row] for row in _GLYPHS[ch]])
        if k:
            cols.append(np.zeros((GLYPH_H, 1), dtype=bool))
        cols.append(g)
    return np.concatenate(cols, axis=1)


def label_color(object_id: int) -> np.ndarray:
    rng = np.random.default_rng(object_id)
    return rng.integers(64, 256, size=FRAME_CHANNELS, dtype=np.uint8)


def annotate_correspondences(frames: np.ndarray, tracks: Sequence[TrackAnnotation]) -> np.ndarray:
    """Draw each tracked box outline plus its numeric id label (copy of ``frames``).

    The outline color and glyph depend only on ``object_id``, so the same object
    is marked identically in every frame it appears in.
    """
    out = np.array(frames, copy=True)
    n, h, w = out.shape[:3]
    for t in tracks:
        x, y, bw, bh = t.box
        if not 0 <= t.frame_index < n:
            raise InvalidInputError(f"track references frame {t.frame_index}, only {n} frames")
        if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise InvalidInputError(f"box {t.box} is out of bounds for {w}x{h} frames")
    for t in tracks:
        x, y, bw, bh = t.box
        frame = out[t.frame_index]
        color = label_color(t.object_id)
        frame[y, x:x + bw] = color
        frame[y + bh - 1, x:x + bw] = color
        frame[y:y + bh, x] = color
        frame[y:y + bh, x + bw - 1] = color
        glyph = render_label(str(t.object_id))
        gy, gx = y + 1, x + 1
        gh, gw = min(glyph.shape[0], h - gy), min(glyph.shape[1], w - gx)
        if gh > 0 and gw > 0:
            region = frame[gy:gy + gh, gx:gx + gw]
            mask = glyph[:gh, :gw]
            region[mask] = 255
            region[~mask] = 0
    return out

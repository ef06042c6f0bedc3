"""``oryx`` command-line entry point.

Every subcommand prints one JSON document on stdout. Tensors and CSV go to
files. Exit status: 0 ok, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import niah, packing, planner, tensorfile
from .compressor import RATIOS, DownsampleVariant, DynamicCompressor, compress
from .encoder import EncoderConfig, OryxViT
from .errors import NumericalFailure, OryxError
from .harness import Stage, StageSchedule, ToyOryx, Trainer, stack_gradcheck, synthetic_batch
from .structures import FeatureMap, VisualInput

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def default_seed() -> int:
    try:
        return int(os.environ.get("ORYX_SEED", "0"))
    except ValueError:
        return 0


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _write_text(path: str, text: str) -> None:
    Path(path).write_text(text)


def cmd_plan(args) -> int:
    plan, res = planner.plan_input(args.width, args.height, args.frames, args.fps,
                                   long_threshold=args.long_threshold, needle=args.needle,
                                   image_max_side=args.image_max_side)
    out = plan.to_json()
    out["resolution"] = {"width": res.width, "height": res.height}
    _emit(out)
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = EncoderConfig(seed=args.seed)
    if args.config:
        d = json.loads(Path(args.config).read_text())
        d.setdefault("seed", args.seed)
        cfg = EncoderConfig.from_dict(d)
    pixels = tensorfile.read(args.input)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    cfg.in_chans = pixels.shape[-1] if pixels.ndim == 3 else cfg.in_chans
    enc = OryxViT(cfg)
    with torch.no_grad():
        fm = enc([VisualInput(torch.from_numpy(pixels).float())])[0]
    values = fm.values.numpy()
    if not np.isfinite(values).all():
        raise NumericalFailure("encoder produced non-finite features")
    tensorfile.write(args.output, values.astype(np.float32))
    _emit({"input_shape": list(pixels.shape), "grid": [fm.rows, fm.cols], "tokens": fm.token_count,
           "channels": fm.channels, "output": args.output, "config": cfg.to_dict()})
    return EXIT_OK


def cmd_compress(args) -> int:
    values = tensorfile.read(args.input)
    if values.ndim != 3:
        raise tensorfile.TensorFormatError(f"expected a [rows, cols, C] tensor, got {values.ndim} dims", 13)
    f_h = FeatureMap(torch.from_numpy(values).double())
    w = DynamicCompressor(f_h.channels, args.lm_channels, variant=args.variant, seed=args.seed).double()
    with torch.no_grad():
        tokens = compress(f_h, args.ratio, args.variant, w).numpy()
    if not np.isfinite(tokens).all():
        raise NumericalFailure("compressor produced non-finite tokens")
    if args.output:
        tensorfile.write(args.output, tokens.astype(values.dtype))
    _emit({"input_grid": [f_h.rows, f_h.cols], "ratio": args.ratio, "variant": args.variant,
           "tokens": int(tokens.shape[0]), "lm_channels": int(tokens.shape[1]), "output": args.output})
    return EXIT_OK


def cmd_niah_gen(args) -> int:
    answer = args.answer or f"needle-{args.seed:06d}"
    spec = niah.NeedleSpec(args.frames, args.depth, payload={"question": args.question, "answer": answer})
    frames, idx = niah.insert_needle(spec, seed=args.seed)
    if args.tracks:
        with open(args.tracks) as fh:
            frames = niah.annotate_correspondences(frames, niah.read_tracks(fh))
    if args.output:
        tensorfile.write(args.output, frames.astype(np.float32))
    _emit({"haystack_frames": args.frames, "total_frames": int(len(frames)), "depth": args.depth,
           "needle_index": idx, "payload": spec.payload, "frame_shape": list(frames.shape[1:]),
           "output": args.output})
    return EXIT_OK


def cmd_niah_eval(args) -> int:
    if args.retriever == "oracle":
        fn = niah.oracle_retriever
    else:
        fn = niah.constant_retriever(args.wrong_answer)
    grid = niah.eval_grid(fn, args.depths, args.frame_counts, trials=args.trials, seed=args.seed,
                          workers=args.workers)
    _write_text(args.output, grid.to_csv())
    _emit({"retriever": args.retriever, "depths": grid.depths, "frame_counts": grid.frame_counts,
           "trials": args.trials, "mean_accuracy": float(grid.accuracy.mean()),
           "min_accuracy": float(grid.accuracy.min()), "max_accuracy": float(grid.accuracy.max()),
           "output": args.output})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = stack_gradcheck(args.probes, seed=args.seed)
    ok = result.max_rel_error <= args.tol
    _emit({"probes": args.probes, "max_rel_error": result.max_rel_error, "tolerance": args.tol,
           "by_prefix": result.by_prefix(), "passed": ok})
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_bench(args) -> int:
    _emit(packing.benchmark(args.segments, args.channels, args.heads, args.repeats, seed=args.seed))
    return EXIT_OK


def cmd_train(args) -> int:
    model = ToyOryx(EncoderConfig(seed=args.seed), seed=args.seed)
    trainer = Trainer(model, StageSchedule.for_stage(args.stage), lr=args.lr)
    trainer.fit(synthetic_batch(args.seed), args.steps)
    if args.output:
        _write_text(args.output, trainer.loss_csv())
    _emit({"stage": args.stage, "steps": args.steps, "initial_loss": trainer.history[0],
           "final_loss": trainer.history[-1], "output": args.output})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oryx", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=default_seed(), help="random seed (default: $ORYX_SEED or 0)")
    # --seed is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("plan", parents=[common], help="route an input and compute its visual-token budget")
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--frames", type=int, default=1, help="native frame count")
    s.add_argument("--fps", type=float, default=1.0, help="native frame rate")
    s.add_argument("--long-threshold", type=int, default=planner.DEFAULT_LONG_THRESHOLD)
    s.add_argument("--image-max-side", type=int, default=1536)
    s.add_argument("--needle", action="store_true", help="needle-retrieval workload (always 4x4 path)")
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("encode", parents=[common], help="encode an [H, W, C] pixel tensor into a feature map")
    s.add_argument("--input", required=True)
    s.add_argument("--config", help="JSON file with encoder config fields")
    s.add_argument("--output", default="features.tensor")
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("compress", parents=[common], help="compress a [rows, cols, C] feature map")
    s.add_argument("--input", required=True)
    s.add_argument("--ratio", type=int, choices=RATIOS, required=True)
    s.add_argument("--variant", choices=[v.value for v in DownsampleVariant], default="avgpool")
    s.add_argument("--lm-channels", type=int, default=64)
    s.add_argument("--output")
    s.set_defaults(fn=cmd_compress)

    s = sub.add_parser("niah-gen", parents=[common], help="build a synthetic needle-in-a-haystack clip")
    s.add_argument("--frames", type=int, required=True, help="haystack length")
    s.add_argument("--depth", type=float, required=True)
    s.add_argument("--answer")
    s.add_argument("--question", default="Which code is hidden in the video?")
    s.add_argument("--tracks", help="JSON-lines object tracks to overlay")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_niah_gen)

    s = sub.add_parser("niah-eval", parents=[common], help="evaluate a retriever over a depth x frames grid")
    s.add_argument("--depths", type=_floats, default=list(niah.DEFAULT_DEPTHS))
    s.add_argument("--frame-counts", type=_ints, default=list(niah.DEFAULT_FRAME_COUNTS))
    s.add_argument("--trials", type=int, default=niah.DEFAULT_TRIALS)
    s.add_argument("--retriever", choices=["oracle", "constant"], default="oracle")
    s.add_argument("--wrong-answer", default="I don't know")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--output", default="niah_grid.csv")
    s.set_defaults(fn=cmd_niah_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the toy stack")
    s.add_argument("--probes", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="packed vs padded attention throughput")
    s.add_argument("--segments", type=_ints, required=True, help="segment lengths, e.g. 324,900,576")
    s.add_argument("--channels", type=int, default=32)
    s.add_argument("--heads", type=int, default=packing.DEFAULT_HEADS)
    s.add_argument("--repeats", type=int, default=5)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("train", parents=[common], help="toy training run under one stage schedule")
    s.add_argument("--stage", choices=[st.value for st in Stage], default=Stage.STAGE2_JOINT.value)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--output", help="loss curve CSV (step,loss)")
    s.set_defaults(fn=cmd_train)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericalFailure as e:
        _emit({"error": str(e), "kind": "numerical", "diagnostics": e.diagnostics})
        return EXIT_NUMERICAL
    except (OryxError, ValueError) as e:
        out = {"error": str(e), "kind": "validation"}
        if getattr(e, "offset", None) is not None:
            out["offset"] = e.offset
        _emit(out)
        return EXIT_INVALID
    except OSError as e:
        _emit({"error": str(e), "kind": "io"})
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

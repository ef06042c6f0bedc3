"""Exit criteria. Each test records one PASS/FAIL line, printed in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

import oracles
from oryx import niah, posembed
from oryx.compressor import DynamicCompressor, compress, compressed_tokens, downsample, region_attention
from oryx.geometry import PatchGrid, Resolution, patch_grid, plan_video_resolution
from oryx.harness import GROUPS, STACK_PREFIXES, Stage, StageSchedule, ToyOryx, Trainer, stack_gradcheck, synthetic_batch
from oryx.packing import Attention, dense_oracle_attention, pack, segment_attention, unpack
from oryx.structures import FeatureMap

RESULTS: list[str] = []


@contextmanager
def criterion(number, name, budget_s):
    t0 = time.perf_counter()
    detail = {}
    try:
        yield detail
    except BaseException as e:
        RESULTS.append(f"[FAIL] C{number} {name}: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        raise
    elapsed = time.perf_counter() - t0
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    if elapsed >= budget_s:
        RESULTS.append(f"[FAIL] C{number} {name}: {elapsed:.2f}s exceeds {budget_s}s budget {extra}")
        pytest.fail(f"criterion {number} took {elapsed:.2f}s (budget {budget_s}s)")
    RESULTS.append(f"[PASS] C{number} {name} ({elapsed:.2f}s / {budget_s}s) {extra}".rstrip())


def test_c1_token_bounds():
    with criterion(1, "video token bounds 324..900", 1.0) as d:
        square = [patch_grid(plan_video_resolution(Resolution(s, s))).token_count for s in range(16, 4097)]
        assert min(square) == 324 and max(square) == 900
        # non-square frames (up to 21:9 either way) never exceed the upper bound
        wide = []
        for s in range(16, 4097, 7):
            for num, den in [(4, 3), (16, 9), (21, 9), (3, 2)]:
                for h, w in [(s, s * num // den), (s * num // den, s)]:
                    if min(h, w) >= 1:
                        wide.append(patch_grid(plan_video_resolution(Resolution(h, w))).token_count)
        assert max(wide) <= 900
        d.update(min=min(square), max=max(square))


def test_c2_ratio_law():
    with criterion(2, "ratio law d3 = 4 d2 = 16 d1", 5.0) as d:
        w = DynamicCompressor(4, 4, seed=0).double()
        checked = 0
        for rows in range(4, 65, 4):
            for cols in range(4, 65, 4):
                t = {r: compressed_tokens(rows, cols, r) for r in (1, 2, 4)}
                assert t[1] == 4 * t[2] == 16 * t[4]
                f = FeatureMap(torch.zeros(rows, cols, 4, dtype=torch.float64))
                with torch.no_grad():
                    actual = {r: compress(f, r, None, w).shape[0] for r in (1, 2, 4)}
                assert actual == t
                checked += 1
        d.update(grids=checked)


def test_c3_packed_attention_oracle():
    with criterion(3, "packed attention == per-segment dense", 60.0) as d:
        rng = np.random.default_rng(0)
        worst = 0.0
        for trial in range(200):
            heads = int(rng.choice([1, 2, 4]))
            c = heads * int(rng.integers(1, 32 // heads + 1))
            lengths = rng.integers(1, 65, size=int(rng.integers(1, 9))).tolist()
            torch.manual_seed(trial)
            attn = Attention(c, heads)
            xs = [torch.from_numpy(rng.normal(size=(n, c)).astype(np.float32)) for n in lengths]
            with torch.no_grad():
                out = unpack(segment_attention(pack(xs), attn))
                for x, y in zip(xs, out):
                    err = np.abs(y.numpy().astype(np.float64) - dense_oracle_attention(x.numpy(), attn)).max()
                    worst = max(worst, float(err))
                if len(xs) > 1:
                    k = int(rng.integers(len(xs)))
                    ys = list(xs)
                    ys[k] = ys[k] + torch.from_numpy(rng.normal(size=ys[k].shape).astype(np.float32))
                    out2 = unpack(segment_attention(pack(ys), attn))
                    for i in range(len(xs)):
                        if i != k:
                            assert torch.equal(out[i], out2[i])
        assert worst <= 1e-6
        d.update(max_abs_err=f"{worst:.2e}")


def test_c4_posembed_identity_and_oracle():
    with criterion(4, "position-table identity and bilinear oracle", 10.0) as d:
        for g_r, g_c, ch in [(128, 128, 32), (7, 3, 2), (1, 1, 4)]:
            t = posembed.build_table(g_r, g_c, ch, seed=g_r)
            assert torch.equal(posembed.interpolate(t, PatchGrid(g_r, g_c, 16)), t.values)
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            table = rng.normal(size=(int(rng.integers(1, 10)), int(rng.integers(1, 10)), int(rng.integers(1, 4))))
            rows, cols = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            out = posembed.interpolate(posembed.PositionTable(torch.from_numpy(table)), PatchGrid(rows, cols, 16))
            worst = max(worst, float(np.abs(out.numpy() - oracles.bilinear(table, rows, cols)).max()))
        assert worst <= 1e-12
        d.update(max_abs_err=f"{worst:.2e}")


def test_c5_region_attention_closed_forms():
    with criterion(5, "region cross-attention closed forms and oracle", 30.0) as d:
        rng = np.random.default_rng(2)
        w = DynamicCompressor(8, 8, seed=2).double()
        f_h = FeatureMap(torch.from_numpy(rng.normal(size=(5, 6, 8))))
        assert torch.equal(region_attention(f_h, f_h, 1, w).values, f_h.values + f_h.values)

        zero = DynamicCompressor(8, 8, seed=3).double()
        with torch.no_grad():
            zero.phi_q.weight.zero_()
            zero.phi_q.bias.zero_()
            zero.phi_k.weight.zero_()
        for r in (2, 4):
            f_l = downsample(f_h, r)
            out, attn = region_attention(f_l, f_h, r, zero, return_weights=True)
            assert torch.equal(attn, torch.full_like(attn, 1 / r ** 2))
            assert torch.allclose(out.values, 2 * f_l.values, rtol=0, atol=1e-12)

        worst = 0.0
        for _ in range(100):
            r = int(rng.choice([1, 2, 4]))
            c = int(rng.integers(1, 9)) * 4
            rows, cols = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            w = DynamicCompressor(c, 4).double()
            with torch.no_grad():
                for p in (w.phi_q.weight, w.phi_q.bias, w.phi_k.weight):
                    p.copy_(torch.from_numpy(rng.normal(scale=0.3, size=tuple(p.shape))))
            f_h = FeatureMap(torch.from_numpy(rng.normal(size=(rows, cols, c))))
            f_l = downsample(f_h, r)
            with torch.no_grad():
                out, attn = region_attention(f_l, f_h, r, w, return_weights=True)
            ref, _ = oracles.region_attention(f_l.values.numpy(), f_h.values.numpy(), r,
                                              w.phi_q.weight.detach().numpy(), w.phi_q.bias.detach().numpy(),
                                              w.phi_k.weight.detach().numpy(), np.zeros(w.d_k))
            worst = max(worst, float(np.abs(out.values.numpy() - ref).max()))
            assert np.abs(attn.sum(-1).numpy() - 1).max() <= 1e-12
        assert worst <= 1e-10
        d.update(max_abs_err=f"{worst:.2e}")


def test_c6_gradient_fidelity():
    with criterion(6, "finite-difference gradient fidelity", 120.0) as d:
        res = stack_gradcheck(probes=50, seed=0)
        covered = {p["prefix"] for p in res.probes}
        for needed in ("compressor.phi_q", "compressor.phi_k", "compressor.shared_mlp", "encoder.blocks"):
            assert needed in covered
        assert len(res.probes) >= 50
        assert res.max_rel_error <= 1e-4
        d.update(probes=len(res.probes), max_rel_err=f"{res.max_rel_error:.2e}")


def test_c7_freeze_exactness():
    with criterion(7, "frozen groups bitwise unchanged after 100 steps", 60.0) as d:
        batch = synthetic_batch(7)
        for stage in Stage:
            model = ToyOryx(seed=7)
            before = {n: p.detach().clone() for n, p in model.named_parameters()}
            schedule = StageSchedule.for_stage(stage)
            Trainer(model, schedule, lr=0.05).fit(batch, 100)
            for n, p in model.named_parameters():
                if model.group_of(n) not in schedule.trainable:
                    assert torch.equal(p, before[n]), f"{stage.value}: {n} moved"
            moved = {model.group_of(n) for n, p in model.named_parameters() if not torch.equal(p, before[n])}
            assert moved == set(schedule.trainable), f"{stage.value}: trained {moved}"
        d.update(stages=len(Stage))


def test_c8_niah_bounds():
    with criterion(8, "NIAH grid bounds and reproducibility", 120.0) as d:
        hi = niah.eval_grid(niah.oracle_retriever, trials=2, seed=0)
        lo = niah.eval_grid(niah.constant_retriever("not the needle"), trials=2, seed=0)
        assert hi.accuracy.shape == (11, 16)
        assert np.all(hi.accuracy == 1.0) and np.all(lo.accuracy == 0.0)
        again = niah.eval_grid(niah.oracle_retriever, trials=2, seed=0)
        assert hi.to_csv().encode() == again.to_csv().encode()
        d.update(cells=hi.accuracy.size)


def test_c9_smoke_training():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # budget is stated for one core
    try:
        _smoke_training()
    finally:
        torch.set_num_threads(threads)


def _smoke_training():
    with criterion(9, "Stage2Joint smoke training on mixed 1x/2x/4x batch (1 thread)", 300.0) as d:
        batch = synthetic_batch(0)
        assert [s.route.value for s in batch] == ["Image", "ShortVideo", "LongVideo"]
        model = ToyOryx(seed=0)
        schedule = StageSchedule.for_stage(Stage.STAGE2_JOINT)
        trainer = Trainer(model, schedule, lr=0.05)
        trainer.train_step(batch)
        for group, params in model.groups().items():
            if group in schedule.trainable:
                assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for _, p in params), group
        history = trainer.fit(batch, 199)
        assert len(history) == 200 and history[-1] < history[0]
        d.update(initial=f"{history[0]:.4f}", final=f"{history[-1]:.4f}")


if __name__ == "__main__":
    import sys
    code = pytest.main([__file__, "-q"])
    sys.exit(code)

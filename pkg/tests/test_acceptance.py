"""The ten acceptance criteria, one test each (criterion 8 has a second test for its time budget).

Every test records a ``criterion N: PASS|FAIL ...`` line that is printed in the
terminal summary.
"""
import json
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE, FD_STEP, ReluPatterns, check_grads, check_module_grads
from test_kernels import _instances, naive_dyconv
from test_tensor import ELEMENTWISE, SHAPED

from laconv import kernels, synth
from laconv import tensor as T
from laconv.cli import capture_maps, main
from laconv.cost import Layer, flops_of, params_of
from laconv.layer import LaConvBlock, pixel_pack, pixel_unpack, pixel_unpack_condition
from laconv.net import LaConvNet, ablate, build, shape_audit
from laconv.text import Vocabulary, features_from_array, tokenize
from laconv.train import Dataset, random_baseline, lr_schedule

BUDGET_S = 45 * 60
VOCAB = Vocabulary(synth.vocabulary_tokens())


def record(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    print(ACCEPTANCE[-1])


def test_criterion_1_gradients(monkeypatch):
    t0 = time.perf_counter()
    errors = {}
    rng = np.random.default_rng(0)
    for name, (fn, arrays) in {**ELEMENTWISE, **SHAPED}.items():
        errors[name] = check_grads(fn, arrays)
    x = rng.permutation(2 * 4 * 4 * 3).reshape(2, 4, 4, 3) * 0.1
    errors["max_pool2x2"] = check_grads(T.max_pool2x2, [x])
    for residual in (False, True):
        for relu in (False, True):
            def bn(x, gamma, beta, res):
                st = T.BatchNormState(3, dtype=np.float64)
                return T.batch_norm(x, gamma, beta, st, True, residual=res if residual else None, relu=relu)
            arrays = [rng.standard_normal((6, 2, 3)), rng.uniform(0.5, 2, 3), rng.standard_normal(3),
                      rng.standard_normal((6, 2, 3)) + 0.5]
            errors[f"batch_norm(residual={residual},relu={relu})"] = check_grads(bn, arrays)
    for k, g, s in [(3, 1, 1), (3, 4, 1), (5, 2, 2), (7, 8, 4)]:
        arrays = [rng.standard_normal((2, 4, 4, 8)), rng.standard_normal((2, 4 // s, 4 // s, k * k * g))]
        errors[f"dyconv(k={k},g={g},s={s})"] = check_grads(
            lambda x, w: T.dynamic_depthwise_conv(x, w, k, g, s), arrays)

    blk = LaConvBlock(8, 6, 3, 2, 2, rng=rng, dtype=np.float64)
    for b in (blk.bn, blk.mlp.bn_a, blk.mlp.bn_b):
        b.beta.data[:] = rng.standard_normal(b.beta.shape) * 0.1
    blk.conv.b_1.data[:] = rng.standard_normal(blk.conv.b_1.shape) * 0.1
    xb = T.Tensor(rng.standard_normal((2, 4, 4, 8)))
    yb = T.Tensor(rng.standard_normal((2, 3, 6)))
    tensors = {**dict(blk.named_parameters()), "x": xb, "y": yb}
    block_err, skipped, total = check_module_grads(tensors, lambda: blk(xb, features_from_array(yb)),
                                                   patterns=ReluPatterns(monkeypatch))
    errors["laconv_block(4x4x8)"] = max(block_err.values())
    elapsed = time.perf_counter() - t0

    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-3 and elapsed < 120 and skipped <= 0.05 * total
    record(1, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (< 1e-3), step {FD_STEP}, "
                  f"{skipped}/{total} block coords skipped at relu kinks, {elapsed:.0f}s (< 120s)")
    assert ok


def test_criterion_2_conv_oracle():
    t0 = time.perf_counter()
    worst, count, seen = 0.0, 0, set()
    for x, ker, k, g in _instances(108, seed=1):
        d = x.shape[-1]
        seen.add((k, {1: "1", d // 4: "d/4", d: "d"}[g]))
        got = T.dynamic_depthwise_conv(T.Tensor(x), T.Tensor(ker), k, g).data
        worst = max(worst, float(np.abs(got - naive_dyconv(x, ker, k, g)).max()))
        count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 100 and worst < 1e-5 and len(seen) == 9 and elapsed < 60
    record(2, ok, f"{count} instances, {len(seen)} (k, g) combos, max |diff| {worst:.1e} (< 1e-5), "
                  f"backend {kernels.BACKEND}, {elapsed:.0f}s (< 60s)")
    assert ok


def test_criterion_3_flops_ratio():
    rng = np.random.default_rng(3)
    bad = []
    for _ in range(50):
        h, w, d = (int(v) for v in rng.integers(1, 128, 3))
        k = int(rng.choice([1, 3, 5, 7, 9]))
        if flops_of(Layer("dyconv", d, k=k), h, w) * d != flops_of(Layer("conv", d, d, k=k), h, w):
            bad.append((h, w, d, k))
    record(3, not bad, f"flops(dyconv)*d == flops(conv) on {50 - len(bad)}/50 shapes")
    assert not bad


def test_criterion_4_param_ratio():
    ratio = Fraction(params_of(Layer("generator", 256, k=7, g=16)), params_of(Layer("conv", 256, 256, k=7)))
    pinned = Fraction(463632, 3211264)
    ok = Fraction(3, 49) <= ratio <= Fraction(8, 49) and ratio == pinned
    record(4, ok, f"generator/conv params = {ratio.numerator}/{ratio.denominator} = {float(ratio):.5f} "
                  f"in [{3 / 49:.5f}, {8 / 49:.5f}], pinned {float(pinned):.5f}")
    assert ok


def test_criterion_5_table_fidelity():
    s, b = build("paper-S"), build("paper-B")
    audits = [shape_audit(c, 224) for c in (s, b)]
    ok = ((s.total_blocks, b.total_blocks) == (10, 19)
          and all(c.channels == [16, 64, 128, 256, 512] and c.packing == [8, 4, 2, 1, 1] for c in (s, b))
          and audits[0] == audits[1] == [(112, 16), (56, 64), (28, 128), (14, 256), (7, 512)])
    record(5, ok, f"blocks {s.total_blocks}/{b.total_blocks}, channels {s.channels}, packing {s.packing}, "
                  f"audit at 224 ends at {audits[0][-1]}")
    assert ok


def _swap_word(expr, rng):
    words = expr.split()
    i = int(rng.integers(len(words)))
    while words[i] not in synth.COLORS and words[i] not in synth.SHAPES:
        i = (i + 1) % len(words)
    pool = synth.COLORS if words[i] in synth.COLORS else synth.SHAPES
    words[i] = str(rng.choice([w for w in pool if w != words[i]]))
    return " ".join(words)


def test_criterion_6_language_guidance():
    cfg = build("toy")
    net = LaConvNet(cfg, len(VOCAB), seed=0, dtype=np.float64)
    net.eval()
    rng = np.random.default_rng(6)
    exprs, swapped, imgs = [], [], []
    for seed in range(100):
        scene = synth.gen_scene(seed)
        kind = ("attribute", "spatial")[seed % 2]
        try:
            expr = synth.gen_expression(scene, kind, rng)[0]
        except synth.NoReferent:
            expr = synth.gen_expression(scene, "attribute", rng)[0]
        exprs.append(tokenize(expr, VOCAB))
        swapped.append(tokenize(_swap_word(expr, rng), VOCAB))
        imgs.append(synth.render(scene))
    img = T.Tensor(np.stack(imgs).astype(np.float64))
    a = net.backbone(img, net.encode(exprs))[-1].data
    b = net.backbone(img, net.encode(swapped))[-1].data
    diffs = np.abs(a - b).reshape(100, -1).max(1)
    hits = int((diffs > 1e-4).sum())

    lo = LaConvNet(ablate(cfg, language_only=True), len(VOCAB), seed=0, dtype=np.float64)
    constant = True
    for stage, st in enumerate(cfg.stages):
        for block in range(st.blocks):
            _, ker = capture_maps(lo, imgs[0].astype(np.float64), exprs[:1], stage, block).full()
            constant &= bool((ker == ker[:, :1, :1]).all())
    ok = hits >= 95 and constant
    record(6, ok, f"{hits}/100 word swaps move final features by > 1e-4 (min L-inf {diffs.min():.2e}); "
                  f"language-only kernels position-constant in all {cfg.total_blocks} blocks: {constant}")
    assert ok


def test_criterion_7_packing():
    rng = np.random.default_rng(7)
    exact = True
    for s in (1, 2, 4, 8):
        x = T.Tensor(rng.standard_normal((2, 16, 8, 5)).astype(np.float32))
        tok = pixel_pack(x, s)
        exact &= pixel_unpack(tok, s, 16, 8).data.tobytes() == x.data.tobytes()
        exact &= pixel_pack(pixel_unpack(tok, s, 16, 8), s).data.tobytes() == tok.data.tobytes()

    net = LaConvNet(build("toy"), len(VOCAB), seed=0)
    img = synth.render(synth.gen_scene(0))
    ids = [tokenize("red disc left of blue square", VOCAB)]
    cell_const = True
    for stage, st in enumerate(net.cfg.stages):
        m = capture_maps(net, img, ids, stage, 0)
        _, hs, ws, d = m.condition.shape
        s, h = st.packing, m.condition.shape[1] * st.packing
        full = pixel_unpack_condition(T.reshape(m.condition, (1, hs * ws, d)), s, h, h).data
        cells = full.reshape(1, hs, s, ws, s, d)
        cell_const &= bool((cells == m.condition.data[:, :, None, :, None]).all())

    runnable = []
    for name in ("toy", "paper-S", "paper-B"):
        cfg = ablate(build(name), no_packing=True)
        runnable.append(shape_audit(cfg) == shape_audit(build(name)) and set(cfg.packing) == {1})
    plain = LaConvNet(ablate(build("toy"), no_packing=True), len(VOCAB), seed=0)
    out = plain(T.Tensor(img[None]), ids)
    ok = exact and cell_const and all(runnable) and out.shape == (1, 64)
    record(7, ok, f"pack/unpack bit-exact for s in 1,2,4,8: {exact}; condition constant per cell in every toy "
                  f"stage: {cell_const}; s=1 audits pass for toy/paper-S/paper-B: {all(runnable)}, toy forward runs")
    assert ok


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """The full 40-epoch toy run, shared by the two criterion-8 tests."""
    root = tmp_path_factory.mktemp("toy")
    assert main(["gen-data", "--out", str(root / "data"), "--n-train", "10000", "--n-test", "2000",
                 "--seed", "0"]) == 0
    t0 = time.perf_counter()
    rc = main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config", "toy",
               "--epochs", "40", "--lr", "1e-4", "--warmup", "3", "--seed", "0"])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    rows = [json.loads(l) for l in (root / "run" / "metrics.jsonl").read_text().splitlines()]
    return root, rows, elapsed


@pytest.mark.slow
def test_criterion_8_learning(toy_run):
    root, rows, elapsed = toy_run
    final = rows[-1]
    test = Dataset(synth.read_jsonl(root / "data" / "test.jsonl"), VOCAB)
    base = random_baseline(test, 64)
    ok = (len(rows) == 40 and final["eval_acc_attr"] >= 0.95 and final["eval_acc_spatial"] >= 0.85
          and abs(base["acc"] - 1 / 64) < 0.01)
    record(8, ok, f"attribute acc {final['eval_acc_attr']:.4f} (>= 0.95), spatial acc "
                  f"{final['eval_acc_spatial']:.4f} (>= 0.85), random baseline {base['acc']:.4f} (1/64 = 0.0156)")
    assert ok


@pytest.mark.slow
def test_criterion_8_wall_clock(toy_run):
    _, _, elapsed = toy_run
    ok = elapsed < BUDGET_S
    cores = os.cpu_count()
    record(8, ok, f"wall clock {elapsed / 60:.1f} min for 40 epochs (< 45 min budget is for a 4-core desktop; "
                  f"this machine has {cores} core{'s' * (cores != 1)})")
    if not ok and cores < 4:
        pytest.xfail(f"{elapsed / 60:.1f} min on {cores} core(s); budget assumes 4 cores")
    assert ok


def test_criterion_9_schedule():
    steps = (10000 + 31) // 32
    warm, total = 3 * steps, 40 * steps
    at_warm, at_end = lr_schedule(warm, total, warm, 1e-4), lr_schedule(total, total, warm, 1e-4)
    ok = at_warm == 1e-4 and at_end < 1e-12
    record(9, ok, f"lr at warmup end (step {warm}) = {at_warm!r}, at final step {total} = {at_end!r}")
    assert ok


def test_criterion_10_determinism(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--n-train", "256", "--n-test", "64"]) == 0
    blobs = []
    # identical flags twice, then once more into another directory
    for out in ("run", "run", "elsewhere"):
        argv = ["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / out), "--config", "toy",
                "--epochs", "3", "--warmup", "1", "--lr", "1e-3", "--seed", "0", "--no-timestamp"]
        assert main(argv) == 0
        blobs.append((tmp_path / out / "best.lckp").read_bytes())
    ok = blobs[0] == blobs[1] == blobs[2]
    record(10, ok, f"three 3-epoch toy runs (two with identical flags, one to another --out): best.lckp "
                   f"byte-identical ({len(blobs[0]):,} bytes)")
    assert ok

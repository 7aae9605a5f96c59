"""Exit criteria for the build, one test per criterion at its stated tolerance."""

import itertools
import os
import subprocess
import sys
import time
import warnings

import numpy as np

import oracles
from fineq.baselines import uniform_quantize
from fineq.codec import pack_block, pack_tensor, unpack_block, unpack_tensor
from fineq.evaluate import error_metrics, protected_error_ratio
from fineq.quant import (
    ChannelQuantParams,
    QuantConfig,
    _select,
    average_bits,
    dequantize_matrix,
    harmonize_pair,
    quantize_matrix,
    select_scheme,
)
from fineq.sim import SimConfig, estimate, hw_decode, run_matmul, temporal_encode
from fineq.synth import GenSpec, gen
from fineq.tensor_io import FloatTensor


def _weights(rng, m, k):
    w = rng.standard_normal((m, k)) * 0.05
    w[rng.random((m, k)) < 0.05] *= 10
    return FloatTensor(w.astype(np.float32))


def test_c01_average_bit_width(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    values = []
    for _ in range(40):
        rows = int(rng.integers(1, 50))
        length = 24 * int(rng.integers(1, 12))
        axis = ["row", "col"][int(rng.integers(2))]
        shape = (rows, length) if axis == "row" else (length, rows)
        q = quantize_matrix(FloatTensor(rng.standard_normal(shape), channel_axis=axis))
        values.append(average_bits(q))
    elapsed = time.perf_counter() - t0
    ok = all(v == 56 / 24 for v in values) and elapsed < 1.0
    acceptance(1, "avg payload bits == 56/24 (2.3333)", ok, f"({elapsed:.2f}s)")
    assert ok


def test_c02_codec_exhaustive_and_random(acceptance):
    t0 = time.perf_counter()
    cases = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for code, field in itertools.product(range(4), range(64)):
            raw = bytes([code << 6]) + (field << 42).to_bytes(6, "big")
            clusters = unpack_block(raw)
            assert [(int(c.scheme), c.q) for c in clusters] == oracles.unpack_block_bits(raw)
            assert unpack_block(pack_block(clusters)) == clusters
            cases += 1
    rng = np.random.default_rng(102)
    for i in range(1000):
        r, c = (int(v) for v in rng.integers(1, 60, size=2))
        q = quantize_matrix(_weights(rng, r, c), QuantConfig(channel_axis="row" if i % 2 else "col"))
        p = pack_tensor(q)
        assert unpack_tensor(p) == q
        assert pack_tensor(unpack_tensor(p)) == p
    elapsed = time.perf_counter() - t0
    ok = cases == 256 and elapsed < 10
    acceptance(2, "codec roundtrip: 256 cluster cases + 1000 tensors", ok, f"({elapsed:.2f}s)")
    assert ok


def test_c03_decoder_equivalence(acceptance):
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for code, field, slot in itertools.product(range(4), range(64), range(8)):
            raw = bytes([code << (6 - 2 * (slot // 2))]) + (field << (42 - 6 * slot)).to_bytes(6, "big")
            assert hw_decode(raw) == [v for c in unpack_block(raw) for v in c.q]
        rng = np.random.default_rng(103)
        blocks = rng.integers(0, 256, size=(10_000, 7), dtype=np.uint8)
        for row in blocks:
            raw = row.tobytes()
            assert hw_decode(raw) == [v for c in unpack_block(raw) for v in c.q]
    elapsed = time.perf_counter() - t0
    ok = elapsed < 10
    acceptance(3, "hw_decode == unpack_block (exhaustive + 1e4 random)", ok, f"({elapsed:.2f}s)")
    assert ok


def test_c04_simulator_functional(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(100):
        m, k, n = (int(v) for v in rng.integers(1, 257, size=3))
        q = quantize_matrix(_weights(rng, m, k))
        x = FloatTensor(rng.standard_normal((k, n)))
        y, _ = run_matmul(q, x)
        ref = dequantize_matrix(q).data.astype(np.float64) @ x.data.astype(np.float64)
        scale = max(float(np.abs(ref).max()), 1e-30)
        worst = max(worst, float(np.abs(y.data - ref).max()) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    acceptance(4, "run_matmul == dequant(W) @ X within 1e-4 rel (100 shapes)", ok,
               f"(max rel {worst:.2e}, {elapsed:.2f}s)")
    assert ok


def test_c05_cycle_model(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    mismatches = 0
    for _ in range(50):
        m, k, n = (int(v) for v in rng.integers(1, 200, size=3))
        q = quantize_matrix(_weights(rng, m, k))
        x = FloatTensor(rng.standard_normal((k, n)))
        mags = np.abs(q.int_matrix())
        ys = []
        for et in (True, False):
            cfg = SimConfig(early_termination=et)
            y, s = run_matmul(q, x, cfg)
            e = estimate(cfg, (m, k, n), mags)
            mismatches += s.stage_cycles["matmul"] != e.stage_cycles["matmul"]
            mismatches += s.counters() != e.counters()
            ys.append(y)
        mismatches += ys[0] != ys[1]
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    acceptance(5, "simulated cycles == estimate(); early termination keeps Y", ok, f"({elapsed:.2f}s)")
    assert ok


def test_c06_temporal_coding(acceptance):
    checked = 0
    for length in (1, 2, 3):
        for mag in range(0, length + 1):
            for sign in (1, -1):
                b = temporal_encode(mag, length, sign)
                assert len(b.bits) == length and sum(b.bits) == mag
                assert b.value == sign * mag
                checked += 1
    # magnitude 2 in a full 3-cycle stream carries two ones
    ok = sum(temporal_encode(2).bits) == 2 and checked == 2 * (2 + 3 + 4)
    acceptance(6, "bitstream ones-count == magnitude (0-3, lengths 1-3)", ok)
    assert ok


def test_c07_outlier_protection(acceptance):
    t0 = time.perf_counter()
    wins = 0
    bound_ok = 0
    seeds = range(50)
    for seed in seeds:
        t = gen(GenSpec(rows=512, cols=512, outlier_magnitude_mult=8.0,
                        outlier_channel_fraction=0.1, seed=seed))
        q = quantize_matrix(t)
        fine = error_metrics(t, dequantize_matrix(q))["mse"]
        uni = error_metrics(t, uniform_quantize(t, 2).dequantized)["mse"]
        wins += fine < uni
        bound_ok += protected_error_ratio(t, q) <= 1 + 1e-6
    elapsed = time.perf_counter() - t0
    ok = wins >= 0.95 * len(seeds) and bound_ok == len(seeds) and elapsed < 120
    acceptance(7, "FineQ MSE < uniform 2-bit on >=95% seeds; protected err <= s3/2", ok,
               f"(wins {wins}/50, bound {bound_ok}/50, {elapsed:.2f}s)")
    assert ok


def test_c08_harmonization_optimality(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(108)
    checked = 0
    violations = 0
    while checked < 10_000:
        a = rng.standard_normal(3) * 0.05
        b = rng.standard_normal(3) * 0.05
        for c in (a, b):
            if rng.random() < 0.5:
                c[rng.integers(3)] *= rng.uniform(2, 12)
            if rng.random() < 0.1:
                c[rng.integers(3)] = 0.0
        if oracles.select(list(a)) == oracles.select(list(b)):
            continue
        s3 = float(np.float32(max(np.abs(a).max(), np.abs(b).max(), 1e-3) / 3 * rng.uniform(1, 2)))
        chosen = int(harmonize_pair(a, b, ChannelQuantParams(s3)))
        losses = [oracles.pair_loss(list(a), list(b), s, s3) for s in range(4)]
        violations += any(losses[chosen] > alt * (1 + 1e-12) + 1e-300 for alt in losses)
        checked += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 10
    acceptance(8, "harmonized scheme minimises joint SSE (1e4 disagreeing pairs)", ok, f"({elapsed:.2f}s)")
    assert ok


def test_c09_scheme_selection(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(109)
    n = 100_000
    base = rng.choice([0.0, 0.1, 0.25, 0.4, 1.0, 1.6, 2.5], size=(n, 3))
    base *= rng.choice([-1.0, 1.0], size=(n, 3))
    noisy = rng.random(n) < 0.5
    base[noisy] = rng.standard_normal((int(noisy.sum()), 3))
    vec = _select(base)
    mismatches = 0
    for row, v in zip(base, vec):
        expect = oracles.select(list(row))
        mismatches += int(v) != expect
        mismatches += int(select_scheme(row)) != expect
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0
    acceptance(9, "select_scheme == brute-force 4x rule (1e5 clusters)", ok, f"({elapsed:.2f}s)")
    assert ok


def _run(args, threads, cwd):
    env = dict(os.environ, FINEQ_THREADS=str(threads))
    res = subprocess.run([sys.executable, "-m", "fineq.cli", *args], cwd=cwd, env=env,
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return res.stdout


def test_c10_determinism(acceptance, tmp_path):
    outputs = {}
    for threads in (1, 8):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        stdout = [
            _run(["gen", "--rows", "96", "--cols", "120", "--seed", "7", "-o", "w.json"], threads, d),
            _run(["quantize", "w.json", "-o", "w.fq", "--report", "q.json"], threads, d),
            _run(["dequantize", "w.fq", "-o", "d.json"], threads, d),
            _run(["eval", "w.json", "--bits", "2", "4", "--simulate", "--sim-n", "9", "--seed", "3",
                  "--report", "e.json"], threads, d),
            _run(["simulate", "w.fq", "--random", "11", "--seed", "5", "--check", "--report", "s.json",
                  "--output", "y.json"], threads, d),
        ]
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        outputs[threads] = (stdout, files)
    ok = outputs[1] == outputs[8]
    acceptance(10, "byte-identical outputs with FINEQ_THREADS 1 and 8", ok,
               f"({len(outputs[1][1])} files compared)")
    assert ok

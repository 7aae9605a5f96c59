import itertools
import warnings

import numpy as np
import pytest

import oracles
from fineq.codec import pack_tensor, unpack_block
from fineq.errors import ValidationError
from fineq.quant import QuantConfig, dequantize_matrix, quantize_matrix
from fineq.sim import (
    EVENT_KINDS,
    ActivityStats,
    SimConfig,
    estimate,
    hw_decode,
    pe_tile_matmul,
    run_matmul,
    temporal_encode,
)
from fineq.tensor_io import FloatTensor


def _weights(rng, m, k, outliers=0.05):
    w = rng.standard_normal((m, k)) * 0.05
    w[rng.random((m, k)) < outliers] *= 10
    return FloatTensor(w.astype(np.float32))


def _ref(q, x):
    return dequantize_matrix(q).data.astype(np.float64) @ x.data.astype(np.float64)


def _rel(y, ref):
    return float(np.abs(y.data - ref).max()) / max(float(np.abs(ref).max()), 1e-30)


# -- temporal encoder ------------------------------------------------------


def test_encode_two():
    assert temporal_encode(2).bits == (1, 1, 0)
    assert temporal_encode(2, length=2).bits == (1, 1)


def test_encode_one_unary_prefix():
    # the ones-count is what matters; unary prefix form '10' rather than '01'
    assert temporal_encode(1, length=2).bits == (1, 0)


def test_encode_zero():
    assert temporal_encode(0).bits == (0, 0, 0)
    assert temporal_encode(0, length=1).bits == (0,)


@pytest.mark.parametrize("bad", [-1, 4, 1.5])
def test_encode_off_grid(bad):
    with pytest.raises(ValidationError):
        temporal_encode(bad)


def test_encode_magnitude_longer_than_group():
    with pytest.raises(ValidationError):
        temporal_encode(3, length=2)


# -- decoder ----------------------------------------------------------------


def test_hw_decode_zero_block():
    assert hw_decode(bytes(7)) == [0] * 24


def test_hw_decode_matches_bit_oracle_exhaustive():
    for code, f in itertools.product(range(4), range(64)):
        for slot in range(8):
            raw = bytes([code << (6 - 2 * (slot // 2))]) + (f << (42 - 6 * slot)).to_bytes(6, "big")
            expect = [v for _, q in oracles.unpack_block_bits(raw) for v in q]
            assert hw_decode(raw) == expect


def test_hw_decode_zero_second_middle_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(200):
        payload = rng.integers(0, 256, 6, dtype=np.uint8).tobytes()
        out = hw_decode(bytes([0b10_10_10_10]) + payload)
        assert all(out[3 * c + 1] == 0 for c in range(8))


def test_hw_decode_equals_codec_random():
    rng = np.random.default_rng(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(2000):
            raw = rng.integers(0, 256, 7, dtype=np.uint8).tobytes()
            assert hw_decode(raw) == [v for c in unpack_block(raw) for v in c.q]


# -- PE array ---------------------------------------------------------------


def test_tile_small_example():
    w = np.array([[1, -3], [0, 2]])
    x = np.array([[2.0], [1.0]])
    stats = ActivityStats()
    y = pe_tile_matmul(w, x, stats)
    assert y.tolist() == oracles.matmul(w.tolist(), x.tolist()) == [[-1.0], [2.0]]
    assert stats.stage_cycles["matmul"] == 3 + 2
    assert stats.selector_activations == (1 + 3 + 0 + 2) * 1


def test_tile_identity():
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(pe_tile_matmul(np.eye(5, dtype=int), x, ActivityStats()), x)


def test_tile_zero_row_one_cycle():
    stats = ActivityStats()
    y = pe_tile_matmul(np.zeros((1, 4), dtype=int), np.ones((4, 3)), stats)
    assert stats.stage_cycles["matmul"] == 1 and not y.any()


def test_tile_without_early_termination_takes_three_cycles():
    stats = ActivityStats()
    pe_tile_matmul(np.zeros((4, 4), dtype=int), np.ones((4, 3)), stats, SimConfig(early_termination=False))
    assert stats.stage_cycles["matmul"] == 12


def test_tile_overflow():
    cfg = SimConfig(array_rows=4, array_cols=4)
    with pytest.raises(ValidationError):
        pe_tile_matmul(np.zeros((2, 5), dtype=int), np.zeros((5, 2)), ActivityStats(), cfg)
    with pytest.raises(ValidationError):
        pe_tile_matmul(np.zeros((2, 4), dtype=int), np.zeros((4, 5)), ActivityStats(), cfg)


def test_tile_matches_triple_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m, k, n = rng.integers(1, 9, size=3)
        w = rng.integers(-3, 4, size=(m, k))
        x = rng.integers(-5, 6, size=(k, n)).astype(float)
        y = pe_tile_matmul(w, x, ActivityStats())
        assert y.tolist() == oracles.matmul(w.tolist(), x.tolist())


# -- full matmul ------------------------------------------------------------


def test_run_matmul_single_channel():
    q = quantize_matrix(FloatTensor(np.array([[0.3, -0.9, 0.0]])))
    assert q.q[0, 0].tolist() == [1, -3, 0]
    y, _ = run_matmul(q, FloatTensor(np.ones((3, 1))))
    assert y.data[0, 0] == pytest.approx(float(q.scales[0]) * -2, rel=1e-6)
    assert y.data[0, 0] == pytest.approx(-0.6, rel=1e-6)


def test_run_matmul_zero_activations():
    rng = np.random.default_rng(0)
    q = quantize_matrix(_weights(rng, 10, 20))
    y0, s0 = run_matmul(q, FloatTensor(np.zeros((20, 7))))
    y1, s1 = run_matmul(q, FloatTensor(rng.standard_normal((20, 7))))
    assert not y0.data.any()
    assert s0.selector_activations == s1.selector_activations


def test_run_matmul_128_cube():
    rng = np.random.default_rng(0)
    q = quantize_matrix(_weights(rng, 128, 128))
    x = FloatTensor(rng.standard_normal((128, 128)))
    y, stats = run_matmul(q, x)
    assert _rel(y, _ref(q, x)) <= 1e-4
    assert stats.tiles == 4


def test_run_matmul_packed_input_and_col_axis():
    rng = np.random.default_rng(4)
    w = _weights(rng, 37, 70)
    x = FloatTensor(rng.standard_normal((70, 9)))
    for axis in ("row", "col"):
        q = quantize_matrix(w, QuantConfig(channel_axis=axis))
        y1, s1 = run_matmul(q, x, SimConfig(array_rows=16, array_cols=4))
        y2, s2 = run_matmul(pack_tensor(q), x, SimConfig(array_rows=16, array_cols=4))
        assert y1 == y2 and s1 == s2
        assert _rel(y1, _ref(q, x)) <= 1e-4


def test_run_matmul_dim_mismatch():
    q = quantize_matrix(FloatTensor(np.ones((2, 3))))
    with pytest.raises(ValidationError):
        run_matmul(q, FloatTensor(np.ones((4, 2))))


def test_selector_activations_recount():
    rng = np.random.default_rng(5)
    q = quantize_matrix(_weights(rng, 20, 100))
    x = FloatTensor(rng.standard_normal((100, 70)))
    _, s = run_matmul(q, x, SimConfig(array_rows=32, array_cols=32))
    assert s.selector_activations == int(np.abs(q.int_matrix()).sum()) * 70


def test_energy_proxy_recomputable():
    rng = np.random.default_rng(6)
    q = quantize_matrix(_weights(rng, 8, 30))
    w = {k: float(i + 1) * 0.5 for i, k in enumerate(EVENT_KINDS)}
    _, s = run_matmul(q, FloatTensor(rng.standard_normal((30, 5))), SimConfig(energy_weights=w))
    assert s.energy_proxy == sum(w[k] * getattr(s, k) for k in EVENT_KINDS)


def test_overlap_reports_max_stage():
    rng = np.random.default_rng(7)
    q = quantize_matrix(_weights(rng, 8, 30))
    x = FloatTensor(rng.standard_normal((30, 5)))
    _, seq = run_matmul(q, x)
    _, ovl = run_matmul(q, x, SimConfig(pipeline_overlap=True))
    assert seq.total_cycles == sum(seq.stage_cycles.values())
    assert ovl.total_cycles == max(ovl.stage_cycles.values()) <= seq.total_cycles


def test_monotone_counters():
    rng = np.random.default_rng(8)
    big = _weights(rng, 80, 156).data.copy()
    # pin each row's max in column 0 and grow K by whole cluster pairs so the
    # existing integer grid is untouched
    big[:, 0] = 2.0
    xb = rng.standard_normal((156, 90))
    cfg = SimConfig(array_rows=32, array_cols=16)

    def counters(m, k, n):
        q = quantize_matrix(FloatTensor(big[:m, :k]))
        return run_matmul(q, FloatTensor(xb[:k, :n]), cfg)[1].counters()

    base = counters(40, 72, 40)
    for grown in (counters(41, 72, 40), counters(80, 72, 40), counters(40, 78, 40),
                  counters(40, 156, 40), counters(40, 72, 41), counters(40, 72, 90)):
        assert all(grown[key] >= base[key] for key in base), (grown, base)


# -- closed-form estimate -----------------------------------------------------


def test_estimate_all_three_no_termination():
    cfg = SimConfig(early_termination=False)
    assert estimate(cfg, (64, 64, 64)).stage_cycles["matmul"] == 192
    assert estimate(SimConfig(), (64, 64, 64), np.full((64, 64), 3)).stage_cycles["matmul"] == 192


def test_estimate_zero_weights():
    e = estimate(SimConfig(), (10, 100, 100), np.zeros((10, 100)))
    assert e.stage_cycles["matmul"] == 10 * 1 * 2 * 2


def test_estimate_doubling_n():
    mags = np.random.default_rng(0).integers(0, 4, (30, 70))
    a = estimate(SimConfig(), (30, 70, 64), mags).stage_cycles["matmul"]
    b = estimate(SimConfig(), (30, 70, 128), mags).stage_cycles["matmul"]
    assert b == 2 * a


def test_estimate_matches_simulation_all_counters():
    rng = np.random.default_rng(9)
    for et in (True, False):
        for _ in range(5):
            m, k, n = (int(v) for v in rng.integers(1, 100, size=3))
            q = quantize_matrix(_weights(rng, m, k))
            cfg = SimConfig(array_rows=16, array_cols=8, early_termination=et)
            _, s = run_matmul(q, FloatTensor(rng.standard_normal((k, n))), cfg)
            e = estimate(cfg, (m, k, n), np.abs(q.int_matrix()))
            assert e.counters() == s.counters()
            assert e.total_cycles == s.total_cycles


def test_estimate_bad_dims():
    with pytest.raises(ValidationError):
        estimate(SimConfig(), (0, 3, 3))


def test_sim_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(array_rows=0)
    with pytest.raises(ValidationError):
        SimConfig(bitstream_max_len=4)
    with pytest.raises(ValidationError):
        SimConfig(energy_weights={"flux": 1.0})

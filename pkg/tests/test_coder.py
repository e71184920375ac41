import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ted4.coder import (
    TOTAL, CoderError, RangeDecoder, RangeEncoder, SymbolCdf, TableDecoder, TableStream, build_cdf, cumulative,
    decode_mask, encode_mask, quantize_pmf, range_decode, range_encode,
)


def uniform_cdf(S):
    n = 2 * S + 2
    return SymbolCdf(cumulative(quantize_pmf(np.full((1, n), 1.0 / n)))[0], S, 0)


def test_single_symbol_roundtrip():
    cdf = build_cdf(0.0, 1.0, 1.0, 4)
    assert range_decode(range_encode([0], [cdf]), [cdf]) == [0]


def test_uniform_alphabet_costs_about_eight_bits():
    rng = np.random.default_rng(0)
    probs = np.full((1, 256), 1 / 256)
    cum = cumulative(quantize_pmf(probs))[0]
    enc = RangeEncoder()
    syms = rng.integers(0, 256, size=10_000)
    for s in syms:
        enc.encode(int(cum[s]), int(cum[s + 1] - cum[s]))
    data = enc.finish()
    assert 10_000 <= len(data) <= 10_000 + 8
    dec = RangeDecoder(data)
    out = []
    for _ in syms:
        v = dec.target()
        s = int(np.searchsorted(cum, v, side="right") - 1)
        dec.consume(int(cum[s]), int(cum[s + 1] - cum[s]))
        out.append(s)
    assert out == syms.tolist()


def test_escape_roundtrip_beyond_bound():
    cdf = build_cdf(0.0, 1.0, 1.0, 4)
    values = [0, 7, -100, 2**31 - 1, -(2**31), 4, -4, 5]
    cdfs = [cdf] * len(values)
    assert range_decode(range_encode(values, cdfs), cdfs) == values


def _oracle_freq(mu, sigma, q, S):
    import math

    phi = lambda x: 0.5 * (1 + math.erf(x / math.sqrt(2)))
    p = [phi((k * q + q / 2 - mu) / sigma) - phi((k * q - q / 2 - mu) / sigma) for k in range(-S, S + 1)]
    p.append(max(0.0, 1 - sum(p)))
    total = sum(p)
    target = [v / total * TOTAL for v in p]
    f = [max(int(math.floor(t)), 1) for t in target]
    order = sorted(range(len(p)), key=lambda i: -(target[i] - math.floor(target[i])))
    for i in order[: TOTAL - sum(f)]:
        f[i] += 1
    return f


def test_gaussian_table_frequencies():
    expected = [15, 392, 3971, 15842, 25095, 15842, 3971, 392, 15, 1]
    assert _oracle_freq(0.0, 1.0, 1.0, 4) == expected
    assert build_cdf(0.0, 1.0, 1.0, 4).freq.tolist() == expected


def test_malformed_cdf_rejected():
    with pytest.raises(CoderError):
        SymbolCdf(np.array([0, 10, 10, TOTAL]), 1, 0)  # zero-width bin
    with pytest.raises(CoderError):
        SymbolCdf(np.array([0, 10, 20, 30]), 1, 0)  # wrong total
    with pytest.raises(CoderError):
        range_encode([0], ["not a cdf"])


def test_truncated_stream_detected():
    cdf = uniform_cdf(100)
    rng = np.random.default_rng(1)
    syms = rng.integers(-100, 101, size=2000)
    stream = TableStream()
    cum = np.repeat(cdf.cum[None], len(syms), 0)
    stream.encode(syms, cum, 100, np.zeros(len(syms)))
    data = stream.finish()
    with pytest.raises(CoderError):
        TableDecoder(data[: len(data) // 2]).decode(cum, 100, np.zeros(len(syms)))


def test_quantize_pmf_totals_and_floor():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.full(50, 0.05), size=20)
    p[:, 0] = 0.0
    f = quantize_pmf(p)
    assert np.all(f.sum(1) == TOTAL)
    assert np.all(f >= 1)


def test_quantize_pmf_largest_remainder():
    # 3 equal bins: 65536 = 3 * 21845 + 1, the extra count goes to the first bin
    assert quantize_pmf(np.full((1, 3), 1 / 3))[0].tolist() == [21846, 21845, 21845]


def test_table_stream_many_symbols():
    rng = np.random.default_rng(7)
    n = 20_000
    mu = rng.normal(size=n) * 3
    sigma = rng.uniform(0.3, 3.0, size=n)
    idx = np.rint(mu + sigma * rng.normal(size=n)).astype(np.int64)
    from ted4.entropy import gaussian_bin_probs

    S = 12
    centers = np.rint(mu).astype(np.int64)
    grid = centers[:, None] + np.arange(-S, S + 1)
    p = gaussian_bin_probs(mu, sigma, np.ones(n), grid.astype(float))
    cum = cumulative(quantize_pmf(np.concatenate([p, np.clip(1 - p.sum(1, keepdims=True), 0, None)], 1)))
    ts = TableStream()
    ts.encode(idx, cum, S, centers)
    data = ts.finish()
    assert TableDecoder(data).decode(cum, S, centers).tolist() == idx.tolist()
    # close to the ideal cost
    ideal = -np.log2(gaussian_bin_probs(mu, sigma, np.ones(n), idx[:, None].astype(float))[:, 0]).sum() / 8
    assert len(data) < ideal * 1.02 + 64


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-40, 40), min_size=0, max_size=300), st.floats(0.2, 20.0))
def test_roundtrip_property(values, sigma):
    cdfs = [build_cdf(0.0, sigma, 1.0, 8)] * len(values)
    assert range_decode(range_encode(values, cdfs), cdfs) == values


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), max_size=2000))
def test_mask_roundtrip_property(bits):
    assert decode_mask(encode_mask(bits)) == [int(b) for b in bits]


def test_mask_sizes():
    assert len(encode_mask([0] * 10_000)) <= 16
    alt = [i % 2 for i in range(10_000)]
    assert len(encode_mask(alt)) < 10_000 / 8 + 64


def test_mask_truncated():
    with pytest.raises(CoderError):
        decode_mask(b"\x01\x00")
    data = encode_mask([1, 0] * 5000)
    with pytest.raises(CoderError):
        decode_mask(data[:20])

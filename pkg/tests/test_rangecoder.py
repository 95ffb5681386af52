import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlaic import rangecoder as rc


def random_tables(rng, count, size, skew=3.0):
    pmfs = rng.random((count, size)) ** skew + 1e-12
    return rc.build_cdfs(pmfs / pmfs.sum(1, keepdims=True))


def sample(rng, cdfs, ids):
    """Draw symbols from the quantized tables themselves."""
    u = rng.integers(0, rc.TOTAL, ids.size)
    return np.array([np.searchsorted(cdfs[t], v, side="right") - 1 for t, v in zip(ids, u)], np.int64)


class TestBuildCdf:
    def test_uniform_four(self):
        np.testing.assert_array_equal(np.diff(rc.build_cdf(np.full(4, 0.25))), 16384)

    def test_tiny_probabilities_keep_floor(self):
        eps = 1e-12
        freq = np.diff(rc.build_cdf([1 - 3 * eps, eps, eps, eps]))
        assert freq.min() >= 1 and freq.sum() == rc.TOTAL
        np.testing.assert_array_equal(freq[1:], 1)

    @pytest.mark.parametrize("seed", range(10))
    def test_remainder_bound(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 400))
        p = rng.random(n) ** 4
        p /= p.sum()
        cdf = rc.build_cdf(p)
        rc.check_cdf(cdf)
        assert np.all(np.abs(np.diff(cdf) - p * rc.TOTAL) <= n)

    def test_alphabet_too_large(self):
        with pytest.raises(ValueError, match="exceeds"):
            rc.build_cdf(np.ones(rc.TOTAL + 1))

    @pytest.mark.parametrize("bad", [[], [0.5, -0.1], [np.nan, 1.0], [0.0, 0.0]])
    def test_invalid_pmf(self, bad):
        with pytest.raises(ValueError):
            rc.build_cdf(bad)

    def test_full_alphabet(self):
        cdf = rc.build_cdf(np.ones(rc.TOTAL))
        np.testing.assert_array_equal(np.diff(cdf), 1)

    def test_rows_match_single(self):
        rng = np.random.default_rng(1)
        pmfs = rng.random((5, 9))
        rows = rc.build_cdfs(pmfs)
        for r in range(5):
            np.testing.assert_array_equal(rows[r], rc.build_cdf(pmfs[r]))

    def test_unnormalized_input_is_normalized(self):
        np.testing.assert_array_equal(rc.build_cdf([1, 1, 2]), rc.build_cdf([0.25, 0.25, 0.5]))

    @pytest.mark.parametrize("table", [[0, 1, 1, rc.TOTAL], [1, rc.TOTAL], [0, 100]])
    def test_check_cdf_rejects(self, table):
        with pytest.raises(ValueError):
            rc.check_cdf(np.array(table))


class TestRoundTrip:
    def test_million_symbols_static_table(self):
        rng = np.random.default_rng(0)
        cdf = random_tables(rng, 1, 64)[0]
        symbols = np.searchsorted(cdf, rng.integers(0, rc.TOTAL, 1_000_000), side="right") - 1
        data = rc.rc_encode(symbols, cdf)
        np.testing.assert_array_equal(rc.rc_decode(data, cdf, symbols.size), symbols)
        assert 8 * len(data) <= rc.ideal_bits(symbols, cdf) + 32

    def test_million_symbols_per_symbol_tables(self):
        rng = np.random.default_rng(1)
        cdfs = random_tables(rng, 256, 17)
        ids = rng.integers(0, 256, 1_000_000)
        symbols = (rng.random(ids.size) * 17).astype(np.int64)
        data = rc.rc_encode(symbols, cdfs, ids)
        out = rc.rc_decode(data, cdfs, symbols.size, ids)
        np.testing.assert_array_equal(out, symbols)
        assert rc.rc_encode(out, cdfs, ids) == data
        assert 8 * len(data) <= rc.ideal_bits(symbols, cdfs, ids) + 32

    def test_empty_stream(self):
        cdf = rc.build_cdf([0.5, 0.5])
        data = rc.rc_encode([], cdf)
        assert len(data) == 4
        assert rc.rc_decode(data, cdf, 0).size == 0

    def test_single_symbol_alphabet(self):
        cdf = rc.build_cdf([1.0])
        data = rc.rc_encode(np.zeros(10_000, np.int64), cdf)
        assert len(data) <= 8
        np.testing.assert_array_equal(rc.rc_decode(data, cdf, 10_000), 0)

    def test_carry_heavy_stream(self):
        # a near-certain symbol keeps low close to the top and produces long 0xFF runs
        cdf = np.array([0, 1, rc.TOTAL - 1, rc.TOTAL], np.int64)
        rng = np.random.default_rng(2)
        symbols = np.where(rng.random(200_000) < 0.002, 2, 1)
        symbols[::997] = 0
        data = rc.rc_encode(symbols, cdf)
        np.testing.assert_array_equal(rc.rc_decode(data, cdf, symbols.size), symbols)
        assert data == rc.naive_encode(symbols, lambda i: cdf)

    def test_adaptive_provider(self):
        rng = np.random.default_rng(3)
        symbols = rng.integers(0, 5, 3000)

        def provider(i, history):
            counts = np.bincount(history[-50:], minlength=5) + 1.0
            return rc.build_cdf(counts / counts.sum())

        data = rc.rc_encode(symbols, provider)
        np.testing.assert_array_equal(rc.rc_decode(data, provider, symbols.size), symbols)

    def test_provider_queried_in_order(self):
        cdf = rc.build_cdf([0.3, 0.7])
        seen = []

        def provider(i, history):
            seen.append((i, len(history)))
            return cdf

        data = rc.rc_encode([1, 0, 1], cdf)
        rc.rc_decode(data, provider, 3)
        assert seen == [(0, 0), (1, 1), (2, 2)]

    def test_incremental_decoder_matches_batch(self):
        rng = np.random.default_rng(4)
        cdfs = random_tables(rng, 20, 30)
        ids = rng.integers(0, 20, 5000)
        symbols = sample(rng, cdfs, ids)
        data = rc.rc_encode(symbols, cdfs, ids)
        dec = rc.RangeDecoder(data)
        out = [dec.decode(cdfs[t]) for t in ids]
        dec.finish()
        np.testing.assert_array_equal(out, symbols)

    def test_ragged_tables(self):
        tables = [rc.build_cdf(np.ones(n)) for n in (2, 5, 9)]
        symbols = [1, 4, 8, 0]
        data = rc.rc_encode(symbols, tables, [0, 1, 2, 0])
        np.testing.assert_array_equal(rc.rc_decode(data, tables, 4, [0, 1, 2, 0]), symbols)


class TestErrors:
    def test_out_of_alphabet_rejected(self):
        cdf = rc.build_cdf(np.ones(4))
        with pytest.raises(ValueError, match="position 2"):
            rc.rc_encode([0, 3, 4], cdf)
        with pytest.raises(ValueError):
            rc.rc_encode([-1], cdf)

    @pytest.mark.parametrize("seed", range(25))
    def test_truncation_always_detected(self, seed):
        rng = np.random.default_rng(seed)
        cdfs = random_tables(rng, 8, int(rng.integers(2, 40)))
        ids = rng.integers(0, 8, int(rng.integers(1, 3000)))
        symbols = sample(rng, cdfs, ids)
        data = rc.rc_encode(symbols, cdfs, ids)
        for cut in range(1, min(len(data), 12) + 1):
            with pytest.raises(rc.CorruptStreamError, match="truncated"):
                rc.rc_decode(data[:-cut], cdfs, symbols.size, ids)

    def test_trailing_bytes_detected(self):
        cdf = rc.build_cdf([0.2, 0.8])
        data = rc.rc_encode([1, 0, 1, 1], cdf)
        with pytest.raises(rc.CorruptStreamError, match="trailing"):
            rc.rc_decode(data + b"\x00", cdf, 4)

    def test_incremental_truncation(self):
        cdf = rc.build_cdf(np.ones(256))
        data = rc.rc_encode(np.arange(256), cdf)
        dec = rc.RangeDecoder(data[:-1])
        with pytest.raises(rc.CorruptStreamError):
            for _ in range(256):
                dec.decode(cdf)
            dec.finish()

    def test_short_input(self):
        with pytest.raises(rc.CorruptStreamError):
            rc.RangeDecoder(b"\x00\x01")


class TestReferenceCoder:
    def test_matches_big_integer_coder(self):
        rng = np.random.default_rng(5)
        cdfs = random_tables(rng, 10, 12, skew=6.0)
        ids = rng.integers(0, 10, 1000)
        symbols = sample(rng, cdfs, ids)
        assert rc.rc_encode(symbols, cdfs, ids) == rc.naive_encode(symbols, lambda i: cdfs[ids[i]])

    def test_golden_stream(self, golden_dir):
        rng = np.random.default_rng(2024)
        cdfs = random_tables(rng, 4, 10)
        ids = np.arange(500) % 4
        symbols = sample(rng, cdfs, ids)
        data = rc.rc_encode(symbols, cdfs, ids)
        assert data == (golden_dir / "rangecoder_500.bin").read_bytes()


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=40),
    st.lists(st.integers(0, 10**6), min_size=0, max_size=400),
)
def test_property_round_trip_and_bound(weights, raw):
    p = np.array(weights)
    cdf = rc.build_cdf(p / p.sum())
    symbols = np.array(raw, np.int64) % p.size
    data = rc.rc_encode(symbols, cdf)
    out = rc.rc_decode(data, cdf, symbols.size)
    np.testing.assert_array_equal(out, symbols)
    assert rc.rc_encode(out, cdf) == data
    assert 8 * len(data) <= rc.ideal_bits(symbols, cdf) + 32
    assert data == rc.naive_encode(symbols, lambda i: cdf)

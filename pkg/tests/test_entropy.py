import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hdcvc.entropy import (
    PMF_FLOOR,
    SCALE_FLOOR,
    Bitstream,
    BitstreamError,
    CoderError,
    EntropyError,
    FactorizedPrior,
    FrameRecord,
    GaussianConditional,
    Hyperprior,
    I_FRAME,
    NOISE,
    P_FRAME,
    ROUND,
    estimate_bits,
    gaussian_likelihood,
    pmf_to_cdf,
    quantize,
    range_decode,
    range_encode,
)
from hdcvc.entropy.bitstream import HEADER_BYTES, RECORD_OVERHEAD
from hdcvc.entropy.models import decode_with_tables, encode_with_tables, gaussian_tables, table_bits
from hdcvc.entropy.rangecoder import TOTAL, validate_cdf


def random_skewed_case(rng):
    n = int(rng.integers(2, 40))
    pmf = rng.dirichlet(np.full(n, float(rng.uniform(0.05, 3.0))))
    length = int(rng.integers(0, 400))
    symbols = rng.choice(n, size=length, p=pmf)
    return pmf, symbols


def coded_vs_estimate(pmf, symbols):
    cdf = pmf_to_cdf(pmf)
    data = range_encode(symbols, [cdf] * len(symbols))
    est = float(estimate_bits(torch.tensor(np.maximum(pmf[symbols], PMF_FLOOR), dtype=torch.float64)))
    return data, cdf, est


class TestQuantize:
    def test_round_values(self):
        x = torch.tensor([0.4, -1.6, 0.5, -0.5, 2.5, -2.5])
        assert quantize(x, ROUND).tolist() == [0.0, -2.0, 1.0, -1.0, 3.0, -3.0]

    def test_idempotent(self):
        x = 10 * torch.randn(100)
        q = quantize(x, ROUND)
        assert torch.equal(quantize(q, ROUND), q)

    def test_noise_bound_and_seeded(self):
        x = torch.randn(1000)
        a = quantize(x, NOISE, torch.Generator().manual_seed(1))
        b = quantize(x, NOISE, torch.Generator().manual_seed(1))
        assert torch.equal(a, b)
        assert ((a - x).abs() <= 0.5).all()

    def test_pass_through_gradient(self):
        x = torch.randn(5, requires_grad=True)
        quantize(x, ROUND).sum().backward()
        assert torch.equal(x.grad, torch.ones(5))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1), "floor")


class TestLikelihood:
    def test_standard_gaussian_zero_bin(self):
        p = gaussian_likelihood(torch.zeros(1, dtype=torch.float64), 0.0, 1.0)
        assert float(p) == pytest.approx(math.erf(0.5 / math.sqrt(2)), abs=1e-12)

    def test_symmetric(self):
        s = torch.arange(-5, 6, dtype=torch.float64)
        p = gaussian_likelihood(s, 0.0, 1.7)
        assert torch.allclose(p, p.flip(0))

    def test_normalized(self):
        s = torch.arange(-60, 61, dtype=torch.float64)
        p = gaussian_likelihood(s, 0.3, 2.5)
        # bins raised to the floor add at most PMF_FLOOR each
        floored = int((p == PMF_FLOOR).sum())
        assert abs(float(p.sum()) - 1.0) <= 1e-4 + floored * PMF_FLOOR

    def test_floor(self):
        p = gaussian_likelihood(torch.tensor([50.0]), 0.0, 0.2)
        assert float(p) == pytest.approx(PMF_FLOOR)

    def test_scale_floor_applies(self):
        a = gaussian_likelihood(torch.zeros(1), 0.0, 1e-4)
        b = gaussian_likelihood(torch.zeros(1), 0.0, SCALE_FLOOR)
        assert torch.equal(a, b)

    def test_factorized_cdf_monotone(self):
        prior = FactorizedPrior(3)
        x = torch.linspace(-30, 30, 500).reshape(1, 1, -1).expand(3, 1, -1)
        c = prior.cdf(x)
        assert (c[..., 1:] >= c[..., :-1]).all()
        assert ((c >= 0) & (c <= 1)).all()

    def test_factorized_normalized_and_floored(self):
        prior = FactorizedPrior(2)
        v = torch.arange(-60.0, 61.0).reshape(1, 1, 1, -1).expand(1, 2, 1, -1)
        p = prior.likelihood(v)
        assert (p >= PMF_FLOOR).all()
        edges = torch.tensor([-60.5, 60.5]).reshape(1, 1, 2).expand(2, 1, 2)
        c = prior.cdf(edges).reshape(2, 2)
        mass = (c[:, 1] - c[:, 0]).reshape(1, 2, 1)
        floored = (p == PMF_FLOOR).sum(dim=-1)
        assert ((p.sum(dim=-1) - mass).abs() <= 1e-4 + floored * PMF_FLOOR).all()

    def test_gaussian_tables_are_valid(self):
        for tab in gaussian_tables():
            validate_cdf(tab.cdf)


class TestEstimateBits:
    def test_half(self):
        assert float(estimate_bits(torch.full((100,), 0.5))) == 100.0

    def test_one(self):
        assert float(estimate_bits(torch.ones(10))) == 0.0

    def test_rejects_nonpositive(self):
        with pytest.raises(EntropyError):
            estimate_bits(torch.tensor([0.5, 0.0]))

    def test_differentiable(self):
        gc = GaussianConditional()
        scale = torch.tensor([1.5], requires_grad=True)
        estimate_bits(gc.likelihood(torch.tensor([2.0]), torch.tensor([0.0]), scale)).backward()
        assert scale.grad is not None and float(scale.grad) != 0.0


class TestRangeCoder:
    def test_empty(self):
        data = range_encode([], [])
        assert len(data) <= 8
        assert range_decode(data, []) == []

    def test_uniform_256(self):
        rng = np.random.default_rng(0)
        sym = rng.integers(0, 256, size=10000)
        cdf = pmf_to_cdf(np.ones(256))
        data = range_encode(sym, [cdf] * len(sym))
        assert abs(len(data) - 10000) <= 16
        assert range_decode(data, [cdf] * len(sym)) == sym.tolist()

    def test_round_trips_and_length(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            pmf, sym = random_skewed_case(rng)
            data, cdf, est = coded_vs_estimate(pmf, sym)
            assert range_decode(data, [cdf] * len(sym)) == sym.tolist()
            assert abs(8 * len(data) - est) <= 0.02 * est + 32

    def test_mixed_tables(self):
        rng = np.random.default_rng(2)
        cdfs = [pmf_to_cdf(rng.dirichlet(np.ones(int(rng.integers(2, 9))))) for _ in range(300)]
        sym = [int(rng.integers(0, len(c) - 1)) for c in cdfs]
        assert range_decode(range_encode(sym, cdfs), cdfs) == sym

    def test_near_certain_symbols(self):
        pmf = np.array([1.0, 0.0, 0.0])
        cdf = pmf_to_cdf(pmf)
        sym = [0] * 5000 + [2] + [0] * 10
        data = range_encode(sym, [cdf] * len(sym))
        assert range_decode(data, [cdf] * len(sym)) == sym

    def test_symbol_outside_support(self):
        cdf = pmf_to_cdf(np.ones(4))
        with pytest.raises(CoderError, match="index 1"):
            range_encode([0, 4], [cdf, cdf])

    def test_table_validation(self):
        cdf = pmf_to_cdf(np.array([0.0, 1.0, 0.0]))
        validate_cdf(cdf)
        assert cdf[-1] == TOTAL
        with pytest.raises(CoderError):
            validate_cdf([0, 10, 10, TOTAL])
        with pytest.raises(CoderError):
            pmf_to_cdf(np.array([0.5, -0.1]))

    @given(st.lists(st.integers(0, 9), max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_property_round_trip(self, sym):
        cdf = pmf_to_cdf(np.arange(1, 11, dtype=float))
        assert range_decode(range_encode(sym, [cdf] * len(sym)), [cdf] * len(sym)) == sym


class TestTableCoding:
    def test_escapes_round_trip(self):
        tables = gaussian_tables()
        vals = np.array([0, 1, -1, 300, -5000, 17, 2**20, -(2**20)])
        idx = np.zeros(len(vals), dtype=np.int64)
        data = encode_with_tables(vals, idx, tables)
        assert decode_with_tables(data, idx, tables).tolist() == vals.tolist()

    def test_table_bits_predicts_length(self):
        rng = np.random.default_rng(4)
        tables = gaussian_tables()
        idx = rng.integers(0, len(tables), size=3000)
        scales = np.array([t.half / 6 for t in tables])[idx]
        vals = np.round(rng.standard_normal(3000) * scales).astype(np.int64)
        data = encode_with_tables(vals, idx, tables)
        bits = table_bits(vals, idx, tables)
        assert abs(8 * len(data) - bits) <= 0.02 * bits + 32

    def test_escape_too_large(self):
        with pytest.raises(EntropyError):
            encode_with_tables(np.array([2**40]), np.array([0]), gaussian_tables())


class TestHyperprior:
    @pytest.mark.parametrize("context", [False, True])
    def test_compress_round_trip(self, context):
        hp = Hyperprior(6, 4, context=context).eval()
        y = 3 * torch.randn(1, 6, 8, 8)
        y_hat, zb, yb = hp.compress(y)
        assert torch.equal(hp.decompress(zb, yb, (8, 8)), y_hat)

    def test_round_mode_matches_compress(self):
        hp = Hyperprior(6, 4).eval()
        y = 3 * torch.randn(1, 6, 8, 8)
        with torch.no_grad():
            y_round, info = hp(y, ROUND)
        y_hat, zb, yb = hp.compress(y)
        assert torch.equal(y_round, y_hat)
        for nbytes, bits in ((len(zb), float(info["z_bits"])), (len(yb), float(info["y_bits"]))):
            assert abs(8 * nbytes - bits) <= 0.02 * bits + 32

    def test_bits_are_likelihood_sums(self):
        hp = Hyperprior(6, 4)
        _, info = hp(torch.randn(1, 6, 8, 8), NOISE, torch.Generator().manual_seed(0))
        ref = -torch.log2(info["y_likelihoods"]).sum() - torch.log2(info["z_likelihoods"]).sum()
        assert torch.allclose(info["bits"], ref)

    def test_context_mask_is_causal(self):
        hp = Hyperprior(2, 4, context=True)
        x = torch.randn(1, 2, 6, 6)
        base = hp.ctx(x)
        x2 = x.clone()
        x2[0, :, 3, 3] += 5.0
        diff = (hp.ctx(x2) - base).abs().sum(1)[0]
        # only sites after (3, 3) in raster order may change
        for i in range(6):
            for j in range(6):
                if (i, j) <= (3, 3):
                    assert diff[i, j] == 0

    def test_context_site_evaluation(self):
        hp = Hyperprior(2, 4, context=True)
        x = torch.randn(1, 2, 5, 5)
        full = hp.ctx(x)
        assert torch.allclose(hp.ctx.at(x, 2, 3), full[:, :, 2, 3], atol=1e-6)


class TestBitstream:
    def make(self):
        bs = Bitstream(64, 64, 12, 2)
        bs.records.append(FrameRecord(I_FRAME, residual_hyper=b"ab", residual_latent=b"cdef"))
        bs.records.append(FrameRecord(P_FRAME, b"1", b"22", b"333", b"4444"))
        return bs

    def test_round_trip(self):
        bs = self.make()
        back = Bitstream.from_bytes(bs.to_bytes())
        assert back == bs

    def test_record_length(self):
        rec = FrameRecord(P_FRAME, b"1", b"22", b"333", b"4444")
        assert len(rec.to_bytes()) == rec.num_bytes == RECORD_OVERHEAD + 10

    def test_bpp(self):
        bs = self.make()
        assert len(bs.to_bytes()) == bs.total_bytes()
        record_bytes = bs.total_bytes() - HEADER_BYTES
        assert bs.bpp() == 8 * record_bytes / (2 * 64 * 64)

    def test_header_layout(self):
        data = self.make().to_bytes()
        assert data[:4] == b"HDCV" and data[4] == 1
        assert int.from_bytes(data[5:7], "little") == 64
        assert data[9] == 12 and data[10] == 2
        assert int.from_bytes(data[11:15], "little") == 2

    def test_corruption_detected(self):
        data = bytearray(self.make().to_bytes())
        data[-1] ^= 0xFF
        with pytest.raises(BitstreamError, match="crc"):
            Bitstream.from_bytes(bytes(data))

    def test_truncation_and_magic(self):
        data = self.make().to_bytes()
        with pytest.raises(BitstreamError):
            Bitstream.from_bytes(data[:-3])
        with pytest.raises(BitstreamError, match="magic"):
            Bitstream.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(BitstreamError, match="trailing"):
            Bitstream.from_bytes(data + b"\0")

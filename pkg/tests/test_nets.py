import dataclasses

import pytest
import torch

from hdcvc.entropy import NOISE, ROUND
from hdcvc.nets import (
    DESK,
    HDCVC,
    MFER,
    VARIANTS,
    FeatureExtractor,
    MotionEstimator,
    NetworkConfig,
    RefinementNet,
    motion_codec,
    residual_codec,
)
from hdcvc.tensor import ContractError, grad_check

TINY = NetworkConfig(base_channels=6, latent_channels=4, hyper_channels=3, mfer_channels=6)


def frame(h=64, w=64, seed=0):
    return torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(seed))


class TestConfig:
    def test_dict_round_trip(self):
        assert NetworkConfig.from_dict(DESK.to_dict()) == DESK

    def test_digest_sensitivity(self):
        assert DESK.digest() != DESK.with_variant("k3").digest()
        assert DESK.digest() == NetworkConfig.from_dict(DESK.to_dict()).digest()

    def test_variants(self):
        for v in VARIANTS:
            DESK.with_variant(v)
        assert DESK.with_variant("k3").offset_channels == 18
        assert DESK.with_variant("no-mfer").mfer is False
        assert set(DESK.with_variant("no-sncdn").residual_blocks) == {"ResGDN"}
        with pytest.raises(ValueError):
            DESK.with_variant("k7")

    def test_k3_differs_only_in_compensation(self):
        a, b = DESK.with_variant("het").to_dict(), DESK.with_variant("k3").to_dict()
        assert {k for k in a if a[k] != b[k]} == {"compensation"}

    def test_validation(self):
        with pytest.raises(ContractError):
            NetworkConfig(base_channels=32)
        with pytest.raises(ValueError):
            NetworkConfig(motion_downsamples=1, motion_blocks=("ResGDN",))


class TestShapes:
    @pytest.mark.parametrize("h,w", [(64, 64), (128, 64), (64, 192)])
    def test_stage_extents(self, h, w):
        m = HDCVC(TINY)
        x = frame(h, w)
        f_prev, off = m.estimate_motion(x, x)
        assert f_prev.shape == (1, 6, h // 4, w // 4)
        assert off.shape == (1, 70, h // 4, w // 4)
        y_m = m.motion.g_a(off)
        y_r = m.residual.g_a(x)
        assert y_m.shape[2:] == y_r.shape[2:] == (h // 16, w // 16)
        assert m.motion.entropy.analysis(y_m).shape[2:] == (h // 64, w // 64)
        m_hat, _ = m.motion(off, ROUND)
        assert m_hat.shape == off.shape
        pred = m.compensate(f_prev, m_hat, x)
        assert pred.shape == x.shape

    def test_frame_multiple(self):
        with pytest.raises(ContractError, match="multiples of 64"):
            FeatureExtractor(6)(torch.zeros(1, 3, 48, 64))

    def test_deterministic(self):
        fe = FeatureExtractor(6)
        x = frame()
        assert torch.equal(fe(x), fe(x))

    def test_identical_frames_zero_offsets(self):
        m = HDCVC(TINY)
        x = frame()
        _, off = m.estimate_motion(x, x)
        assert torch.count_nonzero(off) == 0

    def test_untrained_prediction_is_copy(self):
        m = HDCVC(TINY)
        ref, cur = frame(seed=1), frame(seed=2)
        f_prev, off = m.estimate_motion(ref, cur)
        m_hat, _ = m.motion(off, NOISE, torch.Generator().manual_seed(0))
        assert torch.equal(m.compensate(f_prev, m_hat, ref), ref)

    def test_motion_estimator_contract(self):
        me = MotionEstimator(6, 70)
        with pytest.raises(ContractError):
            me(torch.zeros(1, 6, 4, 4), torch.zeros(1, 6, 4, 5))

    def test_refine_output(self):
        r = RefinementNet(6)
        out = r(torch.randn(1, 6, 4, 4), torch.randn(1, 6, 4, 4))
        assert out.shape == (1, 3, 16, 16)
        with pytest.raises(ContractError):
            r(torch.randn(1, 6, 4, 4), torch.randn(1, 6, 4, 4), torch.zeros(1, 3, 8, 8))


class TestTransforms:
    def test_latent_sizes(self):
        assert motion_codec(TINY).latent_hw(16, 32) == (4, 8)
        assert residual_codec(TINY).latent_hw(64, 128) == (4, 8)

    def test_closed_loop(self):
        codec = residual_codec(TINY).eval()
        x = frame() - 0.5
        r_hat, zb, yb = codec.compress(x)
        assert torch.equal(codec.decompress(zb, yb, (64, 64)), r_hat)
        with torch.no_grad():
            r_round, _ = codec(x, ROUND)
        assert torch.equal(r_round, r_hat)

    def test_motion_closed_loop(self):
        codec = motion_codec(TINY).eval()
        m = torch.randn(1, 70, 16, 16)
        m_hat, zb, yb = codec.compress(m)
        assert torch.equal(codec.decompress(zb, yb, (16, 16)), m_hat)

    def test_noise_bits_definitional(self):
        codec = residual_codec(TINY)
        _, info = codec(frame(), NOISE, torch.Generator().manual_seed(0))
        ref = -torch.log2(info["y_likelihoods"]).sum() - torch.log2(info["z_likelihoods"]).sum()
        assert torch.allclose(info["bits"], ref)

    def test_zero_residual_near_zero(self):
        codec = residual_codec(TINY).eval()
        for mod in codec.modules():
            if hasattr(mod, "set_identity"):
                mod.set_identity()
            if hasattr(mod, "bias") and isinstance(mod.bias, torch.nn.Parameter):
                torch.nn.init.zeros_(mod.bias)
        for mod in codec.entropy.modules():
            if hasattr(mod, "bias") and isinstance(mod.bias, torch.nn.Parameter):
                torch.nn.init.zeros_(mod.bias)
        with torch.no_grad():
            r_hat, _ = codec(torch.zeros(1, 3, 64, 64), ROUND)
        assert r_hat.abs().max() < 1e-6


class TestMFER:
    def test_identity_at_init(self):
        mf = MFER(6)
        d = frame()
        out = mf(d, frame(seed=1), torch.zeros_like(d), [d, d, d])
        assert torch.equal(out, d)

    def test_pads_missing_refs(self):
        mf = MFER(6)
        with torch.no_grad():
            mf.out.weight.normal_()
        d = frame()
        a = mf(d, d, d, [frame(seed=3)])
        b = mf(d, d, d, [frame(seed=3)] * 3)
        assert torch.equal(a, b)
        with pytest.raises(ContractError):
            mf(d, d, d, [])


class TestGroups:
    def test_partition(self):
        m = HDCVC(DESK)
        ids = [set(map(id, m.group_parameters(g))) for g in ("motion", "residual", "mfer")]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        assert set().union(*ids) == set(map(id, m.parameters()))

    def test_no_mfer_variant(self):
        m = HDCVC(DESK.with_variant("no-mfer"))
        assert m.mfer is None and m.group_parameters("mfer") == []


class TestGradients:
    def test_feature_extractor(self):
        fe = FeatureExtractor(3)
        rep = grad_check(fe, [frame()], params=list(fe.parameters()), max_coords=16)
        assert rep.passed, rep

    def test_refinement(self):
        r = RefinementNet(3)
        with torch.no_grad():
            r.out.weight.normal_(0, 0.1)
        rep = grad_check(r, [torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)], params=list(r.parameters()), max_coords=16)
        assert rep.passed, rep

    def test_residual_transform(self):
        codec = residual_codec(TINY)
        g = torch.Generator()

        def run(x):
            g.manual_seed(5)
            y, info = codec(x, NOISE, g)
            return y.sum() * 0 + y + info["bits"] / 1000

        rep = grad_check(run, [frame() - 0.5], params=list(codec.parameters()), max_coords=12)
        assert rep.passed, rep

    def test_mfer(self):
        mf = MFER(3)
        with torch.no_grad():
            mf.out.weight.normal_(0, 0.1)
        r = (frame(seed=5) - 0.5).double()
        refs = [frame(seed=6).double(), frame(seed=7).double()]
        rep = grad_check(lambda a, b: mf(a, b, r, refs), [frame(), frame(seed=4)], params=list(mf.parameters()), max_coords=8)
        assert rep.passed, rep

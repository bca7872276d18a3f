from pathlib import Path

import numpy as np
import pytest

from kinepose import kmm as kmm_module
from kinepose import network
from kinepose.network import (
    VARIANTS,
    ModelParams,
    decode,
    encode_frame,
    forward_sequence,
    fuse,
    init_params,
    init_pose,
    load_params,
    params_from_bytes,
    params_to_bytes,
    save_params,
)
from kinepose.numeric_core import ShapeError, Tensor, load_tensor

from oracles import conv2d_loop, dyadic

GOLDEN = Path(__file__).parent / "golden"


def _zeroed(params):
    return params.replace({n: Tensor(np.zeros(t.shape)) for n, t in params.tensors.items()})


@pytest.fixture
def params():
    return init_params(3, 8, "full", seed=11)


@pytest.fixture
def golden_frames():
    stack = load_tensor(GOLDEN / "frames.ten").data
    return [Tensor(f) for f in stack]


class TestInit:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_variant_builds(self, variant):
        p = init_params(4, 6, variant, seed=0)
        assert p.variant == variant and p.num_joints == 4 and p.feature_dim == 6
        assert ("kmm.w_key" in p.tensors) == (variant != "share_qk")

    def test_heatmap_qk_projects_heatmaps(self):
        p = init_params(4, 6, "heatmap_qk")
        assert p.tensors["kmm.w_query"].shape == (4, 4, 1, 1)

    def test_same_seed_same_weights(self):
        a, b = init_params(seed=3), init_params(seed=3)
        assert all(a.tensors[n].data.tobytes() == b.tensors[n].data.tobytes() for n in a.names())

    def test_shape_chain_is_validated(self, params):
        bad = dict(params.tensors)
        bad["fuse.d"] = Tensor(np.ones((3, 7, 1, 1)))
        with pytest.raises(ShapeError, match="fuse.d"):
            ModelParams(bad)

    def test_missing_tensor(self, params):
        bad = dict(params.tensors)
        del bad["decoder.conv1"]
        with pytest.raises(ShapeError):
            ModelParams(bad)


class TestEncoder:
    def test_zero_image_zero_weights(self, params):
        f = encode_frame(Tensor(np.zeros((3, 16, 16))), _zeroed(params))
        assert not f.data.any()

    def test_shape_arithmetic(self, params):
        f = encode_frame(Tensor(np.zeros((3, 32, 32))), params)
        assert f.shape == (8, 8, 8)

    def test_non_square(self, params):
        assert encode_frame(Tensor(np.zeros((3, 16, 24))), params).shape == (8, 4, 6)

    def test_rejects_indivisible_size(self, params):
        with pytest.raises(ShapeError):
            encode_frame(Tensor(np.zeros((3, 18, 16))), params)

    def test_rejects_grayscale(self, params):
        with pytest.raises(ShapeError):
            encode_frame(Tensor(np.zeros((1, 16, 16))), params)

    def test_golden(self, params, golden_frames):
        f = encode_frame(golden_frames[0], params)
        assert f.data.tobytes() == load_tensor(GOLDEN / "encode.ten").data.tobytes()


class TestInitPose:
    def test_zero_weights(self, params):
        assert not init_pose(Tensor(np.ones((8, 4, 4))), _zeroed(params)).data.any()

    def test_single_joint_selects_channel(self):
        p = init_params(1, 4)
        w = np.zeros((1, 4, 1, 1))
        w[0, 2] = 1.0
        p = p.replace({"initializer": Tensor(w)})
        f = np.zeros((4, 3, 3))
        f[2, 1, 2] = 1.0
        np.testing.assert_array_equal(init_pose(Tensor(f), p).data[0], f[2])

    def test_golden(self, params):
        f = load_tensor(GOLDEN / "encode.ten")
        assert init_pose(f, params).data.tobytes() == load_tensor(GOLDEN / "init_pose.ten").data.tobytes()


class TestFuseDecode:
    def test_fuse_zero_inputs(self, params):
        out = fuse(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((8, 4, 4))), params)
        assert out.shape == (3, 4, 4) and not out.data.any()

    def test_fuse_conv_chain_oracle(self):
        g = np.random.default_rng(5)
        p = init_params(2, 3)
        wg, wd = dyadic(g, 3, 5, 3, 3), dyadic(g, 2, 3, 1, 1)
        p = p.replace({"fuse.g": Tensor(wg), "fuse.d": Tensor(wd)})
        m, f = dyadic(g, 2, 4, 4), dyadic(g, 3, 4, 4)
        hidden = np.maximum(conv2d_loop(np.concatenate([m, f]), wg), 0.0)
        np.testing.assert_array_equal(fuse(Tensor(m), Tensor(f), p).data, conv2d_loop(hidden, wd))

    def test_fuse_spatial_mismatch(self, params):
        with pytest.raises(ShapeError):
            fuse(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((8, 4, 5))), params)

    def test_decode_zero_weights(self, params):
        assert not decode(Tensor(np.ones((3, 5, 7))), _zeroed(params)).data.any()

    @pytest.mark.parametrize("hw", [(1, 1), (3, 9), (6, 2)])
    def test_decode_preserves_shape(self, params, hw):
        assert decode(Tensor(np.ones((3, *hw))), params).shape == (3, *hw)

    def test_decode_golden(self, params):
        m = load_tensor(GOLDEN / "init_pose.ten")
        assert decode(m, params).data.tobytes() == load_tensor(GOLDEN / "decode.ten").data.tobytes()


class TestForwardSequence:
    def test_single_frame(self, params, golden_frames):
        out = forward_sequence(golden_frames[:1], params)
        assert len(out.heatmaps) == 1 and out.attentions == [] and out.initial_heatmaps == []

    def test_empty_rejected(self, params):
        with pytest.raises(ValueError):
            forward_sequence([], params)

    def test_single_joint_copies_previous_heatmap(self, golden_frames):
        p = init_params(1, 8, seed=2)
        out = forward_sequence(golden_frames[:2], p)
        assert out.attentions[0].data.tolist() == [[1.0]]
        assert out.initial_heatmaps[0].data.tobytes() == out.heatmaps[0].data.tobytes()

    def test_golden_sequence(self, params, golden_frames):
        out = forward_sequence(golden_frames, params)
        heat = load_tensor(GOLDEN / "sequence_heatmaps.ten").data
        attn = load_tensor(GOLDEN / "sequence_attention.ten").data
        assert np.stack([h.data for h in out.heatmaps]).tobytes() == heat.tobytes()
        assert np.stack([a.data for a in out.attentions]).tobytes() == attn.tobytes()

    def test_deterministic(self, params, golden_frames):
        a = forward_sequence(golden_frames, params)
        b = forward_sequence(golden_frames, params)
        for x, y in zip(a.heatmaps + a.attentions, b.heatmaps + b.attentions):
            assert x.data.tobytes() == y.data.tobytes()

    def test_kmm_called_once_per_transition(self, params, golden_frames, monkeypatch):
        calls = []
        real = network.kmm_forward

        def counting(*args, **kwargs):
            calls.append(1)
            return real(*args, **kwargs)

        monkeypatch.setattr(network, "kmm_forward", counting)
        out = forward_sequence(golden_frames, params)
        assert len(calls) == 4 and len(out.attentions) == 4

    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_causal(self, params, golden_frames, t):
        base = forward_sequence(golden_frames, params)
        changed = list(golden_frames)
        changed[t] = Tensor(np.clip(golden_frames[t].data[::-1] + 0.3, 0, 1))
        out = forward_sequence(changed, params)
        for i in range(t):
            assert out.heatmaps[i].data.tobytes() == base.heatmaps[i].data.tobytes()
        assert out.heatmaps[t].data.tobytes() != base.heatmaps[t].data.tobytes()

    def test_identity_attention_passes_heatmaps_through(self, params, golden_frames):
        out = forward_sequence(golden_frames, params.with_variant("identity_attention"))
        for m_prev, m_p, a in zip(out.heatmaps, out.initial_heatmaps, out.attentions):
            assert m_p.data.tobytes() == m_prev.data.tobytes()
            np.testing.assert_array_equal(a.data, np.eye(3))

    def test_no_sqrt_d_differs(self, params, golden_frames):
        a = forward_sequence(golden_frames, params)
        b = forward_sequence(golden_frames, params.with_variant("no_sqrt_d"))
        assert a.heatmaps[0].data.tobytes() == b.heatmaps[0].data.tobytes()
        assert a.attentions[0].data.tobytes() != b.attentions[0].data.tobytes()

    def test_share_qk_uses_one_projection(self, golden_frames, monkeypatch):
        seen = []
        real = kmm_module.correlate

        def spy(f_t, f_next, kp, use_sqrt_d=True):
            seen.append(kp)
            return real(f_t, f_next, kp, use_sqrt_d)

        monkeypatch.setattr(kmm_module, "correlate", spy)
        forward_sequence(golden_frames[:2], init_params(3, 8, "share_qk"))
        assert seen[0].share_qk and seen[0].w_key is seen[0].w_query

    def test_heatmap_qk_runs(self, golden_frames):
        out = forward_sequence(golden_frames, init_params(3, 8, "heatmap_qk"))
        for a in out.attentions:
            np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip_bitwise(self, variant, tmp_path):
        p = init_params(3, 4, variant, seed=9)
        save_params(tmp_path / "m.kim", p)
        back = load_params(tmp_path / "m.kim")
        assert back.variant == variant and back.names() == p.names()
        for n in p.names():
            assert back.tensors[n].data.tobytes() == p.tensors[n].data.tobytes()
        assert params_to_bytes(back) == params_to_bytes(p)

    def test_layout(self, params):
        blob = params_to_bytes(params)
        assert blob[:4] == b"KIMN"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == len(params.names()) + 1
        n = int.from_bytes(blob[12:14], "little")
        assert blob[14:14 + n] == b"encoder.conv1"
        assert blob[14 + n:18 + n] == b"KTEN"

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            params_from_bytes(b"XXXX" + bytes(8))

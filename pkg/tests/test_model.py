import numpy as np
import pytest

from dropforge import tensor as T
from dropforge.errors import ConfigError, ValidationError
from dropforge.gradcheck import grad_check_params
from dropforge.model import (Model, ModelConfig, frame_to_tensor,
                             load_checkpoint, model_from_checkpoint,
                             save_checkpoint, tensor_to_frame)
from dropforge.tensor import Tensor, recording

TINY = ModelConfig(seq_len=2, channels=8, height=32, width=32)


def conv1x1_oracle(x, w, b):
    """Direct 1x1 convolution: out[o,y,x] = sum_c w[o,c]*x[c,y,x] + b[o]."""
    c_out = w.shape[0]
    _, h, ww = x.shape
    out = np.zeros((c_out, h, ww))
    for o in range(c_out):
        for y in range(h):
            for xx in range(ww):
                out[o, y, xx] = (w[o, :, 0, 0] * x[:, y, xx]).sum() + b[o, 0, 0]
    return out


def sab_oracle(model, feat):
    """Loop evaluation of single-frame token attention."""
    p = model.params
    q = conv1x1_oracle(feat, p["sab.q.w"].data, p["sab.q.b"].data)
    k = conv1x1_oracle(feat, p["sab.k.w"].data, p["sab.k.b"].data)
    v = conv1x1_oracle(feat, p["sab.v.w"].data, p["sab.v.b"].data)
    c, h, w = feat.shape
    n = h * w
    qt = q.reshape(c, n).T
    kt = k.reshape(c, n).T
    vt = v.reshape(c, n).T
    out = np.zeros((n, c))
    attn = np.zeros((n, n))
    for i in range(n):
        scores = np.array([qt[i] @ kt[j] / np.sqrt(c) for j in range(n)])
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        attn[i] = a
        for j in range(n):
            out[i] += a[j] * vt[j]
    return out.T.reshape(c, h, w), attn


def tab_half_oracle(params, prefix, feats_half, patch):
    """Loop evaluation of joint multi-frame patch attention for one half."""
    t = len(feats_half)
    c2, h, w = feats_half[0].shape
    emb = {}
    for name in ("q", "k", "v"):
        emb[name] = [conv1x1_oracle(f, params[f"tab.{prefix}.{name}.w"].data,
                                    params[f"tab.{prefix}.{name}.b"].data)
                     for f in feats_half]
    bh, bw = h // patch, w // patch

    def tokens(maps):
        toks = []
        for ti in range(t):
            for by in range(bh):
                for bx in range(bw):
                    toks.append(maps[ti][:, by * patch:(by + 1) * patch,
                                         bx * patch:(bx + 1) * patch].reshape(-1))
        return np.array(toks)

    qt, kt, vt = tokens(emb["q"]), tokens(emb["k"]), tokens(emb["v"])
    n = qt.shape[0]
    norm = np.sqrt(patch * patch * c2)
    out = np.zeros_like(vt)
    for i in range(n):
        scores = np.array([qt[i] @ kt[j] / norm for j in range(n)])
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        for j in range(n):
            out[i] += a[j] * vt[j]

    folded = np.zeros((t, c2, h, w))
    idx = 0
    for ti in range(t):
        for by in range(bh):
            for bx in range(bw):
                folded[ti][:, by * patch:(by + 1) * patch,
                           bx * patch:(bx + 1) * patch] = \
                    out[idx].reshape(c2, patch, patch)
                idx += 1
    return folded


class TestEncoder:
    def test_output_extents(self):
        cfg = ModelConfig(seq_len=5, channels=256, height=64, width=64)
        m = Model.init(cfg, seed=0)
        frame = np.random.default_rng(0).uniform(size=(64, 64, 3))
        feat = m.encode(frame_to_tensor(frame))
        assert feat.shape == (256, 16, 16)

    def test_zero_frame_zero_feature(self):
        m = Model.init(TINY, seed=1)
        feat = m.encode(frame_to_tensor(np.zeros((32, 32, 3))))
        assert np.abs(feat.data).max() == 0.0

    def test_wrong_extents_rejected(self):
        m = Model.init(TINY, seed=0)
        with pytest.raises(ConfigError):
            m.encode(Tensor(np.zeros((3, 16, 16))))

    def test_gradient_fd(self):
        m = Model.init(TINY, seed=2)
        frame = np.random.default_rng(3).uniform(size=(32, 32, 3))
        tgt = Tensor(np.random.default_rng(4).normal(size=(8, 8, 8)))
        enc_params = [m.params[k] for k in m.params if k.startswith("enc.")]
        err = grad_check_params(
            lambda: T.mse(m.encode(frame_to_tensor(frame)), tgt),
            enc_params, samples_per_param=4, seed=0)
        assert err < 1e-4


class TestPixelAttention:
    def test_confidence_in_open_interval(self):
        m = Model.init(TINY, seed=3)
        feat = Tensor(np.random.default_rng(0).normal(size=(8, 8, 8)))
        _, conf = m.pixel_attention(feat)
        assert conf.shape == (1, 8, 8)
        assert np.all(conf.data > 0.0) and np.all(conf.data < 1.0)

    def test_zero_feature_gives_half(self):
        m = Model.init(TINY, seed=3)
        feat = Tensor(np.zeros((8, 8, 8)))
        rew, conf = m.pixel_attention(feat)
        assert np.all(conf.data == 0.5)
        assert np.all(rew.data == 0.0)

    def test_reweighting_matches_direct_product(self):
        m = Model.init(TINY, seed=4)
        feat = Tensor(np.random.default_rng(1).normal(size=(8, 8, 8)))
        rew, conf = m.pixel_attention(feat)
        assert np.array_equal(rew.data, conf.data * feat.data)


class TestSpatialAttention:
    def test_constant_feature_returns_value_vector(self):
        # identical tokens make every output the shared value vector
        m = Model.init(TINY, seed=5)
        const = np.tile(np.random.default_rng(2).normal(size=(8, 1, 1)), (1, 4, 4))
        res = m.spatial_attention(Tensor(const))
        v = conv1x1_oracle(const, m.params["sab.v.w"].data,
                           m.params["sab.v.b"].data)
        assert np.max(np.abs(res.pre_residual.data - v)) < 1e-12

    def test_rows_sum_to_one_4x4(self):
        m = Model.init(TINY, seed=6)
        feat = Tensor(np.random.default_rng(3).normal(size=(8, 4, 4)))
        res = m.spatial_attention(feat)
        assert res.attn.shape == (16, 16)
        assert np.max(np.abs(res.attn.data.sum(axis=1) - 1.0)) < 1e-9

    def test_matches_loop_oracle(self):
        m = Model.init(TINY, seed=7)
        feat = np.random.default_rng(4).normal(size=(8, 4, 4))
        res = m.spatial_attention(Tensor(feat))
        oracle_out, oracle_attn = sab_oracle(m, feat)
        assert np.max(np.abs(res.pre_residual.data - oracle_out)) < 1e-10
        assert np.max(np.abs(res.attn.data - oracle_attn)) < 1e-10
        assert np.max(np.abs(res.refined.data - (feat + oracle_out))) < 1e-10


class TestTemporalAttention:
    def test_t1_shape(self):
        m = Model.init(TINY, seed=8)
        feat = Tensor(np.random.default_rng(5).normal(size=(8, 8, 8)))
        res = m.temporal_attention([feat])
        assert len(res.refined) == 1
        assert res.refined[0].shape == (8, 8, 8)

    def test_constant_features_return_value_embedding(self):
        m = Model.init(TINY, seed=9)
        const = np.tile(np.random.default_rng(6).normal(size=(8, 1, 1)), (1, 8, 8))
        feats = [Tensor(const), Tensor(const)]
        res = m.temporal_attention(feats)
        va = conv1x1_oracle(const[:4], m.params["tab.small.v.w"].data,
                            m.params["tab.small.v.b"].data)
        vb = conv1x1_oracle(const[4:], m.params["tab.large.v.w"].data,
                            m.params["tab.large.v.b"].data)
        expected = np.concatenate([va, vb], axis=0)
        for r in res.refined:
            assert np.max(np.abs(r.data - const - expected)) < 1e-12

    def test_matches_loop_oracle(self):
        m = Model.init(TINY, seed=10)
        rng = np.random.default_rng(7)
        feats = [rng.normal(size=(8, 8, 8)) for _ in range(2)]
        res = m.temporal_attention([Tensor(f) for f in feats])
        halves_a = [f[:4] for f in feats]
        halves_b = [f[4:] for f in feats]
        fold_a = tab_half_oracle(m.params, "small", halves_a, 2)
        fold_b = tab_half_oracle(m.params, "large", halves_b, 8)
        for i, r in enumerate(res.refined):
            expected = feats[i] + np.concatenate([fold_a[i], fold_b[i]], axis=0)
            assert np.max(np.abs(r.data - expected)) < 1e-10

    def test_attention_rows_sum_to_one(self):
        m = Model.init(TINY, seed=11)
        rng = np.random.default_rng(8)
        feats = [Tensor(rng.normal(size=(8, 8, 8))) for _ in range(2)]
        res = m.temporal_attention(feats)
        for attn in (res.attn_small, res.attn_large):
            assert np.max(np.abs(attn.data.sum(axis=1) - 1.0)) < 1e-9

    def test_temporal_permutation_equivariance(self):
        m = Model.init(TINY, seed=12)
        rng = np.random.default_rng(9)
        feats = [rng.normal(size=(8, 8, 8)) for _ in range(2)]
        fwd = m.temporal_attention([Tensor(f) for f in feats]).refined
        rev = m.temporal_attention([Tensor(f) for f in feats[::-1]]).refined
        assert np.max(np.abs(fwd[0].data - rev[1].data)) < 1e-12
        assert np.max(np.abs(fwd[1].data - rev[0].data)) < 1e-12

    def test_indivisible_extents_rejected(self):
        m = Model.init(TINY, seed=0)
        with pytest.raises(ConfigError):
            m.temporal_attention([Tensor(np.zeros((8, 6, 6)))])


class TestDecoders:
    def test_decode_shape_and_range(self):
        cfg = ModelConfig(seq_len=5, channels=256, height=64, width=64)
        m = Model.init(cfg, seed=13)
        feat = Tensor(np.random.default_rng(10).normal(size=(256, 16, 16)))
        out = m.decode(feat)
        assert out.shape == (3, 64, 64)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_decode_mask_shape_and_range(self):
        m = Model.init(TINY, seed=14)
        conf = Tensor(np.random.default_rng(11).uniform(size=(1, 8, 8)))
        out = m.decode_mask(conf)
        assert out.shape == (1, 32, 32)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_decoder_gradient_fd(self):
        m = Model.init(TINY, seed=15)
        feat = Tensor(np.random.default_rng(12).normal(size=(8, 8, 8)))
        tgt = Tensor(np.random.default_rng(13).uniform(size=(3, 32, 32)))
        dec_params = [m.params[k] for k in m.params if k.startswith("dec.")]
        err = grad_check_params(lambda: T.mse(m.decode(feat), tgt),
                                dec_params, samples_per_param=4, seed=1)
        assert err < 1e-4

    def test_mask_decoder_gradient_fd(self):
        m = Model.init(TINY, seed=16)
        conf = Tensor(np.random.default_rng(14).uniform(size=(1, 8, 8)))
        tgt = Tensor(np.random.default_rng(15).uniform(size=(1, 32, 32)))
        md_params = [m.params[k] for k in m.params if k.startswith("maskdec.")]
        err = grad_check_params(lambda: T.mse(m.decode_mask(conf), tgt),
                                md_params, samples_per_param=4, seed=2)
        assert err < 1e-4


class TestForward:
    def test_five_frames_five_outputs(self):
        cfg = ModelConfig(seq_len=5, channels=16, height=64, width=64)
        m = Model.init(cfg, seed=17)
        frames = np.random.default_rng(16).uniform(size=(5, 64, 64, 3))
        cleaned, masks = m.forward(frames)
        assert len(cleaned) == 5 and len(masks) == 5
        assert cleaned[0].shape == (3, 64, 64)
        assert masks[0].shape == (1, 64, 64)

    def test_identical_frames_identical_outputs(self):
        m = Model.init(TINY, seed=18)
        frame = np.random.default_rng(17).uniform(size=(32, 32, 3))
        frames = np.stack([frame, frame])
        cleaned, masks = m.forward(frames)
        assert np.max(np.abs(cleaned[0].data - cleaned[1].data)) < 1e-12
        assert np.max(np.abs(masks[0].data - masks[1].data)) < 1e-12

    def test_forward_deterministic(self):
        m = Model.init(TINY, seed=19)
        frames = np.random.default_rng(18).uniform(size=(2, 32, 32, 3))
        a, _ = m.forward(frames)
        b, _ = m.forward(frames)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_frame_tensor_roundtrip(self):
        frame = np.random.default_rng(19).uniform(size=(8, 6, 3))
        assert np.array_equal(tensor_to_frame(frame_to_tensor(frame)), frame)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = Model.init(TINY, seed=20)
        path = tmp_path / "model.ckpt"
        tensors = {k: v.data for k, v in m.params.items()}
        save_checkpoint(path, TINY, tensors)
        cfg, loaded = load_checkpoint(path)
        assert cfg == TINY
        for name, t in m.params.items():
            assert np.array_equal(loaded[name], t.data)
        m2 = model_from_checkpoint(path)
        frames = np.random.default_rng(20).uniform(size=(2, 32, 32, 3))
        a, _ = m.forward(frames)
        b, _ = m2.forward(frames)
        assert np.array_equal(a[0].data, b[0].data)

    def test_shape_mismatch_rejected(self, tmp_path):
        m = Model.init(TINY, seed=21)
        tensors = {k: v.data for k, v in m.params.items()}
        tensors["enc.conv1.w"] = np.zeros((2, 3, 4, 4))
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, TINY, tensors)
        with pytest.raises(ValidationError, match="enc.conv1.w"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        m = Model.init(TINY, seed=22)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, TINY, {k: v.data for k, v in m.params.items()})
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(ValidationError, match="truncated"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValidationError):
            load_checkpoint(path)


class TestConfigValidation:
    def test_extents_must_divide_32(self):
        with pytest.raises(ConfigError):
            ModelConfig(height=48, width=64).validate()

    def test_channels_divisible_by_four(self):
        with pytest.raises(ConfigError):
            ModelConfig(channels=10, height=64, width=64).validate()

    def test_param_count_pure_function_of_config(self):
        a = Model.init(TINY, seed=1)
        b = Model.init(TINY, seed=2)
        assert [(k, v.shape) for k, v in a.params.items()] == \
               [(k, v.shape) for k, v in b.params.items()]

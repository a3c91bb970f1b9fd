"""The restoration network: encoder, attention blocks, decoders.

Per frame, the encoder maps (3, H, W) to a (c, H/4, W/4) feature.  A
pixel confidence block re-weights the feature, a spatial block fuses
information across the whole frame with dot-product self-attention, and
a temporal block attends over multi-scale patches pooled from all T
frames at once.  Two decoders map features back to full resolution: one
to the cleaned frame, one from the confidence map to a drop mask.

Features are stored channel-first (c, h, w); frames cross the public
boundary as (H, W, 3) arrays in [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .tensor import Tensor

MASK_DECODER_CHANNELS = 16
CHECKPOINT_MAGIC = b"DFCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    seq_len: int = 5
    channels: int = 256
    height: int = 64
    width: int = 64
    sab_heads: int = 1
    tab_patch_small: int = 2
    tab_patch_large: int = 8

    def validate(self) -> "ModelConfig":
        div = 4 * self.tab_patch_large
        if self.height % div or self.width % div:
            raise ConfigError(
                f"frame extents must be divisible by {div} "
                f"(encoder /4, large patch /{self.tab_patch_large}), got "
                f"{self.height}x{self.width}")
        if self.channels % 4:
            raise ConfigError(
                f"channel count must be divisible by 4, got {self.channels}")
        if self.sab_heads != 1:
            raise ConfigError("only single-head attention is supported")
        if self.tab_patch_small < 1 or self.tab_patch_large < 1:
            raise ConfigError("patch sizes must be positive")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        return self

    @property
    def feat_h(self) -> int:
        return self.height // 4

    @property
    def feat_w(self) -> int:
        return self.width // 4


class SabResult(NamedTuple):
    refined: Tensor
    pre_residual: Tensor
    attn: Tensor


class TabResult(NamedTuple):
    refined: list[Tensor]
    attn_small: Tensor
    attn_large: Tensor


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    c_out, c_in, kh, kw = shape
    fan_in = c_in * kh * kw
    fan_out = c_out * kh * kw
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def frame_to_tensor(frame: np.ndarray) -> Tensor:
    """(H, W, 3) array -> (3, H, W) constant tensor."""
    return Tensor(np.ascontiguousarray(frame.transpose(2, 0, 1)))


def tensor_to_frame(t: Tensor) -> np.ndarray:
    """(3, H, W) tensor -> (H, W, 3) array."""
    return np.ascontiguousarray(t.data.transpose(1, 2, 0))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         norm: float) -> tuple[Tensor, Tensor]:
    """Dot-product attention over token matrices (N, d).

    Similarities are divided by ``norm`` (the square root of the token
    volume) before the row softmax; every row of the returned attention
    matrix sums to 1.
    """
    scores = T.matmul(q, k.transpose2d()) * (1.0 / norm)
    attn = T.softmax(scores, axis=1)
    return T.matmul(attn, v), attn


def _tokens_from_map(x: Tensor) -> Tensor:
    """(c, h, w) feature map -> (h*w, c) token matrix."""
    c, h, w = x.shape
    return x.reshape((c, h * w)).permute((1, 0))


def _map_from_tokens(tok: Tensor, c: int, h: int, w: int) -> Tensor:
    return tok.permute((1, 0)).reshape((c, h, w))


def _patch_tokens(x: Tensor, p: int) -> Tensor:
    """(t, c, h, w) -> (t*(h/p)*(w/p), c*p*p) non-overlapping patch tokens."""
    t, c, h, w = x.shape
    x = x.reshape((t, c, h // p, p, w // p, p))
    x = x.permute((0, 2, 4, 1, 3, 5))
    return x.reshape((t * (h // p) * (w // p), c * p * p))


def _patch_fold(tok: Tensor, t: int, c: int, h: int, w: int, p: int) -> Tensor:
    x = tok.reshape((t, h // p, w // p, c, p, p))
    x = x.permute((0, 3, 1, 4, 2, 5))
    return x.reshape((t, c, h, w))


class Model:
    """Generator parameters plus the forward pass of every block."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg.validate()
        self.params = params

    # -- construction --------------------------------------------------

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        """Name -> shape map; a pure function of the config."""
        c = cfg.channels
        c4, c2, ch = c // 4, c // 2, c
        mc = MASK_DECODER_CHANNELS
        shapes: dict[str, tuple[int, ...]] = {}

        def conv(name, c_out, c_in, k):
            shapes[f"{name}.w"] = (c_out, c_in, k, k)
            shapes[f"{name}.b"] = (c_out, 1, 1)

        conv("enc.conv1", c4, 3, 4)
        conv("enc.conv2", c2, c4, 4)
        conv("enc.conv3", ch, c2, 3)
        conv("pa.conv1", c4, ch, 3)
        conv("pa.conv2", 1, c4, 3)
        for name in ("sab.q", "sab.k", "sab.v"):
            conv(name, ch, ch, 1)
        for scale in ("small", "large"):
            for name in ("q", "k", "v"):
                conv(f"tab.{scale}.{name}", c2, c2, 1)
        conv("dec.conv1", c2, ch, 3)
        conv("dec.conv2", c4, c2, 3)
        conv("dec.conv3", 3, c4, 3)
        conv("maskdec.conv1", mc, 1, 3)
        conv("maskdec.conv2", mc, mc, 3)
        conv("maskdec.conv3", 1, mc, 3)
        return shapes

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        """Fresh model with Xavier-uniform kernels and zero biases."""
        rng = np.random.Generator(np.random.PCG64(seed))
        params: dict[str, Tensor] = {}
        for name, shape in cls.param_shapes(cfg).items():
            if name.endswith(".w"):
                params[name] = T.parameter(xavier_uniform(rng, shape))
            else:
                params[name] = T.parameter(np.zeros(shape))
        return cls(cfg, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def _conv(self, name: str, x: Tensor, stride: int = 1,
              padding: int = 0) -> Tensor:
        out = T.conv2d(x, self.params[f"{name}.w"], stride=stride,
                       padding=padding)
        return T.add(out, self.params[f"{name}.b"])

    # -- blocks ---------------------------------------------------------

    def encode(self, frame: Tensor) -> Tensor:
        """(3, H, W) -> (c, H/4, W/4) via two stride-2 convs and one stride-1."""
        if frame.shape != (3, self.cfg.height, self.cfg.width):
            raise ConfigError(
                f"frame shape {frame.shape} does not match configured "
                f"(3, {self.cfg.height}, {self.cfg.width})")
        x = T.relu(self._conv("enc.conv1", frame, stride=2, padding=1))
        x = T.relu(self._conv("enc.conv2", x, stride=2, padding=1))
        return T.relu(self._conv("enc.conv3", x, stride=1, padding=1))

    def pixel_attention(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """Confidence map in (0,1) and the confidence-reweighted feature."""
        hidden = T.relu(self._conv("pa.conv1", feat, padding=1))
        confidence = T.sigmoid(self._conv("pa.conv2", hidden, padding=1))
        reweighted = T.mul(confidence, feat)   # (1,h,w) broadcast over channels
        return reweighted, confidence

    def spatial_attention(self, feat: Tensor) -> SabResult:
        """Self-attention over all h*w single-pixel tokens of one frame."""
        c = self.cfg.channels
        _, h, w = feat.shape
        q = _tokens_from_map(self._conv("sab.q", feat))
        k = _tokens_from_map(self._conv("sab.k", feat))
        v = _tokens_from_map(self._conv("sab.v", feat))
        fused, attn = scaled_dot_attention(q, k, v, np.sqrt(c))
        pre = _map_from_tokens(fused, c, h, w)
        return SabResult(refined=T.add(feat, pre), pre_residual=pre, attn=attn)

    def _tab_half(self, stacked: Tensor, scale: str, p: int,
                  t: int) -> tuple[Tensor, Tensor]:
        c2 = self.cfg.channels // 2
        _, _, h, w = stacked.shape
        per_frame_q, per_frame_k, per_frame_v = [], [], []
        for i in range(t):
            fr = T.narrow(stacked, 0, i, 1).reshape((c2, h, w))
            per_frame_q.append(self._conv(f"tab.{scale}.q", fr))
            per_frame_k.append(self._conv(f"tab.{scale}.k", fr))
            per_frame_v.append(self._conv(f"tab.{scale}.v", fr))
        q = _patch_tokens(T.stack(per_frame_q), p)
        k = _patch_tokens(T.stack(per_frame_k), p)
        v = _patch_tokens(T.stack(per_frame_v), p)
        fused, attn = scaled_dot_attention(q, k, v, np.sqrt(p * p * c2))
        return _patch_fold(fused, t, c2, h, w, p), attn

    def temporal_attention(self, feats: list[Tensor]) -> TabResult:
        """Joint patch attention across all T frames, two patch scales.

        Channels split in half: the first half attends over small patches
        (texture), the second over large patches (semantics).  Tokens from
        all frames share one attention map, so permuting input frames
        permutes outputs identically.
        """
        cfg = self.cfg
        t = len(feats)
        c, h, w = feats[0].shape
        ps, pl = cfg.tab_patch_small, cfg.tab_patch_large
        if h % pl or w % pl:
            raise ConfigError(
                f"feature extents {h}x{w} not divisible by patch {pl}")
        c2 = c // 2
        stacked = T.stack(feats)                      # (t, c, h, w)
        half_a = T.narrow(stacked, 1, 0, c2)
        half_b = T.narrow(stacked, 1, c2, c2)
        out_a, attn_a = self._tab_half(half_a, "small", ps, t)
        out_b, attn_b = self._tab_half(half_b, "large", pl, t)
        fused = T.concat([out_a, out_b], axis=1)      # (t, c, h, w)
        refined = [
            T.add(feats[i], T.narrow(fused, 0, i, 1).reshape((c, h, w)))
            for i in range(t)
        ]
        return TabResult(refined=refined, attn_small=attn_a, attn_large=attn_b)

    def decode(self, feat: Tensor) -> Tensor:
        """(c, h, w) -> cleaned (3, H, W) frame, values strictly in (0,1)."""
        x = T.upsample_nearest2x(feat)
        x = T.relu(self._conv("dec.conv1", x, padding=1))
        x = T.upsample_nearest2x(x)
        x = T.relu(self._conv("dec.conv2", x, padding=1))
        return T.sigmoid(self._conv("dec.conv3", x, padding=1))

    def decode_mask(self, confidence: Tensor) -> Tensor:
        """(1, h, w) confidence -> (1, H, W) drop-mask probabilities."""
        x = T.upsample_nearest2x(confidence)
        x = T.relu(self._conv("maskdec.conv1", x, padding=1))
        x = T.upsample_nearest2x(x)
        x = T.relu(self._conv("maskdec.conv2", x, padding=1))
        return T.sigmoid(self._conv("maskdec.conv3", x, padding=1))

    def forward(self, frames: np.ndarray,
                use_temporal: bool = True) -> tuple[list[Tensor], list[Tensor]]:
        """Full pipeline over a (T, H, W, 3) clip.

        Returns per-frame cleaned (3, H, W) tensors and (1, H, W) mask
        probability tensors.  ``use_temporal=False`` bypasses the temporal
        block (the single-image path).
        """
        refined, confidences = [], []
        for frame in frames:
            feat = self.encode(frame_to_tensor(frame))
            reweighted, confidence = self.pixel_attention(feat)
            refined.append(self.spatial_attention(reweighted).refined)
            confidences.append(confidence)
        if use_temporal:
            refined = self.temporal_attention(refined).refined
        cleaned = [self.decode(f) for f in refined]
        masks = [self.decode_mask(conf) for conf in confidences]
        return cleaned, masks


# -- checkpoint io -----------------------------------------------------------


def _write_tensor(fh, name: str, data: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def save_checkpoint(path, cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    """Versioned header, config JSON, then named little-endian f64 tensors."""
    cfg_json = json.dumps(cfg.__dict__, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint and validate model tensor shapes against its config."""
    def take(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValidationError(f"checkpoint truncated while reading {what}")
        return buf

    with open(path, "rb") as fh:
        if take(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path} is not a dropforge checkpoint")
        (version,) = struct.unpack("<I", take(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", take(fh, 4, "config length"))
        cfg = ModelConfig(**json.loads(take(fh, cfg_len, "config")))
        (count,) = struct.unpack("<I", take(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(fh, 4, "name length"))
            name = take(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", take(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", take(fh, 4 * rank, "extents"))
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = take(fh, 8 * n, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    expected = Model.param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors:
            raise ValidationError(f"checkpoint missing model tensor {name}")
        if tensors[name].shape != shape:
            raise ValidationError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                f"config requires {shape}")
    return cfg, tensors


def model_from_checkpoint(path) -> Model:
    cfg, tensors = load_checkpoint(path)
    params = {name: T.parameter(tensors[name])
              for name in Model.param_shapes(cfg)}
    return Model(cfg, params)

"""Loss system: mask, reconstruction, temporal adversarial, feature matching.

The temporal loss uses a small video discriminator over the channel
concatenation of all T frames.  Its update and the generator's update are
kept strictly separate: the discriminator trains on detached generator
output, and the generator's adversarial term runs the discriminator with
detached weights, so neither side ever receives gradient from the other's
objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .model import frame_to_tensor, xavier_uniform
from .tensor import Tensor


@dataclass
class LossWeights:
    mask_weight: float = 10.0
    recons_weight: float = 25.0
    temporal_weight: float = 5.0
    feature_layer_weights: list[float] = field(
        default_factory=lambda: [1.0] * 5)

    def validate(self) -> "LossWeights":
        if min(self.mask_weight, self.recons_weight,
               self.temporal_weight) < 0:
            raise ConfigError("loss weights must be >= 0")
        if any(w < 0 for w in self.feature_layer_weights):
            raise ConfigError("feature layer weights must be >= 0")
        return self


class Discriminator:
    """Conditional video discriminator: 4 strided convs over stacked frames.

    Input is the (3T, H, W) channel concatenation of a clip; output is a
    single probability, the sigmoid of the mean of a 1-channel map.
    """

    def __init__(self, seq_len: int, height: int, width: int,
                 base_channels: int = 64, seed: int = 0):
        if height % 16 or width % 16:
            raise ConfigError(
                f"discriminator input extents must divide by 16, got "
                f"{height}x{width}")
        self.seq_len = seq_len
        rng = np.random.Generator(np.random.PCG64(seed))
        dc = base_channels
        chans = [(dc, 3 * seq_len), (2 * dc, dc), (4 * dc, 2 * dc), (1, 4 * dc)]
        self.params: dict[str, Tensor] = {}
        for i, (c_out, c_in) in enumerate(chans, start=1):
            self.params[f"disc.conv{i}.w"] = T.parameter(
                xavier_uniform(rng, (c_out, c_in, 4, 4)))
            self.params[f"disc.conv{i}.b"] = T.parameter(np.zeros((c_out, 1, 1)))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def forward(self, clip: Tensor, trainable: bool = True) -> Tensor:
        """Probability that the (3T, H, W) clip is a real sequence.

        With ``trainable=False`` the weights are detached, so gradient
        flows to the clip only (the generator's adversarial path).
        """
        x = clip
        for i in range(1, 5):
            w = self.params[f"disc.conv{i}.w"]
            b = self.params[f"disc.conv{i}.b"]
            if not trainable:
                w, b = w.detach(), b.detach()
            x = T.add(T.conv2d(x, w, stride=2, padding=1), b)
            if i < 4:
                x = T.relu(x)
        return T.sigmoid(T.tmean(x))


class FeaturePyramid:
    """Fixed random 5-level conv pyramid used by the feature-matching loss.

    A stand-in for a pretrained multi-level extractor: weights are seeded,
    never trained, and shared between the two images being compared.
    """

    CHANNELS = (16, 32, 64, 64, 64)
    STRIDES = (1, 2, 2, 2, 2)

    def __init__(self, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.kernels: list[Tensor] = []
        c_in = 3
        for c_out in self.CHANNELS:
            self.kernels.append(Tensor(xavier_uniform(rng, (c_out, c_in, 3, 3))))
            c_in = c_out

    @property
    def num_levels(self) -> int:
        return len(self.kernels)

    def extract(self, frame: Tensor) -> list[Tensor]:
        levels = []
        x = frame
        for kernel, stride in zip(self.kernels, self.STRIDES):
            x = T.relu(T.conv2d(x, kernel, stride=stride, padding=1))
            levels.append(x)
        return levels


def _as_frame_tensor(frame) -> Tensor:
    return frame if isinstance(frame, Tensor) else frame_to_tensor(frame)


def mask_loss(pred_masks: list[Tensor], gt_masks: np.ndarray) -> Tensor:
    """Mean over frames of the BCE between predicted and true drop masks."""
    gt = np.asarray(gt_masks, dtype=np.float64)
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValidationError("ground-truth masks must be binary")
    if len(pred_masks) != gt.shape[0]:
        raise ValidationError(
            f"{len(pred_masks)} predicted masks vs {gt.shape[0]} targets")
    total = None
    for pred, target in zip(pred_masks, gt):
        term = T.bce(pred, Tensor(target.reshape(pred.shape)))
        total = term if total is None else T.add(total, term)
    return total * (1.0 / len(pred_masks))


def reconstruction_loss(cleaned: list[Tensor], gt_frames) -> Tensor:
    """Mean over frames of the per-pixel mean squared error."""
    if len(cleaned) != len(gt_frames):
        raise ValidationError(
            f"{len(cleaned)} outputs vs {len(gt_frames)} ground-truth frames")
    total = None
    for out, gt in zip(cleaned, gt_frames):
        term = T.mse(out, _as_frame_tensor(gt))
        total = term if total is None else T.add(total, term)
    return total * (1.0 / len(cleaned))


def temporal_losses(cleaned: list[Tensor], gt_frames,
                    disc: Discriminator) -> tuple[Tensor, Tensor]:
    """Non-saturating adversarial pair (generator loss, discriminator loss).

    disc_loss = -[ln D(real) + ln(1 - D(fake.detached))] trains only the
    discriminator; gen_loss = -ln D(fake) runs D with detached weights and
    trains only the generator.
    """
    real = T.concat([_as_frame_tensor(f) for f in gt_frames], axis=0)
    fake = T.concat(list(cleaned), axis=0)
    d_real = disc.forward(real, trainable=True)
    d_fake_det = disc.forward(fake.detach(), trainable=True)
    disc_loss = -(T.log(d_real) + T.log(1.0 - d_fake_det))
    d_fake = disc.forward(fake, trainable=False)
    gen_loss = -T.log(d_fake)
    return gen_loss, disc_loss


def feature_matching_loss(output: Tensor, gt, extractor: FeaturePyramid,
                          level_weights: list[float]) -> Tensor:
    """Weighted sum of mean L1 distances between pyramid levels."""
    if len(level_weights) != extractor.num_levels:
        raise ConfigError(
            f"{len(level_weights)} level weights for "
            f"{extractor.num_levels} extractor levels")
    out_levels = extractor.extract(output)
    gt_levels = extractor.extract(_as_frame_tensor(gt))
    total = None
    for w, a, b in zip(level_weights, out_levels, gt_levels):
        term = T.l1(a, b) * float(w)
        total = term if total is None else T.add(total, term)
    return total


def total_frame_loss(mask_term: Tensor, recons_term: Tensor,
                     temporal_term: Tensor, w: LossWeights) -> Tensor:
    """Weighted combination of the three sequence loss terms."""
    return (mask_term * w.mask_weight
            + recons_term * w.recons_weight
            + temporal_term * w.temporal_weight)

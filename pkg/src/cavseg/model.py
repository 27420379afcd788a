"""The 3-level volumetric U-Net, its receptive field, and overlap-based losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, IndivisiblePatch, ShapeMismatch


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters. Defaults give the 44-voxel receptive field."""

    levels: int = 3
    convs_per_block: int = 2
    kernel_size: int = 3
    pool_size: int = 2
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("kernel_size must be odd and positive")
        if self.pool_size < 2:
            raise ConfigError("pool_size must be >= 2")
        if self.base_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.in_channels not in (1, 4):
            raise ConfigError("in_channels must be 1 (single sequence) or 4 (all sequences)")

    @property
    def pool_stride_product(self) -> int:
        return self.pool_size ** (self.levels - 1)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "convs_per_block": self.convs_per_block,
            "kernel_size": self.kernel_size,
            "pool_size": self.pool_size,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        cfg = cls(**{k: int(v) for k, v in d.items()})
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class LossConfig:
    """Asymmetric overlap loss weights: alpha on false positives, beta on false negatives."""

    alpha: float = 0.2
    beta: float = 0.8
    epsilon: float = 1e-6

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError("need alpha >= 0, beta >= 0 and alpha + beta > 0")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        cfg = cls(**{k: float(v) for k, v in d.items()})
        cfg.validate()
        return cfg


def build_unet(config: UNetConfig):
    """Construct parameters and the forward pass of the encoder/decoder network.

    Returns (params, forward) where ``forward`` maps a (in_channels, X, Y, Z)
    tensor to a (out_channels, X, Y, Z) tensor of sigmoid probabilities.
    Spatial dims must be divisible by pool_size**(levels-1). Kernels are
    He-initialized (fan-in) from ``config.seed``; biases start at zero, so the
    same config always yields the same parameter set.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    params: dict[str, ad.Tensor] = {}

    def add_conv(name: str, cin: int, cout: int, ksize: int) -> None:
        fan_in = cin * ksize ** 3
        w = rng.standard_normal((cout, cin, ksize, ksize, ksize)) * np.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = ad.Tensor(w, requires_grad=True)
        params[f"{name}.b"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    def add_upconv(name: str, cin: int, cout: int) -> None:
        w = rng.standard_normal((cin, cout, 2, 2, 2)) * np.sqrt(2.0 / cin)
        params[f"{name}.w"] = ad.Tensor(w, requires_grad=True)

    width = lambda level: config.base_channels * 2 ** (level - 1)

    cin = config.in_channels
    for level in range(1, config.levels):
        for j in range(1, config.convs_per_block + 1):
            add_conv(f"enc{level}.conv{j}", cin, width(level), k)
            cin = width(level)
    for j in range(1, config.convs_per_block + 1):
        add_conv(f"mid.conv{j}", cin, width(config.levels), k)
        cin = width(config.levels)
    for level in range(config.levels - 1, 0, -1):
        add_upconv(f"dec{level}.up", cin, width(level))
        cin = 2 * width(level)  # skip + upsampled
        for j in range(1, config.convs_per_block + 1):
            add_conv(f"dec{level}.conv{j}", cin, width(level), k)
            cin = width(level)
    add_conv("head", cin, config.out_channels, 1)

    pset = ad.ParamSet(params)

    def forward(x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim != 4 or x.data.shape[0] != config.in_channels:
            raise ShapeMismatch(
                f"expected ({config.in_channels}, X, Y, Z) input, got {x.data.shape}"
            )
        stride = config.pool_stride_product
        if any(d % stride for d in x.data.shape[1:]):
            raise IndivisiblePatch(
                f"spatial dims {x.data.shape[1:]} not divisible by {stride}"
            )

        def block(t: ad.Tensor, name: str) -> ad.Tensor:
            for j in range(1, config.convs_per_block + 1):
                t = ad.conv3d(t, pset[f"{name}.conv{j}.w"], pset[f"{name}.conv{j}.b"]).relu()
            return t

        skips = []
        t = x
        for level in range(1, config.levels):
            t = block(t, f"enc{level}")
            skips.append(t)
            t = ad.maxpool3d(t)
        t = block(t, "mid")
        for level in range(config.levels - 1, 0, -1):
            t = ad.upconv3d(t, pset[f"dec{level}.up.w"])
            t = ad.concat_channels(skips[level - 1], t)
            t = block(t, f"dec{level}")
        t = ad.conv3d(t, pset["head.w"], pset["head.b"])
        return t.sigmoid()

    return pset, forward


def receptive_field_from_ops(ops) -> int:
    """Jump/size recurrence over a sequence of ("conv", k) / ("pool", s) /
    ("up", s) layer descriptors.

    A k-conv grows the size by (k-1)*jump; a pool grows it by (s-1)*jump and
    multiplies the jump by s; a kernel==stride upconv divides the jump without
    changing the size.
    """
    size, jump = 1, 1
    for kind, k in ops:
        if kind == "conv":
            size += (k - 1) * jump
        elif kind == "pool":
            size += (k - 1) * jump
            jump *= k
        elif kind == "up":
            jump //= k
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return size


def compute_receptive_field(config: UNetConfig) -> int:
    """Theoretical receptive field (voxels per axis) of one output voxel,
    along the encoder -> bottleneck -> decoder path."""
    config.validate()
    ops = []
    for _ in range(1, config.levels):
        ops += [("conv", config.kernel_size)] * config.convs_per_block
        ops.append(("pool", config.pool_size))
    ops += [("conv", config.kernel_size)] * config.convs_per_block
    for _ in range(config.levels - 1, 0, -1):
        ops.append(("up", config.pool_size))
        ops += [("conv", config.kernel_size)] * config.convs_per_block
    ops.append(("conv", 1))  # final 1x1x1 head
    return receptive_field_from_ops(ops)


def tversky_loss(pred: ad.Tensor, target, cfg: LossConfig = LossConfig()) -> ad.Tensor:
    """Differentiable asymmetric overlap loss.

    loss = 1 - (TP + eps) / (TP + alpha*FP + beta*FN + eps) with TP = sum(p*g),
    FP = sum(p*(1-g)), FN = sum((1-p)*g). beta > alpha penalizes missed
    foreground harder than spurious foreground (recall over precision).
    """
    cfg.validate()
    g = target.data if isinstance(target, ad.Tensor) else np.asarray(target, dtype=np.float64)
    if g.shape != pred.data.shape:
        raise ShapeMismatch(f"tversky_loss: pred {pred.data.shape} vs target {g.shape}")
    gt = ad.Tensor(g)
    inv_gt = ad.Tensor(1.0 - g)
    tp = (pred * gt).sum()
    fp = (pred * inv_gt).sum()
    fn = ((1.0 - pred) * gt).sum()
    denom = tp + fp * cfg.alpha + fn * cfg.beta + cfg.epsilon
    return 1.0 - (tp + cfg.epsilon) / denom


def soft_jaccard(pred, target, epsilon: float = 1e-6) -> float:
    """Soft intersection-over-union of probabilities against a binary target.

    (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps); equals the set
    Jaccard index when ``pred`` is binary.
    """
    p = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred, dtype=np.float64)
    g = target.data if isinstance(target, ad.Tensor) else np.asarray(target, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"soft_jaccard: pred {p.shape} vs target {g.shape}")
    inter = float((p * g).sum())
    return (inter + epsilon) / (float(p.sum()) + float(g.sum()) - inter + epsilon)

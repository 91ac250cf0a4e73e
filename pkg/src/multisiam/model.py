"""The Siamese model: backbone, 1D/2D heads, attention prediction, EMA.

The online and target networks share one architecture; target parameters are
plain data (requires_grad False) refreshed by exponential moving average, so
the stop-gradient boundary is structural: nothing downstream of the target can
ever join the tape.

Desk-scale backbone: four 3x3 conv stages with relu and no normalization
layers. Downsampling is a stride-2 subsample after the first three stages,
which matches a stride-2 convolution on even extents while keeping every
convolution's output extent integral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, conv2d, global_avg_pool, l2_normalize, matmul, mul,
                     relu, reshape, subsample, transpose)

__all__ = [
    "ModelConfig",
    "SiamesePair",
    "HeadsOutput",
    "init_params",
    "init_siamese_pair",
    "backbone_forward",
    "project_2d",
    "predict_local",
    "project_predict_1d",
    "self_attention_predict",
    "ema_update",
    "momentum_schedule",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the 64x64 desk configuration."""

    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 32)
    downsample: tuple[bool, ...] = (True, True, True, False)
    proj2d_hidden: int = 64
    proj2d_out: int = 32
    pred2d_hidden: int = 64
    proj1d_hidden: int = 128
    embed_dim: int = 64
    pred1d_hidden: int = 128
    alignment: str = "offset"
    self_attention: bool = True
    residual: bool = False

    @property
    def total_stride(self) -> int:
        return int(np.prod([2 if d else 1 for d in self.downsample]))

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    @property
    def pred2d_in(self) -> int:
        # offset alignment appends two coordinate channels to the online map
        return self.proj2d_out + (2 if self.alignment == "offset" else 0)


@dataclass
class SiamesePair:
    """Online (trainable) and target (EMA shadow) parameter sets."""

    online: dict[str, Tensor]
    target: dict[str, Tensor]


@dataclass
class HeadsOutput:
    """Everything one branch produces for one view."""

    feature_map: Tensor            # backbone output [C, H/S, W/S]
    projected_map: Tensor | None   # 2D projector output (skipped in the contrastive mode)
    pooled: Tensor                 # 1D head output (prediction online, projection target)


def _conv_param(rng, cout, cin, k, centered=False):
    std = math.sqrt(2.0 / (cin * k * k))
    w = rng.normal(0.0, std, size=(cout, cin, k, k))
    if centered:
        # zero-sum kernels respond to local contrast, not to the shared
        # luminance offset that would otherwise pin all feature directions
        # into one cone and trivialize intra-image clustering targets
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
    return w


def _fc_param(rng, dout, din):
    std = math.sqrt(2.0 / din)
    return rng.normal(0.0, std, size=(dout, din))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-normal weights, zero biases; one flat name -> Tensor map."""
    params: dict[str, np.ndarray] = {}
    cin = cfg.in_channels
    for idx, width in enumerate(cfg.widths, start=1):
        params[f"backbone.conv{idx}.w"] = _conv_param(rng, width, cin, 3, centered=True)
        params[f"backbone.conv{idx}.b"] = np.zeros(width)
        cin = width

    def mlp_conv(prefix, din, hidden, dout):
        params[f"{prefix}.conv1.w"] = _conv_param(rng, hidden, din, 1)
        params[f"{prefix}.conv1.b"] = np.zeros(hidden)
        params[f"{prefix}.conv2.w"] = _conv_param(rng, dout, hidden, 1)
        params[f"{prefix}.conv2.b"] = np.zeros(dout)

    def mlp_fc(prefix, din, hidden, dout):
        params[f"{prefix}.fc1.w"] = _fc_param(rng, hidden, din)
        params[f"{prefix}.fc1.b"] = np.zeros(hidden)
        params[f"{prefix}.fc2.w"] = _fc_param(rng, dout, hidden)
        params[f"{prefix}.fc2.b"] = np.zeros(dout)

    mlp_conv("proj2d", cfg.feature_channels, cfg.proj2d_hidden, cfg.proj2d_out)
    mlp_conv("pred2d", cfg.pred2d_in, cfg.pred2d_hidden, cfg.proj2d_out)
    mlp_fc("proj1d", cfg.feature_channels, cfg.proj1d_hidden, cfg.embed_dim)
    mlp_fc("pred1d", cfg.embed_dim, cfg.pred1d_hidden, cfg.embed_dim)
    return {name: Tensor(value, requires_grad=True) for name, value in params.items()}


def init_siamese_pair(cfg: ModelConfig, rng: np.random.Generator) -> SiamesePair:
    online = init_params(cfg, rng)
    target = {name: Tensor(p.data.copy()) for name, p in online.items()}
    return SiamesePair(online=online, target=target)


def backbone_forward(params: dict[str, Tensor], view: Tensor,
                     cfg: ModelConfig) -> Tensor:
    """Encode a [3,H,W] view into a [C, H/S, W/S] feature map.

    relu sits between stages; the final stage stays linear so feature
    directions are not pinned to the positive orthant (a zeroed final kernel
    maps everything to its bias exactly).
    """
    s = cfg.total_stride
    _, h, w = view.shape
    if h % s or w % s:
        raise ValueError(f"view extents {h}x{w} not divisible by total stride {s}")
    x = view
    last = len(cfg.downsample)
    for idx, down in enumerate(cfg.downsample, start=1):
        x = conv2d(x, params[f"backbone.conv{idx}.w"], stride=1, pad=1,
                   bias=params[f"backbone.conv{idx}.b"])
        if idx != last:
            x = relu(x)
        if down:
            x = subsample(x, 2)
    return x


def _mlp_conv_forward(params, prefix, fmap):
    hidden = relu(conv2d(fmap, params[f"{prefix}.conv1.w"], bias=params[f"{prefix}.conv1.b"]))
    return conv2d(hidden, params[f"{prefix}.conv2.w"], bias=params[f"{prefix}.conv2.b"])


def project_2d(params: dict[str, Tensor], fmap: Tensor) -> Tensor:
    """Two-layer 1x1-conv projector; spatial extent is preserved."""
    return _mlp_conv_forward(params, "proj2d", fmap)


def predict_local(params: dict[str, Tensor], aligned_map: Tensor) -> Tensor:
    """Per-pixel predictor (1x1 convs) over an aligned online map."""
    expected = params["pred2d.conv1.w"].shape[1]
    if aligned_map.shape[0] != expected:
        raise ValueError(
            f"predictor expects {expected} input channels, got {aligned_map.shape[0]}")
    return _mlp_conv_forward(params, "pred2d", aligned_map)


def _mlp_fc_forward(params, prefix, vec):
    col = reshape(vec, (vec.shape[0], 1))
    h = relu(add(matmul(params[f"{prefix}.fc1.w"], col),
                 reshape(params[f"{prefix}.fc1.b"], (-1, 1))))
    out = add(matmul(params[f"{prefix}.fc2.w"], h),
              reshape(params[f"{prefix}.fc2.b"], (-1, 1)))
    return reshape(out, (out.shape[0],))


def project_predict_1d(params: dict[str, Tensor], fmap: Tensor,
                       with_predictor: bool) -> Tensor:
    """Pool the feature map, project it, and (online branch only) predict."""
    z = _mlp_fc_forward(params, "proj1d", global_avg_pool(fmap))
    if with_predictor:
        z = _mlp_fc_forward(params, "pred1d", z)
    return z


def self_attention_predict(aligned_map: Tensor, local_pred: Tensor,
                           residual: bool = False) -> Tensor:
    """Aggregate local predictions weighted by squared clamped cosine
    similarity between aligned-map pixels; no softmax normalization.

    Optionally adds the local prediction back as a residual connection.
    """
    if aligned_map.shape[1:] != local_pred.shape[1:]:
        raise ValueError(
            f"spatial extents differ: {aligned_map.shape} vs {local_pred.shape}")
    c, h, w = aligned_map.shape
    n = h * w
    keys = l2_normalize(reshape(aligned_map, (c, n)), axis=0)
    sim = relu(matmul(transpose(keys), keys))
    sim = mul(sim, sim)
    values = reshape(local_pred, (local_pred.shape[0], n))
    out = matmul(values, sim)  # sim is symmetric
    if residual:
        out = add(out, values)
    return reshape(out, (local_pred.shape[0], h, w))


def ema_update(pair: SiamesePair, tau: float) -> None:
    """xi <- tau * xi + (1 - tau) * theta for every target parameter."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for name, online in pair.online.items():
        target = pair.target[name]
        target.data = tau * target.data + (1.0 - tau) * online.data


def momentum_schedule(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp from tau_base at step 0 to exactly 1.0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0

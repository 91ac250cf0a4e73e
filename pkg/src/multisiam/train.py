"""The optimization loop: config, schedules, one step, and full runs.

Reproducibility discipline: one master seed derives independent generator
streams keyed by (seed, purpose, step), so a run resumed from a checkpoint
replays exactly the same randomness as an uninterrupted one. Checkpoints are
taken at accumulation boundaries; mid-window grads are not serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import optim
from .align import align_pair, flip_back
from .metrics import embedding_spread
from .model import (HeadsOutput, ModelConfig, SiamesePair, backbone_forward,
                    ema_update, init_siamese_pair, momentum_schedule, predict_local,
                    project_2d, project_predict_1d, self_attention_predict)
from .objectives import (LOSS_MODES, NegativeQueue, kmeans, loss_1d, loss_2d_cluster,
                         loss_2d_wo_kmeans, loss_total, moco_pixel_infonce)
from .tensor import backward, global_avg_pool, scale, zero_grads
from .views import AugmentConfig, render_view, sample_view_pair

__all__ = [
    "TrainConfig",
    "TrainState",
    "StepMetrics",
    "ConfigError",
    "TrainingError",
    "rng_stream",
    "PURPOSE_PARAMS",
    "PURPOSE_SAMPLER",
    "PURPOSE_KMEANS",
    "PURPOSE_EVAL",
    "effective_lr",
    "model_config_for",
    "augment_config_for",
    "init_state",
    "train_step",
    "run_training",
    "config_to_text",
    "config_from_pairs",
    "config_from_text",
    "config_as_dict",
]

PURPOSE_PARAMS = 0
PURPOSE_SAMPLER = 1
PURPOSE_KMEANS = 2
PURPOSE_EVAL = 3

# held-out evaluation scenes come from a shifted corpus seed
EVAL_SEED_OFFSET = 7777


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches, or out-of-range values."""


class TrainingError(RuntimeError):
    """Raised when a run cannot continue (for example a non-finite loss)."""


def rng_stream(seed: int, purpose: int, step: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose, step])))


@dataclass
class TrainConfig:
    """Every knob of a training run; defaults are the desk-scale recipe."""

    steps: int = 300
    batch_size: int = 8
    accumulation_steps: int = 1
    lr_base: float = 0.3
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coeff: float = 0.001
    optimizer: str = "sgd"
    lambda_weight: float = 0.5
    loss_mode: str = "cluster"
    alignment: str = "offset"
    normalize_offset: bool = True
    self_attention: bool = True
    residual: bool | None = None  # None resolves per alignment mode
    dense: bool = False
    k: int = 3
    kmeans_metric: str = "cosine"
    kmeans_iters: int = 10
    iou_threshold: float = 0.5
    min_scale: float = 0.08
    tau_base: float = 0.996
    temperature: float = 0.2
    queue_length: int = 1024
    symmetrize: bool = True
    seed: int = 0
    out_size: int = 64
    corpus_images: int = 128
    eval_images: int = 32

    @property
    def resolved_residual(self) -> bool:
        # residual connections pair well with region pooling but hurt with
        # long-range offsets, so the default follows the alignment mode
        if self.residual is not None:
            return self.residual
        return self.alignment == "roi"


@dataclass
class StepMetrics:
    step: int
    loss: float
    l1d: float
    l2d: float
    lr: float
    tau: float
    feature_std: float

    def as_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "l1d": self.l1d, "l2d": self.l2d,
                "lr": self.lr, "tau": self.tau, "feature_std": self.feature_std}


@dataclass
class TrainState:
    config: TrainConfig
    model_config: ModelConfig
    pair: SiamesePair
    opt_buffers: dict[str, np.ndarray]
    queue: NegativeQueue | None
    step: int = 0


# ---------------------------------------------------------------------------
# config parsing / serialization (key=value lines)

_CONFIG_KEY_TO_FIELD = {"lambda": "lambda_weight"}
_FIELD_TO_CONFIG_KEY = {v: k for k, v in _CONFIG_KEY_TO_FIELD.items()}

_CHOICES = {
    "optimizer": ("sgd", "lars"),
    "loss_mode": LOSS_MODES,
    "alignment": ("roi", "offset", "none"),
    "kmeans_metric": ("cosine", "euclidean"),
}

_BOOL_WORDS = {"true": True, "1": True, "on": True, "yes": True,
               "false": False, "0": False, "off": False, "no": False}


def _parse_value(key: str, field_name: str, kind, raw: str):
    raw = raw.strip()
    if field_name == "residual":
        if raw.lower() == "auto":
            return None
        kind = bool
    try:
        if kind is bool or kind == "bool | None":
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[word]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def _validate(cfg: TrainConfig) -> TrainConfig:
    def need(cond, key, why):
        if not cond:
            raise ConfigError(f"{key}: {why}")

    need(cfg.steps >= 1, "steps", "must be at least 1")
    need(cfg.batch_size >= 1, "batch_size", "must be at least 1")
    need(cfg.accumulation_steps >= 1, "accumulation_steps", "must be at least 1")
    need(cfg.lr_base > 0.0, "lr_base", "must be positive")
    need(cfg.weight_decay >= 0.0, "weight_decay", "must be non-negative")
    need(0.0 <= cfg.momentum < 1.0, "momentum", "must lie in [0, 1)")
    need(cfg.trust_coeff > 0.0, "trust_coeff", "must be positive")
    need(0.0 <= cfg.lambda_weight <= 1.0, "lambda", "must lie in [0, 1]")
    need(0.0 <= cfg.iou_threshold < 1.0, "iou_threshold", "must lie in [0, 1)")
    need(0.0 < cfg.min_scale <= 1.0, "min_scale", "must lie in (0, 1]")
    need(0.0 <= cfg.tau_base <= 1.0, "tau_base", "must lie in [0, 1]")
    need(cfg.temperature > 0.0, "temperature", "must be positive")
    need(cfg.k >= 1, "k", "must be at least 1")
    need(cfg.kmeans_iters >= 1, "kmeans_iters", "must be at least 1")
    need(cfg.queue_length >= 1, "queue_length", "must be at least 1")
    need(cfg.seed >= 0, "seed", "must be non-negative")
    need(cfg.out_size >= 8 and cfg.out_size % 8 == 0, "out_size",
         "must be a positive multiple of the backbone stride 8")
    need(cfg.corpus_images >= 1, "corpus_images", "must be at least 1")
    need(cfg.eval_images >= 1, "eval_images", "must be at least 1")
    for field_name, allowed in _CHOICES.items():
        value = getattr(cfg, field_name)
        if value not in allowed:
            raise ConfigError(f"{field_name}: {value!r} is not one of {list(allowed)}")
    feature_pixels = (cfg.out_size // 8) ** 2
    need(cfg.k <= feature_pixels, "k",
         f"must not exceed the {feature_pixels} feature-map pixels at out_size={cfg.out_size}")
    return cfg


def config_from_pairs(pairs, base: TrainConfig | None = None) -> TrainConfig:
    """Apply (key, raw-string) overrides on top of defaults or ``base``."""
    cfg = replace(base) if base is not None else TrainConfig()
    by_field = {f.name: f for f in fields(TrainConfig)}
    for key, raw in pairs:
        key = key.strip()
        field_name = _CONFIG_KEY_TO_FIELD.get(key, key)
        if field_name not in by_field:
            raise ConfigError(f"unknown config key {key!r}")
        spec = by_field[field_name]
        kind = {"int": int, "float": float, "bool": bool, "str": str}.get(spec.type, spec.type)
        setattr(cfg, field_name, _parse_value(key, field_name, kind, raw))
    return _validate(cfg)


def config_from_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse '#'-commented key=value lines."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        pairs.append((key, raw))
    return config_from_pairs(pairs, base=base)


def config_as_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        key = _FIELD_TO_CONFIG_KEY.get(f.name, f.name)
        value = getattr(cfg, f.name)
        out[key] = "auto" if value is None else value
    return dict(sorted(out.items()))


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for key, value in config_as_dict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# schedules


def effective_lr(step: int, cfg: TrainConfig) -> float:
    """Linearly batch-scaled base rate under a cosine decay to zero."""
    if step > cfg.steps:
        raise ValueError(f"step {step} beyond configured {cfg.steps}")
    base = cfg.lr_base * cfg.batch_size / 256.0
    return base * (math.cos(math.pi * step / cfg.steps) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# state construction


def model_config_for(cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(alignment=cfg.alignment, self_attention=cfg.self_attention,
                       residual=cfg.resolved_residual)


def augment_config_for(cfg: TrainConfig) -> AugmentConfig:
    return AugmentConfig(iou_threshold=cfg.iou_threshold, min_scale=cfg.min_scale,
                         out_size=(cfg.out_size, cfg.out_size))


def init_state(cfg: TrainConfig) -> TrainState:
    _validate(cfg)
    mcfg = model_config_for(cfg)
    pair = init_siamese_pair(mcfg, rng_stream(cfg.seed, PURPOSE_PARAMS))
    queue = NegativeQueue(cfg.queue_length, mcfg.proj2d_out) if cfg.loss_mode == "moco" else None
    return TrainState(config=cfg, model_config=mcfg, pair=pair, opt_buffers={},
                      queue=queue, step=0)


# ---------------------------------------------------------------------------
# one training step


def _term_loss(state: TrainState, krng, online_out: HeadsOutput,
               target_out: HeadsOutput, online_spec, target_spec):
    cfg = state.config
    pair = state.pair
    l1 = loss_1d(online_out.pooled, target_out.pooled)

    if cfg.loss_mode == "moco":
        # region alignment happens before projection; uses intersection pooling
        feat_on = flip_back(online_out.feature_map, online_spec.flipped)
        feat_tg = flip_back(target_out.feature_map, target_spec.flipped)
        l2 = moco_pixel_infonce(
            feat_on, feat_tg, online_spec, target_spec,
            lambda r: project_2d(pair.online, r),
            lambda r: project_2d(pair.target, r),
            state.queue, cfg.k, temperature=cfg.temperature, metric=cfg.kmeans_metric,
            max_iter=cfg.kmeans_iters, rng=krng, use_attention=cfg.self_attention)
        return l1, l2

    map_on = flip_back(online_out.projected_map, online_spec.flipped)
    map_tg = flip_back(target_out.projected_map, target_spec.flipped)
    aligned = align_pair(map_on, map_tg, online_spec, target_spec, cfg.alignment,
                         normalize_offset=cfg.normalize_offset)
    local = predict_local(pair.online, aligned.online)
    if cfg.self_attention:
        pred = self_attention_predict(aligned.online, local,
                                      residual=state.model_config.residual)
    else:
        pred = local
    if cfg.loss_mode == "cluster":
        cluster = kmeans(aligned.target, cfg.k, metric=cfg.kmeans_metric,
                         max_iter=cfg.kmeans_iters, rng=krng)
        l2 = loss_2d_cluster(pred, cluster, dense=cfg.dense, target_map=aligned.target)
    else:
        l2 = loss_2d_wo_kmeans(pred, aligned.target)
    return l1, l2


def train_step(state: TrainState, corpus, grad_probe=None) -> StepMetrics:
    """Run one micro-step: sample, render, forward, losses, backward; on an
    accumulation boundary also the optimizer step and the EMA update."""
    cfg = state.config
    mcfg = state.model_config
    pair = state.pair
    step = state.step
    if step >= cfg.steps:
        raise TrainingError(f"run already finished ({step} >= {cfg.steps})")

    sampler_rng = rng_stream(cfg.seed, PURPOSE_SAMPLER, step)
    kmeans_rng = rng_stream(cfg.seed, PURPOSE_KMEANS, step)
    aug = augment_config_for(cfg)

    indices = sampler_rng.integers(0, len(corpus), size=cfg.batch_size)
    image_losses = []
    l1_values: list[float] = []
    l2_values: list[float] = []
    pooled_rows: list[np.ndarray] = []

    needs_map = cfg.loss_mode != "moco"
    for idx in indices:
        scene = corpus[int(idx)]
        h, w = scene.instance_mask.shape
        view_pair = sample_view_pair((h, w), aug, sampler_rng)
        specs = (view_pair.spec_a, view_pair.spec_b)
        rendered = [render_view(scene.image, s) for s in specs]

        online_outs = []
        target_outs = []
        orders = ((0, 1), (1, 0)) if cfg.symmetrize else ((0, 1),)
        online_views = {o for o, _ in orders}
        target_views = {t for _, t in orders}
        for v in range(2):
            if v in online_views:
                f = backbone_forward(pair.online, rendered[v], mcfg)
                g = project_2d(pair.online, f) if needs_map else None
                q = project_predict_1d(pair.online, f, with_predictor=True)
                online_outs.append(HeadsOutput(f, g, q))
                pooled_rows.append(global_avg_pool(f).data.copy())
            else:
                online_outs.append(None)
            if v in target_views:
                f = backbone_forward(pair.target, rendered[v], mcfg)
                g = project_2d(pair.target, f) if needs_map else None
                z = project_predict_1d(pair.target, f, with_predictor=False)
                target_outs.append(HeadsOutput(f, g, z))
            else:
                target_outs.append(None)

        term_losses = []
        for online_view, target_view in orders:
            l1, l2 = _term_loss(state, kmeans_rng, online_outs[online_view],
                                target_outs[target_view], specs[online_view],
                                specs[target_view])
            l1_values.append(l1.item())
            l2_values.append(l2.item())
            term_losses.append(loss_total(l1, l2, cfg.lambda_weight))
        image_loss = term_losses[0]
        for extra in term_losses[1:]:
            image_loss = image_loss + extra
        image_losses.append(scale(image_loss, 1.0 / len(term_losses)))

    batch_loss = image_losses[0]
    for extra in image_losses[1:]:
        batch_loss = batch_loss + extra
    batch_loss = scale(batch_loss, 1.0 / len(image_losses))

    if not np.isfinite(batch_loss.data):
        raise TrainingError(
            f"non-finite loss at step {step}: loss={batch_loss.data!r}, "
            f"l1d={l1_values!r}, l2d={l2_values!r}")

    backward(batch_loss)

    lr = effective_lr(step, cfg)
    tau = momentum_schedule(step, cfg.steps, cfg.tau_base)
    if (step + 1) % cfg.accumulation_steps == 0:
        if grad_probe is not None:
            grad_probe({name: None if p.grad is None else p.grad.copy()
                        for name, p in pair.online.items()})
        if cfg.optimizer == "lars":
            optim.lars_step(pair.online, lr, cfg.momentum, cfg.weight_decay,
                            cfg.trust_coeff, state.opt_buffers)
        else:
            optim.sgd_step(pair.online, lr, cfg.momentum, cfg.weight_decay,
                           state.opt_buffers)
        zero_grads(pair.online)
        ema_update(pair, tau)

    feature_std = embedding_spread(np.array(pooled_rows))

    state.step += 1
    return StepMetrics(step=step, loss=batch_loss.item(),
                       l1d=float(np.mean(l1_values)), l2d=float(np.mean(l2_values)),
                       lr=lr, tau=tau, feature_std=feature_std)


def run_training(cfg: TrainConfig, corpus, state: TrainState | None = None,
                 on_step=None) -> tuple[TrainState, list[StepMetrics]]:
    """Train from ``state`` (or scratch) until cfg.steps; returns all metrics."""
    if state is None:
        state = init_state(cfg)
    metrics = []
    while state.step < cfg.steps:
        row = train_step(state, corpus)
        metrics.append(row)
        if on_step is not None:
            on_step(row)
    return state, metrics

"""Representation probes: intra-image clustering agreement with ground truth.

The probe freezes a backbone, clusters each held-out image's feature map, and
scores the partition against the downsampled instance and class masks with the
adjusted Rand index. Comparing a trained backbone against its own random
initialization on the same corpus and seeds gives a paired readout of what
training added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import adjusted_rand_index, embedding_spread
from .model import ModelConfig, backbone_forward, init_params
from .objectives import kmeans
from .scenes import LabeledImage, downsample_mask
from .tensor import Tensor
from .train import PURPOSE_EVAL, PURPOSE_PARAMS, TrainState, rng_stream
from .views import resize_bilinear

__all__ = ["ProbeReport", "probe_image", "probe_backbone", "paired_probe",
           "full_resolution_clusters"]


@dataclass
class ProbeReport:
    """Clustering agreement of a trained backbone, with its random-init twin."""

    ari_instance: float
    ari_class: float
    feature_std: float
    cluster_maps: list  # per-image [h,w] assignment lists
    ari_instance_random: float
    ari_class_random: float
    margin_instance: float
    margin_class: float

    def as_dict(self) -> dict:
        return {
            "ari_instance": self.ari_instance,
            "ari_class": self.ari_class,
            "feature_std": self.feature_std,
            "ari_instance_random": self.ari_instance_random,
            "ari_class_random": self.ari_class_random,
            "margin_instance": self.margin_instance,
            "margin_class": self.margin_class,
            "cluster_maps": self.cluster_maps,
        }


def probe_image(features, instance_small: np.ndarray, class_small: np.ndarray,
                k: int, metric: str, max_iter: int, rng) -> tuple[float, float, np.ndarray]:
    """Cluster one feature map and score it against both mask labelings."""
    cluster = kmeans(features, k, metric=metric, max_iter=max_iter, rng=rng)
    flat = cluster.assignments.reshape(-1)
    return (adjusted_rand_index(flat, instance_small.reshape(-1)),
            adjusted_rand_index(flat, class_small.reshape(-1)),
            cluster.assignments)


def probe_backbone(params, mcfg: ModelConfig, corpus: list[LabeledImage], k: int,
                   metric: str, max_iter: int, seed: int):
    """Per-image cluster ARIs plus the pooled-embedding spread of a backbone."""
    stride = mcfg.total_stride
    ari_inst, ari_cls, maps, pooled = [], [], [], []
    for idx, scene in enumerate(corpus):
        fmap = backbone_forward(params, scene.image, mcfg)
        inst_small = downsample_mask(scene.instance_mask, stride)
        cls_small = downsample_mask(scene.class_mask, stride)
        rng = rng_stream(seed, PURPOSE_EVAL, idx)
        ai, ac, assignments = probe_image(Tensor(fmap.data), inst_small, cls_small,
                                          k, metric, max_iter, rng)
        ari_inst.append(ai)
        ari_cls.append(ac)
        maps.append(assignments)
        pooled.append(fmap.data.mean(axis=(1, 2)))
    spread = embedding_spread(np.array(pooled))
    return float(np.mean(ari_inst)), float(np.mean(ari_cls)), maps, spread


def paired_probe(state: TrainState, corpus: list[LabeledImage]) -> ProbeReport:
    """Score the trained online backbone against a random-init twin built from
    the same seed, on the same corpus with the same per-image clustering seeds."""
    cfg = state.config
    mcfg = state.model_config
    trained = probe_backbone(state.pair.online, mcfg, corpus, cfg.k,
                             cfg.kmeans_metric, cfg.kmeans_iters, cfg.seed)
    random_params = init_params(mcfg, rng_stream(cfg.seed, PURPOSE_PARAMS))
    control = probe_backbone(random_params, mcfg, corpus, cfg.k,
                             cfg.kmeans_metric, cfg.kmeans_iters, cfg.seed)
    return ProbeReport(
        ari_instance=trained[0], ari_class=trained[1],
        feature_std=trained[3],
        cluster_maps=[m.tolist() for m in trained[2]],
        ari_instance_random=control[0], ari_class_random=control[1],
        margin_instance=trained[0] - control[0],
        margin_class=trained[1] - control[1])


def full_resolution_clusters(params, mcfg: ModelConfig, scene: LabeledImage, k: int,
                             metric: str, max_iter: int, rng) -> np.ndarray:
    """Cluster a bilinearly upsampled feature map at mask resolution."""
    fmap = backbone_forward(params, scene.image, mcfg).data
    h, w = scene.instance_mask.shape
    upsampled = resize_bilinear(fmap, (h, w))
    cluster = kmeans(Tensor(upsampled), k, metric=metric, max_iter=max_iter, rng=rng)
    return cluster.assignments

"""Train, calibrate, quantize and serialize the three model variants.

* clean:  ReLU backbone, no exits
* clip:   the same weights with every ReLU clipped at its calibrated bound
* rednet: a log-clip backbone trained separately, plus exit heads
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import EngineImage, serialize
from .evaluate import evaluate, score_outputs
from .model import FloatLayer, FloatModel
from .quant import apply_theta, calibrate_theta, quantize
from .spec import ExitPolicy, ModelSpec
from .train import TrainConfig, exit_losses, finetune_exits, train_backbone

VARIANTS = ("clean", "clip", "rednet")


@dataclass
class VariantBuild:
    images: dict[str, EngineImage]
    float_models: dict[str, FloatModel]
    thetas: dict[str, dict[int, float]]
    report: dict = field(default_factory=dict)


def _switch_activation(model: FloatModel, old: str, new: str) -> FloatModel:
    layers = [FloatLayer(**{**l.__dict__, "activation": new if l.activation == old else l.activation})
              for l in model.layers]
    return FloatModel(model.task, model.input_shape, model.num_classes, layers, model.grid)


def _float_score(model: FloatModel, ds: Dataset) -> float:
    return score_outputs(model.forward(ds.x), ds)


def build_variants(spec: ModelSpec, train: Dataset, test: Dataset,
                   backbone_cfg: TrainConfig = TrainConfig(),
                   exit_cfg: TrainConfig = TrainConfig(epochs=30),
                   calibration_size: int = 1000,
                   exit_threshold: float = 0.9) -> VariantBuild:
    calib = train.x[:calibration_size]

    relu_net, relu_hist = train_backbone(spec.with_activation("relu").without_exits(), train, backbone_cfg)
    clean_f = relu_net.to_float_model()
    relu_theta = calibrate_theta(clean_f, calib)
    clip_f = apply_theta(_switch_activation(clean_f, "relu", "clip"), relu_theta)

    log_net, log_hist = train_backbone(spec.with_activation("logclip"), train, backbone_cfg,
                                       head_activation="logclip")
    n_backbone = len(spec.layers)
    backbone_theta = {i: t for i, t in calibrate_theta(log_net.to_float_model(), calib).items()
                      if i < n_backbone}
    log_net.set_thetas(backbone_theta)
    exit_hist: list[float] = []
    if spec.internal_exits:
        log_net, exit_hist = finetune_exits(log_net, train, exit_cfg)
    rednet_theta = calibrate_theta(log_net.to_float_model(), calib)
    log_net.set_thetas(rednet_theta)
    rednet_f = log_net.to_float_model()

    floats = {"clean": clean_f, "clip": clip_f, "rednet": rednet_f}
    images = {k: serialize(quantize(m)) for k, m in floats.items()}
    policy = ExitPolicy(exit_threshold)
    report: dict = {"history": {"relu": relu_hist, "logclip": log_hist, "exits": exit_hist}}
    for k, m in floats.items():
        q_score, depth = evaluate(images[k], test, policy if k == "rednet" else ExitPolicy(enabled=False))
        report[k] = {"float_score": _float_score(m, test), "quantized_score": q_score,
                     "mean_depth": depth, "image_bytes": len(images[k])}
    if spec.internal_exits:
        total, parts = exit_losses(log_net, test)
        _, heads = rednet_f.forward(test.x, with_heads=True)
        report["exits"] = {"loss_total": total, "loss_parts": parts,
                           "head_scores": {str(a): score_outputs(o, test) for a, o in heads.items()}}
    return VariantBuild(images, floats, {"clean": relu_theta, "clip": relu_theta, "rednet": rednet_theta},
                        report)

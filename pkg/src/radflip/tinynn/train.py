"""Float training with torch, then export to the numpy reference model."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import Dataset
from .model import FloatLayer, FloatModel
from .spec import LayerSpec, ModelSpec, head_layers, layer_shapes, next_shape


class TrainingError(RuntimeError):
    """Training diverged; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Activation(nn.Module):
    """ReLU / clip / log-clip.  An infinite bound leaves the top open, which
    is how bounded units train before their bound is calibrated."""

    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind
        self.register_buffer("theta", torch.tensor(math.inf, dtype=torch.float64))

    def forward(self, x):
        if self.kind == "none":
            return x
        r = F.relu(x)
        if self.kind == "relu":
            return r
        theta = self.theta.to(x.dtype)
        if self.kind == "clip":
            return torch.minimum(r, theta)
        out = torch.log1p(r)
        return torch.where(x > theta, torch.zeros_like(out), out)


def _block(spec: LayerSpec, in_shape) -> nn.Sequential:
    mods: list[nn.Module] = []
    if spec.kind == "dense":
        if len(in_shape) > 1:
            mods.append(nn.Flatten())
        mods.append(nn.Linear(int(np.prod(in_shape)), spec.out))
        if spec.batchnorm:
            mods.append(nn.BatchNorm1d(spec.out))
    elif spec.kind == "conv":
        mods.append(nn.Conv2d(in_shape[0], spec.out, spec.kernel, spec.stride, spec.kernel // 2))
        if spec.batchnorm:
            mods.append(nn.BatchNorm2d(spec.out))
    elif spec.kind == "maxpool":
        mods.append(nn.MaxPool2d(spec.kernel, spec.stride))
    elif spec.kind == "avgpool":
        mods.append(nn.AvgPool2d(spec.kernel, spec.stride))
    else:
        mods.append(nn.AdaptiveAvgPool2d(1))
        mods.append(nn.Flatten())
    mods.append(Activation(spec.activation.kind))
    return nn.Sequential(*mods)


class TinyNet(nn.Module):
    def __init__(self, spec: ModelSpec, head_activation: str | None = None):
        super().__init__()
        self.spec = spec
        shapes = layer_shapes(spec)
        self.backbone = nn.ModuleList(_block(l, shapes[i]) for i, l in enumerate(spec.layers))
        act = head_activation or next((l.activation.kind for l in spec.layers if l.activation.kind != "none"), "relu")
        self.head_specs: dict[int, tuple[LayerSpec, ...]] = {}
        heads = {}
        for e in spec.internal_exits:
            hl = head_layers(shapes[e.attach_index], e, spec.output_size, act)
            self.head_specs[e.attach_index] = hl
            hshapes = [shapes[e.attach_index]]
            blocks = []
            for l in hl:
                blocks.append(_block(l, hshapes[-1]))
                hshapes.append(next_shape(hshapes[-1], l.kind, l.out, l.kernel, l.stride))
            heads[str(e.attach_index)] = nn.Sequential(*blocks)
        self.heads = nn.ModuleDict(heads)

    def forward(self, x, with_heads: bool = False):
        outs = {}
        h = x
        for pos, block in enumerate(self.backbone):
            h = block(h)
            key = str(pos + 1)
            if with_heads and key in self.heads:
                outs[pos + 1] = self.heads[key](h).flatten(1)
        h = h.flatten(1)
        return (h, outs) if with_heads else h

    def activation_modules(self) -> list[Activation]:
        """One per exported layer, in :meth:`to_float_model` order."""
        blocks = list(self.backbone)
        for key in sorted(self.heads, key=int):
            blocks.extend(self.heads[key])
        return [b[-1] for b in blocks]

    def set_thetas(self, thetas: dict[int, float]) -> None:
        acts = self.activation_modules()
        for i, t in thetas.items():
            if acts[i].kind in ("clip", "logclip"):
                acts[i].theta.fill_(float(t))

    def to_float_model(self) -> FloatModel:
        """Numpy copy with batch norm folded into the preceding weights."""
        layers = []
        for block in self.backbone:
            layers.append(_export(block, 0))
        for key in sorted(self.heads, key=int):
            for block in self.heads[key]:
                layers.append(_export(block, int(key)))
        return FloatModel(self.spec.task, tuple(self.spec.input_shape), self.spec.num_classes,
                          layers, self.spec.grid)


def _export(block: nn.Sequential, group: int) -> FloatLayer:
    act = block[-1]
    theta = float(act.theta)
    core = [m for m in block if not isinstance(m, (nn.Flatten, Activation))]
    first = core[0]
    if isinstance(first, (nn.Linear, nn.Conv2d)):
        w = first.weight.detach().double().numpy().copy()
        b = first.bias.detach().double().numpy().copy()
        if len(core) > 1:
            bn = core[1]
            g = (bn.weight / torch.sqrt(bn.running_var + bn.eps)).detach().double().numpy()
            w = w * g.reshape((-1,) + (1,) * (w.ndim - 1))
            b = (b - bn.running_mean.detach().double().numpy()) * g + bn.bias.detach().double().numpy()
        kind = "dense" if isinstance(first, nn.Linear) else "conv"
        k = 1 if kind == "dense" else first.kernel_size[0]
        s = 1 if kind == "dense" else first.stride[0]
        return FloatLayer(kind, act.kind, theta, group, w, b, k, s)
    if isinstance(first, nn.MaxPool2d):
        return FloatLayer("maxpool", act.kind, theta, group, kernel=first.kernel_size, stride=first.stride)
    if isinstance(first, nn.AvgPool2d):
        return FloatLayer("avgpool", act.kind, theta, group, kernel=first.kernel_size, stride=first.stride)
    return FloatLayer("gap", act.kind, theta, group)


@contextmanager
def _deterministic(seed: int):
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    try:
        yield torch.Generator().manual_seed(seed)
    finally:
        torch.set_num_threads(threads)


def task_loss(spec: ModelSpec, out: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy for classifiers; objectness + box + class terms for detectors."""
    if spec.task == "classification":
        return F.cross_entropy(out, y, reduction=reduction)
    g, k = spec.grid, spec.num_classes
    cells = out.reshape(out.shape[0], g, g, 5 + k)
    present = y[..., 0]
    obj = F.binary_cross_entropy_with_logits(cells[..., 0], present, reduction="none").sum((1, 2))
    box = ((torch.sigmoid(cells[..., 1:5]) - y[..., 1:5]) ** 2).sum(-1)
    cls = F.cross_entropy(cells[..., 5:].reshape(-1, k), y[..., 5].long().reshape(-1),
                          reduction="none").reshape(present.shape)
    per_sample = obj + ((5.0 * box + cls) * present).sum((1, 2))
    return per_sample.mean() if reduction == "mean" else per_sample.sum()


def _tensors(ds: Dataset, spec: ModelSpec):
    x = torch.from_numpy(np.asarray(ds.x, np.float32))
    y = torch.from_numpy(np.asarray(ds.y))
    if spec.task == "classification":
        y = y.long()
    else:
        y = y.float()
    return x, y


def _fit(model: TinyNet, params, ds: Dataset, cfg: TrainConfig, loss_fn, stage: str) -> list[float]:
    x, y = _tensors(ds, model.spec)
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.epochs, 1))
    history = []
    with _deterministic(cfg.seed) as gen:
        for epoch in range(cfg.epochs):
            perm = torch.randperm(x.shape[0], generator=gen)
            total, count = 0.0, 0
            for s in range(0, x.shape[0], cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                if idx.numel() < 2:
                    continue
                loss = loss_fn(x[idx], y[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(f"{stage} loss became {loss.item()} in epoch {epoch}",
                                        {"stage": stage, "epoch": epoch, "batch_start": s,
                                         "lr": cfg.lr, "history": history})
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * idx.numel()
                count += idx.numel()
            sched.step()
            history.append(total / max(count, 1))
    return history


def train_backbone(spec: ModelSpec, dataset: Dataset, config: TrainConfig = TrainConfig(),
                   head_activation: str | None = None) -> tuple[TinyNet, list[float]]:
    """Train the backbone; exit heads (if the spec has any) are created but left untouched."""
    with _deterministic(config.seed):
        model = TinyNet(spec, head_activation)
    model.train()
    params = list(model.backbone.parameters())

    def loss_fn(xb, yb):
        return task_loss(spec, model(xb), yb)

    history = _fit(model, params, dataset, config, loss_fn, "backbone")
    model.eval()
    return model, history


def exit_losses(model: TinyNet, dataset: Dataset, batch: int = 1024) -> tuple[float, list[float]]:
    """Summed exit loss and its per-exit parts, each summed over samples."""
    x, y = _tensors(dataset, model.spec)
    model.eval()
    per = {a: 0.0 for a in sorted(model.head_specs)}
    with torch.no_grad():
        for s in range(0, x.shape[0], batch):
            _, outs = model(x[s:s + batch], with_heads=True)
            for a, o in outs.items():
                per[a] += float(task_loss(model.spec, o, y[s:s + batch], reduction="sum"))
    parts = [per[a] for a in sorted(per)]
    return math.fsum(parts), parts


def finetune_exits(model: TinyNet, dataset: Dataset, config: TrainConfig = TrainConfig()) -> tuple[TinyNet, list[float]]:
    """Train the exit heads on the summed per-exit loss with the backbone frozen."""
    if not len(model.heads):
        raise ValueError("model has no exit heads")
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    model.backbone.eval()
    model.heads.train()

    def loss_fn(xb, yb):
        _, outs = model(xb, with_heads=True)
        return sum(task_loss(model.spec, o, yb) for o in outs.values())

    history = _fit(model, list(model.heads.parameters()), dataset, config, loss_fn, "exits")
    model.eval()
    return model, history


def accuracy(model: TinyNet, dataset: Dataset) -> float:
    x, y = _tensors(dataset, model.spec)
    model.eval()
    with torch.no_grad():
        return float((model(x).argmax(1) == y).float().mean())

"""Desk-scale training loops and model checkpoint helpers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .config import from_mapping, to_mapping
from .formats import read_checkpoint, write_checkpoint
from .layers import Adam, Module
from .sgtt import SGTT, FlowCondition, SgttConfig, rf_loss
from .tensor import Rng
from .vae import DyMeshVAE, TrainingItem, VaeConfig

log = logging.getLogger(__name__)

KINDS = {"vae": (DyMeshVAE, VaeConfig), "flow": (SGTT, SgttConfig)}


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 2e-4
    optimizer: str = "adam"       # "adam" or "sgd"
    batch: int = 4
    clip: float = 1.0
    log_every: int = 25
    seed: int = 0


class SGD:
    """Plain gradient descent with the same interface as :class:`Adam`."""

    def __init__(self, params, lr: float = 2e-4, clip: float | None = 1.0):
        self.params, self.lr, self.clip = params, lr, clip

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        scale = 1.0
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                scale = self.clip / norm
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * scale * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(model: Module, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.parameters(), lr=cfg.lr, clip=cfg.clip)
    if cfg.optimizer == "sgd":
        return SGD(model.parameters(), lr=cfg.lr, clip=cfg.clip)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _accumulate(model: Module, losses) -> float:
    """Backpropagate the mean of ``losses``; gradients land on the parameters."""
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    total = total * (1.0 / len(losses))
    total.backward()
    return total.item()


def train_vae(model: DyMeshVAE, items: list[TrainingItem], cfg: TrainConfig = TrainConfig(),
              callback: Callable[[int, float], bool] | None = None) -> History:
    """Minimize reconstruction + KL over ``items``.

    Each step draws ``batch`` items (all of them when fewer exist). A
    callback returning True stops training early.
    """
    if not items:
        raise ValueError("no training items")
    rng = Rng(cfg.seed)
    opt = make_optimizer(model, cfg)
    feats = [it.chunks.features() for it in items]
    hist = History()
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        pick = range(len(items)) if len(items) <= cfg.batch else rng.permutation(len(items))[:cfg.batch]
        opt.zero_grad()
        loss = _accumulate(model, [model.loss(items[i].inputs, feats[i], rng)[0] for i in pick])
        opt.step()
        hist.losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("vae step %d loss %.6g", step, loss)
        if callback is not None and callback(step, loss):
            break
    hist.seconds = time.perf_counter() - t0
    return hist


@dataclass
class FlowItem:
    latents: np.ndarray            # (num_c, n, c) posterior means
    shape_features: np.ndarray     # (n, d)
    text: np.ndarray | None = None


def flow_items(vae: DyMeshVAE, items: list[TrainingItem], texts=None) -> list[FlowItem]:
    """Encode sequences into latent targets for the generator."""
    out = []
    with tn.no_grad():
        for k, it in enumerate(items):
            enc, packet, _ = vae.encode(it.inputs, it.chunks.features(), sample=False)
            text = None if texts is None else texts[k]
            out.append(FlowItem(packet.mu.data.copy(), enc.sampled_features.data.copy(), text))
    return out


def train_flow(model: SGTT, items: list[FlowItem], cfg: TrainConfig = TrainConfig(),
               callback: Callable[[int, float], bool] | None = None) -> History:
    if not items:
        raise ValueError("no training items")
    rng = Rng(cfg.seed)
    opt = make_optimizer(model, cfg)
    hist = History()
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        pick = range(len(items)) if len(items) <= cfg.batch else rng.permutation(len(items))[:cfg.batch]
        opt.zero_grad()
        losses = [rf_loss(model, items[i].latents, FlowCondition(items[i].shape_features, items[i].text), rng)
                  for i in pick]
        loss = _accumulate(model, losses)
        opt.step()
        hist.losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("flow step %d loss %.6g", step, loss)
        if callback is not None and callback(step, loss):
            break
    hist.seconds = time.perf_counter() - t0
    return hist


# -- checkpoints -----------------------------------------------------------------------

def save_model(model: DyMeshVAE | SGTT, path: str | Path) -> None:
    kind = "vae" if isinstance(model, DyMeshVAE) else "flow"
    write_checkpoint({"kind": kind, **to_mapping(model.cfg)}, model.state_dict(), path)


def load_model(path: str | Path, expect: str | None = None):
    config, tensors = read_checkpoint(path)
    kind = config.pop("kind", None)
    if kind not in KINDS:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    if expect is not None and kind != expect:
        raise ValueError(f"{path}: expected a {expect} checkpoint, found {kind}")
    model_cls, cfg_cls = KINDS[kind]
    model = model_cls(from_mapping(cfg_cls, config, strict=True))
    model.load_state_dict(tensors)
    return model

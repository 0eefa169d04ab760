"""Rate-distortion training: ``J = R + lambda * D`` optimized with Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamState, Node, Tape, adam_step, lr_schedule
from .errors import EmptyDataset, EmptyInput
from .network import (
    CodecModel,
    NetConfig,
    _Maps,
    bind,
    decode_hierarchical_node,
    encode_latent_node,
    ground_truth_at_scale,
    occupancy_labels,
)
from .tensor import as_coords

log = logging.getLogger(__name__)


@dataclass
class LossTerms:
    loss: Node
    rate: Node
    distortion: Node
    scale_bce: list[float]
    params: dict[str, Node]


def training_loss(x, model: CodecModel, lam: float, rng, tape: Tape | None = None) -> LossTerms:
    """Forward pass of ``J = R + lam * D`` on one voxelized cloud.

    ``R`` is the prior's bit estimate of the noise-quantized latent divided by
    the input point count; ``D`` is the mean of the per-scale BCE losses with
    every candidate kept.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    coords = as_coords(getattr(x, "coords", x))
    if len(coords) == 0:
        raise EmptyInput("cannot train on an empty cloud")
    rng = np.random.default_rng(rng)
    tape = tape if tape is not None else Tape()
    cfg = model.config
    P = bind(model, tape)
    maps = _Maps()
    c_y, f = encode_latent_node(tape, P, cfg, coords, maps)
    noisy = tape.add_const(f, rng.uniform(-0.5, 0.5, size=f.value.shape))
    prior_nodes = [P[k] for k in model.prior_names()]
    bits = tape.rate_bits(noisy, prior_nodes, cfg.latent_channels, cfg.prior_filters)
    rate = tape.scale(bits, 1.0 / len(coords))
    results = decode_hierarchical_node(tape, P, cfg, c_y, noisy, mode="train", maps=maps)
    losses = []
    for step, res in enumerate(results):
        j = cfg.num_scales - 1 - step
        labels = occupancy_labels(res.candidates.coords, ground_truth_at_scale(coords, j))
        losses.append(tape.bce(res.prob_node, labels))
    dist = tape.mean(losses)
    loss = tape.add(rate, tape.scale(dist, lam))
    return LossTerms(loss, rate, dist, [float(l.value) for l in losses], P)


def loss_and_grads(x, model: CodecModel, lam: float, rng, dtype=np.float64):
    """Loss terms and float64 parameter gradients; ``dtype`` is the tape's working precision."""
    tape = Tape(dtype=dtype)
    terms = training_loss(x, model, lam, rng, tape)
    tape.backward(terms.loss)
    grads = {}
    for k, node in terms.params.items():
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        grads[k] = np.asarray(g, dtype=np.float64)
    return terms, grads


# Desk-scale network for toy training: the finest scale dominates the cost of
# the all-candidates decoder, so it stays narrow while coarse scales widen.
TOY_NET = NetConfig(channels=(8, 32, 64), latent_channels=8, irn_units_per_block=1)


@dataclass
class TrainConfig:
    lam: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    lr_start: float = 8e-4
    lr_end: float = 2e-5
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_every: int = 100
    # working precision of forward/backward; parameters and Adam state stay float64
    compute_dtype: str = "float64"


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    rate: list[float] = field(default_factory=list)
    distortion: list[float] = field(default_factory=list)
    scale_bce: list[list[float]] = field(default_factory=list)
    seconds: float = 0.0


def train(
    dataset: Sequence,
    config: TrainConfig,
    model: CodecModel | None = None,
    on_step: Callable[[int, CodecModel, dict], None] | None = None,
) -> tuple[CodecModel, TrainLog]:
    """Adam over random mini-batches; the loss of a batch is the item mean.

    Deterministic for a fixed ``config.seed``: the model init, batch order and
    quantization noise all derive from it.
    """
    if len(dataset) == 0:
        raise EmptyDataset("training needs at least one cloud")
    clouds = [as_coords(getattr(c, "coords", c)) for c in dataset]
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if model is None:
        model = CodecModel.init(config.net, np.random.default_rng(seeds[0]))
    model = model.copy()
    batch_rng = np.random.default_rng(seeds[1])
    noise_rng = np.random.default_rng(seeds[2])
    names = list(model.params)
    state = AdamState.zeros_like([model.params[k] for k in names])
    history = TrainLog()
    t0 = time.perf_counter()
    order: list[int] = []
    for step in range(config.steps):
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = batch_rng.permutation(len(clouds)).tolist()
            batch.append(order.pop())
        acc = {k: np.zeros_like(v) for k, v in model.params.items()}
        stats = np.zeros(3)
        bce = np.zeros(model.config.num_scales)
        for i in batch:
            terms, grads = loss_and_grads(clouds[i], model, config.lam, noise_rng, config.compute_dtype)
            for k in names:
                acc[k] += grads[k]
            stats += (float(terms.loss.value), float(terms.rate.value), float(terms.distortion.value))
            bce += terms.scale_bce
        inv = 1.0 / len(batch)
        grads = [acc[k] * inv for k in names]
        for k, g in zip(names, grads):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k} at step {step}")
        lr = lr_schedule(step, config.steps, config.lr_start, config.lr_end)
        adam_step([model.params[k] for k in names], grads, state, lr)
        for k in names:
            if not np.all(np.isfinite(model.params[k])):
                raise FloatingPointError(f"parameter {k} became non-finite at step {step}")
        stats *= inv
        bce *= inv
        history.steps.append(step)
        history.loss.append(stats[0])
        history.rate.append(stats[1])
        history.distortion.append(stats[2])
        history.scale_bce.append(bce.tolist())
        if config.log_every and step % config.log_every == 0:
            log.info("step %d  J=%.4f  R=%.4f  D=%.4f  lr=%.2e", step, *stats, lr)
        if on_step is not None:
            on_step(step, model, {"loss": stats[0], "rate": stats[1], "distortion": stats[2]})
        if config.checkpoint_every and config.checkpoint_path and (step + 1) % config.checkpoint_every == 0:
            from .io import save_model

            save_model(model, Path(config.checkpoint_path))
    history.seconds = time.perf_counter() - t0
    return model, history


def evaluate_loss(dataset: Sequence, model: CodecModel, lam: float, seed: int = 0) -> dict:
    """Mean loss terms over ``dataset`` with a fixed noise seed."""
    rng = np.random.default_rng(seed)
    rows = []
    for cloud in dataset:
        t = training_loss(cloud, model, lam, rng, Tape(grad_enabled=False))
        rows.append([float(t.loss.value), float(t.rate.value), float(t.distortion.value), *t.scale_bce])
    m = np.mean(rows, axis=0)
    return {"loss": m[0], "rate": m[1], "distortion": m[2], "scale_bce": m[3:].tolist()}

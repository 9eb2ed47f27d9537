"""Mixed-precision training loop: masters, loss scaling, Adam.

The model keeps binary32 *master* parameters and per-plan *working*
parameters.  A binary16-planned layer's working weights are the
binary16-quantized image of its masters; binary32 layers share exact
copies.  Every step:

  1. forward/backward runs on the working weights at plan precision,
     with the loss gradient seeded by the static scale S (a power of
     two, so binary32 scaling is exact);
  2. gradients are unscaled by 1/S in binary32;
  3. if any unscaled gradient is non-finite the step is skipped with no
     state change (running statistics included);
  4. otherwise a bias-corrected Adam step updates the masters and the
     working weights are re-synchronized from them.

The loss itself is always computed in binary32 regardless of plan.

The learning rate holds at ``lr0`` until ``decay_start`` and then
decays exponentially to ``lr0 * decay_floor_factor`` at the final
epoch:

    lr(e) = lr0 * f ** ((e - decay_start + 1) / (epochs - decay_start))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import EmbeddingNet
from .planner import binary32_plan, partition
from .sampling import HardPool, pk_sample_hard, update_hard_pool
from .tensor import Precision
from .half import quantize_f16
from .tripletloss import batch_hard_triplet_loss, triplet_loss_gradient

__all__ = ["TrainConfig", "AdamState", "MixedModel", "lr_schedule", "adam_update",
           "sync_working", "compute_gradients", "train_step", "run_training"]


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference recipe."""

    batch_size: int = 128
    ids_per_batch: int = 32
    instances_per_id: int = 4
    lr0: float = 2e-4
    epochs: int = 300
    decay_start: int = 150
    margin: float = 0.3
    input_shape: tuple = (256, 128)
    loss_scale: float = 1024.0
    decay_floor_factor: float = 1e-3
    squared: bool = True

    def __post_init__(self) -> None:
        if self.batch_size != self.ids_per_batch * self.instances_per_id:
            raise ValueError("batch_size must equal ids_per_batch * instances_per_id")
        if self.lr0 <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.decay_start <= self.epochs:
            raise ValueError("decay_start must lie within [0, epochs]")
        s = self.loss_scale
        if s <= 0 or math.frexp(s)[0] != 0.5:
            raise ValueError("loss_scale must be a positive power of two")
        if not 0 < self.decay_floor_factor <= 1:
            raise ValueError("decay_floor_factor must lie in (0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0, then exponential decay toward lr0 * floor factor."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.decay_start:
        return cfg.lr0
    frac = (epoch - cfg.decay_start + 1) / (cfg.epochs - cfg.decay_start)
    return cfg.lr0 * cfg.decay_floor_factor ** frac


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, masters: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in masters.items()},
                   v={k: np.zeros_like(v) for k, v in masters.items()})


@dataclass
class MixedModel:
    """Network plus binary32 masters and per-plan working parameters."""

    net: EmbeddingNet
    masters: dict
    plan: dict
    working: dict = field(default_factory=dict)
    bn_state: dict = field(default_factory=dict)

    @classmethod
    def build(cls, net: EmbeddingNet, plan: dict, rng: np.random.Generator) -> "MixedModel":
        model = cls(net=net, masters=net.init_params(rng), plan=dict(plan),
                    bn_state=net.init_bn_state())
        sync_working(model)
        return model

    @classmethod
    def build_partitioned(cls, net: EmbeddingNet, rng: np.random.Generator) -> "MixedModel":
        return cls.build(net, partition(net.manifest()), rng)

    @classmethod
    def build_binary32(cls, net: EmbeddingNet, rng: np.random.Generator) -> "MixedModel":
        return cls.build(net, binary32_plan(net.manifest()), rng)

    def param_precision(self, key: str) -> Precision:
        return self.plan.get(self.net.param_layer(key), Precision.BINARY32)

    def embed(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out, _ = self.net.forward(self.working, x, self.plan, self.bn_state, training)
        return out


def sync_working(model: MixedModel) -> None:
    """Refresh working parameters from the masters per the plan."""
    for key, master in model.masters.items():
        if model.param_precision(key) is Precision.BINARY16:
            model.working[key] = quantize_f16(master)
        else:
            model.working[key] = master.copy()


def adam_update(opt: AdamState, masters: dict, grads: dict, lr: float) -> None:
    """One bias-corrected Adam step on the binary32 masters, in place."""
    opt.t += 1
    b1 = np.float32(opt.beta1)
    b2 = np.float32(opt.beta2)
    one = np.float32(1.0)
    bc1 = np.float32(1.0 - opt.beta1 ** opt.t)
    bc2 = np.float32(1.0 - opt.beta2 ** opt.t)
    lr32 = np.float32(lr)
    eps = np.float32(opt.eps)
    for key, g in grads.items():
        m = opt.m[key]
        v = opt.v[key]
        m[...] = b1 * m + (one - b1) * g
        v[...] = b2 * v + (one - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        masters[key] -= lr32 * mhat / (np.sqrt(vhat) + eps)


def compute_gradients(model: MixedModel, batch, cfg: TrainConfig
                      ) -> tuple[float, object, dict]:
    """Forward + scaled backward; returns (loss, mining info, scaled grads).

    The returned gradients are the raw backward results seeded with the
    loss scale S, i.e. *before* unscaling.  The loss value itself is
    unscaled and computed in binary32.
    """
    emb, caches = model.net.forward(model.working, batch.features, model.plan,
                                    model.bn_state, training=True)
    out = batch_hard_triplet_loss(emb, batch.person_ids, cfg.margin, cfg.squared)
    with np.errstate(over="ignore"):  # overflow -> inf is the skip signal
        seed = triplet_loss_gradient(emb, out) * np.float32(cfg.loss_scale)
    grads = model.net.backward(caches, seed, model.plan)
    return out.loss, out, grads


def train_step(model: MixedModel, batch, cfg: TrainConfig, opt: AdamState,
               lr: float) -> tuple[float, bool, object]:
    """One optimization step; returns (loss, step_taken, mining info).

    A step is skipped (False, with *no* state change, batch-norm running
    statistics included) when any unscaled gradient is non-finite.
    """
    for key, master in model.masters.items():
        if not np.all(np.isfinite(master)):
            raise FloatingPointError(f"master parameter {key!r} is non-finite")

    bn_snapshot = {k: (m.copy(), v.copy()) for k, (m, v) in model.bn_state.items()}
    loss, out, scaled = compute_gradients(model, batch, cfg)

    inv_s = np.float32(1.0 / cfg.loss_scale)
    grads = {k: g * inv_s for k, g in scaled.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        for k, (m, v) in bn_snapshot.items():
            model.bn_state[k][0][...] = m
            model.bn_state[k][1][...] = v
        return loss, False, out

    adam_update(opt, model.masters, grads, lr)
    sync_working(model)
    return loss, True, out


def run_training(model: MixedModel, opt: AdamState, train_set, cfg: TrainConfig,
                 rng: np.random.Generator, *, epochs: int | None = None,
                 steps_per_epoch: int | None = None, mix_ratio: float = 0.5,
                 pool_capacity: int | None = None) -> list[dict]:
    """Epoch loop with PK sampling and hard-pool mining.

    Returns one history row per epoch: mean loss over taken steps, the
    learning rate, and skip counts.  Deterministic for a given generator
    state.
    """
    n_epochs = cfg.epochs if epochs is None else epochs
    if steps_per_epoch is None:
        steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    capacity = pool_capacity if pool_capacity is not None else 2 * cfg.instances_per_id
    pool = HardPool(capacity)
    history: list[dict] = []
    for epoch in range(n_epochs):
        if epoch < cfg.epochs:
            lr = lr_schedule(epoch, cfg)
        else:  # past the configured schedule: hold the decayed floor
            lr = cfg.lr0 * cfg.decay_floor_factor
        losses: list[float] = []
        skipped = 0
        for _ in range(steps_per_epoch):
            batch = pk_sample_hard(train_set, pool, cfg.ids_per_batch,
                                   cfg.instances_per_id, mix_ratio, rng)
            loss, taken, out = train_step(model, batch, cfg, opt, lr)
            if taken:
                losses.append(loss)
                update_hard_pool(pool, batch, out)
            else:
                skipped += 1
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "mean_loss": mean_loss, "lr": lr,
                        "steps": steps_per_epoch, "skipped": skipped})
    return history

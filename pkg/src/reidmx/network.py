"""A small embedding network assembled from the layer kernels.

The network is a flat stack of named layers (linear / batch norm /
ReLU).  Parameters live outside the graph in plain dicts keyed by
``"<layer>.<param>"`` so that the trainer can keep binary32 masters and
per-plan working copies of the same structure.

Precision plumbing per layer:

  * A binary16-planned linear layer quantizes its input and weights and
    accumulates in binary32.  Its output is stored in binary16 unless
    the consumer is a batch norm (which only accepts binary32) or the
    layer is last (the loss runs in binary32); in those cases only the
    accumulated binary32 result is passed on, matching the widen-on-cast
    behavior of real mixed-precision stacks.
  * Batch norm and parameter-free layers run at binary32; a ReLU simply
    preserves whatever mode its input carries.
  * In the backward pass, the gradient entering a binary16 layer is
    quantized (gradients flow at working precision) while all
    accumulation stays in binary32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .half import quantize_f16
from .layers import BnParams, batchnorm_backward, batchnorm_forward, relu, relu_backward
from .planner import LayerManifest, ManifestEntry, OpKind
from .tensor import Precision, Tensor

__all__ = ["LayerSpec", "EmbeddingNet", "build_mlp"]


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack; ``kind`` is linear / batchnorm / relu."""

    kind: str
    name: str
    in_dim: int = 0
    out_dim: int = 0
    bias: bool = True

    def to_json(self) -> dict:
        return {"kind": self.kind, "name": self.name, "in_dim": self.in_dim,
                "out_dim": self.out_dim, "bias": self.bias}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        return cls(kind=obj["kind"], name=obj["name"], in_dim=obj["in_dim"],
                   out_dim=obj["out_dim"], bias=obj["bias"])


class EmbeddingNet:
    """Feed-forward stack mapping input vectors to embedding vectors."""

    def __init__(self, layers: list[LayerSpec], in_dim: int):
        self.layers = list(layers)
        self.in_dim = in_dim
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        dim = in_dim
        for spec in self.layers:
            if spec.kind == "linear":
                if spec.in_dim != dim:
                    raise ValueError(f"{spec.name}: expects {spec.in_dim} inputs, gets {dim}")
                dim = spec.out_dim
            elif spec.kind in ("batchnorm", "relu"):
                if spec.kind == "batchnorm" and spec.out_dim != dim:
                    raise ValueError(f"{spec.name}: batch norm dim {spec.out_dim} != {dim}")
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        self.out_dim = dim

    # -- construction ---------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Kaiming-uniform fan-in weights, zero biases, identity batch norm."""
        params: dict[str, np.ndarray] = {}
        for spec in self.layers:
            if spec.kind == "linear":
                bound = np.sqrt(6.0 / spec.in_dim)
                params[f"{spec.name}.w"] = rng.uniform(
                    -bound, bound, size=(spec.out_dim, spec.in_dim)).astype(np.float32)
                if spec.bias:
                    params[f"{spec.name}.b"] = np.zeros(spec.out_dim, dtype=np.float32)
            elif spec.kind == "batchnorm":
                params[f"{spec.name}.gamma"] = np.ones(spec.out_dim, dtype=np.float32)
                params[f"{spec.name}.beta"] = np.zeros(spec.out_dim, dtype=np.float32)
        return params

    def init_bn_state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {spec.name: (np.zeros(spec.out_dim, dtype=np.float32),
                            np.ones(spec.out_dim, dtype=np.float32))
                for spec in self.layers if spec.kind == "batchnorm"}

    def param_layer(self, param_key: str) -> str:
        return param_key.rsplit(".", 1)[0]

    def manifest(self, loss_name: str = "triplet_loss") -> LayerManifest:
        """Layer manifest for precision planning and size accounting."""
        entries = []
        for spec in self.layers:
            if spec.kind == "linear":
                count = spec.in_dim * spec.out_dim + (spec.out_dim if spec.bias else 0)
                entries.append(ManifestEntry(spec.name, OpKind.LINEAR, count))
            elif spec.kind == "batchnorm":
                entries.append(ManifestEntry(spec.name, OpKind.BATCH_NORM, 4 * spec.out_dim))
            else:
                entries.append(ManifestEntry(spec.name, OpKind.RELU, 0))
        entries.append(ManifestEntry(loss_name, OpKind.LOSS, 0))
        return LayerManifest(entries)

    def to_json(self) -> dict:
        return {"in_dim": self.in_dim, "layers": [l.to_json() for l in self.layers]}

    @classmethod
    def from_json(cls, obj: dict) -> "EmbeddingNet":
        return cls([LayerSpec.from_json(l) for l in obj["layers"]], obj["in_dim"])

    # -- execution ------------------------------------------------------

    def _out_mode(self, idx: int, mode: Precision) -> Precision:
        if mode is Precision.BINARY32:
            return Precision.BINARY32
        nxt = self.layers[idx + 1] if idx + 1 < len(self.layers) else None
        if nxt is None or nxt.kind == "batchnorm":
            return Precision.BINARY32
        return Precision.BINARY16

    def forward(self, params: dict, x: np.ndarray, plan: dict, bn_state: dict,
                training: bool) -> tuple[np.ndarray, list]:
        """Run the stack; returns (embeddings, caches for backward).

        ``plan`` maps layer names to :class:`Precision`.  Training mode
        updates the running statistics inside ``bn_state`` in place.
        """
        h = Tensor(np.asarray(x, dtype=np.float32), Precision.BINARY32)
        caches: list[tuple] = []
        for idx, spec in enumerate(self.layers):
            mode = plan.get(spec.name, Precision.BINARY32)
            if spec.kind == "linear":
                w = params[f"{spec.name}.w"]
                b = params.get(f"{spec.name}.b")
                if mode is Precision.BINARY16:
                    xq = quantize_f16(h.data)
                    wq = quantize_f16(w)
                    bq = quantize_f16(b) if b is not None else None
                else:
                    xq, wq, bq = h.data, w, b
                y = xq @ wq.T
                if bq is not None:
                    y = y + bq
                caches.append((xq, wq, mode))
                h = Tensor(y, self._out_mode(idx, mode))
            elif spec.kind == "batchnorm":
                mean, var = bn_state[spec.name]
                p = BnParams(gamma=params[f"{spec.name}.gamma"],
                             beta=params[f"{spec.name}.beta"],
                             running_mean=mean, running_var=var)
                caches.append((h, p))
                h = batchnorm_forward(h, p, training)
            else:  # relu
                caches.append((h,))
                h = relu(h)
        return h.data, caches

    def backward(self, caches: list, grad_out: np.ndarray, plan: dict) -> dict:
        """Backpropagate; returns float32 gradients keyed like the params.

        Scaled gradients are allowed to overflow to inf/NaN; the trainer
        detects that and skips the step, so no warning is raised here.
        """
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_out, dtype=np.float32)
        with np.errstate(over="ignore", invalid="ignore"):
            for spec, cache in zip(reversed(self.layers), reversed(caches)):
                if spec.kind == "linear":
                    xq, wq, mode = cache
                    if mode is Precision.BINARY16:
                        g = quantize_f16(g)
                    grads[f"{spec.name}.w"] = g.T @ xq
                    if spec.bias:
                        grads[f"{spec.name}.b"] = g.sum(axis=0)
                    g = g @ wq
                elif spec.kind == "batchnorm":
                    x_t, p = cache
                    g, ggamma, gbeta = batchnorm_backward(x_t, p, g)
                    grads[f"{spec.name}.gamma"] = ggamma
                    grads[f"{spec.name}.beta"] = gbeta
                else:
                    (x_t,) = cache
                    g = relu_backward(x_t, g)
        return grads


def build_mlp(in_dim: int, hidden: list[int], emb_dim: int) -> EmbeddingNet:
    """Linear->BN->ReLU blocks followed by a linear embedding head."""
    layers: list[LayerSpec] = []
    prev = in_dim
    for i, width in enumerate(hidden, start=1):
        layers.append(LayerSpec("linear", f"fc{i}", prev, width))
        layers.append(LayerSpec("batchnorm", f"bn{i}", out_dim=width))
        layers.append(LayerSpec("relu", f"relu{i}"))
        prev = width
    layers.append(LayerSpec("linear", "embed", prev, emb_dim))
    return EmbeddingNet(layers, in_dim)

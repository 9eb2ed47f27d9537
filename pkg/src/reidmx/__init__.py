"""Mixed-precision metric learning and re-identification retrieval.

The package emulates IEEE 754 binary16 in software on top of a small
tensor/layer library, trains embedding networks with binary32 master
weights and scaled-loss backward passes, and evaluates retrieval with
CMC / mAP plus k-reciprocal re-ranking.  Everything is driven either
through the library API re-exported here or the ``reidmx`` CLI.
"""

from .evaluation import (EvalError, EvalReport, cmc, cmc_map, distmat,
                         k_reciprocal_rerank, mean_ap)
from .half import (MAX_FINITE, MIN_NORMAL, MIN_SUBNORMAL, QNAN_BITS, Half16,
                   count_flushed, f16_arith, f16_to_f32, f32_to_f16,
                   float_to_half_bits, half_bits_to_float, is_f16_exact,
                   quantize_f16)
from .io import (Checkpoint, EmbeddingSet, FormatError, Role,
                 atomic_write_bytes, config_hash, read_checkpoint,
                 read_embedding_file, write_checkpoint, write_embedding_file)
from .network import EmbeddingNet, LayerSpec, build_mlp
from .planner import (ConvDims, LayerManifest, ManifestEntry, OpKind,
                      binary32_plan, load_manifest, load_plan, mac_count,
                      manifest_macs, model_size_bytes, partition,
                      save_manifest, save_plan)
from .sampling import HardPool, PkBatch, pk_sample, pk_sample_hard, update_hard_pool
from .synth import make_synthetic_dataset
from .tensor import Precision, PrecisionViolation, Tensor, tensor16, tensor32
from .trainer import (AdamState, MixedModel, TrainConfig, adam_update,
                      compute_gradients, lr_schedule, run_training,
                      sync_working, train_step)
from .tripletloss import (TripletLossOut, batch_hard_triplet_loss,
                          triplet_loss_gradient)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Checkpoint", "ConvDims", "EmbeddingNet", "EmbeddingSet",
    "EvalError", "EvalReport", "FormatError", "Half16", "HardPool",
    "LayerManifest", "LayerSpec", "ManifestEntry", "MixedModel",
    "MAX_FINITE", "MIN_NORMAL", "MIN_SUBNORMAL", "OpKind", "PkBatch",
    "Precision", "PrecisionViolation", "QNAN_BITS", "Role", "Tensor",
    "TrainConfig", "TripletLossOut", "adam_update", "atomic_write_bytes",
    "batch_hard_triplet_loss", "binary32_plan", "build_mlp", "cmc",
    "cmc_map", "compute_gradients", "config_hash", "count_flushed",
    "distmat", "f16_arith", "f16_to_f32", "f32_to_f16", "float_to_half_bits",
    "half_bits_to_float", "is_f16_exact", "k_reciprocal_rerank",
    "load_manifest", "load_plan", "lr_schedule", "mac_count",
    "make_synthetic_dataset", "manifest_macs", "mean_ap", "model_size_bytes",
    "partition", "pk_sample", "pk_sample_hard", "quantize_f16",
    "read_checkpoint", "read_embedding_file", "run_training",
    "save_manifest", "save_plan", "sync_working", "tensor16", "tensor32",
    "train_step", "triplet_loss_gradient", "update_hard_pool",
    "write_checkpoint", "write_embedding_file",
]

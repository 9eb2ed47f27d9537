"""Command-line interface.

Verbs:

  synth   generate a synthetic identity-cluster dataset file
  train   train an embedding network with mixed-precision emulation
  embed   extract embeddings from a checkpoint
  eval    CMC / mAP retrieval evaluation, optionally re-ranked
  plan    precision-partition a layer manifest and report sizes / MACs
  bench   time the distance matrix at both precisions

Every command is deterministic given ``--seed``.  Reports embed the
sha256 hash of the command configuration.  Report paths produce a CSV
and a JSON next to each other, plus a rendered PNG figure unless
``--no-figures`` is given.  Exit code is 0 on success; failures print a
single machine-readable JSON line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import evaluation, planner, reporting, synth, trainer
from .half import quantize_f16
from .io import (EmbeddingSet, FormatError, Role, config_hash,
                 read_checkpoint, read_embedding_file, write_checkpoint,
                 write_embedding_file)
from .network import EmbeddingNet, build_mlp
from .tensor import Precision, PrecisionViolation

__all__ = ["main", "entrypoint"]


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _hash_args(command: str, args: argparse.Namespace, skip=("func",)) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    payload["command"] = command
    return config_hash(payload)


# -- synth ----------------------------------------------------------------


def cmd_synth(args) -> int:
    records = synth.make_synthetic_dataset(
        ids=args.ids, per_id=args.per_id, dim=args.dim, noise=args.noise,
        cameras=args.cameras, seed=args.seed, train_frac=args.train_frac,
        query_frac=args.query_frac, spread=args.spread)
    write_embedding_file(args.out, records, precision_flag=0)
    print(f"wrote {len(records)} records ({args.ids} ids x {args.per_id}) to {args.out}")
    return 0


# -- train ----------------------------------------------------------------


def _build_net(in_dim: int, hidden: list[int], emb_dim: int) -> EmbeddingNet:
    return build_mlp(in_dim, hidden, emb_dim)


def _plan_for(args, net: EmbeddingNet) -> dict:
    if args.plan:
        plan = planner.load_plan(args.plan)
        for spec in net.layers:
            if spec.name not in plan:
                raise ValueError(f"plan file does not cover layer {spec.name!r}")
        return plan
    if args.precision == "binary32":
        return planner.binary32_plan(net.manifest())
    return planner.partition(net.manifest())


def cmd_train(args) -> int:
    records, _ = read_embedding_file(args.data)
    train_set = records.with_role(Role.TRAIN)
    if len(train_set) == 0:
        raise ValueError(f"{args.data} holds no training records")

    decay_start = args.decay_start if args.decay_start is not None \
        else min(150, args.epochs)
    cfg = trainer.TrainConfig(
        batch_size=args.ids_per_batch * args.instances_per_id,
        ids_per_batch=args.ids_per_batch,
        instances_per_id=args.instances_per_id,
        lr0=args.lr, epochs=args.epochs, decay_start=decay_start,
        margin=args.margin, loss_scale=args.loss_scale,
        decay_floor_factor=args.decay_floor, squared=not args.unsquared)

    net = _build_net(train_set.dim, _parse_int_list(args.hidden), args.emb_dim)
    plan = _plan_for(args, net)
    rng = np.random.default_rng(args.seed)
    model = trainer.MixedModel.build(net, plan, rng)
    opt = trainer.AdamState.init(model.masters)

    history = trainer.run_training(
        model, opt, train_set, cfg, rng,
        steps_per_epoch=args.steps_per_epoch, mix_ratio=args.mix_ratio,
        pool_capacity=args.pool_capacity)

    digest = _hash_args("train", args)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.rckp")
    arch = {"net": net.to_json(),
            "plan": {name: mode.value for name, mode in plan.items()}}
    write_checkpoint(
        ckpt_path, arch=arch, masters=model.masters, adam_t=opt.t,
        adam_m=opt.m, adam_v=opt.v, bn_state=model.bn_state,
        step=opt.t, epoch=args.epochs, config_hash_hex=digest)

    log_path = os.path.join(args.out_dir, "loss_log.csv")
    reporting.write_csv(
        log_path, ["epoch", "mean_loss", "lr", "steps", "skipped", "config_hash"],
        [[row["epoch"], f"{row['mean_loss']:.6f}", f"{row['lr']:.8g}",
          row["steps"], row["skipped"], digest] for row in history])
    final_loss = history[-1]["mean_loss"] if history else float("nan")
    reporting.write_json(os.path.join(args.out_dir, "train_report.json"), {
        "config_hash": digest,
        "epochs": args.epochs,
        "final_mean_loss": final_loss,
        "skipped_steps": int(sum(r["skipped"] for r in history)),
        "checkpoint": ckpt_path,
        "plan": {name: mode.value for name, mode in plan.items()},
    })
    if not args.no_figures and history:
        reporting.plot_loss_curve(history, os.path.join(args.out_dir, "loss_curve.png"))
    print(f"trained {args.epochs} epochs, final mean loss {final_loss:.4f}; "
          f"checkpoint at {ckpt_path}")
    return 0


# -- embed ----------------------------------------------------------------


def cmd_embed(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    records, _ = read_embedding_file(args.data)
    net = EmbeddingNet.from_json(ckpt.arch["net"])
    plan = {name: Precision.parse(v) for name, v in ckpt.arch["plan"].items()}
    if records.dim != net.in_dim:
        raise ValueError(f"dataset dim {records.dim} != network input {net.in_dim}")

    model = trainer.MixedModel(net=net, masters=ckpt.masters, plan=plan,
                               bn_state={k: (m.copy(), v.copy())
                                         for k, (m, v) in ckpt.bn_state.items()})
    trainer.sync_working(model)
    emb = model.embed(records.vectors, training=False)

    flag = 1 if args.precision == "binary16" else 0
    if flag:
        emb = quantize_f16(emb)
    out_set = EmbeddingSet(emb, records.person_ids, records.camera_ids, records.roles)
    write_embedding_file(args.out, out_set, precision_flag=flag)
    print(f"embedded {len(out_set)} records at {args.precision} into {args.out}")
    return 0


# -- eval -----------------------------------------------------------------


def cmd_eval(args) -> int:
    records, _ = read_embedding_file(args.embeddings)
    queries = records.with_role(Role.QUERY)
    gallery = records.with_role(Role.GALLERY)
    if len(queries) == 0 or len(gallery) == 0:
        raise ValueError("embedding file needs both query and gallery records")
    mode = Precision.parse(args.precision)
    ranks = _parse_int_list(args.ranks)

    dist = evaluation.distmat(queries.vectors, gallery.vectors, mode)
    reports = []
    rates, ap, kept, dropped = evaluation.cmc_map(
        dist, queries.person_ids, queries.camera_ids,
        gallery.person_ids, gallery.camera_ids, ranks)
    reports.append(evaluation.EvalReport(rates, ap, "plain", mode, kept, dropped))

    if args.rerank:
        qv, gv = queries.vectors, gallery.vectors
        if mode is Precision.BINARY16:
            qv, gv = quantize_f16(qv), quantize_f16(gv)
        rr = evaluation.k_reciprocal_rerank(qv, gv, args.k1, args.k2, args.lam)
        rates, ap, kept, dropped = evaluation.cmc_map(
            rr, queries.person_ids, queries.camera_ids,
            gallery.person_ids, gallery.camera_ids, ranks)
        reports.append(evaluation.EvalReport(rates, ap, "reranked", mode, kept, dropped))

    digest = _hash_args("eval", args)
    os.makedirs(args.out_dir, exist_ok=True)
    header = (["variant", "precision"] + [f"cmc_{k}" for k in sorted(set(ranks))]
              + ["map", "queries_evaluated", "queries_dropped", "config_hash"])
    rows = []
    for rep in reports:
        rows.append([rep.variant, rep.precision_mode.value]
                    + [f"{rep.cmc[k]:.6f}" for k in sorted(rep.cmc)]
                    + [f"{rep.mean_ap:.6f}", rep.queries_evaluated,
                       rep.queries_dropped, digest])
    reporting.write_csv(os.path.join(args.out_dir, "eval_report.csv"), header, rows)
    reporting.write_json(os.path.join(args.out_dir, "eval_report.json"), {
        "config_hash": digest,
        "reports": [{
            "variant": rep.variant,
            "precision": rep.precision_mode.value,
            "cmc": {str(k): rep.cmc[k] for k in sorted(rep.cmc)},
            "map": rep.mean_ap,
            "queries_evaluated": rep.queries_evaluated,
            "queries_dropped": rep.queries_dropped,
        } for rep in reports],
    })
    if not args.no_figures:
        reporting.plot_eval_bars(reports, os.path.join(args.out_dir, "eval_report.png"))
    for rep in reports:
        first = sorted(rep.cmc)[0]
        print(f"{rep.variant}: CMC-{first} {rep.cmc[first]:.4f}  mAP {rep.mean_ap:.4f} "
              f"({rep.queries_evaluated} queries, {rep.queries_dropped} dropped)")
    return 0


# -- plan -----------------------------------------------------------------


def cmd_plan(args) -> int:
    digest = _hash_args("plan", args)
    os.makedirs(args.out_dir, exist_ok=True)
    summary_rows = []
    layer_header = ["model", "layer", "op_kind", "param_count", "precision", "bytes"]
    layer_rows = []
    models_json = []
    for path in args.manifest:
        manifest = planner.load_manifest(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        plan = planner.partition(manifest)
        planner.save_plan(os.path.join(args.out_dir, f"{stem}_plan.txt"), plan)

        full_bytes, _ = planner.model_size_bytes(manifest, planner.binary32_plan(manifest))
        mixed_bytes, rows = planner.model_size_bytes(manifest, plan)
        macs = planner.manifest_macs(manifest)
        kind_by_name = {e.name: e for e in manifest}
        for name, precision, nbytes in rows:
            entry = kind_by_name[name]
            layer_rows.append([stem, name, entry.kind.value, entry.param_count,
                               precision.value, nbytes])
        summary_rows.append({
            "model": stem,
            "binary32_bytes": full_bytes,
            "binary32_mb": full_bytes / 1e6,
            "partitioned_bytes": mixed_bytes,
            "partitioned_mb": mixed_bytes / 1e6,
            "compression_ratio": full_bytes / mixed_bytes,
            "macs": macs,
        })
        models_json.append(summary_rows[-1])

    cross = None
    if len(summary_rows) >= 2:
        cross = summary_rows[0]["binary32_bytes"] / summary_rows[-1]["partitioned_bytes"]

    header = ["model", "binary32_mb", "partitioned_mb", "compression_ratio",
              "macs", "config_hash"]
    rows = [[r["model"], f"{r['binary32_mb']:.3f}", f"{r['partitioned_mb']:.3f}",
             f"{r['compression_ratio']:.4f}", r["macs"], digest] for r in summary_rows]
    if cross is not None:
        rows.append([f"{summary_rows[0]['model']}/{summary_rows[-1]['model']}",
                     "", "", f"{cross:.4f}", "", digest])
    reporting.write_csv(os.path.join(args.out_dir, "plan_report.csv"), header, rows)
    reporting.write_csv(os.path.join(args.out_dir, "plan_layers.csv"),
                        layer_header, layer_rows)
    reporting.write_json(os.path.join(args.out_dir, "plan_report.json"), {
        "config_hash": digest,
        "models": models_json,
        "cross_model_ratio": cross,
    })
    if not args.no_figures:
        reporting.plot_size_bars(summary_rows, os.path.join(args.out_dir, "plan_report.png"))
    for r in summary_rows:
        print(f"{r['model']}: {r['binary32_mb']:.2f} MB -> {r['partitioned_mb']:.2f} MB "
              f"(x{r['compression_ratio']:.2f})")
    if cross is not None:
        print(f"cross-model ratio: {cross:.2f}")
    return 0


# -- bench ----------------------------------------------------------------


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    # Symmetry gate: with queries == gallery the matrix must be symmetric
    # with a zero diagonal before any timing is worth reporting.
    probe = rng.standard_normal((64, args.dim)).astype(np.float32)
    for mode in (Precision.BINARY32, Precision.BINARY16):
        d = evaluation.distmat(probe, probe, mode)
        if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0.0):
            raise AssertionError(f"distmat symmetry validation failed at {mode.value}")

    q = rng.standard_normal((args.queries, args.dim)).astype(np.float32)
    g = rng.standard_normal((args.gallery, args.dim)).astype(np.float32)
    digest = _hash_args("bench", args)
    rows = []
    for mode, width in ((Precision.BINARY32, 4), (Precision.BINARY16, 2)):
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            evaluation.distmat(q, g, mode)
            times.append(time.perf_counter() - t0)
        times.sort()
        rows.append({
            "mode": mode.value,
            "median_seconds": times[len(times) // 2],
            "min_seconds": times[0],
            "max_seconds": times[-1],
            "query_bytes": args.queries * args.dim * width,
            "gallery_bytes": args.gallery * args.dim * width,
        })
    storage_ratio = rows[0]["query_bytes"] / rows[1]["query_bytes"]

    os.makedirs(args.out_dir, exist_ok=True)
    note = ("emulated binary16 quantizes through binary16 in software and is "
            "not expected to run faster; the storage ratio is the point")
    header = ["mode", "median_seconds", "min_seconds", "max_seconds",
              "query_bytes", "gallery_bytes", "config_hash"]
    reporting.write_csv(os.path.join(args.out_dir, "bench_report.csv"), header,
                        [[r["mode"], f"{r['median_seconds']:.6f}",
                          f"{r['min_seconds']:.6f}", f"{r['max_seconds']:.6f}",
                          r["query_bytes"], r["gallery_bytes"], digest]
                         for r in rows])
    reporting.write_json(os.path.join(args.out_dir, "bench_report.json"), {
        "config_hash": digest,
        "note": note,
        "symmetry_validated": True,
        "storage_ratio": storage_ratio,
        "modes": rows,
    })
    if not args.no_figures:
        reporting.plot_bench_bars(rows, os.path.join(args.out_dir, "bench_report.png"))
    for r in rows:
        print(f"{r['mode']}: median {r['median_seconds']:.4f}s "
              f"(storage {r['query_bytes'] + r['gallery_bytes']} bytes)")
    print(f"storage ratio binary32/binary16: {storage_ratio:.1f} ({note})")
    return 0


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reidmx",
        description="mixed-precision metric learning and re-identification retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--ids", type=int, default=10)
    p.add_argument("--per-id", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.35)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--train-frac", type=float, default=0.5)
    p.add_argument("--query-frac", type=float, default=0.25)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an embedding network")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--ids-per-batch", type=int, default=32)
    p.add_argument("--instances-per-id", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--decay-start", type=int, default=None,
                   help="epoch where exponential decay begins (default min(150, epochs))")
    p.add_argument("--decay-floor", type=float, default=1e-3)
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--loss-scale", type=float, default=1024.0)
    p.add_argument("--precision", choices=["binary32", "partitioned"],
                   default="partitioned")
    p.add_argument("--plan", default=None, help="custom plan file overriding --precision")
    p.add_argument("--hidden", default="64,64", help="hidden widths, comma separated")
    p.add_argument("--emb-dim", type=int, default=32)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--mix-ratio", type=float, default=0.5)
    p.add_argument("--pool-capacity", type=int, default=None)
    p.add_argument("--unsquared", action="store_true",
                   help="use plain instead of squared distances in the loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract embeddings from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--precision", choices=["binary32", "binary16"], default="binary32",
                   help="storage precision of the written vectors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="retrieval evaluation")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ranks", default="1,5,10")
    p.add_argument("--precision", choices=["binary32", "binary16"], default="binary32")
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lam", type=float, default=0.3)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="partition manifests and report sizes")
    p.add_argument("--manifest", action="append", required=True,
                   help="layer manifest file; repeat for several models")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench", help="time the distance matrix")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--gallery", type=int, default=400)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FormatError, PrecisionViolation, evaluation.EvalError,
            FloatingPointError, OSError, AssertionError) as exc:
        line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
        print(line, file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

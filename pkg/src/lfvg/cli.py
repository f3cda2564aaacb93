"""Command-line entry point.

One binary with subcommands: synth, import-check, proposals, train, infer,
eval, ablate. Every command resolves its configuration (preset < JSON
config file < explicit flags), runs, and writes a run manifest with the
fully materialized config so the run can be reproduced exactly.

Exit codes: 0 success, 2 usage/input error, 3 numeric failure. The
``LFVG_SEED`` environment variable supplies a default seed; flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from .data import AlignmentConfig, generate_synthetic_dataset
from .errors import LfvgError, NumericError
from .evaluation import (
    evaluate,
    format_ablation_table,
    format_eval_table,
    report_json,
    run_ablation,
    sweep_csv,
)
from .grounding import load_checkpoint, save_checkpoint
from .proposals import generate_proposals, similarity_matrix
from .store import export_dataset, import_feature_store, read_blob
from .training import PRESETS, TrainConfig, config_hash, train, write_loss_csv


def _build_identifier() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except Exception:
        rev = ""
    return f"lfvg {__version__}" + (f" ({rev})" if rev else "")


def _write_manifest(out_dir, command, args_ns, resolved_config, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": getattr(args_ns, "effective_argv", sys.argv[1:]),
        "resolved_config": resolved_config,
        "seed": resolved_config.get("seed"),
        "build": _build_identifier(),
        "inputs": inputs,
        "outputs": outputs,
        "started_at_unix": started,
        "duration_s": time.time() - started,
        "config_hash": hashlib.sha256(
            json.dumps(resolved_config, sort_keys=True).encode()
        ).hexdigest(),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)
    return path


def _default_seed() -> int:
    env = os.environ.get("LFVG_SEED")
    return int(env) if env else 0


def _resolve_train_config(args) -> TrainConfig:
    cfg = PRESETS[args.preset]
    config_has_seed = False
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
        valid = {f.name for f in fields(TrainConfig)}
        unknown = set(overrides) - valid
        if unknown:
            raise LfvgError(f"unknown config keys {sorted(unknown)}")
        config_has_seed = "seed" in overrides
        cfg = replace(cfg, **overrides)
    flag_map = {
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "learning_rate",
        "hidden": "hidden",
        "clusters": "clusters",
        "candidates": "candidates",
        "perturb_scale": "perturb_scale",
        "att_weight": "att_loss_weight",
        "tau": "gumbel_tau",
        "max_merge": "max_merge",
        "min_len": "min_event_len",
        "grad_clip": "grad_clip",
        "selection": "selection",
        "max_segments": "max_segments",
        "seed": "seed",
    }
    updates = {}
    for flag, field_name in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[field_name] = value
    if getattr(args, "mode", None) is not None:
        updates["mode"] = args.mode.replace("-", "_")
    if "seed" not in updates and not config_has_seed:
        updates["seed"] = _default_seed()
    return replace(cfg, **updates)


def cmd_synth(args) -> int:
    started = time.time()
    latent = args.latent_dim or max(2, args.dim // 2)
    cfg = AlignmentConfig(
        latent_dim=latent,
        video_dim=args.video_dim or args.dim,
        query_dim=args.query_dim or args.dim,
        align_noise_sigma=args.align_noise,
        obs_noise_sigma=args.obs_noise,
        seed=args.seed if args.seed is not None else _default_seed(),
    )
    dataset = generate_synthetic_dataset(
        cfg,
        n_videos=args.videos,
        segments_per_video=args.segments,
        events_per_video=args.events,
        frames_per_segment=args.frames_per_segment,
        duration_s=args.duration,
    )
    export_dataset(dataset, args.out)
    resolved = dict(asdict(cfg), videos=args.videos, segments=args.segments,
                    events=args.events, frames_per_segment=args.frames_per_segment,
                    duration=args.duration)
    _write_manifest(args.out, "synth", args, resolved, [], [args.out], started)
    print(f"wrote {len(dataset.videos)} videos / {len(dataset.queries)} queries to {args.out}")
    return 0


def cmd_import_check(args) -> int:
    dataset = import_feature_store(args.data)
    print(
        f"ok: {len(dataset.videos)} videos, {len(dataset.queries)} queries, "
        f"provenance={dataset.provenance}"
    )
    return 0


def cmd_proposals(args) -> int:
    started = time.time()
    dataset = import_feature_store(args.data)
    seed = args.seed if args.seed is not None else _default_seed()
    os.makedirs(args.out, exist_ok=True)
    dump_path = os.path.join(args.out, "proposals.json")
    payload = []
    for video in dataset.videos:
        sim = similarity_matrix(video.segment_features)
        proposals = generate_proposals(
            video, k=args.clusters, max_merge=args.max_merge, min_len=args.min_len, seed=seed
        )
        payload.append(
            {
                "video_id": video.id,
                "similarity": sim.values.tolist(),
                "proposals": [
                    {
                        "first": p.first,
                        "last": p.last,
                        "start": p.interval.start,
                        "end": p.interval.end,
                        "merged_from": p.merged_from,
                    }
                    for p in proposals
                ],
            }
        )
    with open(dump_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    resolved = {"clusters": args.clusters, "max_merge": args.max_merge,
                "min_len": args.min_len, "seed": seed}
    _write_manifest(args.out, "proposals", args, resolved, [args.data], [dump_path], started)
    print(f"wrote proposals for {len(payload)} videos to {dump_path}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve_train_config(args)
    dataset = import_feature_store(args.data)
    result = train(dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    resolved = asdict(cfg)
    save_checkpoint(
        ckpt_dir,
        result.grounding,
        result.selector,
        extra={
            "mode": cfg.mode,
            "train_config": resolved,
            "config_hash": config_hash(cfg),
        },
    )
    loss_path = os.path.join(args.out, "loss.csv")
    write_loss_csv(loss_path, result.loss_curve)
    _write_manifest(args.out, "train", args, resolved, [args.data], [ckpt_dir, loss_path], started)
    final = result.loss_curve[-1]
    print(f"trained {cfg.epochs} epochs ({final.step + 1} steps), final loss {final.total:.6f}")
    print(f"checkpoint: {ckpt_dir}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = import_feature_store(args.data)
    result = evaluate(model, dataset)
    table = format_eval_table(result)
    print(table)
    outputs = []
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        json_path = os.path.join(args.out, "eval.json")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(result.to_dict(), fh, indent=1, sort_keys=True)
        txt_path = os.path.join(args.out, "eval.txt")
        with open(txt_path, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        outputs = [json_path, txt_path]
        _write_manifest(args.out, "eval", args, {"seed": None}, [args.checkpoint, args.data], outputs, started)
    return 0


def cmd_infer(args) -> int:
    import torch

    started = time.time()
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = import_feature_store(args.data)
    video = dataset.video_by_id(args.video_id)

    if args.query_id:
        matches = [q for q in dataset.queries if q.id == args.query_id]
        if not matches:
            raise LfvgError(f"no query with id {args.query_id} in the store")
        feature = matches[0].feature
    elif args.query_blob:
        rows = read_blob(args.query_blob)
        if not 0 <= args.row < rows.shape[0]:
            raise LfvgError(f"--row {args.row} out of range for {args.query_blob}")
        feature = rows[args.row]
        norm = np.linalg.norm(feature)
        if norm == 0:
            raise LfvgError("query feature has zero norm")
        feature = feature / norm
    else:
        raise LfvgError("provide --query-id or --query-blob")

    with torch.no_grad():
        out = model.forward(
            torch.from_numpy(np.asarray(video.segment_features, dtype=np.float64)),
            torch.from_numpy(np.asarray(feature, dtype=np.float64)),
        )
    start, end = (float(v) for v in out.prediction)
    payload = {
        "video_id": video.id,
        "t_s": start,
        "t_e": end,
        "t_s_seconds": start * video.duration_s,
        "t_e_seconds": end * video.duration_s,
        "attention": [float(a) for a in out.attention],
    }
    print(json.dumps(payload, indent=1))
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
        os.makedirs(out_dir, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
        _write_manifest(
            out_dir, "infer", args, {"seed": None, "video_id": args.video_id},
            [args.checkpoint, args.data], [args.out], started,
        )
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _resolve_train_config(args)
    dataset = import_feature_store(args.data)
    seeds = [int(s) for s in args.seeds.split(",")]
    suite = args.suite.replace("-", "_")
    report = run_ablation(suite, dataset, cfg, seeds)
    table = format_ablation_table(report)
    print(table)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "ablation.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report_json(report))
    txt_path = os.path.join(args.out, "ablation.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    outputs = [json_path, txt_path]
    if suite == "n_frames":
        csv_path = os.path.join(args.out, "sweep.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(sweep_csv(report))
        outputs.append(csv_path)
    resolved = dict(asdict(cfg), suite=suite, seeds=seeds)
    _write_manifest(args.out, "ablate", args, resolved, [args.data], outputs, started)
    if args.assert_orderings and not all(report.orderings.values()):
        failed = [k for k, v in report.orderings.items() if not v]
        print(f"ordering assertions failed: {failed}", file=sys.stderr)
        return 1
    return 0


def _add_train_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", help="JSON file of TrainConfig overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--candidates", type=int)
    p.add_argument("--perturb-scale", dest="perturb_scale", type=float)
    p.add_argument("--att-weight", dest="att_weight", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--max-merge", dest="max_merge", type=int)
    p.add_argument("--min-len", dest="min_len", type=int)
    p.add_argument("--max-segments", dest="max_segments", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--selection", choices=["st", "random"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfvg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature store")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--segments", type=int, default=32)
    p.add_argument("--events", type=int, default=5)
    p.add_argument("--frames-per-segment", dest="frames_per_segment", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--video-dim", dest="video_dim", type=int)
    p.add_argument("--query-dim", dest="query_dim", type=int)
    p.add_argument("--align-noise", dest="align_noise", type=float, default=0.0)
    p.add_argument("--obs-noise", dest="obs_noise", type=float, default=0.05)
    p.add_argument("--duration", type=float, default=64.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-check", help="validate a feature store")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_import_check)

    p = sub.add_parser("proposals", help="dump similarity matrices and proposals")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--max-merge", dest="max_merge", type=int, default=2)
    p.add_argument("--min-len", dest="min_len", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_proposals)

    p = sub.add_parser("train", help="train on a feature store")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["language-free", "upper-bound"])
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a query split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="ground one query feature in one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video-id", dest="video_id", required=True)
    p.add_argument("--query-id", dest="query_id")
    p.add_argument("--query-blob", dest="query_blob")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--suite", required=True, choices=["losses", "selection", "n-frames"])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--assert-orderings", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = [str(a) for a in (sys.argv[1:] if argv is None else argv)]
    args = parser.parse_args(argv)
    args.effective_argv = argv
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except LfvgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Every subcommand reads a flat key=value config file plus `--set key=value`
overrides and writes its logs, checkpoints, and reports into a run
directory (timestamped by default, fixable with --run-dir so pipeline
stages can share one directory). Artifact names inside a run directory are
fixed: dataset.bin, teacher.ckpt, student_distill.ckpt, student_tf.ckpt,
student_grpo.ckpt, logs/*.jsonl, eval_report.json, report.txt.
"""
from __future__ import annotations

import argparse
import base64
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import scenes
from .autodiff import load_checkpoint, save_checkpoint
from .distill import rollout_video, run_distill
from .evaluate import bench_latency, evaluate_checkpoint, format_report, run_ablation
from .grpo import run_grpo
from .nets import NetConfig, init_velocity_net
from .rewards import get_reward_fn
from .scenes import ControlSignal, build_dataset, encode_control, load_dataset, render_frame, save_dataset
from .rewards import RewardConfig, track_position
from .teacher import train_teacher

SUBCOMMANDS = ("gen-data", "train-teacher", "distill", "grpo", "eval",
               "bench-latency", "ablate", "serve", "generate")


def _run_dir(args, cfg) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(cfg["run_root"]) / f"{stamp}-seed{cfg['seed']}"
    (path / "logs").mkdir(parents=True, exist_ok=True)
    with open(path / "config.resolved.txt", "w") as f:
        f.write(cfg.render())
    return path


def _dataset_path(args, run_dir: Path) -> Path:
    return Path(args.data) if args.data else run_dir / "dataset.bin"


def _load_net_checkpoint(path):
    store, meta = load_checkpoint(path)
    if "net" not in meta:
        raise SystemExit(f"checkpoint {path} carries no network manifest")
    return store, NetConfig.from_dict(meta["net"]), meta


def _net_meta(cfg, net_cfg: NetConfig, kind: str, extra: dict | None = None) -> dict:
    meta = {"net": net_cfg.as_dict(), "kind": kind,
            "schedule": [float(s) for s in cfg["schedule"].split(",")]}
    meta.update(extra or {})
    return meta


def cmd_gen_data(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = build_dataset(cfg["data.count"], cfg["data.m_steps"], cfg["seed"],
                       side=cfg["data.side"])
    out = _dataset_path(args, run_dir)
    save_dataset(ds, out)
    print(f"wrote {len(ds.clips)} clips ({len(ds.split('train'))} train / "
          f"{len(ds.split('val'))} val) to {out}")
    return 0


def cmd_train_teacher(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = load_dataset(_dataset_path(args, run_dir))
    net_cfg = cfgmod.net_config(cfg, "bidirectional")
    store = init_velocity_net(net_cfg, cfg["seed"])
    with open(run_dir / "logs" / "teacher_train.jsonl", "w") as log:
        records = train_teacher(store, net_cfg, ds, steps=cfg["teacher.steps"],
                                batch_size=cfg["teacher.batch"], lr=cfg["teacher.lr"],
                                weight_decay=cfg["teacher.weight_decay"],
                                seed=cfg["seed"], log_file=log)
    out = run_dir / "teacher.ckpt"
    save_checkpoint(out, store, _net_meta(cfg, net_cfg, "teacher"))
    val = [r["val_loss"] for r in records if "val_loss" in r]
    print(f"teacher trained for {len(records)} steps; val loss {val[-1]:.4f}; wrote {out}")
    return 0


def cmd_distill(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = load_dataset(_dataset_path(args, run_dir))
    teacher_path = Path(args.checkpoint) if args.checkpoint else run_dir / "teacher.ckpt"
    teacher_store, teacher_cfg, _ = _load_net_checkpoint(teacher_path)
    mode = cfg["distill.mode"]
    tag = "tf" if mode == "teacher-forcing" else "distill"
    with open(run_dir / "logs" / f"student_{tag}_train.jsonl", "w") as log:
        student, student_cfg, records = run_distill(
            teacher_store, teacher_cfg, cfgmod.schedule(cfg), ds, mode=mode,
            objective=cfg["distill.objective"], steps=cfg["distill.steps"],
            batch_size=cfg["distill.batch"], lr=cfg["distill.lr"],
            weight_decay=cfg["distill.weight_decay"],
            teacher_sample_steps=cfg["teacher.sample_steps"], seed=cfg["seed"],
            fake_lr=cfg["distill.fake_lr"],
            fake_update_ratio=cfg["distill.fake_update_ratio"],
            dmd_t_lo=cfg["distill.dmd_t_lo"], dmd_t_hi=cfg["distill.dmd_t_hi"],
            log_file=log)
    out = run_dir / f"student_{tag}.ckpt"
    save_checkpoint(out, student, _net_meta(cfg, student_cfg, "student",
                                            {"distill_mode": mode,
                                             "objective": cfg["distill.objective"]}))
    print(f"distilled student ({mode}, {cfg['distill.objective']}) in "
          f"{len(records)} steps; final loss {records[-1]['loss']:.5f}; wrote {out}")
    return 0


def cmd_grpo(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = load_dataset(_dataset_path(args, run_dir))
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "student_distill.ckpt"
    store, net_cfg, meta = _load_net_checkpoint(ckpt)
    ref_store = store.clone()
    grpo_cfg = cfgmod.grpo_config(cfg)
    reward_cfg = cfgmod.reward_config(cfg)
    reward_fn = get_reward_fn(cfg["reward.model"])
    with open(run_dir / "logs" / "grpo_train.jsonl", "w") as log:
        records = run_grpo(store, net_cfg, cfgmod.schedule(cfg), ds, grpo_cfg,
                           reward_cfg, reward_fn, cfg["seed"], log_file=log,
                           ref_store=ref_store)
    out = run_dir / "student_grpo.ckpt"
    save_checkpoint(out, store, _net_meta(cfg, net_cfg, "student",
                                          {"stage": "grpo", "base": str(ckpt)}))
    first = np.mean([r["mean_reward"] for r in records[:10]])
    last = np.mean([r["mean_reward"] for r in records[-10:]])
    print(f"grpo: {len(records)} iterations; mean reward {first:.3f} -> {last:.3f}; wrote {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = load_dataset(_dataset_path(args, run_dir))
    store, net_cfg, meta = _load_net_checkpoint(Path(args.checkpoint))
    report = evaluate_checkpoint(meta.get("kind", "student"), store, net_cfg,
                                 cfgmod.schedule(cfg), ds.split(args.split),
                                 cfgmod.reward_config(cfg), cfg["eval.seed"],
                                 teacher_steps=cfg["teacher.sample_steps"],
                                 max_clips=cfg["eval.max_clips"])
    per_clip = report.pop("per_clip")
    with open(run_dir / "eval_clips.jsonl", "w") as f:
        for rec in per_clip:
            f.write(json.dumps(rec) + "\n")
    report["checkpoint"] = str(args.checkpoint)
    report["note"] = ("distribution-level video metrics are not reproducible at "
                      "this scale; trajectory alignment, reward, and latency "
                      "metrics stand in for them")
    with open(run_dir / "eval_report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    text = format_report(report, f"evaluation: {meta.get('kind', 'student')} on {args.split}")
    with open(run_dir / "report.txt", "w") as f:
        f.write(text)
    print(text, end="")
    return 0


def cmd_bench_latency(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = load_dataset(_dataset_path(args, run_dir))
    store, net_cfg, meta = _load_net_checkpoint(Path(args.checkpoint))
    mode = args.mode or ("teacher-bidirectional" if meta.get("kind") == "teacher"
                         else "student-AR")
    rep = bench_latency(mode, store, net_cfg, cfgmod.schedule(cfg), ds.clips[0],
                        runs=cfg["bench.runs"], warmup=cfg["bench.warmup"],
                        teacher_steps=cfg["teacher.sample_steps"], seed=cfg["seed"])
    with open(run_dir / f"latency_{mode}.json", "w") as f:
        json.dump(rep, f, indent=2, sort_keys=True)
    print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    ds = load_dataset(_dataset_path(args, run_dir))
    paths = {
        "full": run_dir / "student_grpo.ckpt",
        "w/o RL": run_dir / "student_distill.ckpt",
        "w/o Self-Rollout": run_dir / "student_tf.ckpt",
        "teacher": run_dir / "teacher.ckpt",
    }
    stores, cfgs = {}, {}
    for name, path in paths.items():
        if not path.exists():
            raise SystemExit(f"ablation checkpoint missing: {path}")
        stores[name], cfgs[name], _ = _load_net_checkpoint(path)
    report = run_ablation(stores, cfgs, cfgmod.schedule(cfg), ds,
                          cfgmod.reward_config(cfg), cfg["eval.seed"],
                          teacher_steps=cfg["teacher.sample_steps"],
                          max_clips=cfg["eval.max_clips"])
    with open(run_dir / "ablation_report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    text = format_report(report, "ablation (validation split)")
    with open(run_dir / "ablation_report.txt", "w") as f:
        f.write(text)
    print(text, end="")
    return 0


def cmd_serve(args, cfg) -> int:
    from .service import serve_forever
    run_dir = _run_dir(args, cfg)
    ckpt_dir = Path(cfg["service.checkpoint_dir"]) if cfg["service.checkpoint_dir"] else run_dir
    return serve_forever(ckpt_dir, cfgmod.schedule(cfg), cfgmod.reward_config(cfg),
                         host=cfg["service.host"], port=cfg["service.port"],
                         studio_dir=cfg["service.studio_dir"] or None)


def _controls_from_positions(positions: list[tuple[float, float]], side: int) -> list[ControlSignal]:
    controls = []
    for m, pos in enumerate(positions):
        controls.append(ControlSignal(
            frame_index=m, target=(float(pos[0]), float(pos[1])),
            heatmap=encode_control(pos, side),
            reference=render_frame(positions[0], side) if m == 0 else None))
    return controls


def cmd_generate(args, cfg) -> int:
    run_dir = _run_dir(args, cfg)
    store, net_cfg, meta = _load_net_checkpoint(Path(args.checkpoint))
    if args.positions:
        positions = [tuple(float(v) for v in p.split(","))
                     for p in args.positions.split(";")]
        controls = _controls_from_positions(positions, net_cfg.side)
    else:
        ds = load_dataset(_dataset_path(args, run_dir))
        controls = ds.clips[args.clip].controls()
        positions = [c.target for c in controls]
    roll = rollout_video(store, net_cfg, cfgmod.schedule(cfg), controls,
                         args.seed if args.seed is not None else cfg["seed"],
                         mode="infer")
    reward_cfg = cfgmod.reward_config(cfg)
    out = {
        "checkpoint": str(args.checkpoint),
        "seed": args.seed if args.seed is not None else cfg["seed"],
        "controls": [list(p) for p in positions],
        "frames": [{"b64": base64.b64encode(
                        np.ascontiguousarray(f, dtype="<f8").tobytes()).decode(),
                    "shape": list(f.shape)} for f in roll.frames],
        "tracked": [list(track_position(f, reward_cfg) or (None, None))
                    for f in roll.frames],
    }
    path = Path(args.out) if args.out else run_dir / "generated.json"
    with open(path, "w") as f:
        json.dump(out, f)
    print(f"generated {len(roll.frames)} frames -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsteer",
        description="few-step autoregressive flow-matching video generation "
                    "with RL-tuned trajectory control on synthetic blob scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--run-dir", help="run directory (default: timestamp+seed)")
        p.add_argument("--data", help="dataset file (default: <run-dir>/dataset.bin)")

    p = sub.add_parser("gen-data", help="generate the synthetic clip corpus")
    common(p)
    p = sub.add_parser("train-teacher", help="train the bidirectional teacher")
    common(p)
    p = sub.add_parser("distill", help="distill the teacher into the causal student")
    common(p)
    p.add_argument("--checkpoint", help="teacher checkpoint (default: <run-dir>/teacher.ckpt)")
    p = sub.add_parser("grpo", help="policy-optimize the distilled student")
    common(p)
    p.add_argument("--checkpoint", help="student checkpoint (default: <run-dir>/student_distill.ckpt)")
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p = sub.add_parser("bench-latency", help="first-frame/per-frame latency benchmark")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("student-AR", "teacher-bidirectional"))
    p = sub.add_parser("ablate", help="evaluate the four training variants")
    common(p)
    p = sub.add_parser("serve", help="run the live steering session server")
    common(p)
    p = sub.add_parser("generate", help="offline video generation from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", type=int, default=0, help="dataset clip index for controls")
    p.add_argument("--positions", help="explicit controls 'x,y;x,y;...' in the unit square")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output JSON path")
    return parser


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "grpo": cmd_grpo,
    "eval": cmd_eval,
    "bench-latency": cmd_bench_latency,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
    "generate": cmd_generate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = cfgmod.load_config(args.config, args.overrides)
    return HANDLERS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())

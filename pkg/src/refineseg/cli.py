"""Command-line entry points.

``refineseg train|predict|eval|reward-check|render|synth``. Exit status is 0 on
success, 1 on a runtime failure and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .codec import parse_completion
from .data import Dataset, SceneParams, SplitSpec, load_manifest, split, synth_generate, write_manifest
from .geometry import BBox
from .grpo import GrpoConfig, GrpoTrainer, infer
from .metrics import EvalRecord, per_class_accuracy, summarize
from .pngio import read_mask, write_mask, write_rgb
from .policy import RemoteChatPolicy, ToyPolicy
from .render import OverlayStyle, overlay
from .rewards import LengthRewardParams, stage1_reward, stage2_reward
from .segmenter import OracleSegmenter, RemoteSegmenter, TransportError

log = logging.getLogger("refineseg")

SEGMENTER_URL_ENV = "REFINESEG_SEGMENTER_URL"
POLICY_URL_ENV = "REFINESEG_POLICY_URL"


class ConfigError(Exception):
    pass


def default_config() -> dict:
    return {
        "grpo": asdict(GrpoConfig()),
        "reward": {"mu": 2.0, "sigma": 2.0},
        "eval": {"iou_threshold": 0.5},
        "render": asdict(OverlayStyle()),
        "policy": {
            "backend": "toy",
            "url": None,
            "model": "default",
            "grid": 16,
            "max_objects": 4,
            "max_points": 4,
            "init_scale": 0.0,
            "timeout": 60.0,
            "retries": 2,
        },
        "segmenter": {"backend": "oracle", "url": None, "timeout": 30.0, "retries": 2},
        "data": {"root": None, "synthetic_seed": 0, "synthetic_n": 64, "split": "train", "split_seed": 0},
        "seed": 0,
        "out": "runs/default",
        "snapshot_every": 50,
    }


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {name}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name} must be an object")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, **overrides) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, raw)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    if os.environ.get(SEGMENTER_URL_ENV):
        cfg["segmenter"]["url"] = os.environ[SEGMENTER_URL_ENV]
    if os.environ.get(POLICY_URL_ENV):
        cfg["policy"]["url"] = os.environ[POLICY_URL_ENV]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        GrpoConfig(**cfg["grpo"])
        LengthRewardParams(**cfg["reward"])
        _style(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for part, choices in (("policy", ("toy", "remote")), ("segmenter", ("oracle", "remote"))):
        backend = cfg[part]["backend"]
        if backend not in choices:
            raise ConfigError(f"{part}.backend must be one of {choices}, got {backend!r}")
        if backend == "remote" and not cfg[part]["url"]:
            raise ConfigError(f"{part}.url is required for the remote backend")
    root = cfg["data"]["root"]
    if root is not None and not Path(root).is_dir():
        raise ConfigError(f"data.root does not exist: {root}")
    if cfg["data"]["split"] not in ("all", "train", "val", "test"):
        raise ConfigError("data.split must be all, train, val or test")
    if not 0 < cfg["eval"]["iou_threshold"] < 1:
        raise ConfigError("eval.iou_threshold must lie in (0, 1)")


def _style(cfg: dict) -> OverlayStyle:
    s = dict(cfg["render"])
    s["box_color"] = tuple(s["box_color"])
    s["mask_color"] = tuple(s["mask_color"])
    return OverlayStyle(**s)


def load_dataset(cfg: dict, split_name: str | None = None) -> Dataset:
    d = cfg["data"]
    if d["root"] is not None:
        ds = load_manifest(d["root"])
    else:
        ds = synth_generate(d["synthetic_seed"], d["synthetic_n"])
    name = split_name or d["split"]
    if name == "all" or len(ds) == 0:
        return ds
    train, val, test = split(ds, SplitSpec(), d["split_seed"])
    return {"train": train, "val": val, "test": test}[name]


def make_segmenter(cfg: dict, dataset: Dataset):
    s = cfg["segmenter"]
    if s["backend"] == "remote":
        return RemoteSegmenter(s["url"], timeout=s["timeout"], retries=s["retries"])
    missing = [x.id for x in dataset if x.scene is None]
    if missing:
        raise ConfigError(f"oracle segmenter needs scene descriptions; missing for {missing[0]}")
    return OracleSegmenter()


def make_toy_policy(cfg: dict, dataset: Dataset) -> ToyPolicy:
    p = cfg["policy"]
    size = dataset[0].width if len(dataset) else 64
    return ToyPolicy(
        [s.id for s in dataset],
        image_size=size,
        grid=p["grid"],
        max_objects=p["max_objects"],
        max_points=p["max_points"],
        init_scale=p["init_scale"],
        seed=cfg["seed"],
    )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# -- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.backend:
        cfg["segmenter"]["backend"] = args.backend
        _validate(cfg)
    if cfg["policy"]["backend"] != "toy":
        raise ConfigError("training needs the toy policy backend")
    dataset = load_dataset(cfg)
    if len(dataset) == 0:
        raise ConfigError("training split is empty")
    out = Path(cfg["out"])
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    policy = make_toy_policy(cfg, dataset)
    trainer = GrpoTrainer(
        policy,
        make_segmenter(cfg, dataset),
        dataset,
        GrpoConfig(**cfg["grpo"]),
        LengthRewardParams(**cfg["reward"]),
        _style(cfg),
        seed=cfg["seed"],
    )
    steps = cfg["grpo"]["steps"]
    every = cfg["snapshot_every"]
    try:
        with open(out / "metrics.jsonl", "w") as fh:
            for _ in range(steps):
                rec = trainer.train_step()
                fh.write(_dumps(rec) + "\n")
                fh.flush()
                s1, s2 = rec["stages"]
                log.info("step %d  R1 %.3f  R2 %.3f  iou %.3f", rec["step"], s1["mean_reward"],
                         s2["mean_reward"], s2["mean_iou"])
                if (every and rec["step"] % every == 0) or rec["step"] == steps:
                    save_snapshot(out / "snapshots" / f"step_{rec['step']:05d}.npz", policy)
    finally:
        trainer.close()
    print(out)
    return 0


def save_snapshot(path: Path, policy: ToyPolicy) -> None:
    lay = policy.layout
    np.savez(
        path,
        logits=policy.params.logits,
        contexts=np.array(policy.contexts),
        shape=np.array([policy.image_size, lay.grid, lay.max_objects, lay.max_points]),
    )


def load_snapshot(path: str) -> ToyPolicy:
    with np.load(path) as z:
        size, grid, k, p = (int(v) for v in z["shape"])
        policy = ToyPolicy(list(z["contexts"]), image_size=size, grid=grid, max_objects=k, max_points=p)
        if z["logits"].shape != policy.params.logits.shape:
            raise ConfigError(f"snapshot {path} does not match its recorded layout")
        policy.params.logits[...] = z["logits"]
    return policy


def cmd_predict(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.backend:
        cfg["segmenter"]["backend"] = args.backend
        _validate(cfg)
    dataset = load_dataset(cfg, args.split)
    if cfg["policy"]["backend"] == "remote":
        p = cfg["policy"]
        policy = RemoteChatPolicy(p["url"], p["model"], timeout=p["timeout"], retries=p["retries"])
    else:
        if args.snapshot is None:
            raise ConfigError("--snapshot is required for the toy policy")
        policy = load_snapshot(args.snapshot)
        unknown = [x.id for x in dataset if x.id not in policy.contexts]
        if unknown:
            raise ConfigError(
                f"the toy policy only covers the scenes it was trained on; {len(unknown)} samples "
                f"(first: {unknown[0]}) are not in the snapshot"
            )
    segmenter = make_segmenter(cfg, dataset)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    style = _style(cfg)
    for s in dataset:
        rng = np.random.default_rng([cfg["seed"], int.from_bytes(s.id.encode()[-7:], "big")])
        _, final = infer(policy, segmenter, s, rng, temperature=0.0, style=style)
        write_mask(out / f"{s.id}.png", final)
    print(out)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, out=args.out)
    dataset = load_dataset(cfg, args.split)
    if len(dataset) == 0:
        raise ConfigError(f"split {args.split or cfg['data']['split']} is empty")
    pred_dir = Path(args.predictions)
    if not pred_dir.is_dir():
        raise ConfigError(f"predictions directory does not exist: {pred_dir}")
    records, missing = [], []
    for s in dataset:
        path = pred_dir / f"{s.id}.png"
        if path.exists():
            pred = read_mask(path)
            if pred.shape != s.gt_mask.shape:
                raise ValueError(f"prediction {path} has shape {pred.shape}, expected {s.gt_mask.shape}")
        else:
            missing.append(s.id)
            pred = np.zeros_like(s.gt_mask)
        records.append(EvalRecord(s.id, pred, s.gt_mask, s.class_label, s.tier))
    thr = cfg["eval"]["iou_threshold"]
    summary = summarize(records, thr)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "tier", "class", "value"])
        for tier, block in summary.items():
            for metric in ("ciou", "giou", "f1"):
                w.writerow([metric, tier, "all", f"{block[metric]:.6f}"])
        for cls, _, value in per_class_accuracy(records):
            w.writerow(["giou", "all", cls, f"{value:.6f}"])
    doc = {"split": args.split or cfg["data"]["split"], "iou_threshold": thr, "summary": summary, "missing": missing}
    (out / "eval_summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    a = summary["all"]
    print(f"cIoU {a['ciou']:.4f}  gIoU {a['giou']:.4f}  F1 {a['f1']:.4f}  n={a['count']}  missing={len(missing)}")
    for sid in missing:
        print(f"missing prediction: {sid}", file=sys.stderr)
    return 0


def cmd_reward_check(args) -> int:
    """Stage 1 gt file: ``{"boxes": [[x1, y1, x2, y2], ...]}``.
    Stage 2 gt file: ``{"gt_mask": PNG, "pred_mask": PNG}``, paths relative to the file.
    """
    try:
        raw = Path(args.completion).read_bytes()
        gt_path = Path(args.gt)
        gt = json.loads(gt_path.read_text())
        completion = parse_completion(raw, args.stage)
        if args.stage == 1:
            boxes = [BBox.from_list(b) for b in gt["boxes"]]
            r = stage1_reward(completion, boxes, args.threshold)
        else:
            gt_mask = read_mask(gt_path.parent / gt["gt_mask"])
            pred = read_mask(gt_path.parent / gt["pred_mask"])
            r = stage2_reward(completion, pred, gt_mask, LengthRewardParams(args.mu, args.sigma))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot evaluate reward: {exc}") from exc
    for name, value in (("format", r.format), ("accuracy", r.accuracy), ("length", r.length), ("total", r.total)):
        print(f"{name:<9}{value:.6f}")
    return 0


def cmd_render(args) -> int:
    cfg = load_config(args.config, out=args.out)
    dataset = load_dataset(cfg, "all")
    sample = dataset.by_id().get(args.sample_id)
    if sample is None:
        raise ConfigError(f"unknown sample id {args.sample_id}")
    try:
        boxes = [BBox.from_list(b) for b in json.loads(Path(args.boxes).read_text())]
        mask = read_mask(args.mask)
    except (OSError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read render inputs: {exc}") from exc
    image = sample.satellite if args.image == "satellite" else sample.map
    boxes = [b.clamped(sample.width, sample.height) for b in boxes]
    dest = Path(args.out or cfg["out"])
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_rgb(dest, overlay(image, boxes, mask, _style(cfg)))
    print(dest)
    return 0


def cmd_synth(args) -> int:
    params = SceneParams(size=args.size)
    ds = synth_generate(args.seed, args.n, params)
    write_manifest(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refineseg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, backend=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if backend:
            p.add_argument("--backend", choices=("oracle", "remote"), help="segmenter backend")

    p = sub.add_parser("train", help="two-stage GRPO on the toy policy")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write final masks for a split")
    common(p)
    p.add_argument("--split", choices=("all", "train", "val", "test"), help="default: data.split")
    p.add_argument("--snapshot", help="toy policy snapshot (.npz)")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="cIoU / gIoU / F1 of predicted masks")
    common(p, backend=False)
    p.add_argument("predictions", help="directory of <sample id>.png masks")
    p.add_argument("--split", choices=("all", "train", "val", "test"), help="default: data.split")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("reward-check", help="score one completion")
    p.add_argument("completion")
    p.add_argument("gt")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=2.0)
    p.set_defaults(fn=cmd_reward_check)

    p = sub.add_parser("render", help="draw boxes and a mask onto a sample image")
    common(p, backend=False)
    p.add_argument("sample_id")
    p.add_argument("boxes", help="JSON list of [x1, y1, x2, y2]")
    p.add_argument("mask", help="mask PNG")
    p.add_argument("--image", choices=("satellite", "map"), default="satellite")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TransportError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: data generation, training, evaluation, analysis,
and ablation sweeps. Every command is deterministic given (config, seed) in
single-threaded mode, and every artifact carries a schema version plus the
hash of the configuration that produced it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import evalstats
from .competition import CompetitionToggles, binarize_masks
from .config import ConfigError, RunConfig
from .decoder import init_params
from .scenegen import Scene, generate_scene, load_scene, save_scene
from .training import (
    PackedScene,
    Trainer,
    collect_predictions,
    hungarian,
    match_cost,
    scene_forward,
)
from .tensor import Tensor

SCHEMA_VERSION = 1

TRAIN_SEED_STRIDE = 100_000  # val scene seeds start here, relative to run.seed


class DatasetError(RuntimeError):
    """Dataset directory missing or inconsistent with its manifest."""


class CheckpointError(ConfigError):
    """Checkpoint incompatible with the supplied configuration."""


# ----------------------------------------------------------------------
# dataset


def cmd_gen_data(cfg: RunConfig, out_dir: str | None = None) -> str:
    """Write the scene files and a manifest; rerunning is byte-identical."""
    target = out_dir or cfg.data_dir
    os.makedirs(target, exist_ok=True)
    manifest = {
        "version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "counts": {"train": cfg.train_scenes, "val": cfg.val_scenes},
        "train": [],
        "val": [],
    }
    for split, count, base in (
        ("train", cfg.train_scenes, cfg.seed),
        ("val", cfg.val_scenes, cfg.seed + TRAIN_SEED_STRIDE),
    ):
        for i in range(count):
            seed = base + i
            name = f"{split}_{i:04d}.json"
            save_scene(generate_scene(cfg.scene, seed), os.path.join(target, name))
            manifest[split].append({"file": name, "seed": seed})
    with open(os.path.join(target, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return target


def load_dataset(data_dir: str) -> tuple[list[Scene], list[Scene]]:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no dataset manifest at {manifest_path}; run gen-data first")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    splits = []
    for split in ("train", "val"):
        scenes = []
        for entry in manifest[split]:
            path = os.path.join(data_dir, entry["file"])
            if not os.path.exists(path):
                raise DatasetError(f"manifest lists missing scene file {path}")
            scenes.append(load_scene(path))
        splits.append(scenes)
    return splits[0], splits[1]


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, cfg: RunConfig, trainer: Trainer) -> None:
    doc = {
        "version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "identity_hash": cfg.identity_hash(),
        "mode": cfg.train.mode,
        "toggles": {"qcl": trainer.toggles.qcl, "rre": trainer.toggles.rre,
                    "rca": trainer.toggles.rca},
        "trainer_state": trainer.state_dict(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str, cfg: RunConfig) -> dict:
    if not os.path.exists(path):
        raise DatasetError(f"no checkpoint at {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    if doc.get("identity_hash") != cfg.identity_hash():
        raise CheckpointError(
            "checkpoint config mismatch: the checkpoint was trained under "
            f"identity {doc.get('identity_hash')!r}, current config is "
            f"{cfg.identity_hash()!r}"
        )
    return doc


def params_from_checkpoint(doc: dict, cfg: RunConfig) -> dict[str, Tensor]:
    params = init_params(cfg.decoder, cfg.competition, seed=cfg.seed)
    stored = doc["trainer_state"]["params"]
    for key, p in params.items():
        if key not in stored:
            raise CheckpointError(f"checkpoint missing parameter {key!r}")
        arr = np.asarray(stored[key], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint parameter {key!r} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr
    return params


# ----------------------------------------------------------------------
# train / eval / analyze


def cmd_train(cfg: RunConfig, out_dir: str | None = None, resume: str | None = None) -> str:
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    train_scenes, val_scenes = load_dataset(cfg.data_dir)
    trainer = Trainer(
        train_scenes, cfg.train, cfg.decoder, cfg.loss, cfg.competition,
        cfg.effective_toggles(), val_scenes=val_scenes,
    )
    metrics_path = os.path.join(out, "metrics.jsonl")
    mode = "w"
    if resume:
        doc = load_checkpoint(resume, cfg)
        trainer.load_state_dict(doc["trainer_state"])
        mode = "a"
    with open(metrics_path, mode) as fh:
        def log_fn(entry: dict) -> None:
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
        trainer.run(log_fn=log_fn)
    ckpt_path = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt_path, cfg, trainer)
    return ckpt_path


def cmd_eval(cfg: RunConfig, checkpoint: str, out_dir: str | None = None) -> dict:
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    doc = load_checkpoint(checkpoint, cfg)
    params = params_from_checkpoint(doc, cfg)
    _, val_scenes = load_dataset(cfg.data_dir)
    packed = [PackedScene.from_scene(s) for s in val_scenes]
    toggles = CompetitionToggles(**doc["toggles"])
    preds, gts = collect_predictions(params, packed, cfg.decoder, toggles, cfg.competition)
    result = evalstats.map_suite(preds, gts)
    payload = {
        "version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        **result.to_dict(),
    }
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


def analyze_scenes(
    params: dict[str, Tensor],
    packed: list[PackedScene],
    cfg: RunConfig,
    toggles: CompetitionToggles,
) -> tuple[evalstats.CompetitionStats, dict[str, evalstats.CdfSeries]]:
    """Per-layer competition statistics and matched/unmatched score CDFs."""
    layers = cfg.decoder.layers
    layer_masks: list[list[np.ndarray]] = [[] for _ in range(layers)]
    gt_masks = []
    pools: dict[str, list[float]] = {}
    for scene in packed:
        preds, _ = scene_forward(scene, params, cfg.decoder, toggles, cfg.competition)
        gt_masks.append(scene.gt_masks)
        for idx, pred in enumerate(preds):
            layer_masks[idx].append(binarize_masks(pred.mask_logits.data,
                                                   cfg.decoder.mask_threshold))
            match = hungarian(match_cost(pred, scene.gt_masks, scene.gt_classes, cfg.loss))
            n = cfg.decoder.num_queries
            cls_scores = pred.p_cls.data[:, :cfg.decoder.num_classes].max(axis=1)
            m_cls, u_cls = evalstats.split_matched_scores(match.pairs, n, cls_scores)
            m_iou, u_iou = evalstats.split_matched_scores(match.pairs, n, pred.s_iou.data)
            layer_tag = f"layer{idx + 1}"
            for tag, vals in (
                (f"matched_cls_{layer_tag}", m_cls),
                (f"unmatched_cls_{layer_tag}", u_cls),
                (f"matched_iou_{layer_tag}", m_iou),
                (f"unmatched_iou_{layer_tag}", u_iou),
            ):
                pools.setdefault(tag, []).extend(vals)
    stats = evalstats.competing_query_stats(layer_masks, gt_masks,
                                            list(cfg.analysis_thresholds))
    cdfs = {tag: evalstats.score_cdf(vals) for tag, vals in pools.items() if vals}
    return stats, cdfs


def cmd_analyze(cfg: RunConfig, checkpoint: str, out_dir: str | None = None) -> tuple[str, str]:
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    doc = load_checkpoint(checkpoint, cfg)
    params = params_from_checkpoint(doc, cfg)
    _, val_scenes = load_dataset(cfg.data_dir)
    packed = [PackedScene.from_scene(s) for s in val_scenes]
    toggles = CompetitionToggles(**doc["toggles"])
    stats, cdfs = analyze_scenes(params, packed, cfg, toggles)

    header = f"# version={SCHEMA_VERSION} config_hash={cfg.config_hash()}\n"
    stats_path = os.path.join(out, "competition_stats.csv")
    with open(stats_path, "w") as fh:
        fh.write(header)
        fh.write("layer,tau,avg_competitors\n")
        for layer, tau, avg in stats.rows:
            fh.write(f"{layer},{tau!r},{avg!r}\n")
    cdf_path = os.path.join(out, "score_cdfs.csv")
    with open(cdf_path, "w") as fh:
        fh.write(header)
        fh.write("value,cum_fraction,population\n")
        for tag in sorted(cdfs):
            series = cdfs[tag]
            for value, frac in zip(series.values, series.fractions):
                fh.write(f"{value!r},{frac!r},{tag}\n")
    return stats_path, cdf_path


# ----------------------------------------------------------------------
# ablation


ABLATION_GRID = [
    CompetitionToggles(False, False, False),
    CompetitionToggles(True, False, False),
    CompetitionToggles(False, True, False),
    CompetitionToggles(False, False, True),
    CompetitionToggles(True, True, False),
    CompetitionToggles(True, False, True),
    CompetitionToggles(False, True, True),
    CompetitionToggles(True, True, True),
]


def cmd_ablate(cfg: RunConfig, out_dir: str | None = None) -> list[dict]:
    """Train and evaluate every toggle combination; report deltas vs baseline."""
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    train_scenes, val_scenes = load_dataset(cfg.data_dir)
    rows: list[dict] = []
    for toggles in ABLATION_GRID:
        cell_cfg = replace(cfg.train, mode="competitor")
        trainer = Trainer(
            train_scenes, cell_cfg, cfg.decoder, cfg.loss, cfg.competition,
            toggles, val_scenes=val_scenes,
        )
        metrics = trainer.run()
        packed = [PackedScene.from_scene(s) for s in val_scenes]
        preds, gts = collect_predictions(trainer.params, packed, cfg.decoder,
                                         toggles, cfg.competition)
        result = evalstats.map_suite(preds, gts)
        rows.append({
            "qcl": toggles.qcl, "rre": toggles.rre, "rca": toggles.rca,
            "label": toggles.label(),
            "map": result.map, "map50": result.map50, "map25": result.map25,
            "final_loss": metrics[-1]["loss_total"],
            "finite": all(np.isfinite(m["loss_total"]) for m in metrics),
        })
    base = rows[0]
    for row in rows:
        row["delta_map"] = row["map"] - base["map"]

    csv_path = os.path.join(out, "ablation.csv")
    with open(csv_path, "w") as fh:
        fh.write(f"# version={SCHEMA_VERSION} config_hash={cfg.config_hash()}\n")
        fh.write("qcl,rre,rca,map,map50,map25,delta_map,final_loss,finite\n")
        for r in rows:
            fh.write(f"{int(r['qcl'])},{int(r['rre'])},{int(r['rca'])},"
                     f"{r['map']!r},{r['map50']!r},{r['map25']!r},"
                     f"{r['delta_map']!r},{r['final_loss']!r},{int(r['finite'])}\n")
    md_path = os.path.join(out, "ablation.md")
    with open(md_path, "w") as fh:
        fh.write(f"<!-- version={SCHEMA_VERSION} config_hash={cfg.config_hash()} -->\n")
        fh.write("| qcl | rre | rca | mAP | mAP50 | mAP25 | delta mAP |\n")
        fh.write("|-----|-----|-----|-----|-------|-------|-----------|\n")
        for r in rows:
            mark = lambda b: "x" if b else " "
            fh.write(f"| {mark(r['qcl'])} | {mark(r['rre'])} | {mark(r['rca'])} "
                     f"| {r['map']:.4f} | {r['map50']:.4f} | {r['map25']:.4f} "
                     f"| {r['delta_map']:+.4f} |\n")
    return rows


# ----------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queryseg",
        description="synthetic 3D instance segmentation lab with query-competition decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("gen-data", "generate the synthetic scene dataset"),
        ("train", "train a model on the generated dataset"),
        ("eval", "evaluate a checkpoint (mAP / mAP50 / mAP25)"),
        ("analyze", "emit competition statistics and score CDFs"),
        ("ablate", "run the 8-cell competition-toggle grid"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="path to the key=value run config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: <out_dir>/checkpoint.json)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "gen-data":
            target = cmd_gen_data(cfg, args.out)
            print(f"wrote dataset to {target}")
        elif args.command == "train":
            ckpt = cmd_train(cfg, args.out, resume=args.resume)
            print(f"wrote checkpoint to {ckpt}")
        elif args.command == "eval":
            ckpt = args.checkpoint or os.path.join(args.out or cfg.out_dir, "checkpoint.json")
            payload = cmd_eval(cfg, ckpt, args.out)
            print(json.dumps({k: payload[k] for k in ("map", "map50", "map25")}))
        elif args.command == "analyze":
            ckpt = args.checkpoint or os.path.join(args.out or cfg.out_dir, "checkpoint.json")
            stats_path, cdf_path = cmd_analyze(cfg, ckpt, args.out)
            print(f"wrote {stats_path} and {cdf_path}")
        elif args.command == "ablate":
            rows = cmd_ablate(cfg, args.out)
            print(f"ran {len(rows)} ablation cells")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

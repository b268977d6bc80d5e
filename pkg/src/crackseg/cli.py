"""Command-line entry point: synth, train, eval, refine, serve.

Configuration is one JSON document with three sections (model, train,
refine); repeated ``--set section.key=value`` flags override file values.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import fewshot, metrics, training
from .r2aunet import ModelConfig, build_model, load_model, predict, save_model
from .service import RectificationService


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 2."""


CONFIG_SECTIONS = ("model", "train", "refine")


def load_config(path, overrides):
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    merged = {section: dict(raw.get(section, {})) for section in CONFIG_SECTIONS}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, key = dotted.split(".", 1)
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in --set {item!r}")
        try:
            merged[section][key] = json.loads(value)
        except json.JSONDecodeError:
            merged[section][key] = value
    return merged


def build_configs(merged, seed=None):
    try:
        model_cfg = ModelConfig.from_dict(merged["model"])
        train_cfg = training.TrainConfig.from_dict(merged["train"])
        refine_cfg = fewshot.RefineConfig.from_dict(merged["refine"])
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None
    if seed is not None:
        train_cfg.seed = seed
    return model_cfg, train_cfg, refine_cfg


def _load_annotated(path, ids_file=None, require_masks=True, side=None):
    samples = data_mod.load_dataset(path)
    if ids_file:
        wanted = [line.strip() for line in Path(ids_file).read_text().splitlines()
                  if line.strip()]
        by_id = {s.id: s for s in samples}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ConfigError(f"ids not present in dataset: {', '.join(missing)}")
        samples = [by_id[i] for i in wanted]
    if side:
        samples = [data_mod.resize_bilinear(s, side) for s in samples]
    if require_masks:
        unmasked = [s.id for s in samples if s.mask is None]
        if unmasked:
            raise ConfigError(f"samples without masks: {', '.join(unmasked[:5])}"
                              + ("..." if len(unmasked) > 5 else ""))
    return samples


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    try:
        samples = data_mod.generate_synthetic(args.n, args.side, args.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    data_mod.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} image/mask pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    merged = load_config(args.config, args.set)
    model_cfg, train_cfg, _ = build_configs(merged, args.seed)
    samples = _load_annotated(args.data, side=args.side)
    train_set, val_set = training.split_80_20(samples, train_cfg.seed)

    model = build_model(model_cfg, seed=train_cfg.seed)
    model, history = training.train(model, train_set, val_set, train_cfg,
                                    verbose=not args.quiet)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"model": json.loads(model_cfg.canonical()),
         "train": merged["train"] | {"seed": train_cfg.seed},
         "refine": merged["refine"]}, indent=2))
    training.write_history_csv(history, out / "history.csv")
    (out / "val_ids.txt").write_text("\n".join(s.id for s in val_set) + "\n")
    (out / "summary.json").write_text(json.dumps({
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss,
        "best_val_dice": history.best_val_dice,
        "best_val_iou": history.best_val_iou,
        "decay_epochs": history.decay_epochs,
        "stop_reason": history.stop_reason,
        "epochs_run": len(history.records),
    }, indent=2))
    save_model(out / "best.ckpt", model)

    print(f"best epoch {history.best_epoch} (0 = untrained baseline): "
          f"val_loss {history.best_val_loss:.6f} val_dice {history.best_val_dice:.6f}")
    print(f"stop reason: {history.stop_reason}; checkpoint: {out / 'best.ckpt'}")
    return 0


def _predictions_for(args, samples):
    if args.pred_dir:
        pred_root = Path(args.pred_dir)
        preds = []
        for s in samples:
            path = pred_root / f"{s.id}.png"
            if not path.exists():
                raise ConfigError(f"no prediction file for {s.id!r} in {pred_root}")
            from PIL import Image
            preds.append(np.asarray(Image.open(path).convert("L")) / 255.0)
        return preds, Path(args.pred_dir).name
    model = load_model(args.checkpoint)
    return predict(model, [s.image for s in samples]), Path(args.checkpoint).stem


def _per_image_report(predictions, samples):
    dices, ious = [], []
    for pred, sample in zip(predictions, samples):
        pred_bin = metrics.binarize(pred)
        dices.append(metrics.dice(pred_bin, sample.mask.astype(bool)))
        ious.append(metrics.iou(pred_bin, sample.mask.astype(bool)))
    return metrics.build_report(dices, ious)


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.pred_dir):
        raise ConfigError("eval needs exactly one of --checkpoint or --pred-dir")
    samples = _load_annotated(args.data, ids_file=args.ids, side=args.side)
    predictions, name = _predictions_for(args, samples)
    report = _per_image_report(predictions, samples)

    rows = [(name, report)]
    payload = {"name": name, "n_images": len(samples),
               "ids": [s.id for s in samples],
               "report": json.loads(metrics.report_to_json(report))}

    if args.paired:
        other = load_model(args.paired)
        other_preds = predict(other, [s.image for s in samples])
        other_report = _per_image_report(other_preds, samples)
        rows.append((Path(args.paired).stem, other_report))
        wd = metrics.wilcoxon_signed_rank(report.per_image_dice,
                                          other_report.per_image_dice)
        wi = metrics.wilcoxon_signed_rank(report.per_image_iou,
                                          other_report.per_image_iou)
        payload["paired"] = {
            "name": Path(args.paired).stem,
            "report": json.loads(metrics.report_to_json(other_report)),
            "wilcoxon_dice": wd.__dict__,
            "wilcoxon_iou": wi.__dict__,
        }
        print(f"wilcoxon dice: W={wd.statistic:g} p={wd.p_value:.6g} ({wd.method})")
        print(f"wilcoxon iou:  W={wi.statistic:g} p={wi.p_value:.6g} ({wi.method})")

    print(metrics.format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(payload, indent=2))
        print(f"report: {out / 'report.json'}")
    return 0


def cmd_refine(args) -> int:
    merged = load_config(args.config, args.set)
    _, train_cfg, refine_cfg = build_configs(merged, args.seed)
    refine_cfg.expert_mode = args.mode
    samples = _load_annotated(args.data, side=args.side,
                              require_masks=args.mode == "simulated")
    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "simulated":
        model, report = fewshot.refine_loop(model, samples, refine_cfg, train_cfg,
                                            last_lr=args.last_lr)
        save_model(out / "refined.ckpt", model)
        (out / "report.json").write_text(report.to_json())
        print(f"selected {len(report.selected)} of {len(samples)} images: "
              f"{', '.join(report.selected_ids)}")
        print(f"dice {report.mean_before_dice:.4f} -> {report.mean_after_dice:.4f}  "
              f"iou {report.mean_before_iou:.4f} -> {report.mean_after_iou:.4f} "
              f"on {len(report.rows)} images")
        return 0

    service = RectificationService(model, samples, refine_cfg, train_cfg,
                                   last_lr=args.last_lr, state_dir=out / "state")
    port = service.start(port=args.port)
    print(f"rectification service on http://127.0.0.1:{port}/api/queue "
          f"({len(service.queue_ids)} images queued)")
    deadline = time.time() + args.timeout if args.timeout else None
    try:
        while True:
            done = [j for j, job in service._jobs.items() if service.job_done(j)]
            if done:
                job = service._jobs[done[0]]
                (out / "report.json").write_text(json.dumps(job, indent=2))
                save_model(out / "refined.ckpt", service.model)
                print(f"fine-tune {job['status']}; report: {out / 'report.json'}")
                return 0 if job["status"] == "done" else 1
            if deadline and time.time() > deadline:
                (out / "report.json").write_text(json.dumps(
                    {"status": "pending", "pending_ids": service.pending_ids()},
                    indent=2))
                print("no completed fine-tune before timeout; state saved, resumable")
                return 0
            time.sleep(0.2)
    except KeyboardInterrupt:
        print("interrupted; state saved, resumable")
        return 0
    finally:
        service.stop()


def cmd_serve(args) -> int:
    merged = load_config(args.config, args.set)
    _, train_cfg, refine_cfg = build_configs(merged, args.seed)
    samples = _load_annotated(args.data, side=args.side, require_masks=False)
    model = load_model(args.checkpoint)
    state_dir = Path(args.out) / "state" if args.out else None
    service = RectificationService(model, samples, refine_cfg, train_cfg,
                                   last_lr=args.last_lr, state_dir=state_dir)
    port = service.start(port=args.port)
    print(f"serving on http://127.0.0.1:{port} ({len(service.queue_ids)} queued); "
          f"Ctrl-C to stop")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        return 0
    finally:
        service.stop()


# ---------------------------------------------------------------------------
# parser


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crackseg",
        description="Crack segmentation: train, evaluate, and refine with "
                    "confidence-ranked expert rectification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config (model/train/refine sections)")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("synth", help="write a synthetic crack dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on an images/+masks/ dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, help="resize all samples to this square side")
    p.add_argument("--quiet", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or prediction dir)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="directory of soft-mask PNGs named by image id")
    p.add_argument("--paired", help="second checkpoint for a paired Wilcoxon test")
    p.add_argument("--ids", help="file of image ids to restrict evaluation to")
    p.add_argument("--side", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="one confidence-ranked rectification round")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("simulated", "interactive"), default="simulated")
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--timeout", type=float, help="interactive wait limit in seconds")
    p.add_argument("--last-lr", type=float, help="last training lr (default: lr0)")
    common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("serve", help="run the rectification service until interrupted")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8742)
    p.add_argument("--side", type=int)
    p.add_argument("--out", help="state directory root for resumability")
    p.add_argument("--last-lr", type=float)
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

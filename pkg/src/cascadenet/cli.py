"""Command-line interface.

Every subcommand reads a JSON config (plus a few flag overrides), writes all
outputs under --run-dir, records per-run events in log.jsonl, and leaves a
produced.json manifest of created files. Exit codes: 0 success, 1 validation
error (bad flags, unknown config keys, bad inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cascade import CascadeClassifier, CascadeConfig
from .data import DatasetManifest, SPLITS, ingest as ingest_tree, split as split_manifest
from .errors import CascadeNetError, ConfigurationError, InvalidInputError
from .explain import grad_cam, overlay, region_mass
from .gradcheck import registered_ops, run_suite
from .image import GrayImage, apply_mask, load_image, save_image
from .metrics import accuracy, confusion, f1_scores, macro_ovr_auc, roc_auc
from .models import ModelConfig, build_model, preset_config, unet_predict_mask
from .synth import (ClassPattern, SyntheticSpec, TokenSpec, confound_spec,
                    generate_synthetic, load_mask_dataset, segmentation_spec,
                    stage1_spec, stage2_spec)
from .training import (SchedulerConfig, SegTrainConfig, TrainConfig,
                       fit, fit_segmentation, load_checkpoint,
                       predict_probabilities, save_checkpoint)
from PIL import Image as PILImage


class RunDir:
    """All command outputs funnel through here; nothing writes elsewhere."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.produced: list[str] = []
        self._log_path = self.root / "log.jsonl"

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.produced.append(rel)
        return p

    def log(self, **event) -> None:
        with open(self._log_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def finish(self, config: dict) -> None:
        (self.root / "config.json").write_text(json.dumps(config, indent=2,
                                                          sort_keys=True))
        listed = sorted(set(self.produced + ["config.json", "log.jsonl"]))
        (self.root / "produced.json").write_text(json.dumps(listed, indent=2))


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(f"unknown {where} config keys: {sorted(unknown)}")


def _load_config(args, default: dict | None = None) -> dict:
    if args.config is None:
        return dict(default or {})
    path = Path(args.config)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc


def _require_run_dir(args) -> RunDir:
    if not args.run_dir:
        raise ConfigurationError("--run-dir is required for this command")
    return RunDir(Path(args.run_dir))


# ---------------------------------------------------------------------------
# gen-data


def _spec_from_config(cfg: dict) -> SyntheticSpec:
    _check_keys(cfg, {"preset", "per_class", "per_split", "seed", "noise",
                      "token_permutation", "amplitude_blobs", "amplitude_texture",
                      "classes", "image_size", "background", "token",
                      "emit_masks"}, "gen-data")
    seed = int(cfg.get("seed", 0))
    preset = cfg.get("preset")
    if preset:
        per_class = {k: int(v) for k, v in cfg.get("per_class", {}).items()}
        if not per_class:
            raise ConfigurationError("gen-data presets need per_class counts")
        kwargs = {}
        if "noise" in cfg:
            kwargs["noise"] = float(cfg["noise"])
        if preset == "stage1":
            for k in ("amplitude_blobs", "amplitude_texture"):
                if k in cfg:
                    kwargs[k] = float(cfg[k])
            return stage1_spec(per_class, seed=seed, **kwargs)
        if preset == "stage2":
            return stage2_spec(per_class, seed=seed, **kwargs)
        if preset == "confound":
            for k in ("amplitude_blobs", "amplitude_texture"):
                if k in cfg:
                    kwargs[k] = float(cfg[k])
            return confound_spec(per_class, seed=seed,
                                 permutation=cfg.get("token_permutation"), **kwargs)
        if preset == "segmentation":
            return segmentation_spec(per_class, seed=seed)
        raise ConfigurationError(f"unknown gen-data preset {preset!r}")
    if "classes" not in cfg or "per_split" not in cfg:
        raise ConfigurationError("gen-data needs a preset or explicit classes/per_split")
    classes = []
    for entry in cfg["classes"]:
        _check_keys(entry, {"name", "pattern", "amplitude", "count", "freq"},
                    "gen-data class")
        classes.append(ClassPattern(
            name=entry["name"], kind=entry.get("pattern", "plain"),
            amplitude=float(entry.get("amplitude", 0.0)),
            count=tuple(entry.get("count", (2, 4))),
            freq=tuple(entry.get("freq", (3.0, 8.0)))))
    token = None
    if cfg.get("token"):
        tdoc = cfg["token"]
        _check_keys(tdoc, {"size", "position", "permutation"}, "gen-data token")
        token = TokenSpec(size=int(tdoc.get("size", 10)),
                          position=tuple(tdoc.get("position", (2, 2))),
                          permutation=tdoc.get("permutation"))
    return SyntheticSpec(
        classes=classes,
        per_split={k: list(map(int, v)) for k, v in cfg["per_split"].items()},
        image_size=int(cfg.get("image_size", 64)), seed=seed,
        background=int(cfg.get("background", 25)),
        noise=float(cfg.get("noise", 6.0)), token=token,
        emit_masks=bool(cfg.get("emit_masks", True)))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    run = _require_run_dir(args)
    spec = _spec_from_config(cfg)
    manifest = generate_synthetic(spec, run.root / "data")
    for rec in manifest.records:
        run.produced.append(str(Path(rec.path).relative_to(run.root)))
    run.produced += ["data/manifest.csv", "data/dataset_info.json"]
    run.log(event="gen-data", records=len(manifest.records),
            classes=manifest.class_names)
    run.finish(cfg)
    print(f"wrote {len(manifest.records)} images under {run.root / 'data'}")
    return 0


# ---------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"root", "ratios", "seed"}, "ingest")
    if "root" not in cfg:
        raise ConfigurationError("ingest config needs a dataset root")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    run = _require_run_dir(args)
    manifest = ingest_tree(cfg["root"], skip_bad=args.skip_bad)
    if cfg.get("ratios"):
        manifest = split_manifest(manifest, cfg["ratios"], seed=seed)
    manifest.to_csv(run.path("manifest.csv"))
    run.log(event="ingest", records=len(manifest.records),
            counts=manifest.counts())
    run.finish(cfg)
    print(f"manifest with {len(manifest.records)} records -> {run.root / 'manifest.csv'}")
    return 0


# ---------------------------------------------------------------------------
# train


def _model_from_config(doc: dict, num_classes: int, seed: int):
    _check_keys(doc, {"preset", "input_shape", "options", "config_file", "config"},
                "model")
    if "config_file" in doc:
        config = ModelConfig.from_doc(json.loads(Path(doc["config_file"]).read_text()))
    elif "config" in doc:
        config = ModelConfig.from_doc(doc["config"])
    else:
        config = preset_config(doc.get("preset", "mini-seme"),
                               input_shape=tuple(doc.get("input_shape", (1, 64, 64))),
                               num_classes=num_classes,
                               **(doc.get("options") or {}))
    return build_model(config, seed=seed)


def _train_config(doc: dict, seed: int) -> TrainConfig:
    _check_keys(doc, {"epochs", "batch_size", "optimizer", "lr", "momentum",
                      "beta1", "beta2", "opt_eps", "scheduler", "sched",
                      "rotate_deg", "clahe_fraction", "clahe_mode", "clahe_tiles",
                      "clahe_clip", "moex", "restore_best"}, "train")
    sched = None
    if doc.get("sched"):
        sdoc = doc["sched"]
        _check_keys(sdoc, {"eta_max", "eta_min", "t_i", "mult"}, "scheduler")
        sched = SchedulerConfig(eta_max=float(sdoc.get("eta_max", 0.1)),
                                eta_min=float(sdoc.get("eta_min", 1e-8)),
                                t_i=int(sdoc.get("t_i", 200)),
                                mult=int(sdoc.get("mult", 1)))
    return TrainConfig(
        epochs=int(doc.get("epochs", 20)),
        batch_size=int(doc.get("batch_size", 16)),
        seed=seed,
        optimizer=doc.get("optimizer", "sgd"),
        lr=float(doc.get("lr", 1e-4)),
        momentum=float(doc.get("momentum", 0.9)),
        beta1=float(doc.get("beta1", 0.9)),
        beta2=float(doc.get("beta2", 0.999)),
        opt_eps=float(doc.get("opt_eps", 1e-8)),
        scheduler=doc.get("scheduler", "constant"),
        sched=sched,
        rotate_deg=float(doc.get("rotate_deg", 0.0)),
        clahe_fraction=float(doc.get("clahe_fraction", 0.0)),
        clahe_mode=doc.get("clahe_mode", "per-epoch"),
        clahe_tiles=tuple(doc.get("clahe_tiles", (8, 8))),
        clahe_clip=float(doc.get("clahe_clip", 4.0)),
        moex=bool(doc.get("moex", False)),
        restore_best=bool(doc.get("restore_best", True)))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"manifest", "model", "train", "seed", "resume"}, "train")
    if "manifest" not in cfg:
        raise ConfigurationError("train config needs a manifest path")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    run = _require_run_dir(args)
    manifest = DatasetManifest.from_csv(cfg["manifest"])
    train_cfg = _train_config(cfg.get("train") or {}, seed)

    resume_state = None
    if cfg.get("resume"):
        resume_state = load_checkpoint(cfg["resume"])
        model = resume_state.model
    else:
        model = _model_from_config(cfg.get("model") or {},
                                   num_classes=len(manifest.class_names), seed=seed)

    walls = []
    last = [time.monotonic()]

    def on_epoch(record):
        now = time.monotonic()
        wall_ms = (now - last[0]) * 1000.0
        last[0] = now
        walls.append(wall_ms)
        run.log(event="epoch", epoch=record.epoch, lr=record.lr,
                train_loss=record.train_loss, val_acc=record.val_acc,
                wall_ms=wall_ms)

    if resume_state is not None:
        result = fit(model, manifest, train_cfg, on_epoch=on_epoch,
                     resume_epoch=resume_state.epoch,
                     resume_optimizer=resume_state.optimizer,
                     history=resume_state.history)
    else:
        result = fit(model, manifest, train_cfg, on_epoch=on_epoch)

    with open(run.path("metrics/history.jsonl"), "w") as fh:
        for record in result.history:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    rng_doc = {"scheme": "per-epoch-derived", "seed": seed,
               "next_epoch": result.next_epoch}
    model.load_state(result.best_state)
    save_checkpoint(run.path("checkpoints/best.ckpt"), model,
                    manifest.class_names, epoch=result.best_epoch + 1,
                    history=result.history, rng=rng_doc)
    model.load_state(result.final_state)
    save_checkpoint(run.path("checkpoints/final.ckpt"), model,
                    manifest.class_names, optimizer=result.optimizer_state,
                    rng=rng_doc, epoch=result.next_epoch, history=result.history)
    model.load_state(result.best_state)
    run.log(event="train-done", best_epoch=result.best_epoch,
            best_val_acc=result.best_val_acc)
    run.finish(cfg)
    print(f"best val_acc {result.best_val_acc:.4f} at epoch {result.best_epoch}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"manifest", "checkpoint", "split", "batch_size"}, "eval")
    checkpoint = args.checkpoint or cfg.get("checkpoint")
    if not checkpoint:
        raise ConfigurationError("eval needs --checkpoint or a config entry")
    if "manifest" not in cfg:
        raise ConfigurationError("eval config needs a manifest path")
    split_name = args.split or cfg.get("split", "test")
    if split_name not in SPLITS:
        raise ConfigurationError(f"unknown split {split_name!r}")
    run = _require_run_dir(args)
    ckpt = load_checkpoint(checkpoint)
    manifest = DatasetManifest.from_csv(cfg["manifest"])
    records = manifest.split_records(split_name)
    if not records:
        raise InvalidInputError(f"split {split_name!r} is empty")
    images = np.stack([load_image(r.path).pixels for r in records])
    truths = np.array([r.label for r in records])
    probs = predict_probabilities(ckpt.model, images,
                                  batch_size=int(cfg.get("batch_size", 32)))
    preds = probs.argmax(axis=1)

    cm = confusion(preds, truths, ckpt.class_names)
    per_f1, macro_f1 = f1_scores(cm)
    per_auc, macro_auc = macro_ovr_auc(probs, truths, ckpt.class_names)
    report = {
        "split": split_name,
        "n": len(records),
        "accuracy": accuracy(cm),
        "per_class_f1": per_f1,
        "macro_f1": macro_f1,
        "per_class_auc": per_auc,
        "macro_auc": macro_auc,
        "confusion": cm.counts.tolist(),
        "class_names": ckpt.class_names,
    }
    run.path("metrics/metrics.json").write_text(json.dumps(report, indent=2,
                                                           sort_keys=True))
    with open(run.path("metrics/confusion.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_class"] + list(ckpt.class_names))
        for name, row in zip(ckpt.class_names, cm.counts):
            writer.writerow([name] + [int(v) for v in row])
    with open(run.path("metrics/roc.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "fpr", "tpr"])
        for c, name in enumerate(ckpt.class_names):
            curve, _ = roc_auc(probs[:, c], (truths == c).astype(int),
                               positive_class=name)
            for fpr, tpr in zip(curve.fpr, curve.tpr):
                writer.writerow([name, repr(float(fpr)), repr(float(tpr))])
    run.log(event="eval", split=split_name, accuracy=report["accuracy"],
            macro_f1=macro_f1, macro_auc=macro_auc)
    run.finish(cfg)
    print(f"accuracy {report['accuracy']:.4f}  macro-F1 {macro_f1:.4f}  "
          f"macro-AUC {macro_auc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# segmentation


def cmd_segment_train(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"manifest", "epochs", "batch_size", "lr", "seed",
                      "threshold", "base"}, "segment-train")
    if "manifest" not in cfg:
        raise ConfigurationError("segment-train config needs a manifest path")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    run = _require_run_dir(args)
    manifest = DatasetManifest.from_csv(cfg["manifest"])
    images, masks, _ = load_mask_dataset(manifest, splits=("train",))
    val_images, val_masks, _ = load_mask_dataset(manifest, splits=("validation",))
    size = images.shape[1]
    model = build_model(preset_config("unet-toy", (1, size, size), 1,
                                      base=int(cfg.get("base", 8))), seed=seed)
    seg_cfg = SegTrainConfig(epochs=int(cfg.get("epochs", 20)),
                             batch_size=int(cfg.get("batch_size", 8)),
                             seed=seed, lr=float(cfg.get("lr", 1e-3)),
                             threshold=float(cfg.get("threshold", 0.5)))

    def on_epoch(record):
        run.log(event="epoch", epoch=record.epoch, lr=record.lr,
                train_loss=record.train_loss, val_iou=record.val_acc)

    result = fit_segmentation(model, images, masks, val_images, val_masks,
                              seg_cfg, on_epoch=on_epoch)
    with open(run.path("metrics/history.jsonl"), "w") as fh:
        for record in result.history:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
    save_checkpoint(run.path("checkpoints/unet.ckpt"), model, ["lung"],
                    epoch=result.next_epoch, history=result.history)
    run.log(event="segment-train-done", best_iou=result.best_val_acc)
    run.finish(cfg)
    print(f"best mean IoU {result.best_val_acc:.4f}")
    return 0


def cmd_segment(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"checkpoint", "manifest", "image", "threshold",
                      "postprocess", "apply"}, "segment")
    checkpoint = args.checkpoint or cfg.get("checkpoint")
    if not checkpoint:
        raise ConfigurationError("segment needs --checkpoint or a config entry")
    run = _require_run_dir(args)
    model = load_checkpoint(checkpoint).model
    threshold = float(cfg.get("threshold", 0.5))
    postprocess = bool(cfg.get("postprocess", True))
    do_apply = bool(cfg.get("apply", True))

    paths: list[str] = []
    if args.image or cfg.get("image"):
        paths = [args.image or cfg["image"]]
    elif cfg.get("manifest"):
        paths = [r.path for r in DatasetManifest.from_csv(cfg["manifest"]).records]
    else:
        raise ConfigurationError("segment needs an image or a manifest")
    for path in paths:
        img = load_image(path)
        mask = unet_predict_mask(model, img, threshold=threshold,
                                 postprocess=postprocess)
        stem = Path(path).stem
        save_image(GrayImage((mask.pixels * 255).astype(np.uint8)),
                   run.path(f"masks/{stem}_mask.png"))
        if do_apply:
            save_image(apply_mask(img, mask), run.path(f"masked/{stem}.png"))
    run.log(event="segment", images=len(paths))
    run.finish(cfg)
    print(f"segmented {len(paths)} image(s)")
    return 0


# ---------------------------------------------------------------------------
# explain


def cmd_explain(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"checkpoint", "image", "target_class", "layer", "alpha",
                      "audit_region"}, "explain")
    checkpoint = args.checkpoint or cfg.get("checkpoint")
    image_path = args.image or cfg.get("image")
    target = args.target_class if args.target_class is not None \
        else cfg.get("target_class")
    if not checkpoint or not image_path or target is None:
        raise ConfigurationError("explain needs checkpoint, image, and class")
    run = _require_run_dir(args)
    ckpt = load_checkpoint(checkpoint)
    img = load_image(image_path)
    hm = grad_cam(ckpt.model, img, int(target), layer=cfg.get("layer"))
    stem = Path(image_path).stem
    save_image(GrayImage(np.clip(np.floor(hm.values * 255.0 + 0.5), 0, 255)
                         .astype(np.uint8)), run.path(f"heatmaps/{stem}_heatmap.png"))
    ov = overlay(img, hm, alpha=float(cfg.get("alpha", 0.5)))
    PILImage.fromarray(ov.pixels, mode="RGB").save(
        run.path(f"heatmaps/{stem}_overlay.png"))

    region = cfg.get("audit_region") or [0, 0, hm.width, hm.height]
    mass = region_mass(hm, tuple(int(v) for v in region))
    audit_path = run.root / "metrics" / "region_mass.json"
    audits = json.loads(audit_path.read_text()) if audit_path.is_file() else []
    audits.append({"image": str(image_path), "target_class": int(target),
                   "layer": cfg.get("layer") or ckpt.model.default_cam_layer,
                   "region": list(region), "mass": mass})
    run.path("metrics/region_mass.json").write_text(json.dumps(audits, indent=2))
    run.log(event="explain", image=str(image_path), mass=mass)
    run.finish(cfg)
    print(f"region mass {mass:.4f} in {region}")
    return 0


# ---------------------------------------------------------------------------
# cascade


def cmd_cascade(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"stage1", "stage2", "mask_model", "route_on", "manifest",
                      "image", "split", "mask_threshold", "mask_postprocess"},
                "cascade")
    for key in ("stage1", "stage2"):
        if key not in cfg:
            raise ConfigurationError(f"cascade config needs {key!r} checkpoint")
    run = _require_run_dir(args)
    classifier = CascadeClassifier(CascadeConfig(
        stage1_path=cfg["stage1"], stage2_path=cfg["stage2"],
        route_on=cfg.get("route_on", "viral"),
        mask_model_path=cfg.get("mask_model"),
        mask_threshold=float(cfg.get("mask_threshold", 0.5)),
        mask_postprocess=bool(cfg.get("mask_postprocess", True))))

    image_path = args.image or cfg.get("image")
    rows = []
    correct = 0
    labeled = 0
    if image_path:
        result = classifier.predict(load_image(image_path))
        rows.append((image_path, "", result))
    elif cfg.get("manifest"):
        manifest = DatasetManifest.from_csv(cfg["manifest"])
        split_name = args.split or cfg.get("split", "test")
        for rec in manifest.split_records(split_name):
            result = classifier.predict(load_image(rec.path))
            true_name = manifest.class_names[rec.label]
            rows.append((rec.path, true_name, result))
            labeled += 1
            if result.final_label == true_name:
                correct += 1
    else:
        raise ConfigurationError("cascade needs an image or a manifest")

    with open(run.path("metrics/cascade.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "true_label", "final_label", "stage2_invoked"])
        for path, true_name, result in rows:
            writer.writerow([path, true_name, result.final_label,
                             int(result.stage2_invoked)])
    summary = {
        "n": len(rows),
        "accuracy": (correct / labeled) if labeled else None,
        "stage2_invocations": sum(1 for e in classifier.log if e["stage2_invoked"]),
        "routing_violations": sum(
            1 for e in classifier.log
            if e["stage2_invoked"] != (e["stage1_argmax"] == classifier.cfg.route_on)),
        "leaf_labels": classifier.leaf_labels,
    }
    run.path("metrics/cascade_metrics.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))
    run.log(event="cascade", **{k: v for k, v in summary.items()
                                if k != "leaf_labels"})
    run.finish(cfg)
    if summary["accuracy"] is not None:
        print(f"cascade accuracy {summary['accuracy']:.4f} over {len(rows)} images")
    else:
        print(f"final label: {rows[0][2].final_label}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck / analyze-dist


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    _check_keys(cfg, {"trials", "seed", "threshold", "ops"}, "gradcheck")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ops = cfg.get("ops")
    if ops:
        unknown = set(ops) - set(registered_ops())
        if unknown:
            raise ConfigurationError(f"unknown ops: {sorted(unknown)}")
    run = _require_run_dir(args)
    report = run_suite(ops=ops, trials=int(cfg.get("trials", 10)), seed=seed,
                       threshold=float(cfg.get("threshold", 1e-3)))
    run.path("metrics/gradcheck.json").write_text(
        json.dumps(report.to_doc(), indent=2, sort_keys=True))
    for res in report.results:
        print(res.summary())
    run.log(event="gradcheck", passed=report.passed)
    run.finish(cfg)
    print("gradient checks " + ("PASSED" if report.passed else "FAILED"))
    return 0


def cmd_analyze_dist(args) -> int:
    from .image import average_hash
    from .metrics import kmeans

    cfg = _load_config(args)
    _check_keys(cfg, {"groups", "hash_side", "k", "seed", "init", "max_images"},
                "analyze-dist")
    groups = cfg.get("groups")
    if not groups:
        raise ConfigurationError("analyze-dist needs a list of image groups")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    run = _require_run_dir(args)
    side = int(cfg.get("hash_side", 8))
    limit = cfg.get("max_images")

    paths, names, vectors = [], [], []
    for group in groups:
        _check_keys(group, {"name", "root"}, "analyze-dist group")
        files = sorted(p for p in Path(group["root"]).rglob("*")
                       if p.suffix.lower() in (".png", ".pgm"))
        if limit:
            files = files[:int(limit)]
        if not files:
            raise InvalidInputError(f"group {group['name']!r} has no images")
        for path in files:
            paths.append(str(path))
            names.append(group["name"])
            vectors.append(average_hash(load_image(path), side=side).astype(np.float64))
    k = int(cfg.get("k", len(groups)))
    result = kmeans(np.stack(vectors), k=k, seed=seed,
                    init=cfg.get("init", "kmeans++"))

    with open(run.path("metrics/clusters.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "group", "cluster"])
        for path, name, cluster in zip(paths, names, result.assignments):
            writer.writerow([path, name, int(cluster)])
    composition: dict[str, dict[str, int]] = {}
    for name, cluster in zip(names, result.assignments):
        composition.setdefault(str(int(cluster)), {}).setdefault(name, 0)
        composition[str(int(cluster))][name] += 1
    report = {"k": k, "hash_side": side, "n": len(paths),
              "composition": composition,
              "objective": result.objective[-1] if result.objective else None}
    run.path("metrics/analysis.json").write_text(json.dumps(report, indent=2,
                                                            sort_keys=True))
    run.log(event="analyze-dist", n=len(paths), k=k)
    run.finish(cfg)
    print(f"clustered {len(paths)} images into {k} groups")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadenet",
        description="Two-stage grayscale classification pipeline tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, checkpoint=False, image=False, split=False, klass=False,
               skip_bad=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--run-dir", help="output directory for this run")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path override")
        if image:
            p.add_argument("--image", help="single input image")
        if split:
            p.add_argument("--split", choices=list(SPLITS))
        if klass:
            p.add_argument("--class", dest="target_class", type=int,
                           help="target class index")
        if skip_bad:
            p.add_argument("--skip-bad", action="store_true",
                           help="drop undecodable files instead of aborting")
        return p

    common(sub.add_parser("gen-data", help="generate a synthetic dataset")) \
        .set_defaults(func=cmd_gen_data)
    common(sub.add_parser("ingest", help="build a manifest from class dirs"),
           skip_bad=True).set_defaults(func=cmd_ingest)
    common(sub.add_parser("train", help="train a classifier")) \
        .set_defaults(func=cmd_train)
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           checkpoint=True, split=True).set_defaults(func=cmd_eval)
    common(sub.add_parser("segment-train", help="train the mask model")) \
        .set_defaults(func=cmd_segment_train)
    common(sub.add_parser("segment", help="predict and apply lung masks"),
           checkpoint=True, image=True).set_defaults(func=cmd_segment)
    common(sub.add_parser("explain", help="Grad-CAM heatmap and overlay"),
           checkpoint=True, image=True, klass=True).set_defaults(func=cmd_explain)
    common(sub.add_parser("cascade", help="two-stage cascade prediction"),
           image=True, split=True).set_defaults(func=cmd_cascade)
    common(sub.add_parser("gradcheck", help="finite-difference gradient suite")) \
        .set_defaults(func=cmd_gradcheck)
    common(sub.add_parser("analyze-dist", help="hash + k-means dataset analysis")) \
        .set_defaults(func=cmd_analyze_dist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except CascadeNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Ablation harness: train the four architecture variants in one command.

Rows echo the incremental-structure study: a flatten-head baseline at 64x64,
the GAP head at doubled input resolution, GAP+SE, and GAP+SE with moment
exchange plus per-epoch CLAHE enhancement. Reports test accuracy per row.

Usage:
    python3 scripts/run_ablation.py --out runs/ablation \
        [--per-class 300] [--epochs 12] [--seed 0]
"""
import argparse
import json
import time
from pathlib import Path

from cascadenet.data import DatasetManifest
from cascadenet.image import load_image
from cascadenet.models import build_model, preset_config
from cascadenet.synth import generate_synthetic, stage1_spec
from cascadenet.training import (SchedulerConfig, TrainConfig,
                                 evaluate_accuracy, fit, save_checkpoint)

VARIANTS = (
    ("base", {"head": "flatten", "se": False, "moex": False}, 64, {}),
    ("gap-2x", {"head": "gap", "se": False, "moex": False}, 128, {}),
    ("se", {"head": "gap", "se": True, "moex": False}, 128, {}),
    ("se-moex-clahe", {"head": "gap", "se": True, "moex": True}, 128,
     {"moex": True, "clahe_fraction": 0.4}),
)


def run(out_dir: Path, per_class: int, epochs: int, seed: int,
        widths=(8, 16, 32, 64)) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"train": per_class,
              "validation": max(per_class // 3, 1),
              "test": max(per_class // 3, 1)}
    datasets: dict[int, DatasetManifest] = {}
    for size in {size for _, _, size, _ in VARIANTS}:
        spec = stage1_spec(counts, seed=seed)
        spec.image_size = size
        datasets[size] = generate_synthetic(spec, out_dir / f"data-{size}")

    rows = []
    for name, options, size, train_extra in VARIANTS:
        manifest = datasets[size]
        model = build_model(
            preset_config("mini-seme", (1, size, size), 3,
                          widths=widths, **options), seed=seed)
        steps = epochs * max(1, (3 * per_class) // 16)
        cfg = TrainConfig(epochs=epochs, batch_size=16, seed=seed,
                          optimizer="sgd", lr=0.1, momentum=0.9,
                          scheduler="cosine",
                          sched=SchedulerConfig(eta_max=0.1, eta_min=1e-8,
                                                t_i=steps),
                          **train_extra)
        cache = {}

        def pixels(path):
            if path not in cache:
                cache[path] = load_image(path).pixels
            return cache[path]

        start = time.time()
        result = fit(model, manifest, cfg)
        test_acc = evaluate_accuracy(model, manifest.split_records("test"),
                                     pixels, 32)
        save_checkpoint(out_dir / f"{name}.ckpt", model, manifest.class_names,
                        history=result.history)
        rows.append({"variant": name, "input_size": size,
                     "test_accuracy": test_acc,
                     "best_val_accuracy": result.best_val_acc,
                     "epochs": epochs, "wall_s": round(time.time() - start, 1)})
        print(f"{name:<16s} input {size:>3d}  "
              f"test acc {test_acc:.4f}  ({rows[-1]['wall_s']}s)")

    report = {"seed": seed, "per_class": per_class, "epochs": epochs,
              "rows": rows}
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2))
    return report


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--per-class", type=int, default=300)
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    run(args.out, args.per_class, args.epochs, args.seed)


if __name__ == "__main__":
    main()

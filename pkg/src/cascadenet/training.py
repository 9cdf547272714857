"""Optimizers, schedules, the training loop, and checkpoint persistence.

Every source of randomness is derived from (seed, epoch, purpose) seed
sequences, so identical (seed, config) pairs replay bit-identically and a
resumed run equals an uninterrupted one.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigurationError, TrainingError
from .image import GrayImage, clahe, load_image, rotate
from .initializers import he_uniform_init  # noqa: F401  (public at this level)
from .layers import MoExBatch
from .models import Model, ModelConfig, build_model
from .tensor import Tensor


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass
class SchedulerConfig:
    """Cosine annealing with warm restarts, cycle positions 0..t_i inclusive."""
    eta_max: float = 0.1
    eta_min: float = 1e-8
    t_i: int = 200
    mult: int = 1

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ConfigurationError("eta_min must be <= eta_max")
        if self.t_i < 1 or self.mult < 1:
            raise ConfigurationError("t_i and mult must be >= 1")


def cosine_lr(t: int, cfg: SchedulerConfig) -> float:
    """Annealed rate at step t; restarts at eta_max one step after a cycle ends.

    The three rational in-cycle positions (start, midpoint, end) return their
    closed forms so the contract eta(0)=eta_max, eta(T/2)=(max+min)/2,
    eta(T)=eta_min holds exactly in floating point.
    """
    if t < 0:
        raise ConfigurationError("step must be >= 0")
    remaining = t
    period = cfg.t_i
    while remaining > period:
        remaining -= period + 1
        period *= cfg.mult
    if remaining == 0:
        return cfg.eta_max
    if remaining == period:
        return cfg.eta_min
    if 2 * remaining == period:
        return (cfg.eta_max + cfg.eta_min) / 2.0
    cos_term = np.cos(np.pi * remaining / period)
    return float(cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + cos_term))


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Momentum SGD: v = m*v + g; p -= lr*v."""

    kind = "sgd"

    def __init__(self, lr: float = 1e-4, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise TrainingError(f"NaN gradient in parameter {name!r}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[name] = v
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)

    def state(self) -> dict:
        return {"kind": self.kind, "hyper": {"lr": self.lr, "momentum": self.momentum},
                "slots": {f"velocity:{k}": v for k, v in self.velocity.items()}}

    def load_slots(self, slots: dict[str, np.ndarray]) -> None:
        self.velocity = {k.split(":", 1)[1]: v.copy() for k, v in slots.items()}


class Adam:
    """Standard bias-corrected Adam."""

    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise TrainingError(f"NaN gradient in parameter {name!r}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        slots = {f"m:{k}": v for k, v in self.m.items()}
        slots.update({f"v:{k}": v for k, v in self.v.items()})
        return {"kind": self.kind,
                "hyper": {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                          "eps": self.eps, "step_count": self.step_count},
                "slots": slots}

    def load_slots(self, slots: dict[str, np.ndarray]) -> None:
        self.m = {}
        self.v = {}
        for key, value in slots.items():
            slot, name = key.split(":", 1)
            (self.m if slot == "m" else self.v)[name] = value.copy()


def make_optimizer(kind: str, **hyper):
    if kind == "sgd":
        return SGD(lr=hyper.get("lr", 1e-4), momentum=hyper.get("momentum", 0.9))
    if kind == "adam":
        opt = Adam(lr=hyper.get("lr", 1e-3), beta1=hyper.get("beta1", 0.9),
                   beta2=hyper.get("beta2", 0.999), eps=hyper.get("eps", 1e-8))
        opt.step_count = int(hyper.get("step_count", 0))
        return opt
    raise ConfigurationError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# losses


def moex_loss(logits: Tensor, y_a, y_b, lam: float) -> Tensor:
    """Convex mix of cross-entropies against the two exchanged labels."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"moex lambda {lam} outside [0,1]")
    ce_a = T.softmax_cross_entropy(logits, y_a)
    ce_b = T.softmax_cross_entropy(logits, y_b)
    lam_t = Tensor(np.asarray(lam, dtype=logits.dtype))
    one_minus = Tensor(np.asarray(1.0 - lam, dtype=logits.dtype))
    return T.add(T.mul(lam_t, ce_a), T.mul(one_minus, ce_b))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    scheduler: str = "constant"          # or "cosine"
    sched: SchedulerConfig | None = None
    rotate_deg: float = 0.0
    clahe_fraction: float = 0.0
    clahe_mode: str = "per-epoch"        # or "offline"
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 4.0
    moex: bool = False
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.moex and self.batch_size < 2:
            raise ConfigurationError("moex pairing needs batch_size >= 2")
        if self.scheduler not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.scheduler == "cosine" and self.sched is None:
            self.sched = SchedulerConfig()
        if self.clahe_mode not in ("per-epoch", "offline"):
            raise ConfigurationError(f"unknown clahe mode {self.clahe_mode!r}")
        if not 0.0 <= self.clahe_fraction <= 1.0:
            raise ConfigurationError("clahe_fraction must be in [0,1]")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    optimizer_state: dict
    next_epoch: int


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _default_loader(path: str) -> GrayImage:
    return load_image(path)


def _cross_class_pairing(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random partner permutation, repaired to prefer cross-class pairs.

    Each same-class collision is swapped with any position that stays
    cross-class after the exchange, so the pairing is fully cross-class
    whenever no class holds a strict batch majority.
    """
    n = len(labels)
    perm = rng.permutation(n)
    for i in range(n):
        if labels[perm[i]] != labels[i]:
            continue
        for j in range(n):
            if j != i and labels[perm[j]] != labels[i] \
                    and labels[perm[i]] != labels[j]:
                perm[i], perm[j] = perm[j], perm[i]
                break
    return perm


def fit(model: Model, manifest, cfg: TrainConfig, loader=None,
        on_epoch=None, resume_epoch: int = 0, resume_optimizer: dict | None = None,
        history: list[EpochRecord] | None = None) -> TrainResult:
    """Train a classifier on the manifest's train split, score on validation.

    Only the train and validation splits are ever read; the best-validation
    parameter set is retained (tie keeps the earlier epoch) and restored into
    the model at the end unless cfg.restore_best is off.
    """
    manifest = manifest.subset(("train", "validation"))
    train_recs = [r for r in manifest.records if r.split == "train"]
    val_recs = [r for r in manifest.records if r.split == "validation"]
    if not train_recs or not val_recs:
        raise TrainingError("manifest needs non-empty train and validation splits")
    present = {r.label for r in train_recs}
    for label, name in enumerate(manifest.class_names):
        if label not in present:
            raise TrainingError(f"class {name!r} has no train samples (unlearnable)")

    loader = loader or _default_loader
    cache: dict[str, np.ndarray] = {}

    def pixels(path: str) -> np.ndarray:
        if path not in cache:
            cache[path] = loader(path).pixels
        return cache[path]

    # offline enhancement: one seeded pass replacing a fixed subset up front
    enhanced: dict[str, np.ndarray] = {}
    if cfg.clahe_fraction > 0 and cfg.clahe_mode == "offline":
        sel_rng = _rng(cfg.seed, 0xC1A)
        count = int(round(cfg.clahe_fraction * len(train_recs)))
        chosen = sel_rng.choice(len(train_recs), size=count, replace=False)
        for idx in chosen:
            path = train_recs[idx].path
            enhanced[path] = clahe(GrayImage(pixels(path)), cfg.clahe_tiles,
                                   cfg.clahe_clip).pixels

    params = model.parameters()
    if resume_optimizer is not None:
        optimizer = make_optimizer(resume_optimizer["kind"], **resume_optimizer["hyper"])
        optimizer.load_slots(resume_optimizer["slots"])
    else:
        optimizer = make_optimizer(
            cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum, beta1=cfg.beta1,
            beta2=cfg.beta2, eps=cfg.opt_eps)

    moex_cfg = model.moex_layers[0].config if (cfg.moex and model.moex_layers) else None
    history = list(history or [])
    # a resumed run must beat the prior segment's best before it claims one;
    # earlier best parameters live in that segment's own checkpoint
    best_epoch = -1
    best_acc = -1.0
    for rec in history:
        if rec.val_acc > best_acc:
            best_acc = rec.val_acc
            best_epoch = rec.epoch
    best_state = model.state()

    step = resume_epoch * -(-len(train_recs) // cfg.batch_size)
    for epoch in range(resume_epoch, cfg.epochs):
        shuffle_rng = _rng(cfg.seed, 1, epoch)
        order = shuffle_rng.permutation(len(train_recs))
        epoch_sel: set[str] = set()
        if cfg.clahe_fraction > 0 and cfg.clahe_mode == "per-epoch":
            sel_rng = _rng(cfg.seed, 2, epoch)
            count = int(round(cfg.clahe_fraction * len(train_recs)))
            for idx in sel_rng.choice(len(train_recs), size=count, replace=False):
                epoch_sel.add(train_recs[idx].path)

        lr_epoch = _lr_at(cfg, step)
        total_loss = 0.0
        total_n = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            imgs = []
            labels = np.empty(len(batch_idx), dtype=np.int64)
            for slot, idx in enumerate(batch_idx):
                rec = train_recs[idx]
                px = enhanced.get(rec.path, None)
                if px is None:
                    px = pixels(rec.path)
                if rec.path in epoch_sel:
                    px = clahe(GrayImage(px), cfg.clahe_tiles, cfg.clahe_clip).pixels
                if cfg.rotate_deg > 0:
                    ang_rng = _rng(cfg.seed, 3, epoch, int(idx))
                    angle = ang_rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
                    px = rotate(GrayImage(px), angle).pixels
                imgs.append(px)
                labels[slot] = rec.label
            x = Tensor(np.stack(imgs)[:, None].astype(np.float32) / np.float32(255.0))

            moex_batch = None
            y_partner = None
            lam = 1.0
            if moex_cfg is not None and len(batch_idx) >= 2:
                moex_rng = _rng(cfg.seed, 4, epoch, start)
                if moex_rng.random() < moex_cfg.apply_prob:
                    partner = _cross_class_pairing(labels, moex_rng)
                    lam = moex_cfg.lam if moex_cfg.beta_alpha is None else \
                        float(moex_rng.beta(moex_cfg.beta_alpha, moex_cfg.beta_alpha))
                    moex_batch = MoExBatch(partner=partner, lam=lam)
                    y_partner = labels[partner]

            logits = model.forward(x, training=True, moex=moex_batch)
            if moex_batch is not None:
                loss = moex_loss(logits, labels, y_partner, lam)
            else:
                loss = T.softmax_cross_entropy(logits, labels)
            T.backward(loss)
            optimizer.step(params, lr=_lr_at(cfg, step))
            model.zero_grad()
            total_loss += loss.item() * len(batch_idx)
            total_n += len(batch_idx)
            step += 1

        val_acc = evaluate_accuracy(model, val_recs, pixels, cfg.batch_size)
        record = EpochRecord(epoch=epoch, lr=lr_epoch,
                             train_loss=total_loss / total_n, val_acc=val_acc)
        history.append(record)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = model.state()
        if on_epoch is not None:
            on_epoch(record)

    result = TrainResult(history=history, best_epoch=best_epoch,
                         best_val_acc=best_acc, best_state=best_state,
                         final_state=model.state(),
                         optimizer_state=optimizer.state(),
                         next_epoch=cfg.epochs)
    if cfg.restore_best:
        model.load_state(best_state)
    return result


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.scheduler == "cosine":
        return cosine_lr(step, cfg.sched)
    return cfg.lr


def evaluate_accuracy(model: Model, records, pixels, batch_size: int) -> float:
    correct = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = Tensor(np.stack([pixels(r.path) for r in chunk])[:, None]
                   .astype(np.float32) / np.float32(255.0))
        with T.no_grad():
            logits = model.forward(x, training=False)
        preds = logits.data.argmax(axis=1)
        correct += int(sum(p == r.label for p, r in zip(preds, chunk)))
    return correct / len(records)


def predict_probabilities(model: Model, images: np.ndarray,
                          batch_size: int = 32) -> np.ndarray:
    """Softmax probabilities for a stack of uint8 images, eval mode."""
    outs = []
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start:start + batch_size][:, None].astype(np.float32)
                   / np.float32(255.0))
        with T.no_grad():
            logits = model.forward(x, training=False)
        outs.append(T.softmax(logits.data))
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# segmentation training (single-channel mask logits, pixelwise BCE)


@dataclass
class SegTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-3
    scheduler: str = "cosine"
    sched: SchedulerConfig | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.sched is None:
            self.sched = SchedulerConfig(eta_max=self.lr, eta_min=1e-8, t_i=200)


def fit_segmentation(model: Model, images: np.ndarray, masks: np.ndarray,
                     val_images: np.ndarray, val_masks: np.ndarray,
                     cfg: SegTrainConfig, on_epoch=None) -> TrainResult:
    """Adam + cosine-annealed BCE training of a mask model; tracks mean IoU."""
    from .metrics import mean_iou
    from .image import MaskImage

    if model.task != "segment":
        raise TrainingError("fit_segmentation needs a segmentation model")
    params = model.parameters()
    optimizer = Adam(lr=cfg.lr)
    history: list[EpochRecord] = []
    best_epoch = -1
    best_iou = -1.0
    best_state = model.state()
    step = 0
    n = len(images)
    for epoch in range(cfg.epochs):
        order = _rng(cfg.seed, 1, epoch).permutation(n)
        total_loss = 0.0
        lr_epoch = cosine_lr(step, cfg.sched) if cfg.scheduler == "cosine" else cfg.lr
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(images[idx][:, None].astype(np.float32) / np.float32(255.0))
            t = masks[idx][:, None].astype(np.float32)
            logits = model.forward(x, training=True)
            loss = T.sigmoid_bce(logits, t)
            T.backward(loss)
            lr = cosine_lr(step, cfg.sched) if cfg.scheduler == "cosine" else cfg.lr
            optimizer.step(params, lr=lr)
            model.zero_grad()
            total_loss += loss.item() * len(idx)
            step += 1

        ious = []
        for start in range(0, len(val_images), cfg.batch_size):
            x = Tensor(val_images[start:start + cfg.batch_size][:, None]
                       .astype(np.float32) / np.float32(255.0))
            with T.no_grad():
                logits = model.forward(x, training=False)
            probs = 1.0 / (1.0 + np.exp(-logits.data[:, 0].astype(np.float64)))
            for probmap, truth in zip(probs, val_masks[start:start + cfg.batch_size]):
                pred = MaskImage((probmap >= cfg.threshold).astype(np.uint8))
                ious.append(mean_iou(pred, MaskImage(truth.astype(np.uint8))))
        val_iou = float(np.mean(ious))
        record = EpochRecord(epoch=epoch, lr=lr_epoch,
                             train_loss=total_loss / n, val_acc=val_iou)
        history.append(record)
        if val_iou > best_iou:
            best_iou = val_iou
            best_epoch = epoch
            best_state = model.state()
        if on_epoch is not None:
            on_epoch(record)
    model.load_state(best_state)
    return TrainResult(history=history, best_epoch=best_epoch, best_val_acc=best_iou,
                       best_state=best_state, final_state=model.state(),
                       optimizer_state=optimizer.state(), next_epoch=cfg.epochs)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SEMN"
CHECKPOINT_VERSION = 1
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class Checkpoint:
    model: Model
    class_names: list[str]
    optimizer: dict | None
    rng: dict | None
    epoch: int
    history: list[EpochRecord]


def save_checkpoint(path, model: Model, class_names: list[str],
                    optimizer: dict | None = None, rng: dict | None = None,
                    epoch: int = 0, history: list[EpochRecord] | None = None) -> None:
    """Write magic, version, length-prefixed JSON metadata, raw blobs, FNV digest."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, value in model.state().items():
        arrays.append((name, value))
    if optimizer is not None:
        for slot, value in optimizer.get("slots", {}).items():
            arrays.append((f"opt/{slot}", np.asarray(value)))

    index = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        dtype = "f8" if arr.dtype == np.float64 else "f4"
        arr = arr.astype(np.dtype(dtype).newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    opt_meta = None
    if optimizer is not None:
        opt_meta = {"kind": optimizer["kind"], "hyper": optimizer["hyper"]}
    meta = {
        "model_config": model.config.to_doc(),
        "class_names": list(class_names),
        "arrays": index,
        "optimizer": opt_meta,
        "rng": rng,
        "epoch": epoch,
        "history": [asdict(h) for h in (history or [])],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(meta_bytes)) + meta_bytes + b"".join(blobs))
    digest = struct.pack("<Q", fnv1a64(body))
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a checkpoint; errors name the failure cause."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise CheckpointError(f"{path}: truncated file (too short for header)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version mismatch (file {version}, supported {CHECKPOINT_VERSION})")
    body, stored = data[:-8], data[-8:]
    if struct.pack("<Q", fnv1a64(body)) != stored:
        raise CheckpointError(f"{path}: digest mismatch (corrupt or truncated)")
    meta_len = struct.unpack_from("<Q", data, 8)[0]
    meta_start = 16
    blob_start = meta_start + meta_len
    if blob_start > len(body):
        raise CheckpointError(f"{path}: truncated metadata block")
    meta = json.loads(body[meta_start:blob_start].decode("utf-8"))

    config = ModelConfig.from_doc(meta["model_config"])
    model = build_model(config, seed=0)
    state = {}
    for entry in meta["arrays"]:
        lo = blob_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError(f"{path}: truncated blob {entry['name']!r}")
        arr = np.frombuffer(body[lo:hi], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        state[entry["name"]] = arr.reshape(entry["shape"]).copy()
    opt_state = None
    if meta["optimizer"] is not None:
        slots = {k[len("opt/"):]: v for k, v in state.items() if k.startswith("opt/")}
        opt_state = {"kind": meta["optimizer"]["kind"],
                     "hyper": meta["optimizer"]["hyper"], "slots": slots}
    model.load_state({k: v for k, v in state.items() if not k.startswith("opt/")})
    history = [EpochRecord(**h) for h in meta["history"]]
    return Checkpoint(model=model, class_names=meta["class_names"],
                      optimizer=opt_state, rng=meta["rng"], epoch=meta["epoch"],
                      history=history)

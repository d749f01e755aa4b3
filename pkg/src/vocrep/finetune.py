"""Supervised adaptation: classification heads, early stopping, and k-fold CV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .audio_io import ClipCache, FoldSplit, Manifest, ManifestEntry, TARGET_RATE, stratified_holdout
from .checkpoint import load_checkpoint
from .metrics import ConfusionMatrix, FoldMetrics, MetricsReport, accuracy, f1_macro, uar
from .model import ArchitectureConfig, PretrainModel
from .rng import substream


class DegenerateTaskError(ValueError):
    """Training set contains a single class."""


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    warmup_steps: int = 500
    peak_lr: float = 1e-4
    pooling: str = "mean"
    head: str = "linear"
    freeze_encoder: bool = False
    max_clip_s: float = 30.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max epochs")
        if self.pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.head not in ("linear", "mlp_relu"):
            raise ValueError(f"unknown head {self.head!r}")

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "max_epochs": self.max_epochs,
                "patience": self.patience, "warmup_steps": self.warmup_steps,
                "peak_lr": self.peak_lr, "pooling": self.pooling, "head": self.head,
                "freeze_encoder": self.freeze_encoder, "max_clip_s": self.max_clip_s}

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


def finetune_lr_at(step: int, total_steps: int, cfg: FinetuneConfig) -> float:
    """Linear warmup over the first steps, then linear decay to zero.

    When the whole run fits inside the warmup window the decay segment
    degenerates: the rate holds at the peak and drops to zero at the end.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_steps
    if total_steps <= warmup:
        return 0.0 if step >= total_steps else cfg.peak_lr
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (total_steps - step) / (total_steps - warmup)


def pool(frames: nn.Tensor, mode: str = "mean") -> nn.Tensor:
    """Collapse frames [T, d] to a clip vector [d]."""
    if mode == "mean":
        return nn.tmean(frames, axis=0)
    if mode == "max":
        return nn.tmax(frames, axis=0)
    raise ValueError(f"unknown pooling {mode!r}")


class Head:
    """Output layer: a single affine map, or affine-ReLU-affine."""

    def __init__(self, kind: str, input_dim: int, num_classes: int,
                 rng: np.random.Generator):
        self.kind = kind
        self.params: dict[str, nn.Tensor] = {}

        def linear(name, n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            self.params[f"{name}.weight"] = nn.Tensor(
                rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32),
                requires_grad=True)
            self.params[f"{name}.bias"] = nn.Tensor(
                np.zeros(n_out, dtype=np.float32), requires_grad=True)

        if kind == "linear":
            linear("head.out", input_dim, num_classes)
        elif kind == "mlp_relu":
            linear("head.fc1", input_dim, input_dim)
            linear("head.out", input_dim, num_classes)
        else:
            raise ValueError(f"unknown head {kind!r}")

    def named_params(self) -> dict[str, nn.Tensor]:
        return dict(self.params)

    def logits(self, pooled: nn.Tensor) -> nn.Tensor:
        x = nn.reshape(pooled, (1, pooled.shape[0]))
        if self.kind == "mlp_relu":
            x = nn.relu(nn.add(nn.matmul(x, self.params["head.fc1.weight"]),
                               self.params["head.fc1.bias"]))
        x = nn.add(nn.matmul(x, self.params["head.out.weight"]),
                   self.params["head.out.bias"])
        return nn.reshape(x, (x.shape[1],))


def classify(pooled: nn.Tensor, head: Head) -> nn.Tensor:
    if pooled.shape[0] != head.params[next(iter(head.params))].shape[0]:
        raise ValueError("pooled dimension does not match head input")
    return head.logits(pooled)


class Classifier:
    """Pre-trained backbone plus a randomly initialized head."""

    def __init__(self, arch: ArchitectureConfig, backbone_arrays: dict,
                 num_classes: int, cfg: FinetuneConfig, seed: int):
        self.cfg = cfg
        self.model = PretrainModel(arch, seed)
        self.model.load_arrays(backbone_arrays)
        self.head = Head(cfg.head, arch.context.model_dim, num_classes,
                         substream(seed, "head"))

    def named_params(self) -> dict[str, nn.Tensor]:
        params = self.model.named_params()
        params.update(self.head.named_params())
        return params

    def trainable_params(self) -> dict[str, nn.Tensor]:
        if self.cfg.freeze_encoder:
            return self.head.named_params()
        return self.named_params()

    def logits(self, samples: np.ndarray) -> nn.Tensor:
        frames = self.model.embed(samples)
        return self.head.logits(pool(frames, self.cfg.pooling))

    def embed(self, samples: np.ndarray) -> np.ndarray:
        return pool(self.model.embed(samples), self.cfg.pooling).data


class ProbeClassifier:
    """Fixed external features through the two-layer ReLU head."""

    def __init__(self, feature_dim: int, num_classes: int, cfg: FinetuneConfig, seed: int):
        self.cfg = cfg
        self.head = Head("mlp_relu", feature_dim, num_classes, substream(seed, "head"))

    def named_params(self) -> dict[str, nn.Tensor]:
        return self.head.named_params()

    def trainable_params(self) -> dict[str, nn.Tensor]:
        return self.head.named_params()

    def logits(self, features: np.ndarray) -> nn.Tensor:
        return self.head.logits(nn.Tensor(np.asarray(features, dtype=np.float32)))


def early_stop_scan(history, patience: int) -> tuple[int, int]:
    """(best index, last index run) under strict-improvement early stopping."""
    best = 0
    bad = 0
    for i in range(1, len(history)):
        if history[i] > history[best]:
            best = i
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                return best, i
    return best, len(history) - 1


def _evaluate(model, examples, num_classes: int) -> ConfusionMatrix:
    y_true = []
    y_pred = []
    for x, y in examples:
        y_true.append(y)
        y_pred.append(int(model.logits(x).data.argmax()))
    return ConfusionMatrix.from_pairs(y_true, y_pred, num_classes)


def train_fold(model, train_examples, valid_examples, cfg: FinetuneConfig,
               num_classes: int, rng: np.random.Generator) -> dict:
    """Train with early stopping on validation UAR; restores the best epoch.

    Examples are (input, class index) pairs; the model provides
    `logits(input)` and `trainable_params()`.
    """
    if len(set(y for _, y in train_examples)) < 2:
        raise DegenerateTaskError("training fold contains a single class")
    trainable = model.trainable_params()
    all_params = model.named_params()
    opt = {name: nn.AdamState.for_param(p) for name, p in trainable.items()}
    steps_per_epoch = (len(train_examples) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.max_epochs

    history = []
    best_state = None
    best_uar = -1.0
    bad = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_examples))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_examples[i] for i in order[start:start + cfg.batch_size]]
            losses = [nn.cross_entropy(model.logits(x), y) for x, y in batch]
            loss = losses[0] if len(losses) == 1 else nn.mul(
                _sum_tensors(losses), nn.Tensor(np.asarray(1.0 / len(losses),
                                                           dtype=np.float32)))
            for p in trainable.values():
                p.zero_grad()
            loss.backward()
            nn.clip_grad_norm(trainable.values(), 1.0)
            lr = finetune_lr_at(min(step, total_steps), total_steps, cfg)
            for name, p in trainable.items():
                if p.grad is not None:
                    nn.adam_step(p, opt[name], lr)
            step += 1
            epoch_loss += float(loss.data) * len(batch)
        val_uar = uar(_evaluate(model, valid_examples, num_classes))
        history.append({"epoch": epoch + 1, "train_loss": epoch_loss / len(train_examples),
                        "valid_uar": val_uar})
        if val_uar > best_uar:
            best_uar = val_uar
            best_state = {k: v.data.copy() for k, v in all_params.items()}
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for name, p in all_params.items():
        p.data = best_state[name]
    return {"history": history, "best_valid_uar": best_uar,
            "epochs_run": len(history)}


def _sum_tensors(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = nn.add(acc, t)
    return acc


def _label_index(manifest: Manifest) -> dict[str, int]:
    labels = sorted({e.label for e in manifest.entries if e.label is not None})
    if len(labels) < 2:
        raise DegenerateTaskError("need at least two classes")
    return {label: i for i, label in enumerate(labels)}


def _clip_examples(entries: list[ManifestEntry], label_to_idx: dict, cfg: FinetuneConfig,
                   cache: ClipCache):
    cap = int(round(cfg.max_clip_s * TARGET_RATE))
    return [(cache.samples(e.path)[:cap], label_to_idx[e.label]) for e in entries]


def cross_validate(manifest: Manifest, folds: FoldSplit, base_checkpoint,
                   cfg: FinetuneConfig, seed: int, dataset_name: str = "",
                   cache_dir=None, config_fingerprint: str = "") -> MetricsReport:
    """The k-fold protocol: train on k-1 folds, evaluate on the held-out fold.

    10% of each training pool is split off (stratified) to drive early
    stopping. `base_checkpoint` is a checkpoint path or a loaded Checkpoint.
    """
    if len(folds.assignments) != len(manifest.entries):
        raise ValueError("fold split does not cover the manifest")
    ckpt = base_checkpoint if hasattr(base_checkpoint, "tensors") else load_checkpoint(
        base_checkpoint)
    arch = ArchitectureConfig.from_dict(ckpt.config["arch"])
    backbone = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    label_to_idx = _label_index(manifest)
    cache = ClipCache(cache_dir=cache_dir)

    rows = []
    fold_details = []
    for fold in range(folds.num_folds):
        test_idx = folds.fold_indices(fold)
        if not test_idx:
            raise ValueError(f"fold {fold} is empty")
        train_pool = [manifest.entries[i] for i in range(len(manifest.entries))
                      if folds.assignments[i] != fold]
        test_entries = [manifest.entries[i] for i in test_idx]
        inner_seed = int(substream(seed, f"fold{fold}.holdout").integers(2 ** 31))
        train_entries, early_entries = stratified_holdout(train_pool, 0.1, inner_seed)

        model = Classifier(arch, backbone, len(label_to_idx), cfg,
                           seed=int(substream(seed, f"fold{fold}.init").integers(2 ** 31)))
        fit = train_fold(model,
                         _clip_examples(train_entries, label_to_idx, cfg, cache),
                         _clip_examples(early_entries, label_to_idx, cfg, cache),
                         cfg, len(label_to_idx),
                         substream(seed, f"fold{fold}.order"))
        cm = _evaluate(model, _clip_examples(test_entries, label_to_idx, cfg, cache),
                       len(label_to_idx))
        rows.append(FoldMetrics(fold=fold, uar=uar(cm), accuracy=accuracy(cm),
                                f1_macro=f1_macro(cm)))
        fold_details.append({"fold": fold, "epochs_run": fit["epochs_run"],
                             "best_valid_uar": fit["best_valid_uar"],
                             "test_size": len(test_entries)})
    return MetricsReport(dataset_name=dataset_name, folds=rows,
                         config_fingerprint=config_fingerprint,
                         extra={"fold_details": fold_details,
                                "classes": sorted(label_to_idx)})


@dataclass
class ProbeFeatures:
    paths: list[str]
    matrix: np.ndarray  # [N, feature_dim]

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def read_csv(cls, path) -> "ProbeFeatures":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "path":
                raise ValueError("feature CSV must start with a 'path' column")
            skip = {i for i, name in enumerate(header) if name in ("path", "label")}
            paths = []
            rows = []
            for rec in reader:
                paths.append(rec[0])
                rows.append([float(v) for i, v in enumerate(rec) if i not in skip])
        if not rows:
            raise ValueError("feature CSV is empty")
        return cls(paths=paths, matrix=np.asarray(rows, dtype=np.float32))


def probe_train(features: ProbeFeatures, manifest: Manifest, folds: FoldSplit,
                cfg: FinetuneConfig, seed: int, dataset_name: str = "",
                config_fingerprint: str = "") -> MetricsReport:
    """Same CV protocol with the two-layer ReLU head over fixed features."""
    by_path = {e.path: e for e in manifest.entries}
    missing = [p for p in features.paths if p not in by_path]
    if missing:
        raise ValueError(f"{len(missing)} feature rows missing from manifest, "
                         f"first: {missing[0]}")
    label_to_idx = _label_index(manifest)
    entry_rows = {p: features.matrix[i] for i, p in enumerate(features.paths)}
    if len(folds.assignments) != len(manifest.entries):
        raise ValueError("fold split does not cover the manifest")

    def examples(entries):
        return [(entry_rows[e.path], label_to_idx[e.label]) for e in entries]

    rows = []
    for fold in range(folds.num_folds):
        test_idx = folds.fold_indices(fold)
        if not test_idx:
            raise ValueError(f"fold {fold} is empty")
        train_pool = [manifest.entries[i] for i in range(len(manifest.entries))
                      if folds.assignments[i] != fold]
        test_entries = [manifest.entries[i] for i in test_idx]
        inner_seed = int(substream(seed, f"fold{fold}.holdout").integers(2 ** 31))
        train_entries, early_entries = stratified_holdout(train_pool, 0.1, inner_seed)
        model = ProbeClassifier(features.feature_dim, len(label_to_idx), cfg,
                                seed=int(substream(seed, f"fold{fold}.init").integers(2 ** 31)))
        train_fold(model, examples(train_entries), examples(early_entries),
                   cfg, len(label_to_idx), substream(seed, f"fold{fold}.order"))
        cm = _evaluate(model, examples(test_entries), len(label_to_idx))
        rows.append(FoldMetrics(fold=fold, uar=uar(cm), accuracy=accuracy(cm),
                                f1_macro=f1_macro(cm)))
    return MetricsReport(dataset_name=dataset_name, folds=rows,
                         config_fingerprint=config_fingerprint,
                         extra={"classes": sorted(label_to_idx), "probe": True})

"""Self-supervised training: contrastive + diversity objective over masked frames."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .audio_io import (ClipCache, Manifest, RawWaveform, TARGET_RATE, chunk_count,
                       chunk_for_pretraining, holdout_validation)
from .checkpoint import load_checkpoint, save_checkpoint
from .context import apply_mask, sample_mask
from .model import ArchitectureConfig, PretrainModel
from .quantizer import anneal_temperature, diversity_loss
from .rng import substream


class IncompatibleCheckpointError(Exception):
    """Warm-start checkpoint tensors disagree with the configured shapes."""

    def __init__(self, names):
        self.names = sorted(names)
        super().__init__("shape mismatch for: " + ", ".join(self.names))


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries a diagnostic state dump."""

    def __init__(self, step: int, diagnostics: dict):
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss at update {step}")


@dataclass(frozen=True)
class PretrainConfig:
    total_updates: int = 400000
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.08
    batch_clips: int = 8
    num_negatives: int = 100
    similarity_temperature: float = 0.1
    diversity_weight: float = 0.1
    chunk_s: float = 10.0
    min_tail_s: float = 2.0
    valid_fraction: float = 0.05
    mask_prob: float = 0.065
    mask_span: int = 10

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup fraction must be in (0, 1)")
        if self.num_negatives < 1 or self.similarity_temperature <= 0:
            raise ValueError("need at least one distractor and positive temperature")

    def to_dict(self) -> dict:
        return {"total_updates": self.total_updates, "peak_lr": self.peak_lr,
                "warmup_fraction": self.warmup_fraction, "batch_clips": self.batch_clips,
                "num_negatives": self.num_negatives,
                "similarity_temperature": self.similarity_temperature,
                "diversity_weight": self.diversity_weight, "chunk_s": self.chunk_s,
                "min_tail_s": self.min_tail_s, "valid_fraction": self.valid_fraction,
                "mask_prob": self.mask_prob, "mask_span": self.mask_span}

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class InitStrategy:
    kind: str  # "scratch" or "warm_start"
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("scratch", "warm_start"):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.kind == "warm_start" and not self.checkpoint_path:
            raise ValueError("warm_start requires a checkpoint path")


@dataclass
class InitReport:
    loaded: list[str]
    missing: list[str]
    unexpected: list[str]


def lr_at(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup to the peak, then linear decay to zero."""
    total = cfg.total_updates
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup_end = int(round(cfg.warmup_fraction * total))
    if warmup_end > 0 and step <= warmup_end:
        return cfg.peak_lr * step / warmup_end
    return cfg.peak_lr * (total - step) / (total - warmup_end)


def select_best(history) -> int:
    """Step with the lowest validation loss; earliest step wins ties."""
    history = list(history)
    if not history:
        raise ValueError("empty validation history")
    return min(history, key=lambda sl: (sl[1], sl[0]))[0]


def sample_distractors(num_masked: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """K indices per masked frame, uniform over the other masked frames.

    Sampling is without replacement when enough other frames exist, with
    replacement otherwise; a single-frame clip falls back to the positive
    itself, which contributes a constant loss term.
    """
    if num_masked < 1:
        raise ValueError("need at least one masked frame")
    if num_masked == 1:
        return np.zeros((1, k), dtype=np.intp)
    idx = np.empty((num_masked, k), dtype=np.intp)
    others = num_masked - 1
    for row in range(num_masked):
        if others > k:
            draw = rng.choice(others, size=k, replace=False)
        else:
            draw = rng.integers(0, others, size=k)
        idx[row] = draw + (draw >= row)
    return idx


def contrastive_loss(c_masked: nn.Tensor, q_pos: nn.Tensor, distractors: np.ndarray,
                     kappa: float) -> nn.Tensor:
    """Mean InfoNCE over masked frames with cosine similarities at 1/kappa.

    `distractors` indexes rows of `q_pos`; the positive target of each row
    is the row itself.
    """
    num_masked = c_masked.shape[0]
    if num_masked < 1:
        raise ValueError("need at least one masked frame")
    c_hat = nn.normalize_rows(c_masked)
    q_hat = nn.normalize_rows(q_pos)
    cand_idx = np.concatenate(
        [np.arange(num_masked, dtype=np.intp)[:, None], distractors], axis=1)
    cand = nn.take_rows(q_hat, cand_idx)  # [n, K+1, d]
    sims = nn.tsum(nn.mul(nn.reshape(c_hat, (num_masked, 1, c_hat.shape[1])), cand), axis=-1)
    logits = nn.mul(sims, nn.Tensor(np.asarray(1.0 / kappa, dtype=sims.dtype)))
    return nn.cross_entropy(logits, np.zeros(num_masked, dtype=np.intp))


def initialize(strategy: InitStrategy, arch: ArchitectureConfig,
               seed: int) -> tuple[PretrainModel, InitReport]:
    """Build a model from scratch or from a shape-compatible checkpoint."""
    model = PretrainModel(arch, seed)
    if strategy.kind == "scratch":
        return model, InitReport(loaded=[], missing=[], unexpected=[])
    ckpt = load_checkpoint(strategy.checkpoint_path)
    params = model.named_params()
    stored = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    mismatched = [name for name, arr in stored.items()
                  if name in params and arr.shape != params[name].shape]
    if mismatched:
        raise IncompatibleCheckpointError(mismatched)
    loaded = []
    for name, arr in stored.items():
        if name in params:
            params[name].data = np.array(arr, dtype=np.float32)
            loaded.append(name)
    report = InitReport(loaded=sorted(loaded),
                        missing=sorted(set(params) - set(stored)),
                        unexpected=sorted(set(stored) - set(params)))
    return model, report


class PretrainState:
    """Optimizer state plus the named random substreams of one run."""

    def __init__(self, model: PretrainModel, cfg: PretrainConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.step = 0
        self.opt = {name: nn.AdamState.for_param(p)
                    for name, p in model.named_params().items()}
        self.mask_rng = substream(seed, "mask")
        self.gumbel_rng = substream(seed, "gumbel")
        self.negatives_rng = substream(seed, "negatives")
        self.dropout_rng = substream(seed, "dropout")


def _batch_objective(model: PretrainModel, batch, cfg: PretrainConfig, temperature: float,
                     mask_rng, gumbel_rng, negatives_rng, dropout_rng, train: bool):
    """Contrastive + diversity losses over a list of chunk sample arrays."""
    per_clip = []
    weights = []
    prob_blocks = []
    for samples in batch:
        z_frames = model.latents(samples)
        num_frames = z_frames.shape[0]
        spec = sample_mask(num_frames, cfg.mask_prob, cfg.mask_span, mask_rng)
        targets = model.quantizer.quantize(z_frames, temperature, rng=gumbel_rng)
        masked_idx = spec.masked_indices()
        x = apply_mask(model.project_latents(z_frames), spec, model.context.mask_embedding)
        c = model.context.contextualize(x, train=train, rng=dropout_rng)
        c_masked = nn.take_rows(model.contextual_targets(c), masked_idx)
        q_masked = nn.take_rows(targets.vectors, masked_idx)
        distr = sample_distractors(len(masked_idx), cfg.num_negatives, negatives_rng)
        per_clip.append(contrastive_loss(c_masked, q_masked, distr,
                                         cfg.similarity_temperature))
        weights.append(len(masked_idx))
        prob_blocks.append(nn.take_rows(targets.code_probs, masked_idx))
    total_masked = sum(weights)
    scaled = [nn.mul(l, nn.Tensor(np.asarray(w / total_masked, dtype=np.float32)))
              for l, w in zip(per_clip, weights)]
    loss_con = scaled[0]
    for term in scaled[1:]:
        loss_con = nn.add(loss_con, term)
    loss_div = diversity_loss(nn.concat(prob_blocks, axis=0))
    return loss_con, loss_div


def pretrain_step(batch, model: PretrainModel, state: PretrainState,
                  cfg: PretrainConfig) -> tuple[float, float, float]:
    """One optimizer update on a batch of fixed-length chunks."""
    temperature = anneal_temperature(state.step, model.arch.quantizer)
    loss_con, loss_div = _batch_objective(
        model, batch, cfg, temperature,
        state.mask_rng, state.gumbel_rng, state.negatives_rng, state.dropout_rng,
        train=True)
    total = nn.add(loss_con, nn.mul(loss_div, nn.Tensor(
        np.asarray(cfg.diversity_weight, dtype=np.float32))))
    values = (float(total.data), float(loss_con.data), float(loss_div.data))
    if not all(math.isfinite(v) for v in values):
        raise TrainingDivergedError(state.step, {
            "loss_total": values[0], "loss_contrastive": values[1],
            "loss_diversity": values[2], "temperature": temperature})
    params = model.named_params()
    for p in params.values():
        p.zero_grad()
    total.backward()
    nn.clip_grad_norm(params.values(), 1.0)
    lr = lr_at(min(state.step, cfg.total_updates), cfg)
    for name, p in params.items():
        if p.grad is not None:
            nn.adam_step(p, state.opt[name], lr)
    state.step += 1
    return values


def validation_loss(model: PretrainModel, chunks, cfg: PretrainConfig,
                    temperature: float, seed: int) -> float:
    """Objective on held-out chunks with a fixed evaluation substream.

    Reseeding per pass keeps masks and noise identical across passes so
    the curve is comparable over training.
    """
    mask_rng = substream(seed, "validation.mask")
    gumbel_rng = substream(seed, "validation.gumbel")
    negatives_rng = substream(seed, "validation.negatives")
    loss_con, loss_div = _batch_objective(
        model, chunks, cfg, temperature,
        mask_rng, gumbel_rng, negatives_rng, None, train=False)
    return float(loss_con.data) + cfg.diversity_weight * float(loss_div.data)


def _chunk_catalog(manifest: Manifest, cfg: PretrainConfig):
    """(path, chunk index) pairs derivable from manifest metadata alone."""
    catalog = []
    for e in manifest.entries:
        for i in range(chunk_count(e.num_samples, cfg.chunk_s, cfg.min_tail_s)):
            catalog.append((e.path, i))
    return catalog


def _get_chunk(cache: ClipCache, path: str, index: int, cfg: PretrainConfig) -> np.ndarray:
    samples = cache.samples(path)
    chunks = chunk_for_pretraining(RawWaveform(samples, TARGET_RATE, path),
                                   cfg.chunk_s, cfg.min_tail_s)
    return chunks[index].samples


def run_pretraining(manifest: Manifest, arch: ArchitectureConfig, cfg: PretrainConfig,
                    out_dir, seed: int, strategy: InitStrategy | None = None,
                    cache_dir=None, log=None) -> dict:
    """Full pre-training run; writes checkpoints, best.ckpt and loss.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    strategy = strategy or InitStrategy("scratch")
    model, init_report = initialize(strategy, arch, seed)
    state = PretrainState(model, cfg, seed)
    data_rng = substream(seed, "data")
    cache = ClipCache(cache_dir=cache_dir)

    train_m, valid_m = holdout_validation(manifest, cfg.valid_fraction, seed)
    train_catalog = _chunk_catalog(train_m, cfg)
    valid_catalog = _chunk_catalog(valid_m, cfg)
    if not train_catalog or not valid_catalog:
        raise ValueError("not enough chunkable audio for training and validation")

    val_every = max(1, cfg.total_updates // 100)
    ckpt_every = max(1, cfg.total_updates // 10)
    config_blob = {"format_version": 1, "arch": arch.to_dict(), "pretrain": cfg.to_dict(),
                   "seed": seed, "update_step": 0, "validation_loss": None}

    order: list[int] = []
    history = []
    rows = []
    totals = []
    best = None  # (loss, step, snapshot)

    def next_batch():
        nonlocal order
        batch = []
        for _ in range(cfg.batch_clips):
            if not order:
                order = list(data_rng.permutation(len(train_catalog)))
            path, idx = train_catalog[order.pop()]
            batch.append(_get_chunk(cache, path, idx, cfg))
        return batch

    def run_validation(step):
        nonlocal best
        temperature = anneal_temperature(step, arch.quantizer)
        chunks = [_get_chunk(cache, p, i, cfg) for p, i in valid_catalog]
        loss = validation_loss(model, chunks, cfg, temperature, seed)
        history.append((step, loss))
        if best is None or loss < best[0]:
            best = (loss, step, model.snapshot())
        return loss

    for step in range(cfg.total_updates):
        total, con, div = pretrain_step(next_batch(), model, state, cfg)
        totals.append(total)
        val = ""
        if (step + 1) % val_every == 0 or step + 1 == cfg.total_updates:
            val = run_validation(step + 1)
        rows.append((step + 1, lr_at(step, cfg), con, div, val))
        if log is not None and ((step + 1) % max(1, cfg.total_updates // 20) == 0):
            log(f"update {step + 1}/{cfg.total_updates}  loss {total:.4f}")
        if (step + 1) % ckpt_every == 0:
            blob = dict(config_blob, update_step=step + 1,
                        validation_loss=history[-1][1] if history else None)
            save_checkpoint(out_dir / f"step{step + 1}.ckpt", model.param_arrays(), blob)

    best_loss, best_step, best_params = best
    assert select_best(history) == best_step
    save_checkpoint(out_dir / "best.ckpt", best_params,
                    dict(config_blob, update_step=best_step, validation_loss=best_loss))

    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "contrastive", "diversity", "validation"])
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])

    return {"history": history, "best_step": best_step, "best_loss": best_loss,
            "init_report": init_report, "first_loss": totals[0],
            "final_loss": totals[-1], "rows": rows}

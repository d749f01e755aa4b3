"""Product quantization of latent frames via Gumbel-softmax codebook selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .encoder import LatentFrames


@dataclass(frozen=True)
class QuantizerConfig:
    num_groups: int = 2
    entries_per_group: int = 320
    entry_dim: int = 128
    output_dim: int = 256
    temp_start: float = 2.0
    temp_floor: float = 0.5
    temp_decay: float = 0.999995

    def __post_init__(self):
        if self.num_groups < 1 or self.entries_per_group < 1:
            raise ValueError("need at least one group and one entry")
        if not 0.0 < self.temp_floor <= self.temp_start:
            raise ValueError("temperature floor must be in (0, start]")

    def to_dict(self) -> dict:
        return {"num_groups": self.num_groups, "entries_per_group": self.entries_per_group,
                "entry_dim": self.entry_dim, "output_dim": self.output_dim,
                "temp_start": self.temp_start, "temp_floor": self.temp_floor,
                "temp_decay": self.temp_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerConfig":
        return cls(**d)


@dataclass
class QuantizedTargets:
    vectors: nn.Tensor      # [num_frames, output_dim]
    code_probs: nn.Tensor   # [num_frames, groups, entries]
    code_ids: np.ndarray    # [num_frames, groups] argmax of code_probs


def anneal_temperature(step: int, cfg: QuantizerConfig) -> float:
    """Exponential decay from the start temperature, clamped at the floor."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return max(cfg.temp_floor, cfg.temp_start * cfg.temp_decay ** step)


class GumbelQuantizer:
    """Selects one codebook entry per group and projects the concatenation."""

    def __init__(self, input_dim: int, cfg: QuantizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.input_dim = input_dim
        g, v, e = cfg.num_groups, cfg.entries_per_group, cfg.entry_dim
        self.params: dict[str, nn.Tensor] = {}
        bound = 1.0 / np.sqrt(input_dim)
        self.params["quantizer.logits.weight"] = nn.Tensor(
            rng.uniform(-bound, bound, size=(input_dim, g * v)).astype(np.float32),
            requires_grad=True)
        self.params["quantizer.logits.bias"] = nn.Tensor(
            np.zeros(g * v, dtype=np.float32), requires_grad=True)
        cb_bound = 1.0 / np.sqrt(e)
        for gi in range(g):
            self.params[f"quantizer.codebook.{gi}"] = nn.Tensor(
                rng.uniform(-cb_bound, cb_bound, size=(v, e)).astype(np.float32),
                requires_grad=True)
        out_bound = 1.0 / np.sqrt(g * e)
        self.params["quantizer.out.weight"] = nn.Tensor(
            rng.uniform(-out_bound, out_bound, size=(g * e, cfg.output_dim)).astype(np.float32),
            requires_grad=True)
        self.params["quantizer.out.bias"] = nn.Tensor(
            np.zeros(cfg.output_dim, dtype=np.float32), requires_grad=True)

    def named_params(self) -> dict[str, nn.Tensor]:
        return dict(self.params)

    def quantize(self, latents, temperature: float, noise=None,
                 rng: np.random.Generator | None = None, hard: bool = True) -> QuantizedTargets:
        """Quantize frames [T, input_dim]; gradients flow straight-through.

        `noise` injects explicit Gumbel draws (zeros make the selection a
        plain argmax); otherwise draws come from `rng`, or default to zeros.
        """
        frames = latents.frames if isinstance(latents, LatentFrames) else latents
        n = frames.shape[0]
        g, v, e = self.cfg.num_groups, self.cfg.entries_per_group, self.cfg.entry_dim
        logits = nn.add(nn.matmul(frames, self.params["quantizer.logits.weight"]),
                        self.params["quantizer.logits.bias"])
        logits = nn.reshape(logits, (n, g, v))
        if noise is None:
            noise = (nn.gumbel_noise(rng, (n, g, v)) if rng is not None
                     else np.zeros((n, g, v), dtype=np.float32))
        selection = nn.gumbel_softmax(logits, temperature, hard=hard, noise=noise)
        soft = nn.gumbel_softmax(logits, temperature, hard=False, noise=noise)
        code_ids = soft.data.argmax(axis=-1)

        codebooks = nn.concat(
            [nn.reshape(self.params[f"quantizer.codebook.{gi}"], (1, v, e)) for gi in range(g)],
            axis=0)  # [g, v, e]
        picked = nn.matmul(nn.transpose(selection, (1, 0, 2)), codebooks)  # [g, n, e]
        concat = nn.reshape(nn.transpose(picked, (1, 0, 2)), (n, g * e))
        vectors = nn.add(nn.matmul(concat, self.params["quantizer.out.weight"]),
                         self.params["quantizer.out.bias"])
        return QuantizedTargets(vectors=vectors, code_probs=soft, code_ids=code_ids)


def diversity_loss(code_probs: nn.Tensor) -> nn.Tensor:
    """Penalty for uneven codebook usage over a batch of frames.

    For batch-averaged per-group distributions p_g this is
    (G*V - sum_g exp(H(p_g))) / (G*V), zero iff every average is uniform.
    """
    if code_probs.shape[0] < 1:
        raise ValueError("diversity loss needs at least one frame")
    _, g, v = code_probs.shape
    avg = nn.tmean(code_probs, axis=0)  # [g, v]
    neg_entropy = nn.tsum(nn.mul(avg, nn.log(avg + 1e-12)), axis=-1)
    usage = nn.tsum(nn.exp(-neg_entropy))
    gv = float(g * v)
    return (-usage + gv) * (1.0 / gv)

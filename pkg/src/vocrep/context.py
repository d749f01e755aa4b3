"""Span masking and the transformer over latent frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .encoder import InputTooShortError


@dataclass(frozen=True)
class ContextConfig:
    num_blocks: int = 12
    model_dim: int = 768
    inner_dim: int = 3072
    num_heads: int = 8
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    dropout: float = 0.1
    layerdrop: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model dim {self.model_dim} not divisible by "
                             f"{self.num_heads} heads")
        if self.model_dim % self.pos_conv_groups:
            raise ValueError("positional conv groups must divide model dim")

    def to_dict(self) -> dict:
        return {"num_blocks": self.num_blocks, "model_dim": self.model_dim,
                "inner_dim": self.inner_dim, "num_heads": self.num_heads,
                "pos_conv_kernel": self.pos_conv_kernel,
                "pos_conv_groups": self.pos_conv_groups,
                "dropout": self.dropout, "layerdrop": self.layerdrop}

    @classmethod
    def from_dict(cls, d: dict) -> "ContextConfig":
        return cls(**d)


@dataclass
class MaskSpec:
    mask: np.ndarray  # bool per frame
    mask_prob: float
    span_len: int

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def sample_mask(num_frames: int, mask_prob: float, span_len: int,
                rng: np.random.Generator) -> MaskSpec:
    """Sample overlapping masked spans.

    Every frame starts a span of `span_len` frames with probability
    `mask_prob`; if nothing fires, one span is forced so the objective
    always has targets.
    """
    if num_frames < span_len:
        raise InputTooShortError(f"{num_frames} frames < span length {span_len}")
    starts = rng.random(num_frames) < mask_prob
    if not starts.any():
        starts[int(rng.integers(0, num_frames - span_len + 1))] = True
    mask = np.zeros(num_frames, dtype=bool)
    for s in np.flatnonzero(starts):
        mask[s:s + span_len] = True
    return MaskSpec(mask=mask, mask_prob=mask_prob, span_len=span_len)


def apply_mask(projected: nn.Tensor, spec: MaskSpec, mask_embedding: nn.Tensor) -> nn.Tensor:
    """Replace masked rows with the learned mask embedding."""
    m = spec.mask.astype(projected.dtype)[:, None]
    keep = nn.mul(projected, nn.Tensor(1.0 - m))
    fill = nn.mul(nn.reshape(mask_embedding, (1, mask_embedding.shape[0])), nn.Tensor(m))
    return nn.add(keep, fill)


class ContextNetwork:
    """Convolutional positional embedding plus pre-norm transformer blocks."""

    def __init__(self, cfg: ContextConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.params: dict[str, nn.Tensor] = {}

        def linear(name, n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            self.params[f"{name}.weight"] = nn.Tensor(
                rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32),
                requires_grad=True)
            self.params[f"{name}.bias"] = nn.Tensor(
                np.zeros(n_out, dtype=np.float32), requires_grad=True)

        def norm(name, dim):
            self.params[f"{name}.gain"] = nn.Tensor(
                np.ones(dim, dtype=np.float32), requires_grad=True)
            self.params[f"{name}.bias"] = nn.Tensor(
                np.zeros(dim, dtype=np.float32), requires_grad=True)

        k = cfg.pos_conv_kernel
        fan_in = (d // cfg.pos_conv_groups) * k
        bound = 1.0 / np.sqrt(fan_in)
        self.params["context.pos_conv.weight"] = nn.Tensor(
            rng.uniform(-bound, bound, size=(d, d // cfg.pos_conv_groups, k)).astype(np.float32),
            requires_grad=True)
        self.params["context.pos_conv.bias"] = nn.Tensor(
            np.zeros(d, dtype=np.float32), requires_grad=True)
        for i in range(cfg.num_blocks):
            base = f"context.block.{i}"
            norm(f"{base}.norm1", d)
            linear(f"{base}.attn.q", d, d)
            linear(f"{base}.attn.k", d, d)
            linear(f"{base}.attn.v", d, d)
            linear(f"{base}.attn.out", d, d)
            norm(f"{base}.norm2", d)
            linear(f"{base}.ffn.w1", d, cfg.inner_dim)
            linear(f"{base}.ffn.w2", cfg.inner_dim, d)
        norm("context.final_norm", d)
        self.params["context.mask_emb"] = nn.Tensor(
            rng.uniform(-0.1, 0.1, size=d).astype(np.float32), requires_grad=True)

    def named_params(self) -> dict[str, nn.Tensor]:
        return dict(self.params)

    @property
    def mask_embedding(self) -> nn.Tensor:
        return self.params["context.mask_emb"]

    def _attention_params(self, i: int) -> nn.AttentionParams:
        p = self.params
        base = f"context.block.{i}.attn"
        return nn.AttentionParams(
            p[f"{base}.q.weight"], p[f"{base}.q.bias"],
            p[f"{base}.k.weight"], p[f"{base}.k.bias"],
            p[f"{base}.v.weight"], p[f"{base}.v.bias"],
            p[f"{base}.out.weight"], p[f"{base}.out.bias"])

    def contextualize(self, x: nn.Tensor, train: bool = False,
                      rng: np.random.Generator | None = None) -> nn.Tensor:
        """Map frames [T, model_dim] to contextualized frames of equal shape."""
        cfg = self.cfg
        p = self.params
        drop = cfg.dropout if train else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("training-mode dropout needs an rng")

        k = cfg.pos_conv_kernel
        pos = nn.conv1d(nn.transpose(x, (1, 0)), p["context.pos_conv.weight"],
                        p["context.pos_conv.bias"], stride=1,
                        padding=(k // 2, k - 1 - k // 2), groups=cfg.pos_conv_groups)
        x = nn.add(x, nn.gelu(nn.transpose(pos, (1, 0))))

        for i in range(cfg.num_blocks):
            if train and cfg.layerdrop > 0.0 and rng.random() < cfg.layerdrop:
                continue
            base = f"context.block.{i}"
            h = nn.layer_norm(x, p[f"{base}.norm1.gain"], p[f"{base}.norm1.bias"])
            h = nn.multi_head_attention(h, self._attention_params(i), cfg.num_heads)
            if drop > 0.0:
                h = nn.dropout(h, drop, rng)
            x = nn.add(x, h)
            h = nn.layer_norm(x, p[f"{base}.norm2.gain"], p[f"{base}.norm2.bias"])
            h = nn.gelu(nn.add(nn.matmul(h, p[f"{base}.ffn.w1.weight"]), p[f"{base}.ffn.w1.bias"]))
            h = nn.add(nn.matmul(h, p[f"{base}.ffn.w2.weight"]), p[f"{base}.ffn.w2.bias"])
            if drop > 0.0:
                h = nn.dropout(h, drop, rng)
            x = nn.add(x, h)
        return nn.layer_norm(x, p["context.final_norm.gain"], p["context.final_norm.bias"])

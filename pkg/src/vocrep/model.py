"""Full self-supervised model: encoder, projections, quantizer, transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .context import ContextConfig, ContextNetwork, MaskSpec, apply_mask
from .encoder import EncoderConfig, FeatureEncoder
from .quantizer import GumbelQuantizer, QuantizedTargets, QuantizerConfig
from .rng import substream


@dataclass(frozen=True)
class ArchitectureConfig:
    encoder: EncoderConfig
    quantizer: QuantizerConfig
    context: ContextConfig

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(),
                "quantizer": self.quantizer.to_dict(),
                "context": self.context.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(encoder=EncoderConfig.from_dict(d["encoder"]),
                   quantizer=QuantizerConfig.from_dict(d["quantizer"]),
                   context=ContextConfig.from_dict(d["context"]))


class PretrainModel:
    """Waveform -> latents -> (quantized targets, contextual frames)."""

    def __init__(self, arch: ArchitectureConfig, seed: int):
        rng = substream(seed, "init")
        self.arch = arch
        self.encoder = FeatureEncoder(arch.encoder, rng)
        self.quantizer = GumbelQuantizer(arch.encoder.channels, arch.quantizer, rng)
        self.context = ContextNetwork(arch.context, rng)
        d_latent = arch.encoder.channels
        d_model = arch.context.model_dim
        d_out = arch.quantizer.output_dim
        self.extra: dict[str, nn.Tensor] = {}

        def linear(name, n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            self.extra[f"{name}.weight"] = nn.Tensor(
                rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32),
                requires_grad=True)
            self.extra[f"{name}.bias"] = nn.Tensor(
                np.zeros(n_out, dtype=np.float32), requires_grad=True)

        linear("feature_proj", d_latent, d_model)
        linear("final_proj", d_model, d_out)

    def named_params(self) -> dict[str, nn.Tensor]:
        params = {}
        params.update(self.encoder.named_params())
        params.update(self.quantizer.named_params())
        params.update(self.context.named_params())
        params.update(self.extra)
        return params

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_params().items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_params()
        for name, arr in arrays.items():
            params[name].data = np.array(arr, dtype=np.float32)

    def latents(self, samples) -> nn.Tensor:
        return self.encoder.forward(samples)

    def project_latents(self, latents: nn.Tensor) -> nn.Tensor:
        return nn.add(nn.matmul(latents, self.extra["feature_proj.weight"]),
                      self.extra["feature_proj.bias"])

    def contextual_targets(self, context_out: nn.Tensor) -> nn.Tensor:
        return nn.add(nn.matmul(context_out, self.extra["final_proj.weight"]),
                      self.extra["final_proj.bias"])

    def forward_pretrain(self, samples, spec: MaskSpec, temperature: float,
                         gumbel_rng: np.random.Generator | None = None,
                         train: bool = True,
                         dropout_rng: np.random.Generator | None = None,
                         ) -> tuple[nn.Tensor, QuantizedTargets]:
        """Masked forward pass; returns (projected context frames, targets)."""
        z = self.latents(samples)
        targets = self.quantizer.quantize(z, temperature, rng=gumbel_rng)
        x = apply_mask(self.project_latents(z), spec, self.context.mask_embedding)
        c = self.context.contextualize(x, train=train, rng=dropout_rng)
        return self.contextual_targets(c), targets

    def embed(self, samples) -> nn.Tensor:
        """Unmasked contextual frames for downstream use."""
        z = self.latents(samples)
        x = self.project_latents(z)
        return self.context.contextualize(x, train=False)

"""Strided convolutional encoder from raw waveform to latent frame vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .audio_io import RawWaveform, TARGET_RATE


class InputTooShortError(ValueError):
    """Waveform shorter than the encoder's receptive field."""


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 512
    strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    kernels: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    channel_norm: bool = True

    def __post_init__(self):
        if len(self.strides) != len(self.kernels):
            raise ValueError("strides and kernels must have equal length")
        if self.channels < 1 or any(s < 1 for s in self.strides) or any(k < 1 for k in self.kernels):
            raise ValueError("channels, strides and kernels must be positive")

    def to_dict(self) -> dict:
        return {"channels": self.channels, "strides": list(self.strides),
                "kernels": list(self.kernels), "channel_norm": self.channel_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(channels=d["channels"], strides=tuple(d["strides"]),
                   kernels=tuple(d["kernels"]), channel_norm=d["channel_norm"])


@dataclass
class LatentFrames:
    frames: nn.Tensor  # [num_frames, channels]
    frame_stride_s: float
    receptive_field_s: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def receptive_field(cfg: EncoderConfig) -> tuple[int, int]:
    """(receptive field, stride) of one output frame, in input samples."""
    rf = 1
    stride = 1
    for k, s in zip(cfg.kernels, cfg.strides):
        rf += (k - 1) * stride
        stride *= s
    return rf, stride


def output_length(cfg: EncoderConfig, input_length: int) -> int:
    """Frame count produced for an input of `input_length` samples."""
    length = input_length
    for k, s in zip(cfg.kernels, cfg.strides):
        if length < k:
            return 0
        length = (length - k) // s + 1
    return length


class FeatureEncoder:
    """Stack of {conv -> layer norm over channels -> GELU} blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, nn.Tensor] = {}
        c_in = 1
        for i, (k, s) in enumerate(zip(cfg.kernels, cfg.strides)):
            fan_in = c_in * k
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"encoder.block.{i}.conv.weight"] = nn.Tensor(
                rng.uniform(-bound, bound, size=(cfg.channels, c_in, k)).astype(np.float32),
                requires_grad=True)
            self.params[f"encoder.block.{i}.conv.bias"] = nn.Tensor(
                np.zeros(cfg.channels, dtype=np.float32), requires_grad=True)
            if cfg.channel_norm:
                self.params[f"encoder.block.{i}.norm.gain"] = nn.Tensor(
                    np.ones(cfg.channels, dtype=np.float32), requires_grad=True)
                self.params[f"encoder.block.{i}.norm.bias"] = nn.Tensor(
                    np.zeros(cfg.channels, dtype=np.float32), requires_grad=True)
            c_in = cfg.channels

    def named_params(self) -> dict[str, nn.Tensor]:
        return dict(self.params)

    def forward(self, samples) -> nn.Tensor:
        """Encode a 1-D sample array to frames [num_frames, channels]."""
        rf, _ = receptive_field(self.cfg)
        samples = samples if isinstance(samples, nn.Tensor) else nn.Tensor(
            np.asarray(samples, dtype=np.float32))
        if samples.shape[-1] < rf:
            raise InputTooShortError(
                f"{samples.shape[-1]} samples < receptive field {rf}")
        x = nn.reshape(samples, (1, samples.shape[-1]))
        for i, (k, s) in enumerate(zip(self.cfg.kernels, self.cfg.strides)):
            x = nn.conv1d(x, self.params[f"encoder.block.{i}.conv.weight"],
                          self.params[f"encoder.block.{i}.conv.bias"], stride=s)
            x = nn.transpose(x, (1, 0))  # [frames, channels]
            if self.cfg.channel_norm:
                x = nn.layer_norm(x, self.params[f"encoder.block.{i}.norm.gain"],
                                  self.params[f"encoder.block.{i}.norm.bias"])
            x = nn.gelu(x)
            if i < len(self.cfg.kernels) - 1:
                x = nn.transpose(x, (1, 0))  # back to [channels, length]
        return x

    def encode(self, w: RawWaveform) -> LatentFrames:
        rf, stride = receptive_field(self.cfg)
        frames = self.forward(w.samples)
        return LatentFrames(frames, frame_stride_s=stride / TARGET_RATE,
                            receptive_field_s=rf / TARGET_RATE)


def encode(w: RawWaveform, enc: FeatureEncoder) -> LatentFrames:
    return enc.encode(w)

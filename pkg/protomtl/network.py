"""Shared encoder, per-task decoders and per-task prediction heads.

Feature maps cross module boundaries channel-last, ``[B, h, w, c]``, so the
quantizer, the prototype and the retrieval transformer all see ``h * w`` tokens
of width ``c``. Convolutions run channel-first internally.
"""

import math
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ValidationError
from .models import TaskSpec


def to_channels_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def to_channels_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


class ConvBlock(nn.Sequential):
    """3x3 convolution, batch normalization, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    """Desk-scale backbone: a stride-1 stem and log2(s) stride-2 blocks.

    Parameters
    ----------
    channels : int = 32
        Output channels c
    downsample : int = 4
        Total stride s, a power of two
    in_channels : int = 3
        Image channels
    """

    def __init__(self, channels: int = 32, downsample: int = 4, in_channels: int = 3):
        super().__init__()
        if downsample < 1 or downsample & (downsample - 1):
            raise ValidationError(f"downsample must be a power of two, got {downsample}")
        self.channels = channels
        self.downsample = downsample
        self.in_channels = in_channels
        blocks = [ConvBlock(in_channels, channels)]
        blocks += [
            ConvBlock(channels, channels, stride=2)
            for _ in range(int(math.log2(downsample)))
        ]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Encode ``[B, 3, H, W]`` images into ``[B, H/s, W/s, c]`` features."""
        if image.ndim != 4 or image.shape[1] != self.in_channels:
            raise ValidationError(
                f"Expected images [B, {self.in_channels}, H, W], got {tuple(image.shape)}"
            )
        height, width = image.shape[-2:]
        if height % self.downsample or width % self.downsample:
            raise ValidationError(
                f"Image size {height}x{width} is not divisible by {self.downsample}"
            )
        return to_channels_last(self.blocks(image))


class TaskDecoder(nn.Module):
    """Residual task-specific decoder of two 3x3 convolutions with ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def init_identity(self) -> None:
        """Zero the last convolution so the decoder starts as the identity."""
        last = self.body[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = to_channels_first(features)
        return to_channels_last(x + self.body(x))


class TaskHead(nn.Module):
    """1x1 convolution head, bilinearly upsampled to label resolution.

    Categorical tasks emit class logits; regression tasks emit their label
    channels, L2-normalized per pixel for surface normals.

    Parameters
    ----------
    in_channels : int
        Channels of the refined feature
    task : TaskSpec
        Task the head predicts
    output_size : tuple[int, int]
        Label resolution (H, W)
    """

    def __init__(self, in_channels: int, task: TaskSpec, output_size: Tuple[int, int]):
        super().__init__()
        self.task = task
        self.output_size = tuple(output_size)
        self.normalize = task.name == "normal"
        self.proj = nn.Conv2d(in_channels, task.output_channels, 1)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        """Predictions at feature resolution, ``[B, C_out, h, w]``."""
        if features.ndim != 4 or features.shape[-1] != self.proj.in_channels:
            raise ValidationError(
                f"Expected features [B, h, w, {self.proj.in_channels}], "
                f"got {tuple(features.shape)}"
            )
        return self.proj(to_channels_first(features))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        out = F.interpolate(
            self.logits(features),
            size=self.output_size,
            mode="bilinear",
            align_corners=False,
        )
        if self.normalize:
            out = F.normalize(out, dim=1, eps=1e-8)
        return out

"""Shared neural building blocks.

A residual convolutional frame encoder, plus the gated tanh-sigmoid
recurrence used throughout the generative head (a cheaper stand-in for a
full LSTM step: new_state = tanh(W_a [x, s]) * sigmoid(W_b [x, s])).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError


def frames_to_tensor(frames: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[..., H, W, 3] numpy frames -> [..., 3, H, W] torch tensor."""
    t = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype)
    return t.movedim(-1, -3)


def one_hot_actions(actions: torch.Tensor, num_actions: int) -> torch.Tensor:
    return nn.functional.one_hot(actions.long(), num_actions).to(torch.get_default_dtype())


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = self.conv2(h)
        return torch.relu(x + h)


class FrameEncoder(nn.Module):
    """Residual conv stack with stride-2 downsampling, then a linear map.

    Two residual blocks at channels 16 and 32, each preceded by a stride-2
    convolution, followed by flatten + linear projection to the embedding.
    """

    def __init__(self, frame_size: int = 32, embed_dim: int = 256,
                 channels: tuple[int, int] = (16, 32)):
        super().__init__()
        c1, c2 = channels
        self.frame_size = frame_size
        self.embed_dim = embed_dim
        self.down1 = nn.Conv2d(3, c1, 4, stride=2, padding=1)
        self.block1 = ResidualBlock(c1)
        self.down2 = nn.Conv2d(c1, c2, 4, stride=2, padding=1)
        self.block2 = ResidualBlock(c2)
        spatial = frame_size // 4
        self.proj = nn.Linear(c2 * spatial * spatial, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.frame_size, self.frame_size):
            raise InvalidInputError(
                f"expected [B, 3, {self.frame_size}, {self.frame_size}] frames, got {tuple(x.shape)}"
            )
        h = torch.relu(self.down1(x))
        h = self.block1(h)
        h = torch.relu(self.down2(h))
        h = self.block2(h)
        return self.proj(h.flatten(1))


class GatedDenseCell(nn.Module):
    """Flat gated update: tanh(W_a [x, s]) * sigmoid(W_b [x, s]); output in (-1, 1)."""

    def __init__(self, input_dim: int, state_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.state_dim = state_dim
        self.lin = nn.Linear(input_dim + state_dim, 2 * state_dim)

    def forward(self, x: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim or state.shape[-1] != self.state_dim:
            raise InvalidInputError(
                f"expected input [..., {self.input_dim}] and state [..., {self.state_dim}], "
                f"got {tuple(x.shape)} and {tuple(state.shape)}"
            )
        a, b = self.lin(torch.cat([x, state], dim=-1)).chunk(2, dim=-1)
        return torch.tanh(a) * torch.sigmoid(b)


class GatedConvCell(nn.Module):
    """Convolutional gated update over a spatial state.

    The input may live on a 2x larger grid, in which case its contribution
    is a stride-2 4x4 convolution; same-grid convolutions use 5x5 kernels.
    """

    def __init__(self, in_channels: int, state_channels: int, input_stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.state_channels = state_channels
        if input_stride == 1:
            self.conv_in = nn.Conv2d(in_channels, 2 * state_channels, 5, padding=2)
        elif input_stride == 2:
            self.conv_in = nn.Conv2d(in_channels, 2 * state_channels, 4, stride=2, padding=1)
        else:
            raise InvalidInputError("input_stride must be 1 or 2")
        self.conv_state = nn.Conv2d(state_channels, 2 * state_channels, 5, padding=2)

    def forward(self, x: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels or state.shape[1] != self.state_channels:
            raise InvalidInputError(
                f"expected input channels {self.in_channels} and state channels "
                f"{self.state_channels}, got {tuple(x.shape)} and {tuple(state.shape)}"
            )
        pre = self.conv_in(x) + self.conv_state(state)
        a, b = pre.chunk(2, dim=1)
        return torch.tanh(a) * torch.sigmoid(b)

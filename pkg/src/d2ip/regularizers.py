"""Spatio-temporal total-variation regularization.

The spatial term averages, over all voxels, the isotropic magnitude of the
forward differences along the three axes (replicate padding: the difference
at the last index of an axis is zero):

    R_spatial(v) = (1/Q) * sum_{r,c,p} sqrt(d_r^2 + d_c^2 + d_p^2 + eps)

The temporal term compares the current volume against every previously
reconstructed frame, weighted by the exponential decay exp(-(i - j)) and
normalized by the weight sum; its inner voxel sum is deliberately not
divided by Q:

    R_temporal(hist, v) = (1/sum_j a_j) * sum_j a_j * sum_{r,c,p}
                          sqrt((v - hist_j)^2 + eps)

Both accept numpy arrays (returning floats) or torch tensors (returning
0-dim tensors that participate in autograd).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch


@dataclass(frozen=True)
class TVWeights:
    lambda_tv: float = 0.002
    lambda_s: float = 1.0
    lambda_t: float = 0.1
    epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_tv, self.lambda_s, self.lambda_t) < 0:
            raise ValueError("TV weights must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be strictly positive")


class FrameHistory:
    """Previously reconstructed volumes of one sequence run, oldest first."""

    def __init__(self, frames: Iterable = ()):
        self._frames = [self._check(f) for f in frames]

    @staticmethod
    def _check(frame):
        if frame.ndim != 3:
            raise ValueError(f"history frames must be 3D volumes, got shape {frame.shape}")
        return frame

    def append(self, frame) -> None:
        if self._frames and tuple(frame.shape) != tuple(self._frames[0].shape):
            raise ValueError("history frames must share one grid shape")
        self._frames.append(self._check(frame))

    @property
    def frames(self) -> list:
        return list(self._frames)

    def __len__(self) -> int:
        return len(self._frames)

    def __iter__(self):
        return iter(self._frames)


def _as_tensor(volume) -> tuple[torch.Tensor, bool]:
    if isinstance(volume, torch.Tensor):
        return volume, False
    return torch.as_tensor(np.asarray(volume, dtype=np.float64)), True


def _forward_diff(t: torch.Tensor, dim: int) -> torch.Tensor:
    n = t.shape[dim]
    d = t.narrow(dim, 1, n - 1) - t.narrow(dim, 0, n - 1)
    zero = torch.zeros_like(t.narrow(dim, 0, 1))
    return torch.cat([d, zero], dim=dim)


def spatial_tv(volume, epsilon: float = 1e-8):
    """Isotropic spatial total variation of one (R, C, P) volume."""
    t, from_numpy = _as_tensor(volume)
    if t.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {tuple(t.shape)}")
    dr = _forward_diff(t, 0)
    dc = _forward_diff(t, 1)
    dp = _forward_diff(t, 2)
    value = torch.sqrt(dr * dr + dc * dc + dp * dp + epsilon).mean()
    return float(value) if from_numpy else value


def decay_weight(j: int, i: int) -> float:
    """Influence of past frame j on frame i: exp(-(i - j))."""
    if not 1 <= j < i:
        raise ValueError(f"need 1 <= j < i, got j={j}, i={i}")
    return math.exp(-(i - j))


def temporal_tv(history, current, epsilon: float = 1e-8):
    """Decay-weighted temporal variation of ``current`` against the history.

    History frame k (0-based position) is treated as reconstructed frame
    j = k + 1 and ``current`` as frame i = len(history) + 1. Returns 0 for
    an empty history.
    """
    frames = list(history)
    t, from_numpy = _as_tensor(current)
    if t.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {tuple(t.shape)}")
    if not frames:
        return 0.0 if from_numpy else torch.zeros((), dtype=t.dtype, device=t.device)
    i = len(frames) + 1
    total = torch.zeros((), dtype=t.dtype, device=t.device)
    weight_sum = 0.0
    for k, frame in enumerate(frames):
        past, _ = _as_tensor(frame)
        past = past.to(dtype=t.dtype, device=t.device)
        if past.shape != t.shape:
            raise ValueError("history frame shape does not match the current volume")
        alpha = decay_weight(k + 1, i)
        diff = t - past
        total = total + alpha * torch.sqrt(diff * diff + epsilon).sum()
        weight_sum += alpha
    value = total / weight_sum
    return float(value) if from_numpy else value


def tv4d(history, current, weights: TVWeights):
    """Weighted sum of the spatial and temporal terms."""
    t, from_numpy = _as_tensor(current)
    value = weights.lambda_s * spatial_tv(t, weights.epsilon) + weights.lambda_t * temporal_tv(
        history, t, weights.epsilon
    )
    return float(value) if from_numpy else value

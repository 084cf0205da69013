"""Classical single-frame reconstructions: Tikhonov and spatial TV.

Tikhonov solves the zeroth-order regularized normal equations
(J'J + mu*I) x = J' dv exactly; when the system is underdetermined the
algebraically identical dual form x = J'(JJ' + mu*I)^-1 dv is factorized
instead, which is much cheaper for M << Q.

The TV baseline minimizes ||Jx - dv||_2 + lambda * R_spatial(x) by plain
gradient descent with a fixed step, reusing the exact spatial regularizer
(including its epsilon) of the sequence pipeline, so the two differ only by
the temporal term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch

from .errors import NumericalError
from .forward import SensitivityMatrix
from .geometry import GridGeometry
from .regularizers import spatial_tv


@dataclass(frozen=True)
class TikhonovConfig:
    mu: float = 0.005

    def __post_init__(self):
        if not 1e-6 <= self.mu <= 1e2:
            raise ValueError(f"mu={self.mu} outside the guard range [1e-6, 1e2]")


def tikhonov(matrix: SensitivityMatrix, dv: np.ndarray, cfg: TikhonovConfig) -> np.ndarray:
    """Minimizer of ||Jx - dv||^2 + mu ||x||^2."""
    j = matrix.values
    vec = np.asarray(dv, dtype=np.float64)
    if vec.shape != (matrix.n_measurements,):
        raise ValueError(
            f"measurement vector shape {vec.shape} does not match M={matrix.n_measurements}"
        )
    m, q = j.shape
    if m < q:
        gram = j @ j.T
        gram[np.diag_indices_from(gram)] += cfg.mu
        x = j.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), vec)
    else:
        gram = j.T @ j
        gram[np.diag_indices_from(gram)] += cfg.mu
        x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), j.T @ vec)
    if not np.all(np.isfinite(x)):
        raise NumericalError("Tikhonov solve produced non-finite values")
    return x


@dataclass(frozen=True)
class TVConfig:
    lambda_tv: float = 0.002
    iterations: int = 800
    step_size: float = 2e-3
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


def tv_reconstruct(
    matrix: SensitivityMatrix,
    dv: np.ndarray,
    cfg: TVConfig,
    grid: GridGeometry,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Fixed-budget gradient descent on the TV-regularized objective.

    Returns the final iterate (length Q) and the per-iteration loss trace.
    """
    j = torch.tensor(matrix.values)
    vec = np.asarray(dv, dtype=np.float64)
    if vec.shape != (matrix.n_measurements,):
        raise ValueError(
            f"measurement vector shape {vec.shape} does not match M={matrix.n_measurements}"
        )
    if matrix.n_voxels != grid.voxel_count:
        raise ValueError("operator voxel count does not match the grid")
    dv_t = torch.as_tensor(vec)
    rows, cols, planes = grid.shape
    x = torch.zeros(matrix.n_voxels, dtype=torch.float64)
    if x0 is not None:
        x = torch.as_tensor(np.asarray(x0, dtype=np.float64)).clone()
    x.requires_grad_(True)

    trace: list[float] = []
    for k in range(1, cfg.iterations + 1):
        residual = dv_t - j @ x
        sq = (residual * residual).sum()
        data = sq if sq.item() == 0.0 else torch.sqrt(sq)
        volume = x.reshape(planes, rows, cols).permute(1, 2, 0)
        loss = data + cfg.lambda_tv * spatial_tv(volume, cfg.epsilon)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite TV loss at iteration {k}")
        trace.append(float(loss.detach()))
        grad = torch.autograd.grad(loss, x)[0]
        with torch.no_grad():
            x -= cfg.step_size * grad
    return x.detach().numpy(), trace

"""Reconstruction quality metrics: CC, PSNR, MSSIM, ERR.

Conventions applied uniformly to every method under comparison:

* CC is the Pearson correlation of the flattened volumes.
* PSNR is 10*log10(peak^2 / MSE), capped at 100 dB once the MSE drops below
  peak^2 * 1e-10; the default peak is the ground-truth dynamic range.
* MSSIM averages the single-scale structural-similarity index over axial
  slices, using an 11x11 Gaussian window (sigma 1.5), stability constants
  K1=0.01 / K2=0.03, and the dynamic range taken from the joint min/max of
  both volumes (which makes the metric symmetric in its arguments).
* ERR is the relative l2 error ||x - ref|| / ||ref|| (lower is better).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import UndefinedMetricError
from .geometry import GridGeometry, devectorize
from .phantom import ConductivitySequence

PSNR_CAP = 100.0
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 5.0 / _SSIM_SIGMA  # 11-tap kernel
_SSIM_WINDOW = 11


def cc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation coefficient of two equally sized volumes."""
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation is undefined for a constant input")
    return float(da @ db / (na * nb))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float) -> float:
    """Peak signal-to-noise ratio in dB against a reference."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(ref, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < peak**2 * 1e-10:
        return PSNR_CAP
    return float(10 * np.log10(peak**2 / mse))


def err(x: np.ndarray, ref: np.ndarray) -> float:
    """Relative l2 error ||x - ref|| / ||ref||."""
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(ref, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    nb = np.linalg.norm(b)
    if nb == 0:
        raise UndefinedMetricError("relative error is undefined for a zero reference")
    return float(np.linalg.norm(a - b) / nb)


def _ssim_slice(a: np.ndarray, b: np.ndarray, drange: float) -> float:
    smooth = lambda im: gaussian_filter(im, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE)
    mu_a, mu_b = smooth(a), smooth(b)
    var_a = smooth(a * a) - mu_a**2
    var_b = smooth(b * b) - mu_b**2
    cov = smooth(a * b) - mu_a * mu_b
    c1 = (0.01 * drange) ** 2
    c2 = (0.03 * drange) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Mean structural similarity over axial (fixed-plane) slices."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"expected equal 3D shapes, got {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise ValueError(
            f"in-plane dimensions {a.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    joint_min = min(a.min(), b.min())
    joint_max = max(a.max(), b.max())
    drange = joint_max - joint_min
    if drange == 0:
        return 1.0  # both volumes are the same constant
    return float(np.mean([_ssim_slice(a[:, :, p], b[:, :, p], drange) for p in range(a.shape[2])]))


@dataclass
class MetricsReport:
    """Per-frame metric table plus sequence means."""

    per_frame: list[dict]
    means: dict

    COLUMNS = ("frame", "cc", "psnr", "mssim", "err")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in self.per_frame:
                writer.writerow([row["frame"]] + [repr(row[k]) for k in self.COLUMNS[1:]])
            writer.writerow(["mean"] + [repr(self.means[k]) for k in self.COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        per_frame, means = [], {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                values = {k: float(row[k]) for k in cls.COLUMNS[1:]}
                if row["frame"] == "mean":
                    means = values
                else:
                    per_frame.append({"frame": int(row["frame"]), **values})
        return cls(per_frame, means)


def evaluate_sequence(
    recon: ConductivitySequence,
    truth: ConductivitySequence,
    grid: GridGeometry,
    peak: float | None = None,
) -> MetricsReport:
    """Frame-by-frame metrics of a reconstruction against ground truth."""
    if recon.n_frames != truth.n_frames:
        raise ValueError(
            f"frame count mismatch: recon {recon.n_frames} vs truth {truth.n_frames}"
        )
    if recon.n_voxels != truth.n_voxels or recon.n_voxels != grid.voxel_count:
        raise ValueError("voxel count mismatch between sequences and grid")
    if peak is None:
        peak = float(truth.values.max() - truth.values.min())
        if peak <= 0:
            raise ValueError("ground truth has no dynamic range; pass peak explicitly")
    per_frame = []
    for i in range(1, recon.n_frames + 1):
        xv, tv = recon.frame(i), truth.frame(i)
        per_frame.append(
            {
                "frame": i,
                "cc": cc(xv, tv),
                "psnr": psnr(xv, tv, peak),
                "mssim": mssim(devectorize(xv, grid), devectorize(tv, grid)),
                "err": err(xv, tv),
            }
        )
    means = {
        k: float(np.mean([row[k] for row in per_frame])) for k in MetricsReport.COLUMNS[1:]
    }
    return MetricsReport(per_frame, means)

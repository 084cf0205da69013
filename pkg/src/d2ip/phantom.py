"""Dynamic thoracic phantoms and synthetic measurement generation.

Two scenarios are provided:

* healthy_cycle: both lungs expand over a single inhalation while their
  conductivity drops 0.20 -> 0.105 S/m against a fixed 0.24 S/m background.
  Frames store the change against the empty background.
* edema_cycle: lungs follow a 0.14 -> 0.0835 S/m program, but a fixed
  body region covering the lower portion of the left lung stays at the
  background value 0.24 S/m (fluid-saturated tissue does not aerate, so
  neither its conductivity nor the lung's expansion into it is visible).
  Frames store differences against frame 1, so a T-frame breathing cycle
  yields T-1 differential frames.

Lungs are ellipsoids whose semi-axes scale isotropically about a fixed
center between an end-exhale and an end-inhale shape; the expansion phase
follows the monotone half-cosine s(i) = (1 - cos(pi*(i-1)/(T-1)))/2, i.e.
sinusoidal volume dynamics over one inhalation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import cos, pi

import numpy as np

from .errors import FormatError
from .forward import (
    SensitivityMatrix,
    VoltageFrame,
    VoltageSequence,
    _read_payload,
    _sidecar_path,
    _write_payload,
    add_noise,
    forward_project,
)
from .geometry import GridGeometry, vectorize

CASES = ("healthy_cycle", "edema_cycle")


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes}")

    def scaled(self, factor: float) -> "Ellipsoid":
        return Ellipsoid(self.center, tuple(a * factor for a in self.semi_axes))

    def lerp(self, other: "Ellipsoid", s: float) -> "Ellipsoid":
        """Interpolate semi-axes toward ``other`` (isotropic when shapes are scaled copies)."""
        c = tuple((1 - s) * a + s * b for a, b in zip(self.center, other.center))
        ax = tuple((1 - s) * a + s * b for a, b in zip(self.semi_axes, other.semi_axes))
        return Ellipsoid(c, ax)

    def mask(self, grid: GridGeometry) -> np.ndarray:
        """(R, C, P) boolean mask of voxel centers inside the ellipsoid."""
        ys, xs, zs = grid.axis_centers()
        cx, cy, cz = self.center
        ax, ay, az = self.semi_axes
        u = ((xs[None, :, None] - cx) / ax) ** 2
        v = ((ys[:, None, None] - cy) / ay) ** 2
        w = ((zs[None, None, :] - cz) / az) ** 2
        return u + v + w <= 1.0

    def fits_in(self, grid: GridGeometry) -> bool:
        bounds = (grid.extent.x, grid.extent.y, grid.extent.z)
        return all(
            lo <= c - a and c + a <= hi
            for (lo, hi), c, a in zip(bounds, self.center, self.semi_axes)
        )


@dataclass(frozen=True)
class LungPhantomSpec:
    """Conductivity program and lung geometry for one breathing scenario."""

    case: str
    frames: int
    background_s: float
    lung_start_s: float
    lung_end_s: float
    edema_s: float | None
    # ((left, right) at end-exhale, (left, right) at end-inhale)
    lung_shapes: tuple[tuple[Ellipsoid, Ellipsoid], tuple[Ellipsoid, Ellipsoid]]
    edema_shape: Ellipsoid | None = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}, expected one of {CASES}")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        conductivities = [self.background_s, self.lung_start_s, self.lung_end_s]
        if self.edema_s is not None:
            conductivities.append(self.edema_s)
        if min(conductivities) <= 0:
            raise ValueError("conductivities must be strictly positive")
        if self.case == "edema_cycle" and (self.edema_s is None or self.edema_shape is None):
            raise ValueError("edema_cycle requires edema_s and edema_shape")

    def conductivity_doc(self) -> dict:
        return {
            "background_s": self.background_s,
            "lung_start_s": self.lung_start_s,
            "lung_end_s": self.lung_end_s,
            "edema_s": self.edema_s,
        }


def _default_lung_shapes(grid: GridGeometry, inhale_scale: float = 1.25):
    cx, cy, cz = grid.extent.center
    sx, sy, sz = grid.extent.spans
    a, b = sx / 2, sy / 2
    exhale_axes = (0.30 * a, 0.55 * b, 0.35 * sz)
    left = Ellipsoid((cx - 0.45 * a, cy, cz), exhale_axes)
    right = Ellipsoid((cx + 0.45 * a, cy, cz), exhale_axes)
    return ((left, right), (left.scaled(inhale_scale), right.scaled(inhale_scale)))


def _default_edema_shape(grid: GridGeometry) -> Ellipsoid:
    # Lower portion of the left lung. The mask is this ellipsoid clipped to
    # the end-inhale lung, so sizing it like the full lung shifted downward
    # selects roughly the lung's lower half.
    _, (left_inhale, _) = _default_lung_shapes(grid)
    cx, cy, cz = left_inhale.center
    az = left_inhale.semi_axes[2]
    return Ellipsoid((cx, cy, cz - 0.5 * az), left_inhale.semi_axes)


def healthy_spec(grid: GridGeometry, frames: int = 20) -> LungPhantomSpec:
    return LungPhantomSpec(
        case="healthy_cycle",
        frames=frames,
        background_s=0.24,
        lung_start_s=0.20,
        lung_end_s=0.105,
        edema_s=None,
        lung_shapes=_default_lung_shapes(grid),
    )


def edema_spec(grid: GridGeometry, frames: int = 20) -> LungPhantomSpec:
    return LungPhantomSpec(
        case="edema_cycle",
        frames=frames,
        background_s=0.24,
        lung_start_s=0.14,
        lung_end_s=0.0835,
        edema_s=0.24,
        lung_shapes=_default_lung_shapes(grid),
        edema_shape=_default_edema_shape(grid),
    )


def breathing_phase(i: int, frames: int) -> float:
    """Monotone 0 -> 1 expansion phase for frame i in 1..frames."""
    if not 1 <= i <= frames:
        raise ValueError(f"frame index {i} outside 1..{frames}")
    return (1 - cos(pi * (i - 1) / (frames - 1))) / 2


def lung_shapes_at(spec: LungPhantomSpec, s: float) -> tuple[Ellipsoid, Ellipsoid]:
    (left_ex, right_ex), (left_in, right_in) = spec.lung_shapes
    return left_ex.lerp(left_in, s), right_ex.lerp(right_in, s)


def edema_mask(grid: GridGeometry, spec: LungPhantomSpec) -> np.ndarray:
    """Static edema mask: the edema ellipsoid clipped to the end-inhale left
    lung. The region is a fixed part of the body; it never produces a
    differential signal, even where the lung expands into it."""
    if spec.edema_shape is None:
        raise ValueError("phantom spec has no edema region")
    _, (left_inhale, _) = spec.lung_shapes
    return spec.edema_shape.mask(grid) & left_inhale.mask(grid)


def absolute_volume(grid: GridGeometry, spec: LungPhantomSpec, s: float) -> np.ndarray:
    """(R, C, P) absolute conductivity at expansion phase s in [0, 1]."""
    left, right = lung_shapes_at(spec, s)
    lung_value = spec.lung_start_s + s * (spec.lung_end_s - spec.lung_start_s)
    vol = np.full(grid.shape, spec.background_s, dtype=np.float64)
    vol[left.mask(grid)] = lung_value
    vol[right.mask(grid)] = lung_value
    if spec.case == "edema_cycle":
        # static region painted last: constant at every phase, so it never
        # contributes to the differential frames
        vol[edema_mask(grid, spec)] = spec.edema_s
    return vol


def _check_shapes_fit(grid: GridGeometry, spec: LungPhantomSpec) -> None:
    for lung in lung_shapes_at(spec, 1.0):
        if not lung.fits_in(grid):
            raise ValueError(
                f"lung ellipsoid {lung} exceeds the grid extent at full inhalation"
            )


@dataclass
class ConductivitySequence:
    """Q x T matrix of per-frame conductivity changes in canonical voxel order."""

    values: np.ndarray
    grid_ref: str
    is_ground_truth: bool
    reference_mode: str
    case: str | None = None
    conductivities: dict | None = None
    method: str | None = None

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"sequence values must be (Q, T), got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sequence contains non-finite entries")
        self.values = vals

    @property
    def n_voxels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def frame(self, i: int) -> np.ndarray:
        """Frame i (1-based) as a length-Q vector."""
        return self.values[:, i - 1]


def make_case1(grid: GridGeometry, frames: int = 20, spec: LungPhantomSpec | None = None) -> ConductivitySequence:
    """Healthy breathing: T frames of change against the empty background."""
    spec = spec or healthy_spec(grid, frames)
    _check_shapes_fit(grid, spec)
    cols = []
    for i in range(1, spec.frames + 1):
        s = breathing_phase(i, spec.frames)
        cols.append(vectorize(absolute_volume(grid, spec, s) - spec.background_s))
    return ConductivitySequence(
        values=np.stack(cols, axis=1),
        grid_ref=grid.ref_id,
        is_ground_truth=True,
        reference_mode="empty_background",
        case=spec.case,
        conductivities=spec.conductivity_doc(),
    )


def make_case2(grid: GridGeometry, frames: int = 20, spec: LungPhantomSpec | None = None) -> ConductivitySequence:
    """Unilateral edema: T-1 differential frames against frame 1."""
    spec = spec or edema_spec(grid, frames)
    _check_shapes_fit(grid, spec)
    absolutes = [
        vectorize(absolute_volume(grid, spec, breathing_phase(i, spec.frames)))
        for i in range(1, spec.frames + 1)
    ]
    diffs = [absolutes[j] - absolutes[0] for j in range(1, spec.frames)]
    return ConductivitySequence(
        values=np.stack(diffs, axis=1),
        grid_ref=grid.ref_id,
        is_ground_truth=True,
        reference_mode="first_frame",
        case=spec.case,
        conductivities=spec.conductivity_doc(),
    )


def case_masks(grid: GridGeometry, spec: LungPhantomSpec) -> dict[str, np.ndarray]:
    """Named boolean masks (length-Q vectors) for region-wise analysis.

    ``healthy`` is the end-exhale right lung: voxels that carry the full
    ventilation signal in every frame of either scenario. ``left_lung`` is
    the maximal (end-inhale) left lung, so the edema mask is a subset.
    """
    (_, right_ex), (left_in, _) = spec.lung_shapes
    masks = {
        "left_lung": vectorize(left_in.mask(grid)),
        "healthy": vectorize(right_ex.mask(grid)),
    }
    if spec.edema_shape is not None:
        masks["edema"] = vectorize(edema_mask(grid, spec))
    return masks


def synthesize_measurements(
    seq: ConductivitySequence,
    matrix: SensitivityMatrix,
    snr_db: float | None = None,
    seed: int = 0,
) -> VoltageSequence:
    """Project a conductivity sequence through the linear operator, frame by
    frame, adding measurement noise with per-frame seeds (seed + i)."""
    if seq.grid_ref != matrix.grid_ref:
        raise ValueError(
            f"sequence grid {seq.grid_ref} does not match operator grid {matrix.grid_ref}"
        )
    if seq.n_voxels != matrix.n_voxels:
        raise ValueError("sequence and operator voxel counts differ")
    frames = []
    for i in range(1, seq.n_frames + 1):
        clean = VoltageFrame(forward_project(matrix, seq.frame(i)), i)
        frames.append(add_noise(clean, snr_db, seed + i))
    return VoltageSequence(
        frames=frames,
        reference_mode=seq.reference_mode,
        snr_db=None if snr_db is not None and np.isinf(snr_db) else snr_db,
        seed=seed,
        protocol_ref=matrix.protocol_ref,
    )


def save_sequence(seq: ConductivitySequence, path) -> None:
    """Persist a conductivity sequence (frame-major float64 + sidecar)."""
    _write_payload(path, seq.values.T)
    doc = {
        "Q": seq.n_voxels,
        "T": seq.n_frames,
        "grid_ref": seq.grid_ref,
        "reference_mode": seq.reference_mode,
        "case": seq.case,
        "conductivities": seq.conductivities,
        "is_ground_truth": seq.is_ground_truth,
        "method": seq.method,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_sequence(path) -> ConductivitySequence:
    with open(_sidecar_path(path)) as fh:
        doc = json.load(fh)
    try:
        q, t = int(doc["Q"]), int(doc["T"])
        values = _read_payload(path, q * t).reshape(t, q).T
        return ConductivitySequence(
            values=values,
            grid_ref=doc["grid_ref"],
            is_ground_truth=bool(doc["is_ground_truth"]),
            reference_mode=doc["reference_mode"],
            case=doc.get("case"),
            conductivities=doc.get("conductivities"),
            method=doc.get("method"),
        )
    except KeyError as exc:
        raise FormatError(f"malformed sequence sidecar for {path}: missing {exc}") from exc

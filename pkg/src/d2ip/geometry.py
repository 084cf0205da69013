"""Voxel grid, electrode belt, and measurement protocol.

Conventions fixed here and recorded in every file sidecar:

* Axis mapping: rows index y, columns index x, planes index z.
* Vectorization order is plane-slowest, column-fastest: voxel (r, c, p)
  maps to linear index q = ((p * R) + r) * C + c.
* The lateral domain boundary is the ellipse inscribed in the (x, y)
  extent; electrodes sit on that ellipse at equal parametric angles,
  starting at the +x axis and proceeding counterclockwise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

SCHEMES = ("adjacent_in_layer", "cross_layer")
ORDERING = "p-slowest,c-fastest"


def _short_hash(payload: str) -> str:
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Extent:
    """Axis-aligned physical bounding box in meters."""

    x: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z):
            if not hi > lo:
                raise ValueError(f"extent span must be positive, got [{lo}, {hi}]")

    @classmethod
    def centered(cls, span_x: float, span_y: float, span_z: float) -> "Extent":
        return cls(
            (-span_x / 2, span_x / 2),
            (-span_y / 2, span_y / 2),
            (-span_z / 2, span_z / 2),
        )

    @property
    def spans(self) -> tuple[float, float, float]:
        return (self.x[1] - self.x[0], self.y[1] - self.y[0], self.z[1] - self.z[0])

    @property
    def center(self) -> tuple[float, float, float]:
        return (
            (self.x[0] + self.x[1]) / 2,
            (self.y[0] + self.y[1]) / 2,
            (self.z[0] + self.z[1]) / 2,
        )

    def to_json(self) -> dict:
        return {"x": list(self.x), "y": list(self.y), "z": list(self.z)}

    @classmethod
    def from_json(cls, d: dict) -> "Extent":
        return cls(tuple(d["x"]), tuple(d["y"]), tuple(d["z"]))


UNIT_BOX = Extent.centered(1.0, 1.0, 1.0)
# Desk-scale stand-in for an adult thorax: 30 cm wide, 20 cm deep, 10 cm
# imaging slab height.
THORAX_BOX = Extent.centered(0.30, 0.20, 0.10)


@dataclass(frozen=True)
class GridGeometry:
    """Regular voxel grid over a physical extent."""

    rows: int
    cols: int
    planes: int
    extent: Extent

    def __post_init__(self):
        for name, n in (("rows", self.rows), ("cols", self.cols), ("planes", self.planes)):
            if n < 1:
                raise ValueError(f"{name} must be positive, got {n}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.rows, self.cols, self.planes)

    @property
    def voxel_count(self) -> int:
        return self.rows * self.cols * self.planes

    @property
    def pitch(self) -> tuple[float, float, float]:
        """Voxel pitch along (row/y, col/x, plane/z)."""
        sx, sy, sz = self.extent.spans
        return (sy / self.rows, sx / self.cols, sz / self.planes)

    @property
    def voxel_volume(self) -> float:
        pr, pc, pp = self.pitch
        return pr * pc * pp

    @property
    def ref_id(self) -> str:
        payload = json.dumps(
            {"R": self.rows, "C": self.cols, "P": self.planes, "extent": self.extent.to_json()},
            sort_keys=True,
        )
        return _short_hash(payload)

    def axis_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis voxel-center coordinates: (y of rows, x of cols, z of planes)."""
        (x0, _), (y0, _), (z0, _) = self.extent.x, self.extent.y, self.extent.z
        pr, pc, pp = self.pitch
        ys = y0 + (np.arange(self.rows) + 0.5) * pr
        xs = x0 + (np.arange(self.cols) + 0.5) * pc
        zs = z0 + (np.arange(self.planes) + 0.5) * pp
        return ys, xs, zs

    def voxel_centers(self) -> np.ndarray:
        """(Q, 3) xyz coordinates of voxel centers in canonical vector order."""
        ys, xs, zs = self.axis_centers()
        yy = np.broadcast_to(ys[None, :, None], (self.planes, self.rows, self.cols))
        xx = np.broadcast_to(xs[None, None, :], (self.planes, self.rows, self.cols))
        zz = np.broadcast_to(zs[:, None, None], (self.planes, self.rows, self.cols))
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def build_grid(rows: int, cols: int, planes: int, extent: Extent) -> GridGeometry:
    """Construct a voxel grid; dimensions must be at least 2 per axis."""
    if min(rows, cols, planes) < 2:
        raise ValueError(f"grid dimensions must be >= 2, got {(rows, cols, planes)}")
    return GridGeometry(rows, cols, planes, extent)


@dataclass(frozen=True)
class ElectrodeArray:
    """Electrode positions (meters) and their layer indices.

    Electrode indices are layer-major: layer 0 holds indices
    0..n_per_layer-1, layer 1 the next block, and so on.
    """

    positions: tuple[tuple[float, float, float], ...]
    layer_assignment: tuple[int, ...]

    def __post_init__(self):
        if len(self.positions) != len(self.layer_assignment):
            raise ValueError("positions and layer_assignment length mismatch")

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def n_layers(self) -> int:
        return len(set(self.layer_assignment))

    def layer_indices(self, layer: int) -> list[int]:
        return [i for i, l in enumerate(self.layer_assignment) if l == layer]

    def positions_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=float)


def place_electrodes(
    grid: GridGeometry,
    n_per_layer: int,
    layers: int,
    layer_heights: list[float],
) -> ElectrodeArray:
    """Place electrodes on the lateral boundary ellipse of each layer.

    Each layer gets ``n_per_layer`` electrodes at parametric angles
    2*pi*k/n (k = 0..n-1), offset 0 at the +x axis, counterclockwise.
    Positions depend on the extent only, not on grid resolution.
    """
    if n_per_layer < 4:
        raise ValueError(f"need at least 4 electrodes per layer, got {n_per_layer}")
    if layers < 1:
        raise ValueError(f"need at least 1 layer, got {layers}")
    if len(layer_heights) != layers:
        raise ValueError(f"expected {layers} layer heights, got {len(layer_heights)}")
    z_lo, z_hi = grid.extent.z
    for h in layer_heights:
        if not (z_lo <= h <= z_hi):
            raise ValueError(f"layer height {h} outside vertical extent [{z_lo}, {z_hi}]")

    cx, cy, _ = grid.extent.center
    sx, sy, _ = grid.extent.spans
    a, b = sx / 2, sy / 2
    positions = []
    layer_of = []
    for layer, h in enumerate(layer_heights):
        for k in range(n_per_layer):
            theta = 2 * math.pi * k / n_per_layer
            positions.append((cx + a * math.cos(theta), cy + b * math.sin(theta), float(h)))
            layer_of.append(layer)
    return ElectrodeArray(tuple(positions), tuple(layer_of))


def default_layer_heights(grid: GridGeometry, layers: int = 2) -> list[float]:
    """Evenly spaced layer heights at fractions (i+0.5)/layers of the z span."""
    z_lo, z_hi = grid.extent.z
    span = z_hi - z_lo
    return [z_lo + span * (i + 0.5) / layers for i in range(layers)]


def default_electrode_array(grid: GridGeometry) -> ElectrodeArray:
    """The standard belt: 32 electrodes in 2 layers of 16."""
    return place_electrodes(grid, 16, 2, default_layer_heights(grid, 2))


@dataclass(frozen=True)
class MeasurementProtocol:
    """Ordered list of (drive+, drive-, measure+, measure-) electrode quadruples."""

    pairs: tuple[tuple[int, int, int, int], ...]
    scheme: str = "adjacent_in_layer"

    def __post_init__(self):
        for quad in self.pairs:
            if len(set(quad)) != 4:
                raise ValueError(f"quadruple reuses an electrode: {quad}")

    @property
    def count(self) -> int:
        return len(self.pairs)

    @property
    def ref_id(self) -> str:
        return _short_hash(json.dumps([list(q) for q in self.pairs]))

    def pairs_array(self) -> np.ndarray:
        return np.asarray(self.pairs, dtype=np.intp)


def _ring_pairs(ring: list[int]) -> list[tuple[int, int]]:
    n = len(ring)
    return [(ring[k], ring[(k + 1) % n]) for k in range(n)]


def generate_protocol(array: ElectrodeArray, scheme: str = "adjacent_in_layer") -> MeasurementProtocol:
    """Enumerate the measurement pattern for an electrode array.

    adjacent_in_layer: drive pairs are ring-adjacent electrodes within each
    layer; for each drive, the measure pairs are the ring-adjacent pairs of
    the same layer that touch neither drive electrode, in electrode-index
    order.

    cross_layer: drive pairs are vertically aligned electrodes in adjacent
    layers; measure pairs are the ring-adjacent pairs of every layer that
    touch neither drive electrode, in electrode-index order.

    The enumeration is deterministic: identical arrays yield identical lists.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    layers = sorted(set(array.layer_assignment))
    rings = [array.layer_indices(layer) for layer in layers]

    quads: list[tuple[int, int, int, int]] = []
    if scheme == "adjacent_in_layer":
        for ring in rings:
            adjacent = _ring_pairs(ring)
            for d_pos, d_neg in adjacent:
                for m_pos, m_neg in adjacent:
                    if {m_pos, m_neg} & {d_pos, d_neg}:
                        continue
                    quads.append((d_pos, d_neg, m_pos, m_neg))
    else:  # cross_layer
        if len(rings) < 2:
            raise ValueError("cross_layer scheme needs at least 2 layers")
        n = len(rings[0])
        if any(len(r) != n for r in rings):
            raise ValueError("cross_layer scheme needs equal-sized layers")
        all_adjacent = [pair for ring in rings for pair in _ring_pairs(ring)]
        for lower, upper in zip(rings[:-1], rings[1:]):
            for d_pos, d_neg in zip(lower, upper):
                for m_pos, m_neg in all_adjacent:
                    if {m_pos, m_neg} & {d_pos, d_neg}:
                        continue
                    quads.append((d_pos, d_neg, m_pos, m_neg))
    return MeasurementProtocol(tuple(quads), scheme)


def vectorize(volume: np.ndarray, grid: GridGeometry | None = None) -> np.ndarray:
    """Flatten an (R, C, P) volume to a length-Q vector in canonical order.

    Element q = ((p * R) + r) * C + c equals volume[r, c, p].
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {vol.shape}")
    if grid is not None and vol.shape != grid.shape:
        raise ValueError(f"volume shape {vol.shape} does not match grid {grid.shape}")
    return np.transpose(vol, (2, 0, 1)).reshape(-1)


def devectorize(vector: np.ndarray, shape: tuple[int, int, int] | GridGeometry) -> np.ndarray:
    """Exact inverse of :func:`vectorize`."""
    if isinstance(shape, GridGeometry):
        shape = shape.shape
    rows, cols, planes = shape
    vec = np.asarray(vector)
    if vec.ndim != 1 or vec.size != rows * cols * planes:
        raise ValueError(f"vector of size {vec.size} does not match shape {shape}")
    return np.transpose(vec.reshape(planes, rows, cols), (1, 2, 0))


def save_geometry(
    path,
    grid: GridGeometry,
    array: ElectrodeArray,
    protocol: MeasurementProtocol,
) -> None:
    """Write the structured-text geometry sidecar."""
    doc = {
        "R": grid.rows,
        "C": grid.cols,
        "P": grid.planes,
        "extent": grid.extent.to_json(),
        "ordering": ORDERING,
        "grid_ref": grid.ref_id,
        "electrodes": [list(p) for p in array.positions],
        "layer_assignment": list(array.layer_assignment),
        "protocol": [list(q) for q in protocol.pairs],
        "scheme": protocol.scheme,
        "protocol_ref": protocol.ref_id,
        "M": protocol.count,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_geometry(path) -> tuple[GridGeometry, ElectrodeArray, MeasurementProtocol]:
    from .errors import FormatError

    with open(path) as fh:
        doc = json.load(fh)
    try:
        if doc["ordering"] != ORDERING:
            raise FormatError(f"unsupported voxel ordering {doc['ordering']!r}")
        grid = GridGeometry(doc["R"], doc["C"], doc["P"], Extent.from_json(doc["extent"]))
        array = ElectrodeArray(
            tuple(tuple(p) for p in doc["electrodes"]),
            tuple(doc["layer_assignment"]),
        )
        protocol = MeasurementProtocol(
            tuple(tuple(q) for q in doc["protocol"]), doc.get("scheme", "adjacent_in_layer")
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed geometry sidecar {path}: {exc}") from exc
    return grid, array, protocol

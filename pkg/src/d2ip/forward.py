"""Linearized sensitivity operator, voltage synthesis, and noise injection.

The sensitivity matrix uses an analytic lead-field model: the entry for a
measurement quadruple (d+, d-, m+, m-) and a voxel center r is

    S(r) = -grad(u_d)(r) . grad(u_m)(r) * voxel_volume,

where u for a source/sink pair is the free-space point-source potential
u(r) = 1/(4*pi*|r - r+|) - 1/(4*pi*|r - r-|). This keeps the properties the
linear model relies on (smooth, boundary-concentrated, drive/measure
reciprocal) without a finite-element solver. Distances closer than half the
smallest voxel pitch are clamped to that value, so voxels coincident with
an electrode never produce infinities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateOperatorError, FormatError
from .geometry import ElectrodeArray, GridGeometry, MeasurementProtocol

REFERENCE_MODES = ("empty_background", "first_frame")


@dataclass(frozen=True)
class SensitivityMatrix:
    """Dense M x Q linear operator mapping conductivity changes to voltages."""

    values: np.ndarray
    normalized: bool
    projected: bool
    grid_ref: str
    protocol_ref: str

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"sensitivity matrix must be 2D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sensitivity matrix contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_measurements(self) -> int:
        return self.values.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.values.shape[1]


def _lead_fields(grid: GridGeometry, array: ElectrodeArray) -> np.ndarray:
    """Per-electrode potential gradients at every voxel center, shape (E, Q, 3)."""
    centers = grid.voxel_centers()  # (Q, 3)
    positions = array.positions_array()  # (E, 3)
    min_dist = min(grid.pitch) / 2
    diff = centers[None, :, :] - positions[:, None, :]  # (E, Q, 3)
    dist = np.linalg.norm(diff, axis=2)
    dist = np.maximum(dist, min_dist)
    return -diff / (4 * math.pi * dist**3)[:, :, None]


def assemble_sensitivity(
    grid: GridGeometry,
    array: ElectrodeArray,
    protocol: MeasurementProtocol,
) -> SensitivityMatrix:
    """Build the unnormalized lead-field sensitivity matrix for a protocol."""
    if protocol.count == 0:
        raise ValueError("protocol has no measurement pairs")
    if protocol.pairs_array().max() >= array.count:
        raise ValueError("protocol references electrodes beyond the array")
    fields = _lead_fields(grid, array)
    quads = protocol.pairs_array()
    grad_drive = fields[quads[:, 0]] - fields[quads[:, 1]]  # (M, Q, 3)
    grad_measure = fields[quads[:, 2]] - fields[quads[:, 3]]
    values = -np.einsum("mqk,mqk->mq", grad_drive, grad_measure) * grid.voxel_volume
    return SensitivityMatrix(
        values=values,
        normalized=False,
        projected=False,
        grid_ref=grid.ref_id,
        protocol_ref=protocol.ref_id,
    )


def normalize_sensitivity(matrix: SensitivityMatrix) -> SensitivityMatrix:
    """Scale every row to unit Euclidean norm.

    The row-normalized operator is what reconstruction consumes. The
    ``projected`` flag is set alongside ``normalized``: no projection beyond
    row scaling is applied, the flag is reserved for operators that carry
    one.
    """
    norms = np.linalg.norm(matrix.values, axis=1)
    zero_rows = np.flatnonzero(norms == 0)
    if zero_rows.size:
        raise DegenerateOperatorError(
            f"sensitivity rows {zero_rows.tolist()} are identically zero"
        )
    return replace(
        matrix,
        values=matrix.values / norms[:, None],
        normalized=True,
        projected=True,
    )


def forward_project(matrix: SensitivityMatrix, dsigma: np.ndarray) -> np.ndarray:
    """Measurement-space projection of a conductivity-change vector."""
    vec = np.asarray(dsigma, dtype=np.float64)
    if vec.shape != (matrix.n_voxels,):
        raise ValueError(
            f"conductivity vector shape {vec.shape} does not match Q={matrix.n_voxels}"
        )
    return matrix.values @ vec


@dataclass(frozen=True)
class VoltageFrame:
    """One frame of differential boundary measurements."""

    values: np.ndarray
    frame_index: int
    snr_db: float | None = None

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError(f"voltage frame must be 1D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("voltage frame contains non-finite entries")
        object.__setattr__(self, "values", vals)


@dataclass
class VoltageSequence:
    """Ordered voltage frames sharing one measurement protocol."""

    frames: list[VoltageFrame]
    reference_mode: str = "empty_background"
    snr_db: float | None = None
    seed: int | None = None
    protocol_ref: str | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("voltage sequence must hold at least one frame")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"unknown reference mode {self.reference_mode!r}")
        m = self.frames[0].values.size
        for i, fr in enumerate(self.frames, start=1):
            if fr.values.size != m:
                raise ValueError("voltage frames have inconsistent lengths")
            if fr.frame_index != i:
                raise ValueError("frame indices must run 1..T contiguously")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_measurements(self) -> int:
        return self.frames[0].values.size

    def as_matrix(self) -> np.ndarray:
        """(M, T) measurement matrix, one column per frame."""
        return np.stack([f.values for f in self.frames], axis=1)


def add_noise(frame: VoltageFrame, snr_db: float | None, seed: int) -> VoltageFrame:
    """Add zero-mean Gaussian noise at a target SNR, deterministically.

    The noise variance is signal_power / 10^(snr_db/10) with signal_power
    the mean square of the frame. ``snr_db`` of None or +inf means no noise.
    """
    if snr_db is None or math.isinf(snr_db):
        return VoltageFrame(frame.values.copy(), frame.frame_index, snr_db=None)
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    power = float(np.mean(frame.values**2))
    if power == 0.0:
        raise ValueError("SNR is undefined for an all-zero signal")
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    rng = np.random.default_rng(seed)
    noisy = frame.values + rng.normal(0.0, sigma, size=frame.values.size)
    return VoltageFrame(noisy, frame.frame_index, snr_db=snr_db)


# ---------------------------------------------------------------------------
# Persistence: raw little-endian float64 payload plus a JSON sidecar.


def _sidecar_path(path) -> str:
    return f"{path}.json"


def _write_payload(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_payload(path, count: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != count * 8:
        raise FormatError(
            f"{path}: expected {count * 8} payload bytes per sidecar, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_matrix(matrix: SensitivityMatrix, path) -> None:
    """Persist a sensitivity matrix (row-major float64 + sidecar)."""
    _write_payload(path, matrix.values)
    doc = {
        "M": matrix.n_measurements,
        "Q": matrix.n_voxels,
        "normalized": matrix.normalized,
        "projected": matrix.projected,
        "grid_ref": matrix.grid_ref,
        "protocol_ref": matrix.protocol_ref,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_matrix(path) -> SensitivityMatrix:
    with open(_sidecar_path(path)) as fh:
        doc = json.load(fh)
    try:
        m, q = int(doc["M"]), int(doc["Q"])
        values = _read_payload(path, m * q).reshape(m, q)
        return SensitivityMatrix(
            values=values,
            normalized=bool(doc["normalized"]),
            projected=bool(doc["projected"]),
            grid_ref=doc["grid_ref"],
            protocol_ref=doc["protocol_ref"],
        )
    except KeyError as exc:
        raise FormatError(f"malformed matrix sidecar for {path}: missing {exc}") from exc


def save_voltages(seq: VoltageSequence, path) -> None:
    """Persist a voltage sequence (frame-major float64 + sidecar)."""
    _write_payload(path, np.stack([f.values for f in seq.frames], axis=0))
    doc = {
        "M": seq.n_measurements,
        "T": seq.n_frames,
        "reference_mode": seq.reference_mode,
        "snr_db": seq.snr_db,
        "seed": seq.seed,
        "protocol_ref": seq.protocol_ref,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_voltages(path) -> VoltageSequence:
    with open(_sidecar_path(path)) as fh:
        doc = json.load(fh)
    try:
        m, t = int(doc["M"]), int(doc["T"])
        flat = _read_payload(path, m * t).reshape(t, m)
        frames = [
            VoltageFrame(flat[i], i + 1, snr_db=doc["snr_db"]) for i in range(t)
        ]
        return VoltageSequence(
            frames=frames,
            reference_mode=doc["reference_mode"],
            snr_db=doc["snr_db"],
            seed=doc["seed"],
            protocol_ref=doc.get("protocol_ref"),
        )
    except KeyError as exc:
        raise FormatError(f"malformed voltage sidecar for {path}: missing {exc}") from exc

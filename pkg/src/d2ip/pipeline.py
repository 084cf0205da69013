"""Sequence reconstruction with an untrained network prior.

Per frame i the pipeline minimizes, over the network parameters,

    || dv_i - J vec(map(phi(theta | Z))) ||  +  lambda_tv * R_4dtv(history, map(phi))

with a fixed number of Adam iterations and no early stopping; the frame
estimate is the network output after the last step. Three stage kinds
exist, with separate iteration budgets:

* warm-start: from freshly seeded parameters, optimize the single-frame
  objective on one designated measurement (default: frame 1) for
  ``iters_warm`` steps; the result initializes frame 1.
* first frame: ``iters_first`` steps from the warm-start parameters.
* subsequent frames: each frame starts from the previous frame's final
  parameters (an exact copy) and runs ``iters_next`` steps.

The network's sigmoid output is mapped affinely onto the physical
conductivity-change range ``output_map=(lo, hi)`` before entering the data
term, the regularizer, and the frame history, so all stages compare like
units. One uniform noise input is sampled per sequence run and reused
bit-identically in every stage.

Randomness: the noise input uses ``seed`` and the parameter init uses
``seed + 1``; nothing else draws randomness.
"""

from __future__ import annotations

import csv
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .errors import NumericalError, ReconstructionAborted
from .forward import SensitivityMatrix, VoltageSequence
from .geometry import GridGeometry, vectorize
from .phantom import ConductivitySequence
from .priornet import (
    NetworkConfig,
    NoiseInput,
    ParameterState,
    build_model,
    extract_parameters,
    init_parameters,
    load_parameters,
    sample_noise_input,
)
from .regularizers import FrameHistory, TVWeights, tv4d

DATA_NORMS = ("l2", "l2sq")


@dataclass(frozen=True)
class RunConfig:
    """Everything one sequence reconstruction needs, fully serializable."""

    iters_warm: int = 1800
    iters_first: int = 450
    iters_next: int = 250
    learning_rate: float = 5e-4
    optimizer_betas: tuple[float, float] = (0.9, 0.999)
    tv_weights: TVWeights = field(default_factory=TVWeights)
    seed: int = 0
    record_every: int = 1
    network: NetworkConfig = field(default_factory=NetworkConfig)
    output_map: tuple[float, float] = (-0.135, 0.0)
    data_norm: str = "l2"
    warm_frame: int = 1
    disable_upws: bool = False
    disable_tpp: bool = False
    serial: bool = True

    def __post_init__(self):
        if min(self.iters_warm, self.iters_first, self.iters_next) < 0:
            raise ValueError("iteration budgets must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.data_norm not in DATA_NORMS:
            raise ValueError(f"data_norm must be one of {DATA_NORMS}")
        if self.output_map[0] == self.output_map[1]:
            raise ValueError("output_map endpoints must differ")
        if self.warm_frame < 1:
            raise ValueError("warm_frame is a 1-based frame index")
        object.__setattr__(self, "optimizer_betas", tuple(self.optimizer_betas))
        object.__setattr__(self, "output_map", tuple(self.output_map))

    @classmethod
    def simulation_profile(cls, **overrides) -> "RunConfig":
        """Defaults for synthetic data (learning rate 5e-4)."""
        return cls(**overrides)

    @classmethod
    def measured_profile(cls, **overrides) -> "RunConfig":
        """Defaults for measured data (learning rate 1e-4)."""
        overrides.setdefault("learning_rate", 1e-4)
        return cls(**overrides)

    def stage_ratio(self) -> str:
        return f"{self.iters_warm}:{self.iters_first}:{self.iters_next}"

    def to_json(self) -> dict:
        doc = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "tv_weights":
                value = {
                    "lambda_tv": value.lambda_tv,
                    "lambda_s": value.lambda_s,
                    "lambda_t": value.lambda_t,
                    "epsilon": value.epsilon,
                }
            elif f.name == "network":
                value = {
                    "base_channels": value.base_channels,
                    "depth": value.depth,
                    "aspp_dilations": list(value.aspp_dilations),
                    "use_depthwise": value.use_depthwise,
                    "seed": value.seed,
                }
            elif isinstance(value, tuple):
                value = list(value)
            doc[f.name] = value
        doc["stage_ratio"] = self.stage_ratio()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        doc.pop("stage_ratio", None)
        if "tv_weights" in doc:
            doc["tv_weights"] = TVWeights(**doc["tv_weights"])
        if "network" in doc:
            net = dict(doc["network"])
            if "aspp_dilations" in net:
                net["aspp_dilations"] = tuple(net["aspp_dilations"])
            doc["network"] = NetworkConfig(**net)
        for key in ("optimizer_betas", "output_map"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def ablation_mode(cfg: RunConfig, disable: set[str]) -> RunConfig:
    """Config variant with the warm-start and/or propagation stages removed.

    A frame whose initial parameters are freshly seeded runs ``iters_warm``
    steps; one starting from the warm-start checkpoint runs ``iters_first``;
    one starting from the previous frame runs ``iters_next``. Disabling
    stages therefore raises the budgets of the frames that cold-start.
    """
    unknown = set(disable) - {"upws", "tpp"}
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    return replace(cfg, disable_upws="upws" in disable, disable_tpp="tpp" in disable)


@dataclass
class TraceRecord:
    frame: int  # 0 = warm-start stage
    iteration: int
    data_term: float
    reg_term: float
    total: float
    seconds: float


@dataclass
class LossTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def add(self, record: TraceRecord) -> None:
        self.records.append(record)

    def data_terms(self) -> np.ndarray:
        return np.array([r.data_term for r in self.records])

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite([[r.data_term, r.reg_term, r.total] for r in self.records]))
        )

    def iterations_to(self, threshold: float) -> int | None:
        """First recorded iteration whose data term is at or below threshold."""
        for r in self.records:
            if r.data_term <= threshold:
                return r.iteration
        return None

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class StageInfo:
    name: str
    provenance: str
    iteration_counter: int
    checksum: str
    noise_sha256: str


@dataclass
class FrameRecord:
    frame: int
    init_provenance: str
    init_checksum: str
    final_checksum: str
    iterations: int
    seconds: float


@dataclass
class ReconstructionResult:
    sequence: ConductivitySequence
    traces: dict[str, LossTrace]
    provenance_chain: list[StageInfo]
    frame_records: list[FrameRecord]
    timing: dict[str, float]
    noise_sha256: str
    states: dict[str, ParameterState]
    config: RunConfig


def derived_seeds(seed: int) -> tuple[int, int]:
    """(noise-input seed, parameter-init seed) from one run seed."""
    return seed, seed + 1


@contextmanager
def _thread_profile(serial: bool):
    if not serial:
        yield
        return
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _vectorize_t(volume: torch.Tensor) -> torch.Tensor:
    # Same index rule as geometry.vectorize: q = ((p*R) + r)*C + c.
    return volume.permute(2, 0, 1).reshape(-1)


def _data_term(residual: torch.Tensor, mode: str) -> torch.Tensor:
    sq = (residual * residual).sum()
    if mode == "l2sq":
        return sq
    if sq.item() == 0.0:
        return sq  # exact zero with a well-defined (zero) subgradient
    return torch.sqrt(sq)


class _FrameOptimizer:
    """Owns the model / constant tensors of one sequence run (float32)."""

    def __init__(self, cfg: RunConfig, matrix: SensitivityMatrix, noise: NoiseInput):
        self.cfg = cfg
        self.model = build_model(cfg.network, noise.shape)
        self.z = torch.tensor(noise.values, dtype=torch.float32)
        self.operator = torch.tensor(matrix.values, dtype=torch.float32)

    def loss_terms(self, dv: torch.Tensor, history: FrameHistory):
        lo, hi = self.cfg.output_map
        out = self.model(self.z)
        mapped = lo + (hi - lo) * out
        residual = dv - self.operator @ _vectorize_t(mapped)
        data = _data_term(residual, self.cfg.data_norm)
        weights = self.cfg.tv_weights
        reg = weights.lambda_tv * tv4d(history, mapped, weights)
        return data + reg, data, reg, mapped

    def output_volume(self) -> tuple[np.ndarray, torch.Tensor]:
        lo, hi = self.cfg.output_map
        with torch.no_grad():
            out = self.model(self.z)
            mapped = lo + (hi - lo) * out
        # emitted volumes apply the affine map in float64
        volume = lo + (hi - lo) * out.numpy().astype(np.float64)
        return volume, mapped

    def optimize(
        self,
        theta_init: ParameterState,
        dv: np.ndarray,
        history: FrameHistory,
        iters: int,
        frame_label: int,
    ) -> tuple[np.ndarray, torch.Tensor, ParameterState, LossTrace]:
        cfg = self.cfg
        load_parameters(self.model, theta_init)
        optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.learning_rate, betas=cfg.optimizer_betas
        )
        dv_t = torch.as_tensor(np.asarray(dv), dtype=torch.float32)
        trace = LossTrace()
        start = time.perf_counter()
        for k in range(1, iters + 1):
            total, data, reg, _ = self.loss_terms(dv_t, history)
            if not torch.isfinite(total):
                exc = NumericalError(
                    f"non-finite loss at stage frame={frame_label} iteration={k}"
                )
                exc.trace = trace
                raise exc
            if (k - 1) % cfg.record_every == 0 or k == iters:
                trace.add(
                    TraceRecord(
                        frame=frame_label,
                        iteration=k,
                        data_term=float(data.detach()),
                        reg_term=float(torch.as_tensor(reg).detach()),
                        total=float(total.detach()),
                        seconds=time.perf_counter() - start,
                    )
                )
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
        volume, mapped = self.output_volume()
        theta_final = extract_parameters(
            self.model,
            iteration_counter=theta_init.iteration_counter + iters,
            provenance=theta_init.provenance,
        )
        return volume, mapped.detach(), theta_final, trace


def loss(
    net_cfg: NetworkConfig,
    theta: ParameterState,
    noise: NoiseInput,
    matrix: SensitivityMatrix,
    dv: np.ndarray,
    history=(),
    weights: TVWeights | None = None,
    output_map: tuple[float, float] = (-0.135, 0.0),
    data_norm: str = "l2",
    dtype: torch.dtype = torch.float32,
) -> tuple[float, float, float]:
    """(total, data term, regularizer term) of the per-frame objective."""
    weights = weights or TVWeights()
    model = build_model(net_cfg, noise.shape).to(dtype)
    load_parameters(model, theta)
    z = torch.tensor(noise.values, dtype=dtype)
    operator = torch.tensor(matrix.values, dtype=dtype)
    dv_t = torch.as_tensor(np.asarray(dv), dtype=dtype)
    hist = FrameHistory(
        [torch.as_tensor(np.asarray(h), dtype=dtype) for h in history]
    )
    lo, hi = output_map
    with torch.no_grad():
        mapped = lo + (hi - lo) * model(z)
        residual = dv_t - operator @ _vectorize_t(mapped)
        data = _data_term(residual, data_norm)
        reg = weights.lambda_tv * tv4d(hist, mapped, weights)
        total = data + reg
    if not torch.isfinite(total):
        raise NumericalError("non-finite loss in standalone evaluation")
    return float(total), float(data), float(reg)


def predict_measurements(
    net_cfg: NetworkConfig,
    theta: ParameterState,
    noise: NoiseInput,
    matrix: SensitivityMatrix,
    output_map: tuple[float, float] = (-0.135, 0.0),
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """Measurement-space prediction J vec(map(phi(theta | Z))), exactly as the
    optimization computes it."""
    model = build_model(net_cfg, noise.shape).to(dtype)
    load_parameters(model, theta)
    lo, hi = output_map
    with torch.no_grad():
        mapped = lo + (hi - lo) * model(torch.tensor(noise.values, dtype=dtype))
        pred = torch.tensor(matrix.values, dtype=dtype) @ _vectorize_t(mapped)
    return pred.numpy()


def upws_pretrain(
    matrix: SensitivityMatrix,
    dv0: np.ndarray,
    noise: NoiseInput,
    cfg: RunConfig,
    theta_init: ParameterState | None = None,
) -> tuple[ParameterState, LossTrace]:
    """Warm-start pretraining on a single measurement frame (empty history)."""
    with _thread_profile(cfg.serial):
        if theta_init is None:
            _, init_seed = derived_seeds(cfg.seed)
            theta_init = init_parameters(replace(cfg.network, seed=init_seed))
        runner = _FrameOptimizer(cfg, matrix, noise)
        _, _, theta, trace = runner.optimize(
            theta_init, dv0, FrameHistory(), cfg.iters_warm, frame_label=0
        )
    return (
        ParameterState(theta.tensors, theta.iteration_counter, provenance="upws"),
        trace,
    )


def reconstruct_frame(
    theta_init: ParameterState,
    matrix: SensitivityMatrix,
    dv: np.ndarray,
    history,
    iters: int,
    cfg: RunConfig,
    noise: NoiseInput,
) -> tuple[np.ndarray, ParameterState, LossTrace]:
    """One frame: ``iters`` Adam steps, returning the final-iterate volume,
    the final parameters, and the loss trace."""
    with _thread_profile(cfg.serial):
        runner = _FrameOptimizer(cfg, matrix, noise)
        hist = FrameHistory(
            [torch.as_tensor(np.asarray(h), dtype=torch.float32) for h in history]
        )
        volume, _, theta, trace = runner.optimize(theta_init, dv, hist, iters, frame_label=1)
    return volume, theta, trace


def _stage_budget(cfg: RunConfig, provenance: str) -> int:
    return {
        "kaiming_init": cfg.iters_warm,
        "upws": cfg.iters_first,
        "tpp": cfg.iters_next,
    }[provenance]


def reconstruct_sequence(
    matrix: SensitivityMatrix,
    voltages: VoltageSequence,
    cfg: RunConfig,
    grid: GridGeometry,
    warm_voltage: np.ndarray | None = None,
) -> ReconstructionResult:
    """Full sequence reconstruction.

    ``warm_voltage`` overrides the warm-start measurement (any single frame
    acquired under the same protocol); by default frame ``cfg.warm_frame``
    of the target sequence is used.
    """
    if matrix.n_voxels != grid.voxel_count:
        raise ValueError("operator voxel count does not match the grid")
    if voltages.n_measurements != matrix.n_measurements:
        raise ValueError("voltage frames do not match the operator row count")
    if not cfg.disable_upws and warm_voltage is None:
        if cfg.warm_frame > voltages.n_frames:
            raise ValueError(
                f"warm_frame {cfg.warm_frame} exceeds sequence length {voltages.n_frames}"
            )

    with _thread_profile(cfg.serial):
        z_seed, init_seed = derived_seeds(cfg.seed)
        noise = sample_noise_input(grid, z_seed)
        z_sha = noise.sha256()
        theta0 = init_parameters(replace(cfg.network, seed=init_seed))

        chain = [StageInfo("init", "kaiming_init", 0, theta0.checksum(), z_sha)]
        traces: dict[str, LossTrace] = {}
        timing: dict[str, float] = {}
        states = {"init": theta0}
        runner = _FrameOptimizer(cfg, matrix, noise)

        frame1_init = theta0
        if not cfg.disable_upws:
            dv0 = (
                np.asarray(warm_voltage)
                if warm_voltage is not None
                else voltages.frames[cfg.warm_frame - 1].values
            )
            t0 = time.perf_counter()
            try:
                _, _, theta_w, warm_trace = runner.optimize(
                    theta0, dv0, FrameHistory(), cfg.iters_warm, frame_label=0
                )
            except NumericalError as exc:
                raise ReconstructionAborted(
                    f"warm-start stage failed: {exc}", frame_index=0, partial=None
                ) from exc
            timing["warm"] = time.perf_counter() - t0
            warm_state = ParameterState(
                theta_w.tensors, theta_w.iteration_counter, provenance="upws"
            )
            traces["warm"] = warm_trace
            chain.append(StageInfo("warm", "upws", warm_state.iteration_counter, warm_state.checksum(), z_sha))
            states["warm"] = warm_state
            frame1_init = warm_state

        history = FrameHistory()
        columns: list[np.ndarray] = []
        frame_records: list[FrameRecord] = []
        theta_prev: ParameterState | None = None

        def partial_result() -> ReconstructionResult | None:
            if not columns:
                return None
            seq = ConductivitySequence(
                np.stack(columns, axis=1),
                grid_ref=grid.ref_id,
                is_ground_truth=False,
                reference_mode=voltages.reference_mode,
                method="d2ip",
            )
            return ReconstructionResult(
                seq, traces, chain, frame_records, timing, z_sha, states, cfg
            )

        for i in range(1, voltages.n_frames + 1):
            if i == 1:
                theta_i = frame1_init
            elif cfg.disable_tpp:
                theta_i = frame1_init.clone()
            else:
                theta_i = theta_prev.clone(provenance="tpp")
                chain.append(
                    StageInfo(f"frame_{i}_init", "tpp", theta_i.iteration_counter, theta_i.checksum(), z_sha)
                )
            iters = _stage_budget(cfg, theta_i.provenance)
            t0 = time.perf_counter()
            try:
                volume, mapped, theta_prev, trace = runner.optimize(
                    theta_i, voltages.frames[i - 1].values, history, iters, frame_label=i
                )
            except NumericalError as exc:
                raise ReconstructionAborted(
                    f"frame {i} failed: {exc}", frame_index=i, partial=partial_result()
                ) from exc
            seconds = time.perf_counter() - t0
            timing[f"frame_{i}"] = seconds
            traces[f"frame_{i}"] = trace
            history.append(mapped)
            columns.append(vectorize(volume))
            frame_records.append(
                FrameRecord(
                    frame=i,
                    init_provenance=theta_i.provenance,
                    init_checksum=theta_i.checksum(),
                    final_checksum=theta_prev.checksum(),
                    iterations=iters,
                    seconds=seconds,
                )
            )

        states["final"] = theta_prev
        return partial_result()


def write_traces_csv(path, traces: dict[str, LossTrace]) -> None:
    """Trace CSV with columns frame, iteration, data, reg, total, seconds."""
    def order(key: str) -> tuple[int, int]:
        return (0, 0) if key == "warm" else (1, int(key.split("_")[1]))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "iteration", "data", "reg", "total", "seconds"])
        for key in sorted(traces, key=order):
            for r in traces[key].records:
                writer.writerow(
                    [r.frame, r.iteration, repr(r.data_term), repr(r.reg_term), repr(r.total), repr(r.seconds)]
                )


def read_traces_csv(path) -> dict[int, LossTrace]:
    """Traces keyed by frame label (0 = warm-start stage)."""
    traces: dict[int, LossTrace] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = int(row["frame"])
            traces.setdefault(label, LossTrace()).add(
                TraceRecord(
                    frame=label,
                    iteration=int(row["iteration"]),
                    data_term=float(row["data"]),
                    reg_term=float(row["reg"]),
                    total=float(row["total"]),
                    seconds=float(row["seconds"]),
                )
            )
    return traces


def write_timing_csv(path, timing: dict[str, float]) -> None:
    """Per-stage and accumulated wall-clock seconds (file I/O excluded)."""
    order = sorted(timing, key=lambda k: (k != "warm", int(k.split("_")[1]) if k.startswith("frame_") else 0))
    total = 0.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds", "accumulated_seconds"])
        for key in order:
            total += timing[key]
            writer.writerow([key, repr(timing[key]), repr(total)])


def read_timing_csv(path) -> list[tuple[str, float, float]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["stage"], float(row["seconds"]), float(row["accumulated_seconds"])))
    return rows


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, sort_keys=True, indent=1)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_json(json.load(fh))

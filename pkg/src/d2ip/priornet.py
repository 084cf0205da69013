"""Untrained volumetric reconstruction backbone.

A lightweight 3-stage residual U-Net mapping a fixed noise volume to a
conductivity volume of the same shape:

    stem -> 3 x (squeeze-excite -> residual down-conv x2)
         -> dilated-pyramid bottleneck
         -> 3 x (attention-gated skip -> trilinear up x2 -> residual conv)
         -> plain conv -> sigmoid

Residual blocks use depthwise-separable 3x3x3 convolutions (toggleable),
channel-wise layer normalization at each spatial position, and SiLU
activations (smooth everywhere, which keeps finite-difference gradient
validation well-posed). Channels double per encoder stage: b, 2b, 4b with
an 8b bottleneck. The network is never trained on data; its parameters are
optimized per reconstruction task.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError
from .geometry import GridGeometry

CHECKPOINT_SCHEMA = 1
PROVENANCES = ("kaiming_init", "upws", "tpp")


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 8
    depth: int = 3
    aspp_dilations: tuple[int, ...] = (1, 2, 4)
    use_depthwise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.depth != 3:
            raise ValueError("the backbone is fixed at three encoder stages")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        dil = tuple(self.aspp_dilations)
        if not dil or any(b <= a for a, b in zip(dil, dil[1:])):
            raise ValueError("aspp_dilations must be nonempty and strictly increasing")
        object.__setattr__(self, "aspp_dilations", dil)


def config_hash(cfg: NetworkConfig) -> str:
    payload = json.dumps(
        {
            "base_channels": cfg.base_channels,
            "depth": cfg.depth,
            "aspp_dilations": list(cfg.aspp_dilations),
            "use_depthwise": cfg.use_depthwise,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class NoiseInput:
    """Fixed network input: uniform [0, 1) noise shaped like the grid."""

    values: np.ndarray
    seed: int

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise ValueError(f"noise input must be 3D, got shape {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def sha256(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()


def sample_noise_input(grid: GridGeometry, seed: int) -> NoiseInput:
    rng = np.random.default_rng(seed)
    return NoiseInput(rng.random(grid.shape), seed)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dimension at each spatial position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        xp = x.movedim(1, -1)
        xp = F.layer_norm(xp, (xp.shape[-1],), self.weight, self.bias, self.eps)
        return xp.movedim(-1, 1)


def _conv3(cin: int, cout: int, stride: int = 1, depthwise: bool = True) -> nn.Module:
    if depthwise:
        return nn.Sequential(
            nn.Conv3d(cin, cin, 3, stride=stride, padding=1, groups=cin),
            nn.Conv3d(cin, cout, 1),
        )
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc1 = nn.Conv3d(channels, hidden, 1)
        self.fc2 = nn.Conv3d(hidden, channels, 1)

    def forward(self, x):
        g = self.pool(x)
        g = torch.sigmoid(self.fc2(F.silu(self.fc1(g))))
        return x * g


class ResConv3d(nn.Module):
    """Two 3x3x3 convolutions with channel layer norm and a projected residual."""

    def __init__(self, cin: int, cout: int, stride: int = 1, depthwise: bool = True):
        super().__init__()
        self.conv1 = _conv3(cin, cout, stride=stride, depthwise=depthwise)
        self.norm1 = ChannelLayerNorm(cout)
        self.conv2 = _conv3(cout, cout, depthwise=depthwise)
        self.norm2 = ChannelLayerNorm(cout)
        self.skip = nn.Conv3d(cin, cout, 1, stride=stride)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class ASPP3d(nn.Module):
    """Parallel dilated 3x3x3 convolutions with a 1x1x1 projection."""

    def __init__(self, channels: int, dilations: tuple[int, ...]):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv3d(channels, channels, 3, padding=d, dilation=d) for d in dilations
        )
        self.project = nn.Conv3d(channels * len(dilations), channels, 1)
        self.norm = ChannelLayerNorm(channels)

    def forward(self, x):
        cat = torch.cat([b(x) for b in self.branches], dim=1)
        return F.silu(self.norm(self.project(cat)))


class AttentionGate3d(nn.Module):
    """Additive attention on a skip connection, queried by the decoder feature."""

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int):
        super().__init__()
        self.key = nn.Conv3d(skip_channels, inter_channels, 1, stride=2)
        self.query = nn.Conv3d(gate_channels, inter_channels, 1)
        self.score = nn.Conv3d(inter_channels, 1, 1)

    def forward(self, skip, gate):
        q = F.silu(self.key(skip) + self.query(gate))
        attn = torch.sigmoid(self.score(q))
        attn = F.interpolate(attn, size=skip.shape[2:], mode="trilinear", align_corners=False)
        return skip * attn


class FastResUNet3D(nn.Module):
    """The full backbone; ``grid_shape`` is validated at construction."""

    def __init__(self, cfg: NetworkConfig, grid_shape: tuple[int, int, int] | None = None):
        super().__init__()
        self.cfg = cfg
        if grid_shape is not None:
            factor = 2**cfg.depth
            if any(n % factor for n in grid_shape):
                raise ValueError(
                    f"grid shape {tuple(grid_shape)} must be divisible by {factor} "
                    f"for {cfg.depth} downsampling stages"
                )
        b = cfg.base_channels
        chans = [b, 2 * b, 4 * b, 8 * b]
        dw = cfg.use_depthwise
        self.stem = nn.Sequential(
            nn.Conv3d(1, b, 3, padding=1), ChannelLayerNorm(b), nn.SiLU()
        )
        self.enc_se = nn.ModuleList(SqueezeExcite(chans[i]) for i in range(3))
        self.enc_block = nn.ModuleList(
            ResConv3d(chans[i], chans[i + 1], stride=2, depthwise=dw) for i in range(3)
        )
        self.bottleneck = ASPP3d(chans[3], cfg.aspp_dilations)
        self.dec_att = nn.ModuleList(
            AttentionGate3d(chans[i], chans[i + 1], max(chans[i] // 2, 4))
            for i in reversed(range(3))
        )
        self.dec_block = nn.ModuleList(
            ResConv3d(chans[i + 1] + chans[i], chans[i], depthwise=dw)
            for i in reversed(range(3))
        )
        self.tail = nn.Conv3d(b, 1, 3, padding=1)

    def forward(self, z):
        squeeze = z.ndim == 3
        x = z[None, None] if squeeze else z
        x = self.stem(x)
        skips = []
        for se, block in zip(self.enc_se, self.enc_block):
            s = se(x)
            skips.append(s)
            x = block(s)
        x = self.bottleneck(x)
        for att, block, s in zip(self.dec_att, self.dec_block, reversed(skips)):
            gated = att(s, x)
            x = F.interpolate(x, size=gated.shape[2:], mode="trilinear", align_corners=False)
            x = block(torch.cat([x, gated], dim=1))
        out = torch.sigmoid(self.tail(x))
        return out[0, 0] if squeeze else out


@dataclass
class ParameterState:
    """Named parameter tensors of one network, handed between stages."""

    tensors: dict[str, torch.Tensor]
    iteration_counter: int = 0
    provenance: str = "kaiming_init"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise ValueError(f"parameter tensor {name} contains non-finite values")

    def clone(self, provenance: str | None = None, iteration_counter: int | None = None) -> "ParameterState":
        return ParameterState(
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
            iteration_counter=self.iteration_counter
            if iteration_counter is None
            else iteration_counter,
            provenance=self.provenance if provenance is None else provenance,
        )

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.tensors.items():
            digest.update(name.encode())
            digest.update(t.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def _kaiming_reset(model: nn.Module, seed: int) -> None:
    """Fan-in scaled normal weights for every convolution, zero biases,
    identity normalization; deterministic given the seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv3d):
                fan_in = module.in_channels // module.groups
                for k in module.kernel_size:
                    fan_in *= k
                module.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, ChannelLayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(cfg: NetworkConfig, grid_shape: tuple[int, int, int] | None = None) -> FastResUNet3D:
    return FastResUNet3D(cfg, grid_shape)


def init_parameters(cfg: NetworkConfig) -> ParameterState:
    """Freshly seeded parameters for a network of this configuration."""
    model = build_model(cfg)
    _kaiming_reset(model, cfg.seed)
    return extract_parameters(model, iteration_counter=0, provenance="kaiming_init")


def extract_parameters(model: FastResUNet3D, iteration_counter: int, provenance: str) -> ParameterState:
    return ParameterState(
        tensors={k: v.detach().clone() for k, v in model.state_dict().items()},
        iteration_counter=iteration_counter,
        provenance=provenance,
    )


def load_parameters(model: FastResUNet3D, state: ParameterState) -> FastResUNet3D:
    target_dtype = next(model.parameters()).dtype
    model.load_state_dict({k: v.to(target_dtype) for k, v in state.tensors.items()})
    return model


def forward_volume(cfg: NetworkConfig, state: ParameterState, noise: NoiseInput) -> np.ndarray:
    """Network output volume for one parameter set and noise input."""
    model = build_model(cfg, noise.shape)
    load_parameters(model, state)
    model.eval()
    with torch.no_grad():
        out = model(torch.tensor(noise.values, dtype=torch.float32))
    return out.numpy().astype(np.float64)


def count_parameters(cfg: NetworkConfig) -> int:
    return sum(p.numel() for p in build_model(cfg).parameters())


def save_checkpoint(
    path,
    state: ParameterState,
    cfg: NetworkConfig,
    noise_sha256: str | None = None,
) -> None:
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA,
            "config_hash": config_hash(cfg),
            "provenance": state.provenance,
            "iteration_counter": state.iteration_counter,
            "noise_sha256": noise_sha256,
            "tensors": {k: v.detach().cpu() for k, v in state.tensors.items()},
        },
        path,
    )


def load_checkpoint(path, cfg: NetworkConfig) -> ParameterState:
    doc = torch.load(path, weights_only=True)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise FormatError(f"unsupported checkpoint schema in {path}")
    if doc.get("config_hash") != config_hash(cfg):
        raise FormatError(
            f"checkpoint {path} was written for a different network configuration"
        )
    return ParameterState(
        tensors=doc["tensors"],
        iteration_counter=int(doc["iteration_counter"]),
        provenance=doc["provenance"],
    )

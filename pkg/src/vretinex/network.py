"""Reflectance estimation network.

A U-Net maps a brightness plane V to a positive inverse-illumination
plane L; the reflectance is the elementwise product R = V * L and is
what the enhancement pipeline treats as the corrected brightness. The
network never reconstructs V from its outputs, so nothing is lost to a
reconstruction objective.

Architecture: 19 convolutions in total, arranged as four encoder stages
(two 3x3 same-padded convs each), a two-conv bottleneck, four decoder
stages (two convs each, fed by bilinear 2x upsampling concatenated with
the matching encoder features) and one final linear 3x3 conv. ReLU
follows every conv except the final one, downsampling is 2x2 max-pool,
and there is no normalization anywhere. Channel widths double from
`base_channels` at full resolution to 16x at the bottleneck.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

DOWNSAMPLE_FACTOR = 16  # four 2x halvings
TOTAL_CONV_LAYERS = 19

CHECKPOINT_MAGIC = b"VRTXCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be read or does not match."""


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor stored alongside the weights.

    positivity selects how the final conv output is mapped to a strictly
    positive L: "softplus" (unbounded above) or "sigmoid" (scaled to
    (0, l_max]).
    """

    base_channels: int = 16
    positivity: str = "softplus"
    l_max: float = 10.0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.positivity not in ("softplus", "sigmoid"):
            raise ValueError(f"unknown positivity {self.positivity!r}")
        if self.l_max <= 0.0:
            raise ValueError("l_max must be positive")


class ForwardOutput(NamedTuple):
    """Inverse illumination L and reflectance R = V * L."""

    inverse_illumination: np.ndarray | Tensor
    reflectance: np.ndarray | Tensor


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class ReflectanceNet(nn.Module):
    """U-Net producing (L, R) from a batched brightness tensor (B, 1, H, W)."""

    def __init__(self, spec: ArchSpec = ArchSpec()):
        super().__init__()
        self.spec = spec
        b = spec.base_channels

        self.enc1 = _double_conv(1, b)
        self.enc2 = _double_conv(b, 2 * b)
        self.enc3 = _double_conv(2 * b, 4 * b)
        self.enc4 = _double_conv(4 * b, 8 * b)
        self.bottleneck = _double_conv(8 * b, 16 * b)
        self.dec4 = _double_conv(16 * b + 8 * b, 8 * b)
        self.dec3 = _double_conv(8 * b + 4 * b, 4 * b)
        self.dec2 = _double_conv(4 * b + 2 * b, 2 * b)
        self.dec1 = _double_conv(2 * b + b, b)
        self.final = nn.Conv2d(b, 1, 3, padding=1)

        self.pool = nn.MaxPool2d(2, stride=2)

    def _positive(self, x: Tensor) -> Tensor:
        if self.spec.positivity == "softplus":
            return F.softplus(x)
        return torch.sigmoid(x) * self.spec.l_max

    def forward(self, v: Tensor) -> ForwardOutput:
        if v.ndim != 4 or v.shape[1] != 1:
            raise ValueError(f"expected a (B, 1, H, W) tensor, got {tuple(v.shape)}")
        h, w = v.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"spatial dims {h}x{w} are not divisible by {DOWNSAMPLE_FACTOR}; "
                "pad or resize the input first"
            )

        e1 = self.enc1(v)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        x = self.bottleneck(self.pool(e4))

        def up(t: Tensor) -> Tensor:
            return F.interpolate(
                t, scale_factor=2, mode="bilinear", align_corners=False
            )

        x = self.dec4(torch.cat([up(x), e4], dim=1))
        x = self.dec3(torch.cat([up(x), e3], dim=1))
        x = self.dec2(torch.cat([up(x), e2], dim=1))
        x = self.dec1(torch.cat([up(x), e1], dim=1))

        l = self._positive(self.final(x))
        r = v * l
        return ForwardOutput(inverse_illumination=l, reflectance=r)


def conv_layer_count(net: ReflectanceNet) -> int:
    return sum(1 for m in net.modules() if isinstance(m, nn.Conv2d))


def init_network(spec: ArchSpec = ArchSpec(), seed: int = 0) -> ReflectanceNet:
    """Build a network with kaiming fan-in weights and zero biases.

    Weights are normal with variance 2 / fan_in; the same seed always
    produces bitwise-identical parameters.
    """
    net = ReflectanceNet(spec)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                module.weight.normal_(0.0, std, generator=gen)
                module.bias.zero_()
    net.eval()
    return net


def _plane_to_tensor(v: np.ndarray, net: ReflectanceNet) -> Tensor:
    v = np.asarray(v)
    if v.ndim != 2:
        raise ValueError(f"expected an (H, W) plane, got shape {v.shape}")
    dtype = next(net.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(v)).to(dtype)[None, None]


def forward(net: ReflectanceNet, v: np.ndarray) -> ForwardOutput:
    """Run one plane through the network, returning numpy planes."""
    with torch.no_grad():
        out = net(_plane_to_tensor(v, net))
    return ForwardOutput(
        inverse_illumination=out.inverse_illumination[0, 0].numpy(),
        reflectance=out.reflectance[0, 0].numpy(),
    )


def forward_pair(
    net: ReflectanceNet, v: np.ndarray, v_disturbed: np.ndarray
) -> tuple[ForwardOutput, ForwardOutput]:
    """Run the original and disturbed planes through the same weights."""
    if np.asarray(v).shape != np.asarray(v_disturbed).shape:
        raise ValueError("v and v_disturbed must share dimensions")
    return forward(net, v), forward(net, v_disturbed)


def save_checkpoint(path: str | Path, net: ReflectanceNet) -> None:
    """Serialize arch fields and named parameter tensors.

    The container is deliberately timestamp-free so identical parameters
    always produce identical bytes: magic, version, a JSON header
    describing the architecture and every tensor (name/shape/dtype), then
    the raw little-endian tensor data in header order.
    """
    state = net.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes("C"))
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(net.spec),
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> ReflectanceNet:
    """Rebuild a network from a checkpoint file.

    Raises CheckpointError on malformed files, unknown versions, or any
    tensor whose name or shape does not match the stored architecture;
    the error names the offending tensor.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}"
            )
        net = ReflectanceNet(ArchSpec(**header["arch"]))
        expected = net.state_dict()
        stored_names = [t["name"] for t in header["tensors"]]
        if list(expected.keys()) != stored_names:
            missing = set(expected) - set(stored_names)
            extra = set(stored_names) - set(expected)
            offender = next(iter(missing or extra))
            raise CheckpointError(
                f"{path}: tensor set does not match architecture "
                f"(first mismatch: {offender!r})"
            )
        state = {}
        for entry in header["tensors"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            want = tuple(expected[name].shape)
            if shape != want:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {shape}, architecture "
                    f"expects {want}"
                )
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
            state[name] = torch.from_numpy(
                np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            )
        net.load_state_dict(state)
        net.eval()
        return net

"""Convolutional noise predictor for per-component-tank schedule images.

Input images have shape ``(batch, 1, n_pt, n_periods)``.  Every convolution
uses a ``(n_pt, 5)`` kernel with same-padding, so a single hidden unit spans
all product tanks after two layers; only the one max-pool / transposed-conv
pair touches the time axis, halving and restoring it.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"DMOCKPT\\0"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON: {"hyperparameters": {...},
                           "tensors": [{"name", "shape", "offset", "count"}, ...]}
    payload   float32 little-endian, row-major, tensors in directory order;
              ``offset`` counts float32 elements from the payload start
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    HyperparameterMismatchError,
    ShapeError,
    TruncatedPayloadError,
    UnknownTensorError,
)

CHECKPOINT_MAGIC = b"DMOCKPT\0"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    n_pt: int
    steps: int  # diffusion step count T the model is trained for
    channels: int = 32
    kernel_width: int = 5


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class Block(nn.Module):
    """conv -> batch norm -> + time projection -> ReLU"""

    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int], emb_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, padding="same")
        self.norm = nn.BatchNorm2d(c_out)
        self.time = nn.Linear(emb_dim, c_out)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x)) + self.time(emb)[:, :, None, None]
        return torch.relu(h)


class DenoiserModel(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.channels
        k = (config.n_pt, config.kernel_width)
        self.time_mlp = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, c))
        self.inc = Block(1, c, k, c)
        self.enc1 = Block(c, c, k, c)
        self.enc2 = Block(c, c, k, c)
        self.down = nn.MaxPool2d((1, 2))
        self.mid1 = Block(c, c, k, c)
        self.mid2 = Block(c, c, k, c)
        self.up = nn.ConvTranspose2d(c, c, (1, 2), stride=(1, 2))
        self.dec1 = Block(2 * c, c, k, c)
        self.dec2 = Block(c, c, k, c)
        self.out = nn.Conv2d(c, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def embed(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.config.channels).to(self.out.weight.dtype)
        return self.time_mlp(emb)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.config.n_pt:
            raise ShapeError(f"expected (batch, 1, {self.config.n_pt}, n), got {tuple(x.shape)}")
        if x.shape[-1] % 2:
            raise ShapeError(f"period count {x.shape[-1]} is odd; pad the horizon to an even length")
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        emb = self.embed(t)
        h = self.inc(x, emb)
        h = h + self.enc1(h, emb)
        skip = h + self.enc2(h, emb)
        m = self.down(skip)
        m = m + self.mid1(m, emb)
        m = m + self.mid2(m, emb)
        u = self.up(m)
        d = u + self.dec1(torch.cat([u, skip], dim=1), emb)
        d = d + self.dec2(d, emb)
        return self.out(d)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: DenoiserConfig, seed: int = 0) -> DenoiserModel:
    torch.manual_seed(seed)
    return DenoiserModel(config)


def predict_noise(model: DenoiserModel, x: np.ndarray, t: int) -> np.ndarray:
    """Inference-mode ε̂ for a stack of images ``(batch, n_pt, n)`` at one step."""
    model.eval()
    dtype = model.out.weight.dtype
    xt = torch.from_numpy(np.ascontiguousarray(x)).to(dtype)[:, None]
    tt = torch.full((xt.shape[0],), t, dtype=torch.int64)
    with torch.no_grad():
        out = model(xt, tt)
    return out[:, 0].to(torch.float64).numpy()


def backward(model: DenoiserModel, x: torch.Tensor, t: torch.Tensor, cotangent: torch.Tensor) -> dict[str, torch.Tensor]:
    """Parameter gradients of ``<cotangent, model(x, t)>`` in the model's current mode."""
    params = dict(model.named_parameters())
    out = model(x, t)
    grads = torch.autograd.grad(out, list(params.values()), grad_outputs=cotangent, allow_unused=True)
    return {name: (torch.zeros_like(p) if g is None else g) for (name, p), g in zip(params.items(), grads)}


# --- checkpoint I/O -------------------------------------------------------------

def _state_tensors(model: DenoiserModel) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}


def save_checkpoint(model: DenoiserModel, path) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, tensor in _state_tensors(model).items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    header = json.dumps({"hyperparameters": asdict(model.config), "tensors": directory}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path, expect_n_pt: int | None = None, expect_steps: int | None = None) -> DenoiserModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a denoiser checkpoint (bad magic)")
    if len(data) < 16:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    if len(data) < 16 + header_len:
        raise TruncatedPayloadError(f"{path}: truncated header")
    header = json.loads(data[16:16 + header_len])
    config = DenoiserConfig(**header["hyperparameters"])
    if expect_n_pt is not None and config.n_pt != expect_n_pt:
        raise HyperparameterMismatchError(f"{path}: model built for n_pt={config.n_pt}, instance has {expect_n_pt}")
    if expect_steps is not None and config.steps != expect_steps:
        raise HyperparameterMismatchError(f"{path}: model trained for T={config.steps}, requested T={expect_steps}")

    model = DenoiserModel(config)
    expected = _state_tensors(model)
    payload = data[16 + header_len:]
    state = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise UnknownTensorError(f"{path}: unknown tensor name {name!r}")
        start, count = 4 * entry["offset"], entry["count"]
        if start + 4 * count > len(payload):
            raise TruncatedPayloadError(f"{path}: truncated payload in tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise HyperparameterMismatchError(f"{path}: tensor {name!r} has shape {arr.shape}")
        state[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state, strict=False)
    model.eval()
    return model

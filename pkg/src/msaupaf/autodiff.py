"""Differentiable array primitives used by the network.

Tensors and the reverse-mode graph come from torch; this module pins the
shape contracts, the initialization rule, a central-difference gradient
checker and the ``MSPW`` parameter checkpoint format.  All primitives take
batched ``N x C x H x W`` tensors; ``conv2d`` also accepts a single
``C x H x W`` sample.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

MSPW_MAGIC = b"MSPW"
MSPW_VERSION = 1


class ShapeError(ValueError):
    pass


def _require_4d(x: torch.Tensor, name: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name}: expected N x C x H x W, got shape {tuple(x.shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None):
    """Cross-correlation with "same" padding by default (odd kernels only)."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    _require_4d(x, "conv2d input")
    if weight.dim() != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got {tuple(weight.shape)}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({c_out},)")
    if padding is None:
        padding = (kh - 1) // 2
    y = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return y.squeeze(0) if squeeze else y


def max_pool2(x):
    """2x2 max pooling, stride 2; ties go to the first cell in row-major order."""
    _require_4d(x, "max_pool2")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2 needs even spatial size, got {tuple(x.shape[2:])}")
    return F.max_pool2d(x, 2)


def nearest_upsample(x, factor: int = 2):
    _require_4d(x, "nearest_upsample")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def relu(x):
    return F.relu(x)


def leaky_relu(x, slope: float = 0.01):
    return F.leaky_relu(x, slope)


def softmax_channels(x):
    return torch.softmax(x, dim=1 if x.dim() == 4 else 0)


def channel_concat(xs: Sequence[torch.Tensor]):
    if not xs:
        raise ShapeError("channel_concat of nothing")
    ref = xs[0]
    for x in xs:
        _require_4d(x, "channel_concat")
        if x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"channel_concat: shapes {tuple(ref.shape)} and {tuple(x.shape)} disagree"
            )
    return torch.cat(list(xs), dim=1)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return a + b


def scalar_mul(x, s: float):
    return x * s


def global_matmul(a, b):
    """Batched matrix product ``(N, m, k) @ (N, k, n)``."""
    if a.dim() != 3 or b.dim() != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"global_matmul: incompatible {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.bmm(a, b)


def he_init(shape: Sequence[int], generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Normal init scaled by fan-in (``std = sqrt(2 / fan_in)``)."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    std = math.sqrt(2.0 / max(fan_in, 1))
    return torch.randn(tuple(shape), generator=generator, dtype=dtype) * std


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_per_input: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    kink_tol: float = 1e-3,
) -> GradCheckResult:
    """Compare autograd gradients with central differences.

    ``fn`` maps the inputs to a tensor; it is reduced to a scalar with a fixed
    random projection.  Points where the one-sided differences disagree (a
    kink such as relu at 0 or a max tie) are excluded, not failed.  Relative
    error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = [x.detach().to(torch.float64).clone() for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out0 = fn(*inputs)
    proj = torch.randn(out0.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs):
        return (fn(*xs) * proj).sum()

    leaves = [x.clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = excluded = 0
    with torch.no_grad():
        f0 = float(scalar(*inputs))
        for i, x in enumerate(inputs):
            n = x.numel()
            idx = np.arange(n)
            if max_per_input is not None and n > max_per_input:
                idx = np.sort(rng.choice(n, size=max_per_input, replace=False))
            flat = x.view(-1)
            g = analytic[i]
            g = torch.zeros_like(x) if g is None else g
            gflat = g.reshape(-1)
            for k in idx:
                orig = float(flat[k])
                flat[k] = orig + eps
                fp = float(scalar(*inputs))
                flat[k] = orig - eps
                fm = float(scalar(*inputs))
                flat[k] = orig
                fwd = (fp - f0) / eps
                bwd = (f0 - fm) / eps
                num = (fp - fm) / (2 * eps)
                if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
                    excluded += 1
                    continue
                a = float(gflat[k])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
                checked += 1
    return GradCheckResult(worst, checked, excluded)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: Mapping[str, torch.Tensor | np.ndarray], path: str | Path) -> None:
    """Write parameters as ``MSPW``: magic, u32 version, then per parameter
    (u32 name length, name, u32 rank, u32 extents, float32 values), all
    little-endian."""
    chunks = [MSPW_MAGIC, struct.pack("<I", MSPW_VERSION)]
    for name, value in params.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MSPW_MAGIC:
        raise ValueError(f"{path}: not an MSPW checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MSPW_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {pos}") from exc
    return out

"""Thin-plate-spline spatial transformer.

A localization network predicts ``K`` source control points on the input
image.  Together with ``K`` fixed target points on the top and bottom borders
of the output image they determine a thin-plate spline, which maps every
output pixel to a sampling location in the input; a bilinear sampler then
reads the rectified image.

Coordinates are normalized to ``[0, 1] x [0, 1]`` as ``(x, y)`` with pixel
centers at ``(i + 0.5) / n``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .nn import BatchNorm, Conv2d, Linear, Module
from .tensor import Tensor


class SingularSystemError(np.linalg.LinAlgError):
    """The TPS system matrix is (numerically) singular."""


def radial_basis(d) -> np.ndarray:
    """``|d|^2 log|d|`` over the last axis, with the limit value 0 at ``d = 0``."""
    d = np.asarray(d, dtype=np.float64)
    return _rbf_from_sq(np.sum(d * d, axis=-1))


def _rbf_from_sq(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


@dataclass
class ControlPoints:
    points: np.ndarray  # K x 2, (x, y)
    role: str = "source"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        k = self.points.shape[0]
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"control points must be K x 2, got {self.points.shape}")
        if k < 4 or k % 2:
            raise ValueError(f"K must be even and >= 4, got {k}")
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")

    @property
    def k(self) -> int:
        return self.points.shape[0]


def target_control_points(k: int = 10, margin: float = 0.05) -> ControlPoints:
    """``k / 2`` evenly spaced points along each of the top and bottom borders."""
    if k < 4 or k % 2:
        raise ValueError(f"K must be even and >= 4, got {k}")
    xs = np.linspace(margin, 1.0 - margin, k // 2)
    top = np.stack([xs, np.full_like(xs, margin)], axis=1)
    bottom = np.stack([xs, np.full_like(xs, 1.0 - margin)], axis=1)
    return ControlPoints(np.concatenate([top, bottom]), role="target")


def system_matrix(target: np.ndarray) -> np.ndarray:
    """The ``(K+3) x (K+3)`` TPS matrix ``[[S, 1, C], [1^T, 0, 0], [C^T, 0, 0]]``."""
    c = np.asarray(target, dtype=np.float64)
    k = c.shape[0]
    diff = c[:, None, :] - c[None, :, :]
    mat = np.zeros((k + 3, k + 3))
    mat[:k, :k] = _rbf_from_sq(np.sum(diff * diff, axis=-1))
    mat[:k, k] = 1.0
    mat[:k, k + 1:] = c
    mat[k, :k] = 1.0
    mat[k + 1:, :k] = c.T
    return mat


def gauss_solve(a: np.ndarray, b: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = a.shape[0]
    scale = np.abs(a).max()
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) <= rtol * scale:
            with np.errstate(all="ignore"):
                cond = np.linalg.cond(np.asarray(a))
            raise SingularSystemError(
                f"singular TPS system (pivot {a[piv, col]:.3e} at column {col}, "
                f"condition estimate {cond:.3e}); target points are degenerate")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= factors[:, None] * a[col, col:]
        x[col + 1:] -= factors[:, None] * x[col]
    for col in range(n - 1, -1, -1):
        x[col] = (x[col] - a[col, col + 1:] @ x[col + 1:]) / a[col, col]
    return x[:, 0] if squeeze else x


@dataclass
class TpsTransform:
    """``source = a + target @ b + phi(target) @ w`` for row-vector points."""

    a: np.ndarray  # (2,)
    b: np.ndarray  # (2, 2)
    w: np.ndarray  # (K, 2)
    target_points: ControlPoints

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        c = self.target_points.points
        diff = p[..., None, :] - c
        phi = _rbf_from_sq(np.sum(diff * diff, axis=-1))
        return self.a + p @ self.b + phi @ self.w


def solve_tps(source: ControlPoints, target: ControlPoints) -> TpsTransform:
    if source.k != target.k:
        raise ValueError(f"source has {source.k} points, target has {target.k}")
    k = target.k
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = source.points
    sol = gauss_solve(system_matrix(target.points), rhs)
    return TpsTransform(a=sol[k], b=sol[k + 1:], w=sol[:k], target_points=target)


def pixel_centers(out_h: int, out_w: int) -> np.ndarray:
    """``out_h x out_w x 2`` lattice of normalized pixel centers ``(x, y)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"grid extents must be >= 1, got {out_h}x{out_w}")
    xs = (np.arange(out_w) + 0.5) / out_w
    ys = (np.arange(out_h) + 0.5) / out_h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass
class SamplingGrid:
    coords: np.ndarray  # H_out x W_out x 2

    def __post_init__(self):
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("sampling grid contains non-finite coordinates")


def generate_grid(t: TpsTransform, out_h: int, out_w: int) -> SamplingGrid:
    return SamplingGrid(t.apply(pixel_centers(out_h, out_w)))


def bilinear_sample(image, grid) -> Tensor:
    coords = grid.coords if isinstance(grid, SamplingGrid) else grid
    return ops.bilinear_sample(image, coords)


class GridGenerator:
    """Maps batched source points ``N x K x 2`` to sampling grids.

    The grid is linear in the source points, so the solve happens once:
    ``grid = G @ source`` with ``G`` of shape ``(H_out * W_out) x K``.
    """

    def __init__(self, target: ControlPoints, out_h: int, out_w: int):
        k = target.k
        self.target = target
        self.out_h, self.out_w = out_h, out_w
        rhs = np.zeros((k + 3, k))
        rhs[:k] = np.eye(k)
        inv = gauss_solve(system_matrix(target.points), rhs)  # (K+3) x K
        p = pixel_centers(out_h, out_w).reshape(-1, 2)
        diff = p[:, None, :] - target.points
        basis = np.concatenate(
            [_rbf_from_sq(np.sum(diff * diff, axis=-1)), np.ones((len(p), 1)), p], axis=1)
        self.matrix = basis @ inv

    def __call__(self, source: Tensor) -> Tensor:
        g = self.matrix.astype(source.dtype)
        grid = ops.matmul(g, source)
        return ops.reshape(grid, (source.shape[0], self.out_h, self.out_w, 2))


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


class LocalizationNetwork(Module):
    """Six 3x3 convolutions and two fully connected layers regressing ``2K`` values.

    Each convolution strides by 2 in both axes until the height reaches 1,
    then only horizontally.  The last layer starts with zero weights and a
    bias placing every point on its target, so the untrained transform is
    the identity.
    """

    def __init__(self, in_h: int, in_w: int, channels: Sequence[int], fc_units: int,
                 target: ControlPoints, rng: np.random.Generator, dtype=np.float64):
        self.convs = []
        self.norms = []
        h, w, c_in = in_h, in_w, 3
        for c_out in channels:
            stride = (2 if h > 1 else 1, 2)
            self.convs.append(Conv2d(c_in, c_out, 3, rng, stride=stride, dtype=dtype))
            self.norms.append(BatchNorm(c_out, dtype))
            h, w = -(-h // stride[0]), -(-w // stride[1])
            c_in = c_out
        self.fc1 = Linear(h * w * c_in, fc_units, rng, dtype)
        self.fc2 = Linear(fc_units, 2 * target.k, rng, dtype)
        self.fc2.weight.data[...] = 0.0
        self.fc2.bias.data[...] = _logit(target.points.reshape(-1))
        self._k = target.k

    def forward(self, images: Tensor) -> Tensor:
        x = images
        for conv, norm in zip(self.convs, self.norms):
            x = ops.relu(norm(conv(x)))
        x = ops.reshape(x, (x.shape[0], -1))
        x = ops.relu(self.fc1(x))
        pts = ops.sigmoid(self.fc2(x))
        return ops.reshape(pts, (x.shape[0], self._k, 2))


class Rectifier(Module):
    """Localization network, TPS grid generator and sampler."""

    def __init__(self, in_h: int, in_w: int, k: int, channels: Sequence[int], fc_units: int,
                 rng: np.random.Generator, dtype=np.float64, margin: float = 0.05):
        self._target = target_control_points(k, margin)
        self.loc = LocalizationNetwork(in_h, in_w, channels, fc_units, self._target, rng, dtype)
        self._grid = GridGenerator(self._target, in_h, in_w)

    @property
    def target(self) -> ControlPoints:
        return self._target

    def localize(self, images: Tensor) -> Tensor:
        return self.loc(images)

    def forward(self, images: Tensor):
        """Returns ``(rectified images, source points N x K x 2)``."""
        source = self.localize(images)
        grid = self._grid(source)
        return ops.bilinear_sample(images, grid), source


def localize(image: Tensor, rectifier: Rectifier) -> ControlPoints:
    """Source control points for a single ``H x W x 3`` image."""
    batch = ops.reshape(image, (1,) + tuple(image.shape))
    pts = rectifier.localize(batch)
    return ControlPoints(pts.data[0].astype(np.float64), role="source")

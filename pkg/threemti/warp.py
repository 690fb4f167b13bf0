"""Parametric homographies for misalignment augmentation.

Coordinates are normalized and centred on the image: a pixel centre (x, y)
maps to u = (x + 0.5) / W - 0.5, v = (y + 0.5) / H - 0.5, with v pointing
down. The matrix is always composed in the same order,

    H = P @ R @ S @ T

so translation is applied first, then isotropic scale, rotation about the
centre, and finally the corner-jitter perspective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from threemti.errors import BadRange, SingularWarp

DET_EPS = 1e-9
UNIT_CORNERS = ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5))
ZERO_JITTER = ((0.0, 0.0),) * 4

Interval = tuple[float, float]
Jitter = tuple[tuple[float, float], ...]
Matrix = tuple[tuple[float, float, float], ...]


def _as_jitter(value: Any) -> Jitter:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (4, 2):
        raise ValueError(f"corner_jitter must be 4x2, got shape {arr.shape}")
    return tuple((float(x), float(y)) for x, y in arr)


def _as_matrix(value: Any) -> Matrix:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got shape {arr.shape}")
    return tuple(tuple(float(v) for v in row) for row in arr)


def _check_invertible(m: np.ndarray) -> None:
    det = float(np.linalg.det(m))
    if not math.isfinite(det) or abs(det) <= DET_EPS:
        raise SingularWarp(f"homography is singular (det={det:.3e})")


def translation_matrix(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def scale_matrix(s: float) -> np.ndarray:
    return np.array([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(theta_deg: float) -> np.ndarray:
    if theta_deg == 0.0:
        return np.eye(3)
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def perspective_matrix(corner_jitter: Jitter) -> np.ndarray:
    """Homography taking the unit corners to the unit corners plus jitter."""
    if all(dx == 0.0 and dy == 0.0 for dx, dy in corner_jitter):
        return np.eye(3)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (dx, dy)) in enumerate(zip(UNIT_CORNERS, corner_jitter)):
        xp, yp = x + dx, y + dy
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * xp, -y * xp]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * yp, -y * yp]
        b[2 * i] = xp
        b[2 * i + 1] = yp
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise SingularWarp(f"degenerate corner jitter: {e}") from e
    return np.append(h, 1.0).reshape(3, 3)


def _normalize(m: np.ndarray) -> np.ndarray:
    if m[2, 2] == 0.0 or not math.isfinite(m[2, 2]):
        raise SingularWarp("homography has H[2,2] == 0")
    if m[2, 2] != 1.0:
        m = m / m[2, 2]
    return m


@dataclass(frozen=True)
class WarpRanges:
    tx: Interval = (-0.05, 0.05)
    ty: Interval = (-0.05, 0.05)
    scale: Interval = (0.95, 1.05)
    theta: Interval = (-3.0, 3.0)
    corner_jitter: Interval = (-0.02, 0.02)

    @classmethod
    def from_section(cls, section: Any) -> "WarpRanges":
        return cls(
            tx=tuple(section.tx),
            ty=tuple(section.ty),
            scale=tuple(section.scale),
            theta=tuple(section.theta),
            corner_jitter=tuple(section.corner_jitter),
        )

    @classmethod
    def point(cls, params: "WarpParams | None" = None) -> "WarpRanges":
        """Ranges collapsed onto one parameter set (identity by default)."""
        p = params or WarpParams()
        jit = p.corner_jitter[0][0]
        return cls(
            tx=(p.tx, p.tx),
            ty=(p.ty, p.ty),
            scale=(p.scale, p.scale),
            theta=(p.theta, p.theta),
            corner_jitter=(jit, jit),
        )

    def validate(self) -> None:
        for name in ("tx", "ty", "scale", "theta", "corner_jitter"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise BadRange(f"{name}: lower bound {lo} exceeds upper bound {hi}")


@dataclass(frozen=True)
class WarpParams:
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    theta: float = 0.0
    corner_jitter: Jitter = ZERO_JITTER
    # explicit matrix for warps that are not expressible by the parameters
    homography: Matrix | None = field(default=None)

    def __post_init__(self) -> None:
        object.__setattr__(self, "corner_jitter", _as_jitter(self.corner_jitter))
        if self.homography is not None:
            object.__setattr__(self, "homography", _as_matrix(self.homography))
        _check_invertible(self.matrix)

    @property
    def matrix(self) -> np.ndarray:
        if self.homography is not None:
            return np.array(self.homography, dtype=np.float64)
        return parametric_matrix(self.tx, self.ty, self.scale, self.theta, self.corner_jitter)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)))

    @property
    def is_parametric(self) -> bool:
        return self.homography is None

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "WarpParams":
        """Wrap an arbitrary homography, recovering parameters for similarities."""
        m = _normalize(np.asarray(m, dtype=np.float64))
        _check_invertible(m)
        a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
        is_similarity = (
            abs(m[2, 0]) <= 1e-15
            and abs(m[2, 1]) <= 1e-15
            and abs(a - d) <= 1e-12
            and abs(b + c) <= 1e-12
        )
        if not is_similarity:
            return cls(homography=m)
        s = math.hypot(a, c)
        theta = math.degrees(math.atan2(c, a))
        tx, ty = np.linalg.solve(m[:2, :2], m[:2, 2])
        params = cls(tx=float(tx), ty=float(ty), scale=float(s), theta=float(theta))
        if np.array_equal(params.matrix, m):
            return params
        return cls(tx=params.tx, ty=params.ty, scale=params.scale, theta=params.theta, homography=m)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "tx": self.tx,
            "ty": self.ty,
            "scale": self.scale,
            "theta": self.theta,
            "corner_jitter": [list(p) for p in self.corner_jitter],
        }
        if self.homography is not None:
            out["matrix"] = [list(r) for r in self.homography]
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WarpParams":
        return cls(
            tx=float(data.get("tx", 0.0)),
            ty=float(data.get("ty", 0.0)),
            scale=float(data.get("scale", 1.0)),
            theta=float(data.get("theta", 0.0)),
            corner_jitter=data.get("corner_jitter", ZERO_JITTER),
            homography=data.get("matrix"),
        )


def parametric_matrix(
    tx: float, ty: float, scale: float, theta: float, corner_jitter: Jitter
) -> np.ndarray:
    m = (
        perspective_matrix(corner_jitter)
        @ rotation_matrix(theta)
        @ scale_matrix(scale)
        @ translation_matrix(tx, ty)
    )
    return _normalize(m)


def sample_warp(rng: np.random.Generator, ranges: WarpRanges | None = None) -> WarpParams:
    """Draw one warp; draw order is fixed so a seed always gives the same warp."""
    r = ranges or WarpRanges()
    r.validate()
    tx = float(rng.uniform(*r.tx))
    ty = float(rng.uniform(*r.ty))
    scale = float(rng.uniform(*r.scale))
    theta = float(rng.uniform(*r.theta))
    jitter = rng.uniform(r.corner_jitter[0], r.corner_jitter[1], size=(4, 2))
    return WarpParams(tx=tx, ty=ty, scale=scale, theta=theta, corner_jitter=jitter)


def compose_warps(a: WarpParams, b: WarpParams) -> WarpParams:
    """Warp equivalent to applying `b` first, then `a`."""
    return WarpParams.from_matrix(a.matrix @ b.matrix)


def invert_warp(w: WarpParams) -> WarpParams:
    m = w.matrix
    _check_invertible(m)
    return WarpParams.from_matrix(np.linalg.inv(m))


def _sampling_grid(
    w: WarpParams, height: int, width: int, dtype: torch.dtype, device: torch.device
) -> torch.Tensor:
    inv = np.linalg.inv(w.matrix)
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width - 0.5
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height - 0.5
    u, v = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    src = inv @ pts
    su = src[0] / src[2]
    sv = src[1] / src[2]
    grid = np.stack([2.0 * su, 2.0 * sv], axis=-1).reshape(height, width, 2)
    return torch.from_numpy(grid).to(device=device, dtype=dtype)


def apply_warp(img: torch.Tensor, w: WarpParams, fill: float = 0.0) -> torch.Tensor:
    """Bilinear forward warp: output(p) = input(H^-1 p); outside samples take `fill`.

    Accepts (C, H, W) or (B, C, H, W) tensors and returns the same shape.
    """
    if w.is_identity:
        return img.clone()
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    _, _, h, wd = x.shape
    grid = _sampling_grid(w, h, wd, x.dtype, x.device).unsqueeze(0).expand(x.shape[0], -1, -1, -1)
    out = _grid_sample_fill(x, grid, fill)
    return out.squeeze(0) if squeeze else out


def warp_batch(
    imgs: torch.Tensor, warps: Sequence[WarpParams], fill: float = 0.0
) -> torch.Tensor:
    """Warp each image of a (B, C, H, W) batch by its own homography."""
    if len(warps) != imgs.shape[0]:
        raise ValueError(f"need one warp per image: {len(warps)} != {imgs.shape[0]}")
    _, _, h, wd = imgs.shape
    grids = torch.stack([_sampling_grid(w, h, wd, imgs.dtype, imgs.device) for w in warps])
    return _grid_sample_fill(imgs, grids, fill)


def _grid_sample_fill(x: torch.Tensor, grid: torch.Tensor, fill: float) -> torch.Tensor:
    # zero padding on the shifted image makes out-of-bounds taps equal `fill`
    shifted = x - fill if fill != 0.0 else x
    out = F.grid_sample(shifted, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out + fill if fill != 0.0 else out

"""Synthetic RGB/thermal scene pairs sharing one geometry.

Each scene is a textured background with 3-10 primitives (rectangles, disks,
thick lines). A primitive gets an RGB colour plus stripe texture and, on the
same pixel mask, a "temperature". Both colour and temperature are drawn with a
minimum contrast against what lies underneath, so every thermal edge has an
RGB edge on top of it.
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from skimage.draw import disk, polygon, rectangle

from threemti.errors import InputTooSmall

MIN_SCENE_SIZE = 64
PRIMITIVES = ("rect", "disk", "line")
LUMA = np.array([0.299, 0.587, 0.114])

MIN_TEMPERATURE_GAP = 0.2
MIN_LUMA_GAP = 0.3
STRIPE_AMPLITUDE = 0.05


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.2, 0.8, size=3)
    texture = np.stack([_smooth_noise(rng, size, size / 16) for _ in range(3)], axis=-1)
    grain = rng.standard_normal((size, size, 3)) * 0.01
    rgb = base + 0.08 * texture + grain

    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    thermal = rng.uniform(0.2, 0.5) + 0.1 * ramp + 0.04 * _smooth_noise(rng, size, size / 8)
    return np.clip(rgb, 0.0, 1.0), np.clip(thermal, 0.0, 1.0)


def _primitive_mask(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rect":
        h, w = rng.integers(size // 10, size // 3, size=2)
        r0 = rng.integers(0, size - h)
        c0 = rng.integers(0, size - w)
        rr, cc = rectangle((r0, c0), extent=(h, w), shape=mask.shape)
    elif kind == "disk":
        radius = rng.uniform(size / 20, size / 6)
        centre = rng.uniform(radius, size - radius, size=2)
        rr, cc = disk(tuple(centre), radius, shape=mask.shape)
    else:
        p0, p1 = rng.uniform(0, size, size=(2, 2))
        direction = p1 - p0
        length = np.linalg.norm(direction)
        if length < 1e-6:
            direction, length = np.array([1.0, 0.0]), 1.0
        normal = np.array([-direction[1], direction[0]]) / length
        half = rng.uniform(size / 64, size / 24)
        offset = half * normal
        corners = np.stack([p0 + offset, p1 + offset, p1 - offset, p0 - offset])
        rr, cc = polygon(corners[:, 0], corners[:, 1], shape=mask.shape)
    mask[rr, cc] = True
    return mask


def _pick_contrasting(draw: Callable[[], tuple[Any, float]], under: float, gap: float) -> Any:
    """Redraw until the drawn score differs from `under` by at least `gap`."""
    value, score = draw()
    for _ in range(64):
        if abs(score - under) >= gap:
            break
        value, score = draw()
    return value


def _stripes(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    freq = rng.uniform(2.0, 12.0) / size * 2 * np.pi
    angle = rng.uniform(0, np.pi)
    return np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))


def generate_toy_scene(
    rng: np.random.Generator, size: int = 256
) -> tuple[torch.Tensor, torch.Tensor]:
    """Render one (rgb (3, S, S), thermal (1, S, S)) pair in [0, 1]."""
    if size < MIN_SCENE_SIZE:
        raise InputTooSmall(f"scene size must be >= {MIN_SCENE_SIZE}, got {size}")
    rgb, thermal = _background(rng, size)
    count = int(rng.integers(3, 11))
    for _ in range(count):
        kind = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
        mask = _primitive_mask(kind, rng, size)
        if not mask.any():
            continue

        def draw_temperature() -> tuple[float, float]:
            t = float(rng.uniform(0.05, 0.95))
            return t, t

        def draw_color() -> tuple[np.ndarray, float]:
            c = rng.uniform(0.0, 1.0, size=3)
            return c, float(c @ LUMA)

        temp = _pick_contrasting(draw_temperature, float(thermal[mask].mean()), MIN_TEMPERATURE_GAP)
        color = _pick_contrasting(draw_color, float((rgb[mask] @ LUMA).mean()), MIN_LUMA_GAP)

        stripes = _stripes(rng, size)
        rgb[mask] = np.clip(color + STRIPE_AMPLITUDE * stripes[mask, None], 0.0, 1.0)
        warmth = 0.02 * _smooth_noise(rng, size, size / 16)
        thermal[mask] = np.clip(temp + warmth[mask], 0.0, 1.0)

    rgb_t = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1))).float()
    thermal_t = torch.from_numpy(np.ascontiguousarray(thermal[None])).float()
    return rgb_t, thermal_t

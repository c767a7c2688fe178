"""Synthetic ground-truth scenes and diffuser PSFs.

Everything here is a pure function of (spec, seed): sinusoidally moving
balls over flat or checkered backgrounds, Gaussian-spot pseudorandom PSFs,
and box downsampling for matching a sensor's working grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Psf

__all__ = [
    "SceneError",
    "SceneSpec",
    "PsfSpec",
    "make_sine_ball",
    "make_dense_scene",
    "make_psf",
    "downsample_video",
    "render_disk",
]


class SceneError(Exception):
    pass


@dataclass
class SceneSpec:
    m: int = 48
    n: int = 48
    k: int = 48
    channels: int = 3
    background: str = "flat"          # flat | checkerboard | texture
    background_color: tuple = (0.15, 0.15, 0.15)
    checker_period: int = 8
    checker_colors: tuple = ((0.1, 0.1, 0.1), (0.6, 0.6, 0.6))
    texture: np.ndarray | None = None  # (>=m, >=n, C) floats in [0,1]
    ball_radius: float = 4.0
    ball_color: tuple = (1.0, 0.3, 0.2)
    # sinusoidal trajectory: center (y0, x0), y amplitude, periods over K, phase
    center: tuple | None = None
    amplitude: float = 12.0
    periods: float = 1.5
    phase: float = 0.0
    field_stop_margin: int = 2
    seed: int = 0


@dataclass
class PsfSpec:
    m: int = 15
    n: int = 15
    spots: int = 20
    sigma: float = 0.8
    # optional broad centered glow mixed with the speckle spots. Real
    # diffusers show both scales; for reconstruction the glow's smooth
    # autocorrelation gives data-term gradients long spatial range while the
    # sharp spots keep fine localization.
    glow_weight: float = 0.0
    glow_sigma: float = 8.0
    seed: int = 0


def render_disk(m: int, n: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Antialiased disk coverage in [0,1]: linear falloff over one pixel."""
    yy, xx = np.mgrid[0:m, 0:n]
    dist = np.hypot(yy - cy, xx - cx)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _background_frame(spec: SceneSpec) -> np.ndarray:
    c = spec.channels
    if spec.background == "flat":
        return np.broadcast_to(np.asarray(spec.background_color[:c]),
                               (spec.m, spec.n, c)).copy()
    if spec.background == "checkerboard":
        yy, xx = np.mgrid[0 : spec.m, 0 : spec.n]
        parity = ((yy // spec.checker_period) + (xx // spec.checker_period)) % 2
        c0 = np.asarray(spec.checker_colors[0][:c])
        c1 = np.asarray(spec.checker_colors[1][:c])
        return np.where(parity[..., None] == 0, c0, c1)
    if spec.background == "texture":
        if spec.texture is None:
            raise SceneError("texture background requires a texture array")
        tex = np.asarray(spec.texture, dtype=np.float64)
        if tex.shape[0] < spec.m or tex.shape[1] < spec.n:
            raise SceneError("texture smaller than the scene grid")
        return tex[: spec.m, : spec.n, :c].copy()
    raise SceneError(f"unknown background {spec.background!r}")


def _apply_field_stop(video: np.ndarray, margin: int) -> np.ndarray:
    if margin <= 0:
        return video
    out = np.zeros_like(video)
    out[margin:-margin, margin:-margin] = video[margin:-margin, margin:-margin]
    return out


def sine_trajectory(spec: SceneSpec) -> np.ndarray:
    """Analytic (K, 2) centroid trajectory (y, x) of the moving ball."""
    y0, x0 = spec.center if spec.center is not None else (spec.m / 2.0, spec.n / 2.0)
    t = np.arange(spec.k)
    y = y0 + spec.amplitude * np.sin(2.0 * math.pi * spec.periods * t / spec.k + spec.phase)
    x = np.full(spec.k, float(x0))
    return np.stack([y, x], axis=1)


def make_sine_ball(spec: SceneSpec):
    """Ball on a sinusoidal y-trajectory over a background.

    Returns (video (M,N,K,C), trajectory (K,2) as (y,x)).
    """
    if spec.ball_radius < 1:
        raise SceneError("ball radius must be >= 1 px")
    traj = sine_trajectory(spec)
    margin = spec.field_stop_margin
    r = spec.ball_radius
    if np.any(traj[:, 0] - r < margin) or np.any(traj[:, 0] + r >= spec.m - margin) \
            or np.any(traj[:, 1] - r < margin) or np.any(traj[:, 1] + r >= spec.n - margin):
        raise SceneError("trajectory exits the field-stop region")
    bg = _background_frame(spec)
    color = np.asarray(spec.ball_color[: spec.channels])
    video = np.empty((spec.m, spec.n, spec.k, spec.channels))
    for t in range(spec.k):
        cov = render_disk(spec.m, spec.n, traj[t, 0], traj[t, 1], r)[..., None]
        video[:, :, t] = (1.0 - cov) * bg + cov * color
    video = _apply_field_stop(np.clip(video, 0.0, 1.0), margin)
    return video, traj


def make_dense_scene(spec: SceneSpec):
    """High-frequency background with a moving occluding sprite.

    The sprite follows the same parametric trajectory as the sine ball but a
    seeded random phase makes distinct seeds distinct scenes.
    Returns (video, trajectory).
    """
    rng = np.random.default_rng(spec.seed)
    phase = spec.phase + rng.uniform(0.0, 2.0 * math.pi)
    moved = SceneSpec(**{**spec.__dict__, "phase": phase})
    return make_sine_ball(moved)


def make_psf(spec: PsfSpec) -> Psf:
    """Gaussian speckle spots at seeded random positions, optionally mixed
    with a broad centered glow; normalized to unit mass."""
    if spec.spots < 1:
        raise SceneError("need at least one spot")
    if not 0.0 <= spec.glow_weight <= 1.0:
        raise SceneError("glow weight must lie in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0 : spec.m, 0 : spec.n]
    h = np.zeros((spec.m, spec.n))
    for _ in range(spec.spots):
        cy = rng.uniform(0, spec.m - 1)
        cx = rng.uniform(0, spec.n - 1)
        h += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * spec.sigma ** 2))
    h /= h.sum()
    if spec.glow_weight > 0:
        if spec.glow_sigma <= 0:
            raise SceneError("glow sigma must be positive")
        cy, cx = (spec.m - 1) / 2.0, (spec.n - 1) / 2.0
        glow = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                      / (2.0 * spec.glow_sigma ** 2))
        h = (1.0 - spec.glow_weight) * h + spec.glow_weight * glow / glow.sum()
        h /= h.sum()
    return Psf(h, normalized=True)


def downsample_video(video: np.ndarray, factor_space: int, factor_time: int) -> np.ndarray:
    """Box-average pooling in space and time; preserves the grid mean."""
    if factor_space < 1 or factor_time < 1:
        raise SceneError("factors must be >= 1")
    m, n, k = video.shape[:3]
    if m % factor_space or n % factor_space or k % factor_time:
        raise SceneError("factors must divide the video extents")
    fs, ft = factor_space, factor_time
    shape = (m // fs, fs, n // fs, fs, k // ft, ft) + video.shape[3:]
    return video.reshape(shape).mean(axis=(1, 3, 5))

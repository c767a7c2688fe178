"""Comparison methods: 3DTV grid reconstruction and linear keyframe interpolation.

The 3DTV baselines optimize the raw video grid with Adam on a smoothed
anisotropic-TV objective; the interpolator cross-fades between the three
global-shutter keyframes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera
from . import gradkit as gk
from .camera import MeasurementSet

__all__ = [
    "BaselineError",
    "Tv3dConfig",
    "video_tv3d",
    "reconstruct_tv3d",
    "linear_keyframe_interp",
]


class BaselineError(Exception):
    pass


@dataclass
class Tv3dConfig:
    lam: float = 1e-2            # TV weight
    beta_t: float = 1.0          # temporal weight inside the video TV
    smooth_eps: float = 1e-6
    iterations: int = 500
    learning_rate: float = 1e-2
    mode: str = "dual_shutter"   # single_shutter | dual_shutter

    def __post_init__(self):
        if self.lam < 0 or self.beta_t < 0:
            raise BaselineError("lam and beta_t must be >= 0")
        if self.mode not in ("single_shutter", "dual_shutter"):
            raise BaselineError(f"unknown mode {self.mode!r}")


def _tv_terms(video: np.ndarray, beta_t: float, eps: float):
    """Smoothed anisotropic 3D TV value and gradient on an (M,N,K[,C]) grid."""
    total = 0.0
    grad = np.zeros_like(video)
    for axis, weight in ((1, 1.0), (0, 1.0), (2, beta_t)):  # x, y, t
        if weight == 0.0:
            continue
        d = np.diff(video, axis=axis)
        if eps == 0.0:
            total += weight * float(np.abs(d).sum())
            w = np.sign(d)
        else:
            mag = np.sqrt(d * d + eps * eps)
            total += weight * float((mag - eps).sum())
            w = d / mag
        sl_hi = [slice(None)] * video.ndim
        sl_lo = [slice(None)] * video.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        grad[tuple(sl_hi)] += weight * w
        grad[tuple(sl_lo)] -= weight * w
    return total, grad


def video_tv3d(video: np.ndarray, beta_t: float, smooth_eps: float = 0.0) -> float:
    """Anisotropic 3D TV of a video, per channel, summed."""
    if beta_t < 0:
        raise BaselineError("beta_t must be >= 0")
    total, _ = _tv_terms(video, beta_t, smooth_eps)
    return total


def reconstruct_tv3d(meas: MeasurementSet, config: Tv3dConfig):
    """Minimize the shutter data terms plus lam * TV3D(v) over the raw grid.

    single_shutter uses only the RS measurement; dual_shutter adds the GS
    term. Zero initialization, Adam updates. Returns (video, loss curve).
    """
    m, n = meas.spatial_shape
    k = meas.timing.frames
    c = meas.b_r.shape[-1]
    v = np.zeros((m, n, k, c))
    state = gk.AdamState(lr=config.learning_rate)
    curve = np.zeros(config.iterations)
    last_finite = None
    for it in range(config.iterations):
        r_r = camera.forward_rs(v, meas.psf, meas.timing) - meas.b_r
        loss = float(np.sum(r_r ** 2))
        grad = 2.0 * camera.adjoint_rs(r_r, meas.psf, meas.timing)
        if config.mode == "dual_shutter":
            r_g = np.stack([camera.forward_gs(v, meas.timing, l) for l in (1, 2, 3)])
            r_g -= meas.b_g
            loss += float(np.sum(r_g ** 2))
            grad += 2.0 * camera.adjoint_gs(r_g, meas.timing)
        if config.lam > 0:
            tv, tv_grad = _tv_terms(v, config.beta_t, config.smooth_eps)
            loss += config.lam * tv
            grad += config.lam * tv_grad
        if not np.isfinite(loss):
            raise BaselineError(
                f"diverged at iteration {it}; last finite loss {last_finite}")
        last_finite = loss
        curve[it] = loss
        (v,) = gk.adam_step([v], [grad], state)
    return v, curve


def linear_keyframe_interp(b_g: np.ndarray, triggers, k: int,
                           gs_exposure_frames: int = 1) -> np.ndarray:
    """Piecewise-linear cross-fade between the three keyframes.

    Keyframes are normalized by the GS exposure so they live in scene units;
    outside [T1, T3] the nearest keyframe extends constantly.
    Returns an (M, N, K, C) video.
    """
    triggers = list(triggers)
    if triggers != sorted(triggers) or triggers[0] < 0 or triggers[-1] >= k:
        raise BaselineError("triggers must be sorted and within [0, K)")
    keys = np.asarray(b_g, dtype=np.float64) / float(gs_exposure_frames)
    m, n, c = keys.shape[1:]
    out = np.empty((m, n, k, c))
    for t in range(k):
        if t <= triggers[0]:
            out[:, :, t] = keys[0]
        elif t >= triggers[-1]:
            out[:, :, t] = keys[-1]
        else:
            seg = 0 if t <= triggers[1] else 1
            t0, t1 = triggers[seg], triggers[seg + 1]
            w = (t - t0) / (t1 - t0)
            out[:, :, t] = (1.0 - w) * keys[seg] + w * keys[seg + 1]
    return out

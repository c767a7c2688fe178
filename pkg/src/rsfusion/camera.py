"""Linear measurement physics for the dual-shutter acquisition.

Video arrays are (M, N, K, C) = (rows y, columns x, frames t, channels c).
The rolling-shutter arm sees the scene through a diffuser PSF and sums, per
row y, the frames t in [y, y+E). The global-shutter arm takes three plain
frame sums. All operators are linear, pure, and come with exact adjoints;
a dense-matrix oracle is available for tiny grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraError",
    "TimingConfig",
    "Psf",
    "MeasurementSet",
    "frame_count",
    "default_gs_triggers",
    "make_rs_shutter",
    "make_gs_shutter",
    "pad_shapes",
    "convolve_psf",
    "correlate_psf_adjoint",
    "forward_rs",
    "forward_gs",
    "adjoint_rs",
    "adjoint_gs",
    "simulate_measurements",
    "joint_residual_gradient",
    "dense_matrix",
]

DENSE_ORACLE_LIMIT = 4096


class CameraError(Exception):
    pass


def frame_count(rows: int, exposure_lines: int) -> int:
    """Number of video frames spanned by a rolling-shutter capture.

    Row y exposes frames [y, y+E), so the last row's exposure ends at frame
    rows + exposure_lines - 1 exactly.
    """
    if rows < 1 or exposure_lines < 1:
        raise CameraError("rows and exposure_lines must be >= 1")
    return rows + exposure_lines - 1


def default_gs_triggers(k: int, gs_exposure: int) -> tuple[int, int, int]:
    """Start / middle / end triggers spanning the rolling-shutter capture."""
    last = k - gs_exposure
    if last < 0:
        raise CameraError("gs exposure longer than the video")
    return (0, last // 2, last)


@dataclass
class TimingConfig:
    """Discrete shutter timing; the time unit is one (downsampled) line time."""

    rows: int
    rs_exposure_lines: int
    gs_exposure_frames: int = 1
    gs_trigger_frames: tuple[int, int, int] | None = None
    line_time_us: float = 208.0  # bookkeeping only
    # K defaults to rows + E - 1; an explicit shorter K clips row windows to
    # [0, K), which is how sub-length videos are measured.
    frames_override: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.rs_exposure_lines < 1 or self.gs_exposure_frames < 1:
            raise CameraError("timing extents must be >= 1")
        if self.frames_override is not None and self.frames_override < 1:
            raise CameraError("frames_override must be >= 1")
        k = self.frames
        if self.gs_trigger_frames is None:
            self.gs_trigger_frames = default_gs_triggers(k, self.gs_exposure_frames)
        t1, t2, t3 = self.gs_trigger_frames
        # Strictly increasing triggers whenever the video is long enough to
        # allow three distinct trigger times for this exposure.
        if not (0 <= t1 <= t2 <= t3) or (
            k - self.gs_exposure_frames >= 2 and not t1 < t2 < t3
        ):
            raise CameraError("gs triggers must satisfy 0 <= T1 < T2 < T3")
        if t3 + self.gs_exposure_frames > k:
            raise CameraError("gs trigger window exceeds the video length")

    @property
    def frames(self) -> int:
        if self.frames_override is not None:
            return self.frames_override
        return frame_count(self.rows, self.rs_exposure_lines)


@dataclass
class Psf:
    """Nonnegative 2D point spread function."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise CameraError("psf must be 2D")
        if np.any(self.values < 0):
            raise CameraError("psf entries must be nonnegative")
        if self.normalized and abs(self.values.sum() - 1.0) > 1e-9:
            raise CameraError("psf marked normalized but does not sum to 1")

    @property
    def shape(self):
        return self.values.shape

    @staticmethod
    def delta(mp: int, np_: int) -> "Psf":
        h = np.zeros((mp, np_))
        h[mp // 2, np_ // 2] = 1.0
        return Psf(h, normalized=True)


def make_rs_shutter(timing: TimingConfig, m: int, n: int) -> np.ndarray:
    """Dense (M, N, K) indicator: row y active on frames [y, y+E)."""
    if m != timing.rows:
        raise CameraError(f"mask rows {m} != timing rows {timing.rows}")
    k, e = timing.frames, timing.rs_exposure_lines
    t = np.arange(k)[None, :]
    y = np.arange(m)[:, None]
    row_mask = (t >= y) & (t < y + e)  # (M, K)
    return np.broadcast_to(row_mask[:, None, :], (m, n, k)).astype(np.float64)


def make_gs_shutter(timing: TimingConfig, l: int, m: int, n: int) -> np.ndarray:
    """Dense (M, N, K) indicator for the l-th global-shutter capture, l in 1..3."""
    if l not in (1, 2, 3):
        raise CameraError("gs capture index must be 1, 2, or 3")
    k = timing.frames
    t0 = timing.gs_trigger_frames[l - 1]
    if t0 + timing.gs_exposure_frames > k:
        raise CameraError("gs trigger window exceeds the video length")
    t = np.arange(k)
    mask = ((t >= t0) & (t < t0 + timing.gs_exposure_frames)).astype(np.float64)
    return np.broadcast_to(mask[None, None, :], (m, n, k)).copy()


# ---------------------------------------------------------------------------
# Padded FFT convolution
# ---------------------------------------------------------------------------

def pad_shapes(m: int, n: int, psf: Psf) -> tuple[int, int, int, int]:
    """(padded M, padded N, crop row offset, crop col offset)."""
    mp, np_ = psf.shape
    return m + mp - 1, n + np_ - 1, mp // 2, np_ // 2


def _psf_spectrum(m: int, n: int, psf: Psf) -> np.ndarray:
    pm, pn, _, _ = pad_shapes(m, n, psf)
    hp = np.zeros((pm, pn))
    hp[: psf.shape[0], : psf.shape[1]] = psf.values
    return np.fft.rfft2(hp, axes=(0, 1))


def convolve_psf(video: np.ndarray, psf: Psf) -> np.ndarray:
    """Per-frame, per-channel linear convolution via zero-pad / circular / crop.

    The crop window is aligned so that a delta PSF centered at
    (Mp//2, Np//2) is the identity.
    """
    m, n = video.shape[:2]
    pm, pn, cy, cx = pad_shapes(m, n, psf)
    spec = _psf_spectrum(m, n, psf)
    pad = [(0, pm - m), (0, pn - n)] + [(0, 0)] * (video.ndim - 2)
    vp = np.pad(video, pad)
    spec_b = spec.reshape(spec.shape + (1,) * (video.ndim - 2))
    full = np.fft.irfft2(np.fft.rfft2(vp, axes=(0, 1)) * spec_b, s=(pm, pn), axes=(0, 1))
    return full[cy : cy + m, cx : cx + n]


def correlate_psf_adjoint(image: np.ndarray, psf: Psf) -> np.ndarray:
    """Exact adjoint of convolve_psf: transposed crop, correlation, transposed pad."""
    m, n = image.shape[:2]
    pm, pn, cy, cx = pad_shapes(m, n, psf)
    spec = np.conj(_psf_spectrum(m, n, psf))
    big = np.zeros((pm, pn) + image.shape[2:], dtype=image.dtype)
    big[cy : cy + m, cx : cx + n] = image
    spec_b = spec.reshape(spec.shape + (1,) * (image.ndim - 2))
    full = np.fft.irfft2(np.fft.rfft2(big, axes=(0, 1)) * spec_b, s=(pm, pn), axes=(0, 1))
    return full[:m, :n]


# ---------------------------------------------------------------------------
# Forward / adjoint operators
# ---------------------------------------------------------------------------

def _rs_row_sum(video_like: np.ndarray, timing: TimingConfig) -> np.ndarray:
    """Per row y, sum frames [y, y+E) clipped to [0, K):
    collapses (M,N,K,...) to (M,N,...)."""
    m, k = video_like.shape[0], video_like.shape[2]
    e = timing.rs_exposure_lines
    # prefix[..., i] = sum of frames t < i, so a window is one subtraction
    csum = np.cumsum(video_like, axis=2, dtype=np.float64)
    pad = [(0, 0), (0, 0), (1, 0)] + [(0, 0)] * (video_like.ndim - 3)
    prefix = np.pad(csum, pad)
    rows = np.arange(m)
    start = np.minimum(rows, k)
    end = np.minimum(rows + e, k)
    out = prefix[rows, :, end] - prefix[rows, :, start]
    return out.astype(video_like.dtype)


def forward_rs(video: np.ndarray, psf: Psf, timing: TimingConfig) -> np.ndarray:
    """b_R(y,x,c) = sum_t S_R(y,t) (h * v)(y,x,t,c); a plain sum, no averaging."""
    if video.shape[0] != timing.rows or video.shape[2] != timing.frames:
        raise CameraError(f"video shape {video.shape} inconsistent with timing")
    return _rs_row_sum(convolve_psf(video, psf), timing)


def adjoint_rs(b: np.ndarray, psf: Psf, timing: TimingConfig) -> np.ndarray:
    """A_R^T: broadcast to active frames per row, then correlate with the PSF."""
    m, n = b.shape[:2]
    k, e = timing.frames, timing.rs_exposure_lines
    out = np.zeros((m, n, k) + b.shape[2:], dtype=np.float64)
    t = np.arange(k)[None, :]
    y = np.arange(m)[:, None]
    mask = ((t >= y) & (t < y + e)).astype(np.float64)  # (M, K)
    mask = mask.reshape(m, 1, k, *([1] * (b.ndim - 2)))
    out += mask * np.expand_dims(b, 2)
    return correlate_psf_adjoint(out, psf)


def forward_gs(video: np.ndarray, timing: TimingConfig, l: int) -> np.ndarray:
    """b_G^l(y,x,c) = sum over the l-th trigger window of v; identity PSF."""
    if l not in (1, 2, 3):
        raise CameraError("gs capture index must be 1, 2, or 3")
    t0 = timing.gs_trigger_frames[l - 1]
    return video[:, :, t0 : t0 + timing.gs_exposure_frames].sum(axis=2)


def adjoint_gs(b_g: np.ndarray, timing: TimingConfig) -> np.ndarray:
    """Adjoint of the stacked three-capture operator; b_g is (3, M, N[, C])."""
    if b_g.shape[0] != 3:
        raise CameraError("adjoint_gs expects stacked (3, M, N[, C]) measurements")
    m, n = b_g.shape[1:3]
    k = timing.frames
    out = np.zeros((m, n, k) + b_g.shape[3:], dtype=np.float64)
    for l in range(3):
        t0 = timing.gs_trigger_frames[l]
        out[:, :, t0 : t0 + timing.gs_exposure_frames] += np.expand_dims(b_g[l], 2)
    return out


@dataclass
class MeasurementSet:
    """One RS-diffuser image plus three GS keyframes, with their provenance."""

    b_r: np.ndarray  # (M, N, C)
    b_g: np.ndarray  # (3, M, N, C)
    timing: TimingConfig
    psf: Psf
    psi: float = 1.0  # stacked-operator weight on the RS block
    support: np.ndarray | None = None  # optional (M, N) field-stop indicator

    @property
    def spatial_shape(self):
        return self.b_r.shape[:2]


def simulate_measurements(video: np.ndarray, psf: Psf, timing: TimingConfig,
                          psi: float = 1.0,
                          support: np.ndarray | None = None) -> MeasurementSet:
    b_r = forward_rs(video, psf, timing)
    b_g = np.stack([forward_gs(video, timing, l) for l in (1, 2, 3)])
    return MeasurementSet(b_r=b_r, b_g=b_g, timing=timing, psf=psf, psi=psi,
                          support=support)


def _apply_support(video: np.ndarray, support: np.ndarray | None) -> np.ndarray:
    if support is None:
        return video
    return video * support.reshape(support.shape + (1,) * (video.ndim - 2))


def joint_residual_gradient(video: np.ndarray, meas: MeasurementSet):
    """Loss and gradient of the stacked least-squares data term.

    loss = ||A_G v - b_G||^2 + psi^2 ||A_R v - b_R||^2 with the stacked
    weight psi; grad = 2 A_G^T(...) + 2 psi^2 A_R^T(...). Network training
    injects this gradient directly, so nothing differentiates through the FFT.
    """
    timing, psf, psi = meas.timing, meas.psf, meas.psi
    v = _apply_support(video, meas.support)
    r_r = forward_rs(v, psf, timing) - meas.b_r
    r_g = np.stack([forward_gs(v, timing, l) for l in (1, 2, 3)]) - meas.b_g
    loss = float(np.sum(r_g ** 2) + psi ** 2 * np.sum(r_r ** 2))
    grad = 2.0 * adjoint_gs(r_g, timing) + 2.0 * psi ** 2 * adjoint_rs(r_r, psf, timing)
    grad = _apply_support(grad, meas.support)
    return loss, grad


# ---------------------------------------------------------------------------
# Dense oracle
# ---------------------------------------------------------------------------

def dense_matrix(operator_id: str, m: int, n: int, k: int, psf: Psf,
                 timing: TimingConfig, psi: float = 1.0) -> np.ndarray:
    """Explicit single-channel matrix: column j = operator(j-th basis video).

    Videos are vectorized in C order over (M, N, K). Oracle scale only.
    """
    if m * n * k > DENSE_ORACLE_LIMIT:
        raise CameraError(f"dense oracle limited to {DENSE_ORACLE_LIMIT} unknowns")
    ops = {
        "rs": lambda v: forward_rs(v, psf, timing).ravel(),
        "gs1": lambda v: forward_gs(v, timing, 1).ravel(),
        "gs2": lambda v: forward_gs(v, timing, 2).ravel(),
        "gs3": lambda v: forward_gs(v, timing, 3).ravel(),
        "gs": lambda v: np.concatenate(
            [forward_gs(v, timing, l).ravel() for l in (1, 2, 3)]),
    }
    ops["joint"] = lambda v: np.concatenate([ops["gs"](v), psi * ops["rs"](v)])
    if operator_id not in ops:
        raise CameraError(f"unknown operator id {operator_id!r}")
    apply = ops[operator_id]
    cols = []
    basis = np.zeros((m, n, k))
    for j in range(m * n * k):
        basis.ravel()[j] = 1.0
        cols.append(apply(basis))
        basis.ravel()[j] = 0.0
    return np.stack(cols, axis=1)

"""Space-time fusion reconstruction.

A static coordinate network models the background, a dynamic network models
the foreground queried at motion-warped coordinates, and a motion network
predicts the time-varying warp field, which is regularized with anisotropic
total variation. The three are blended by a time-varying alpha map and fitted
jointly to the rolling-shutter and global-shutter measurements.

Data-term gradients enter through the camera adjoints (nothing
differentiates through the FFT); everything else backpropagates on a gradkit
tape through compositing, warping, and the encodings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import gradkit as gk
from . import camera
from .camera import MeasurementSet

__all__ = [
    "FusionError",
    "PosEncConfig",
    "SirenNet",
    "StfmConfig",
    "FusionModel",
    "StfmResult",
    "make_grid",
    "positional_encode",
    "motion_tv",
    "estimate_translation_track",
    "video_flat_to_grid",
    "video_grid_to_flat",
    "stfm_loss",
    "reconstruct",
]

TV_SMOOTH_EPS = 1e-6


class FusionError(Exception):
    pass


# ---------------------------------------------------------------------------
# Coordinate grids and positional encoding
# ---------------------------------------------------------------------------

def _axis_coords(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)


def make_grid(m: int, n: int, k: int) -> np.ndarray:
    """Full (M*N*K, 3) coordinate tensor [x, y, t] in [-1, 1], t-major raster.

    Row order is t, then y, then x; reshape a flat column to (K, M, N) and
    transpose to recover the video layout.
    """
    t, y, x = np.meshgrid(_axis_coords(k), _axis_coords(m), _axis_coords(n),
                          indexing="ij")
    return np.stack([x.ravel(), y.ravel(), t.ravel()], axis=1)


def video_flat_to_grid(flat: np.ndarray, m: int, n: int, k: int) -> np.ndarray:
    """(M*N*K, C) in raster order -> (M, N, K, C)."""
    return flat.reshape(k, m, n, -1).transpose(1, 2, 0, 3)


def video_grid_to_flat(video: np.ndarray) -> np.ndarray:
    """(M, N, K, C) -> (M*N*K, C) in raster order."""
    m, n, k, c = video.shape
    return video.transpose(2, 0, 1, 3).reshape(m * n * k, c)


@dataclass
class PosEncConfig:
    """Octave counts per network; encoded width is P*(2L+1) for P inputs."""

    static: int = 6
    dynamic: int = 4
    motion: int = 2


def positional_encode(x: np.ndarray, octaves: int) -> np.ndarray:
    """(n, P) -> (n, P*(2L+1)): identity, then cos/sin at frequencies 2^i * pi."""
    if octaves < 0:
        raise FusionError("octave count must be nonnegative")
    parts = [x]
    for i in range(octaves):
        s = (2.0 ** i) * math.pi * x
        parts.append(np.cos(s))
        parts.append(np.sin(s))
    return np.concatenate(parts, axis=-1)


def _encode_on_tape(x: gk.Tensor, octaves: int) -> gk.Tensor:
    """Tape version of positional_encode; gradients flow into x."""
    parts = [x]
    for i in range(octaves):
        s = gk.scale(x, (2.0 ** i) * math.pi)
        parts.append(gk.sin(gk.shift(s, math.pi / 2.0)))  # cos
        parts.append(gk.sin(s))
    return gk.concat(parts, axis=1)


# ---------------------------------------------------------------------------
# Sinusoidal coordinate networks
# ---------------------------------------------------------------------------

@dataclass
class SirenNet:
    """Sinusoidal MLP: sin(omega0*(W0 x + b0)) first, sin(W x + b) after,
    linear output layer; heads applied by the caller."""

    in_dim: int
    hidden_dim: int
    hidden_layers: int
    out_dim: int
    omega0: float = 30.0
    weights: list = field(default_factory=list)  # alternating W, b arrays

    def init(self, rng: np.random.Generator, zero_last: bool = False) -> None:
        dims = [self.in_dim] + [self.hidden_dim] * self.hidden_layers + [self.out_dim]
        self.weights = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            if i == 0:
                bound = 1.0 / din
            else:
                bound = math.sqrt(6.0 / din)
            w = rng.uniform(-bound, bound, size=(din, dout))
            if zero_last and i == len(dims) - 2:
                w = np.zeros_like(w)
            self.weights.append(w)
            self.weights.append(np.zeros(dout))

    def forward(self, x: gk.Tensor, params: list[gk.Tensor]) -> gk.Tensor:
        """Raw (pre-head) output on the tape; params alternate W, b leaves."""
        n_layers = len(params) // 2
        h = x
        for i in range(n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            z = gk.affine(h, w, b)
            if i == n_layers - 1:
                return z
            if i == 0:
                z = gk.scale(z, self.omega0)
            h = gk.sin(z)
        raise FusionError("empty network")


def _split_head(raw: gk.Tensor, color_channels: int, alpha: bool,
                extra: int = 0):
    """Softplus the color block, sigmoid an optional alpha column, softplus
    any extra (white-balance) columns."""
    cols = raw.data.shape[1]
    expected = color_channels + (1 if alpha else 0) + extra
    if cols != expected:
        raise FusionError(f"head expects {expected} columns, got {cols}")
    color = gk.softplus(gk.gather(raw, np.arange(color_channels), axis=1))
    out = [color]
    if alpha:
        out.append(gk.sigmoid(gk.gather(raw, np.array([color_channels]), axis=1)))
    if extra:
        lo = color_channels + (1 if alpha else 0)
        out.append(gk.softplus(gk.gather(raw, np.arange(lo, lo + extra), axis=1)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Configuration and model
# ---------------------------------------------------------------------------

@dataclass
class StfmConfig:
    tau: float = 1e-3            # motion-TV weight
    beta: float = 100.0          # temporal weight inside the TV
    psi: float = 1.0             # RS data-term weight (linear, loss form)
    iterations: int = 1000
    learning_rate: float = 1e-4  # paper-fidelity preset: 0.5e-5
    # cosine-anneal the learning rate to this value over the whole run;
    # None keeps it constant. Long runs at a constant rate can fall out of a
    # converged basin late in training.
    lr_final: float | None = None
    # iterations of static-net pretraining against the pixelwise minimum of
    # the GS keyframes (a background-subtraction prior: moving bright content
    # is absent from the minimum). Anchoring the static net to the background
    # stops it from absorbing moving content as fixed ghosts, which otherwise
    # starves the warp field of gradients. 0 disables; ignored with no_static
    # or no_gs. The joint objective is unchanged — this only sets the start.
    static_pretrain: int = 0
    # iterations of supervised motion-net warm start from a classical
    # matched-filter track: the GS keyframe foreground is slid over the RS
    # residual rows to estimate a per-frame global translation, and the warp
    # field is fit to it before joint training. Joint gradient descent alone
    # cannot discover large motions of compact content over untextured
    # background (the warp gradient vanishes without overlap); a tracker
    # initialization restores overlap, after which the unchanged joint
    # objective refines everything. 0 disables; needs both shutters.
    motion_warm_start: int = 0
    seed: int = 0
    chunk_frames: int = 0        # 0 = whole grid per iteration
    white_balance: bool = False
    no_static: bool = False
    no_motion_reg: bool = False
    no_rs: bool = False
    no_gs: bool = False
    # network hyperparameters (appendix defaults)
    dynamic_hidden: int = 128
    dynamic_layers: int = 3
    static_hidden: int = 32
    static_layers: int = 2
    motion_hidden: int = 32
    motion_layers: int = 2
    omega0: float = 30.0
    # the warp field should stay far smoother than the color networks; a
    # small first-layer frequency keeps it from shredding the scene into
    # per-frame speckle that happens to satisfy the row-wise RS constraint
    omega0_motion: float = 1.0
    # the motion net's gradient is mediated by the dynamic net's spatial
    # gradient and is typically far smaller than the color nets'; a separate
    # learning-rate multiplier lets the warp keep pace with the colors
    motion_lr_scale: float = 1.0
    posenc: PosEncConfig = field(default_factory=PosEncConfig)
    # coarse-to-fine schedule: (iterations, blur_sigma) stages run before the
    # main unfiltered iterations. Low-pass filtering both sides of the data
    # residual gives the warp field long-range alignment gradients (pyramid
    # registration); without it the warp gradient vanishes as soon as moving
    # content in the model and in the measurements stops overlapping. The
    # final stage always optimizes the unmodified objective.
    coarse_stages: tuple = ()
    dtype: str = "f64"           # "f32" permitted for speed
    log_every: int = 0

    def __post_init__(self):
        if isinstance(self.posenc, dict):
            self.posenc = PosEncConfig(**self.posenc)
        if min(self.tau, self.beta, self.psi) < 0 or self.iterations < 1:
            raise FusionError("tau, beta, psi must be >= 0 and iterations >= 1")
        if self.no_rs and self.no_gs:
            raise FusionError("cannot disable both data terms")
        stages = tuple((int(i), float(s)) for i, s in self.coarse_stages)
        if any(i < 1 or s <= 0 for i, s in stages):
            raise FusionError("coarse stages need iterations >= 1 and sigma > 0")
        self.coarse_stages = stages
        if self.motion_lr_scale <= 0:
            raise FusionError("motion_lr_scale must be positive")
        if self.lr_final is not None and not 0 <= self.lr_final <= self.learning_rate:
            raise FusionError("lr_final must lie in [0, learning_rate]")
        if self.static_pretrain < 0:
            raise FusionError("static_pretrain must be >= 0")
        if self.motion_warm_start < 0:
            raise FusionError("motion_warm_start must be >= 0")


@dataclass
class FusionModel:
    """Parameters of the static, dynamic, and motion networks."""

    static_net: SirenNet
    dynamic_net: SirenNet
    motion_net: SirenNet
    posenc: PosEncConfig
    channels: int
    white_balance: bool

    @staticmethod
    def create(config: StfmConfig, channels: int) -> "FusionModel":
        rng = np.random.default_rng(config.seed)
        pe = config.posenc
        enc2 = 2 * (2 * pe.static + 1)
        enc2d = 2 * (2 * pe.dynamic + 1)
        enc3 = 3 * (2 * pe.motion + 1)
        extra = channels if config.white_balance else 0
        static = SirenNet(enc2, config.static_hidden, config.static_layers,
                          channels + extra, config.omega0)
        dynamic = SirenNet(enc2d, config.dynamic_hidden, config.dynamic_layers,
                           channels + 1, config.omega0)
        motion = SirenNet(enc3, config.motion_hidden, config.motion_layers, 2,
                          config.omega0_motion)
        static.init(rng)
        dynamic.init(rng)
        motion.init(rng, zero_last=True)  # start from the identity warp
        if config.white_balance:
            # bias the extra head so softplus starts near 1
            static.weights[-1][channels:] = math.log(math.e - 1.0)
            static.weights[-2][:, channels:] = 0.0
        return FusionModel(static, dynamic, motion, pe, channels,
                           config.white_balance)

    # -- parameter flattening -------------------------------------------------

    def params(self) -> list[np.ndarray]:
        return list(self.static_net.weights) + list(self.dynamic_net.weights) \
            + list(self.motion_net.weights)

    def set_params(self, flat: list[np.ndarray]) -> None:
        ns = len(self.static_net.weights)
        nd = len(self.dynamic_net.weights)
        self.static_net.weights = list(flat[:ns])
        self.dynamic_net.weights = list(flat[ns : ns + nd])
        self.motion_net.weights = list(flat[ns + nd :])

    def _param_leaves(self, tape: gk.Tape):
        leaves = [tape.leaf(p, requires_grad=True) for p in self.params()]
        ns = len(self.static_net.weights)
        nd = len(self.dynamic_net.weights)
        return leaves, leaves[:ns], leaves[ns : ns + nd], leaves[ns + nd :]

    # -- numpy-facing evaluation (fresh tape, values only) --------------------

    def eval_static(self, xy: np.ndarray):
        """(n,2) spatial grid -> ((n,C) colors, (3,) white balance or None)."""
        tape = gk.Tape()
        _, sp, _, _ = self._param_leaves(tape)
        vs, lam = self._static_on_tape(tape, xy, sp)
        return vs.data.copy(), (None if lam is None else lam.data.copy())

    def eval_motion(self, grid: np.ndarray) -> np.ndarray:
        """(n,3) spatiotemporal grid -> (n,2) warp offsets (no activation)."""
        tape = gk.Tape()
        _, _, _, mp = self._param_leaves(tape)
        enc = tape.constant(positional_encode(grid, self.posenc.motion))
        return self.motion_net.forward(enc, mp).data.copy()

    def eval_dynamic(self, xy: np.ndarray, warp: np.ndarray):
        """Query the dynamic network at warped coordinates; returns (vD, alpha)."""
        tape = gk.Tape()
        _, _, dp, _ = self._param_leaves(tape)
        warped = gk.add(tape.constant(xy), tape.constant(warp))
        vd, alpha = self._dynamic_on_tape(warped, dp)
        return vd.data.copy(), alpha.data.copy()

    # -- tape-building internals ----------------------------------------------

    def _static_on_tape(self, tape: gk.Tape, xy: np.ndarray, static_params):
        enc = tape.constant(positional_encode(xy, self.posenc.static))
        raw = self.static_net.forward(enc, static_params)
        if self.white_balance:
            color, lam_field = _split_head(raw, self.channels, alpha=False,
                                           extra=self.channels)
            # white balance = grid mean of the per-channel extra outputs
            lam = gk.scale(gk.sum_reduce(lam_field, axis=0), 1.0 / xy.shape[0])
            return color, lam
        (color,) = _split_head(raw, self.channels, alpha=False)
        return color, None

    def _dynamic_on_tape(self, warped_xy: gk.Tensor, dynamic_params):
        enc = _encode_on_tape(warped_xy, self.posenc.dynamic)
        raw = self.dynamic_net.forward(enc, dynamic_params)
        return _split_head(raw, self.channels, alpha=True)


def compose_video(v_static: gk.Tensor | np.ndarray, v_dynamic, alpha):
    """Pointwise blend alpha*static + (1-alpha)*dynamic.

    Accepts numpy arrays (alpha broadcasts) or tape tensors of equal shape.
    """
    if isinstance(alpha, np.ndarray) or np.isscalar(alpha):
        return alpha * v_static + (1.0 - alpha) * v_dynamic
    blend = gk.add(gk.mul(alpha, v_static),
                   gk.mul(gk.shift(gk.scale(alpha, -1.0), 1.0), v_dynamic))
    return blend


# ---------------------------------------------------------------------------
# Motion-field total variation
# ---------------------------------------------------------------------------

def _diff_index_pairs(m: int, n: int, k: int):
    """Raster-order index pairs (lo, hi) for forward differences along x, y, t."""
    idx = np.arange(k * m * n).reshape(k, m, n)
    pairs = {}
    pairs["x"] = (idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel())
    pairs["y"] = (idx[:, :-1, :].ravel(), idx[:, 1:, :].ravel())
    pairs["t"] = (idx[:-1].ravel(), idx[1:].ravel())
    return pairs


def motion_tv(u: np.ndarray, beta: float, m: int, n: int, k: int,
              smooth_eps: float = 0.0) -> float:
    """Anisotropic TV of the (M*N*K, 2) motion field on the (M, N, K) grid.

    Exact absolute values by default; smooth_eps > 0 uses the differentiable
    surrogate sqrt(d^2 + eps^2) - eps used inside training.
    """
    if beta < 0:
        raise FusionError("beta must be >= 0")
    total = 0.0
    for axis, weight in (("x", 1.0), ("y", 1.0), ("t", beta)):
        lo, hi = _diff_index_pairs(m, n, k)[axis]
        d = u[hi] - u[lo]
        mag = np.abs(d) if smooth_eps == 0.0 else np.sqrt(d * d + smooth_eps ** 2) - smooth_eps
        total += weight * float(mag.sum())
    return total


def _tv_axis_on_tape(u: gk.Tensor, m: int, n: int, k: int, axis: str) -> gk.Tensor | None:
    """Smoothed sum of |forward differences| along one axis of the (m,n,k) grid."""
    lo, hi = _diff_index_pairs(m, n, k)[axis]
    if lo.size == 0:
        return None
    eps = TV_SMOOTH_EPS
    d = gk.add(gk.gather(u, hi, axis=0), gk.scale(gk.gather(u, lo, axis=0), -1.0))
    mag = gk.shift(gk.sqrt(gk.shift(gk.mul(d, d), eps * eps)), -eps)
    return gk.sum_reduce(mag)


# ---------------------------------------------------------------------------
# Full objective and training loop
# ---------------------------------------------------------------------------

def _chunk_ranges(k: int, chunk: int):
    if chunk <= 0 or chunk >= k:
        return [(0, k)]
    return [(lo, min(lo + chunk, k)) for lo in range(0, k, chunk)]


class _ChunkForward:
    """One tape over a contiguous frame range; exposes the composited video,
    the warp field (with one boundary frame for temporal TV), and alpha."""

    def __init__(self, model: FusionModel, config: StfmConfig, m, n, k,
                 grid: np.ndarray, xy_spatial: np.ndarray, lo: int, hi: int):
        self.lo, self.hi = lo, hi
        self.m, self.n, self.k = m, n, k
        kc = hi - lo
        self.k_tv = min(hi + 1, k) - lo  # one extra frame owns the boundary diff
        tape = gk.Tape()
        self.tape = tape
        self.leaves, sp, dp, mp = model._param_leaves(tape)

        rows = slice(lo * m * n, hi * m * n)
        rows_tv = slice(lo * m * n, (lo + self.k_tv) * m * n)

        # motion field over the chunk plus the TV boundary frame
        enc_m = tape.constant(positional_encode(grid[rows_tv], model.posenc.motion))
        self.u_tv = model.motion_net.forward(enc_m, mp)
        self.u = self.u_tv if self.k_tv == kc else \
            gk.gather(self.u_tv, np.arange(kc * m * n), axis=0)

        # dynamic component at warped coordinates
        warped = gk.add(tape.constant(grid[rows, :2]), self.u)
        self.v_dyn, self.alpha = model._dynamic_on_tape(warped, dp)

        if config.no_static:
            self.v = self.v_dyn
            self.lam = None
        else:
            vs, self.lam = model._static_on_tape(tape, xy_spatial, sp)
            vs_tiled = gk.concat([vs] * kc, axis=0)
            alpha_c = gk.concat([self.alpha] * model.channels, axis=1)
            self.v = compose_video(vs_tiled, self.v_dyn, alpha_c)

        # TV ownership per chunk: spatial diffs on the chunk's own frames,
        # temporal diffs on every consecutive pair starting in the chunk
        # (hence the boundary frame in u_tv). No diff is counted twice.
        self.tv = None
        if config.tau > 0 and not config.no_motion_reg:
            terms = [_tv_axis_on_tape(self.u, m, n, kc, "x"),
                     _tv_axis_on_tape(self.u, m, n, kc, "y")]
            if config.beta > 0:
                t_term = _tv_axis_on_tape(self.u_tv, m, n, self.k_tv, "t")
                if t_term is not None:
                    terms.append(gk.scale(t_term, config.beta))
            terms = [t for t in terms if t is not None]
            if terms:
                tv = terms[0]
                for t in terms[1:]:
                    tv = gk.add(tv, t)
                self.tv = tv


def _gaussian_blur_psf(sigma: float) -> camera.Psf:
    """Normalized Gaussian kernel truncated at 3 sigma, as a Psf so the
    exact convolve/correlate adjoint pair can low-pass the data residual."""
    r = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kern = np.outer(g, g)
    return camera.Psf(kern / kern.sum(), normalized=True)


def _data_term(video: np.ndarray, meas: MeasurementSet, config: StfmConfig,
               lam: np.ndarray | None, blur: camera.Psf | None = None):
    """Loss value plus gradients w.r.t. the video grid and white balance.

    Uses the linear RS weight psi (the stacked-operator equivalent is
    sqrt(psi)); the GS target is b_G * Lambda per channel when enabled.
    When a blur kernel G is given the residual r is replaced by G r, so the
    loss is ||G r||^2 and the gradient routes through G^T G.
    """
    timing, psf = meas.timing, meas.psf
    v = video if meas.support is None else \
        video * meas.support[:, :, None, None]
    loss = 0.0
    grad = np.zeros_like(v)
    grad_lam = None
    if not config.no_gs:
        target = meas.b_g if lam is None else meas.b_g * lam.reshape(1, 1, 1, -1)
        r_g = np.stack([camera.forward_gs(v, timing, l) for l in (1, 2, 3)]) - target
        if blur is not None:
            gr = np.stack([camera.convolve_psf(r, blur) for r in r_g])
            q = np.stack([camera.correlate_psf_adjoint(r, blur) for r in gr])
        else:
            gr = q = r_g
        loss += float(np.sum(gr ** 2))
        grad += 2.0 * camera.adjoint_gs(q, timing)
        if lam is not None:
            grad_lam = -2.0 * np.sum(q * meas.b_g, axis=(0, 1, 2))
    if not config.no_rs and config.psi > 0:
        r_r = camera.forward_rs(v, psf, timing) - meas.b_r
        if blur is not None:
            gr = camera.convolve_psf(r_r, blur)
            q = camera.correlate_psf_adjoint(gr, blur)
        else:
            gr = q = r_r
        loss += config.psi * float(np.sum(gr ** 2))
        grad += 2.0 * config.psi * camera.adjoint_rs(q, psf, timing)
    if meas.support is not None:
        grad = grad * meas.support[:, :, None, None]
    return loss, grad, grad_lam


def stfm_loss(model: FusionModel, meas: MeasurementSet, config: StfmConfig,
              want_grads: bool = True, blur: camera.Psf | None = None):
    """Full objective and parameter gradients.

    loss = ||A_G v - b_G Lambda||^2 + psi ||A_R v - b_R||^2 + tau TV(U)
    with smoothed TV; ablation flags drop the corresponding terms. Returns
    (loss, grads aligned with model.params(), diagnostics dict).
    """
    m, n = meas.spatial_shape
    k = meas.timing.frames
    grid = make_grid(m, n, k)
    xy_spatial = grid[: m * n, :2].copy()  # t-major raster: first K-slice is t0
    ranges = _chunk_ranges(k, config.chunk_frames)

    chunks = [ _ChunkForward(model, config, m, n, k, grid, xy_spatial, lo, hi)
               for lo, hi in ranges ]
    flat = np.concatenate([c.v.data for c in chunks], axis=0)
    video = video_flat_to_grid(flat, m, n, k)
    lam_val = None
    if chunks[0].lam is not None:
        lam_val = chunks[0].lam.data.copy()

    data_loss, g_video, g_lam = _data_term(video, meas, config, lam_val, blur)
    tau = 0.0 if config.no_motion_reg else config.tau
    tv_val = sum(float(c.tv.data) for c in chunks if c.tv is not None)
    loss = data_loss + tau * tv_val

    diagnostics = {
        "video": video,
        "motion": np.concatenate([c.u.data for c in chunks], axis=0),
        "alpha": np.concatenate([c.alpha.data for c in chunks], axis=0),
        "lam": lam_val,
        "data_loss": data_loss,
        "tv": tv_val,
    }
    if not want_grads:
        for c in chunks:
            c.tape.release()
        return loss, None, diagnostics

    g_flat = video_grid_to_flat(g_video)
    grads = [np.zeros_like(p) for p in model.params()]
    for ci, c in enumerate(chunks):
        seed_v = c.tape.constant(g_flat[c.lo * m * n : c.hi * m * n])
        proxy = gk.sum_reduce(gk.mul(c.v, seed_v))
        if ci == 0 and c.lam is not None and g_lam is not None:
            proxy = gk.add(proxy, gk.sum_reduce(gk.mul(c.lam, c.tape.constant(g_lam))))
        if c.tv is not None and tau > 0:
            proxy = gk.add(proxy, gk.scale(c.tv, tau))
        node_grads = gk.backward(proxy)
        for i, leaf in enumerate(c.leaves):
            g = node_grads.get(leaf)
            if g is not None:
                grads[i] += g
    return loss, grads, diagnostics


def _foreground_centroid(img: np.ndarray):
    """Intensity-weighted centroid (y, x) of a nonnegative image; None if empty."""
    w = img.sum(axis=-1) if img.ndim == 3 else img
    mass = float(w.sum())
    if mass <= 1e-12:
        return None
    yy, xx = np.mgrid[0 : w.shape[0], 0 : w.shape[1]]
    return float((yy * w).sum() / mass), float((xx * w).sum() / mass)


def estimate_translation_track(meas: MeasurementSet, quality: float = 0.8):
    """Per-frame global translation of the keyframe-0 foreground, estimated
    by sliding its PSF-convolved copy over the RS residual rows (least
    squares over integer shifts, parabolic sub-pixel refinement).

    Returns (shifts, trust): shifts is (K, 2) pixel offsets (dy, dx) relative
    to the first keyframe, trust flags frames whose best match explains at
    least ``quality`` of the residual row's energy. Untrusted frames are
    filled by linear interpolation from trusted ones; the keyframes
    themselves are exact anchors (foreground centroid differences).
    """
    timing = meas.timing
    m, n = meas.spatial_shape
    k = timing.frames
    background = np.min(meas.b_g, axis=0)
    template = np.clip(meas.b_g[0] - background, 0.0, None)
    anchor = _foreground_centroid(template)
    if anchor is None:
        raise FusionError("keyframe 0 has no foreground to track")
    ty, tx = anchor
    static_video = np.repeat(background[:, :, None, :], k, axis=2)
    resid = meas.b_r - camera.forward_rs(static_video, meas.psf, timing)
    # convolve on a padded canvas so shifted copies that partially leave the
    # sensor still compare correctly
    pad = np.zeros((3 * m, 3 * n) + template.shape[2:])
    pad[m : 2 * m, n : 2 * n] = template
    c_img = camera.convolve_psf(pad, meas.psf)
    # the foreground centroid must stay on-sensor
    dy_lo, dy_hi = -int(ty), int(m - 1 - ty)
    dxs = np.arange(-int(tx), int(n - tx))
    norms2 = np.zeros((3 * m, dxs.size))
    blocks = []
    for di, dx in enumerate(dxs):
        block = c_img[:, (n - dx) : (2 * n - dx), :]
        blocks.append(block)
        norms2[:, di] = np.einsum("yxc->y", block ** 2)
    shifts = np.full((k, 2), np.nan)
    trust = np.zeros(k, dtype=bool)
    yps = np.arange(3 * m)
    for t in range(min(k, m)):
        r_t = resid[t]
        rnorm2 = float(np.sum(r_t ** 2))
        if rnorm2 <= 0:
            continue
        cross = np.stack([np.einsum("xc,yxc->y", r_t, b) for b in blocks], 1)
        score = 2.0 * cross - norms2  # = rnorm2 - SSD(shifted template)
        dy_all = (t + m) - yps
        score[(dy_all < dy_lo) | (dy_all > dy_hi)] = -np.inf
        yp, di = np.unravel_index(int(np.argmax(score)), score.shape)
        dy = float((t + m) - yp)
        dx = float(dxs[di])
        if 0 < yp < 3 * m - 1 and np.isfinite(score[yp - 1, di]) \
                and np.isfinite(score[yp + 1, di]):
            s0, s1, s2 = score[yp - 1, di], score[yp, di], score[yp + 1, di]
            den = s0 - 2 * s1 + s2
            if den < 0:
                dy += 0.5 * (s2 - s0) / den
        if 0 < di < dxs.size - 1:
            s0, s1, s2 = score[yp, di - 1], score[yp, di], score[yp, di + 1]
            den = s0 - 2 * s1 + s2
            if den < 0:
                dx -= 0.5 * (s2 - s0) / den
        shifts[t] = (dy, dx)
        trust[t] = score[yp, di] / rnorm2 >= quality
    for i, tt in enumerate(timing.gs_trigger_frames):
        if 0 <= tt < k:
            fg = _foreground_centroid(np.clip(meas.b_g[i] - background, 0.0, None))
            if fg is not None:
                shifts[tt] = (fg[0] - ty, fg[1] - tx)
                trust[tt] = True
    good = trust & ~np.isnan(shifts[:, 0])
    if good.sum() < 2:
        raise FusionError("translation track has fewer than two trusted frames")
    ts = np.arange(k)
    for c in range(2):
        shifts[:, c] = np.interp(ts, ts[good], shifts[good, c])
    return shifts, trust


def _warm_start_motion(model: FusionModel, meas: MeasurementSet,
                       config: StfmConfig) -> None:
    """Fit the motion net to the tracked global translation (normalized
    coordinates, warp sign: content at p queries canonical coords p + U)."""
    m, n = meas.spatial_shape
    k = meas.timing.frames
    shifts, _ = estimate_translation_track(meas)
    u_t = np.stack([-shifts[:, 1] * 2.0 / max(n - 1, 1),
                    -shifts[:, 0] * 2.0 / max(m - 1, 1)], axis=1)  # (K, [ux,uy])
    step = 4 if min(m, n) >= 16 else 1
    ys = _axis_coords(m)[::step]
    xs = _axis_coords(n)[::step]
    tt, yy, xx = np.meshgrid(_axis_coords(k), ys, xs, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel(), tt.ravel()], axis=1)
    target = np.repeat(u_t, ys.size * xs.size, axis=0)
    enc_np = positional_encode(coords, model.posenc.motion)
    nm = len(model.motion_net.weights)
    # supervised regression on targets in [-1, 1]: a fixed healthy rate,
    # independent of the joint-phase rates (which may be tiny to preserve
    # the warm start during refinement)
    state = gk.AdamState(lr=3e-2)
    for _ in range(config.motion_warm_start):
        tape = gk.Tape()
        leaves, _, _, mp = model._param_leaves(tape)
        u = model.motion_net.forward(tape.constant(enc_np), mp)
        r = gk.add(u, tape.constant(-target))
        node_grads = gk.backward(gk.sum_reduce(gk.mul(r, r)))
        params = model.params()[-nm:]
        grads = [node_grads.get(leaf) if node_grads.get(leaf) is not None
                 else np.zeros_like(p)
                 for leaf, p in zip(leaves[-nm:], params)]
        model.motion_net.weights = list(gk.adam_step(params, grads, state))
        tape.release()


def _pretrain_static(model: FusionModel, meas: MeasurementSet,
                     config: StfmConfig) -> None:
    """Fit the static net's color head to the pixelwise keyframe minimum."""
    m, n = meas.spatial_shape
    target = np.min(meas.b_g, axis=0).reshape(m * n, -1)
    xy = make_grid(m, n, 1)[:, :2]
    ns = len(model.static_net.weights)
    state = gk.AdamState(lr=config.learning_rate)
    for _ in range(config.static_pretrain):
        tape = gk.Tape()
        leaves, sp, _, _ = model._param_leaves(tape)
        vs, _ = model._static_on_tape(tape, xy, sp)
        r = gk.add(vs, tape.constant(-target))
        node_grads = gk.backward(gk.sum_reduce(gk.mul(r, r)))
        params = model.params()[:ns]
        grads = [node_grads.get(leaf) if node_grads.get(leaf) is not None
                 else np.zeros_like(p) for leaf, p in zip(leaves[:ns], params)]
        model.static_net.weights = list(gk.adam_step(params, grads, state))
        tape.release()


@dataclass
class StfmResult:
    video: np.ndarray            # (M, N, K, C)
    motion: np.ndarray           # (M, N, K, 2)
    alpha: np.ndarray            # (M, N, K)
    lam: np.ndarray | None
    loss_curve: np.ndarray
    model: FusionModel


def reconstruct(meas: MeasurementSet, config: StfmConfig) -> StfmResult:
    """Fit the fusion model to one measurement set with Adam."""
    prev_dtype = None
    if config.dtype == "f32":
        prev_dtype = np.float64
        gk.set_default_dtype(np.float32)
    try:
        model = FusionModel.create(config, channels=meas.b_r.shape[-1])
        if config.static_pretrain and not (config.no_static or config.no_gs):
            _pretrain_static(model, meas, config)
        if config.motion_warm_start and not (config.no_rs or config.no_gs):
            _warm_start_motion(model, meas, config)
        n_color = len(model.static_net.weights) + len(model.dynamic_net.weights)
        state = gk.AdamState(lr=config.learning_rate)
        state_motion = gk.AdamState(
            lr=config.learning_rate * config.motion_lr_scale)
        stages = [(its, _gaussian_blur_psf(sigma))
                  for its, sigma in config.coarse_stages]
        stages.append((config.iterations, None))
        curve = np.zeros(sum(its for its, _ in stages))
        last_finite = None
        diag = None
        it = 0
        total = sum(its for its, _ in stages)
        for stage_iters, blur in stages:
            for _ in range(stage_iters):
                if config.lr_final is not None:
                    frac = it / max(total - 1, 1)
                    lr = config.lr_final + 0.5 \
                        * (config.learning_rate - config.lr_final) \
                        * (1.0 + math.cos(math.pi * frac))
                    state.lr = lr
                    state_motion.lr = lr * config.motion_lr_scale
                loss, grads, diag = stfm_loss(model, meas, config, blur=blur)
                if not math.isfinite(loss):
                    raise FusionError(
                        f"diverged at iteration {it}; last finite loss {last_finite}")
                last_finite = loss
                curve[it] = loss
                if config.log_every and it % config.log_every == 0:
                    print(f"  iter {it:5d}  loss {loss:.6g}")
                params = model.params()
                model.set_params(
                    gk.adam_step(params[:n_color], grads[:n_color], state)
                    + gk.adam_step(params[n_color:], grads[n_color:],
                                   state_motion))
                it += 1
        # final forward with the optimized parameters
        loss, _, diag = stfm_loss(model, meas, config, want_grads=False)
        m, n = meas.spatial_shape
        k = meas.timing.frames
        return StfmResult(
            video=diag["video"],
            motion=video_flat_to_grid(diag["motion"], m, n, k),
            alpha=video_flat_to_grid(diag["alpha"], m, n, k)[..., 0],
            lam=diag["lam"],
            loss_curve=curve,
            model=model,
        )
    finally:
        if prev_dtype is not None:
            gk.set_default_dtype(prev_dtype)

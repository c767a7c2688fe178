"""Experiment orchestration: configs, tensor-container I/O, PNG export,
PSNR metrics, centroid tracking, and the ablation runner.

Artifacts are deterministic functions of (config, seed); only the
wall-clock field of a metrics report varies between identical runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import baselines, camera, fusion, scenes

__all__ = [
    "HarnessError",
    "ConfigError",
    "FormatError",
    "ExperimentConfig",
    "MetricsReport",
    "TensorContainer",
    "psnr",
    "per_frame_psnr",
    "centroid_track",
    "save_tensor",
    "load_tensor",
    "export_png_frames",
    "run_experiment",
    "run_ablation",
    "ABLATION_VARIANTS",
]

SCHEMA_VERSION = 1
MAGIC = b"CVTENSOR\0\0\0\0\0\0\0\1"
METHODS = ("stfm", "tv3d_single", "tv3d_dual", "interp")
ABLATION_VARIANTS = ("full", "no_static", "no_motionreg", "no_RS", "no_GS")


class HarnessError(Exception):
    pass


class ConfigError(HarnessError):
    pass


class FormatError(HarnessError):
    """Malformed tensor container; message carries the byte offset."""


# ---------------------------------------------------------------------------
# metrics


def psnr(estimate: np.ndarray, truth: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all elements; +inf when MSE is zero."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise HarnessError(
            f"shape mismatch: estimate {estimate.shape} vs truth {truth.shape}")
    mse = float(np.mean((estimate.astype(np.float64) - truth) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def per_frame_psnr(estimate: np.ndarray, truth: np.ndarray,
                   peak: float = 1.0) -> np.ndarray:
    """PSNR of each time slice of an (M, N, K[, C]) video pair."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise HarnessError(
            f"shape mismatch: estimate {estimate.shape} vs truth {truth.shape}")
    k = estimate.shape[2]
    return np.array([psnr(estimate[:, :, t], truth[:, :, t], peak)
                     for t in range(k)])


def centroid_track(video: np.ndarray, background: np.ndarray,
                   mass_threshold: float = 1e-6) -> np.ndarray:
    """Per-frame intensity-weighted centroid of max(0, frame - background).

    Returns a (K, 2) array of (y, x); frames whose foreground mass falls
    below ``mass_threshold`` are marked NaN.
    """
    video = np.asarray(video, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if background.shape[:2] != video.shape[:2]:
        raise HarnessError(
            f"background spatial shape {background.shape[:2]} does not match "
            f"video {video.shape[:2]}")
    if video.ndim == 3:
        video = video[..., None]
    if background.ndim == 2:
        background = background[..., None]
    m, n, k, _ = video.shape
    fg = np.clip(video - background[:, :, None, :], 0.0, None).sum(axis=3)
    yy, xx = np.mgrid[0:m, 0:n]
    track = np.full((k, 2), np.nan)
    for t in range(k):
        w = fg[:, :, t]
        mass = w.sum()
        if mass > mass_threshold:
            track[t, 0] = float((yy * w).sum() / mass)
            track[t, 1] = float((xx * w).sum() / mass)
    return track


# ---------------------------------------------------------------------------
# tensor container

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class TensorContainer:
    data: np.ndarray
    axes: list
    meta: dict = field(default_factory=dict)


def save_tensor(path, tensor: np.ndarray, meta: dict | None = None,
                axes=("y", "x", "t", "c")) -> None:
    """Write a tensor as magic + u64-length-prefixed JSON header + raw payload."""
    tensor = np.asarray(tensor)
    if tensor.dtype == np.float32:
        dtype = "f32"
    elif tensor.dtype == np.float64:
        dtype = "f64"
    else:
        raise HarnessError(f"unsupported dtype {tensor.dtype}; use f32 or f64")
    header = {
        "dims": list(tensor.shape),
        "dtype": dtype,
        "axes": list(axes)[: tensor.ndim],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(tensor, dtype=_DTYPES[dtype]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc


def load_tensor(path) -> TensorContainer:
    """Read a tensor container; malformed files raise FormatError with offsets."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise HarnessError(f"cannot read {path}: {exc}") from exc
    if raw[:16] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    if len(raw) < 24:
        raise FormatError(
            f"{path}: truncated header length field at byte offset 16")
    (hlen,) = struct.unpack("<Q", raw[16:24])
    if len(raw) < 24 + hlen:
        raise FormatError(
            f"{path}: header declared {hlen} bytes at offset 24 but only "
            f"{len(raw) - 24} remain")
    try:
        header = json.loads(raw[24 : 24 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(
            f"{path}: invalid JSON header at byte offset 24: {exc}") from exc
    for key in ("dims", "dtype", "axes"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype {header['dtype']!r}")
    np_dtype = _DTYPES[header["dtype"]]
    dims = tuple(int(d) for d in header["dims"])
    expected = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
    payload = raw[24 + hlen :]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload at byte offset {24 + hlen} has {len(payload)} "
            f"bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
    return TensorContainer(data=data.copy(), axes=list(header["axes"]),
                           meta=dict(header.get("meta", {})))


def export_png_frames(video: np.ndarray, directory) -> list:
    """Write each frame of an (M, N, K[, C]) video as frame_%05d.png.

    Values are clamped to [0, 1] then quantized round-half-up to 8 bits.
    Returns the written paths.
    """
    from PIL import Image

    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 3:
        video = video[..., None]
    if video.shape[-1] == 1:
        video = np.repeat(video, 3, axis=-1)
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create {directory}: {exc}") from exc
    quant = np.floor(np.clip(video, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    paths = []
    for t in range(video.shape[2]):
        path = directory / f"frame_{t:05d}.png"
        try:
            Image.fromarray(quant[:, :, t]).save(path)
        except OSError as exc:
            raise HarnessError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    scene: scenes.SceneSpec
    psf: scenes.PsfSpec
    timing: camera.TimingConfig
    method: str = "stfm"
    method_config: dict = field(default_factory=dict)
    seed: int = 0
    psi: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.timing.frames != self.scene.k:
            raise ConfigError(
                f"timing produces {self.timing.frames} frames but the scene "
                f"has {self.scene.k}")
        if self.timing.rows != self.scene.m:
            raise ConfigError(
                f"timing covers {self.timing.rows} rows but the scene has "
                f"{self.scene.m}")

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise HarnessError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return ExperimentConfig.from_dict(doc)

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        try:
            scene_doc = dict(doc.get("scene", {}))
            scene_doc.pop("kind", None)
            scene = scenes.SceneSpec(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in scene_doc.items()})
            psf = scenes.PsfSpec(**doc.get("psf", {}))
            timing_doc = dict(doc.get("timing", {}))
            if "gs_trigger_frames" in timing_doc and timing_doc["gs_trigger_frames"] is not None:
                timing_doc["gs_trigger_frames"] = tuple(timing_doc["gs_trigger_frames"])
            timing = camera.TimingConfig(**timing_doc)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        except (camera.CameraError, scenes.SceneError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = ExperimentConfig(
            scene=scene,
            psf=psf,
            timing=timing,
            method=doc.get("method", "stfm"),
            method_config=dict(doc.get("method_config", {})),
            seed=int(doc.get("seed", 0)),
            psi=float(doc.get("psi", 1.0)),
        )
        cfg.scene_kind = doc.get("scene", {}).get("kind", "sine_ball")
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scene": {"kind": getattr(self, "scene_kind", "sine_ball"),
                      **asdict(self.scene)},
            "psf": asdict(self.psf),
            "timing": {
                "rows": self.timing.rows,
                "rs_exposure_lines": self.timing.rs_exposure_lines,
                "gs_exposure_frames": self.timing.gs_exposure_frames,
                "gs_trigger_frames": list(self.timing.gs_trigger_frames),
                "line_time_us": self.timing.line_time_us,
                "frames_override": self.timing.frames_override,
            },
            "method": self.method,
            "method_config": self.method_config,
            "seed": self.seed,
            "psi": self.psi,
        }

    def config_hash(self) -> str:
        doc = self.to_dict()
        blob = json.dumps(doc, sort_keys=True, default=_json_fallback)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _json_fallback(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


@dataclass
class MetricsReport:
    psnr_db: float
    per_frame_psnr_db: np.ndarray
    centroid_error_px: np.ndarray | None
    wall_clock_s: float
    config_hash: str

    def to_dict(self) -> dict:
        def enc(x):
            return "inf" if x == math.inf else (None if math.isnan(x) else x)
        return {
            "psnr_db": enc(self.psnr_db),
            "per_frame_psnr_db": [enc(v) for v in self.per_frame_psnr_db],
            "centroid_error_px": (
                None if self.centroid_error_px is None
                else [enc(v) for v in self.centroid_error_px]),
            "wall_clock_s": self.wall_clock_s,
            "config_hash": self.config_hash,
        }


# ---------------------------------------------------------------------------
# experiment stages


def build_scene(config: ExperimentConfig):
    """Render ground truth. Returns (video, trajectory, background frame)."""
    kind = getattr(config, "scene_kind", "sine_ball")
    spec = scenes.SceneSpec(**{**config.scene.__dict__, "seed": config.seed})
    if kind == "sine_ball":
        video, traj = scenes.make_sine_ball(spec)
    elif kind == "dense":
        video, traj = scenes.make_dense_scene(spec)
    else:
        raise ConfigError(f"unknown scene kind {kind!r}")
    bg = scenes._background_frame(spec)
    return video, traj, bg


def simulate(config: ExperimentConfig):
    """Render the scene and form both camera measurements.

    Returns (measurements, truth video, trajectory, background).
    """
    video, traj, bg = build_scene(config)
    psf = scenes.make_psf(scenes.PsfSpec(**{**config.psf.__dict__,
                                            "seed": config.seed}))
    meas = camera.simulate_measurements(video, psf, config.timing,
                                        psi=config.psi)
    return meas, video, traj, bg


def _reconstruct(config: ExperimentConfig, meas: camera.MeasurementSet):
    method = config.method
    opts = dict(config.method_config)
    try:
        if method == "stfm":
            stfm_cfg = fusion.StfmConfig(seed=config.seed, **opts)
            result = fusion.reconstruct(meas, stfm_cfg)
            return np.clip(result.video, 0.0, 1.0)
        if method in ("tv3d_single", "tv3d_dual"):
            mode = "single_shutter" if method == "tv3d_single" else "dual_shutter"
            tv_cfg = baselines.Tv3dConfig(mode=mode, **opts)
            video, _ = baselines.reconstruct_tv3d(meas, tv_cfg)
            return np.clip(video, 0.0, 1.0)
        if method == "interp":
            return np.clip(baselines.linear_keyframe_interp(
                meas.b_g, meas.timing.gs_trigger_frames, meas.timing.frames,
                meas.timing.gs_exposure_frames), 0.0, 1.0)
    except TypeError as exc:
        raise ConfigError(f"bad method_config for {method}: {exc}") from exc
    raise ConfigError(f"unknown method {method!r}")


def write_metrics_csv(path, values: np.ndarray) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "psnr_db"])
            for t, v in enumerate(values):
                writer.writerow([t, "inf" if v == math.inf else f"{v:.6f}"])
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc


def run_experiment(config: ExperimentConfig, out_dir,
                   meas: camera.MeasurementSet | None = None,
                   truth: np.ndarray | None = None,
                   trajectory: np.ndarray | None = None,
                   quiet: bool = True) -> MetricsReport:
    """Simulate (unless measurements are provided), reconstruct, score, save.

    Writes recon.cvt, frames/, per_frame_psnr.csv, and metrics.json under
    out_dir. Returns the metrics report.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create {out_dir}: {exc}") from exc
    t0 = time.monotonic()
    if meas is None or truth is None:
        meas, truth, trajectory, bg = simulate(config)
    else:
        _, _, bg = build_scene(config)
    recon = _reconstruct(config, meas)
    report = score(config, recon, truth, trajectory, bg,
                   wall_clock_s=time.monotonic() - t0)
    save_tensor(out_dir / "recon.cvt", recon,
                meta={"method": config.method, "seed": config.seed})
    save_tensor(out_dir / "truth.cvt", truth, meta={"seed": config.seed})
    export_png_frames(recon, out_dir / "frames")
    write_metrics_csv(out_dir / "per_frame_psnr.csv", report.per_frame_psnr_db)
    try:
        with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise HarnessError(f"cannot write metrics.json: {exc}") from exc
    if not quiet:
        print(f"[{config.method}] PSNR {report.psnr_db:.2f} dB "
              f"({report.wall_clock_s:.1f}s)")
    return report


def score(config: ExperimentConfig, recon: np.ndarray, truth: np.ndarray,
          trajectory: np.ndarray | None, background: np.ndarray,
          wall_clock_s: float = 0.0) -> MetricsReport:
    cent_err = None
    if trajectory is not None:
        track = centroid_track(recon, background)
        cent_err = np.hypot(track[:, 0] - trajectory[:, 0],
                            track[:, 1] - trajectory[:, 1])
    return MetricsReport(
        psnr_db=psnr(recon, truth),
        per_frame_psnr_db=per_frame_psnr(recon, truth),
        centroid_error_px=cent_err,
        wall_clock_s=wall_clock_s,
        config_hash=config.config_hash(),
    )


def ablation_flags(variant: str) -> dict:
    """Map an ablation variant name onto reconstruction config flags."""
    table = {
        "full": {},
        "no_static": {"no_static": True},
        "no_motionreg": {"no_motion_reg": True},
        "no_RS": {"no_rs": True},
        "no_GS": {"no_gs": True},
    }
    if variant not in table:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return table[variant]


def run_ablation(config: ExperimentConfig, out_dir, quiet: bool = True) -> dict:
    """Run the five model ablation variants on a shared scene and seed.

    Writes one subdirectory per variant plus ablation.csv mapping variant to
    full-video PSNR. Returns {variant: psnr_db}.
    """
    if config.method != "stfm":
        raise ConfigError("ablation requires method=stfm")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meas, truth, traj, _ = simulate(config)
    results = {}
    for variant in ABLATION_VARIANTS:
        var_cfg = ExperimentConfig(
            scene=config.scene, psf=config.psf, timing=config.timing,
            method="stfm",
            method_config={**config.method_config, **ablation_flags(variant)},
            seed=config.seed, psi=config.psi)
        var_cfg.scene_kind = getattr(config, "scene_kind", "sine_ball")
        report = run_experiment(var_cfg, out_dir / variant, meas=meas,
                                truth=truth, trajectory=traj, quiet=quiet)
        results[variant] = report.psnr_db
    try:
        with open(out_dir / "ablation.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "psnr_db"])
            for variant in ABLATION_VARIANTS:
                writer.writerow([variant, f"{results[variant]:.6f}"])
    except OSError as exc:
        raise HarnessError(f"cannot write ablation.csv: {exc}") from exc
    return results

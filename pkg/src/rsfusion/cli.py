"""Command-line interface.

Subcommands: simulate, psf, reconstruct, eval, ablate. Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsfusion",
        description="Dual-shutter compressive-video simulation and "
                    "reconstruction toolkit.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress output")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP thread counts")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene and both measurements")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("psf", help="render the diffuser point spread function")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="reconstruct video from measurements")
    p.add_argument("--method", required=True,
                   choices=["stfm", "tv3d_single", "tv3d_dual", "interp"])
    p.add_argument("--config", required=True)
    p.add_argument("--meas", required=True,
                   help="directory written by `simulate`")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a reconstruction against the truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run the five model ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_config(path, seed_override):
    from . import harness

    config = harness.ExperimentConfig.from_json(path)
    if seed_override is not None:
        config.seed = seed_override
    return config


def _cmd_simulate(args) -> int:
    from . import harness

    config = _load_config(args.config, args.seed)
    meas, truth, traj, _ = harness.simulate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.save_tensor(out / "truth.cvt", truth, meta={"seed": config.seed})
    harness.save_tensor(out / "b_r.cvt", meas.b_r, axes=("y", "x", "c"),
                        meta={"psi": meas.psi})
    harness.save_tensor(out / "b_g.cvt", meas.b_g, axes=("l", "y", "x", "c"),
                        meta={"triggers": list(meas.timing.gs_trigger_frames)})
    harness.save_tensor(out / "psf.cvt", meas.psf.values, axes=("y", "x"))
    if traj is not None:
        harness.save_tensor(out / "trajectory.cvt", traj, axes=("t", "yx"))
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.quiet:
        print(f"wrote measurements and ground truth to {out}")
    return EXIT_OK


def _cmd_psf(args) -> int:
    from . import harness, scenes

    config = _load_config(args.config, args.seed)
    psf = scenes.make_psf(scenes.PsfSpec(**{**config.psf.__dict__,
                                            "seed": config.seed}))
    harness.save_tensor(args.out, psf.values, axes=("y", "x"),
                        meta={"seed": config.seed})
    if not args.quiet:
        print(f"wrote {args.out}")
    return EXIT_OK


def _load_measurements(meas_dir, config):
    import numpy as np

    from . import camera, harness

    meas_dir = Path(meas_dir)
    b_r = harness.load_tensor(meas_dir / "b_r.cvt")
    b_g = harness.load_tensor(meas_dir / "b_g.cvt")
    psf = harness.load_tensor(meas_dir / "psf.cvt")
    truth = harness.load_tensor(meas_dir / "truth.cvt").data.astype(np.float64) \
        if (meas_dir / "truth.cvt").exists() else None
    traj_path = meas_dir / "trajectory.cvt"
    traj = harness.load_tensor(traj_path).data.astype(np.float64) \
        if traj_path.exists() else None
    meas = camera.MeasurementSet(
        b_r=b_r.data.astype(np.float64),
        b_g=b_g.data.astype(np.float64),
        timing=config.timing,
        psf=camera.Psf(psf.data.astype(np.float64)),
        psi=float(b_r.meta.get("psi", config.psi)))
    return meas, truth, traj


def _cmd_reconstruct(args) -> int:
    from . import harness

    config = _load_config(args.config, args.seed)
    config.method = args.method
    meas, truth, traj = _load_measurements(args.meas, config)
    if truth is None:
        raise harness.HarnessError(f"{args.meas}: missing truth.cvt")
    report = harness.run_experiment(config, args.out, meas=meas, truth=truth,
                                    trajectory=traj, quiet=args.quiet)
    if not args.quiet:
        print(f"PSNR {report.psnr_db:.2f} dB")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import harness

    recon = harness.load_tensor(Path(args.recon) / "recon.cvt").data
    truth = harness.load_tensor(Path(args.truth) / "truth.cvt").data
    full = harness.psnr(recon.astype(float), truth.astype(float))
    per_frame = harness.per_frame_psnr(recon.astype(float), truth.astype(float))
    doc = {
        "psnr_db": "inf" if full == math.inf else full,
        "per_frame_psnr_db": ["inf" if v == math.inf else v for v in per_frame],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.quiet:
        print(f"PSNR {full:.2f} dB -> {args.out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from . import harness

    config = _load_config(args.config, args.seed)
    results = harness.run_ablation(config, args.out, quiet=args.quiet)
    if not args.quiet:
        for variant in harness.ABLATION_VARIANTS:
            print(f"{variant}: {results[variant]:.2f} dB")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.exit(EXIT_CONFIG, "error: --threads must be >= 1\n")
        _set_threads(args.threads)

    from . import baselines, camera, fusion, gradkit, harness, scenes

    handlers = {
        "simulate": _cmd_simulate,
        "psf": _cmd_psf,
        "reconstruct": _cmd_reconstruct,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (harness.ConfigError, camera.CameraError, scenes.SceneError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fusion.FusionError, baselines.BaselineError,
            gradkit.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (harness.FormatError, harness.HarnessError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

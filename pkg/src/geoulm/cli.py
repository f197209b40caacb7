"""Command line entry point: ``geoulm simulate | localize | evaluate | render``.

Exit codes are 0 on success, 1 for invalid input or configuration and 2 for
any other failure. ``GULM_LOG`` sets the log level (default ``WARNING``).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluation import (aggregate_rmse, jaccard, match_and_score, render_density, ssim)
from .exceptions import (CorruptStreamError, FormatError, GeoULMError,
                         UndefinedMetricError, ValidationError)
from .pipeline import PipelineReport, localize_frames
from .sim import add_noise, generate_scene, simulate_frame

log = logging.getLogger("geoulm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _load_config(args) -> io.RunConfig:
    cfg = io.read_config(args.config) if args.config else io.config_from_dict({})
    changes = {}
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ValidationError("--seed must be non-negative")
        changes["seed"] = args.seed
        changes["noise"] = dataclasses.replace(cfg.noise, rng_seed=args.seed)
    if getattr(args, "channels", None) is not None:
        changes["channels"] = io.parse_channels(args.channels, cfg.acquisition.num_channels)
    if getattr(args, "noise_clutter_db", None) is not None:
        changes["noise"] = dataclasses.replace(changes.get("noise", cfg.noise),
                                               clutter_db=args.noise_clutter_db)
    scene = {}
    if getattr(args, "frames", None) is not None:
        scene["frames"] = args.frames
    if getattr(args, "bubbles", None) is not None:
        scene["bubbles"] = args.bubbles
    if any(v < 0 for v in scene.values()):
        raise ValidationError("--frames and --bubbles must be non-negative")
    if scene:
        changes["scene"] = dataclasses.replace(cfg.scene, **scene)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _threads(args) -> int:
    if args.threads is None:
        return os.cpu_count() or 1
    if args.threads < 1:
        raise ValidationError("--threads must be at least 1")
    return args.threads


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.scene.frames == 0:
        raise ValidationError("nothing to simulate: frames = 0")
    scenes, frames = [], []
    for f in range(cfg.scene.frames):
        sc = generate_scene(cfg.scene.bubbles, cfg.scene.region, cfg.seed,
                            cfg.scene.amplitude_range, frame_id=f)
        fr = add_noise(simulate_frame(sc, cfg.geometry, cfg.pulse, cfg.acquisition), cfg.noise)
        scenes.append(sc)
        frames.append(fr)
    io.write_rf(out / "frames.gulm", frames, cfg.acquisition.sample_rate)
    io.write_scenes(scenes, out / "scenes.jsonl")
    log.info("wrote %d frames to %s", len(frames), out)
    return 0


def cmd_localize(args) -> int:
    cfg = _load_config(args)
    head, frames = io.read_rf(args.inp)
    acq = cfg.acquisition
    if (head.num_channels, head.num_samples) != (acq.num_channels, acq.num_samples):
        raise ValidationError(
            f"{args.inp}: frames are {head.num_channels} x {head.num_samples}, config expects "
            f"{acq.num_channels} x {acq.num_samples}")
    if head.sample_rate != acq.sample_rate:
        raise ValidationError(f"{args.inp}: sample rate {head.sample_rate} differs from config")
    results = localize_frames(frames, acq, cfg.geometry, cfg.pipeline, cfg.channels, _threads(args))
    report = PipelineReport(config_digest=cfg.digest())
    for r in results:
        report.add(r)
    out = Path(args.out)
    io.write_locations([m for r in results for m in r.locations], out)
    io.write_json(report.as_dict(), out.with_suffix(".report.json"))
    log.info("localized %d frames: %s", len(results), report.counts)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    locs = io.read_locations(args.locations)
    truth = io.read_scenes(args.truth)
    ids = [sc.frame_id for sc in truth]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{args.truth}: duplicate frame ids")
    stray = sorted({m.frame_id for m in locs} - set(ids))
    if stray:
        raise ValidationError(f"locations reference frames {stray[:5]} missing from the truth file")
    lam = cfg.acquisition.wavelength
    scores = [match_and_score([m for m in locs if m.frame_id == sc.frame_id], sc, lam,
                              frame_id=sc.frame_id) for sc in truth]
    summary = {"frames": len(scores), "jaccard_percent": jaccard(scores)}
    try:
        summary["rmse_mean_lambda10"], summary["rmse_std_lambda10"] = aggregate_rmse(scores, lam)
    except UndefinedMetricError:
        summary["rmse_mean_lambda10"] = summary["rmse_std_lambda10"] = None
    if args.ssim:
        a = _render(cfg, locs)
        b = _render(cfg, [p for sc in truth for p in sc.scatterer_positions])
        summary["ssim_percent"] = ssim(a, b)
    out = Path(args.out)
    io.write_json(summary, out)
    io.write_scores(scores, out.with_suffix(".scores.csv"))
    print(f"jaccard {summary['jaccard_percent']:.2f}%  rmse {summary['rmse_mean_lambda10']} lambda/10")
    return 0


def _render(cfg, locations):
    region = cfg.scene.region
    px = cfg.render.pixel_size or cfg.acquisition.wavelength / 10
    shape = (int(np.ceil((region.z_max - region.z_min) / px)),
             int(np.ceil((region.x_max - region.x_min) / px)))
    return render_density(locations, (region.x_min, region.z_min), shape, px, cfg.render.gamma)


def cmd_render(args) -> int:
    cfg = _load_config(args)
    image = _render(cfg, io.read_locations(args.locations))
    io.write_image(image, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoulm", description="Beamforming-free microbubble localization.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--channels", help='channel subset, e.g. "0-15" or "spread:16"')
        sp.add_argument("--threads", type=int, help="worker threads (default: all CPUs)")
        return sp

    s = common(sub.add_parser("simulate", help="synthesize RF frames and ground truth"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--frames", type=int)
    s.add_argument("--bubbles", type=int)
    s.add_argument("--noise-clutter-db", type=float)
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("localize", help="localize bubbles in an RF container"))
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help="locations CSV; a .report.json is written next to it")
    s.set_defaults(func=cmd_localize)

    s = common(sub.add_parser("evaluate", help="score locations against ground truth"))
    s.add_argument("--locations", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True, help="summary JSON; a .scores.csv is written next to it")
    s.add_argument("--ssim", action="store_true", help="also compare rendered density maps")
    s.set_defaults(func=cmd_evaluate)

    s = common(sub.add_parser("render", help="render a density image (.pgm or .png)"))
    s.add_argument("--locations", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("GULM_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValidationError, FormatError, CorruptStreamError, UndefinedMetricError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (GeoULMError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end localization: echoes -> tracks -> ellipses -> fused positions."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cluster import ClusterConfig, MBLocation, cluster_candidates
from .exceptions import ValidationError
from .geometry import GeometryConfig, localize_track
from .memgo import FitConfig, extract_echoes
from .sim import PulseModel
from .toa import (EchoTrack, MatchConfig, match_echoes, phase_refine_toa,
                  reproject_validate)
from .types import (AcquisitionConfig, RFFrame, TransducerGeometry, linear_array,
                    round_trip_distance)

STAGES = ("fit", "match", "refine", "validate", "intersect", "cluster")


@dataclass(frozen=True)
class PipelineConfig:
    fit: FitConfig = FitConfig(max_iter=200, rel_tol=1e-10, noise_floor_factor=3.0, noise_stop=0.01)
    match: MatchConfig = MatchConfig(predictive=True, phase_source="own")
    geometry: GeometryConfig = GeometryConfig(all_pairs_below=5)
    cluster: ClusterConfig = ClusterConfig(min_cluster_size=3)
    gap: int = 1
    remove_dc: bool = True
    prune_outliers: bool = True
    prune_tolerance: float | None = None    # meters, default an eighth of a wavelength
    resolve_cycles: bool = True
    rematch_passes: int = 3
    min_explained: int = 3        # 0 disables the explain-away filter
    min_explained_fraction: float = 0.3
    explain_tolerance: float | None = None   # meters, default an eighth of a wavelength
    refine_positions: bool = True


@dataclass
class FrameResult:
    frame_id: int
    locations: list
    candidates: list
    counts: dict
    timings: dict


@dataclass
class PipelineReport:
    """Per-stage wall time and funnel counts summed over frames."""

    timings: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    counts: dict = field(default_factory=lambda: {
        "frames": 0, "echoes": 0, "tracks": 0, "accepted_tracks": 0,
        "candidates": 0, "clusters": 0})
    config_digest: str = ""

    def add(self, result: FrameResult) -> None:
        self.counts["frames"] += 1
        for k, v in result.counts.items():
            self.counts[k] += v
        for k, v in result.timings.items():
            self.timings[k] += v

    def as_dict(self) -> dict:
        return {"timings_s": dict(self.timings), "counts": dict(self.counts),
                "config_digest": self.config_digest}


def _prune_track(track: EchoTrack, echo_sets, geometry, config, pcfg: PipelineConfig):
    """Keep the observations consistent with the best-supported intersection.

    Every pairwise intersection of the track is scored by how many
    observations it explains within the prune tolerance; the winner's
    inliers are kept, so a track that switched scatterers part-way keeps
    its larger consistent part. With per-echo phases an arrival time is
    only known modulo one carrier period, so each observation may move by
    one period towards the winner (``pcfg.resolve_cycles``). Returns the
    pruned track or ``None`` when fewer than two observations survive. If
    the reference observation is dropped the phase is re-anchored on the
    middle survivor.
    """
    cands = localize_track(track, geometry, config, replace(pcfg.geometry, check_focal_identity=False))
    if not cands:
        return None
    pos = np.array([c.position for c in cands])
    obs = track.observations
    recv = geometry.receiver_positions[track.channels]
    meas = np.array([o.toa for o in obs]) * config.speed_of_sound
    period = np.array([2 * math.pi / o.source_component.omega for o in obs]) / config.sample_rate
    period *= config.speed_of_sound
    pred = np.array([round_trip_distance(p, geometry.virtual_source, recv) for p in pos])
    shift = np.zeros_like(pred)
    if pcfg.resolve_cycles and pcfg.match.phase_source == "own":
        shift = np.clip(np.round((pred - meas) / period), -1, 1) * period
    err = np.abs(pred - meas - shift)
    tol = config.wavelength / 8 if pcfg.prune_tolerance is None else pcfg.prune_tolerance
    inliers = err < tol
    cost = np.where(inliers, err, tol) ** 2
    best = np.lexsort((np.abs(shift).sum(axis=1), cost.sum(axis=1), -inliers.sum(axis=1)))[0]
    keep = tuple(replace(o, toa=o.toa + dt / config.speed_of_sound)
                 for o, ok, dt in zip(obs, inliers[best], shift[best]) if ok)
    if len(keep) < 2:
        return None
    if len(keep) == len(track) and not shift[best].any():
        return track
    track = replace(track, observations=keep)
    if track.reference_channel not in [o.channel_index for o in keep]:
        ref = keep[len(keep) // 2]
        track = replace(track, reference_channel=ref.channel_index, reference_echo=ref.echo_index)
        if pcfg.match.phase_source == "reference":
            track = phase_refine_toa(track, echo_sets, pcfg.gap, config, "reference")
    return track


def _validate(tracks, echo_sets, geometry, config, pcfg):
    accepted = []
    for tr in tracks:
        if tr.phase_flag:
            continue
        if pcfg.prune_outliers and len(tr) >= 3:
            tr = _prune_track(tr, echo_sets, geometry, config, pcfg)
            if tr is None:
                continue
        if reproject_validate(tr, geometry, config, pcfg.match).accepted:
            accepted.append(tr)
    return accepted


def _claim(position, paths, claimed, recv, geometry, thr):
    pred = round_trip_distance(position, geometry.virtual_source, recv)
    hits = []
    for ch, (path, used) in enumerate(zip(paths, claimed)):
        if not len(path):
            continue
        err = np.where(used, np.inf, np.abs(path - pred[ch]))
        k = int(np.argmin(err))
        if err[k] < thr:
            hits.append((ch, k))
    return hits


def _refit(position, hits, paths, recv, geometry, thr):
    """Robust least-squares position from the claimed round-trip paths."""
    if len(hits) < 3:
        return position
    chans = [ch for ch, _ in hits]
    meas = np.array([paths[ch][k] for ch, k in hits])

    def resid(p):
        return round_trip_distance(p, geometry.virtual_source, recv[chans]) - meas

    sol = least_squares(resid, position, loss="soft_l1", f_scale=thr / 2, x_scale=thr)
    return sol.x if sol.success and sol.x[1] > 0 else position


def _explain_away(locations, echo_sets, geometry, config, pcfg: PipelineConfig):
    """Drop locations whose echoes are already explained by stronger ones.

    Locations are visited by decreasing support. Each claims, per channel,
    the unclaimed echo closest to its predicted round-trip path (within the
    explain tolerance) and survives if it claims at least
    ``max(min_explained, ceil(min_explained_fraction * channels))`` echoes.
    This removes ghosts assembled from leftover, biased or noise echoes.
    With ``pcfg.refine_positions`` every survivor is moved to the robust
    least-squares fit of its claimed echoes, and claims are redone there.
    """
    thr = config.wavelength / 8 if pcfg.explain_tolerance is None else pcfg.explain_tolerance
    need = max(pcfg.min_explained, math.ceil(pcfg.min_explained_fraction * len(echo_sets)))
    recv = geometry.receiver_positions
    paths = []
    for es in echo_sets:
        comps = es.components
        toa = np.array([(c.mu - c.phi / c.omega) / config.sample_rate for c in comps])
        paths.append((toa - config.transmit_delay_offset) * config.speed_of_sound)
    claimed = [np.zeros(len(p), dtype=bool) for p in paths]
    order = sorted(range(len(locations)),
                   key=lambda i: (-locations[i].support, locations[i].spread, i))
    keep = {}
    for i in order:
        pos = np.asarray(locations[i].position, dtype=float)
        hits = _claim(pos, paths, claimed, recv, geometry, thr)
        if pcfg.refine_positions:
            for _ in range(2):
                pos = _refit(pos, hits, paths, recv, geometry, thr)
                hits = _claim(pos, paths, claimed, recv, geometry, thr)
        if len(hits) >= need:
            keep[i] = replace(locations[i], position=pos)
            for ch, k in hits:
                claimed[ch][k] = True
    return sorted(keep.values(), key=lambda m: (m.position[0], m.position[1]))


def localize_frame(frame: RFFrame, config: AcquisitionConfig, geometry: TransducerGeometry,
                   pcfg: PipelineConfig = PipelineConfig(), channels=None) -> FrameResult:
    """Run the full chain on one frame.

    ``channels`` selects a subset of the frame rows (and receivers); the
    default uses every channel.
    """
    timings = {s: 0.0 for s in STAGES}
    samples = frame.samples
    if channels is not None:
        channels = np.asarray(channels, dtype=int)
        samples = samples[channels]
        geometry = geometry.subset(channels)
    if samples.shape[0] != geometry.num_channels:
        raise ValidationError(
            f"frame {frame.frame_id}: {samples.shape[0]} channels vs {geometry.num_channels} receivers")
    samples = np.asarray(samples, dtype=float)
    if pcfg.remove_dc:
        samples = samples - samples.mean(axis=1, keepdims=True)

    t0 = time.perf_counter()
    echo_sets = [extract_echoes(samples[ch], config, pcfg.fit, ch) for ch in range(len(samples))]
    t1 = time.perf_counter()
    tracks = match_echoes(echo_sets, pcfg.gap, config, geometry, pcfg.match)
    t2 = time.perf_counter()
    tracks = [phase_refine_toa(tr, echo_sets, pcfg.gap, config, pcfg.match.phase_source) for tr in tracks]
    t3 = time.perf_counter()
    accepted = _validate(tracks, echo_sets, geometry, config, pcfg)
    for _ in range(pcfg.rematch_passes):
        # echoes released by pruning or rejection are matched again
        used = {(o.channel_index, o.echo_index) for tr in accepted for o in tr.observations}
        extra = match_echoes(echo_sets, pcfg.gap, config, geometry, pcfg.match, exclude=used)
        extra = [phase_refine_toa(tr, echo_sets, pcfg.gap, config, pcfg.match.phase_source) for tr in extra]
        tracks = tracks + extra
        found = _validate(extra, echo_sets, geometry, config, pcfg)
        if not found:
            break
        accepted += found
    t4 = time.perf_counter()
    candidates = []
    for i, tr in enumerate(accepted):
        candidates.extend(localize_track(tr, geometry, config, pcfg.geometry, track_id=i))
    t5 = time.perf_counter()
    h = pcfg.cluster.bandwidth if pcfg.cluster.bandwidth is not None else config.wavelength / 4
    locations = cluster_candidates(candidates, pcfg.cluster, h, frame.frame_id)
    if pcfg.min_explained > 0:
        locations = _explain_away(locations, echo_sets, geometry, config, pcfg)
    t6 = time.perf_counter()
    for name, a, b in zip(STAGES, (t0, t1, t2, t3, t4, t5), (t1, t2, t3, t4, t5, t6)):
        timings[name] = b - a
    counts = {"echoes": sum(len(s) for s in echo_sets), "tracks": len(tracks),
              "accepted_tracks": len(accepted), "candidates": len(candidates),
              "clusters": len(locations)}
    return FrameResult(frame.frame_id, locations, candidates, counts, timings)


def localize_frames(frames, config, geometry, pcfg=PipelineConfig(), channels=None,
                    threads: int = 1):
    """Localize many frames; output order follows the input order."""
    frames = list(frames)

    def work(fr):
        return localize_frame(fr, config, geometry, pcfg, channels)

    if threads <= 1 or len(frames) <= 1:
        return [work(fr) for fr in frames]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, frames))


class GeometricULM(BaseEstimator):
    """Beamforming-free microbubble localizer with an estimator interface.

    ``fit`` validates the acquisition set-up and calibrates the transmit delay
    offset from the pulse model when ``transmit_delay_offset="auto"``.
    ``predict`` maps RF frames (arrays of shape ``(channels, samples)`` or
    ``RFFrame`` objects) to arrays of ``(x, z)`` positions, one per frame.

    Parameters
    ----------
    acquisition : AcquisitionConfig
    geometry : TransducerGeometry, optional
        Defaults to a 128-element linear array with 0.1 mm pitch.
    pulse : PulseModel, optional
        Only used to calibrate the delay offset.
    channels : array-like of int, optional
        Channel subset to process.
    pipeline : PipelineConfig
    transmit_delay_offset : float or "auto"
    n_jobs : int
        Frame-level parallelism; results do not depend on it.
    """

    def __init__(self, acquisition=None, geometry=None, pulse=None, channels=None,
                 pipeline=None, transmit_delay_offset="auto", n_jobs=1):
        self.acquisition = acquisition
        self.geometry = geometry
        self.pulse = pulse
        self.channels = channels
        self.pipeline = pipeline
        self.transmit_delay_offset = transmit_delay_offset
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        acq = self.acquisition if self.acquisition is not None else AcquisitionConfig()
        geo = self.geometry if self.geometry is not None else linear_array(acq.num_channels)
        geo.check(acq)
        pulse = self.pulse if self.pulse is not None else PulseModel(acq.center_frequency)
        if isinstance(self.transmit_delay_offset, str):
            if self.transmit_delay_offset != "auto":
                raise ValidationError("transmit_delay_offset must be a number or 'auto'")
            delay = pulse.onset_delay(acq)
        else:
            delay = float(self.transmit_delay_offset)
        self.acquisition_ = replace(acq, transmit_delay_offset=delay)
        self.geometry_ = geo
        self.pipeline_ = self.pipeline if self.pipeline is not None else PipelineConfig()
        if self.channels is None:
            self.channels_ = None
        else:
            ch = np.asarray(self.channels, dtype=int)
            if len(np.unique(ch)) != len(ch) or len(ch) < 2:
                raise ValidationError("channel subset needs at least two distinct channels")
            if ch.min() < 0 or ch.max() >= acq.num_channels:
                raise ValidationError("channel subset outside the array")
            self.channels_ = ch
        self.report_ = PipelineReport()
        return self

    def _frames(self, X):
        if isinstance(X, RFFrame):
            X = [X]
        elif isinstance(X, np.ndarray) and X.ndim == 2:
            X = [X]
        frames = []
        for i, fr in enumerate(X):
            if not isinstance(fr, RFFrame):
                fr = RFFrame(np.asarray(fr, dtype=float), i)
            fr.check(self.acquisition_)
            frames.append(fr)
        return frames

    def localize(self, X) -> list:
        """Per-frame ``FrameResult`` objects including candidates and timings."""
        check_is_fitted(self, "acquisition_")
        results = localize_frames(self._frames(X), self.acquisition_, self.geometry_,
                                  self.pipeline_, self.channels_, self.n_jobs)
        for r in results:
            self.report_.add(r)
        return results

    def predict(self, X) -> list:
        return [np.array([m.position for m in r.locations]).reshape(-1, 2)
                for r in self.localize(X)]

    def score(self, X, y) -> float:
        """Jaccard index (percent) against ground-truth scenes ``y``."""
        from .evaluation import jaccard, match_and_score
        preds = self.localize(X)
        scores = [match_and_score(r.locations, truth, self.acquisition_.wavelength)
                  for r, truth in zip(preds, y)]
        return jaccard(scores)

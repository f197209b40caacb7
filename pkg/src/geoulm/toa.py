"""Cross-channel echo correspondence and phase-precise arrival times."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (DegenerateEllipseError, IllConditionedError,
                         InfiniteIntersectionsError, InvalidComponentError)
from .geometry import build_ellipse, ellipse_to_quadratic, intersect_ellipses
from .types import AcquisitionConfig, TransducerGeometry, round_trip_distance


@dataclass(frozen=True)
class ToAObservation:
    channel_index: int
    echo_index: int
    toa: float
    source_component: object = None


@dataclass(frozen=True)
class EchoTrack:
    observations: tuple
    reference_channel: int
    reference_echo: int = 0
    phase_flag: bool = False

    def __post_init__(self):
        obs = tuple(self.observations)
        chans = [o.channel_index for o in obs]
        if len(obs) < 2:
            raise ValueError("a track needs at least two observations")
        if len(set(chans)) != len(chans):
            raise ValueError("track observations must come from distinct channels")
        object.__setattr__(self, "observations", obs)

    def __len__(self):
        return len(self.observations)

    @property
    def channels(self) -> list:
        return [o.channel_index for o in self.observations]


@dataclass(frozen=True)
class MatchConfig:
    """Echo matching settings.

    The lag gate between two channels is their receiver distance over the
    speed of sound plus ``slack_periods`` carrier periods. With
    ``predictive`` the next echo is searched around a linear extrapolation
    of the last two matches instead of the last match alone.
    ``phase_source`` selects whose carrier phase refines each arrival time
    (see ``phase_refine_toa``).
    """

    slack_periods: float = 1.0
    predictive: bool = False
    phase_source: str = "reference"
    reproject_threshold: float | None = None   # meters, default half a wavelength


@dataclass(frozen=True)
class ReprojectionResult:
    accepted: bool
    residual: float
    reason: str = ""
    position: np.ndarray | None = None


def _index_sets(echo_sets):
    return {s.channel_index: s for s in echo_sets}


def _lag_gate(ch_a, ch_b, geometry, config, mcfg) -> float:
    """Maximum plausible |mu difference| in samples between two channels."""
    dist = 0.0
    if geometry is not None:
        dist = float(np.hypot(*(geometry.receiver_positions[ch_a] - geometry.receiver_positions[ch_b])))
    return (dist / config.speed_of_sound * config.sample_rate
            + mcfg.slack_periods * config.samples_per_period)


def _seed_order(channels, mus) -> list:
    """Seeds sorted by isolation from neighbouring echoes, then centre-first.

    Isolated echoes have the most reliable fits, so tracks grown from them
    are claimed before ambiguous overlapping echoes get a chance to seed.
    """
    mid = (len(channels) - 1) / 2
    seeds = []
    for i, ch in enumerate(channels):
        m = mus[ch]
        for k in range(len(m)):
            gaps = [abs(m[k] - m[j]) for j in (k - 1, k + 1) if 0 <= j < len(m)]
            seeds.append((-min(gaps, default=math.inf), abs(i - mid), i, k, ch))
    seeds.sort()
    return [(ch, k) for *_, k, ch in seeds]


def match_echoes(echo_sets, gap: int = 1, config: AcquisitionConfig = AcquisitionConfig(),
                 geometry: TransducerGeometry | None = None,
                 match_config: MatchConfig = MatchConfig(), exclude=()) -> list:
    """Chain echoes outwards from reference channels into tracks.

    Channels are taken in the order of ``echo_sets``. From a reference echo
    ``k`` on channel ``n`` the search steps to ``n +- g, n +- 2g, ...``; at each
    step the candidates are the echoes ``k' + h`` with ``h in {-1, 0, 1}``
    around the previously matched index ``k'``. The nearest candidate inside
    the lag gate is taken and a direction stops at the first step without
    one. Reference echoes are visited from the most isolated to the least
    (ties centre-first) and every echo ends up in at most one track.
    Echoes listed in ``exclude`` as ``(channel, echo_index)`` are skipped.
    """
    if gap < 1:
        raise ValueError("gap must be a positive integer")
    channels = [s.channel_index for s in echo_sets]
    by_ch = _index_sets(echo_sets)
    mus = {ch: by_ch[ch].mus for ch in channels}
    pos_of = {ch: i for i, ch in enumerate(channels)}
    assigned = set(exclude)
    tracks = []
    for ref, k in _seed_order(channels, mus):
        if (ref, k) in assigned:
            continue
        members = [(ref, k)]
        for direction in (-1, 1):
            hist = [(ref, k)]
            i = pos_of[ref] + direction * gap
            while 0 <= i < len(channels):
                ch = channels[i]
                pch, pk = hist[-1]
                prev_mu = mus[pch][pk]
                target = prev_mu
                if match_config.predictive and len(hist) >= 2:
                    qch, qk = hist[-2]
                    target = prev_mu + (prev_mu - mus[qch][qk])
                gate = _lag_gate(pch, ch, geometry, config, match_config)
                best, best_err = None, math.inf
                for h in (-1, 0, 1):
                    kk = pk + h
                    if not 0 <= kk < len(mus[ch]) or (ch, kk) in assigned:
                        continue
                    if abs(mus[ch][kk] - prev_mu) > gate:
                        continue
                    err = abs(mus[ch][kk] - target)
                    if err < best_err:
                        best, best_err = kk, err
                if best is None:
                    break
                hist.append((ch, best))
                i += direction * gap
            members.extend(hist[1:])
        if len(members) < 2:
            continue
        assigned.update(members)
        members.sort(key=lambda m: pos_of[m[0]])
        obs = tuple(
            ToAObservation(ch, kk, mus[ch][kk] / config.sample_rate - config.transmit_delay_offset,
                           by_ch[ch].components[kk])
            for ch, kk in members)
        tracks.append(EchoTrack(obs, ref, k))
    return tracks


def phase_refine_toa(track: EchoTrack, echo_sets, gap: int = 1,
                     config: AcquisitionConfig = AcquisitionConfig(),
                     phase_source: str = "reference") -> EchoTrack:
    """Replace each ToA by the matched echo position corrected by a carrier phase.

    With the model carrier ``cos(omega (t - mu) + phi)`` a phase ``phi``
    advances the carrier by ``phi / omega`` samples, so the phase-precise
    arrival is ``mu - phi / omega``. ``phase_source="reference"`` applies the
    reference echo's phase to every observation; ``"own"`` uses each
    matched echo's own phase, which cancels the mu/phi trade-off of noisy
    fits channel by channel. The configured transmit delay offset is
    subtracted afterwards. Corrections larger than one carrier period set
    ``phase_flag``.
    """
    if phase_source not in ("reference", "own"):
        raise ValueError("phase_source must be 'reference' or 'own'")
    by_ch = _index_sets(echo_sets)
    ref = by_ch[track.reference_channel].components[track.reference_echo]
    if not ref.omega > 0:
        raise InvalidComponentError("reference component needs a positive angular frequency")
    flag = track.phase_flag
    obs = []
    for o in track.observations:
        comp = by_ch[o.channel_index].components[o.echo_index]
        src = ref if phase_source == "reference" else comp
        if not src.omega > 0:
            raise InvalidComponentError("component needs a positive angular frequency")
        shift = src.phi / src.omega
        flag |= abs(shift) > 2 * math.pi / src.omega
        toa = (comp.mu - shift) / config.sample_rate - config.transmit_delay_offset
        obs.append(replace(o, toa=toa, source_component=comp))
    return replace(track, observations=tuple(obs), phase_flag=flag)


def _provisional_position(track: EchoTrack, geometry: TransducerGeometry,
                          config: AcquisitionConfig):
    """Triangulate from the two observations with the widest baseline."""
    obs = sorted(track.observations, key=lambda o: tuple(geometry.receiver_positions[o.channel_index]))
    o1, o2 = obs[0], obs[-1]
    e1 = build_ellipse(o1.toa, geometry.receiver_positions[o1.channel_index],
                       geometry.virtual_source, config)
    e2 = build_ellipse(o2.toa, geometry.receiver_positions[o2.channel_index],
                       geometry.virtual_source, config)
    pts = intersect_ellipses(ellipse_to_quadratic(e1), ellipse_to_quadratic(e2))
    pts = pts[pts[:, 1] > 0] if len(pts) else pts
    if len(pts) == 0:
        return None
    return pts[np.argmax(pts[:, 1])]


def reproject_validate(track: EchoTrack, geometry: TransducerGeometry,
                       config: AcquisitionConfig,
                       match_config: MatchConfig = MatchConfig()) -> ReprojectionResult:
    """Check that all observations agree with one scatterer position.

    Two-observation tracks are accepted with zero residual.
    """
    threshold = (config.wavelength / 2 if match_config.reproject_threshold is None
                 else match_config.reproject_threshold)
    if len(track) < 3:
        return ReprojectionResult(True, 0.0)
    try:
        p = _provisional_position(track, geometry, config)
    except (DegenerateEllipseError, IllConditionedError, InfiniteIntersectionsError) as err:
        return ReprojectionResult(False, math.inf, f"degenerate: {type(err).__name__}")
    if p is None:
        return ReprojectionResult(False, math.inf, "degenerate: no intersection")
    chans = track.channels
    pred = round_trip_distance(p, geometry.virtual_source, geometry.receiver_positions[chans])
    meas = np.array([o.toa for o in track.observations]) * config.speed_of_sound
    residual = float(np.max(np.abs(pred - meas)))
    if residual < threshold:
        return ReprojectionResult(True, residual, "", p)
    return ReprojectionResult(False, residual, "reprojection", p)

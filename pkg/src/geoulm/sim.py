"""Point-scatterer RF synthesis and the additive clutter/noise model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .exceptions import ValidationError
from .memgo import EchoComponent, memgo_sum
from .types import (AcquisitionConfig, GroundTruthScene, RFFrame, Region,
                    TransducerGeometry, round_trip_distance)


@dataclass(frozen=True)
class NoiseParams:
    """Noise levels in dB. ``clutter_db = -inf`` switches noise off."""

    clutter_db: float = -math.inf
    amplitude_db: float = -10.0
    power_db: float = 0.0
    bandwidth_factor: float = 1.0
    smoothing_sigma: float = 1.5
    rf_noise_factor: float = 4.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.smoothing_sigma > 0:
            raise ValidationError("smoothing_sigma must be positive")
        if not self.bandwidth_factor > 0:
            raise ValidationError("bandwidth_factor must be positive")

    @property
    def sigma_p(self) -> float:
        return math.sqrt(self.bandwidth_factor * 10 ** (self.power_db / 10))

    @property
    def enabled(self) -> bool:
        return self.clutter_db > -math.inf and self.rf_noise_factor != 0


@dataclass(frozen=True)
class PulseModel:
    """Transmit pulse as seen in a received echo.

    ``shape="memgo"`` produces echoes inside the fitting model class;
    ``"raised_cosine"`` is a Hann-windowed tone burst used to probe model
    mismatch.
    """

    center_frequency: float = 7.8125e6
    num_cycles: float = 3.0
    skew: float = 0.5
    phase: float = 0.0
    sigma_fraction: float = 0.2
    shape: str = "memgo"

    def __post_init__(self):
        if self.num_cycles < 1:
            raise ValidationError("num_cycles must be at least 1")
        if self.shape not in ("memgo", "raised_cosine"):
            raise ValidationError(f"unknown pulse shape {self.shape!r}")

    def envelope(self, config: AcquisitionConfig) -> EchoComponent:
        """MEMGO template for an echo arriving at sample 0."""
        spp = config.sample_rate / self.center_frequency
        length = self.num_cycles * spp
        return EchoComponent(1.0, 0.5 * length, self.sigma_fraction * length, self.skew,
                             2 * math.pi / spp, self.phase)

    def onset_delay(self, config: AcquisitionConfig) -> float:
        """Seconds from arrival to the phase-corrected template centre.

        This is the calibrated value of the transmit delay offset used to turn
        fitted echo positions back into arrival times.
        """
        tpl = self.envelope(config)
        return (tpl.mu - tpl.phi / tpl.omega) / config.sample_rate

    def render(self, arrival_samples, amplitudes, t, config: AcquisitionConfig) -> np.ndarray:
        arrival_samples = np.atleast_1d(np.asarray(arrival_samples, dtype=float))
        amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        tpl = self.envelope(config)
        if self.shape == "memgo":
            p = np.tile(tpl.as_array(), (len(arrival_samples), 1))
            p[:, 0] = amplitudes
            p[:, 1] = arrival_samples + tpl.mu
            return memgo_sum(p, t)
        length = 2 * tpl.mu
        out = np.zeros_like(t, dtype=float)
        for t0, a in zip(arrival_samples, amplitudes):
            local = t - t0
            inside = (local >= 0) & (local <= length)
            win = 0.5 - 0.5 * np.cos(2 * np.pi * local[inside] / length)
            out[inside] += a * win * np.cos(tpl.omega * (local[inside] - tpl.mu) + tpl.phi)
        return out


def simulate_frame(scene: GroundTruthScene, geometry: TransducerGeometry,
                   pulse: PulseModel, config: AcquisitionConfig,
                   spreading: bool = False) -> RFFrame:
    """Superpose one delayed pulse per scatterer and channel.

    With ``spreading`` each echo is scaled by the inverse of its total path
    length in millimetres.
    """
    n = geometry.num_channels
    t = np.arange(config.num_samples, dtype=float)
    frame = np.zeros((n, config.num_samples))
    pos = scene.scatterer_positions
    if len(pos) == 0:
        return RFFrame(frame, scene.frame_id)
    if np.any(pos[:, 1] <= 0):
        raise ValidationError("scatterers must lie in front of the array (z > 0)")
    tail = 2 * pulse.envelope(config).mu + 8 * pulse.envelope(config).sigma
    dist = np.array([round_trip_distance(p, geometry.virtual_source, geometry.receiver_positions)
                     for p in pos])                                  # (S, N)
    arrivals = dist / config.speed_of_sound * config.sample_rate
    if np.any(arrivals + tail >= config.num_samples):
        raise ValidationError("scatterer echo falls outside the recording window")
    amps = np.repeat(scene.amplitudes[:, None], n, axis=1)
    if spreading:
        amps = amps / (dist * 1e3)
    for ch in range(n):
        frame[ch] = pulse.render(arrivals[:, ch], amps[:, ch], t, config)
    return RFFrame(frame, scene.frame_id)


def channel_rng(seed: int, frame_id: int, channel: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame_id), int(channel)]))


def add_noise(frame: RFFrame, params: NoiseParams) -> RFFrame:
    """Add smoothed Gaussian noise plus a random-sign clutter floor per channel."""
    if not params.enabled:
        return frame
    y = frame.samples
    out = y.astype(float, copy=True)
    gain = 10 ** ((params.amplitude_db + params.clutter_db) / 20)
    floor = 10 ** (params.clutter_db / 20)
    for ch in range(y.shape[0]):
        rng = channel_rng(params.rng_seed, frame.frame_id, ch)
        peak = np.max(np.abs(y[ch]))
        noise = rng.normal(0.0, params.sigma_p, y.shape[1]) * peak * gain
        noise += rng.choice((-1.0, 1.0)) * peak * floor
        out[ch] += params.rf_noise_factor * gaussian_filter1d(noise, params.smoothing_sigma)
    return RFFrame(out, frame.frame_id)


def generate_scene(num_bubbles: int, field: Region, rng_seed: int,
                   amplitude_range=(0.5, 2.0), frame_id: int = 0) -> GroundTruthScene:
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), int(frame_id)]))
    x = rng.uniform(field.x_min, field.x_max, num_bubbles)
    z = rng.uniform(field.z_min, field.z_max, num_bubbles)
    lo, hi = amplitude_range
    amp = np.exp(rng.uniform(math.log(lo), math.log(hi), num_bubbles))
    return GroundTruthScene(np.column_stack([x, z]), amp, frame_id)

"""Shared value types and the scene coordinate convention.

Coordinates are 2-D ``(x, z)`` in meters: ``x`` runs laterally along the
array, ``z`` is depth (positive away from the array) and the array lies on
``z = 0``. Times are seconds unless a name says otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class AcquisitionConfig:
    speed_of_sound: float = 1540.0
    sample_rate: float = 62.5e6
    center_frequency: float = 7.8125e6
    num_channels: int = 128
    num_samples: int = 1280
    transmit_delay_offset: float = 0.0

    def __post_init__(self):
        for name in ("speed_of_sound", "sample_rate", "center_frequency"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be positive, got {value!r}")
        if self.num_channels < 2:
            raise ValidationError("at least two channels are needed for an intersection")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be positive")
        if not np.isfinite(self.transmit_delay_offset):
            raise ValidationError("transmit_delay_offset must be finite")

    @property
    def wavelength(self) -> float:
        return self.speed_of_sound / self.center_frequency

    @property
    def samples_per_period(self) -> float:
        return self.sample_rate / self.center_frequency

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class TransducerGeometry:
    """Receiver element positions and the virtual transmit origin."""

    receiver_positions: np.ndarray
    virtual_source: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        rx = np.array(self.receiver_positions, dtype=float).reshape(-1, 2)
        src = np.array(self.virtual_source, dtype=float).reshape(2)
        if not (np.all(np.isfinite(rx)) and np.all(np.isfinite(src))):
            raise ValidationError("transducer positions must be finite")
        if len(rx) >= 2:
            diff = rx[:, None, :] - rx[None, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            np.fill_diagonal(dist, np.inf)
            if dist.min() == 0:
                raise ValidationError("receiver positions must be pairwise distinct")
        rx.setflags(write=False)
        src.setflags(write=False)
        object.__setattr__(self, "receiver_positions", rx)
        object.__setattr__(self, "virtual_source", src)

    @property
    def num_channels(self) -> int:
        return len(self.receiver_positions)

    def subset(self, channels) -> "TransducerGeometry":
        return TransducerGeometry(self.receiver_positions[np.asarray(channels, dtype=int)],
                                  self.virtual_source)

    def check(self, config: AcquisitionConfig) -> None:
        if self.num_channels != config.num_channels:
            raise ValidationError(
                f"geometry has {self.num_channels} receivers, config expects {config.num_channels}")


def linear_array(num_elements: int = 128, pitch: float = 1e-4,
                 virtual_source=None) -> TransducerGeometry:
    """Uniform linear array centred on ``x = 0``.

    The virtual source defaults to the array centre, i.e. a point model of an
    unsteered plane-wave transmit.
    """
    x = (np.arange(num_elements) - (num_elements - 1) / 2.0) * pitch
    rx = np.column_stack([x, np.zeros(num_elements)])
    src = np.zeros(2) if virtual_source is None else np.asarray(virtual_source, dtype=float)
    return TransducerGeometry(rx, src)


def spread_channels(num_available: int, num_selected: int) -> np.ndarray:
    """Indices of ``num_selected`` channels spread evenly over the aperture."""
    if not 2 <= num_selected <= num_available:
        raise ValidationError(
            f"cannot select {num_selected} of {num_available} channels")
    return np.unique(np.round(np.linspace(0, num_available - 1, num_selected)).astype(int))


@dataclass(frozen=True)
class RFFrame:
    samples: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        data = np.asarray(self.samples)
        if data.ndim != 2:
            raise ValidationError("RF samples must be a channels x samples array")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(float)
        if not np.all(np.isfinite(data)):
            raise ValidationError("RF samples must be finite")
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "frame_id", int(self.frame_id))

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def check(self, config: AcquisitionConfig) -> None:
        if self.samples.shape != (config.num_channels, config.num_samples):
            raise ValidationError(
                f"frame {self.frame_id} has shape {self.samples.shape}, expected "
                f"({config.num_channels}, {config.num_samples})")


@dataclass(frozen=True)
class GroundTruthScene:
    scatterer_positions: np.ndarray
    amplitudes: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pos = np.array(self.scatterer_positions, dtype=float).reshape(-1, 2)
        amp = np.array(self.amplitudes, dtype=float).reshape(-1)
        if len(pos) != len(amp):
            raise ValidationError("positions and amplitudes must have equal length")
        if np.any(amp <= 0):
            raise ValidationError("scatterer amplitudes must be positive")
        object.__setattr__(self, "scatterer_positions", pos)
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "frame_id", int(self.frame_id))

    def __len__(self):
        return len(self.amplitudes)

    def __or__(self, other: "GroundTruthScene") -> "GroundTruthScene":
        return GroundTruthScene(np.vstack([self.scatterer_positions, other.scatterer_positions]),
                                np.concatenate([self.amplitudes, other.amplitudes]),
                                self.frame_id)


def toa_to_distance(toa: float, config: AcquisitionConfig) -> float:
    """Round-trip path length travelled in ``toa`` seconds."""
    if toa < 0:
        raise ValidationError(f"time of arrival must be non-negative, got {toa!r}")
    return toa * config.speed_of_sound


def distance_to_toa(distance: float, config: AcquisitionConfig) -> float:
    if distance < 0:
        raise ValidationError(f"distance must be non-negative, got {distance!r}")
    return distance / config.speed_of_sound


def round_trip_distance(point, source, receivers) -> np.ndarray:
    """Path source -> point -> each receiver, meters."""
    point = np.asarray(point, dtype=float)
    receivers = np.asarray(receivers, dtype=float).reshape(-1, 2)
    return np.hypot(*(point - source)) + np.hypot(*(receivers - point).T)


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle ``[x_min, x_max] x [z_min, z_max]`` in meters."""

    x_min: float
    x_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.z_max > self.z_min):
            raise ValidationError(f"region has no area: {self}")

    @classmethod
    def centered(cls, width: float, height: float, depth: float, x: float = 0.0) -> "Region":
        return cls(x - width / 2, x + width / 2, depth - height / 2, depth + height / 2)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.z_max - self.z_min)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return ((p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
                & (p[:, 1] >= self.z_min) & (p[:, 1] <= self.z_max))

"""On-disk formats: RF container, YAML run configs, scenes, locations and scores."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cluster import MBLocation
from .evaluation import FrameScore
from .exceptions import CorruptStreamError, FormatError, ValidationError
from .pipeline import PipelineConfig
from .sim import NoiseParams, PulseModel
from .types import (AcquisitionConfig, GroundTruthScene, RFFrame, Region,
                    TransducerGeometry, linear_array, spread_channels)

MAGIC = b"GULM"
VERSION = 1
DTYPE_F32LE = 1
_HEADER = struct.Struct("<4sBIIdB")
_FRAME_ID = struct.Struct("<q")


# -- RF container ---------------------------------------------------------

@dataclass(frozen=True)
class RFHeader:
    num_channels: int
    num_samples: int
    sample_rate: float
    version: int = VERSION


def write_rf(path, frames, sample_rate: float) -> RFHeader:
    """Write frames as little-endian float32 records behind a ``GULM`` header.

    All frames must share one shape. Values are cast to float32, so
    float32 input round-trips bit for bit.
    """
    frames = list(frames)
    if not frames:
        raise ValidationError("no frames to write")
    n, t = frames[0].samples.shape
    if not sample_rate > 0:
        raise ValidationError("sample_rate must be positive")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, t, float(sample_rate), DTYPE_F32LE))
        for fr in frames:
            if fr.samples.shape != (n, t):
                raise ValidationError(
                    f"frame {fr.frame_id} has shape {fr.samples.shape}, expected {(n, t)}")
            fh.write(_FRAME_ID.pack(fr.frame_id))
            fh.write(np.ascontiguousarray(fr.samples, dtype="<f4").tobytes())
    return RFHeader(n, t, float(sample_rate))


def read_rf_header(fh) -> RFHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        if raw[:4] and raw[:4] != MAGIC[:len(raw[:4])]:
            raise FormatError("not a GULM container")
        raise CorruptStreamError("file ends inside the header")
    magic, version, n, t, rate, dtype = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if dtype != DTYPE_F32LE:
        raise FormatError(f"unsupported sample type code {dtype}")
    if n == 0 or t == 0:
        raise ValidationError(f"header describes an empty frame ({n} x {t})")
    if not (math.isfinite(rate) and rate > 0):
        raise ValidationError(f"header sample rate {rate!r} is not positive")
    return RFHeader(n, t, rate, version)


def iter_rf(path):
    """Yield ``(header, frame)`` pairs lazily."""
    with open(path, "rb") as fh:
        head = read_rf_header(fh)
        size = head.num_channels * head.num_samples * 4
        while True:
            raw = fh.read(_FRAME_ID.size)
            if not raw:
                return
            if len(raw) < _FRAME_ID.size:
                raise CorruptStreamError("file ends inside a frame id")
            (frame_id,) = _FRAME_ID.unpack(raw)
            data = fh.read(size)
            if len(data) < size:
                raise CorruptStreamError(f"frame {frame_id} is truncated")
            samples = np.frombuffer(data, dtype="<f4").reshape(head.num_channels, head.num_samples)
            yield head, RFFrame(samples.astype(np.float32), frame_id)


def read_rf(path):
    """All frames of a container as ``(header, [RFFrame, ...])``."""
    frames, head = [], None
    for head, fr in iter_rf(path):
        frames.append(fr)
    if head is None:
        with open(path, "rb") as fh:
            head = read_rf_header(fh)
    return head, frames


# -- run configuration ------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Bubble field for simulation: a ``width x height`` box centred at ``(x, depth)``."""

    width: float = 5e-3
    height: float = 5e-3
    depth: float = 10e-3
    x: float = 0.0
    bubbles: int = 5
    amplitude_range: tuple = (0.5, 2.0)
    frames: int = 1

    @property
    def region(self) -> Region:
        return Region.centered(self.width, self.height, self.depth, self.x)


@dataclass(frozen=True)
class RenderConfig:
    pixel_size: float | None = None       # default a tenth of a wavelength
    gamma: float = 0.9


@dataclass(frozen=True)
class RunConfig:
    acquisition: AcquisitionConfig = AcquisitionConfig()
    geometry: TransducerGeometry = field(default_factory=linear_array)
    noise: NoiseParams = NoiseParams()
    pulse: PulseModel = PulseModel()
    scene: SceneConfig = SceneConfig()
    pipeline: PipelineConfig = PipelineConfig()
    render: RenderConfig = RenderConfig()
    channels: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        self.geometry.check(self.acquisition)
        if self.channels is not None:
            object.__setattr__(self, "channels", check_channels(self.channels, self.acquisition.num_channels))

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(_plain(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def check_channels(channels, available: int) -> tuple:
    ch = [int(c) for c in channels]
    if len(ch) < 2:
        raise ValidationError("a channel subset needs at least two channels")
    if len(set(ch)) != len(ch):
        raise ValidationError("channel subset contains duplicates")
    bad = [c for c in ch if not 0 <= c < available]
    if bad:
        raise ValidationError(f"channels {bad} outside 0..{available - 1}")
    return tuple(ch)


def parse_channels(spec, available: int) -> tuple:
    """Channel subset from a list, ``"0-15,32"`` ranges or ``"spread:16"``."""
    if isinstance(spec, dict):
        if set(spec) != {"spread"}:
            raise ValidationError(f"unknown channel selector keys {sorted(set(spec) - {'spread'})}")
        return tuple(int(c) for c in spread_channels(available, int(spec["spread"])))
    if isinstance(spec, str):
        spec = spec.strip()
        if spec.startswith("spread:"):
            return tuple(int(c) for c in spread_channels(available, int(spec[7:])))
        out = []
        for part in spec.split(","):
            lo, sep, hi = part.partition("-")
            try:
                out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
            except ValueError:
                raise ValidationError(f"bad channel list {spec!r}") from None
        spec = out
    return check_channels(spec, available)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _update(default, values, where: str):
    """Copy of dataclass ``default`` with ``values`` applied; unknown keys are errors."""
    if not isinstance(values, dict):
        raise ValidationError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    changes = {}
    for key, val in values.items():
        cur = getattr(default, key)
        if dataclasses.is_dataclass(cur) and isinstance(val, dict):
            val = _update(cur, val, f"{where}.{key}")
        elif isinstance(cur, tuple) and isinstance(val, list):
            val = tuple(val)
        elif isinstance(cur, float) and isinstance(val, (int, str)) and not isinstance(val, bool):
            try:
                val = float(val)
            except ValueError:
                raise ValidationError(f"{where}.{key}: expected a number, got {val!r}") from None
        changes[key] = val
    try:
        return dataclasses.replace(default, **changes)
    except TypeError as err:
        raise ValidationError(f"{where}: {err}") from None


_TOP_KEYS = {"acquisition", "geometry", "noise", "pulse", "scene", "pipeline", "render",
             "channels", "seed"}


def config_from_dict(data: dict | None) -> RunConfig:
    """Validated ``RunConfig`` from a nested mapping; missing keys keep defaults.

    ``acquisition.transmit_delay_offset`` may be ``"auto"`` (the default),
    meaning the onset delay of the configured pulse. ``geometry`` takes
    ``pitch`` and ``virtual_source`` for a centred linear array, or an
    explicit ``receiver_positions`` list.
    """
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ValidationError("config root must be a mapping")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys {unknown}")

    acq_raw = dict(data.get("acquisition") or {})
    delay = acq_raw.pop("transmit_delay_offset", "auto")
    acq = _update(AcquisitionConfig(), acq_raw, "acquisition")
    pulse = _update(PulseModel(acq.center_frequency), data.get("pulse") or {}, "pulse")
    if delay == "auto":
        delay = pulse.onset_delay(acq)
    elif isinstance(delay, str) or isinstance(delay, bool):
        raise ValidationError("acquisition.transmit_delay_offset must be a number or 'auto'")
    acq = dataclasses.replace(acq, transmit_delay_offset=float(delay))

    geo_raw = dict(data.get("geometry") or {})
    unknown = sorted(set(geo_raw) - {"pitch", "virtual_source", "receiver_positions"})
    if unknown:
        raise ValidationError(f"geometry: unknown keys {unknown}")
    if "receiver_positions" in geo_raw:
        if "pitch" in geo_raw:
            raise ValidationError("geometry: give either pitch or receiver_positions")
        geo = TransducerGeometry(np.asarray(geo_raw["receiver_positions"], dtype=float),
                                 np.asarray(geo_raw.get("virtual_source", (0.0, 0.0)), dtype=float))
    else:
        geo = linear_array(acq.num_channels, float(geo_raw.get("pitch", 1e-4)),
                           geo_raw.get("virtual_source"))

    noise = _update(NoiseParams(), data.get("noise") or {}, "noise")
    scene = _update(SceneConfig(), data.get("scene") or {}, "scene")
    if scene.bubbles < 0 or scene.frames < 0:
        raise ValidationError("scene.bubbles and scene.frames must be non-negative")
    scene.region
    pipe = _update(PipelineConfig(), data.get("pipeline") or {}, "pipeline")
    render = _update(RenderConfig(), data.get("render") or {}, "render")
    channels = data.get("channels")
    if channels is not None:
        channels = parse_channels(channels, acq.num_channels)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ValidationError("seed must be a non-negative integer")
    noise = dataclasses.replace(noise, rng_seed=seed)
    return RunConfig(acq, geo, noise, pulse, scene, pipe, render, channels, seed)


def read_config(path) -> RunConfig:
    """Load a YAML run configuration (an empty file gives all defaults)."""
    text = Path(path).read_text()
    try:
        loader = yaml.SafeLoader(text)
        try:
            data = _load_unique(loader)
        finally:
            loader.dispose()
    except yaml.YAMLError as err:
        raise ValidationError(f"{path}: {err}") from None
    return config_from_dict(data)


def _load_unique(loader):
    """Like ``safe_load`` but duplicate mapping keys are errors."""
    node = loader.get_single_node()
    if node is None:
        return None

    def walk(n):
        if isinstance(n, yaml.MappingNode):
            keys = [k.value for k, _ in n.value]
            dup = {k for k in keys if keys.count(k) > 1}
            if dup:
                raise ValidationError(f"duplicate config keys {sorted(dup)}")
            for _, v in n.value:
                walk(v)
        elif isinstance(n, yaml.SequenceNode):
            for v in n.value:
                walk(v)

    walk(node)
    return loader.construct_document(node)


# -- scenes -----------------------------------------------------------------

def write_scenes(scenes, path) -> None:
    """One JSON object per line; floats keep their exact repr."""
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(json.dumps({"frame_id": sc.frame_id,
                                 "positions": sc.scatterer_positions.tolist(),
                                 "amplitudes": sc.amplitudes.tolist()}) + "\n")


def read_scenes(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if set(rec) != {"frame_id", "positions", "amplitudes"}:
                    raise ValueError(f"keys {sorted(rec)}")
                out.append(GroundTruthScene(np.asarray(rec["positions"], dtype=float).reshape(-1, 2),
                                            np.asarray(rec["amplitudes"], dtype=float),
                                            rec["frame_id"]))
            except (ValueError, TypeError) as err:
                raise ValidationError(f"{path}:{lineno}: bad scene record ({err})") from None
    return out


# -- locations and scores ---------------------------------------------------

LOCATION_COLUMNS = ("frame_id", "x_m", "z_m", "support", "spread_m")
SCORE_COLUMNS = ("frame_id", "true_positives", "false_positives", "false_negatives", "rmse_m")


def _g(x: float) -> str:
    return f"{x:.9g}"


def _location_key(m: MBLocation):
    return (m.frame_id, float(m.position[0]), float(m.position[1]))


def write_locations(locations, path) -> None:
    """CSV sorted by frame, x, z with 9 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOCATION_COLUMNS)
        for m in sorted(locations, key=_location_key):
            w.writerow([m.frame_id, _g(m.position[0]), _g(m.position[1]), m.support, _g(m.spread)])


def _rows(path, columns):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != columns:
            raise ValidationError(f"{path}: expected header {','.join(columns)}")
        for lineno, row in enumerate(r, 2):
            if len(row) != len(columns):
                raise ValidationError(f"{path}:{lineno}: expected {len(columns)} fields")
            yield lineno, row


def read_locations(path) -> list:
    out = []
    for lineno, row in _rows(path, LOCATION_COLUMNS):
        try:
            fid, x, z, sup, spr = int(row[0]), float(row[1]), float(row[2]), int(row[3]), float(row[4])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: malformed location row") from None
        if not all(map(math.isfinite, (x, z, spr))):
            raise ValidationError(f"{path}:{lineno}: non-finite value")
        out.append(MBLocation(np.array([x, z]), sup, spr, fid))
    return out


def write_scores(scores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for s in sorted(scores, key=lambda s: s.frame_id):
            w.writerow([s.frame_id, s.true_positives, s.false_positives, s.false_negatives, _g(s.rmse)])


def read_scores(path) -> list:
    out = []
    for lineno, row in _rows(path, SCORE_COLUMNS):
        try:
            out.append(FrameScore(int(row[1]), int(row[2]), int(row[3]), float(row[4]), int(row[0])))
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: malformed score row") from None
    return out


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- images -----------------------------------------------------------------

def write_image(image, path) -> None:
    """Save the display-scaled density as 8-bit PGM, or PNG when Pillow is present."""
    pixels = np.round(image.display() * 255).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise ValidationError("PNG output needs Pillow; use a .pgm path instead") from None
        Image.fromarray(pixels, mode="L").save(path)
        return
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", data)
    if head is None:
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(head[1]), int(head[2])
    pix = np.frombuffer(data[head.end():], dtype=np.uint8)
    if pix.size != w * h:
        raise CorruptStreamError(f"{path}: pixel data has {pix.size} bytes, expected {w * h}")
    return pix.reshape(h, w)

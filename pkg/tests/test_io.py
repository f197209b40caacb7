import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from geoulm import io
from geoulm.cluster import MBLocation
from geoulm.evaluation import DensityImage, FrameScore
from geoulm.exceptions import CorruptStreamError, FormatError, ValidationError
from geoulm.types import GroundTruthScene, RFFrame


def frames(n=3, shape=(4, 32), seed=0):
    rng = np.random.default_rng(seed)
    return [RFFrame(rng.normal(size=shape).astype(np.float32), i * 7) for i in range(n)]


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 40)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)), st.integers(-2 ** 62, 2 ** 62))
def test_rf_round_trip_bit_identical(tmp_path_factory, samples, frame_id):
    path = tmp_path_factory.mktemp("rf") / "a.gulm"
    head = io.write_rf(path, [RFFrame(samples, frame_id)], 62.5e6)
    got_head, got = io.read_rf(path)
    assert got_head == head and got[0].frame_id == frame_id
    assert got[0].samples.tobytes() == samples.tobytes()


def test_rf_header_layout(tmp_path):
    path = tmp_path / "a.gulm"
    io.write_rf(path, frames(2), 62.5e6)
    raw = path.read_bytes()
    assert raw[:4] == b"GULM"
    assert struct.unpack("<4sBIIdB", raw[:22])[1:] == (1, 4, 32, 62.5e6, 1)
    assert len(raw) == 22 + 2 * (8 + 4 * 32 * 4)


def test_rf_errors(tmp_path):
    good = tmp_path / "a.gulm"
    io.write_rf(good, frames(2), 62.5e6)
    raw = good.read_bytes()
    bad = tmp_path / "b.gulm"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        io.read_rf(bad)
    bad.write_bytes(raw[:4] + b"\x02" + raw[5:])
    with pytest.raises(FormatError):
        io.read_rf(bad)
    bad.write_bytes(struct.pack("<4sBIIdB", b"GULM", 1, 0, 32, 62.5e6, 1))
    with pytest.raises(ValidationError):
        io.read_rf(bad)
    bad.write_bytes(struct.pack("<4sBIIdB", b"GULM", 1, 4, 32, -1.0, 1))
    with pytest.raises(ValidationError):
        io.read_rf(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(CorruptStreamError):
        io.read_rf(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(CorruptStreamError):
        io.read_rf(bad)
    with pytest.raises(ValidationError):
        io.write_rf(bad, [], 1.0)
    with pytest.raises(ValidationError):
        io.write_rf(bad, [frames(1)[0], frames(1, (3, 32))[0]], 1.0)


def test_iter_rf_is_lazy(tmp_path):
    path = tmp_path / "a.gulm"
    io.write_rf(path, frames(3), 62.5e6)
    it = io.iter_rf(path)
    head, fr = next(it)
    assert head.num_channels == 4 and fr.frame_id == 0


def test_config_defaults(acq, pulse):
    cfg = io.config_from_dict({})
    assert cfg.acquisition.num_channels == 128 and cfg.channels is None and cfg.seed == 0
    assert cfg.acquisition.transmit_delay_offset == pytest.approx(pulse.onset_delay(acq))
    assert cfg.geometry.num_channels == 128 and math.isinf(cfg.noise.clutter_db)
    assert cfg.digest() == io.config_from_dict(None).digest()


def test_config_values(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("seed: 4\nchannels: 0-15\nnoise:\n  clutter_db: -20\n"
                 "pipeline:\n  fit:\n    max_iter: 80\nacquisition:\n  transmit_delay_offset: 0\n")
    cfg = io.read_config(p)
    assert cfg.channels == tuple(range(16)) and cfg.noise.rng_seed == 4
    assert cfg.noise.clutter_db == -20.0 and cfg.pipeline.fit.max_iter == 80
    assert cfg.acquisition.transmit_delay_offset == 0.0
    assert cfg.digest() != io.config_from_dict({}).digest()
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert io.read_config(empty).digest() == io.config_from_dict({}).digest()


@pytest.mark.parametrize("data", [
    {"channels": [1, 1, 2]},
    {"channels": [0]},
    {"channels": [0, 200]},
    {"channels": "0-x"},
    {"bogus": 1},
    {"noise": {"clutter": -20}},
    {"pipeline": {"fit": {"nope": 1}}},
    {"geometry": {"pitch": 1e-4, "receiver_positions": [[0, 0], [1e-4, 0]]}},
    {"seed": -1},
    {"acquisition": {"transmit_delay_offset": "later"}},
    {"scene": {"bubbles": -3}},
    [1, 2],
])
def test_config_rejects(data):
    with pytest.raises(ValidationError):
        io.config_from_dict(data)


def test_duplicate_yaml_key(tmp_path):
    p = tmp_path / "dup.yaml"
    p.write_text("seed: 1\nseed: 2\n")
    with pytest.raises(ValidationError):
        io.read_config(p)
    p.write_text("noise: [unclosed\n")
    with pytest.raises(ValidationError):
        io.read_config(p)


def test_parse_channels():
    assert io.parse_channels("0-3,10", 128) == (0, 1, 2, 3, 10)
    assert io.parse_channels("spread:3", 128) == (0, 64, 127)
    assert io.parse_channels({"spread": 2}, 128) == (0, 127)
    assert io.parse_channels([5, 2], 128) == (5, 2)


def test_locations_round_trip(tmp_path):
    p = tmp_path / "loc.csv"
    io.write_locations([], p)
    assert p.read_text() == "frame_id,x_m,z_m,support,spread_m\n"
    assert io.read_locations(p) == []
    locs = [MBLocation(np.array([1e-3, 0.01]), 4, 2e-6, 1),
            MBLocation(np.array([-1e-3, 0.011]), 3, 1e-6, 1),
            MBLocation(np.array([0.0, 0.009]), 5, 0.0, 0)]
    io.write_locations(locs, p)
    got = io.read_locations(p)
    assert [m.frame_id for m in got] == [0, 1, 1]
    assert [m.position[0] for m in got] == [0.0, -1e-3, 1e-3]
    assert got[2].support == 4 and got[2].spread == pytest.approx(2e-6)
    p.write_text("frame_id,x_m,z_m,support,spread_m\n0,1,2\n")
    with pytest.raises(ValidationError):
        io.read_locations(p)
    p.write_text("a,b\n")
    with pytest.raises(ValidationError):
        io.read_locations(p)
    p.write_text("frame_id,x_m,z_m,support,spread_m\n0,nan,2,1,0\n")
    with pytest.raises(ValidationError):
        io.read_locations(p)


def test_scores_round_trip(tmp_path):
    p = tmp_path / "s.csv"
    scores = [FrameScore(3, 1, 0, 1.5e-5, 2), FrameScore(0, 0, 2, math.nan, 1)]
    io.write_scores(scores, p)
    got = io.read_scores(p)
    assert [s.frame_id for s in got] == [1, 2]
    assert math.isnan(got[0].rmse) and got[1].rmse == pytest.approx(1.5e-5)


def test_scenes_round_trip(tmp_path):
    p = tmp_path / "s.jsonl"
    sc = [GroundTruthScene([[1e-3, 0.01], [0.1 / 3, 0.02]], [1.0, 0.7], 3),
          GroundTruthScene(np.zeros((0, 2)), [], 4)]
    io.write_scenes(sc, p)
    got = io.read_scenes(p)
    assert [s.frame_id for s in got] == [3, 4] and len(got[1]) == 0
    assert np.array_equal(got[0].scatterer_positions, sc[0].scatterer_positions)
    p.write_text('{"frame_id": 0}\n')
    with pytest.raises(ValidationError):
        io.read_scenes(p)


def test_pgm_round_trip(tmp_path):
    grid = np.zeros((5, 7))
    grid[2, 3], grid[4, 0] = 4.0, 1.0
    p = tmp_path / "img.pgm"
    io.write_image(DensityImage(grid, 1.0, (0, 0)), p)
    pix = io.read_pgm(p)
    assert pix.shape == (5, 7) and pix[2, 3] == 255 and pix[4, 0] == 64 and pix.sum() == 255 + 64
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        io.read_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(CorruptStreamError):
        io.read_pgm(p)

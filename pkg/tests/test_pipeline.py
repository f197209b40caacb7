import time

import numpy as np
import pytest

from geoulm.evaluation import match_and_score
from geoulm.exceptions import ValidationError
from geoulm.pipeline import GeometricULM, PipelineConfig, localize_frame, localize_frames
from geoulm.sim import NoiseParams, add_noise, generate_scene, simulate_frame
from geoulm.types import GroundTruthScene, RFFrame, spread_channels

CH = spread_channels(128, 16)


def test_noiseless_single_bubble(acq, geo, pulse, calibrated):
    s = np.array([0.37e-3, 10.2e-3])
    fr = simulate_frame(GroundTruthScene([s], [1.0]), geo, pulse, acq)
    res = localize_frame(fr, calibrated, geo, PipelineConfig(), CH)
    assert len(res.locations) == 1
    assert np.hypot(*(res.locations[0].position - s)) < acq.wavelength / 100
    assert set(res.timings) == {"fit", "match", "refine", "validate", "intersect", "cluster"}


def test_zero_frame_gives_nothing(acq, geo, calibrated):
    res = localize_frame(RFFrame(np.zeros((128, acq.num_samples))), calibrated, geo, channels=CH)
    assert res.locations == [] and res.counts["echoes"] == 0


def test_channel_mismatch(acq, geo, calibrated):
    with pytest.raises(ValidationError):
        localize_frame(RFFrame(np.zeros((4, acq.num_samples))), calibrated, geo)


def test_estimator_api(acq, geo, pulse, field):
    scenes = [generate_scene(3, field, 4, frame_id=f) for f in range(3)]
    frames = [simulate_frame(s, geo, pulse, acq) for s in scenes]
    est = GeometricULM(acq, geo, pulse, channels=CH).fit()
    assert est.acquisition_.transmit_delay_offset == pytest.approx(pulse.onset_delay(acq))
    preds = est.predict(frames)
    assert len(preds) == 3 and all(p.shape[1] == 2 for p in preds)
    assert est.score(frames, scenes) >= 90.0
    assert est.report_.counts["frames"] == 6
    assert est.predict(frames[0].samples)[0].shape[1] == 2
    assert est.get_params()["channels"] is CH


def test_estimator_validation(acq):
    with pytest.raises(ValidationError):
        GeometricULM(acq, channels=[3, 3]).fit()
    with pytest.raises(ValidationError):
        GeometricULM(acq, channels=[0, 500]).fit()
    with pytest.raises(ValidationError):
        GeometricULM(acq, transmit_delay_offset="manual").fit()
    assert GeometricULM(acq, transmit_delay_offset=0.0).fit().acquisition_.transmit_delay_offset == 0.0


def test_thread_count_does_not_change_results(acq, geo, pulse, field, calibrated):
    frames = []
    for f in range(4):
        fr = simulate_frame(generate_scene(5, field, 9, frame_id=f), geo, pulse, acq)
        frames.append(add_noise(fr, NoiseParams(clutter_db=-20, rng_seed=9)))
    one = localize_frames(frames, calibrated, geo, channels=CH, threads=1)
    three = localize_frames(frames, calibrated, geo, channels=CH, threads=3)
    for a, b in zip(one, three):
        assert a.frame_id == b.frame_id
        assert [m.position.tobytes() for m in a.locations] == [m.position.tobytes() for m in b.locations]


def test_noisy_frames_still_localize(acq, geo, pulse, field, calibrated):
    scores = []
    for f in range(3):
        sc = generate_scene(5, field, 2, frame_id=f)
        fr = add_noise(simulate_frame(sc, geo, pulse, acq), NoiseParams(clutter_db=-30, rng_seed=2))
        scores.append(match_and_score(localize_frame(fr, calibrated, geo, channels=CH).locations,
                                      sc, acq.wavelength))
    assert sum(s.true_positives for s in scores) >= 12


def test_defaults():
    pc = PipelineConfig()
    assert pc.match.phase_source == "own" and pc.cluster.min_cluster_size == 3
    assert pc.resolve_cycles and pc.refine_positions


def test_subset_cost_not_above_full_array(acq, geo, pulse, field, calibrated):
    fr = simulate_frame(generate_scene(5, field, 1), geo, pulse, acq)
    t0 = time.perf_counter()
    localize_frame(fr, calibrated, geo, channels=CH)
    t1 = time.perf_counter()
    localize_frame(fr, calibrated, geo)
    t2 = time.perf_counter()
    assert t1 - t0 <= 2 * (t2 - t1)

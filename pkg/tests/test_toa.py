import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoulm.exceptions import InvalidComponentError
from geoulm.memgo import ChannelEchoSet, EchoComponent, FitConfig, extract_echoes, memgo_eval
from geoulm.sim import simulate_frame
from geoulm.toa import (EchoTrack, MatchConfig, ToAObservation, match_echoes, phase_refine_toa,
                        reproject_validate)
from geoulm.types import AcquisitionConfig, GroundTruthScene, linear_array
from oracles import forward_paths, xcorr_lag

W = math.pi / 4


def echo_set(ch, *mus, phi=0.0):
    return ChannelEchoSet(ch, tuple(EchoComponent(1.0, m, 4.8, 0.5, W, phi) for m in mus), 0.0)


def test_identical_mu_gives_one_track(acq):
    tracks = match_echoes([echo_set(0, 100.0), echo_set(1, 100.0)], config=acq)
    assert len(tracks) == 1 and len(tracks[0]) == 2


def test_lag_gate_excludes(acq):
    geo = linear_array(2)
    gate = 1e-4 / acq.speed_of_sound * acq.sample_rate + acq.samples_per_period
    tracks = match_echoes([echo_set(0, 100.0), echo_set(1, 100.0 + gate + 0.5)], config=acq,
                          geometry=geo)
    assert tracks == []


def test_gap_must_be_positive(acq):
    with pytest.raises(ValueError):
        match_echoes([echo_set(0, 1.0), echo_set(1, 1.0)], gap=0, config=acq)


def test_each_echo_in_one_track(acq):
    sets = [echo_set(c, 100.0, 160.0, 230.0) for c in range(6)]
    tracks = match_echoes(sets, config=acq)
    used = [(o.channel_index, o.echo_index) for tr in tracks for o in tr.observations]
    assert len(used) == len(set(used)) == 18 and len(tracks) == 3


def test_exclude(acq):
    sets = [echo_set(c, 100.0) for c in range(3)]
    tracks = match_echoes(sets, config=acq, exclude={(1, 0)})
    assert all(1 not in tr.channels for tr in tracks)


def test_track_invariants():
    with pytest.raises(ValueError):
        EchoTrack((ToAObservation(0, 0, 1e-6),), 0)
    with pytest.raises(ValueError):
        EchoTrack((ToAObservation(0, 0, 1e-6), ToAObservation(0, 1, 1e-6)), 0)


def test_partition_matches_scatterer_identity(acq, pulse, calibrated):
    geo = linear_array(128)
    chans = np.arange(60, 68)
    truth = np.array([[-1e-3, 8e-3], [0.5e-3, 10e-3], [1.5e-3, 12e-3]])
    frame = simulate_frame(GroundTruthScene(truth, [1.0, 0.8, 1.2]), geo, pulse, acq)
    sub = geo.subset(chans)
    sets = [extract_echoes(frame.samples[c], acq, FitConfig(max_iter=200, rel_tol=1e-10), i)
            for i, c in enumerate(chans)]
    tracks = match_echoes(sets, 1, calibrated, sub, MatchConfig(predictive=True))
    pred = np.array([forward_paths(p, sub.virtual_source, sub.receiver_positions)
                     for p in truth]) / acq.speed_of_sound * acq.sample_rate
    pred += pulse.envelope(acq).mu
    labels = set()
    for tr in tracks:
        ids = {int(np.argmin(np.abs(pred[:, o.channel_index]
                                    - sets[o.channel_index].components[o.echo_index].mu)))
               for o in tr.observations}
        assert len(ids) == 1
        labels |= ids
    assert labels == {0, 1, 2} and sum(len(t) for t in tracks) == 24


def test_relabel_symmetry(acq):
    sets = [echo_set(c, 100.0 + c, 180.0 - 2 * c) for c in range(5)]
    relabel = {0: 40, 1: 7, 2: 13, 3: 2, 4: 99}
    moved = [replace(s, channel_index=relabel[s.channel_index]) for s in sets]
    a = {tuple((relabel[o.channel_index], o.echo_index) for o in t.observations)
         for t in match_echoes(sets, config=acq)}
    b = {tuple((o.channel_index, o.echo_index) for o in t.observations)
         for t in match_echoes(moved, config=acq)}
    assert a == b


def _two_channel_track(sets):
    return EchoTrack((ToAObservation(0, 0, 0.0), ToAObservation(1, 0, 0.0)), 0, 0)


def test_refine_zero_phase(acq):
    sets = [echo_set(0, 100.25), echo_set(1, 103.5)]
    tr = phase_refine_toa(_two_channel_track(sets), sets, config=acq)
    assert [o.toa for o in tr.observations] == [100.25 / acq.sample_rate, 103.5 / acq.sample_rate]
    assert not tr.phase_flag


def test_refine_delta_offset(acq):
    sets = [echo_set(0, 100.0, phi=0.3), echo_set(1, 104.0, phi=0.3)]
    base = phase_refine_toa(_two_channel_track(sets), sets, config=acq)
    off = phase_refine_toa(_two_channel_track(sets), sets,
                           config=replace(acq, transmit_delay_offset=2 / acq.sample_rate))
    for a, b in zip(base.observations, off.observations):
        assert (a.toa - b.toa) * acq.sample_rate == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("delta", [-1.5, -0.4, 0.7, 2.0])
def test_refine_sign_matches_cross_correlation(acq, delta):
    t = np.arange(512, dtype=float)
    a = EchoComponent(1.0, 250.0, 20.0, 0.0, W, 0.0)
    b = EchoComponent(1.0, 250.0, 20.0, 0.0, W, -W * delta)   # carrier delayed by delta
    lag = xcorr_lag(memgo_eval(a, t), memgo_eval(b, t))
    sets = [ChannelEchoSet(0, (a,), 0.0), ChannelEchoSet(1, (b,), 0.0)]
    tr = phase_refine_toa(_two_channel_track(sets), sets, config=acq, phase_source="own")
    shift = (tr.observations[1].toa - tr.observations[0].toa) * acq.sample_rate
    assert shift == pytest.approx(delta, abs=1e-12)
    assert shift == pytest.approx(lag, abs=0.02)


def test_refine_shifted_pulse_tracks_translation(acq):
    t = np.arange(512, dtype=float)
    a = EchoComponent(1.0, 240.0, 6.0, 0.5, W, 0.9)
    b = replace(a, mu=a.mu + 3.3)
    lag = xcorr_lag(memgo_eval(a, t), memgo_eval(b, t))
    sets = [ChannelEchoSet(0, (a,), 0.0), ChannelEchoSet(1, (b,), 0.0)]
    for src in ("reference", "own"):
        tr = phase_refine_toa(_two_channel_track(sets), sets, config=acq, phase_source=src)
        shift = (tr.observations[1].toa - tr.observations[0].toa) * acq.sample_rate
        assert shift == pytest.approx(lag, abs=0.02)


def test_refine_rejects_bad_inputs(acq):
    bad = SimpleNamespace(mu=10.0, phi=0.1, omega=0.0)
    sets = [ChannelEchoSet(0, (bad,), 0.0), echo_set(1, 10.0)]
    with pytest.raises(InvalidComponentError):
        phase_refine_toa(_two_channel_track(sets), sets, config=acq)
    with pytest.raises(ValueError):
        phase_refine_toa(_two_channel_track(sets), sets, config=acq, phase_source="other")


@given(st.floats(-3 * math.pi, 3 * math.pi))
def test_refine_flags_large_corrections(phi):
    acq = AcquisitionConfig()
    sets = [echo_set(0, 100.0, phi=phi), echo_set(1, 100.0, phi=phi)]
    tr = phase_refine_toa(_two_channel_track(sets), sets, config=acq)
    moved = max(abs(o.toa * acq.sample_rate - 100.0) for o in tr.observations)
    period = 2 * math.pi / W
    assert tr.phase_flag == (abs(phi / W) > period)
    if not tr.phase_flag:
        assert moved <= period + 1e-9


def _exact_track(point, chans, geo, acq):
    paths = forward_paths(point, geo.virtual_source, geo.receiver_positions[chans])
    return EchoTrack(tuple(ToAObservation(int(c), 0, d / acq.speed_of_sound)
                           for c, d in zip(chans, paths)), int(chans[0]))


def test_reproject_exact(acq):
    geo = linear_array(128)
    res = reproject_validate(_exact_track([0.4e-3, 0.01], np.arange(0, 128, 16), geo, acq), geo, acq)
    assert res.accepted and res.residual < 1e-9


def test_reproject_rejects_corruption(acq):
    geo = linear_array(128)
    tr = _exact_track([0.4e-3, 0.01], np.arange(0, 128, 16), geo, acq)
    obs = list(tr.observations)
    obs[3] = replace(obs[3], toa=obs[3].toa + 5 * acq.wavelength / acq.speed_of_sound)
    res = reproject_validate(replace(tr, observations=tuple(obs)), geo, acq)
    assert not res.accepted and res.reason == "reprojection"
    assert res.residual == pytest.approx(5 * acq.wavelength, rel=1e-6)


def test_reproject_two_observations(acq):
    geo = linear_array(128)
    res = reproject_validate(_exact_track([0.0, 0.01], [3, 9], geo, acq), geo, acq)
    assert res.accepted and res.residual == 0.0


def test_reproject_degenerate(acq):
    geo = linear_array(128)
    obs = tuple(ToAObservation(c, 0, 1e-9) for c in (0, 5, 9))
    res = reproject_validate(EchoTrack(obs, 0), geo, acq)
    assert not res.accepted and res.reason.startswith("degenerate")


def test_noiseless_round_trip_equality(acq, pulse, calibrated):
    geo = linear_array(128)
    s = np.array([0.7e-3, 9e-3])
    frame = simulate_frame(GroundTruthScene([s], [1.0]), geo, pulse, acq)
    chans = np.arange(0, 128, 9)
    sub = geo.subset(chans)
    sets = [extract_echoes(frame.samples[c], acq, FitConfig(max_iter=200, rel_tol=1e-10), i)
            for i, c in enumerate(chans)]
    tracks = match_echoes(sets, 1, calibrated, sub, MatchConfig(predictive=True))
    assert len(tracks) == 1
    tr = phase_refine_toa(tracks[0], sets, 1, calibrated)
    paths = forward_paths(s, sub.virtual_source, sub.receiver_positions[tr.channels])
    err = np.abs(np.array([o.toa for o in tr.observations]) * acq.speed_of_sound - paths)
    assert err.max() < acq.wavelength / 100

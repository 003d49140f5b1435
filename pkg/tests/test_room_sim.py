import math

import numpy as np
import pytest

from adhocloc.geometry import NodePose, Point2D, wrap180
from adhocloc.room_sim import (
    ARRAY_HEIGHT_M,
    PlacementError,
    RirSpec,
    Scenario,
    ScenarioConfig,
    bandlimited_noise,
    generate_scenario,
    image_source_rir,
    load_scenario,
    mic_positions_3d,
    render_node_audio,
    rir_for_scenario,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    t60_to_reflection,
)

FS = 16000


def xcorr_lag(a, b, max_lag: float, up: int = 64) -> float:
    """Fractional-sample lag of a relative to b via upsampled cross-correlation."""
    n = len(a) + len(b) - 1
    nfft = 1 << (n - 1).bit_length()
    spec = np.fft.rfft(a, nfft) * np.conj(np.fft.rfft(b, nfft))
    cc = np.fft.irfft(spec, nfft * up)
    span = int(max_lag * up)
    window = np.concatenate([cc[: span + 1], cc[-span:]])
    lags = np.concatenate([np.arange(span + 1), np.arange(-span, 0)]) / up
    return float(lags[np.argmax(window)])


def two_mic_node(x, y, beta=0.0):
    return NodePose(Point2D(x, y), beta, mic_count=2, mic_spacing=0.08)


def scenario_with(nodes, speakers, room=(6.0, 6.0, 2.5), t60=0.4, snr=None, seed=0):
    return Scenario(room, t60, tuple(nodes), tuple(speakers), len(speakers), snr, seed)


class TestGenerateScenario:
    def test_same_seed_identical(self):
        config = ScenarioConfig(speaker_count=2)
        assert generate_scenario(config, 42) == generate_scenario(config, 42)

    def test_different_seed_differs(self):
        config = ScenarioConfig()
        a = generate_scenario(config, 1)
        b = generate_scenario(config, 2)
        assert a.node_poses != b.node_poses

    def test_poses_respect_margins(self):
        config = ScenarioConfig(node_count=20)
        scenario = generate_scenario(config, 3)
        assert len(scenario.node_poses) == 20
        for pose in scenario.node_poses:
            assert 0.3 <= pose.position.x <= 4.7
            assert 0.3 <= pose.position.y <= 6.7

    def test_infeasible_margin(self):
        config = ScenarioConfig(wall_margin_m=3.0)
        with pytest.raises(PlacementError):
            generate_scenario(config, 0)

    def test_speaker_separation(self):
        config = ScenarioConfig(speaker_count=3, min_speaker_separation_m=1.0)
        scenario = generate_scenario(config, 4)
        speakers = scenario.speaker_positions
        for i in range(3):
            for j in range(i + 1, 3):
                assert speakers[i].distance_to(speakers[j]) >= 1.0

    def test_face_speakers_puts_all_front_side(self):
        config = ScenarioConfig(speaker_count=2, face_speakers=True)
        scenario = generate_scenario(config, 5)
        for pose in scenario.node_poses:
            for s in scenario.speaker_positions:
                from adhocloc.geometry import bearing_of

                local = wrap180(bearing_of(pose.position, s) - pose.orientation_beta)
                assert 0.0 < local % 360.0 < 180.0


class TestT60ToReflection:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            t60_to_reflection(0.0, (5, 7, 2.5))

    def test_fully_absorbent_limit(self):
        # tiny T60 forces Eyring absorption to 1, so no reflection remains
        assert t60_to_reflection(1e-6, (5, 7, 2.5)) == pytest.approx(0.0, abs=1e-9)

    def test_monotone_in_t60(self):
        values = [t60_to_reflection(t, (5, 7, 2.5)) for t in (0.2, 0.4, 0.8, 1.6)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_eyring_cross_check(self):
        # independent hand evaluation: V=87.5, S=130, alpha=1-exp(-0.161*V/(S*0.4))
        assert t60_to_reflection(0.4, (5, 7, 2.5)) == pytest.approx(0.8733169, abs=1e-6)


class TestImageSourceRir:
    def test_order_zero_single_tap_per_mic(self):
        node = two_mic_node(2.0, 2.0)
        mics = mic_positions_3d(node)
        rir = image_source_rir((6, 6, 2.5), np.array([4.0, 2.0, ARRAY_HEIGHT_M]), mics,
                               RirSpec(0, 0.0), FS)
        # direct path only: total energy matches 1/(4 pi d)^2 up to the ~2%
        # windowing ripple of the fractional-delay kernel
        d0 = np.linalg.norm(mics[0] - [4.0, 2.0, ARRAY_HEIGHT_M])
        assert np.sum(rir[0] ** 2) == pytest.approx((1 / (4 * np.pi * d0)) ** 2, rel=0.03)

    def test_reflections_add_energy(self):
        node = two_mic_node(2.0, 2.0)
        mics = mic_positions_3d(node)
        src = np.array([4.0, 3.0, ARRAY_HEIGHT_M])
        e0 = np.sum(image_source_rir((6, 6, 2.5), src, mics, RirSpec(0, 0.0), FS) ** 2)
        e6 = np.sum(image_source_rir((6, 6, 2.5), src, mics, RirSpec(6, 0.9), FS) ** 2)
        assert e6 > e0 * 1.5

    def test_free_field_inverse_square(self):
        # doubling source distance drops direct-path power by 6 dB
        node = two_mic_node(1.0, 3.0)
        sources = [np.array([2.0, 3.0, ARRAY_HEIGHT_M]), np.array([3.0, 3.0, ARRAY_HEIGHT_M])]
        rng = np.random.default_rng(0)
        burst = bandlimited_noise(FS // 2, FS, rng)
        powers = []
        for src in sources:
            scenario = scenario_with([node, two_mic_node(5, 5)], [Point2D(src[0], src[1])])
            audio = render_node_audio(scenario, node, [burst], RirSpec(0, 0.0), FS)
            powers.append(np.mean(audio.samples**2))
        drop_db = 10 * np.log10(powers[1] / powers[0])
        assert drop_db == pytest.approx(-6.02, abs=0.2)


class TestRenderNodeAudio:
    def test_broadside_two_mic_zero_delay(self):
        node = two_mic_node(2.0, 2.0, beta=0.0)
        scenario = scenario_with([node, two_mic_node(1, 1)], [Point2D(2.0, 5.0)])
        burst = bandlimited_noise(FS // 2, FS, np.random.default_rng(1))
        audio = render_node_audio(scenario, node, [burst], RirSpec(0, 0.0), FS)
        lag = xcorr_lag(audio.samples[0], audio.samples[1], max_lag=5)
        assert abs(lag) < 0.05

    def test_axial_source_fractional_delay(self):
        # source on the array axis: adjacent-mic delay is spacing/c exactly
        node = two_mic_node(2.0, 2.0, beta=0.0)
        scenario = scenario_with([node, two_mic_node(1, 5)], [Point2D(5.0, 2.0)])
        burst = bandlimited_noise(FS // 2, FS, np.random.default_rng(2))
        audio = render_node_audio(scenario, node, [burst], RirSpec(0, 0.0), FS)
        expected = 0.08 / 343.0 * FS  # 3.73 samples
        # mic 0 sits at x=1.96, mic 1 at x=2.04: mic 0 is farther, so it lags
        lag = xcorr_lag(audio.samples[0], audio.samples[1], max_lag=8)
        assert lag == pytest.approx(expected, abs=0.1)

    def test_snr_zero_noise_power_matches_speech(self):
        node = two_mic_node(2.0, 2.0)
        speakers = [Point2D(4.0, 4.0)]
        burst = bandlimited_noise(10 * FS, FS, np.random.default_rng(3))
        clean_sc = scenario_with([node, two_mic_node(1, 1)], speakers, snr=None)
        noisy_sc = scenario_with([node, two_mic_node(1, 1)], speakers, snr=0.0)
        clean = render_node_audio(clean_sc, node, [burst], RirSpec(0, 0.0), FS, rng=7)
        noisy = render_node_audio(noisy_sc, node, [burst], RirSpec(0, 0.0), FS, rng=7)
        noise = noisy.samples - clean.samples
        ratio = np.mean(noise**2) / np.mean(clean.samples**2)
        assert ratio == pytest.approx(1.0, rel=0.02)

    def test_anechoic_tdoa_matches_geometry(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            node = NodePose(
                Point2D(rng.uniform(1, 5), rng.uniform(1, 5)),
                rng.uniform(0, 360),
                mic_count=4,
                mic_spacing=0.08,
            )
            speaker = Point2D(rng.uniform(1, 5), rng.uniform(1, 5))
            if node.position.distance_to(speaker) < 1.0:
                continue
            scenario = scenario_with([node, two_mic_node(0.5, 0.5)], [speaker])
            burst = bandlimited_noise(FS // 2, FS, np.random.default_rng(100 + trial))
            audio = render_node_audio(scenario, node, [burst], RirSpec(0, 0.0), FS)
            mics = mic_positions_3d(node)
            src = np.array([speaker.x, speaker.y, ARRAY_HEIGHT_M])
            dists = np.linalg.norm(mics - src, axis=1)
            for i in range(4):
                for j in range(i + 1, 4):
                    geo = (dists[i] - dists[j]) / 343.0 * FS
                    measured = xcorr_lag(audio.samples[i], audio.samples[j], max_lag=16)
                    assert measured == pytest.approx(geo, abs=0.2)

    def test_reproducible_bit_identical(self):
        node = two_mic_node(2.0, 2.0)
        scenario = scenario_with([node, two_mic_node(1, 1)], [Point2D(4.0, 4.0)], snr=20.0)
        burst = bandlimited_noise(FS // 4, FS, np.random.default_rng(5))
        a = render_node_audio(scenario, node, [burst], RirSpec(2, 0.5), FS, rng=11)
        b = render_node_audio(scenario, node, [burst], RirSpec(2, 0.5), FS, rng=11)
        assert np.array_equal(a.samples, b.samples)

    def test_empty_sources_rejected(self):
        node = two_mic_node(2.0, 2.0)
        scenario = scenario_with([node, two_mic_node(1, 1)], [Point2D(4.0, 4.0)])
        with pytest.raises(ValueError):
            render_node_audio(scenario, node, [], RirSpec(0, 0.0), FS)

    def test_source_reference_mode(self):
        node = two_mic_node(2.0, 2.0)
        scenario = scenario_with([node, two_mic_node(1, 1)], [Point2D(2.5, 2.5)], snr=10.0)
        burst = bandlimited_noise(FS, FS, np.random.default_rng(6))
        audio = render_node_audio(
            scenario, node, [burst], RirSpec(0, 0.0), FS, rng=12, snr_reference="source"
        )
        assert audio.channel_count == 2


class TestScenarioIo:
    def test_round_trip(self, tmp_path):
        scenario = generate_scenario(ScenarioConfig(speaker_count=2), 9)
        path = tmp_path / "scene.json"
        save_scenario(scenario, path)
        assert load_scenario(path) == scenario

    def test_dict_round_trip_none_snr(self):
        scenario = generate_scenario(ScenarioConfig(snr_db=None), 10)
        assert scenario.snr_db is None
        assert scenario_from_dict(scenario_to_dict(scenario)) == scenario


class TestScenarioValidation:
    def test_point_outside_room_rejected(self):
        with pytest.raises(ValueError):
            scenario_with([two_mic_node(2, 2), two_mic_node(3, 3)], [Point2D(10.0, 2.0)])

    def test_needs_two_nodes(self):
        with pytest.raises(ValueError):
            scenario_with([two_mic_node(2, 2)], [Point2D(3.0, 3.0)])


class TestBandlimitedNoise:
    def test_unit_power(self):
        noise = bandlimited_noise(FS, FS, np.random.default_rng(13))
        assert np.mean(noise**2) == pytest.approx(1.0, rel=1e-9)

    def test_band_is_empty_outside(self):
        noise = bandlimited_noise(FS, FS, np.random.default_rng(14), band_hz=(500, 2000))
        spectrum = np.abs(np.fft.rfft(noise))
        freqs = np.fft.rfftfreq(FS, 1 / FS)
        outside = spectrum[(freqs < 490) | (freqs > 2010)]
        assert np.max(outside) < 1e-9 * np.max(spectrum)


class TestRirSpecValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            RirSpec(-1, 0.0)
        with pytest.raises(ValueError):
            RirSpec(0, 1.0)

    def test_rir_for_scenario_order_zero_is_anechoic(self):
        scenario = generate_scenario(ScenarioConfig(), 15)
        spec = rir_for_scenario(scenario, max_reflection_order=0)
        assert spec.reflection_coefficient == 0.0

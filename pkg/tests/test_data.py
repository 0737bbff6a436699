import math

import numpy as np
import pytest
import scipy.io.wavfile

from raresed.data import (
    LfbeConfig,
    SynthConfig,
    Utterance,
    hz_to_mel,
    lfbe,
    load_dataset,
    mel_filterbank,
    mel_to_hz,
    read_wav,
    save_dataset,
    synth_dataset,
    synth_feature_utterance,
)
from raresed.errors import InputError, ParseError


def desk_synth(**overrides) -> SynthConfig:
    base = dict(count=12, positive_fraction=0.5, frames=60, dim=8,
                ebr_db=(6.0,), duration_frames=(8, 16), seed=21)
    base.update(overrides)
    return SynthConfig(**base)


class TestUtterance:
    def test_negative_has_no_labels(self):
        utt = Utterance.negative("n", np.zeros((3, 5)))
        assert utt.y == 0 and utt.onset is None and utt.offset is None
        with pytest.raises(ValueError):
            Utterance(id="n", features=np.zeros((3, 5)), y=0,
                      frame_labels=np.zeros(5, dtype=np.int64))

    def test_positive_boundaries(self):
        utt = Utterance.positive("p", np.zeros((3, 10)), onset=4, offset=7)
        assert (utt.onset, utt.offset) == (4, 7)
        assert utt.frame_labels.sum() == 4

    def test_labels_must_be_contiguous(self):
        labels = np.array([0, 1, 0, 1, 0])
        with pytest.raises(ValueError):
            Utterance(id="p", features=np.zeros((2, 5)), y=1, frame_labels=labels)

    def test_positive_needs_labels(self):
        with pytest.raises(ValueError):
            Utterance(id="p", features=np.zeros((2, 5)), y=1)


class TestSynth:
    def test_zero_positive_fraction(self):
        data = synth_dataset(desk_synth(positive_fraction=0.0, count=20))
        assert all(utt.y == 0 for utt in data)

    def test_high_ebr_separates_event_region(self):
        data = synth_dataset(desk_synth(ebr_db=(60.0,), count=30,
                                        positive_fraction=1.0))
        for utt in data:
            assert utt.y == 1
            event = slice(utt.onset - 1, utt.offset)
            rest = np.ones(utt.n_frames, dtype=bool)
            rest[event] = False
            assert utt.features[:, event].mean() > utt.features[:, rest].mean()

    def test_same_seed_is_bit_identical(self):
        a = synth_dataset(desk_synth())
        b = synth_dataset(desk_synth())
        for ua, ub in zip(a, b):
            assert ua.id == ub.id and ua.y == ub.y and ua.meta == ub.meta
            assert np.array_equal(ua.features, ub.features)
            if ua.y:
                assert np.array_equal(ua.frame_labels, ub.frame_labels)

    def test_generation_order_independent(self):
        cfg = desk_synth(count=6)
        forward_order = [synth_feature_utterance(cfg, i) for i in range(6)]
        reverse_order = [synth_feature_utterance(cfg, i) for i in reversed(range(6))]
        for ua, ub in zip(forward_order, reversed(reverse_order)):
            assert np.array_equal(ua.features, ub.features)
            assert ua.y == ub.y

    def test_positive_rate_tracks_fraction(self):
        data = synth_dataset(desk_synth(count=400, positive_fraction=0.5))
        rate = np.mean([utt.y for utt in data])
        assert 0.4 < rate < 0.6

    def test_duration_must_fit(self):
        with pytest.raises(InputError):
            desk_synth(duration_frames=(10, 100))
        with pytest.raises(InputError):
            desk_synth(ebr_db=())

    def test_event_duration_within_range(self):
        data = synth_dataset(desk_synth(count=40, positive_fraction=1.0))
        for utt in data:
            duration = utt.offset - utt.onset + 1
            assert 8 <= duration <= 16


class TestMelFilterbank:
    def test_rows_positive(self):
        bank = mel_filterbank(LfbeConfig())
        assert bank.shape == (64, 1025)
        assert np.all(bank >= 0.0)
        assert np.all(bank.sum(axis=1) > 0.0)

    def test_peaks_strictly_increasing(self):
        bank = mel_filterbank(LfbeConfig())
        peaks = np.argmax(bank, axis=1)
        assert np.all(np.diff(peaks) > 0)

    def test_peak_bins_match_independent_recomputation(self):
        cfg = LfbeConfig()
        bank = mel_filterbank(cfg)
        # Independent oracle: recompute mel-spaced triangle peaks from the
        # mel formula and take the per-filter argmax over bin frequencies.
        points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(22050.0), 66))
        bin_hz = np.arange(1025) * 44100 / 2048
        for j in range(64):
            left, peak, right = points[j], points[j + 1], points[j + 2]
            tri = np.clip(np.minimum((bin_hz - left) / (peak - left),
                                     (right - bin_hz) / (right - peak)), 0, None)
            assert int(np.argmax(bank[j])) == int(np.argmax(tri))

    def test_too_many_filters_rejected(self):
        with pytest.raises(InputError):
            mel_filterbank(LfbeConfig(sample_rate=8000, frame_ms=16.0,
                                      shift_ms=8.0, n_filters=200))


class TestLfbe:
    def test_geometry_matches_config(self):
        cfg = LfbeConfig()
        assert cfg.frame_length == 2029
        assert cfg.shift_length == 1014
        assert cfg.nfft == 2048

    def test_zero_waveform_hits_floor(self):
        cfg = LfbeConfig()
        feats = lfbe(np.zeros(cfg.frame_length * 3), cfg)
        assert np.all(feats == np.log(1e-10))

    def test_gain_shifts_by_two_log_ten(self):
        cfg = LfbeConfig()
        rng = np.random.default_rng(17)
        wave = rng.standard_normal(cfg.frame_length * 4) * 0.1
        base = lfbe(wave, cfg)
        scaled = lfbe(10.0 * wave, cfg)
        unfloored = base > np.log(1e-10)
        assert unfloored.any()
        shift = scaled[unfloored] - base[unfloored]
        assert np.all(np.abs(shift - 2.0 * math.log(10.0)) < 1e-9)

    def test_frame_count_formula(self):
        cfg = LfbeConfig()
        rng = np.random.default_rng(18)
        for _ in range(100):
            n = int(rng.integers(cfg.frame_length, cfg.frame_length * 6))
            feats = lfbe(np.zeros(n), cfg)
            assert feats.shape == (64, 1 + (n - cfg.frame_length) // cfg.shift_length)

    def test_short_waveform_rejected(self):
        cfg = LfbeConfig()
        with pytest.raises(InputError):
            lfbe(np.zeros(cfg.frame_length - 1), cfg)

    def test_sine_at_filter_center_wins_its_filter(self):
        cfg = LfbeConfig()
        points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(22050.0), 66))
        center = points[33]  # peak frequency of filter index 32
        t = np.arange(cfg.sample_rate) / cfg.sample_rate
        feats = lfbe(np.sin(2.0 * np.pi * center * t), cfg)
        assert np.all(np.argmax(feats, axis=0) == 32)

    def test_shift_longer_than_frame_rejected(self):
        with pytest.raises(InputError):
            LfbeConfig(frame_ms=20.0, shift_ms=25.0)


class TestWav:
    def test_pcm16_round_trip(self, tmp_path):
        cfg = LfbeConfig(sample_rate=16000)
        t = np.arange(16000) / 16000
        wave = 0.5 * np.sin(2.0 * np.pi * 440.0 * t)
        path = tmp_path / "tone.wav"
        scipy.io.wavfile.write(path, 16000, (wave * 32768.0).astype(np.int16))
        rate, samples = read_wav(path)
        assert rate == 16000
        assert np.max(np.abs(samples - wave)) < 1e-4
        feats = lfbe(samples, cfg)
        assert feats.shape[0] == 64

    def test_float32_round_trip(self, tmp_path):
        wave = np.sin(np.linspace(0.0, 100.0, 8000)).astype(np.float32)
        path = tmp_path / "tone32.wav"
        scipy.io.wavfile.write(path, 8000, wave)
        rate, samples = read_wav(path)
        assert rate == 8000
        assert np.allclose(samples, wave.astype(np.float64), atol=0, rtol=0)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        scipy.io.wavfile.write(path, 8000,
                               np.zeros((100, 2), dtype=np.int16))
        with pytest.raises(InputError):
            read_wav(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_wav(tmp_path / "absent.wav")


class TestDatasetIO:
    def test_round_trip_lossless(self, tmp_path):
        data = synth_dataset(desk_synth(count=9))
        path = tmp_path / "d.sed"
        save_dataset(path, data)
        back = load_dataset(path)
        assert len(back) == 9
        for ua, ub in zip(data, back):
            assert ua.id == ub.id and ua.y == ub.y and ua.meta == ub.meta
            assert np.array_equal(ua.features, ub.features)
            if ua.y:
                assert (ua.onset, ua.offset) == (ub.onset, ub.offset)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.sed"
        save_dataset(path, [])
        assert load_dataset(path) == []

    def test_truncated_record_names_index(self, tmp_path):
        data = synth_dataset(desk_synth(count=3))
        path = tmp_path / "d.sed"
        save_dataset(path, data)
        blob = path.read_bytes()
        (tmp_path / "cut.sed").write_bytes(blob[:-50])
        with pytest.raises(ParseError, match="record 2"):
            load_dataset(tmp_path / "cut.sed")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.sed"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ParseError, match="magic"):
            load_dataset(path)

    def test_trailing_garbage_detected(self, tmp_path):
        data = synth_dataset(desk_synth(count=2))
        path = tmp_path / "d.sed"
        save_dataset(path, data)
        with open(path, "ab") as fh:
            fh.write(b"\x01")
        with pytest.raises(ParseError, match="trailing"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset(tmp_path / "absent.sed")

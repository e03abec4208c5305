"""Log-mel front end: frame math, mel scale, files, stats, fitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskduo.audio import (
    AudioConfig,
    DatasetStats,
    ManifestEntry,
    StatsAccumulator,
    cache_spectrograms,
    crop_or_pad,
    frame_count,
    hz_to_mel,
    log_mel_spectrogram,
    mel_filterbank,
    mel_to_hz,
    normalize,
    read_manifest,
    read_wav,
    split_long,
    write_manifest,
    write_wav,
)


class TestFrameMath:
    def test_hand_computed_counts(self):
        cfg = AudioConfig()
        # 400-sample window, 160 hop: count = 1 + (n - 400) // 160
        assert frame_count(400, cfg) == 1
        assert frame_count(559, cfg) == 1
        assert frame_count(560, cfg) == 2
        assert frame_count(16000, cfg) == 98
        # 608 frames need 400 + 607 * 160 = 97520 samples
        assert frame_count(97520, cfg) == 608
        # a plain 6.08 s clip (97280 samples) yields 606, not 608
        assert frame_count(97280, cfg) == 606

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            frame_count(399, AudioConfig())

    @given(n=st.integers(400, 200_000))
    @settings(max_examples=60, deadline=None)
    def test_count_matches_spectrogram_width(self, n):
        cfg = AudioConfig()
        wave = np.zeros(n)
        assert log_mel_spectrogram(wave, cfg).shape == (80, frame_count(n, cfg))


class TestMelScale:
    def test_anchor_points(self):
        # linear region: 1 kHz sits at 15 units; log region: x6.4 adds 27
        assert float(hz_to_mel(0.0)) == 0.0
        assert float(hz_to_mel(1000.0)) == pytest.approx(15.0, abs=1e-9)
        assert float(hz_to_mel(6400.0)) == pytest.approx(42.0, abs=1e-9)
        assert float(mel_to_hz(15.0)) == pytest.approx(1000.0, rel=1e-9)

    def test_round_trip(self):
        freqs = np.linspace(20.0, 8000.0, 50)
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(freqs)), freqs, rtol=1e-9)

    def test_linear_below_breakpoint(self):
        assert float(hz_to_mel(500.0)) == pytest.approx(500.0 * 3.0 / 200.0, rel=1e-12)


class TestFilterbank:
    def test_shape_and_support(self):
        cfg = AudioConfig()
        fb = mel_filterbank(cfg)
        assert fb.shape == (80, 201)
        assert (fb >= 0).all()
        assert (fb.sum(axis=1) > 0).all()  # every band sees some bins

    def test_area_normalization(self):
        # filter k integrates (over Hz) to ~1 under the 2/(hi-lo) scaling
        cfg = AudioConfig()
        fb = mel_filterbank(cfg)
        bin_hz = cfg.sample_rate / cfg.window_samples
        mel_pts = mel_to_hz(
            np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
        )
        # wide filters (many bins) approximate the triangle area well
        widths = mel_pts[2:] - mel_pts[:-2]
        wide = widths > 10 * bin_hz
        areas = fb.sum(axis=1) * bin_hz
        np.testing.assert_allclose(areas[wide], 1.0, rtol=0.1)

    def test_band_limits_respected(self):
        cfg = AudioConfig()
        fb = mel_filterbank(cfg)
        freqs = np.arange(201) * cfg.sample_rate / cfg.window_samples
        active = fb.sum(axis=0) > 0
        assert not active[freqs < cfg.fmin - 40.1].any()
        assert not active[freqs > cfg.fmax + 40.1].any()


class TestSpectrogram:
    def test_tone_lands_in_matching_band(self):
        cfg = AudioConfig()
        t = np.arange(16000) / cfg.sample_rate
        tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
        spec = log_mel_spectrogram(tone, cfg)
        centers = mel_to_hz(
            np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
        )[1:-1]
        peak_hz = centers[int(spec.mean(axis=1).argmax())]
        assert abs(peak_hz - 1000.0) < 60.0

    def test_silence_hits_log_floor(self):
        spec = log_mel_spectrogram(np.zeros(16000), AudioConfig())
        np.testing.assert_allclose(spec, np.log(1e-10), rtol=1e-6)

    def test_output_dtype_and_finiteness(self, rng):
        spec = log_mel_spectrogram(rng.normal(scale=0.1, size=8000))
        assert spec.dtype == np.float32
        assert np.isfinite(spec).all()

    def test_rejects_2d_input(self):
        with pytest.raises(ValueError):
            log_mel_spectrogram(np.zeros((2, 16000)))


class TestStats:
    def test_accumulator_matches_direct_computation(self, rng):
        clips = [rng.normal(3.0, 2.0, size=(80, 50)) for _ in range(4)]
        acc = StatsAccumulator()
        for c in clips:
            acc.add(c)
        stats = acc.finalize(eps=0.0)
        pooled = np.concatenate([c.ravel() for c in clips])
        assert stats.mean == pytest.approx(pooled.mean(), rel=1e-12)
        assert stats.std == pytest.approx(pooled.std(), rel=1e-9)
        assert stats.count == pooled.size

    def test_normalize_zero_mean_unit_std(self, rng):
        spec = rng.normal(-4.0, 3.0, size=(80, 100)).astype(np.float32)
        acc = StatsAccumulator()
        acc.add(spec)
        out = normalize(spec, acc.finalize())
        assert abs(float(out.mean())) < 1e-4
        assert abs(float(out.std()) - 1.0) < 1e-3

    def test_empty_accumulator_rejected(self):
        with pytest.raises(ValueError):
            StatsAccumulator().finalize()

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            DatasetStats(mean=0.0, std=0.0, count=10)


class TestFitToGrid:
    def test_crop_is_window_of_original(self, rng):
        spec = rng.normal(size=(80, 50)).astype(np.float32)
        out = crop_or_pad(spec, 38, np.random.default_rng(0))
        assert out.shape == (80, 38)
        found = any(
            np.array_equal(out, spec[:, s : s + 38]) for s in range(50 - 38 + 1)
        )
        assert found

    def test_pad_appends_zeros(self, rng):
        spec = rng.normal(size=(80, 30)).astype(np.float32)
        out = crop_or_pad(spec, 38, np.random.default_rng(0))
        assert np.array_equal(out[:, :30], spec)
        assert (out[:, 30:] == 0).all()

    def test_exact_size_untouched(self, rng):
        spec = rng.normal(size=(80, 38)).astype(np.float32)
        assert crop_or_pad(spec, 38, np.random.default_rng(0)) is spec

    def test_crop_deterministic_in_rng(self, rng):
        spec = rng.normal(size=(80, 50)).astype(np.float32)
        a = crop_or_pad(spec, 38, np.random.default_rng(9))
        b = crop_or_pad(spec, 38, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_split_long_covers_everything(self, rng):
        spec = rng.normal(size=(80, 100)).astype(np.float32)
        pieces = split_long(spec, 38)
        assert [v for _, v in pieces] == [38, 38, 24]
        rebuilt = np.concatenate([p[:, :v] for p, v in pieces], axis=1)
        assert np.array_equal(rebuilt, spec)
        assert all(p.shape == (80, 38) for p, _ in pieces)

    def test_split_exact_multiple_has_no_padding(self, rng):
        spec = rng.normal(size=(80, 76)).astype(np.float32)
        pieces = split_long(spec, 38)
        assert [v for _, v in pieces] == [38, 38]


class TestWavFiles:
    def test_round_trip_within_half_lsb(self, tmp_path, rng):
        wave = rng.normal(scale=0.2, size=16000)
        back, rate = read_wav(write_wav(tmp_path / "a.wav", wave))
        assert rate == 16000
        assert float(np.abs(back - wave).max()) <= 0.5 / 32768.0 + 1e-12

    def test_wrong_rate_rejected(self, tmp_path, rng):
        path = write_wav(tmp_path / "b.wav", rng.normal(scale=0.1, size=8000), rate=22050)
        with pytest.raises(ValueError, match="sample rate"):
            read_wav(path, expect_rate=16000)
        back, rate = read_wav(path, expect_rate=None)
        assert rate == 22050

    def test_stereo_averaged(self, tmp_path):
        import wave as wave_mod

        left = np.full(100, 0.5)
        right = np.full(100, -0.5)
        inter = np.empty(200)
        inter[0::2], inter[1::2] = left, right
        ints = np.clip(np.round(inter * 32768.0), -32768, 32767).astype("<i2")
        path = tmp_path / "st.wav"
        with wave_mod.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(ints.tobytes())
        mono, _ = read_wav(path)
        assert mono.shape == (100,)
        assert float(np.abs(mono).max()) < 1e-3

    def test_24_bit_read(self, tmp_path):
        import wave as wave_mod

        vals = np.array([0, 1 << 22, -(1 << 22), (1 << 23) - 1], dtype=np.int32)
        raw = b"".join(int(v & 0xFFFFFF).to_bytes(3, "little") for v in vals)
        path = tmp_path / "deep.wav"
        with wave_mod.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(3)
            wf.setframerate(16000)
            wf.writeframes(raw)
        data, _ = read_wav(path)
        np.testing.assert_allclose(
            data, vals.astype(np.float64) / (1 << 23), atol=1e-12
        )


class TestManifests:
    def test_round_trip(self, tmp_path):
        entries = [
            ManifestEntry("wav/a.wav", "dog", "train"),
            ManifestEntry("wav/b.wav", "cat", "test"),
        ]
        path = write_manifest(tmp_path / "m.csv", entries)
        assert read_manifest(path) == entries

    def test_missing_columns_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("file,tag\nx.wav,dog\n")
        with pytest.raises(ValueError, match="columns"):
            read_manifest(bad)

    def test_empty_rejected(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("path,label,split\n")
        with pytest.raises(ValueError, match="no rows"):
            read_manifest(empty)

    def test_cache_reuses_existing_arrays(self, tmp_path, rng):
        wav_dir = tmp_path / "wavs"
        entries = []
        for i in range(3):
            write_wav(wav_dir / f"c{i}.wav", rng.normal(scale=0.1, size=16000))
            entries.append(ManifestEntry(f"c{i}.wav", str(i % 2), "train"))
        cfg = AudioConfig()
        cache = tmp_path / "cache"
        paths1, stats1 = cache_spectrograms(entries, cfg, cache, root=wav_dir)
        mtimes = {p: paths1[p].stat().st_mtime_ns for p in paths1}
        paths2, stats2 = cache_spectrograms(entries, cfg, cache, root=wav_dir)
        assert {p: paths2[p].stat().st_mtime_ns for p in paths2} == mtimes
        assert stats1 == stats2

    def test_cache_key_depends_on_config(self, tmp_path, rng):
        wav_dir = tmp_path / "wavs"
        write_wav(wav_dir / "c.wav", rng.normal(scale=0.1, size=16000))
        entries = [ManifestEntry("c.wav", "0", "train")]
        cache = tmp_path / "cache"
        cache_spectrograms(entries, AudioConfig(), cache, root=wav_dir)
        cache_spectrograms(entries, AudioConfig(n_mels=64, fmin=100.0), cache, root=wav_dir)
        assert len(list(cache.glob("*.npy"))) == 2

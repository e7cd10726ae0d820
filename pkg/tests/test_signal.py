import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hemcnn import signal
from hemcnn.dataio import DataError, Hand, Stage, SyntheticConfig, TrialRecord, generate_synthetic

FS = 12.6


def fit_sinusoid(t, y, freq):
    """Amplitude and phase of the ``freq`` component by least squares."""
    A = np.column_stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)])
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return np.hypot(a, b), np.arctan2(b, a)


def hb_trial(data, fs=FS, stage=Stage.HB):
    return TrialRecord("S01", "S01_T01", Hand.LEFT, fs, data, stage)


class TestMbll:
    def test_zero(self):
        np.testing.assert_array_equal(signal.mbll(np.zeros((2, 5))), np.zeros((2, 5)))

    def test_identity_extinction(self):
        p = signal.MbllParams(extinction=((1, 0), (0, 1)), dpf=(1, 1), distance=1.0)
        np.testing.assert_allclose(signal.mbll(np.array([[0.3], [0.7]]), p), [[0.3], [0.7]])

    def test_round_trip(self):
        p = signal.MbllParams()
        rng = np.random.default_rng(0)
        conc = rng.normal(size=(2, 200)) * 1e-3
        e = np.asarray(p.extinction)
        od = (e @ conc) * (p.distance * np.asarray(p.dpf))[:, None]
        rec = signal.mbll(od, p)
        assert np.max(np.abs(rec - conc) / np.abs(conc)) < 1e-10

    def test_singular(self):
        with pytest.raises(ValueError):
            signal.MbllParams(extinction=((1, 2), (2, 4)))


class TestLowpass:
    def test_dc(self):
        np.testing.assert_allclose(signal.lowpass(np.full(300, 3.7), FS), 3.7, atol=1e-9)

    def test_stopband(self):
        t = np.arange(int(120 * FS)) / FS
        y = signal.lowpass(np.sin(2 * np.pi * 2.0 * t), FS, 0.25)
        # squared 4th-order response at 8x cutoff is ~(1/8)^8; edges carry pad transients
        inner = slice(int(20 * FS), -int(20 * FS))
        assert np.max(np.abs(y[inner])) < 1e-4

    def test_passband_and_zero_phase(self):
        t = np.arange(int(600 * FS)) / FS
        y = signal.lowpass(np.sin(2 * np.pi * 0.05 * t), FS, 0.25)
        inner = slice(int(60 * FS), -int(60 * FS))
        amp, phase = fit_sinusoid(t[inner], y[inner], 0.05)
        assert abs(amp - 1.0) < 0.02
        assert abs(phase) < 0.01

    def test_length_and_errors(self):
        assert signal.lowpass(np.arange(50.0), FS).shape == (50,)
        with pytest.raises(ValueError):
            signal.lowpass(np.zeros(5), FS)
        with pytest.raises(ValueError):
            signal.lowpass(np.zeros(100), FS, cutoff=7.0)

    def test_shift_equivariance_interior(self):
        t = np.arange(int(120 * FS)) / FS
        from hemcnn.hrf import canonical_hrf
        bump = lambda t0: np.where(t >= t0, canonical_hrf(np.maximum(t - t0, 0.0)), 0.0)  # noqa: E731
        k = 7
        a = signal.lowpass(bump(40.0), FS)
        b = signal.lowpass(bump(40.0 + k / FS), FS)
        edge = int(5 * FS)
        assert np.max(np.abs(b[edge + k:-edge] - a[edge:-edge - k])) < 1e-6


class TestDetrend:
    def test_line_removed(self):
        t = np.arange(20) / 2.0
        np.testing.assert_allclose(signal.detrend(3.0 + 0.4 * t, 2.0, 10.0), 0.0, atol=1e-12)

    def test_fast_sinusoid_survives(self):
        fs = 12.6
        t = np.arange(int(10 * fs)) / fs
        x = np.sin(2 * np.pi * 1.0 * t)
        # oracle: residual of projecting out span{1, t}
        A = np.column_stack([np.ones_like(t), t])
        resid = x - A @ np.linalg.lstsq(A, x, rcond=None)[0]
        out = signal.detrend(x, fs, 10.0)
        np.testing.assert_allclose(out, resid, atol=1e-10)
        # 126 samples span 9.92 s, so a small linear component is removed
        assert np.max(np.abs(out - x)) < 0.1

    @pytest.mark.parametrize("n", [70, 81, 101, 41])
    def test_window_mean_and_slope_zero(self, n):
        x = np.random.default_rng(n).normal(size=n) + np.arange(n) * 0.3
        out = signal.detrend(x, 2.0, 10.0)
        for a, b in signal._window_bounds(n, 20):
            seg = out[a:b]
            tc = np.arange(b - a) - (b - a - 1) / 2
            assert abs(seg.mean()) < 1e-9
            assert abs(seg @ tc) < 1e-9

    def test_last_window_never_single(self):
        bounds = signal._window_bounds(41, 20)
        assert bounds[-1] == (20, 41)

    def test_too_short(self):
        with pytest.raises(ValueError):
            signal.detrend(np.zeros(1), 2.0)


class TestResample:
    def test_constant(self):
        out = signal.resample(np.full(883, 2.5), FS, 2.0)
        assert out.shape == (141,)
        np.testing.assert_allclose(out, 2.5)

    def test_line_exact(self):
        n = 883
        t = np.arange(n) / FS
        out = signal.resample(1.5 - 0.2 * t, FS, 2.0)
        t_out = np.arange(out.size) / 2.0
        np.testing.assert_allclose(out, 1.5 - 0.2 * t_out, atol=1e-12)

    def test_length_formula(self):
        assert signal.resampled_length(883, 12.6, 2.0) == 141
        for n in range(20, 600, 37):
            assert signal.resampled_length(n, 12.6, 2.0) == int(np.floor((n - 1) * 2 / 12.6 + 1e-9)) + 1

    def test_empty(self):
        with pytest.raises(ValueError):
            signal.resample(np.zeros(0), FS, 2.0)


class TestZscore:
    def _trial(self, data):
        return TrialRecord("S01", "T", Hand.LEFT, 2.0, data, Stage.PREPROCESSED)

    def test_moments(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(48, 70))
        z = signal.zscore_trial(self._trial(x)).data
        for rows in (z[0::2], z[1::2]):
            assert abs(rows.mean()) < 1e-9
            assert abs(rows.std() - 1.0) < 1e-6

    def test_constant_rows(self):
        x = np.random.default_rng(1).normal(size=(48, 70))
        x[0::2] = 4.0
        z = signal.zscore_trial(self._trial(x)).data
        assert np.all(z[0::2] == 0.0)

    def test_scale_invariance(self):
        x = np.random.default_rng(2).normal(size=(48, 70))
        a = signal.zscore_trial(self._trial(x)).data
        b = signal.zscore_trial(self._trial(2 * x)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_idempotent(self):
        x = np.random.default_rng(3).normal(size=(48, 70))
        z = signal.zscore_trial(self._trial(x))
        np.testing.assert_allclose(signal.zscore_trial(z).data, z.data, atol=1e-6)

    def test_order_preserved(self):
        x = np.random.default_rng(4).normal(size=(48, 70))
        z = signal.zscore_trial(self._trial(x)).data
        np.testing.assert_array_equal(np.argsort(x[0::2], axis=None), np.argsort(z[0::2], axis=None))

    def test_rejects_raw_od(self):
        t = TrialRecord("S01", "T", Hand.LEFT, 2.0, np.zeros((48, 10)), Stage.RAW_OD)
        with pytest.raises(DataError):
            signal.zscore_trial(t)


class TestCrop:
    def _trial(self, n=70):
        return TrialRecord("S01", "T", Hand.LEFT, 2.0, np.arange(48 * n, dtype=float).reshape(48, n), Stage.PREPROCESSED)

    def test_width(self):
        assert signal.crop_window(self._trial(), 0.0, 19.0).shape == (48, 38)

    def test_valid_positions(self):
        t = self._trial()
        starts = [k for k in range(100) if k + 38 <= t.n_samples]
        assert starts == list(range(33))
        signal.crop_window(t, 32 / 2.0, 19.0)
        with pytest.raises(ValueError):
            signal.crop_window(t, 33 / 2.0, 19.0)

    def test_identity(self):
        t = self._trial()
        np.testing.assert_array_equal(signal.crop_window(t, 0.0, 35.0), t.data)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            signal.crop_window(self._trial(), 20.0, 19.0)
        with pytest.raises(ValueError):
            signal.crop_window(self._trial(), -1.0, 5.0)


class TestPreprocess:
    def test_zero(self):
        out = signal.preprocess(hb_trial(np.zeros((48, 504))))
        assert out.stage == Stage.PREPROCESSED and out.fs == 2.0
        assert not out.data.any()

    def test_sample_count(self):
        for n in (504, 441, 883):
            out = signal.preprocess(hb_trial(np.zeros((48, n))))
            assert out.n_samples == int(np.floor((n - 1) * 2 / 12.6 + 1e-9)) + 1

    def test_bump_location(self):
        cfg = SyntheticConfig(n_subjects=1, trials_per_hand=1, noise_sd=0.0, hrf_amplitude_other=0.0)
        trial = next(t for t in generate_synthetic(cfg) if t.hand == Hand.LEFT)
        out = signal.preprocess(trial)
        assert abs(np.argmax(out.data[24]) / out.fs - 5.0) <= 0.5

    def test_raw_od_path(self):
        p = signal.MbllParams()
        rng = np.random.default_rng(0)
        hb = rng.normal(size=(48, 300))
        e = np.asarray(p.extinction)
        path = p.distance * np.asarray(p.dpf)
        od = np.empty_like(hb)
        for c in range(24):
            od[2 * c:2 * c + 2] = (e @ (hb[2 * c:2 * c + 2] / signal.MM_TO_UM)) * path[:, None]
        a = signal.preprocess(hb_trial(od, stage=Stage.RAW_OD), p)
        b = signal.preprocess(hb_trial(hb), p)
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_already_preprocessed(self):
        with pytest.raises(DataError):
            signal.preprocess(hb_trial(np.zeros((48, 100)), fs=2.0, stage=Stage.PREPROCESSED))

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 48, 300))
        for stage in (Stage.HB, Stage.RAW_OD):
            px = signal.preprocess(hb_trial(x, stage=stage)).data
            py = signal.preprocess(hb_trial(y, stage=stage)).data
            pxy = signal.preprocess(hb_trial(a * x + b * y, stage=stage)).data
            scale = 1.0 if stage == Stage.HB else 1e3
            np.testing.assert_allclose(pxy, a * px + b * py, atol=1e-9 * scale)

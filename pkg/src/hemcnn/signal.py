"""Optical density -> haemoglobin -> filtered, detrended, 2 Hz trial windows."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .dataio import DataError, Stage, TrialRecord, check_stage

# Molar extinction coefficients in 1/(mM*cm), decadic, rows = (760 nm, 850 nm),
# columns = (HbO, HbR). Values from the Prahl / Gratzer tabulation.
EXTINCTION_760_850 = ((0.586, 1.54852), (1.058, 0.69132))
DEFAULT_DPF = (6.0, 6.0)
MM_TO_UM = 1e3
FILTER_ORDER = 4


@dataclass(frozen=True)
class MbllParams:
    extinction: tuple = EXTINCTION_760_850
    dpf: tuple = DEFAULT_DPF
    distance: float = 3.0  # cm

    def __post_init__(self):
        e = np.asarray(self.extinction, dtype=np.float64)
        if e.shape != (2, 2):
            raise ValueError("extinction must be a 2x2 matrix [wavelength x chromophore]")
        if not np.isfinite(np.linalg.cond(e)) or np.linalg.cond(e) >= 1e6:
            raise ValueError("extinction matrix is singular or ill-conditioned")
        if len(self.dpf) != 2 or min(self.dpf) <= 0:
            raise ValueError("dpf must hold two positive values")
        if not self.distance > 0:
            raise ValueError("distance must be positive")
        object.__setattr__(self, "extinction", tuple(map(tuple, e.tolist())))
        object.__setattr__(self, "dpf", tuple(float(v) for v in self.dpf))

    def to_dict(self) -> dict:
        return {"extinction": [list(r) for r in self.extinction], "dpf": list(self.dpf), "distance": self.distance}


@dataclass(frozen=True)
class PreprocessConfig:
    lowpass_cutoff: float = 0.25
    detrend_window_s: float = 10.0
    fs_out: float = 2.0
    zscore_epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.lowpass_cutoff < self.fs_out / 2:
            raise ValueError("need 0 < lowpass_cutoff < fs_out / 2")
        if not self.detrend_window_s > 0 or not self.zscore_epsilon > 0:
            raise ValueError("detrend_window_s and zscore_epsilon must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def mbll(od, params: MbllParams = MbllParams()) -> np.ndarray:
    """Modified Beer-Lambert inversion.

    ``od`` is ``[2 wavelengths x n]`` optical-density change; returns
    ``[2 chromophores x n]`` (HbO, HbR) concentration change in mM, solving
    ``dOD_w = sum_c E[w, c] * dc_c * distance * DPF_w`` per sample.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 2 or od.shape[0] != 2:
        raise ValueError(f"od must have shape (2, n), got {od.shape}")
    if not np.all(np.isfinite(od)):
        raise ValueError("od contains non-finite values")
    e = np.asarray(params.extinction)
    path = params.distance * np.asarray(params.dpf)
    return np.linalg.solve(e, od / path[:, None])


def _butter_sos(fs: float, cutoff: float):
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, fs/2 = {fs / 2}) Hz")
    return butter(FILTER_ORDER, cutoff, btype="low", fs=fs, output="sos")


def lowpass(x, fs: float, cutoff: float = 0.25) -> np.ndarray:
    """Zero-phase 4th-order Butterworth low-pass along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 3 * FILTER_ORDER:
        raise ValueError(f"series too short for filtering: {n} < {3 * FILTER_ORDER} samples")
    sos = _butter_sos(fs, cutoff)
    padlen = min(3 * (2 * len(sos) + 1), n - 1)
    return sosfiltfilt(sos, x, axis=-1, padlen=padlen)


def _window_bounds(n: int, w: int) -> list[tuple[int, int]]:
    bounds = [(s, min(s + w, n)) for s in range(0, n, w)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        # a 1-sample tail has no line to fit; fold it into the previous window
        (a, _), (_, b) = bounds[-2], bounds[-1]
        bounds[-2:] = [(a, b)]
    return bounds


def detrend(x, fs: float, window_s: float = 10.0) -> np.ndarray:
    """Remove a least-squares line from each consecutive ``window_s`` block."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("series shorter than 2 samples")
    w = max(2, int(round(window_s * fs)))
    out = np.empty_like(x)
    for a, b in _window_bounds(n, w):
        seg = x[..., a:b]
        t = np.arange(b - a, dtype=np.float64)
        tc = t - t.mean()
        mean = seg.mean(axis=-1, keepdims=True)
        slope = ((seg - mean) * tc).sum(axis=-1, keepdims=True) / (tc @ tc)
        out[..., a:b] = seg - mean - slope * tc
    return out


def resampled_length(n: int, fs_in: float, fs_out: float) -> int:
    return int(math.floor((n - 1) * fs_out / fs_in + 1e-9)) + 1


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Linear interpolation onto the grid ``k / fs_out``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("empty input")
    if not fs_in > fs_out > 0:
        raise ValueError(f"need fs_in > fs_out > 0, got {fs_in} -> {fs_out}")
    t_in = np.arange(n) / fs_in
    t_out = np.arange(resampled_length(n, fs_in, fs_out)) / fs_out
    t_out = np.minimum(t_out, t_in[-1])
    flat = x.reshape(-1, n)
    out = np.stack([np.interp(t_out, t_in, row) for row in flat])
    return out.reshape(x.shape[:-1] + (t_out.size,))


def zscore_matrix(x, epsilon: float = 1e-8, paired: bool = True) -> np.ndarray:
    """Z-score rows jointly per Hb type.

    With ``paired`` rows alternate HbO/HbR and each type gets one mean/sd pair
    over all of its rows; otherwise the whole matrix shares one pair. Works
    on a leading batch axis too.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    groups = (slice(0, None, 2), slice(1, None, 2)) if paired else (slice(None),)
    for g in groups:
        block = x[..., g, :]
        mean = block.mean(axis=(-2, -1), keepdims=True)
        sd = block.std(axis=(-2, -1), keepdims=True)
        out[..., g, :] = (block - mean) / (sd + epsilon)
    return out


def zscore_trial(trial: TrialRecord, epsilon: float = 1e-8) -> TrialRecord:
    check_stage(trial, Stage.HB, Stage.PREPROCESSED)
    return trial.with_data(zscore_matrix(trial.data, epsilon))


def crop_window(trial: TrialRecord, start_s: float, len_s: float) -> np.ndarray:
    start = int(round(start_s * trial.fs))
    width = int(round(len_s * trial.fs))
    if start_s < 0 or width < 1 or start + width > trial.n_samples:
        raise ValueError(
            f"window {start_s}s + {len_s}s outside trial {trial.trial_id} ({trial.duration:.3f}s)"
        )
    return trial.data[:, start:start + width]


def od_to_hb(od_rows, params: MbllParams = MbllParams()) -> np.ndarray:
    """Convert ``[2*n_channels x n]`` OD rows (wl1, wl2 per channel) to HbO/HbR rows in uM."""
    od_rows = np.asarray(od_rows, dtype=np.float64)
    out = np.empty_like(od_rows)
    for c in range(od_rows.shape[0] // 2):
        out[2 * c:2 * c + 2] = mbll(od_rows[2 * c:2 * c + 2], params) * MM_TO_UM
    return out


def preprocess_matrix(data, fs: float, stage: Stage, mbll_params: MbllParams = MbllParams(),
                      cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    if stage == Stage.PREPROCESSED:
        raise DataError("data is already preprocessed")
    if not cfg.lowpass_cutoff < fs / 2 or not cfg.fs_out <= fs:
        raise ValueError(f"native rate {fs} Hz incompatible with cutoff {cfg.lowpass_cutoff} Hz / fs_out {cfg.fs_out} Hz")
    x = od_to_hb(data, mbll_params) if stage == Stage.RAW_OD else np.asarray(data, dtype=np.float64)
    x = lowpass(x, fs, cfg.lowpass_cutoff)
    x = detrend(x, fs, cfg.detrend_window_s)
    if cfg.fs_out < fs:
        x = resample(x, fs, cfg.fs_out)
    return x


def preprocess(trial_raw: TrialRecord, mbll_params: MbllParams = MbllParams(),
               cfg: PreprocessConfig = PreprocessConfig()) -> TrialRecord:
    """Per-trial chain: (MBLL) -> low-pass -> detrend -> resample."""
    check_stage(trial_raw, Stage.RAW_OD, Stage.HB)
    out = preprocess_matrix(trial_raw.data, trial_raw.fs, trial_raw.stage, mbll_params, cfg)
    return trial_raw.with_data(out, fs=cfg.fs_out, stage=Stage.PREPROCESSED)

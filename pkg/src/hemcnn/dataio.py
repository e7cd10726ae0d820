"""Trial records, channel layout, file ingestion and the synthetic generator."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .hrf import HrfParams, canonical_hrf


class Hand(enum.IntEnum):
    """Output index convention: 0 = left hand, 1 = right hand."""

    LEFT = 0
    RIGHT = 1

    @classmethod
    def parse(cls, value) -> "Hand":
        if isinstance(value, Hand):
            return value
        key = str(value).strip().lower()
        if key in ("left", "l", "0"):
            return cls.LEFT
        if key in ("right", "r", "1"):
            return cls.RIGHT
        raise ValueError(f"unknown hand label {value!r}")

    @property
    def label(self) -> str:
        return self.name.lower()


class Hemisphere(enum.IntEnum):
    LEFT = 0
    RIGHT = 1


class Stage(str, enum.Enum):
    RAW_OD = "RawOD"
    HB = "Hb"
    PREPROCESSED = "Preprocessed"


class DataError(ValueError):
    """Malformed, missing or inconsistent input data."""


@dataclass(frozen=True)
class ChannelLayout:
    """Row ordering of a trial matrix.

    Optode channel ``c`` occupies rows ``2c`` (HbO) and ``2c + 1`` (HbR).
    Channels ``0 .. n/2-1`` sit over the left hemisphere, so the upper half of
    the rows is left and the lower half right. ``symmetric_pairs`` matches
    every left channel to its mirror channel on the right.
    """

    n_optode_channels: int = 24
    symmetric_pairs: tuple[tuple[int, int], ...] = tuple((i, i + 12) for i in range(12))
    name: str = "hygrip-24"

    def __post_init__(self):
        n = self.n_optode_channels
        if n < 2 or n % 2:
            raise ValueError("n_optode_channels must be a positive even number")
        pairs = tuple((int(a), int(b)) for a, b in self.symmetric_pairs)
        object.__setattr__(self, "symmetric_pairs", pairs)
        half = n // 2
        lefts = sorted(a for a, _ in pairs)
        rights = sorted(b for _, b in pairs)
        if lefts != list(range(half)) or rights != list(range(half, n)):
            raise ValueError("symmetric_pairs must be a perfect matching of left channels onto right channels")

    @property
    def hb_per_channel(self) -> int:
        return 2

    @property
    def n_rows(self) -> int:
        return 2 * self.n_optode_channels

    @property
    def channels_per_hemisphere(self) -> int:
        return self.n_optode_channels // 2

    def hemisphere_of_channel(self, channel: int) -> Hemisphere:
        if not 0 <= channel < self.n_optode_channels:
            raise IndexError(channel)
        return Hemisphere.LEFT if channel < self.channels_per_hemisphere else Hemisphere.RIGHT

    @property
    def row_order(self) -> list[tuple[int, str]]:
        return [(c, hb) for c in range(self.n_optode_channels) for hb in ("hbo", "hbr")]

    def hemisphere_rows(self, hemisphere: Hemisphere) -> slice:
        half = self.n_rows // 2
        return slice(0, half) if hemisphere == Hemisphere.LEFT else slice(half, self.n_rows)

    def row_names(self, stage: Stage = Stage.HB) -> list[str]:
        if stage == Stage.RAW_OD:
            return [f"ch{c + 1:02d}_{wl}" for c in range(self.n_optode_channels) for wl in ("wl1", "wl2")]
        return [f"ch{c + 1:02d}_{hb}" for c, hb in self.row_order]

    def mirror_rows(self) -> np.ndarray:
        """Row permutation that swaps every channel with its symmetric partner."""
        perm = np.arange(self.n_rows)
        for a, b in self.symmetric_pairs:
            for k in range(2):
                perm[2 * a + k], perm[2 * b + k] = 2 * b + k, 2 * a + k
        return perm

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_optode_channels": self.n_optode_channels,
            "symmetric_pairs": [list(p) for p in self.symmetric_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelLayout":
        unknown = set(d) - {"name", "n_optode_channels", "symmetric_pairs"}
        if unknown:
            raise DataError(f"unknown layout keys: {sorted(unknown)}")
        kwargs = {}
        if "name" in d:
            kwargs["name"] = str(d["name"])
        if "n_optode_channels" in d:
            kwargs["n_optode_channels"] = int(d["n_optode_channels"])
        if "symmetric_pairs" in d:
            kwargs["symmetric_pairs"] = tuple(tuple(p) for p in d["symmetric_pairs"])
        elif "n_optode_channels" in d:
            half = kwargs["n_optode_channels"] // 2
            kwargs["symmetric_pairs"] = tuple((i, i + half) for i in range(half))
        return cls(**kwargs)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DEFAULT_LAYOUT = ChannelLayout()


@dataclass(frozen=True, eq=False)
class TrialRecord:
    subject_id: str
    trial_id: str
    hand: Hand
    fs: float
    data: np.ndarray
    stage: Stage = Stage.HB

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DataError(f"trial {self.trial_id}: data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"trial {self.trial_id}: non-finite sample")
        if not self.fs > 0:
            raise DataError(f"trial {self.trial_id}: fs must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "hand", Hand.parse(self.hand))
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.fs

    def with_data(self, data: np.ndarray, **changes) -> "TrialRecord":
        return replace(self, data=data, **changes)

    def __eq__(self, other):
        if not isinstance(other, TrialRecord):
            return NotImplemented
        return (
            (self.subject_id, self.trial_id, self.hand, self.fs, self.stage)
            == (other.subject_id, other.trial_id, other.hand, other.fs, other.stage)
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


def check_stage(trial: TrialRecord, *allowed: Stage) -> None:
    if trial.stage not in allowed:
        names = ", ".join(s.value for s in allowed)
        raise DataError(f"trial {trial.trial_id}: stage {trial.stage.value} not accepted here (expected {names})")


@dataclass(frozen=True)
class Dataset:
    """Trials grouped by subject, in a fixed subject order."""

    subjects: dict
    layout: ChannelLayout = DEFAULT_LAYOUT
    fs_native: float | None = None

    def __post_init__(self):
        subjects = {str(k): tuple(v) for k, v in self.subjects.items()}
        object.__setattr__(self, "subjects", subjects)
        for trials in subjects.values():
            for t in trials:
                validate_trial(t, self.layout)

    @property
    def subject_ids(self) -> list[str]:
        return list(self.subjects)

    @property
    def trials(self) -> list[TrialRecord]:
        return [t for ts in self.subjects.values() for t in ts]

    def __len__(self) -> int:
        return sum(len(ts) for ts in self.subjects.values())

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.trials)

    @property
    def stage(self) -> Stage | None:
        stages = {t.stage for t in self.trials}
        if len(stages) > 1:
            raise DataError(f"dataset mixes stages {sorted(s.value for s in stages)}")
        return stages.pop() if stages else None

    def map_trials(self, fn) -> "Dataset":
        return Dataset({s: [fn(t) for t in ts] for s, ts in self.subjects.items()}, self.layout, self.fs_native)


def validate_trial(trial: TrialRecord, layout: ChannelLayout, source: str | None = None) -> None:
    if trial.n_rows != layout.n_rows:
        where = f" ({source})" if source else ""
        raise DataError(
            f"trial {trial.trial_id}{where}: {trial.n_rows} rows, layout {layout.name} expects {layout.n_rows}"
        )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Lateralised gamma responses plus white noise and linear drift.

    ``trial_len_s`` is the length of each trial record, whose response starts
    at t=0 (go-cue). Trials are ``block_s`` long and followed by a rest drawn
    from ``rest_range_s``; that session clock is what the drift runs on.
    ``gain_range`` multiplies each trial's response by a U(min, max) gain.
    """

    n_subjects: int = 12
    trials_per_hand: int = 10
    fs: float = 12.6
    trial_len_s: float = 40.0
    rest_range_s: tuple[float, float] = (15.0, 21.0)
    hrf_amplitude_active: float = 1.0
    hrf_amplitude_other: float = 0.2
    laterality: str = "Contra"
    noise_sd: float = 0.5
    drift_slope_sd: float = 0.0
    gain_range: tuple[float, float] = (1.0, 1.0)
    block_s: float = 21.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_hand < 1:
            raise ValueError("n_subjects and trials_per_hand must be >= 1")
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        if self.trial_len_s < 21:
            raise ValueError("trial_len_s must be >= 21")
        lo, hi = self.rest_range_s
        if not 0 <= lo <= hi:
            raise ValueError("rest_range_s must satisfy 0 <= min <= max")
        if self.hrf_amplitude_active < 0 or self.hrf_amplitude_other < 0:
            raise ValueError("amplitudes must be >= 0")
        if self.noise_sd < 0 or self.drift_slope_sd < 0:
            raise ValueError("noise_sd and drift_slope_sd must be >= 0")
        if self.laterality not in ("Contra", "Ipsi"):
            raise ValueError(f"laterality must be 'Contra' or 'Ipsi', got {self.laterality!r}")
        g0, g1 = self.gain_range
        if not 0 < g0 <= g1:
            raise ValueError("gain_range must satisfy 0 < min <= max")
        object.__setattr__(self, "rest_range_s", (float(lo), float(hi)))
        object.__setattr__(self, "gain_range", (float(g0), float(g1)))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synthetic config field(s): {', '.join(sorted(unknown))}")
        kwargs = dict(d)
        for key in ("rest_range_s", "gain_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def active_hemisphere(hand: Hand, laterality: str) -> Hemisphere:
    contra = Hemisphere.RIGHT if hand == Hand.LEFT else Hemisphere.LEFT
    return contra if laterality == "Contra" else Hemisphere(1 - contra)


def synthetic_response(fs: float, n_samples: int, p: HrfParams = HrfParams()) -> np.ndarray:
    """Canonical gamma HRF from the go-cue, scaled to unit peak, sampled at ``k / fs``."""
    return canonical_hrf(np.arange(n_samples) / fs, p) / canonical_hrf(p.peak_time, p)


def generate_synthetic(config: SyntheticConfig, layout: ChannelLayout = DEFAULT_LAYOUT) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n = int(round(config.trial_len_s * config.fs))
    response = synthetic_response(config.fs, n)
    half = layout.n_rows // 2
    hbo_rows = np.arange(0, layout.n_rows, 2)
    t_local = np.arange(n) / config.fs

    subjects = {}
    for s in range(config.n_subjects):
        sid = f"S{s + 1:02d}"
        hands = np.array([Hand.LEFT] * config.trials_per_hand + [Hand.RIGHT] * config.trials_per_hand)
        order = rng.permutation(hands.size)
        slopes = rng.normal(0.0, config.drift_slope_sd, size=layout.n_rows) if config.drift_slope_sd else None
        onset = 0.0
        trials = []
        for k, idx in enumerate(order):
            hand = Hand(int(hands[idx]))
            active = active_hemisphere(hand, config.laterality)
            amp = np.empty(layout.n_rows)
            amp[:half] = config.hrf_amplitude_active if active == Hemisphere.LEFT else config.hrf_amplitude_other
            amp[half:] = config.hrf_amplitude_active if active == Hemisphere.RIGHT else config.hrf_amplitude_other
            # HbR mirrors HbO at a third of the amplitude, opposite sign
            hb_scale = np.where(np.isin(np.arange(layout.n_rows), hbo_rows), 1.0, -1.0 / 3.0)
            gain = rng.uniform(*config.gain_range) if config.gain_range[0] != config.gain_range[1] else config.gain_range[0]
            data = gain * (amp * hb_scale)[:, None] * response[None, :]
            if config.noise_sd:
                data = data + rng.normal(0.0, config.noise_sd, size=data.shape)
            if slopes is not None:
                data = data + slopes[:, None] * (onset + t_local)[None, :]
            trials.append(TrialRecord(sid, f"{sid}_T{k + 1:02d}", hand, config.fs, data, Stage.HB))
            onset += config.block_s + rng.uniform(*config.rest_range_s)
        subjects[sid] = trials
    return Dataset(subjects, layout, config.fs)


# ---------------------------------------------------------------------------
# files

_META_KEYS = ("subject_id", "trial_id", "hand", "fs", "stage")


def export_trial_csv(trial: TrialRecord, path, layout: ChannelLayout = DEFAULT_LAYOUT) -> None:
    """One trial per CSV: ``# key: value`` metadata lines, a header, then one row per sample."""
    validate_trial(trial, layout)
    names = layout.row_names(trial.stage)
    lines = [
        f"# subject_id: {trial.subject_id}",
        f"# trial_id: {trial.trial_id}",
        f"# hand: {trial.hand.label}",
        f"# fs: {trial.fs!r}",
        f"# stage: {trial.stage.value}",
        ",".join(["t"] + names),
    ]
    fmt = "{:.17g}".format
    for k in range(trial.n_samples):
        lines.append(",".join([fmt(k / trial.fs)] + [fmt(v) for v in trial.data[:, k]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_trial_csv(path, layout: ChannelLayout | None = None) -> TrialRecord:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read trial file ({exc.strerror})") from exc
    meta = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, sep, value = lines[i][1:].partition(":")
        if not sep:
            raise DataError(f"{path}: malformed metadata line {lines[i]!r}")
        meta[key.strip()] = value.strip()
        i += 1
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise DataError(f"{path}: header missing metadata {', '.join(missing)}")
    if i >= len(lines) or not lines[i].startswith("t,"):
        raise DataError(f"{path}: missing column header")
    header = lines[i].split(",")
    rows = [ln for ln in lines[i + 1:] if ln.strip()]
    try:
        table = np.array([[float(v) for v in ln.split(",")] for ln in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: unparseable sample ({exc})") from exc
    if table.size == 0:
        raise DataError(f"{path}: no samples")
    if table.ndim != 2 or table.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows, header has {len(header)} columns")
    try:
        hand = Hand.parse(meta["hand"])
        stage = Stage(meta["stage"])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    trial = TrialRecord(meta["subject_id"], meta["trial_id"], hand, float(meta["fs"]), table[:, 1:].T, stage)
    if layout is not None:
        validate_trial(trial, layout, str(path))
        if header[1:] != layout.row_names(stage):
            raise DataError(f"{path}: column names do not follow layout {layout.name}")
    return trial


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, trials in dataset.subjects.items():
        items = []
        for t in trials:
            fname = f"{t.trial_id}.csv"
            export_trial_csv(t, out_dir / fname, dataset.layout)
            items.append({"file": fname, "hand": t.hand.label})
        entries.append({"id": sid, "trials": items})
    manifest = {
        "subjects": entries,
        "fs_native": dataset.fs_native,
        "stage": dataset.stage.value if len(dataset) else None,
        "layout": dataset.layout.to_dict(),
    }
    path = out_dir / manifest_name
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc.msg})") from exc
    layout = ChannelLayout.from_dict(manifest.get("layout") or {})
    entries = manifest.get("subjects") or []
    if not entries:
        raise DataError(f"{manifest_path}: empty dataset (no subjects)")
    declared = Stage(manifest["stage"]) if manifest.get("stage") else None
    root = manifest_path.parent
    missing = [str(root / tr["file"]) for e in entries for tr in e.get("trials", []) if not (root / tr["file"]).is_file()]
    if missing:
        raise DataError(f"missing trial file(s): {', '.join(missing)}")
    subjects = {}
    for entry in entries:
        sid = str(entry["id"])
        trials = []
        for tr in entry.get("trials", []):
            fpath = root / tr["file"]
            trial = import_trial_csv(fpath, layout)
            try:
                label = Hand.parse(tr["hand"])
            except ValueError as exc:
                raise DataError(f"{fpath}: {exc}") from exc
            if label != trial.hand:
                raise DataError(f"{fpath}: manifest says {label.label}, file says {trial.hand.label}")
            if declared is not None and trial.stage != declared:
                raise DataError(f"{fpath}: stage {trial.stage.value}, manifest declares {declared.value}")
            trials.append(trial)
        subjects[sid] = trials
    return Dataset(subjects, layout, manifest.get("fs_native"))

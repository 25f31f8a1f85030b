"""EEG trial ingestion, preprocessing, windowing, patient folds and synthetic data."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import (
    DataError,
    InfeasibleFoldError,
    MissingFileError,
    ShapeMismatchError,
    UnknownLabelError,
    UnsupportedRateError,
    VersionMismatchError,
)

FORMAT_VERSION = 1
TARGET_RATE = 128.0
EEGT_MAGIC = b"EEGT"
EEGT_VERSION = 1

# Synthetic class codes: narrowband ranges in Hz. Gamma is split in two so six
# distinct codes exist inside 0-64 Hz.
SYNTH_BAND_CODES: tuple[tuple[str, float, float], ...] = (
    ("delta", 0.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 16.0),
    ("beta", 16.0, 32.0),
    ("gamma_low", 32.0, 48.0),
    ("gamma_high", 48.0, 64.0),
)


@dataclass(frozen=True)
class ClassSpec:
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise DataError("class spec needs at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError(f"duplicate class names in {list(self.class_names)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class EegTrial:
    patient_id: str
    label: int
    sample_rate_hz: float
    samples: np.ndarray  # (C, L_total)
    channel_names: list[str] = field(default_factory=list)
    trial_id: str = ""

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.samples.shape[0])]
        if self.samples.shape[1] < 1:
            raise ShapeMismatchError(f"trial {self.trial_id!r} has no samples")
        if self.sample_rate_hz <= 0:
            raise DataError(f"trial {self.trial_id!r}: sample rate must be positive")
        if len(self.channel_names) != self.samples.shape[0]:
            raise ShapeMismatchError(
                f"trial {self.trial_id!r}: {len(self.channel_names)} channel names "
                f"for {self.samples.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"trial {self.trial_id!r} contains non-finite samples")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class EegWindow:
    patient_id: str
    label: int
    sample_rate_hz: float
    samples: np.ndarray  # (C, L)
    parent_trial_id: str
    offset_samples: int
    channel_names: list[str] = field(default_factory=list)

    @property
    def window_id(self) -> str:
        return f"{self.parent_trial_id}@{self.offset_samples}"


@dataclass
class TrialEntry:
    path: str
    patient_id: str
    label: int
    sample_rate_hz: float


@dataclass
class DatasetManifest:
    trials: list[TrialEntry]
    class_spec: ClassSpec
    format_version: int = FORMAT_VERSION
    channels: int | None = None
    root: Path | None = None

    @property
    def patients(self) -> list[str]:
        return sorted({t.patient_id for t in self.trials})

    def to_json(self) -> dict:
        doc = {
            "format_version": self.format_version,
            "classes": list(self.class_spec.class_names),
            "trials": [
                {"path": t.path, "patient": t.patient_id, "label": t.label, "rate_hz": t.sample_rate_hz}
                for t in self.trials
            ],
        }
        if self.channels is not None:
            doc["channels"] = self.channels
        return doc


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]
    seed: int

    def patients_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignments.items() if f == fold)


# ---------------------------------------------------------------- file formats


def write_eegt(path: str | Path, samples: np.ndarray) -> None:
    """Write a C x L matrix in the binary trial layout (little-endian float32)."""
    arr = np.ascontiguousarray(np.atleast_2d(samples), dtype="<f4")
    c, n = arr.shape
    with open(path, "wb") as fh:
        fh.write(EEGT_MAGIC)
        fh.write(struct.pack("<IIQ", EEGT_VERSION, c, n))
        fh.write(arr.tobytes(order="C"))


def read_eegt(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing trial file {path}")
    raw = path.read_bytes()
    if raw[:4] != EEGT_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, c, n = struct.unpack_from("<IIQ", raw, 4)
    if version != EEGT_VERSION:
        raise VersionMismatchError(f"{path}: binary version {version} unsupported")
    body = raw[20:]
    if len(body) != 4 * c * n:
        raise ShapeMismatchError(f"{path}: header says {c}x{n} but holds {len(body) // 4} values")
    return np.frombuffer(body, dtype="<f4").reshape(c, n).astype(np.float64)


def write_trial_csv(path: str | Path, samples: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(samples), delimiter=",", fmt="%.9g")


def read_trial_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing trial file {path}")
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ShapeMismatchError(f"{path}: ragged or unparsable CSV ({exc})") from exc
    return arr


def read_trial_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_trial_csv(path)
    return read_eegt(path)


# ---------------------------------------------------------------- manifests


def _resolve_label(raw, class_spec: ClassSpec, where: str) -> int:
    if isinstance(raw, str):
        if raw in class_spec.class_names:
            return class_spec.class_names.index(raw)
        raise UnknownLabelError(f"{where}: unknown label {raw!r}")
    if isinstance(raw, bool) or not isinstance(raw, int) or not 0 <= raw < class_spec.num_classes:
        raise UnknownLabelError(f"{where}: label {raw!r} outside [0, {class_spec.num_classes})")
    return raw


def read_manifest(manifest_path: str | Path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFileError(f"missing manifest {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{manifest_path}: format_version {version!r} unsupported (want {FORMAT_VERSION})")
    try:
        class_spec = ClassSpec(tuple(doc["classes"]))
    except KeyError as exc:
        raise DataError(f"{manifest_path}: missing 'classes'") from exc
    entries = []
    for i, t in enumerate(doc.get("trials", [])):
        where = f"{manifest_path}: trial[{i}] ({t.get('path')})"
        patient = str(t.get("patient", ""))
        if not patient:
            raise DataError(f"{where}: empty patient id")
        entries.append(
            TrialEntry(
                path=t["path"],
                patient_id=patient,
                label=_resolve_label(t.get("label"), class_spec, where),
                sample_rate_hz=float(t["rate_hz"]),
            )
        )
    return DatasetManifest(entries, class_spec, version, doc.get("channels"), manifest_path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2))


def load_dataset(manifest_path: str | Path) -> tuple[DatasetManifest, list[EegTrial]]:
    """Load a manifest and every trial it references.

    All trials must share one channel count; if the manifest declares
    ``channels`` every file must match it.
    """
    manifest = read_manifest(manifest_path)
    trials: list[EegTrial] = []
    expected = manifest.channels
    for i, entry in enumerate(manifest.trials):
        file_path = Path(entry.path)
        if not file_path.is_absolute():
            file_path = manifest.root / file_path
        samples = read_trial_file(file_path)
        if expected is None:
            expected = samples.shape[0]
        if samples.shape[0] != expected:
            raise ShapeMismatchError(
                f"trial[{i}] ({entry.path}): {samples.shape[0]} channels on disk, expected {expected}"
            )
        trials.append(
            EegTrial(
                patient_id=entry.patient_id,
                label=entry.label,
                sample_rate_hz=entry.sample_rate_hz,
                samples=samples,
                trial_id=f"{entry.patient_id}/{Path(entry.path).stem}",
            )
        )
    manifest.channels = expected
    return manifest, trials


# ---------------------------------------------------------------- preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate_hz: float = TARGET_RATE
    notch_hz: float = 50.0
    notch_quality: float = 30.0
    lowpass_hz: float = 64.0
    lowpass_order: int = 8
    detrend: bool = True


def _resample(x: np.ndarray, rate: float, target: float) -> np.ndarray:
    if rate == target:
        return x
    ratio = Fraction(target / rate).limit_denominator(1000)
    if ratio.numerator == 1:
        # integral ratio: anti-alias already applied, plain decimation
        return x[:, :: ratio.denominator]
    return signal.resample_poly(x, ratio.numerator, ratio.denominator, axis=1)


def preprocess_trial(trial: EegTrial, cfg: PreprocessConfig = PreprocessConfig()) -> EegTrial:
    """Resample to 128 Hz, notch at 50 Hz, low-pass at 64 Hz, linear detrend.

    The 64 Hz low-pass runs at the source rate ahead of resampling so it also
    acts as the anti-aliasing filter; at a native 128 Hz it coincides with
    Nyquist and there is nothing to remove.
    """
    rate = trial.sample_rate_hz
    if rate < cfg.target_rate_hz:
        raise UnsupportedRateError(f"trial {trial.trial_id!r}: rate {rate} Hz below {cfg.target_rate_hz} Hz")
    x = np.asarray(trial.samples, dtype=np.float64)
    if rate > cfg.target_rate_hz and cfg.lowpass_hz < rate / 2:
        sos = signal.butter(cfg.lowpass_order, cfg.lowpass_hz, btype="low", fs=rate, output="sos")
        x = signal.sosfiltfilt(sos, x, axis=1)
    x = _resample(x, rate, cfg.target_rate_hz)
    out_rate = cfg.target_rate_hz
    if cfg.notch_hz and cfg.notch_hz < out_rate / 2:
        b, a = signal.iirnotch(cfg.notch_hz, cfg.notch_quality, fs=out_rate)
        if x.shape[1] > 3 * max(len(a), len(b)):
            x = signal.filtfilt(b, a, x, axis=1)
    if cfg.detrend:
        x = signal.detrend(x, axis=1, type="linear")
    return replace(trial, samples=x, sample_rate_hz=out_rate, channel_names=list(trial.channel_names))


# ---------------------------------------------------------------- windowing


def segment(trial: EegTrial, window_seconds: float = 4.0, overlap_fraction: float = 0.5) -> list[EegWindow]:
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if trial.sample_rate_hz != TARGET_RATE:
        raise UnsupportedRateError(f"segment expects {TARGET_RATE} Hz input, got {trial.sample_rate_hz}")
    win = int(round(window_seconds * trial.sample_rate_hz))
    step = max(1, int(round(win * (1 - overlap_fraction))))
    if trial.length < win:
        return []
    count = (trial.length - win) // step + 1
    return [
        EegWindow(
            patient_id=trial.patient_id,
            label=trial.label,
            sample_rate_hz=trial.sample_rate_hz,
            samples=trial.samples[:, i * step : i * step + win],
            parent_trial_id=trial.trial_id,
            offset_samples=i * step,
            channel_names=list(trial.channel_names),
        )
        for i in range(count)
    ]


@dataclass
class WindowSet:
    """Stacked windows, the unit the trainer consumes."""

    x: np.ndarray  # (n, C, L)
    labels: np.ndarray  # (n,)
    patients: np.ndarray  # (n,) str
    trial_ids: np.ndarray  # (n,) str
    num_classes: int
    bands: np.ndarray | None = None  # (n, B, C, L)
    band_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask: np.ndarray) -> "WindowSet":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return WindowSet(
            self.x[idx],
            self.labels[idx],
            self.patients[idx],
            self.trial_ids[idx],
            self.num_classes,
            None if self.bands is None else self.bands[idx],
            self.band_names,
        )

    def for_patients(self, patients: Sequence[str]) -> "WindowSet":
        return self.subset(np.isin(self.patients, list(patients)))


def stack_windows(windows: Sequence[EegWindow], num_classes: int) -> WindowSet:
    if not windows:
        raise DataError("no windows to stack (all trials shorter than one window?)")
    return WindowSet(
        x=np.stack([w.samples for w in windows]).astype(np.float32),
        labels=np.array([w.label for w in windows], dtype=np.int64),
        patients=np.array([w.patient_id for w in windows]),
        trial_ids=np.array([w.parent_trial_id for w in windows]),
        num_classes=num_classes,
    )


# ---------------------------------------------------------------- folds


def patient_folds(dataset: DatasetManifest | Sequence[str], k: int = 3, seed: int = 0) -> FoldPlan:
    """Assign patients to ``k`` folds of near-equal size, deterministically per seed."""
    patients = dataset.patients if isinstance(dataset, DatasetManifest) else sorted(set(dataset))
    if k < 1 or len(patients) < k:
        raise InfeasibleFoldError(f"cannot split {len(patients)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    return FoldPlan(k, {patients[j]: i % k for i, j in enumerate(order)}, seed)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    num_patients: int = 6
    trials_per_patient: int = 32
    num_classes: int = 4
    snr_db: float = 10.0
    seed: int = 0
    channels: int = 4
    trial_seconds: float = 4.0
    tones: int = 3
    amplitude_jitter: float = 0.3


def synth_dataset(cfg: SynthConfig = SynthConfig()) -> tuple[DatasetManifest, list[EegTrial]]:
    """Band-coded surrogate corpus: class c carries narrowband power in code band c.

    Tone frequencies sit on a 0.25 Hz grid so every 4 s window holds whole
    cycles and no spectral leakage crosses band edges.
    """
    k = cfg.num_classes
    if k > len(SYNTH_BAND_CODES):
        raise DataError(f"synthetic data supports at most {len(SYNTH_BAND_CODES)} classes, got {k}")
    if k < 2:
        raise DataError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.trial_seconds * TARGET_RATE))
    t = np.arange(n) / TARGET_RATE
    grid = 0.25
    class_spec = ClassSpec(tuple(name for name, _, _ in SYNTH_BAND_CODES[:k]))
    noise_scale = 0.0 if math.isinf(cfg.snr_db) else 10 ** (-cfg.snr_db / 20)

    entries, trials = [], []
    for p in range(cfg.num_patients):
        pid = f"P{p:03d}"
        patient_gain = float(np.exp(cfg.amplitude_jitter * rng.standard_normal()))
        channel_gain = np.exp(cfg.amplitude_jitter * rng.standard_normal(cfg.channels))
        labels = np.arange(cfg.trials_per_patient) % k
        rng.shuffle(labels)
        for j, label in enumerate(labels):
            _, lo, hi = SYNTH_BAND_CODES[label]
            width = hi - lo
            lo_f = max(lo + 0.15 * width, 0.5)
            hi_f = hi - 0.15 * width
            steps = np.arange(math.ceil(lo_f / grid), math.floor(hi_f / grid) + 1) * grid
            freqs = rng.choice(steps, size=cfg.tones)
            phases = rng.uniform(0, 2 * np.pi, size=(cfg.channels, cfg.tones))
            x = np.sin(2 * np.pi * freqs[None, :, None] * t[None, None, :] + phases[:, :, None]).sum(axis=1)
            x /= np.sqrt(np.mean(x**2, axis=1, keepdims=True))  # unit RMS per channel
            x = x + noise_scale * rng.standard_normal(x.shape)
            x *= patient_gain * channel_gain[:, None]
            trial_id = f"{pid}/t{j:03d}"
            trials.append(EegTrial(pid, int(label), TARGET_RATE, x, trial_id=trial_id))
            entries.append(TrialEntry(f"{pid}_t{j:03d}.eegt", pid, int(label), TARGET_RATE))
    return DatasetManifest(entries, class_spec, FORMAT_VERSION, cfg.channels), trials


def save_dataset(manifest: DatasetManifest, trials: Sequence[EegTrial], out_dir: str | Path) -> Path:
    """Write trials as binary files plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry, trial in zip(manifest.trials, trials):
        name = Path(entry.path).with_suffix(".eegt").name
        write_eegt(out_dir / name, trial.samples)
        entries.append(replace(entry, path=name, sample_rate_hz=trial.sample_rate_hz))
    out = DatasetManifest(entries, manifest.class_spec, FORMAT_VERSION, manifest.channels, out_dir)
    path = out_dir / "manifest.json"
    write_manifest(out, path)
    return path

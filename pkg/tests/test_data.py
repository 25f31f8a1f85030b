import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbmd.data import (
    ClassSpec,
    DatasetManifest,
    EegTrial,
    PreprocessConfig,
    SynthConfig,
    TrialEntry,
    load_dataset,
    patient_folds,
    preprocess_trial,
    read_eegt,
    save_dataset,
    segment,
    synth_dataset,
    write_eegt,
    write_manifest,
    write_trial_csv,
)
from mbmd.errors import (
    DataError,
    InfeasibleFoldError,
    MissingFileError,
    ShapeMismatchError,
    UnknownLabelError,
    UnsupportedRateError,
    VersionMismatchError,
)


def _trial(samples, rate=128.0, label=0, pid="p"):
    return EegTrial(pid, label, rate, np.asarray(samples, dtype=float), trial_id=f"{pid}/x")


def _band_energy_fraction(x, rate, lo, hi):
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    f = np.fft.rfftfreq(x.shape[-1], 1 / rate)
    sel = (f >= lo) & (f < hi)
    return spec[..., sel].sum() / spec.sum()


# ---- file formats / manifests


def test_eegt_roundtrip(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 17)).astype(np.float32)
    write_eegt(tmp_path / "a.eegt", x)
    raw = (tmp_path / "a.eegt").read_bytes()
    assert raw[:4] == b"EEGT"
    assert len(raw) == 4 + 4 + 4 + 8 + 3 * 17 * 4
    np.testing.assert_array_equal(read_eegt(tmp_path / "a.eegt"), x)


def _manifest(tmp_path, trials, classes=("ABSZ", "FSZ", "TNSZ", "TCSZ"), **extra):
    doc = {"format_version": 1, "classes": list(classes), "trials": trials, **extra}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_load_counts_per_class(tmp_path):
    counts = {"ABSZ": 81, "FSZ": 87, "TNSZ": 15, "TCSZ": 16}
    write_eegt(tmp_path / "t.eegt", np.zeros((2, 8)))
    entries = [
        {"path": "t.eegt", "patient": f"p{i % 27}", "label": name, "rate_hz": 128}
        for name, n in counts.items()
        for i in range(n)
    ]
    manifest, trials = load_dataset(_manifest(tmp_path, entries))
    got = np.bincount([t.label for t in trials], minlength=4)
    assert got.tolist() == [81, 87, 15, 16]
    assert manifest.class_spec.num_classes == 4


def test_load_empty(tmp_path):
    manifest, trials = load_dataset(_manifest(tmp_path, []))
    assert trials == [] and manifest.trials == []


def test_load_shape_mismatch_declared_channels(tmp_path):
    write_trial_csv(tmp_path / "t.csv", np.zeros((19, 32)))
    path = _manifest(tmp_path, [{"path": "t.csv", "patient": "a", "label": 0, "rate_hz": 128}], channels=20)
    with pytest.raises(ShapeMismatchError, match="t.csv"):
        load_dataset(path)


def test_load_inconsistent_channels(tmp_path):
    write_eegt(tmp_path / "a.eegt", np.zeros((3, 8)))
    write_eegt(tmp_path / "b.eegt", np.zeros((2, 8)))
    entries = [{"path": n, "patient": "a", "label": 0, "rate_hz": 128} for n in ("a.eegt", "b.eegt")]
    with pytest.raises(ShapeMismatchError, match="b.eegt"):
        load_dataset(_manifest(tmp_path, entries))


def test_load_errors_are_distinct(tmp_path):
    write_eegt(tmp_path / "a.eegt", np.zeros((1, 8)))
    with pytest.raises(MissingFileError, match="nope.eegt"):
        load_dataset(_manifest(tmp_path, [{"path": "nope.eegt", "patient": "a", "label": 0, "rate_hz": 128}]))
    with pytest.raises(UnknownLabelError, match="GNSZ"):
        load_dataset(_manifest(tmp_path, [{"path": "a.eegt", "patient": "a", "label": "GNSZ", "rate_hz": 128}]))
    with pytest.raises(UnknownLabelError):
        load_dataset(_manifest(tmp_path, [{"path": "a.eegt", "patient": "a", "label": 7, "rate_hz": 128}]))
    path = tmp_path / "v.json"
    path.write_text(json.dumps({"format_version": 99, "classes": ["a", "b"], "trials": []}))
    with pytest.raises(VersionMismatchError):
        load_dataset(path)
    with pytest.raises(MissingFileError):
        load_dataset(tmp_path / "absent.json")


def test_truncated_binary_is_shape_error(tmp_path):
    write_eegt(tmp_path / "a.eegt", np.zeros((2, 8)))
    raw = (tmp_path / "a.eegt").read_bytes()
    (tmp_path / "a.eegt").write_bytes(raw[:-4])
    with pytest.raises(ShapeMismatchError):
        read_eegt(tmp_path / "a.eegt")


def test_class_spec_invariants():
    with pytest.raises(DataError):
        ClassSpec(("a",))
    with pytest.raises(DataError):
        ClassSpec(("a", "a"))


# ---- preprocessing


def test_detrend_removes_constant():
    out = preprocess_trial(_trial(np.full((2, 512), 5.0)))
    np.testing.assert_allclose(out.samples, 0.0, atol=1e-9)


def test_notch_rejects_50hz():
    t = np.arange(1280) / 128.0
    x = np.sin(2 * np.pi * 50 * t)[None, :]
    out = preprocess_trial(_trial(x)).samples
    # spectral oracle: energy at the 50 Hz bin before/after
    bin50 = int(round(50 * x.shape[1] / 128))
    before = np.abs(np.fft.rfft(x[0]))[bin50] ** 2
    after = np.abs(np.fft.rfft(out[0]))[bin50] ** 2
    assert after <= 0.01 * before
    assert np.sum(out**2) <= 0.01 * np.sum(x**2)


def test_decimation_256_to_128():
    x = np.random.default_rng(1).standard_normal((3, 1024))
    out = preprocess_trial(_trial(x, rate=256.0))
    assert out.sample_rate_hz == 128.0
    assert out.samples.shape == (3, 512)


def test_rational_resample_length():
    out = preprocess_trial(_trial(np.random.default_rng(2).standard_normal((1, 2000)), rate=200.0))
    assert out.samples.shape == (1, 1280)


def test_lowpass_at_source_rate_removes_high_band():
    t = np.arange(2560) / 256.0
    x = np.sin(2 * np.pi * 10 * t) + np.sin(2 * np.pi * 100 * t)
    out = preprocess_trial(_trial(x[None, :], rate=256.0)).samples[0]
    # 100 Hz folds to 28 Hz after decimation if not removed first
    assert _band_energy_fraction(out, 128.0, 26, 30) < 1e-3


def test_rejects_low_rate():
    with pytest.raises(UnsupportedRateError):
        preprocess_trial(_trial(np.zeros((1, 100)), rate=100.0))


def test_preprocess_idempotent_on_bandlimited():
    rng = np.random.default_rng(3)
    t = np.arange(1024) / 128.0
    x = np.stack([np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (3.0, 11.0, 23.0)])
    once = preprocess_trial(_trial(x))
    twice = preprocess_trial(once)
    rms1 = np.sqrt(np.mean(once.samples**2, axis=1))
    rms2 = np.sqrt(np.mean(twice.samples**2, axis=1))
    assert np.all(np.abs(rms2 - rms1) / rms1 < 0.05)


def test_channel_count_unchanged():
    out = preprocess_trial(_trial(np.random.default_rng(4).standard_normal((7, 600))), PreprocessConfig())
    assert out.samples.shape[0] == 7


# ---- segmentation


def test_segment_offsets():
    wins = segment(_trial(np.zeros((2, 1280))))
    assert [w.offset_samples for w in wins] == [0, 256, 512, 768]
    assert all(w.samples.shape == (2, 512) for w in wins)
    assert (1280 - 512) // 256 + 1 == len(wins)


def test_segment_exact_and_short():
    assert [w.offset_samples for w in segment(_trial(np.zeros((1, 512))))] == [0]
    assert segment(_trial(np.zeros((1, 511)))) == []


@settings(max_examples=50, deadline=None)
@given(length=st.integers(512, 4000), label=st.integers(0, 3))
def test_segment_coverage_and_labels(length, label):
    trial = _trial(np.zeros((1, length)), label=label, pid="q")
    wins = segment(trial)
    covered = np.zeros(length, dtype=bool)
    for w in wins:
        assert w.label == label and w.patient_id == "q"
        assert w.offset_samples + 512 <= length
        covered[w.offset_samples : w.offset_samples + 512] = True
    assert (~covered).sum() < 256


# ---- folds


def _manifest_with_patients(n):
    return DatasetManifest([TrialEntry("x", f"p{i:02d}", 0, 128.0) for i in range(n)], ClassSpec(("a", "b")))


def test_folds_27_patients():
    plan = patient_folds(_manifest_with_patients(27), 3, seed=0)
    assert sorted(np.bincount(list(plan.assignments.values()))) == [9, 9, 9]


def test_folds_k1_and_determinism():
    m = _manifest_with_patients(5)
    assert set(patient_folds(m, 1, 0).assignments.values()) == {0}
    assert patient_folds(m, 3, 7).assignments == patient_folds(m, 3, 7).assignments


def test_folds_infeasible():
    with pytest.raises(InfeasibleFoldError):
        patient_folds(_manifest_with_patients(2), 3, 0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_fold_partition(n, k, seed):
    if n < k:
        return
    plan = patient_folds(_manifest_with_patients(n), k, seed)
    assert set(plan.assignments) == {f"p{i:02d}" for i in range(n)}
    sizes = np.bincount(list(plan.assignments.values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1
    folds = [set(plan.patients_in(f)) for f in range(k)]
    assert sum(len(f) for f in folds) == n


# ---- synthetic data


def test_synth_counts():
    manifest, trials = synth_dataset(SynthConfig(num_patients=6, trials_per_patient=8, num_classes=4))
    assert len(trials) == 48
    assert np.bincount([t.label for t in trials]).tolist() == [12, 12, 12, 12]
    assert manifest.class_spec.num_classes == 4


def test_synth_deterministic():
    _, a = synth_dataset(SynthConfig(num_patients=2, trials_per_patient=4, seed=5))
    _, b = synth_dataset(SynthConfig(num_patients=2, trials_per_patient=4, seed=5))
    for ta, tb in zip(a, b):
        assert ta.samples.tobytes() == tb.samples.tobytes()


def test_synth_noiseless_class0_in_delta():
    _, trials = synth_dataset(SynthConfig(num_patients=2, trials_per_patient=8, snr_db=float("inf")))
    for t in trials:
        if t.label == 0:
            for w in segment(t):
                assert _band_energy_fraction(w.samples, 128.0, 0, 4) >= 0.99


def test_synth_rejects_too_many_classes():
    with pytest.raises(DataError):
        synth_dataset(SynthConfig(num_classes=7))


def test_save_and_reload(tmp_path):
    manifest, trials = synth_dataset(SynthConfig(num_patients=2, trials_per_patient=4))
    path = save_dataset(manifest, trials, tmp_path / "ds")
    m2, t2 = load_dataset(path)
    assert len(t2) == 8 and m2.channels == manifest.channels
    np.testing.assert_allclose(t2[0].samples, trials[0].samples.astype(np.float32))
    write_manifest(m2, tmp_path / "copy.json")
    assert json.loads((tmp_path / "copy.json").read_text())["format_version"] == 1

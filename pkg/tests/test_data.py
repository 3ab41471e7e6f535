import math
import struct

import numpy as np
import pytest
from scipy import stats

from dmf2mel.baselines import RidgeDecoder, band_pearson
from dmf2mel.data import (
    CROP_LEN,
    Dataset,
    DatasetManifest,
    TensorFormatError,
    contiguous_crops,
    crop_batch,
    generate_synthetic,
    lag_samples,
    read_tensor,
    stitch_crops,
    write_tensor,
)
from dmf2mel.numerics import make_rng


def test_tensor_roundtrip(tmp_path):
    for dtype in (np.float32, np.float64):
        a = make_rng(1).standard_normal((3, 4)).astype(dtype)
        write_tensor(tmp_path / "a.dmf2", a)
        b = read_tensor(tmp_path / "a.dmf2")
        assert b.dtype == a.dtype and b.tobytes() == a.tobytes()


def test_tensor_header_layout(tmp_path):
    write_tensor(tmp_path / "a.dmf2", np.zeros((2, 5), dtype=np.float32))
    raw = (tmp_path / "a.dmf2").read_bytes()
    assert raw[:4] == b"DMF2"
    assert struct.unpack_from("<III", raw, 4) == (1, 0, 2)
    assert struct.unpack_from("<2Q", raw, 16) == (2, 5)
    assert len(raw) == 32 + 10 * 4


def test_tensor_bad_magic(tmp_path):
    write_tensor(tmp_path / "a.dmf2", np.zeros((2, 2), dtype=np.float32))
    raw = bytearray((tmp_path / "a.dmf2").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "b.dmf2").write_bytes(bytes(raw))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(tmp_path / "b.dmf2")


def test_tensor_truncated(tmp_path):
    header = b"DMF2" + struct.pack("<III", 1, 0, 2) + struct.pack("<2Q", 2, 2)
    (tmp_path / "t.dmf2").write_bytes(header + np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(TensorFormatError, match="truncated"):
        read_tensor(tmp_path / "t.dmf2")


def test_tensor_rank_limit(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "r.dmf2", np.zeros((1,) * 5, dtype=np.float32))


def test_manifest_bookkeeping(tmp_path):
    m = generate_synthetic(tmp_path, seed=7, n_subjects=8, n_heldout_subjects=2, recording_len_s=120, C=8, M=3)
    assert m.n_subjects() == 10
    assert len(m.subjects_in("train")) == 8
    assert set(m.subjects_in("train")).isdisjoint(m.subjects_in("heldout_subjects"))
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded.recordings == m.recordings
    # every file is referenced exactly once across the splits
    files = [p for r in loaded.recordings for p in (r.eeg_path, r.mel_path)]
    assert len(files) == len(set(files))
    assert sorted(files) == sorted(p.name for p in tmp_path.glob("*.dmf2"))
    touched = [r for split in ("train", "heldout_stories", "heldout_subjects") for r in loaded.recordings_in(split)]
    assert len(touched) == len(loaded.recordings)


def test_generation_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(a, seed=3, n_subjects=2, n_heldout_subjects=1, recording_len_s=30, C=4, M=2)
    generate_synthetic(b, seed=3, n_subjects=2, n_heldout_subjects=1, recording_len_s=30, C=4, M=2)
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_generation_rejects_bad_sizes(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(tmp_path, seed=0, n_subjects=1, n_heldout_subjects=0, recording_len_s=60)
    with pytest.raises(ValueError):
        generate_synthetic(tmp_path, seed=0, n_subjects=2, n_heldout_subjects=0, recording_len_s=10)


def test_manifest_detects_missing_file(tmp_path):
    generate_synthetic(tmp_path, seed=0, n_subjects=2, n_heldout_subjects=0, recording_len_s=30, C=4, M=2)
    next(tmp_path.glob("*_mel.dmf2")).unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path)


def test_mel_normalised(small_data):
    for mel in small_data.mel:
        np.testing.assert_allclose(mel.mean(axis=0), 0.0, atol=1e-4)
        np.testing.assert_allclose(mel.std(axis=0), 1.0, atol=1e-4)


def test_noiseless_ridge_recovers_mel(tmp_path):
    generate_synthetic(tmp_path, seed=7, n_subjects=3, n_heldout_subjects=0, recording_len_s=120, snr_db=math.inf)
    ds = Dataset.load(tmp_path)
    for i in ds.indices("train"):
        e, m = ds.eeg[i], ds.mel[i]
        cut = int(0.8 * len(e))
        dec = RidgeDecoder(alpha=1e-4).fit([e[:cut]], [m[:cut]])
        pred = dec.predict(e[cut:])
        # ignore the zero-padded tail where future EEG is unavailable
        assert band_pearson(pred[:-16], m[cut:-16]) >= 0.99


def test_noiseless_eeg_lags_mel(tmp_path):
    generate_synthetic(tmp_path, seed=11, n_subjects=2, n_heldout_subjects=0, recording_len_s=60, snr_db=math.inf)
    ds = Dataset.load(tmp_path)
    lags = lag_samples()
    # channel 0 is dominated by the first lag of the shared prior
    dominant = lags[0]
    eeg, mel = ds.eeg[0][:, 0].astype(np.float64), ds.mel[0].astype(np.float64)
    rng = np.random.default_rng(0)
    for _ in range(5):
        start = int(rng.integers(0, len(eeg) - 4 * CROP_LEN))
        e = eeg[start : start + 4 * CROP_LEN]
        best = []
        for band in range(mel.shape[1]):
            mm = mel[start : start + 4 * CROP_LEN, band]
            xc = [abs(np.corrcoef(e[l:], mm[: len(mm) - l])[0, 1]) for l in range(0, 20)]
            best.append((max(xc), int(np.argmax(xc))))
        peak_lag = max(best)[1]
        assert abs(peak_lag - dominant) <= 1


def test_crop_shapes_and_alignment(small_data):
    rng = make_rng(0)
    eeg, mel, subj = crop_batch(small_data, "train", 16, rng)
    assert eeg.shape == (16, 320, small_data.C)
    assert mel.shape == (16, 320, small_data.M)
    assert len(subj) == 16
    # each crop is a literal window of a recording with a shared start
    for b in range(16):
        i = small_data.indices("train")[subj[b]]
        rec_eeg, rec_mel = small_data.eeg[i], small_data.mel[i]
        hits = np.where((rec_eeg[:, 0] == eeg[b, 0, 0]))[0]
        assert any(np.array_equal(rec_eeg[s : s + 320], eeg[b]) and np.array_equal(rec_mel[s : s + 320], mel[b]) for s in hits)


def test_crop_deterministic(small_data):
    a = crop_batch(small_data, "train", 4, make_rng(5))
    b = crop_batch(small_data, "train", 4, make_rng(5))
    assert np.array_equal(a[0], b[0]) and a[2] == b[2]


def test_crop_empty_split(tmp_path):
    generate_synthetic(tmp_path, seed=0, n_subjects=2, n_heldout_subjects=0, recording_len_s=30, C=4, M=2)
    ds = Dataset.load(tmp_path)
    with pytest.raises(ValueError):
        crop_batch(ds, "heldout_subjects", 2, make_rng(0))


def test_crop_starts_uniform():
    # a 640-sample recording has 321 admissible starts
    class One:
        C, M = 1, 1

        def __init__(self):
            from dmf2mel.data import Recording

            self.eeg = [np.arange(640, dtype=np.float32)[:, None]]
            self.mel = [np.zeros((640, 1), dtype=np.float32)]
            self.manifest = type("M", (), {"recordings": [Recording(0, "train", "", "", 640)]})()

        def indices(self, split):
            return [0]

    eeg, _, _ = crop_batch(One(), "train", 100_000, make_rng(123))
    starts = eeg[:, 0, 0].astype(int)
    counts = np.bincount(starts, minlength=321)
    assert counts.size == 321
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_contiguous_crops_reconstruct(small_data):
    x = small_data.eeg[0]
    crops = contiguous_crops(x)
    assert all(c.shape[0] == CROP_LEN for c in crops)
    assert np.array_equal(stitch_crops(crops, len(x)), x)

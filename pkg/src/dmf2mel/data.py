"""Synthetic EEG/mel corpus, the DMF2 tensor file format and random cropping.

The generator uses a linear forward model: each subject's EEG is a lagged
linear mixture of the mel bands plus white and pink noise. Mixing matrices
are drawn around a shared prior so subjects resemble each other.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import check_finite, make_rng

FS = 64
CROP_LEN = 5 * FS
LAGS_MS = (0.0, 62.5, 125.0, 187.5)
SPLITS = ("train", "heldout_stories", "heldout_subjects")

MAGIC = b"DMF2"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def write_tensor(path, t) -> None:
    a = np.asarray(t)
    if a.dtype == np.float32:
        code = 0
    elif a.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"unsupported dtype {a.dtype}; expected float32 or float64")
    if a.ndim > 4:
        raise TensorFormatError(f"rank {a.ndim} > 4")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, code, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TensorFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"{path}: unknown precision code {code}")
    if rank > 4:
        raise TensorFormatError(f"{path}: rank {rank} > 4")
    off = 16 + 8 * rank
    if len(raw) < off:
        raise TensorFormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, 16)
    dt = _DTYPES[code]
    expected = math.prod(shape) * dt.itemsize
    payload = raw[off:]
    if len(payload) < expected:
        raise TensorFormatError(f"{path}: truncated payload ({len(payload)} < {expected} bytes)")
    if len(payload) > expected:
        raise TensorFormatError(f"{path}: payload longer than declared extents")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


# ---------------------------------------------------------------- generator


@dataclass
class Recording:
    subject: int
    split: str
    eeg_path: str
    mel_path: str
    length: int


@dataclass
class DatasetManifest:
    version: int
    fs: int
    M: int
    C: int
    seed: int
    snr_db: float
    coefficients_digest: str
    subjects: list[dict]
    recordings: list[Recording]
    root: Path | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        d = {
            "version": self.version,
            "fs": self.fs,
            "M": self.M,
            "C": self.C,
            "seed": self.seed,
            "snr_db": self.snr_db if math.isfinite(self.snr_db) else "inf",
            "coefficients_digest": self.coefficients_digest,
            "subjects": self.subjects,
            "recordings": [vars(r) for r in self.recordings],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        snr = d["snr_db"]
        m = cls(
            version=d["version"],
            fs=d["fs"],
            M=d["M"],
            C=d["C"],
            seed=d["seed"],
            snr_db=float(snr),
            coefficients_digest=d["coefficients_digest"],
            subjects=d["subjects"],
            recordings=[Recording(**r) for r in d["recordings"]],
            root=path.parent,
        )
        m.validate()
        return m

    def n_subjects(self) -> int:
        return len(self.subjects)

    def subjects_in(self, split: str) -> list[int]:
        return [s["index"] for s in self.subjects if s["split"] == split]

    def recordings_in(self, split: str) -> list[Recording]:
        return [r for r in self.recordings if r.split == split]

    def validate(self) -> None:
        train = set(self.subjects_in("train"))
        held = set(self.subjects_in("heldout_subjects"))
        if train & held:
            raise ValueError("held-out subjects overlap training subjects")
        for r in self.recordings:
            for p, width in ((r.eeg_path, self.C), (r.mel_path, self.M)):
                full = self.root / p if self.root is not None else Path(p)
                if not full.exists():
                    raise FileNotFoundError(full)
                with open(full, "rb") as fh:
                    head = fh.read(32)
                if head[:4] != MAGIC:
                    raise TensorFormatError(f"{full}: bad magic")
                rank = struct.unpack_from("<I", head, 12)[0]
                shape = struct.unpack_from(f"<{rank}Q", head, 16)
                if shape != (r.length, width):
                    raise TensorFormatError(f"{full}: shape {shape} != {(r.length, width)}")


def lag_samples(fs: int = FS) -> list[int]:
    return [int(round(ms * fs / 1000.0)) for ms in LAGS_MS]


def latent_mel(rng: np.random.Generator, n: int, M: int, fs: int = FS, n_components: int = 12) -> np.ndarray:
    """Smooth band trajectories: sums of random sinusoids in 0.5-8 Hz,
    normalised to zero mean and unit variance per band."""
    t = np.arange(n) / fs
    out = np.empty((n, M))
    for m in range(M):
        freqs = rng.uniform(0.5, 8.0, n_components)
        phases = rng.uniform(0.0, 2 * np.pi, n_components)
        amps = rng.uniform(0.5, 1.5, n_components) / np.sqrt(freqs)
        out[:, m] = (amps * np.sin(2 * np.pi * np.outer(t, freqs) + phases)).sum(axis=1)
    out -= out.mean(axis=0)
    out /= out.std(axis=0)
    return out


def pink_noise(rng: np.random.Generator, n: int, channels: int) -> np.ndarray:
    """Unit-variance 1/f noise per channel via spectral shaping."""
    white = rng.standard_normal((n, channels))
    spec = np.fft.rfft(white, axis=0)
    f = np.fft.rfftfreq(n)
    f[0] = f[1] if n > 1 else 1.0
    spec /= np.sqrt(f)[:, None]
    pink = np.fft.irfft(spec, n=n, axis=0)
    pink -= pink.mean(axis=0)
    return pink / pink.std(axis=0)


def draw_mixing(rng: np.random.Generator, shared: np.ndarray, subject_spread: float) -> np.ndarray:
    """Subject mixing (n_lags, M, C) scattered around the shared prior."""
    w = shared + subject_spread * rng.standard_normal(shared.shape)
    return w / np.sqrt((w**2).sum(axis=(0, 1), keepdims=True))


def shared_prior(rng: np.random.Generator, M: int, C: int, n_lags: int) -> np.ndarray:
    # each channel is dominated by one lag, cycling through the lag set
    profile = np.full((n_lags, C), 0.3)
    profile[np.arange(C) % n_lags, np.arange(C)] = 1.0
    return rng.standard_normal((n_lags, M, C)) * profile[:, None, :]


def forward_model(mel: np.ndarray, mixing: np.ndarray, lags: list[int]) -> np.ndarray:
    """EEG[t, c] = sum_l sum_m mixing[l, m, c] * mel[t - lag_l, m] (zero before t=0)."""
    n = mel.shape[0]
    eeg = np.zeros((n, mixing.shape[2]))
    for li, lag in enumerate(lags):
        shifted = np.zeros_like(mel)
        shifted[lag:] = mel[: n - lag] if lag else mel
        eeg += shifted @ mixing[li]
    return eeg


def add_noise(rng: np.random.Generator, clean: np.ndarray, snr_db: float, pink_fraction: float = 0.5) -> np.ndarray:
    if not math.isfinite(snr_db):
        return clean.copy()
    sig_power = clean.var(axis=0, keepdims=True)
    noise_power = sig_power / (10.0 ** (snr_db / 10.0))
    white = rng.standard_normal(clean.shape)
    pink = pink_noise(rng, clean.shape[0], clean.shape[1])
    noise = np.sqrt(1.0 - pink_fraction) * white + np.sqrt(pink_fraction) * pink
    return clean + noise * np.sqrt(noise_power)


def generate_synthetic(
    out_dir,
    seed: int,
    n_subjects: int,
    n_heldout_subjects: int,
    recording_len_s: float,
    snr_db: float = 0.0,
    C: int = 64,
    M: int = 10,
    heldout_len_s: float | None = None,
    subject_spread: float = 0.5,
    eeg_scale_uv: float = 10.0,
) -> DatasetManifest:
    """Write a synthetic corpus to ``out_dir`` and return its manifest.

    ``n_subjects`` training subjects each get one training recording and one
    held-out-stories recording (fresh latent mel). ``n_heldout_subjects``
    extra subjects get fresh mixing matrices and hear a training story.
    """
    if n_subjects < 2:
        raise ValueError("n_subjects must be >= 2")
    if n_heldout_subjects < 0:
        raise ValueError("n_heldout_subjects must be >= 0")
    if recording_len_s < 30:
        raise ValueError("recording_len_s must be >= 30")
    if heldout_len_s is None:
        heldout_len_s = max(30.0, recording_len_s / 4)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = int(round(recording_len_s * FS))
    n_held = int(round(heldout_len_s * FS))
    lags = lag_samples()

    rng = make_rng(seed)
    shared = shared_prior(rng, M, C, len(lags))
    digest = hashlib.sha256(shared.tobytes())

    subjects, recordings = [], []
    train_stories = []

    def emit(subject: int, split: str, mel: np.ndarray, mixing: np.ndarray, tag: str):
        eeg = add_noise(rng, forward_model(mel, mixing, lags), snr_db) * eeg_scale_uv
        check_finite(eeg, "eeg")
        eeg_p, mel_p = f"{tag}_eeg.dmf2", f"{tag}_mel.dmf2"
        write_tensor(out / eeg_p, eeg.astype(np.float32))
        write_tensor(out / mel_p, mel.astype(np.float32))
        recordings.append(Recording(subject, split, eeg_p, mel_p, mel.shape[0]))

    for s in range(n_subjects):
        mixing = draw_mixing(rng, shared, subject_spread)
        digest.update(mixing.tobytes())
        subjects.append({"index": s, "split": "train"})
        story = latent_mel(rng, n_train, M)
        train_stories.append(story)
        emit(s, "train", story, mixing, f"s{s:03d}_train")
        emit(s, "heldout_stories", latent_mel(rng, n_held, M), mixing, f"s{s:03d}_stories")
    for h in range(n_heldout_subjects):
        s = n_subjects + h
        mixing = draw_mixing(rng, shared, subject_spread)
        digest.update(mixing.tobytes())
        subjects.append({"index": s, "split": "heldout_subjects"})
        story = train_stories[h % n_subjects][:n_held]
        story = (story - story.mean(axis=0)) / story.std(axis=0)
        emit(s, "heldout_subjects", story, mixing, f"s{s:03d}_subject")

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        fs=FS,
        M=M,
        C=C,
        seed=int(seed),
        snr_db=float(snr_db),
        coefficients_digest=digest.hexdigest(),
        subjects=subjects,
        recordings=recordings,
        root=out,
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


# ---------------------------------------------------------------- loading / cropping


class Dataset:
    """Manifest plus its recordings held in memory as float32 arrays."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.eeg: list[np.ndarray] = []
        self.mel: list[np.ndarray] = []
        for r in manifest.recordings:
            self.eeg.append(read_tensor(manifest.root / r.eeg_path))
            self.mel.append(read_tensor(manifest.root / r.mel_path))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls(DatasetManifest.load(path))

    @property
    def C(self) -> int:
        return self.manifest.C

    @property
    def M(self) -> int:
        return self.manifest.M

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.manifest.recordings) if r.split == split]


def crop_bounds(length: int, time_range: tuple[float, float]) -> tuple[int, int]:
    lo = int(math.floor(time_range[0] * length))
    hi = int(math.floor(time_range[1] * length))
    return lo, hi


def crop_batch(
    data: Dataset,
    split: str,
    batch: int,
    rng: np.random.Generator,
    T: int = CROP_LEN,
    time_range: tuple[float, float] = (0.0, 1.0),
):
    """Draw ``batch`` uniform random T-sample windows from ``split``.

    A recording is chosen uniformly, then a start sample uniformly among the
    windows that fit inside ``time_range`` (fractions of the recording).
    Returns ``(eeg[B,T,C], mel[B,T,M], subjects)``.
    """
    idx = data.indices(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    eeg = np.empty((batch, T, data.C), dtype=np.float32)
    mel = np.empty((batch, T, data.M), dtype=np.float32)
    subjects = []
    for b in range(batch):
        i = idx[int(rng.integers(len(idx)))]
        lo, hi = crop_bounds(data.manifest.recordings[i].length, time_range)
        if hi - lo < T:
            raise ValueError(f"recording {i} shorter than crop length {T}")
        start = lo + int(rng.integers(hi - lo - T + 1))
        eeg[b] = data.eeg[i][start : start + T]
        mel[b] = data.mel[i][start : start + T]
        subjects.append(data.manifest.recordings[i].subject)
    return eeg, mel, subjects


def contiguous_crops(x: np.ndarray, T: int = CROP_LEN) -> list[np.ndarray]:
    """Non-overlapping T-windows; the last window is right-aligned to the end
    so the whole recording is covered."""
    n = x.shape[0]
    if n < T:
        raise ValueError(f"length {n} < crop length {T}")
    starts = list(range(0, n - T + 1, T))
    if starts[-1] + T < n:
        starts.append(n - T)
    return [x[s : s + T] for s in starts]


def stitch_crops(crops: list[np.ndarray], n: int, T: int = CROP_LEN) -> np.ndarray:
    """Inverse of :func:`contiguous_crops`."""
    out = np.empty((n,) + crops[0].shape[1:], dtype=crops[0].dtype)
    starts = list(range(0, n - T + 1, T))
    if starts[-1] + T < n:
        starts.append(n - T)
    for s, c in zip(starts, crops):
        out[s : s + T] = c
    return out

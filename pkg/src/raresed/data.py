"""Synthetic data generation, LFBE feature extraction, and dataset I/O.

Generation works directly in feature space at desk scale: each
utterance is a (d, T) matrix of a stationary Gaussian background around
a random band-limited mean pattern (a stand-in for an acoustic scene),
and positives additionally carry a deterministic spectro-temporal ridge
whose gain is set by an event-to-background ratio in dB.

Per-utterance randomness comes from index-addressed substreams:
utterance i uses numpy's SeedSequence(seed, spawn_key=(i,)), so
generation order never changes the result.

The waveform path (read_wav -> lfbe) covers real feature extraction:
Hann window, magnitude-squared rFFT, triangular mel filterbank, natural
log with a 1e-10 floor.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field as dc_field
from typing import BinaryIO, Optional

import numpy as np
import scipy.io.wavfile

from .errors import InputError, ParseError
from .numerics import as_f64

LOG_FLOOR = 1e-10

DATASET_MAGIC = b"RSED"
DATASET_VERSION = 1


@dataclass
class Utterance:
    """One fixed-length clip in feature space.

    features is (d, T); onset/offset are 1-based inclusive frame indices,
    present only for positives. Positive utterances carry 0/1 frame
    labels with exactly one contiguous run of 1's.
    """

    id: str
    features: np.ndarray
    y: int
    frame_labels: Optional[np.ndarray] = None
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = as_f64(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be a (d, T) matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        if self.y not in (0, 1):
            raise ValueError("utterance label must be 0 or 1")
        if self.y == 0:
            if self.frame_labels is not None:
                raise ValueError("negative utterances store no frame labels")
            return
        if self.frame_labels is None:
            raise ValueError("positive utterances need frame labels")
        labels = np.asarray(self.frame_labels, dtype=np.int64)
        if labels.shape != (self.features.shape[1],):
            raise ValueError("frame labels must cover every frame")
        if not set(np.unique(labels)) <= {0, 1}:
            raise ValueError("frame labels must be 0/1")
        on = np.flatnonzero(labels)
        if on.size == 0 or not np.array_equal(on, np.arange(on[0], on[-1] + 1)):
            raise ValueError("frame labels must form one contiguous run of 1's")
        self.frame_labels = labels

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]

    @property
    def onset(self) -> Optional[int]:
        """1-based first labeled frame, None for negatives."""
        if self.y == 0:
            return None
        return int(np.flatnonzero(self.frame_labels)[0]) + 1

    @property
    def offset(self) -> Optional[int]:
        if self.y == 0:
            return None
        return int(np.flatnonzero(self.frame_labels)[-1]) + 1

    @classmethod
    def negative(cls, id: str, features: np.ndarray, meta: Optional[dict] = None) -> "Utterance":
        return cls(id=id, features=features, y=0, meta=meta or {})

    @classmethod
    def positive(cls, id: str, features: np.ndarray, onset: int, offset: int,
                 meta: Optional[dict] = None) -> "Utterance":
        t_len = np.asarray(features).shape[1]
        if not 1 <= onset <= offset <= t_len:
            raise ValueError(f"bad event boundaries {onset}..{offset} for T={t_len}")
        labels = np.zeros(t_len, dtype=np.int64)
        labels[onset - 1:offset] = 1
        return cls(id=id, features=features, y=1, frame_labels=labels,
                   meta=meta or {})


# ---------------------------------------------------------------------------
# Synthetic feature-space generation
# ---------------------------------------------------------------------------

N_SCENES = 15
_BACKGROUND_NOISE_SIGMA = 1.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the feature-space synthesizer."""

    count: int
    positive_fraction: float
    frames: int
    dim: int
    ebr_db: tuple[float, ...] = (-6.0, 0.0, 6.0)
    duration_frames: tuple[int, int] = (20, 40)
    background_seed: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise InputError("utterance count must be nonnegative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise InputError("positive fraction must lie in [0, 1]")
        if self.frames < 1 or self.dim < 1:
            raise InputError("frames and dim must be positive")
        if not self.ebr_db:
            raise InputError("need at least one EBR choice")
        lo, hi = self.duration_frames
        if not 1 <= lo <= hi <= self.frames:
            raise InputError(
                f"duration range {lo}..{hi} does not fit inside {self.frames} frames"
            )


def _scene_bank(config: SynthConfig) -> np.ndarray:
    """Smooth spectral envelopes shared across the dataset (scene proxies)."""
    rng = np.random.default_rng(np.random.SeedSequence(config.background_seed))
    bins = (np.arange(config.dim) + 0.5) / config.dim
    bank = np.zeros((N_SCENES, config.dim))
    for s in range(N_SCENES):
        coef = rng.standard_normal(4)
        for k, c in enumerate(coef):
            bank[s] += c / (k + 1.0) * np.cos(np.pi * k * bins)
    return bank


def _event_template(dim: int, duration: int) -> np.ndarray:
    """Deterministic spectro-temporal ridge with unit peak amplitude.

    A Gaussian bump in the feature axis sweeps from 0.3d to 0.7d over
    the event, shaped by a Hann envelope in time.
    """
    rows = np.arange(dim)[:, None]
    tau = np.arange(duration)[None, :]
    frac = tau / max(duration - 1, 1)
    center = dim * (0.3 + 0.4 * frac)
    width = max(dim / 10.0, 1.0)
    ridge = np.exp(-0.5 * ((rows - center) / width) ** 2)
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * (tau + 0.5) / duration)
    return ridge * envelope


def _utterance_rng(seed: int, index: int) -> np.random.Generator:
    # Index-addressed substream: the documented splitting rule.
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def synth_feature_utterance(config: SynthConfig, index: int,
                            id: Optional[str] = None) -> Utterance:
    """Generate utterance ``index`` of the configured dataset.

    Same (config, index) always yields the same record, independent of
    the order utterances are generated in.
    """
    rng = _utterance_rng(config.seed, index)
    bank = _scene_bank(config)
    uid = id if id is not None else f"utt-{index:05d}"

    scene = int(rng.integers(N_SCENES))
    jitter = rng.standard_normal(3)
    bins = (np.arange(config.dim) + 0.5) / config.dim
    mean = bank[scene].copy()
    for k, c in enumerate(jitter):
        mean += 0.3 * c / (k + 1.0) * np.cos(np.pi * (k + 1) * bins)

    background = mean[:, None] + _BACKGROUND_NOISE_SIGMA * rng.standard_normal(
        (config.dim, config.frames))
    is_positive = rng.uniform() < config.positive_fraction
    if not is_positive:
        return Utterance.negative(uid, background, meta={"scene": scene})

    lo, hi = config.duration_frames
    duration = int(rng.integers(lo, hi + 1))
    onset = int(rng.integers(1, config.frames - duration + 2))
    offset = onset + duration - 1
    ebr_db = float(config.ebr_db[rng.integers(len(config.ebr_db))])
    gain = float(np.sqrt(np.mean(background ** 2)) * 10.0 ** (ebr_db / 20.0))

    features = background
    features[:, onset - 1:offset] += gain * _event_template(config.dim, duration)
    return Utterance.positive(uid, features, onset, offset,
                              meta={"scene": scene, "ebr_db": ebr_db,
                                    "duration": duration})


def synth_dataset(config: SynthConfig, id_prefix: str = "utt",
                  start_index: int = 0) -> list[Utterance]:
    """Generate ``config.count`` utterances at indices start_index onwards."""
    return [
        synth_feature_utterance(config, start_index + i,
                                id=f"{id_prefix}-{start_index + i:05d}")
        for i in range(config.count)
    ]


# ---------------------------------------------------------------------------
# LFBE feature extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LfbeConfig:
    """Framing and filterbank geometry for log filter bank energies."""

    sample_rate: int = 44100
    frame_ms: float = 46.0
    shift_ms: float = 23.0
    n_filters: int = 64
    fft_size: Optional[int] = None  # default: next power of two >= frame length
    fmin_hz: float = 0.0
    fmax_hz: Optional[float] = None  # default: Nyquist

    def __post_init__(self) -> None:
        if self.shift_ms > self.frame_ms:
            raise InputError("frame shift must not exceed frame duration")
        if self.n_filters < 1:
            raise InputError("need at least one mel filter")
        if self.fft_size is not None and self.fft_size < self.frame_length:
            raise InputError("FFT size must cover a whole frame")

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_ms * self.sample_rate / 1000.0))

    @property
    def shift_length(self) -> int:
        return int(round(self.shift_ms * self.sample_rate / 1000.0))

    @property
    def nfft(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        n = 1
        while n < self.frame_length:
            n *= 2
        return n

    @property
    def fmax(self) -> float:
        return self.fmax_hz if self.fmax_hz is not None else self.sample_rate / 2.0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: LfbeConfig) -> np.ndarray:
    """Triangular filters, peaks equally spaced on the mel scale.

    Returns (n_filters, nfft//2 + 1) nonnegative weights; raises when the
    FFT resolution leaves some filter without any bin.
    """
    n_bins = config.nfft // 2 + 1
    bin_hz = np.arange(n_bins) * (config.sample_rate / config.nfft)
    mel_points = np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax),
                             config.n_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((config.n_filters, n_bins))
    for j in range(config.n_filters):
        left, peak, right = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        rising = (bin_hz - left) / max(peak - left, 1e-30)
        falling = (right - bin_hz) / max(right - peak, 1e-30)
        bank[j] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not np.any(bank[j] > 0.0):
            raise InputError(
                f"filter {j} covers no FFT bin: {config.n_filters} filters are "
                f"too many for FFT size {config.nfft}"
            )
    return bank


def lfbe(waveform: np.ndarray, config: LfbeConfig) -> np.ndarray:
    """Log mel filterbank energies, (n_filters, n_frames).

    Per frame: Hann window, magnitude-squared rFFT, triangular mel
    energies, natural log with the floor clamp. Frame count is
    1 + floor((N - frame_length) / shift).
    """
    waveform = as_f64(waveform)
    if waveform.ndim != 1:
        raise InputError("waveform must be a 1-D sample vector")
    flen = config.frame_length
    shift = config.shift_length
    if waveform.shape[0] < flen:
        raise InputError(
            f"waveform of {waveform.shape[0]} samples is shorter than one "
            f"{flen}-sample frame"
        )
    n_frames = 1 + (waveform.shape[0] - flen) // shift
    starts = np.arange(n_frames) * shift
    frames = waveform[starts[:, None] + np.arange(flen)[None, :]]
    window = np.hanning(flen)
    spectrum = np.fft.rfft(frames * window, n=config.nfft, axis=1)
    power = np.abs(spectrum) ** 2
    energies = power @ mel_filterbank(config).T
    return np.log(np.maximum(energies, LOG_FLOOR)).T


def read_wav(path) -> tuple[int, np.ndarray]:
    """Read a mono PCM16 or float32 WAV; returns (rate, samples in [-1, 1])."""
    try:
        rate, samples = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise InputError(f"WAV file not found: {path}")
    except ValueError as exc:
        raise InputError(f"unreadable WAV file {path}: {exc}")
    if samples.ndim != 1:
        raise InputError(f"{path}: only mono WAV input is supported")
    if samples.dtype == np.int16:
        return rate, samples.astype(np.float64) / 32768.0
    if samples.dtype == np.float32:
        return rate, samples.astype(np.float64)
    raise InputError(
        f"{path}: unsupported sample format {samples.dtype}; "
        "use PCM 16-bit or float32"
    )


# ---------------------------------------------------------------------------
# Dataset serialization (lossless binary, one record per utterance)
# ---------------------------------------------------------------------------
#
# Byte layout (all integers little-endian unsigned):
#   header:  magic "RSED" | u32 version | u64 record count
#   record:  u32 id length | id (UTF-8)
#            u8  label y
#            u32 d | u32 T
#            u32 onset | u32 offset   (1-based; both 0 when y = 0)
#            u32 metadata length | metadata (UTF-8 JSON)
#            d*T float64 feature values, row-major
# Feature bytes round-trip exactly; metadata floats survive via JSON's
# shortest-repr encoding.

def save_dataset(path, utterances: list[Utterance]) -> None:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IQ", DATASET_VERSION, len(utterances)))
    for utt in utterances:
        id_bytes = utt.id.encode("utf-8")
        meta_bytes = json.dumps(utt.meta, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(id_bytes)))
        buf.write(id_bytes)
        buf.write(struct.pack("<BII", utt.y, utt.dim, utt.n_frames))
        buf.write(struct.pack("<II", utt.onset or 0, utt.offset or 0))
        buf.write(struct.pack("<I", len(meta_bytes)))
        buf.write(meta_bytes)
        buf.write(np.ascontiguousarray(utt.features, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh: BinaryIO, n: int, record: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ParseError(f"{record}: unexpected end of file "
                         f"(wanted {n} bytes, got {len(data)})")
    return data


def load_dataset(path) -> list[Utterance]:
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise InputError(f"dataset file not found: {path}")
    with fh:
        magic = _read_exact(fh, 4, "header")
        if magic != DATASET_MAGIC:
            raise ParseError(f"header: bad magic {magic!r}, not a dataset file")
        version, count = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
        if version != DATASET_VERSION:
            raise ParseError(f"header: unsupported version {version}")
        out = []
        for rec in range(count):
            where = f"record {rec}"
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, where))
            uid = _read_exact(fh, id_len, where).decode("utf-8")
            y, dim, t_len = struct.unpack("<BII", _read_exact(fh, 9, where))
            onset, offset = struct.unpack("<II", _read_exact(fh, 8, where))
            (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, where))
            try:
                meta = json.loads(_read_exact(fh, meta_len, where).decode("utf-8"))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: bad metadata JSON: {exc}")
            raw = _read_exact(fh, dim * t_len * 8, where)
            features = np.frombuffer(raw, dtype="<f8").reshape(dim, t_len).copy()
            if y == 1:
                out.append(Utterance.positive(uid, features, onset, offset, meta=meta))
            elif y == 0:
                out.append(Utterance.negative(uid, features, meta=meta))
            else:
                raise ParseError(f"{where}: bad label byte {y}")
        trailing = fh.read(1)
        if trailing:
            raise ParseError(f"record {count}: trailing bytes after final record")
    return out

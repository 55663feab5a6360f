"""WAV loading, resampling and log-mel extraction.

Settings: 16 kHz audio, 512-sample Hann frames with hop 256 (no centering),
48 HTK-mel triangular filters spanning 0-8000 Hz, natural log with a 1e-10
floor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DomainError, FormatError

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
N_MELS = 48
LOG_FLOOR = 1e-10


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("audio buffer must be a non-empty mono signal")


@dataclass
class MelFilterbank:
    matrix: np.ndarray
    fft_size: int = N_FFT
    sample_rate: int = SAMPLE_RATE
    centers_hz: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class MelSpectrogram:
    values: np.ndarray
    source: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV


def load_wav(path: str | Path) -> AudioBuffer:
    """Read a RIFF/WAVE PCM-16 file (mono or stereo, stereo averaged)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated RIFF header", len(raw))
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file", 0)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = pos + 8
        if body + size > len(raw):
            if cid == b"data":
                raise FormatError(f"{path}: data chunk truncated ({size} bytes declared, "
                                  f"{len(raw) - body} present)", body)
            raise FormatError(f"{path}: chunk {cid!r} truncated", pos)
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short", pos)
            fmt = struct.unpack_from("<HHIIHH", raw, body) + (body,)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk", pos)
    if data is None:
        raise FormatError(f"{path}: missing data chunk", pos)
    tag, channels, rate, _, block_align, bits, fmt_off = fmt
    if tag == 0xFFFE and len(raw) >= fmt_off + 26:
        # WAVE_FORMAT_EXTENSIBLE: the real format tag starts the subformat GUID
        tag = struct.unpack_from("<H", raw, fmt_off + 24)[0]
    if tag != 1:
        raise FormatError(f"{path}: unsupported format tag {tag} (PCM only)", fmt_off)
    if bits != 16:
        raise FormatError(f"{path}: unsupported bit depth {bits} (16-bit only)", fmt_off + 14)
    if channels not in (1, 2):
        raise FormatError(f"{path}: unsupported channel count {channels}", fmt_off + 2)
    start, size = data
    n_frames = size // (2 * channels)
    if n_frames == 0:
        raise FormatError(f"{path}: empty data chunk", start)
    pcm = np.frombuffer(raw, dtype="<i2", count=n_frames * channels, offset=start)
    samples = pcm.reshape(n_frames, channels).astype(np.float64) / 32768.0
    return AudioBuffer(samples.mean(axis=1), int(rate))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int, channels: int = 1) -> None:
    """Write PCM-16 (``samples`` is frames x channels or mono, values in [-1, 1])."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, channels)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE", b"fmt ", 16,
                         1, channels, sample_rate, sample_rate * 2 * channels, 2 * channels, 16,
                         b"data", len(pcm))
    Path(path).write_bytes(header + pcm)


# ---------------------------------------------------------------------------
# resampling


def resample(audio: AudioBuffer, target_rate: int = SAMPLE_RATE, half_width: int = 32) -> AudioBuffer:
    """Hann-windowed sinc interpolation.

    The kernel spans ``half_width`` zero crossings of the (lower) output
    band on each side; weights for each output sample are renormalised to
    sum to one, which keeps DC exact at the edges too.
    """
    if target_rate < 8000:
        raise ContractError(f"target rate must be >= 8000 Hz, got {target_rate}")
    src = audio.sample_rate
    if src == target_rate:
        return AudioBuffer(audio.samples.copy(), src)
    x = audio.samples
    n_out = int(round(x.size * target_rate / src))
    ratio = src / target_rate
    cutoff = min(1.0, target_rate / src)
    reach = half_width / cutoff  # kernel radius in input samples
    taps = np.arange(-int(np.ceil(reach)), int(np.ceil(reach)) + 1)
    out = np.empty(n_out)
    chunk = 4096
    for lo in range(0, n_out, chunk):
        t = np.arange(lo, min(lo + chunk, n_out)) * ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + taps[None, :]
        dist = t[:, None] - idx
        w = cutoff * np.sinc(cutoff * dist)
        w *= np.where(np.abs(dist) < reach, 0.5 + 0.5 * np.cos(np.pi * dist / reach), 0.0)
        valid = (idx >= 0) & (idx < x.size)
        w = np.where(valid, w, 0.0)
        w /= w.sum(axis=1, keepdims=True)
        out[lo: lo + t.size] = (w * x[np.clip(idx, 0, x.size - 1)]).sum(axis=1)
    return AudioBuffer(out, target_rate)


# ---------------------------------------------------------------------------
# spectra


def hann(n: int = N_FFT) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, win: int = N_FFT, hop: int = HOP) -> int:
    return (n_samples - win) // hop + 1


def stft_power(audio: AudioBuffer | np.ndarray, win: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Power spectrum, ``(win // 2 + 1) x T``, frames fully inside the signal."""
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    if x.size < win:
        raise DataError(f"audio has {x.size} samples, need at least {win}")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.fft.rfft(frames * hann(win), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T.copy()


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DomainError("negative frequency")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


def mel_filterbank(n_mels: int = N_MELS, fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   f_lo: float = 0.0, f_hi: float | None = None) -> MelFilterbank:
    """Unnormalised triangles on ``n_mels + 2`` mel-equispaced edges.

    Edges are rounded to the nearest FFT bin and the triangles are built in
    bin space, so every filter peaks at exactly 1 on its centre bin.
    """
    if n_mels < 1:
        raise ContractError("n_mels must be >= 1")
    f_hi = sr / 2 if f_hi is None else f_hi
    if f_hi > sr / 2:
        raise ContractError(f"f_hi {f_hi} above Nyquist {sr / 2}")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    edges = np.round(edges_hz * fft / sr).astype(np.int64)
    if np.any(np.diff(edges) <= 0):
        raise ContractError(f"{n_mels} filters are too narrow for a {fft}-point FFT")
    k = np.arange(fft // 2 + 1)[None, :]
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (k - lower) / (center - lower)
    falling = (upper - k) / (upper - center)
    matrix = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(matrix, fft, sr, edges[1:-1] * sr / fft)


def log_mel(power: np.ndarray, fb: MelFilterbank | None = None) -> MelSpectrogram:
    fb = fb or mel_filterbank()
    power = np.asarray(power, dtype=np.float64)
    if np.any(power < 0):
        raise DomainError("power spectrum must be non-negative")
    return MelSpectrogram(np.log(np.maximum(fb.matrix @ power, LOG_FLOOR)))


def extract(audio: AudioBuffer, fb: MelFilterbank | None = None) -> MelSpectrogram:
    """Audio at any rate -> 48 x T log-mel spectrogram at 16 kHz."""
    if audio.sample_rate != SAMPLE_RATE:
        audio = resample(audio, SAMPLE_RATE)
    mel = log_mel(stft_power(audio), fb)
    mel.source = {"sample_rate": SAMPLE_RATE, "n_samples": int(audio.samples.size)}
    return mel


def extract_file(path: str | Path, fb: MelFilterbank | None = None) -> MelSpectrogram:
    mel = extract(load_wav(path), fb)
    mel.source["path"] = str(path)
    return mel


def normalize(mel: np.ndarray) -> np.ndarray:
    """Subtract each mel bin's mean over time."""
    return mel - mel.mean(axis=-1, keepdims=True)

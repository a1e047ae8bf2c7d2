"""
Waveform and spectrogram utilities.

Short-time Fourier analysis with a periodic Hann window, the inverse
weighted-overlap-add synthesis used as a reconstruction oracle, frequency
flattening for the magnitude encoder, and WAV input/output.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0

PathLike = Union[str, Path]


@dataclass
class Waveform:
    """Multichannel sampled audio, ``samples`` shaped [channels, timesteps]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ShapeError(f"waveform must be [channels, timesteps], got {samples.shape}")
        if samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ShapeError(f"waveform needs at least one channel and sample, got {samples.shape}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
        if not np.all(np.isfinite(samples)):
            raise DataFormatError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataFormatError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


@dataclass
class Spectrogram:
    """
    Magnitude and phase of STFT bins 1..n/2, each shaped [channels, bins, frames].

    The DC row is kept apart in ``dc`` (real, [channels, frames]) so the
    transform stays invertible while the encoder sees exactly n/2 rows per channel.
    """

    magnitude: np.ndarray
    phase: np.ndarray
    n_fft: int
    hop: int
    sample_rate: int
    length: int
    dc: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.magnitude.shape != self.phase.shape:
            raise ShapeError(
                f"magnitude {self.magnitude.shape} and phase {self.phase.shape} differ"
            )
        if self.magnitude.ndim != 3:
            raise ShapeError(f"spectrogram must be [channels, bins, frames], got {self.magnitude.shape}")
        if self.magnitude.shape[1] != self.n_fft // 2:
            raise ShapeError(f"expected {self.n_fft // 2} bins, got {self.magnitude.shape[1]}")
        if self.dc is not None and self.dc.shape != (self.channels, self.frames):
            raise ShapeError(f"dc row must be {(self.channels, self.frames)}, got {self.dc.shape}")

    @property
    def channels(self) -> int:
        return self.magnitude.shape[0]

    @property
    def bins(self) -> int:
        return self.magnitude.shape[1]

    @property
    def frames(self) -> int:
        return self.magnitude.shape[2]


def _check_fft_params(n_fft: int, hop: int) -> None:
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise DataFormatError(f"fft size must be a power of two, got {n_fft}")
    if hop <= 0 or n_fft % hop:
        raise DataFormatError(f"hop {hop} must divide fft size {n_fft}")


def hann_window(n_fft: int, dtype=np.float32) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant that satisfies overlap-add)."""
    return get_window("hann", n_fft, fftbins=True).astype(dtype)


def stft_complex(
    w: Waveform, n_fft: int = 1024, hop: int = 256, dtype=np.float32
) -> np.ndarray:
    """
    Complex STFT frames shaped [channels, n/2 + 1, frames], DC row included.

    Frame ``k`` starts at sample ``k * hop``; the tail is zero-padded so that
    ``frames == length // hop``.
    """
    _check_fft_params(n_fft, hop)
    x = w.samples.astype(dtype, copy=False)
    channels, length = x.shape
    if length < n_fft:
        raise DataFormatError(f"waveform of {length} samples is shorter than fft size {n_fft}")

    frames = length // hop
    padded = np.zeros((channels, max(length, (frames - 1) * hop + n_fft)), dtype=dtype)
    padded[:, :length] = x
    index = np.arange(n_fft)[None, :] + hop * np.arange(frames)[:, None]
    segments = padded[:, index] * hann_window(n_fft, dtype)
    return np.fft.rfft(segments, axis=-1).transpose(0, 2, 1)


def stft(w: Waveform, n_fft: int = 1024, hop: int = 256, dtype=np.float32) -> Spectrogram:
    """Magnitude/phase spectrogram keeping bins 1..n/2 (n/2 rows per channel)."""
    full = stft_complex(w, n_fft, hop, dtype)
    bins = full[:, 1:, :]
    phase = np.angle(bins)
    # np.angle yields -pi for negative reals with a -0.0 imaginary part
    phase[phase <= -np.pi] = np.pi
    return Spectrogram(
        magnitude=np.abs(bins).astype(dtype),
        phase=phase.astype(dtype),
        n_fft=n_fft,
        hop=hop,
        sample_rate=w.sample_rate,
        length=w.length,
        dc=full[:, 0, :].real.astype(dtype),
    )


def istft(s: Spectrogram) -> Waveform:
    """
    Weighted overlap-add inverse of :func:`stft`.

    Uses the Hann window again on synthesis and divides by the constant
    ``sum(window**2) / hop``; exact away from the first and last ``n_fft``
    samples. A missing DC row is treated as zero.
    """
    n_fft, hop = s.n_fft, s.hop
    _check_fft_params(n_fft, hop)
    if n_fft // hop < 3:
        raise DataFormatError(
            f"hop {hop} too large for overlap-add with fft size {n_fft} (need n/h >= 3)"
        )

    dtype = s.magnitude.dtype
    full = np.zeros((s.channels, n_fft // 2 + 1, s.frames), dtype=np.result_type(dtype, np.complex64))
    full[:, 1:, :] = s.magnitude * np.exp(1j * s.phase)
    if s.dc is not None:
        full[:, 0, :] = s.dc

    window = hann_window(n_fft, dtype)
    segments = np.fft.irfft(full.transpose(0, 2, 1), n=n_fft, axis=-1) * window
    index = np.arange(n_fft)[None, :] + hop * np.arange(s.frames)[:, None]
    out = np.zeros((s.channels, max(s.length, (s.frames - 1) * hop + n_fft)), dtype=dtype)
    np.add.at(out, (slice(None), index), segments.astype(dtype))
    out /= np.sum(window.astype(np.float64) ** 2) / hop
    return Waveform(out[:, : s.length], s.sample_rate)


def spectral_energy(s: Spectrogram) -> np.ndarray:
    """Per-frame energy [channels, frames] of the windowed signal, by Parseval."""
    n_fft = s.n_fft
    power = s.magnitude.astype(np.float64) ** 2
    total = 2.0 * power[:, :-1, :].sum(axis=1) + power[:, -1, :]
    if s.dc is not None:
        total = total + s.dc.astype(np.float64) ** 2
    return total / n_fft


def flatten_freq(s: Spectrogram) -> np.ndarray:
    """Stack channel magnitudes channel-major into [channels * bins, frames]."""
    return s.magnitude.reshape(s.channels * s.bins, s.frames)


def unflatten_freq(rows: np.ndarray, channels: int) -> np.ndarray:
    if rows.ndim != 2 or rows.shape[0] % channels:
        raise ShapeError(f"cannot split {rows.shape} into {channels} channels")
    return rows.reshape(channels, rows.shape[0] // channels, rows.shape[1])


def read_wav(path: PathLike) -> Waveform:
    """Read PCM16 or float32 WAV; PCM16 is normalized by 1/32768."""
    try:
        sample_rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot read WAV '{path}': {e}") from e

    if data.dtype == np.int16:
        samples = data.astype(np.float32) / PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data
    else:
        raise DataFormatError(
            f"unsupported sample format {data.dtype} in '{path}'; "
            "expected PCM 16-bit or IEEE float 32-bit"
        )
    samples = samples.reshape(samples.shape[0], -1).T
    return Waveform(np.ascontiguousarray(samples), sample_rate)


def wav_frames(path: PathLike) -> int:
    """Sample count per channel, read without loading the payload."""
    try:
        _, data = wavfile.read(str(path), mmap=True)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot read WAV '{path}': {e}") from e
    return int(data.shape[0])


def write_wav(path: PathLike, w: Waveform, pcm16: bool = False) -> Path:
    """Write interleaved little-endian WAV, IEEE float 32-bit unless ``pcm16``."""
    samples = w.samples.T
    if pcm16:
        samples = (np.clip(samples, -1.0, 1.0) * 32767).astype("<i2")
    else:
        samples = samples.astype("<f4")
    if w.channels == 1:
        samples = samples[:, 0]

    path = Path(path)
    wavfile.write(str(path), w.sample_rate, samples)
    logger.debug("wrote %s (%d ch, %d samples)", path, w.channels, w.length)
    return path

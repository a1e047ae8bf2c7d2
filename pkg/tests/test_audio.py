import numpy as np
import pytest
from scipy.io import wavfile

from tunecascade.audio import (
    Spectrogram,
    Waveform,
    flatten_freq,
    hann_window,
    istft,
    read_wav,
    spectral_energy,
    stft,
    stft_complex,
    unflatten_freq,
    wav_frames,
    write_wav,
)
from tunecascade.errors import DataFormatError, ShapeError


def test_frame_count_full_scale():
    w = Waveform(np.zeros((2, 2**18), dtype=np.float32), 48000)
    s = stft(w, 1024, 256)
    assert s.magnitude.shape == (2, 512, 1024)
    assert s.phase.shape == (2, 512, 1024)


def test_zero_waveform_gives_zero_magnitude():
    s = stft(Waveform(np.zeros((1, 4096)), 8000), 256, 64)
    assert not s.magnitude.any()


def test_bin_centred_sine_concentrates_energy_in_main_lobe():
    n, k, sr = 256, 10, 8000
    t = np.arange(4096)
    w = Waveform(np.sin(2 * np.pi * k * t / n)[None, :], sr)
    s = stft(w, n, 64, dtype=np.float64)
    # frames whose window lies fully inside the signal
    inner = s.magnitude[0, :, : (4096 - n) // 64 + 1]
    power = inner**2
    lobe = power[k - 2 : k + 1].sum(axis=0)
    assert np.all(lobe / power.sum(axis=0) > 0.99)
    assert np.all(inner.argmax(axis=0) == k - 1)


@pytest.mark.parametrize("seed", range(100))
def test_round_trip_interior(seed):
    g = np.random.default_rng(seed)
    n, h = 256, 64
    length = int(g.integers(4 * n, 3000))
    x = g.standard_normal((int(g.integers(1, 3)), length))
    w = Waveform(x, 8000)
    y = istft(stft(w, n, h, dtype=np.float64)).samples
    inner = slice(n, length - n)
    error = np.linalg.norm(y[:, inner] - x[:, inner]) / np.linalg.norm(x[:, inner])
    assert error < 1e-6


def test_round_trip_float32():
    x = np.random.default_rng(0).standard_normal((2, 8192)).astype(np.float32)
    y = istft(stft(Waveform(x, 48000), 1024, 256)).samples
    inner = slice(1024, 8192 - 1024)
    assert np.linalg.norm(y[:, inner] - x[:, inner]) / np.linalg.norm(x[:, inner]) < 1e-5


def test_zero_spectrogram_gives_zero_waveform():
    s = Spectrogram(np.zeros((1, 128, 16)), np.zeros((1, 128, 16)), 256, 64, 8000, 1024)
    assert not istft(s).samples.any()


def test_single_frame_matches_windowed_inverse_fft():
    n, h = 256, 64
    g = np.random.default_rng(3)
    mag = g.random((1, n // 2, 1))
    phase = g.uniform(-np.pi, np.pi, (1, n // 2, 1))
    s = Spectrogram(mag, phase, n, h, 8000, n, dc=np.zeros((1, 1)))
    full = np.concatenate([[0.0], mag[0, :, 0] * np.exp(1j * phase[0, :, 0])])
    window = hann_window(n, np.float64)
    expected = np.fft.irfft(full, n=n) * window / (np.sum(window**2) / h)
    np.testing.assert_allclose(istft(s).samples[0], expected, atol=1e-12)


def test_parseval_per_frame():
    n, h = 256, 64
    x = np.random.default_rng(5).standard_normal((2, 2048))
    s = stft(Waveform(x, 8000), n, h, dtype=np.float64)
    window = hann_window(n, np.float64)
    padded = np.pad(x, ((0, 0), (0, n)))
    direct = np.stack(
        [[np.sum((padded[c, k * h : k * h + n] * window) ** 2) for k in range(s.frames)] for c in range(2)]
    )
    np.testing.assert_allclose(spectral_energy(s), direct, rtol=1e-9)


def test_stft_is_linear():
    g = np.random.default_rng(7)
    x, y = g.standard_normal((2, 1, 1024))
    a, b = 0.3, -1.7
    combined = stft_complex(Waveform(a * x + b * y, 8000), 256, 64, np.float64)
    separate = a * stft_complex(Waveform(x, 8000), 256, 64, np.float64) + b * stft_complex(
        Waveform(y, 8000), 256, 64, np.float64
    )
    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_flatten_is_channel_major():
    s = stft(Waveform(np.random.default_rng(1).standard_normal((2, 1024)), 8000), 256, 64)
    rows = flatten_freq(s)
    assert rows.shape == (256, 16)
    np.testing.assert_array_equal(rows[:128], s.magnitude[0])
    np.testing.assert_array_equal(rows[128:], s.magnitude[1])
    np.testing.assert_array_equal(unflatten_freq(rows, 2), s.magnitude)


def test_flatten_single_channel_is_identity():
    s = stft(Waveform(np.random.default_rng(2).standard_normal((1, 1024)), 8000), 256, 64)
    np.testing.assert_array_equal(flatten_freq(s), s.magnitude[0])


def test_unflatten_rejects_uneven_rows():
    with pytest.raises(ShapeError):
        unflatten_freq(np.zeros((5, 4)), 2)


@pytest.mark.parametrize("n_fft, hop", [(1000, 250), (256, 100), (256, 0)])
def test_invalid_fft_parameters(n_fft, hop):
    with pytest.raises(DataFormatError):
        stft(Waveform(np.zeros((1, 4096)), 8000), n_fft, hop)


def test_too_short_waveform():
    with pytest.raises(DataFormatError):
        stft(Waveform(np.zeros((1, 100)), 8000), 256, 64)


def test_hop_too_large_for_overlap_add():
    s = stft(Waveform(np.zeros((1, 1024)), 8000), 256, 128)
    with pytest.raises(DataFormatError):
        istft(s)


def test_mismatched_magnitude_and_phase():
    with pytest.raises(ShapeError):
        Spectrogram(np.zeros((1, 128, 4)), np.zeros((1, 128, 5)), 256, 64, 8000, 256)


def test_waveform_rejects_non_finite():
    with pytest.raises(DataFormatError):
        Waveform(np.array([[0.0, np.nan]]), 8000)


def test_float32_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1000)).astype(np.float32)
    path = write_wav(tmp_path / "a.wav", Waveform(x, 48000))
    w = read_wav(path)
    assert w.sample_rate == 48000
    np.testing.assert_array_equal(w.samples, x)
    assert wav_frames(path) == 1000


def test_pcm16_is_normalised(tmp_path):
    path = tmp_path / "pcm.wav"
    wavfile.write(str(path), 8000, np.array([16384, -32768, 0], dtype=np.int16))
    w = read_wav(path)
    np.testing.assert_array_equal(w.samples[0], [0.5, -1.0, 0.0])


def test_pcm16_write_quantises(tmp_path):
    x = np.array([[0.25, -0.5, 1.5]], dtype=np.float32)
    w = read_wav(write_wav(tmp_path / "q.wav", Waveform(x, 8000), pcm16=True))
    np.testing.assert_allclose(w.samples[0], [0.25, -0.5, 1.0], atol=2 / 32768)


def test_unsupported_sample_format(tmp_path):
    path = tmp_path / "int32.wav"
    wavfile.write(str(path), 8000, np.zeros(10, dtype=np.int32))
    with pytest.raises(DataFormatError):
        read_wav(path)


def test_unreadable_wav(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a wav")
    with pytest.raises(DataFormatError):
        read_wav(path)

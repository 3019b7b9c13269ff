"""Time-domain containers, framing, STFT, Mel features and SSL augmentations.

Everything runs at 16 kHz. Arrays are ``float64`` numpy unless a function
name says otherwise; ``mel_features_torch`` is the differentiable path used
when gradients have to flow from the speaker embedder back into the enhancer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sps
from scipy.io import wavfile

SAMPLE_RATE = 16000

MEL_WIN = 400
MEL_HOP = 160
MEL_NFFT = 512
N_MELS = 40
# about 30 dB below a unit-RMS signal; digital silence (time masks, padding) must not
# produce log-Mel outliers that swamp the per-utterance statistics
LOG_FLOOR = 1e-3

SPEED_FACTORS = (0.9, 1.1)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"Waveform expects a 1-D signal, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("Waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MultichannelWaveform:
    channels: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.channels, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"MultichannelWaveform expects C x T, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("MultichannelWaveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "channels", x)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def __len__(self):
        return self.channels.shape[1]

    def channel(self, index: int) -> Waveform:
        return Waveform(self.channels[index], self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT of shape (C, n_freq, n_frames) plus the grid it was taken on."""

    data: np.ndarray
    win_length: int
    hop: int
    nfft: int
    length: int
    sample_rate: int = SAMPLE_RATE
    window: np.ndarray = field(repr=False, default=None)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]


def _as_array(x) -> tuple[np.ndarray, int]:
    if isinstance(x, Waveform):
        return x.samples, x.sample_rate
    if isinstance(x, MultichannelWaveform):
        return x.channels, x.sample_rate
    return np.asarray(x, dtype=np.float64), SAMPLE_RATE


def hann(win_length: int) -> np.ndarray:
    """Periodic Hann window."""
    return sps.get_window("hann", win_length, fftbins=True)


def n_frames(length: int, win_length: int, hop: int) -> int:
    if length < win_length:
        raise ValueError(f"signal of {length} samples is shorter than one window ({win_length})")
    return 1 + (length - win_length) // hop


def frame(x: np.ndarray, win_length: int, hop: int) -> np.ndarray:
    """Split the last axis into overlapping frames: (..., T) -> (..., n_frames, win_length)."""
    count = n_frames(x.shape[-1], win_length, hop)
    view = np.lib.stride_tricks.sliding_window_view(x, win_length, axis=-1)
    return view[..., : (count - 1) * hop + 1 : hop, :]


def stft(x, win_length: int = MEL_WIN, hop: int = MEL_HOP, nfft: int = MEL_NFFT,
         window: np.ndarray | None = None) -> Spectrogram:
    """STFT without centering; frame k covers samples [k*hop, k*hop + win_length)."""
    arr, sr = _as_array(x)
    if arr.ndim == 1:
        arr = arr[None]
    if nfft < win_length:
        raise ValueError("nfft must be >= win_length")
    w = hann(win_length) if window is None else np.asarray(window, dtype=np.float64)
    frames = frame(arr, win_length, hop) * w
    spec = np.fft.rfft(frames, n=nfft, axis=-1)
    return Spectrogram(
        data=np.swapaxes(spec, -1, -2),
        win_length=win_length,
        hop=hop,
        nfft=nfft,
        length=arr.shape[-1],
        sample_rate=sr,
        window=w,
    )


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`. Returns (C, T)."""
    length = spec.length if length is None else length
    w = spec.window if spec.window is not None else hann(spec.win_length)
    frames = np.fft.irfft(np.swapaxes(spec.data, -1, -2), n=spec.nfft, axis=-1)
    frames = frames[..., : spec.win_length] * w
    n_ch, count = spec.data.shape[0], spec.data.shape[2]
    out = np.zeros((n_ch, length))
    norm = np.zeros(length)
    for k in range(count):
        start = k * spec.hop
        stop = min(start + spec.win_length, length)
        out[:, start:stop] += frames[:, k, : stop - start]
        norm[start:stop] += w[: stop - start] ** 2
    # the floor only touches edge samples covered by window tails; modified spectra blow up there otherwise
    return out / np.maximum(norm, 0.1 * norm.max())


# -- Mel features ---------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, nfft: int = MEL_NFFT, sample_rate: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape (nfft // 2 + 1, n_mels), unnormalised."""
    f_max = sample_rate / 2 if f_max is None else f_max
    freqs = np.linspace(0, sample_rate / 2, nfft // 2 + 1)
    pts = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    lower = (freqs[:, None] - pts[None, :-2]) / (pts[1:-1] - pts[:-2])
    upper = (pts[None, 2:] - freqs[:, None]) / (pts[2:] - pts[1:-1])
    return np.maximum(0.0, np.minimum(lower, upper))


_FB_CACHE: dict[tuple, torch.Tensor] = {}


def _fb_tensor(dtype, device) -> torch.Tensor:
    key = (dtype, str(device))
    if key not in _FB_CACHE:
        _FB_CACHE[key] = torch.as_tensor(mel_filterbank(), dtype=dtype, device=device)
    return _FB_CACHE[key]


def mel_features_torch(x: torch.Tensor) -> torch.Tensor:
    """Log-Mel power features, (..., T) -> (..., F, 40). Differentiable."""
    if x.shape[-1] < MEL_WIN:
        raise ValueError(f"input of {x.shape[-1]} samples is shorter than one window ({MEL_WIN})")
    window = torch.as_tensor(hann(MEL_WIN), dtype=x.dtype, device=x.device)
    frames = x.unfold(-1, MEL_WIN, MEL_HOP) * window
    power = torch.fft.rfft(frames, n=MEL_NFFT, dim=-1).abs().pow(2)
    mel = power @ _fb_tensor(x.dtype, x.device)
    return torch.log(torch.clamp(mel, min=LOG_FLOOR))


def mel_features(x) -> np.ndarray:
    """40-band log-Mel spectrogram (F x 40) of a 16 kHz mono signal."""
    arr, sr = _as_array(x)
    if sr != SAMPLE_RATE:
        raise ValueError(f"mel_features expects {SAMPLE_RATE} Hz input, got {sr}")
    if arr.ndim != 1:
        raise ValueError("mel_features expects a mono signal")
    return mel_features_torch(torch.from_numpy(arr)).numpy()


# -- augmentation ---------------------------------------------------------------


def speed_perturb(x, factor: float):
    """Resampling speed perturbation: pitch and tempo both scale by ``factor``.

    Works on mono or (C, T) input and returns the same kind of object it got.
    """
    if not any(np.isclose(factor, f) for f in SPEED_FACTORS):
        raise ValueError(f"speed factor must be one of {SPEED_FACTORS}, got {factor}")
    arr, sr = _as_array(x)
    ratio = Fraction(factor).limit_denominator(100)
    # playing back at the same rate after resampling by 1/factor changes speed by factor
    out = sps.resample_poly(arr, ratio.denominator, ratio.numerator, axis=-1)
    if isinstance(x, Waveform):
        return Waveform(out, sr)
    if isinstance(x, MultichannelWaveform):
        return MultichannelWaveform(out, sr)
    return out


def time_mask(x, rng: np.random.Generator, mask_seconds: float = 1.0):
    """Zero one contiguous ``mask_seconds`` span (all channels) at a uniform start."""
    arr, sr = _as_array(x)
    span = int(round(mask_seconds * sr))
    length = arr.shape[-1]
    if length <= span:
        raise ValueError(f"signal of {length / sr:.3f} s is not longer than the {mask_seconds} s mask")
    start = int(rng.integers(0, length - span + 1))
    out = arr.copy()
    out[..., start:start + span] = 0.0
    if isinstance(x, Waveform):
        return Waveform(out, sr)
    if isinstance(x, MultichannelWaveform):
        return MultichannelWaveform(out, sr)
    return out


def resample(x: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    if orig_sr == target_sr:
        return x
    ratio = Fraction(target_sr, orig_sr)
    return sps.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)


# -- WAV I/O ----------------------------------------------------------------------


def read_wav(path) -> np.ndarray:
    """Load a WAV as float64 (T,) or (C, T), resampled to 16 kHz."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.T
    return resample(data, sr)


def write_wav(path, x: np.ndarray, sample_rate: int = SAMPLE_RATE, pcm16: bool = False, float64: bool = False):
    """Write float32 (default), float64 or 16-bit PCM; (C, T) input becomes a C-channel file."""
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr.T
    if pcm16:
        arr = np.clip(np.round(arr * 32767.0), -32768, 32767).astype(np.int16)
    else:
        arr = arr.astype(np.float64 if float64 else np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate, arr)

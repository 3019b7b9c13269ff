"""Oracle rank-1 multichannel Wiener filter.

Per frequency bin the speech covariance is replaced by its principal
component ``sigma2 * a a^H`` and the filter

    w = sigma2 * Phi_v^{-1} a / (mu + sigma2 * a^H Phi_v^{-1} a) * conj(a[ref])

estimates the speech image at the reference microphone. ``Phi_v`` is the noise
covariance plus whatever part of the speech covariance the rank-1 model leaves
out (late reverberation is not rank-1); without that term ``Phi_n^{-1}`` boosts
exactly the directions the residual speech lives in. Covariances come from
the known speech and noise images, so this is an upper-bound baseline and the
training target for the diffusion enhancer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .room_sim import REF_CHANNEL, MixtureExample
from .signal_core import MEL_HOP, MEL_NFFT, MEL_WIN, Spectrogram, Waveform, istft, stft

MWF_WIN = MEL_WIN
MWF_HOP = MEL_HOP
MWF_NFFT = MEL_NFFT
LOADING = 1e-6


@dataclass(frozen=True)
class SpatialCovariances:
    phi_s: np.ndarray
    phi_n: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.phi_s.shape[-1]


def _outer_mean(spec: np.ndarray) -> np.ndarray:
    # (C, F, T) -> (F, C, C)
    return np.einsum("cft,dft->fcd", spec, spec.conj()) / spec.shape[-1]


def estimate_covariances(speech_stft: Spectrogram, noise_stft: Spectrogram) -> SpatialCovariances:
    s, n = speech_stft.data, noise_stft.data
    if s.shape != n.shape:
        raise ValueError(f"speech and noise STFT shapes differ: {s.shape} vs {n.shape}")
    if s.shape[-1] < s.shape[0]:
        raise ValueError(f"{s.shape[-1]} frames cannot support a {s.shape[0]}-channel covariance")
    phi_s = _outer_mean(s)
    phi_n = _outer_mean(n)
    # exact Hermitian symmetry regardless of summation order
    phi_s = 0.5 * (phi_s + np.conj(np.swapaxes(phi_s, -1, -2)))
    phi_n = 0.5 * (phi_n + np.conj(np.swapaxes(phi_n, -1, -2)))
    return SpatialCovariances(phi_s, phi_n)


def mwf_weights(cov: SpatialCovariances, ref_channel: int = REF_CHANNEL, mu: float = 1.0,
                loading: float = LOADING, residual_as_noise: bool = True) -> np.ndarray:
    """Rank-1 MWF weights, shape (F, C); the output is ``w^H y`` per bin."""
    n_bins, n_ch = cov.phi_s.shape[0], cov.n_channels
    eigvals, eigvecs = np.linalg.eigh(cov.phi_s)
    sigma2 = np.maximum(eigvals[:, -1], 0.0)
    steer = eigvecs[:, :, -1]
    phi_n = cov.phi_n
    if residual_as_noise:
        rank1 = sigma2[:, None, None] * np.einsum("fc,fd->fcd", steer, steer.conj())
        phi_n = phi_n + (cov.phi_s - rank1)
    trace = np.real(np.trace(phi_n, axis1=-2, axis2=-1))
    phi_n = phi_n + (loading * trace / n_ch)[:, None, None] * np.eye(n_ch)[None]
    weights = np.zeros((n_bins, n_ch), dtype=complex)
    for f in range(n_bins):
        if sigma2[f] == 0.0:
            continue
        try:
            weights[f] = rank1_filter(sigma2[f], steer[f], phi_n[f], ref_channel, mu)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"noise covariance is singular at bin {f} even after loading")
    return weights


def rank1_filter(sigma2: float, steer: np.ndarray, phi_v: np.ndarray, ref_channel: int = REF_CHANNEL,
                 mu: float = 1.0) -> np.ndarray:
    """One bin: sigma2 Phi_v^{-1} a / (mu + sigma2 a^H Phi_v^{-1} a) * conj(a[ref])."""
    if np.linalg.cond(phi_v) > 1e14:
        raise np.linalg.LinAlgError("interference covariance is singular")
    pa = np.linalg.solve(phi_v, steer)
    denom = mu + sigma2 * np.real(np.vdot(steer, pa))
    return sigma2 * pa / denom * np.conj(steer[ref_channel])


def apply_weights(weights: np.ndarray, noisy_stft: Spectrogram) -> Spectrogram:
    out = np.einsum("fc,cft->ft", weights.conj(), noisy_stft.data)[None]
    return Spectrogram(out, noisy_stft.win_length, noisy_stft.hop, noisy_stft.nfft,
                       noisy_stft.length, noisy_stft.sample_rate, noisy_stft.window)


def rank1_mwf(noisy_stft: Spectrogram, cov: SpatialCovariances, ref_channel: int = REF_CHANNEL,
              mu: float = 1.0, loading: float = LOADING, residual_as_noise: bool = True) -> Waveform:
    weights = mwf_weights(cov, ref_channel, mu, loading, residual_as_noise)
    return Waveform(istft(apply_weights(weights, noisy_stft))[0], noisy_stft.sample_rate)


def oracle_mwf(mix: MixtureExample, ref_channel: int = REF_CHANNEL, mu: float = 1.0) -> Waveform:
    """Oracle rank-1 MWF estimate of the reference-channel speech image."""
    if mix.speech_image is None or mix.noise_image is None:
        raise ValueError("oracle MWF needs the speech and noise images")
    grid = dict(win_length=MWF_WIN, hop=MWF_HOP, nfft=MWF_NFFT)
    cov = estimate_covariances(stft(mix.speech_image, **grid), stft(mix.noise_image, **grid))
    return rank1_mwf(stft(mix.noisy, **grid), cov, ref_channel, mu)

"""Synthetic stand-ins for speech and noise corpora.

A toy "speaker" is a fixed set of vocal-tract resonances, a pitch range and a
spectral tilt. Utterances are strings of voiced syllables whose formants wander
around the speaker's own, so identity is learnable but not trivially constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal_core import SAMPLE_RATE, write_wav


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    tilt: float
    breath: float


def sample_speaker(rng: np.random.Generator, speaker_id: str) -> ToySpeaker:
    f0 = float(rng.uniform(85.0, 260.0))
    formants = (
        float(rng.uniform(350.0, 900.0)),
        float(rng.uniform(1000.0, 2300.0)),
        float(rng.uniform(2400.0, 3400.0)),
        float(rng.uniform(3500.0, 4500.0)),
    )
    bandwidths = tuple(float(rng.uniform(60.0, 200.0)) for _ in formants)
    return ToySpeaker(speaker_id, f0, formants, bandwidths,
                      tilt=float(rng.uniform(-14.0, -6.0)), breath=float(rng.uniform(0.01, 0.08)))


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return sps.lfilter([1.0 - r], a, x)


def utterance(speaker: ToySpeaker, duration: float, rng: np.random.Generator,
              sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """One toy utterance, RMS-normalised to 0.05."""
    total = int(round(duration * sample_rate))
    out = np.zeros(total)
    pos = int(rng.integers(0, int(0.1 * sample_rate)))
    while pos < total:
        seg = int(rng.uniform(0.12, 0.32) * sample_rate)
        gap = int(rng.uniform(0.02, 0.12) * sample_rate)
        n = min(seg, total - pos)
        if n < 64:
            break
        t = np.arange(n) / sample_rate
        f0 = speaker.f0 * rng.uniform(0.88, 1.12) * (1 + rng.uniform(-0.08, 0.08) * t / max(t[-1], 1e-3))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        n_harm = int(min(40, (sample_rate / 2 - 200) // f0.max()))
        k = np.arange(1, n_harm + 1)
        amps = 10 ** (speaker.tilt * np.log2(k) / 20)
        src = np.sin(np.outer(phase, k)) @ amps
        src += speaker.breath * rng.standard_normal(n) * np.abs(src).max()
        y = np.zeros(n)
        for freq, bw in zip(speaker.formants, speaker.bandwidths):
            y += _resonator(src, freq * rng.uniform(0.9, 1.1), bw, sample_rate)
        env = np.sin(np.pi * np.arange(n) / n) ** 0.6
        out[pos:pos + n] = y * env
        pos += n + gap
    rms = np.sqrt(np.mean(out ** 2))
    return out * (0.05 / rms) if rms > 0 else out


def noise_sample(kind: str, duration: float, rng: np.random.Generator,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Coloured, tonal or modulated noise, RMS-normalised to 0.05."""
    n = int(round(duration * sample_rate))
    white = rng.standard_normal(n)
    if kind == "colored":
        spec = np.fft.rfft(white)
        f = np.maximum(np.fft.rfftfreq(n, 1 / sample_rate), 20.0)
        spec *= f ** (-rng.uniform(0.0, 1.0))
        x = np.fft.irfft(spec, n)
    elif kind == "hum":
        t = np.arange(n) / sample_rate
        base = rng.uniform(50.0, 300.0)
        x = sum(np.sin(2 * np.pi * base * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 8))
        x = x + 0.3 * white
    elif kind == "modulated":
        b, a = sps.butter(2, [rng.uniform(200, 800), rng.uniform(2000, 6000)], btype="band", fs=sample_rate)
        t = np.arange(n) / sample_rate
        x = sps.lfilter(b, a, white) * (1 + 0.8 * np.sin(2 * np.pi * rng.uniform(1, 6) * t))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x * (0.05 / np.sqrt(np.mean(x ** 2)))


NOISE_KINDS = ("colored", "hum", "modulated")


def write_speech_corpus(out_dir, n_speakers: int, utts_per_speaker: int, duration: float,
                        seed: int, prefix: str = "spk", stream: int = 101) -> list[tuple[str, str, str]]:
    """Write toy utterances; returns ``(utt_id, path, speaker_id)`` triples.

    ``stream`` separates speaker pools drawn with the same seed.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    items = []
    for s in range(n_speakers):
        spk = sample_speaker(rng, f"{prefix}{s:03d}")
        for u in range(utts_per_speaker):
            utt_id = f"{spk.speaker_id}-{u:03d}"
            path = out_dir / f"{utt_id}.wav"
            write_wav(path, utterance(spk, duration, rng))
            items.append((utt_id, str(path), spk.speaker_id))
    return items


def write_noise_bank(out_dir, count: int, duration: float, seed: int) -> list[tuple[str, str]]:
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    items = []
    for i in range(count):
        kind = NOISE_KINDS[i % len(NOISE_KINDS)]
        noise_id = f"noise{i:03d}-{kind}"
        path = out_dir / f"{noise_id}.wav"
        write_wav(path, noise_sample(kind, duration, rng))
        items.append((noise_id, str(path)))
    return items


def scan_speech_dir(root) -> list[tuple[str, str, str]]:
    """Index ``<root>/<speaker>/*.wav`` (or flat ``<root>/*.wav``) as speech items."""
    root = Path(root)
    items = []
    for path in sorted(root.rglob("*.wav")):
        speaker = path.parent.name if path.parent != root else path.stem.split("-")[0]
        items.append((path.stem, str(path), speaker))
    return items


def scan_noise_dir(root) -> list[tuple[str, str]]:
    return [(p.stem, str(p)) for p in sorted(Path(root).rglob("*.wav"))]

"""Shoebox image-source RIR simulation and multichannel mixture/corpus building."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .signal_core import SAMPLE_RATE, MultichannelWaveform, Waveform, read_wav, write_wav

SPEED_OF_SOUND = 343.0

ROOM_LENGTH = (3.0, 8.0)
ROOM_WIDTH = (3.0, 5.0)
ROOM_HEIGHT = (2.0, 3.0)
RT60_RANGE = (0.2, 0.6)
SOURCE_WALL_MIN = 1.5
MIC_WALL_MIN = 1.0
ARRAY_RADIUS = 0.05
N_MICS = 4
REF_CHANNEL = 0
SNR_RANGE = (0.0, 20.0)

TAIL_FRACTION = 0.75
FRACTIONAL_TAPS = 81
FRACTIONAL_IMAGES = 400


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    rt60: float
    source_pos: tuple[float, float, float]
    mic_positions: tuple[tuple[float, float, float], ...]
    noise_pos: tuple[float, float, float] | None = None
    seed: list[int] | int | None = None
    absorption: float | None = None

    @property
    def array_center(self) -> np.ndarray:
        return np.mean(np.asarray(self.mic_positions), axis=0)

    def wall_distances(self, point) -> np.ndarray:
        """Distances to the four side walls (x = 0, x = L, y = 0, y = W)."""
        p = np.asarray(point)
        length, width, _ = self.dims
        return np.array([p[0], length - p[0], p[1], width - p[1]])

    def inside(self, point) -> bool:
        p = np.asarray(point)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dims)))

    def validate(self):
        length, width, height = self.dims
        if not (ROOM_LENGTH[0] <= length <= ROOM_LENGTH[1] and ROOM_WIDTH[0] <= width <= ROOM_WIDTH[1]
                and ROOM_HEIGHT[0] <= height <= ROOM_HEIGHT[1]):
            raise ValueError(f"room dims {self.dims} outside the allowed ranges")
        if not RT60_RANGE[0] <= self.rt60 <= RT60_RANGE[1]:
            raise ValueError(f"rt60 {self.rt60} outside {RT60_RANGE}")
        points = [self.source_pos, *self.mic_positions] + ([self.noise_pos] if self.noise_pos else [])
        if not all(self.inside(p) for p in points):
            raise ValueError("every position must be strictly inside the room")
        if self.wall_distances(self.source_pos).min() < SOURCE_WALL_MIN - 1e-9:
            raise ValueError("source closer than 1.5 m to a wall")
        for mic in self.mic_positions:
            if self.wall_distances(mic).min() < MIC_WALL_MIN - 1e-9:
                raise ValueError("microphone closer than 1 m to a wall")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        return cls(
            dims=tuple(d["dims"]),
            rt60=d["rt60"],
            source_pos=tuple(d["source_pos"]),
            mic_positions=tuple(tuple(m) for m in d["mic_positions"]),
            noise_pos=tuple(d["noise_pos"]) if d.get("noise_pos") is not None else None,
            seed=d.get("seed"),
            absorption=d.get("absorption"),
        )


@dataclass(frozen=True)
class RirSet:
    impulse_responses: np.ndarray
    room: RoomSpec
    sample_rate: int = SAMPLE_RATE
    source: str = "speech"


@dataclass(frozen=True)
class MixtureExample:
    noisy: MultichannelWaveform
    clean_reverberant_ref: Waveform
    noise_ref: Waveform
    snr_db: float
    source_utterance_id: str = ""
    speech_image: np.ndarray | None = field(default=None, repr=False)
    noise_image: np.ndarray | None = field(default=None, repr=False)


def mic_array(center) -> np.ndarray:
    """Four mics on a 10 cm-diameter horizontal circle around ``center``."""
    angles = np.arange(N_MICS) * 2 * np.pi / N_MICS
    offsets = np.stack([np.cos(angles), np.sin(angles), np.zeros(N_MICS)], axis=1) * ARRAY_RADIUS
    return np.asarray(center)[None, :] + offsets


def sample_room(rng: np.random.Generator, seed=None) -> RoomSpec:
    length = rng.uniform(*ROOM_LENGTH)
    width = rng.uniform(*ROOM_WIDTH)
    height = rng.uniform(*ROOM_HEIGHT)
    rt60 = rng.uniform(*RT60_RANGE)
    margin = MIC_WALL_MIN + ARRAY_RADIUS
    while True:
        source = np.array([
            rng.uniform(SOURCE_WALL_MIN, length - SOURCE_WALL_MIN),
            rng.uniform(SOURCE_WALL_MIN, width - SOURCE_WALL_MIN),
            rng.uniform(1.2, 1.8),
        ])
        center = np.array([
            rng.uniform(margin, length - margin),
            rng.uniform(margin, width - margin),
            rng.uniform(0.9, 1.5),
        ])
        if np.linalg.norm(source - center) >= 0.5:
            break
    while True:
        noise = np.array([
            rng.uniform(0.5, length - 0.5),
            rng.uniform(0.5, width - 0.5),
            rng.uniform(0.5, height - 0.5),
        ])
        if np.linalg.norm(noise - center) >= 0.5 and np.linalg.norm(noise - source) >= 1.0:
            break
    return RoomSpec(
        dims=(float(length), float(width), float(height)),
        rt60=float(rt60),
        source_pos=tuple(float(v) for v in source),
        mic_positions=tuple(tuple(float(v) for v in m) for m in mic_array(center)),
        noise_pos=tuple(float(v) for v in noise),
        seed=seed,
    )


def eyring_absorption(dims, rt60: float) -> float:
    """Uniform wall absorption giving ``rt60`` under Eyring's formula (first guess)."""
    length, width, height = dims
    volume = length * width * height
    surface = 2 * (length * width + length * height + width * height)
    return float(1.0 - math.exp(-0.161 * volume / (surface * rt60)))


def image_radius(rt60: float) -> float:
    """Propagation distance kept by the image model: 0.75 * rt60 of travel (45 dB of decay)."""
    return TAIL_FRACTION * rt60 * SPEED_OF_SOUND


def _axis_images(coord: float, size: float, reach: float):
    n_max = int(np.ceil(reach / (2 * size))) + 1
    n = np.repeat(np.arange(-n_max, n_max + 1), 2)
    p = np.tile([0, 1], 2 * n_max + 1)
    return (1 - 2 * p) * coord + 2 * n * size, np.abs(n - p) + np.abs(n)


def _image_sources(source, dims, centre, radius: float):
    """Image positions and wall-hit counts for images within ``radius`` of ``centre``."""
    axes = [_axis_images(source[i], dims[i], radius + abs(source[i] - centre[i])) for i in range(3)]
    positions, counts = [], []
    (px, rx), (py, ry), (pz, rz) = axes
    dxy = (px[:, None] - centre[0]) ** 2 + (py[None, :] - centre[1]) ** 2
    ix, iy = np.nonzero(dxy <= radius ** 2)
    for k in range(pz.size):
        dz = (pz[k] - centre[2]) ** 2
        sel = dxy[ix, iy] + dz <= radius ** 2
        if not sel.any():
            continue
        gx, gy = ix[sel], iy[sel]
        positions.append(np.stack([px[gx], py[gy], np.full(gx.size, pz[k])], axis=1))
        counts.append(rx[gx] + ry[gy] + rz[k])
    return np.concatenate(positions), np.concatenate(counts)


def _fractional_kernel(frac: np.ndarray, taps: int = FRACTIONAL_TAPS) -> np.ndarray:
    """Hann-windowed sinc interpolators centred on each fractional offset."""
    half = taps // 2
    k = np.arange(-half, half + 1)[None, :] - frac[:, None]
    window = 0.5 * (1 + np.cos(np.pi * k / (half + 1)))
    return np.sinc(k) * window


def _render(images, counts, beta, mics, sample_rate, fractional):
    gains = beta ** counts
    dist = np.linalg.norm(images[None, :, :] - mics[:, None, :], axis=-1)
    delays = dist / SPEED_OF_SOUND * sample_rate
    amps = gains[None, :] / (4 * np.pi * dist)
    half = FRACTIONAL_TAPS // 2
    length = int(np.ceil(delays.max())) + half + 2
    irs = np.zeros((mics.shape[0], length))
    for m in range(mics.shape[0]):
        d, a = delays[m], amps[m]
        if fractional:
            by_delay = np.argsort(d)
            near, far = by_delay[:FRACTIONAL_IMAGES], by_delay[FRACTIONAL_IMAGES:]
        else:
            near, far = np.array([], dtype=int), np.arange(d.size)
        irs[m] += np.bincount(np.rint(d[far]).astype(int), weights=a[far], minlength=length)[:length]
        if near.size:
            centre = np.rint(d[near]).astype(int)
            kern = _fractional_kernel(d[near] - centre) * a[near, None]
            idx = centre[:, None] + np.arange(-half, half + 1)[None, :]
            valid = idx >= 0
            np.add.at(irs[m], idx[valid], kern[valid])
    return irs


def calibrate_absorption(room: RoomSpec, sample_rate: int = SAMPLE_RATE, iterations: int = 16) -> float:
    """Absorption whose simulated reference-mic RIR has Schroeder T60 == room.rt60.

    Shoebox image sources decay slower than Eyring's diffuse-field formula predicts,
    so the Eyring value is a lower bracket; T60 is monotone above it.
    """
    src = np.asarray(room.source_pos)
    mic = np.asarray(room.mic_positions[REF_CHANNEL])[None, :]
    images, counts = _image_sources(src, np.asarray(room.dims), mic[0], image_radius(room.rt60))
    lo = eyring_absorption(room.dims, room.rt60)
    hi = min(0.99, 3.0 * lo)
    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        ir = _render(images, counts, math.sqrt(1.0 - mid), mic, sample_rate, False)[0]
        try:
            measured = schroeder_rt60(ir, sample_rate)
        except ValueError:
            measured = 0.0
        if measured > room.rt60:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def simulate_rir(room: RoomSpec, source: str = "speech", absorption: float | None = None,
                 fractional: bool = True, sample_rate: int = SAMPLE_RATE) -> RirSet:
    """Image-source RIRs from ``source`` ("speech" or "noise") to every mic.

    Absorption defaults to ``room.absorption`` or, failing that, a calibrated value.
    The nearest images get band-limited fractional delays; the diffuse tail is
    placed on the nearest integer tap.
    """
    dims = np.asarray(room.dims)
    pos = room.source_pos if source == "speech" else room.noise_pos
    if pos is None:
        raise ValueError(f"room has no {source} position")
    if absorption is None:
        absorption = room.absorption if room.absorption is not None else calibrate_absorption(room, sample_rate)
    if not 0.0 < absorption <= 1.0:
        raise ValueError(f"absorption must be in (0, 1], got {absorption}")
    beta = math.sqrt(1.0 - absorption)
    mics = np.asarray(room.mic_positions)
    centre = mics.mean(axis=0)
    spread = np.linalg.norm(mics - centre, axis=1).max()
    images, counts = _image_sources(np.asarray(pos), dims, centre, image_radius(room.rt60) + spread)
    if beta == 0.0:
        keep = counts == 0
        images, counts = images[keep], counts[keep]
    irs = _render(images, counts, beta, mics, sample_rate, fractional)
    return RirSet(irs, room, sample_rate, source)


def schroeder_rt60(ir: np.ndarray, sample_rate: int = SAMPLE_RATE, db_range=(-5.0, -25.0)) -> float:
    """T60 extrapolated from a line fit to the backward-integrated energy decay."""
    energy = np.cumsum(ir[::-1] ** 2)[::-1]
    edc = 10 * np.log10(np.maximum(energy / energy[0], 1e-300))
    hi, lo = db_range
    idx = np.nonzero((edc <= hi) & (edc >= lo))[0]
    if idx.size < 2:
        raise ValueError("energy decay curve does not span the fit range")
    t = idx / sample_rate
    slope, _ = np.polyfit(t, edc[idx], 1)
    return float(-60.0 / slope)


def direct_path_delay(room: RoomSpec, source: str = "speech", sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    src = np.asarray(room.source_pos if source == "speech" else room.noise_pos)
    dist = np.linalg.norm(np.asarray(room.mic_positions) - src[None, :], axis=1)
    return dist / SPEED_OF_SOUND * sample_rate


def _convolve(x: np.ndarray, irs: np.ndarray, length: int) -> np.ndarray:
    return fftconvolve(x[None, :], irs, axes=-1)[:, :length]


def synthesize_mixture(clean, rirs: RirSet, noise, snr_db: float, rng: np.random.Generator,
                       noise_rirs: RirSet | None = None, source_utterance_id: str = "") -> MixtureExample:
    """Reverberant speech plus reverberant noise at ``snr_db`` on the reference channel.

    The noise image is defined as ``noisy - speech`` so the decomposition is exact in
    float64, which is also how the corpus stores it on disk.
    """
    clean = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    noise = np.asarray(getattr(noise, "samples", noise), dtype=np.float64)
    length = clean.size
    if noise.size < length:
        raise ValueError(f"noise has {noise.size} samples, need at least {length}")
    speech_img = _convolve(clean, rirs.impulse_responses, length)
    speech_energy = float(np.sum(speech_img[REF_CHANNEL] ** 2))
    if speech_energy == 0.0:
        raise ValueError("clean utterance is silent; SNR is undefined")
    n_irs = rirs.impulse_responses if noise_rirs is None else noise_rirs.impulse_responses
    tail = n_irs.shape[1] - 1
    want = min(noise.size, length + tail)
    start = int(rng.integers(0, noise.size - want + 1))
    seg = noise[start:start + want]
    noise_img = fftconvolve(seg[None, :], n_irs, axes=-1)[:, want - length:want]
    noise_energy = float(np.sum(noise_img[REF_CHANNEL] ** 2))
    if noise_energy == 0.0:
        raise ValueError("noise segment is silent")
    gain = math.sqrt(speech_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
    noisy = speech_img + gain * noise_img
    noise_img = noisy - speech_img
    return MixtureExample(
        noisy=MultichannelWaveform(noisy),
        clean_reverberant_ref=Waveform(speech_img[REF_CHANNEL]),
        noise_ref=Waveform(noise_img[REF_CHANNEL]),
        snr_db=float(snr_db),
        source_utterance_id=source_utterance_id,
        speech_image=speech_img,
        noise_image=noise_img,
    )


# -- corpus ---------------------------------------------------------------------


def entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def draw_entry(seed: int, index: int, n_clean: int, n_noise: int, snr_range=SNR_RANGE):
    """Random choices for corpus entry ``index``: (utterance pick, noise pick, room, SNR, rng).

    The returned generator continues the entry's stream (noise segment offset).
    """
    rng = entry_rng(seed, index)
    pick = int(rng.integers(n_clean))
    noise_pick = int(rng.integers(n_noise))
    room = sample_room(rng, seed=[seed, index])
    snr = float(rng.uniform(*snr_range))
    return pick, noise_pick, room, snr, rng


def _build_entry(args):
    (index, seed, out_dir, clean_items, noise_items, snr_range, prefix, keep_speaker, sequential) = args
    pick, noise_pick, room, snr, rng = draw_entry(seed, index, len(clean_items), len(noise_items), snr_range)
    utt_id, clean_path, speaker = clean_items[index % len(clean_items) if sequential else pick]
    noise_id, noise_path = noise_items[noise_pick]
    # calibrate once; the speech and noise IRs share the room's absorption
    room = replace(room, absorption=calibrate_absorption(room))
    clean = read_wav(clean_path)
    noise = read_wav(noise_path)
    mix = synthesize_mixture(clean, simulate_rir(room, "speech"), noise, snr, rng,
                             noise_rirs=simulate_rir(room, "noise"), source_utterance_id=utt_id)
    entry_id = f"{prefix}{index:06d}"
    paths = {}
    for name, arr in (("noisy", mix.noisy.channels), ("speech_image", mix.speech_image),
                      ("noise_image", mix.noise_image)):
        rel = Path(name) / f"{entry_id}.wav"
        write_wav(Path(out_dir) / rel, arr, float64=True)
        paths[name] = str(rel)
    entry = {
        "id": entry_id,
        "source_utterance_id": utt_id,
        "noise_id": noise_id,
        "snr_db": snr,
        "seed": [seed, index],
        "room": room.to_dict(),
        **paths,
    }
    if keep_speaker:
        entry["speaker_id"] = speaker
    return entry


def build_ssl_corpus(clean_utterances, noise_bank, count: int, seed: int, out_dir,
                     snr_range=SNR_RANGE, prefix: str = "ssl", keep_speaker: bool = False,
                     workers: int = 1, sequential: bool = False) -> list[dict]:
    """Simulate ``count`` unlabeled mixtures and write WAVs plus ``manifest.jsonl``.

    ``clean_utterances`` items are ``(utt_id, wav_path, speaker)``; the speaker is
    dropped unless ``keep_speaker`` (evaluation corpora need it). With
    ``sequential`` entry ``i`` uses utterance ``i mod len`` instead of a random one.
    ``noise_bank`` items are ``(noise_id, wav_path)``.
    Entry ``i`` draws everything from ``SeedSequence([seed, i])``.
    """
    clean_items = [tuple(u) if len(u) == 3 else (u[0], u[1], None) for u in clean_utterances]
    noise_items = [tuple(n) for n in noise_bank]
    if not clean_items or not noise_items:
        raise ValueError("clean utterance pool and noise bank must both be non-empty")
    if count < 1:
        raise ValueError("count must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, seed, str(out_dir), clean_items, noise_items, tuple(snr_range), prefix, keep_speaker, sequential)
            for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_build_entry, jobs))
    else:
        entries = [_build_entry(j) for j in jobs]
    write_manifest(out_dir / "manifest.jsonl", entries)
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_mixture(entry: dict, root) -> MixtureExample:
    root = Path(root)
    noisy = read_wav(root / entry["noisy"])
    speech = read_wav(root / entry["speech_image"])
    noise = read_wav(root / entry["noise_image"])
    return MixtureExample(
        noisy=MultichannelWaveform(noisy),
        clean_reverberant_ref=Waveform(speech[REF_CHANNEL]),
        noise_ref=Waveform(noise[REF_CHANNEL]),
        snr_db=entry["snr_db"],
        source_utterance_id=entry.get("source_utterance_id", ""),
        speech_image=speech,
        noise_image=noise,
    )

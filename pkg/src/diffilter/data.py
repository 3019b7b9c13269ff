"""In-memory views of simulated corpora, MWF targets and trial lists."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import si_sdr
from .mwf import oracle_mwf
from .room_sim import REF_CHANNEL, load_mixture, read_manifest
from .signal_core import read_wav, write_wav

TARGET_DIR = "mwf"
TARGET_MANIFEST = "mwf_manifest.jsonl"


class DataError(RuntimeError):
    pass


@dataclass
class Entry:
    id: str
    noisy: np.ndarray          # (C, T) float32
    speech: np.ndarray         # (T,) reference-channel speech image
    noise: np.ndarray          # (T,) reference-channel noise image
    target: np.ndarray | None  # (T,) oracle MWF output
    speaker: str | None
    source_utterance_id: str = ""

    @property
    def length(self) -> int:
        return self.noisy.shape[-1]


class Corpus:
    """All entries of one manifest, loaded eagerly (desk-scale corpora fit in memory)."""

    def __init__(self, root, require_targets: bool = False):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise DataError(f"no manifest.jsonl under {self.root}")
        self.records = read_manifest(manifest)
        if not self.records:
            raise DataError(f"{manifest} is empty")
        targets = {}
        tpath = self.root / TARGET_MANIFEST
        if tpath.exists():
            targets = {r["id"]: r for r in read_manifest(tpath)}
        elif require_targets:
            raise DataError(f"{self.root} has no MWF targets; run mwf-targets first")
        self.entries: list[Entry] = []
        for rec in self.records:
            try:
                noisy = read_wav(self.root / rec["noisy"]).astype(np.float32)
                speech = read_wav(self.root / rec["speech_image"])[REF_CHANNEL].astype(np.float32)
                noise = read_wav(self.root / rec["noise_image"])[REF_CHANNEL].astype(np.float32)
                target = None
                if rec["id"] in targets:
                    target = read_wav(self.root / targets[rec["id"]]["target"]).astype(np.float32)
            except (OSError, ValueError) as exc:
                raise DataError(f"cannot load entry {rec.get('id')}: {exc}") from exc
            if require_targets and target is None:
                raise DataError(f"entry {rec['id']} has no MWF target")
            self.entries.append(Entry(rec["id"], noisy, speech, noise, target, rec.get("speaker_id"),
                                      rec.get("source_utterance_id", "")))
        self.index = {e.id: i for i, e in enumerate(self.entries)}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> Entry:
        return self.entries[i]

    def by_id(self, entry_id: str) -> Entry:
        return self.entries[self.index[entry_id]]


def compute_mwf_targets(root) -> list[dict]:
    """Oracle rank-1 MWF output for every manifest entry, written under ``root/mwf``."""
    root = Path(root)
    rows = []
    for rec in read_manifest(root / "manifest.jsonl"):
        mix = load_mixture(rec, root)
        est = oracle_mwf(mix).samples
        rel = Path(TARGET_DIR) / f"{rec['id']}.wav"
        write_wav(root / rel, est)
        ref = mix.clean_reverberant_ref.samples
        rows.append({
            "id": rec["id"],
            "target": str(rel),
            "si_sdr_noisy": si_sdr(mix.noisy.channels[REF_CHANNEL], ref),
            "si_sdr_mwf": si_sdr(est, ref),
        })
    with open(root / TARGET_MANIFEST, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return rows


def crop(x: np.ndarray, start: int, length: int) -> np.ndarray:
    return x[..., start:start + length]


def random_start(rng: np.random.Generator, total: int, length: int) -> int:
    if total < length:
        raise DataError(f"utterance of {total} samples is shorter than the {length}-sample segment")
    return int(rng.integers(0, total - length + 1))


# -- trial protocols ---------------------------------------------------------------


def make_trials(corpus: Corpus, rng: np.random.Generator, per_entry: int = 2) -> list[tuple[int, str, str]]:
    """Balanced target/non-target trials over a speaker-labelled corpus."""
    by_spk: dict[str, list[str]] = {}
    for e in corpus.entries:
        if e.speaker is None:
            raise DataError(f"entry {e.id} has no speaker label; trials need a labelled corpus")
        by_spk.setdefault(e.speaker, []).append(e.id)
    if len(by_spk) < 2:
        raise DataError("trials need at least two speakers")
    trials = set()
    for e in corpus.entries:
        same = [i for i in by_spk[e.speaker] if i != e.id]
        other = [i for s, ids in by_spk.items() if s != e.speaker for i in ids]
        for _ in range(per_entry):
            if same:
                trials.add((1, *sorted((e.id, same[int(rng.integers(len(same)))]))))
            trials.add((0, *sorted((e.id, other[int(rng.integers(len(other)))]))))
    return sorted(trials, key=lambda t: (t[1], t[2], t[0]))


def write_trials(path, trials):
    with open(path, "w") as fh:
        for label, enroll, test in trials:
            fh.write(f"{label} {enroll} {test}\n")


def read_trials(path) -> list[tuple[int, str, str]]:
    trials = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise DataError(f"{path}:{n}: expected '<0|1> <enroll> <test>', got {line!r}")
        trials.append((int(parts[0]), parts[1], parts[2]))
    return trials


def check_trials(trials, known_ids) -> None:
    missing = sorted({i for _, a, b in trials for i in (a, b) if i not in known_ids})
    if missing:
        raise DataError(f"{len(missing)} trial ids not in the evaluation manifest: {', '.join(missing[:10])}")

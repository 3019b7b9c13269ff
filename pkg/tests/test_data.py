import json

import numpy as np
import pytest

from diffilter.data import (Corpus, DataError, check_trials, compute_mwf_targets, make_trials, random_start,
                            read_trials, write_trials)
from diffilter.metrics import si_sdr
from diffilter.room_sim import build_ssl_corpus
from diffilter.synth import scan_noise_dir, scan_speech_dir, write_noise_bank, write_speech_corpus


@pytest.fixture(scope="module")
def labelled(tmp_path_factory):
    root = tmp_path_factory.mktemp("lab")
    speech = write_speech_corpus(root / "speech", 3, 2, 1.2, seed=2)
    noise = write_noise_bank(root / "noise", 2, 3.0, seed=2)
    build_ssl_corpus(speech, noise, 6, seed=2, out_dir=root / "c", keep_speaker=True, sequential=True)
    return root


def test_synthetic_sources_scan_back(labelled):
    speech = scan_speech_dir(labelled / "speech")
    assert len(speech) == 6 and len({s for _, _, s in speech}) == 3
    assert len(scan_noise_dir(labelled / "noise")) == 2


def test_corpus_loads_and_targets(labelled):
    c = Corpus(labelled / "c")
    assert len(c) == 6 and all(e.target is None for e in c.entries)
    with pytest.raises(DataError, match="mwf-targets"):
        Corpus(labelled / "c", require_targets=True)
    rows = compute_mwf_targets(labelled / "c")
    c = Corpus(labelled / "c", require_targets=True)
    for e, row in zip(c.entries, rows):
        assert e.target.shape == e.speech.shape
        assert si_sdr(e.target, e.speech) == pytest.approx(row["si_sdr_mwf"], abs=1e-3)
    assert c.by_id(c[2].id) is c[2]
    assert {e.speaker for e in c.entries} == {"spk000", "spk001", "spk002"}


def test_corpus_errors(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        Corpus(tmp_path)
    (tmp_path / "manifest.jsonl").write_text(json.dumps({"id": "x", "noisy": "missing.wav",
                                                         "speech_image": "a", "noise_image": "b"}) + "\n")
    with pytest.raises(DataError, match="cannot load"):
        Corpus(tmp_path)


def test_trials_balanced_and_round_trip(labelled, tmp_path):
    c = Corpus(labelled / "c")
    trials = make_trials(c, np.random.default_rng(0), 2)
    labels = [t[0] for t in trials]
    assert 0 < sum(labels) < len(labels)
    for lab, a, b in trials:
        assert a != b and (c.by_id(a).speaker == c.by_id(b).speaker) == bool(lab)
    write_trials(tmp_path / "t.txt", trials)
    assert read_trials(tmp_path / "t.txt") == trials
    check_trials(trials, set(c.index))
    with pytest.raises(DataError, match="not in the evaluation manifest"):
        check_trials([(1, "ghost", trials[0][1])], set(c.index))


def test_trial_file_format_errors(tmp_path):
    (tmp_path / "t.txt").write_text("2 a b\n")
    with pytest.raises(DataError, match="expected"):
        read_trials(tmp_path / "t.txt")


def test_unlabelled_corpus_cannot_make_trials(tmp_path, labelled):
    speech = scan_speech_dir(labelled / "speech")
    noise = scan_noise_dir(labelled / "noise")
    build_ssl_corpus(speech, noise, 2, 3, tmp_path / "u")
    with pytest.raises(DataError, match="speaker label"):
        make_trials(Corpus(tmp_path / "u"), np.random.default_rng(0))


def test_random_start_bounds(rng):
    assert random_start(rng, 10, 10) == 0
    with pytest.raises(DataError):
        random_start(rng, 5, 10)

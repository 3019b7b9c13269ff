"""Command-line driver.

    diffilter [--preset desk|paper] [--config cfg.json] [--seed N] [--out-dir DIR] <command> ...

Commands: simulate, mwf-targets, train-enhancer, train-sv, train-joint, enhance,
score, evaluate, pipeline. Every command reads and writes inside ``--out-dir``:

    sources/   speech and noise WAVs (synthetic unless DIFFILTER_DATA_DIR is set)
    corpora/   ssl/, svmix/ and eval/ mixture corpora with manifests and MWF targets
    models/    checkpoints            logs/    JSON-lines training traces
    report/    report.csv, report.json, score files and PNG figures

Exit codes: 0 ok, 2 bad config, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import ConfigError, load_config
from .data import (Corpus, DataError, check_trials, compute_mwf_targets, make_trials, read_trials,
                   write_trials)
from .metrics import bss_eval_sir_sdr, det_curve, eer, write_score_file
from .nets import CheckpointError, EcapaConfig, TcnConfig, load_checkpoint
from .room_sim import build_ssl_corpus
from .synth import scan_noise_dir, scan_speech_dir, write_noise_bank, write_speech_corpus
from .training import (EnhancerTrainPlan, JointPlan, JsonlLog, SvPlan, TrainingDivergence, cosine_scores,
                       embed_waves, enhance_entries, pretrain_sv, train_joint, train_stage)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DATA_ENV = "DIFFILTER_DATA_DIR"
SYSTEMS = ("Unprocessed", "Oracle Rank-1 MWF", "Conditioning-only", "Diff-Filter", "Diff-Filter joint",
           "Diff-Filter SSL")
STAGES = ("simulate", "mwf-targets", "enhancer-stage1", "enhancer-stage2", "train-sv", "train-ssl",
          "train-joint", "evaluate")


class Workspace:
    def __init__(self, root, cfg: dict, seed: int):
        self.root = Path(root)
        self.cfg = cfg
        self.seed = seed

    def __getattr__(self, name):
        raise AttributeError(name)

    def corpus_dir(self, kind: str) -> Path:
        return self.root / "corpora" / kind

    def model_dir(self, *parts) -> Path:
        return self.root.joinpath("models", *parts)

    def log(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.jsonl"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def tcn(self) -> TcnConfig:
        return TcnConfig(**self.cfg["tcn"])

    @property
    def ecapa(self) -> EcapaConfig:
        return EcapaConfig(**self.cfg["ecapa"])


# -- sources ---------------------------------------------------------------------------------


def _split_speakers(items, n_eval: int):
    by_spk: dict[str, list] = {}
    for it in items:
        by_spk.setdefault(it[2], []).append(it)
    train, held = [], []
    for spk in sorted(by_spk):
        utts = sorted(by_spk[spk])
        if len(utts) <= n_eval:
            raise DataError(f"speaker {spk} has {len(utts)} utterances; need more than {n_eval}")
        train += utts[:-n_eval]
        held += utts[-n_eval:]
    return train, held


def sources(ws: Workspace, speech_dir=None, noise_dir=None) -> dict:
    """Resolve (or synthesise) the speech and noise pools used by every corpus."""
    d = ws.cfg["data"]
    env = os.environ.get(DATA_ENV)
    speech_dir = speech_dir or (Path(env) / "speech" if env else None)
    noise_dir = noise_dir or (Path(env) / "noise" if env else None)
    src = ws.root / "sources"
    if noise_dir is not None:
        if not Path(noise_dir).is_dir():
            raise DataError(f"noise bank {noise_dir} does not exist; pass --noise-dir or set {DATA_ENV}")
        noise = scan_noise_dir(noise_dir)
        if not noise:
            raise DataError(f"noise bank {noise_dir} holds no .wav files")
    else:
        noise = write_noise_bank(src / "noise", d["noise_count"], d["noise_seconds"], ws.seed)
    if speech_dir is not None:
        if not Path(speech_dir).is_dir():
            raise DataError(f"speech directory {speech_dir} does not exist")
        labelled = scan_speech_dir(speech_dir)
        ssl_root = Path(speech_dir).parent / "ssl_speech"
        ssl = scan_speech_dir(ssl_root) if ssl_root.is_dir() else labelled
        if not labelled:
            raise DataError(f"speech directory {speech_dir} holds no .wav files")
    else:
        labelled = write_speech_corpus(src / "speech_sv", d["sv_speakers"], d["sv_utterances"] + d["eval_utterances"],
                                       d["utterance_seconds"], ws.seed, prefix="sv", stream=101)
        ssl = write_speech_corpus(src / "speech_ssl", d["ssl_speakers"], d["ssl_utterances"],
                                  d["utterance_seconds"], ws.seed, prefix="ssl", stream=102)
    train, held = _split_speakers(labelled, d["eval_utterances"])
    return {"sv_train": train, "eval": held, "ssl": ssl, "noise": noise}


# -- stage implementations ---------------------------------------------------------------------


def run_simulate(ws: Workspace, kinds=("ssl", "svmix", "eval"), count=None, speech_dir=None, noise_dir=None):
    if count is not None and count < 1:
        raise ConfigError("--count must be a positive integer")
    src = sources(ws, speech_dir, noise_dir)
    d = ws.cfg["data"]
    out = {}
    for kind in kinds:
        if kind == "ssl":
            n = count if count is not None else d["ssl_count"]
            entries = build_ssl_corpus(src["ssl"], src["noise"], n, ws.seed, ws.corpus_dir("ssl"),
                                       d["snr_range"], prefix="ssl", workers=d["workers"])
        elif kind == "svmix":
            entries = build_ssl_corpus(src["sv_train"], src["noise"], len(src["sv_train"]), ws.seed + 1,
                                       ws.corpus_dir("svmix"), d["snr_range"], prefix="svmix", keep_speaker=True,
                                       workers=d["workers"], sequential=True)
        elif kind == "eval":
            entries = build_ssl_corpus(src["eval"], src["noise"], len(src["eval"]), ws.seed + 2,
                                       ws.corpus_dir("eval"), d["snr_range"], prefix="eval", keep_speaker=True,
                                       workers=d["workers"], sequential=True)
        else:
            raise ConfigError(f"unknown corpus kind {kind!r}")
        out[kind] = len(entries)
    return out


def run_mwf_targets(ws: Workspace, kinds=("ssl", "svmix", "eval")):
    out = {}
    for kind in kinds:
        root = ws.corpus_dir(kind)
        if not (root / "manifest.jsonl").exists():
            raise DataError(f"{root} has no manifest; run simulate first")
        rows = compute_mwf_targets(root)
        out[kind] = {"entries": len(rows), "mean_si_sdr_noisy": float(np.mean([r["si_sdr_noisy"] for r in rows])),
                     "mean_si_sdr_mwf": float(np.mean([r["si_sdr_mwf"] for r in rows]))}
    return out


def _plan(ws: Workspace) -> EnhancerTrainPlan:
    return EnhancerTrainPlan.from_dict(ws.cfg["enhancer"])


def run_train_enhancer(ws: Workspace, stage: int):
    from .nets import DiffFilter, save_checkpoint

    corpus = Corpus(ws.corpus_dir("ssl"), require_targets=True)
    plan = _plan(ws)
    out = ws.model_dir("enhancer")
    if stage == 1:
        torch.manual_seed(ws.seed)
        model = DiffFilter(ws.tcn)
    else:
        ckpt = out / "stage1"
        if not (ckpt / "config.json").exists():
            raise DataError(f"stage 2 needs the stage-1 checkpoint at {ckpt}")
        model = load_checkpoint(ckpt)
    history = train_stage(model, corpus, plan, stage, ws.seed, out, JsonlLog(ws.log(f"enhancer_stage{stage}")))
    save_checkpoint(out / f"stage{stage}", model, {"stage": stage, "epochs": len(history)})
    return {"stage": stage, "epoch_loss": history}


def run_train_sv(ws: Workspace, speech_dir=None):
    src = sources_cached(ws, speech_dir)
    plan = SvPlan(**ws.cfg["sv"])
    log = JsonlLog(ws.log("sv"))
    mix_root = ws.corpus_dir("svmix")
    # reverberant noisy copies of the training speakers, when simulate has built them
    mixtures = Corpus(mix_root) if (mix_root / "manifest.jsonl").exists() else None
    pretrain_sv(src["sv_train"], plan, ws.seed, ws.ecapa, ws.model_dir("sv"), log, mixtures=mixtures)
    return {"iterations": plan.iterations, "final_loss": log.rows[-1]["loss"] if log.rows else None}


def sources_cached(ws: Workspace, speech_dir=None):
    """Labelled utterance lists without rewriting synthetic sources that already exist."""
    src_dir = ws.root / "sources" / "speech_sv"
    if speech_dir is None and not os.environ.get(DATA_ENV) and src_dir.is_dir():
        items = scan_speech_dir(src_dir)
        train, held = _split_speakers(items, ws.cfg["data"]["eval_utterances"])
        return {"sv_train": train, "eval": held}
    return sources(ws, speech_dir)


def _load_pair(enh_dir, emb_dir):
    return load_checkpoint(enh_dir), load_checkpoint(emb_dir)


def run_train_joint(ws: Workspace, mode: str):
    if mode not in ("ssl", "joint"):
        raise ConfigError("mode must be 'ssl' or 'joint'")
    model, embedder = _load_pair(ws.model_dir("enhancer", "stage2"), ws.model_dir("sv"))
    if mode == "ssl":
        corpus = Corpus(ws.corpus_dir("ssl"))
    else:
        corpus = Corpus(ws.corpus_dir("svmix"))
    plan = JointPlan(**ws.cfg[mode])
    log = JsonlLog(ws.log(mode))
    train_joint(model, embedder, corpus, plan, ws.seed, labelled=(mode == "joint"), out_dir=ws.model_dir(mode),
                log=log)
    return {"mode": mode, "iterations": plan.iterations, "final_loss": log.rows[-1]["loss"] if log.rows else None}


def run_enhance(ws: Workspace, corpus_dir, checkpoint, n_steps: int, out_dir):
    corpus = Corpus(corpus_dir)
    model = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    from .signal_core import write_wav

    t0 = time.perf_counter()
    waves = enhance_entries(model, corpus.entries, n_steps, ws.seed)
    elapsed = time.perf_counter() - t0
    for key, wav in waves.items():
        write_wav(out_dir / f"{key}.wav", wav)
    audio = sum(e.length for e in corpus.entries) / 16000
    timing = {"entries": len(waves), "n_steps": n_steps, "seconds": elapsed, "audio_seconds": audio,
              "real_time_factor": elapsed / audio if audio else None}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2))
    return timing


def _trials(ws: Workspace, corpus: Corpus, trials_path=None):
    if trials_path is not None:
        trials = read_trials(trials_path)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([ws.seed, 9]))
        trials = make_trials(corpus, rng, ws.cfg["eval"]["trials_per_entry"])
    check_trials(trials, set(corpus.index))
    return trials


def run_score(ws: Workspace, corpus_dir, embedder_dir, out_path, trials_path=None, enhancer_dir=None, n_steps=None):
    corpus = Corpus(corpus_dir)
    trials = _trials(ws, corpus, trials_path)
    embedder = load_checkpoint(embedder_dir)
    if enhancer_dir is not None:
        model = load_checkpoint(enhancer_dir)
        waves = enhance_entries(model, corpus.entries, n_steps or ws.cfg["eval"]["n_steps"], ws.seed)
    else:
        waves = {e.id: e.noisy[0] for e in corpus.entries}
    scores = cosine_scores(embed_waves(embedder, waves), trials)
    write_score_file(out_path, [(lab, a, b, s) for (lab, a, b), s in zip(trials, scores)])
    return {"trials": len(trials), "eer": eer(scores, [t[0] for t in trials])}


def _system_waves(ws: Workspace, corpus: Corpus, system: str):
    n_steps = ws.cfg["eval"]["n_steps"]
    if system == "Unprocessed":
        return {e.id: e.noisy[0].astype(np.float64) for e in corpus.entries}, ws.model_dir("sv")
    if system == "Oracle Rank-1 MWF":
        if any(e.target is None for e in corpus.entries):
            raise DataError("evaluation corpus has no MWF targets; run mwf-targets")
        return {e.id: e.target.astype(np.float64) for e in corpus.entries}, ws.model_dir("sv")
    if system in ("Conditioning-only", "Diff-Filter"):
        model = load_checkpoint(ws.model_dir("enhancer", "stage2"))
        return enhance_entries(model, corpus.entries, n_steps, ws.seed,
                               conditioning_only=system == "Conditioning-only"), ws.model_dir("sv")
    mode = "joint" if system == "Diff-Filter joint" else "ssl"
    model = load_checkpoint(ws.model_dir(mode, "enhancer"))
    return enhance_entries(model, corpus.entries, n_steps, ws.seed), ws.model_dir(mode, "embedder")


def run_evaluate(ws: Workspace, trials_path=None, systems=SYSTEMS):
    corpus = Corpus(ws.corpus_dir("eval"))
    trials = _trials(ws, corpus, trials_path)
    labels = [t[0] for t in trials]
    report_dir = ws.report_dir
    (report_dir / "scores").mkdir(parents=True, exist_ok=True)
    write_trials(report_dir / "trials.txt", trials)
    flen = ws.cfg["eval"]["bss_filter_length"]
    rows, curves = [], {}
    for system in systems:
        waves, emb_dir = _system_waves(ws, corpus, system)
        embedder = load_checkpoint(emb_dir)
        scores = cosine_scores(embed_waves(embedder, waves), trials)
        slug = system.lower().replace(" ", "_").replace("-", "_")
        write_score_file(report_dir / "scores" / f"{slug}.txt",
                         [(lab, a, b, s) for (lab, a, b), s in zip(trials, scores)])
        sir, sdr = zip(*(bss_eval_sir_sdr(waves[e.id], e.speech, e.noise, flen) for e in corpus.entries))
        curves[system] = det_curve(scores, labels)
        curves[system].to_csv(report_dir / "scores" / f"{slug}_det.csv")
        rows.append({"system": system, "eer_percent": round(100 * eer(scores, labels), 2),
                     "mean_sir_db": round(float(np.mean(sir)), 2), "mean_sdr_db": round(float(np.mean(sdr)), 2)})
    report = {"trials": len(trials), "targets": int(sum(labels)), "entries": len(corpus), "rows": rows}
    (report_dir / "report.json").write_text(json.dumps(report, indent=2))
    with open(report_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["system", "eer_percent", "mean_sir_db", "mean_sdr_db"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: f"{v:.2f}" if isinstance(v, float) else v for k, v in r.items()})
    plotting.det_plot(curves, report_dir / "det.png", "DET, evaluation trials")
    plotting.metric_bars(rows, "eer_percent", report_dir / "eer.png", "EER (%)")
    plotting.metric_bars(rows, "mean_sir_db", report_dir / "sir.png", "mean SIR (dB)")
    plotting.metric_bars(rows, "mean_sdr_db", report_dir / "sdr.png", "mean SDR (dB)")
    return report


# -- pipeline with a resumable state file ------------------------------------------------------------


def config_digest(cfg: dict, seed: int) -> str:
    return hashlib.sha256(json.dumps({"cfg": cfg, "seed": seed}, sort_keys=True).encode()).hexdigest()


def _state_path(ws: Workspace) -> Path:
    return ws.root / "state.json"


def read_state(ws: Workspace) -> dict:
    path = _state_path(ws)
    return json.loads(path.read_text()) if path.exists() else {}


def _write_state(ws: Workspace, state: dict):
    ws.root.mkdir(parents=True, exist_ok=True)
    tmp = _state_path(ws).with_suffix(".tmp")
    tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
    tmp.replace(_state_path(ws))


STAGE_LOGS = {"enhancer-stage1": "enhancer_stage1", "enhancer-stage2": "enhancer_stage2", "train-sv": "sv",
              "train-ssl": "ssl", "train-joint": "joint"}


def run_pipeline(ws: Workspace, stop_after: str | None = None, speech_dir=None, noise_dir=None):
    digest = config_digest(ws.cfg, ws.seed)
    state = read_state(ws)
    if state and state.get("config_digest") != digest:
        raise ConfigError(f"{ws.root} holds a run with a different config or seed; use a fresh --out-dir")
    state.setdefault("config_digest", digest)
    state.setdefault("completed", [])
    actions = {
        "simulate": lambda: run_simulate(ws, speech_dir=speech_dir, noise_dir=noise_dir),
        "mwf-targets": lambda: run_mwf_targets(ws),
        "enhancer-stage1": lambda: run_train_enhancer(ws, 1),
        "enhancer-stage2": lambda: run_train_enhancer(ws, 2),
        "train-sv": lambda: run_train_sv(ws, speech_dir),
        "train-ssl": lambda: run_train_joint(ws, "ssl"),
        "train-joint": lambda: run_train_joint(ws, "joint"),
        "evaluate": lambda: run_evaluate(ws),
    }
    for stage in STAGES:
        if stage in state["completed"]:
            continue
        state["current"] = stage
        _write_state(ws, state)
        try:
            actions[stage]()
        except Exception as exc:
            log = ws.log(STAGE_LOGS[stage]) if stage in STAGE_LOGS else None
            exc.add_note(f"pipeline stage '{stage}' failed" + (f"; log: {log}" if log else ""))
            raise
        state["completed"].append(stage)
        state.pop("current", None)
        _write_state(ws, state)
        if stop_after == stage:
            break
    return state


# -- argument parsing ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffilter", description="Diffusion multichannel enhancement + SV pipeline")
    p.add_argument("--config", help="JSON file merged over the preset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--out-dir", default="diffilter-run")
    p.add_argument("--i-know-this-is-huge", action="store_true", help="allow --preset paper")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="build mixture corpora")
    s.add_argument("--kind", choices=("ssl", "svmix", "eval", "all"), default="all")
    s.add_argument("--count", type=int, help="number of SSL mixtures (overrides data.ssl_count)")
    s.add_argument("--speech-dir")
    s.add_argument("--noise-dir")

    s = sub.add_parser("mwf-targets", help="oracle rank-1 MWF targets for built corpora")
    s.add_argument("--kind", choices=("ssl", "svmix", "eval", "all"), default="all")

    s = sub.add_parser("train-enhancer", help="two-stage enhancer training")
    s.add_argument("--stage", choices=("1", "2", "all"), default="all")

    s = sub.add_parser("train-sv", help="ECAPA-TDNN pretraining")
    s.add_argument("--speech-dir")

    s = sub.add_parser("train-joint", help="joint fine-tuning of enhancer and embedder")
    s.add_argument("--mode", choices=("ssl", "joint"), default="ssl")

    s = sub.add_parser("enhance", help="enhance a corpus with a checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n-steps", type=int, default=30)
    s.add_argument("--output", required=True)

    s = sub.add_parser("score", help="cosine-score a trial list")
    s.add_argument("--corpus", required=True)
    s.add_argument("--embedder", required=True)
    s.add_argument("--enhancer")
    s.add_argument("--trials")
    s.add_argument("--n-steps", type=int)
    s.add_argument("--output", required=True)

    s = sub.add_parser("evaluate", help="score all systems and write the report")
    s.add_argument("--trials")

    s = sub.add_parser("pipeline", help="run every stage, resuming from state.json")
    s.add_argument("--stop-after", choices=STAGES)
    s.add_argument("--speech-dir")
    s.add_argument("--noise-dir")
    return p


def _kinds(value: str):
    return ("ssl", "svmix", "eval") if value == "all" else (value,)


def dispatch(args, ws: Workspace):
    cmd = args.command
    if cmd == "simulate":
        return run_simulate(ws, _kinds(args.kind), args.count, args.speech_dir, args.noise_dir)
    if cmd == "mwf-targets":
        return run_mwf_targets(ws, _kinds(args.kind))
    if cmd == "train-enhancer":
        stages = (1, 2) if args.stage == "all" else (int(args.stage),)
        return [run_train_enhancer(ws, s) for s in stages]
    if cmd == "train-sv":
        return run_train_sv(ws, args.speech_dir)
    if cmd == "train-joint":
        return run_train_joint(ws, args.mode)
    if cmd == "enhance":
        return run_enhance(ws, args.corpus, args.checkpoint, args.n_steps, args.output)
    if cmd == "score":
        return run_score(ws, args.corpus, args.embedder, args.output, args.trials, args.enhancer, args.n_steps)
    if cmd == "evaluate":
        return run_evaluate(ws, args.trials)
    if cmd == "pipeline":
        return run_pipeline(ws, args.stop_after, args.speech_dir, args.noise_dir)
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.preset == "paper" and not args.i_know_this_is_huge:
            raise ConfigError("--preset paper trains for days on full-size data; "
                              "add --i-know-this-is-huge to run it anyway")
        cfg = load_config(args.preset, args.config)
        ws = Workspace(args.out_dir, cfg, args.seed)
        torch.manual_seed(args.seed)
        result = dispatch(args, ws)
    except ConfigError as exc:
        print(f"diffilter: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"diffilter: training diverged: {exc}", file=sys.stderr)
        for note in getattr(exc, "__notes__", []):
            print(f"  {note}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"diffilter: data error: {exc}", file=sys.stderr)
        for note in getattr(exc, "__notes__", []):
            print(f"  {note}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

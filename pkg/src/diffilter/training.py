"""Optimisation loops: two-stage enhancer training, SV pretraining and joint/SSL fine-tuning.

Every loop derives its randomness from ``SeedSequence([seed, ...])`` keyed on
stage/epoch/iteration, so reruns with the same seed reproduce the loss traces.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Corpus, DataError, crop, random_start
from .diffusion import INFERENCE_STEPS, dsm_loss, reverse_sample
from .metrics import cosine_pair_loss, eer, eer_loss, si_sdr_loss
from .nets import (AamSoftmax, DiffFilter, EcapaConfig, EcapaTdnn, TcnConfig, load_checkpoint,
                   save_checkpoint)
from .room_sim import REF_CHANNEL
from .signal_core import SAMPLE_RATE, SPEED_FACTORS, mel_features_torch, read_wav, speed_perturb, time_mask

GRAD_CLIP = 5.0
SV_BASE_LR = 1e-8
SV_MAX_LR = 1e-3
SSL_LR = 1e-3
SSL_WEIGHT_DECAY = 1e-4
SSL_STEPS = 5
SSL_REANCHOR = 1000


class TrainingDivergence(RuntimeError):
    pass


class JsonlLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(0, 2 ** 62)))


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


# -- enhancer -----------------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    epochs: int
    lr: float
    lr_decay: float = 1.0
    decay_every: int = 5


@dataclass(frozen=True)
class EnhancerTrainPlan:
    stage1: StagePlan = StagePlan(100, 1e-2, 0.85, 5)
    stage2: StagePlan = StagePlan(500, 1e-4)
    batch_size: int = 2
    segment_seconds: float = 4.0
    grad_clip: float = GRAD_CLIP
    sisdr_init: float = 1e-3
    sisdr_step: float = 1e-4
    sisdr_every: int = 5
    fast_ramp: bool = False

    @property
    def total_epochs(self) -> int:
        return self.stage1.epochs + self.stage2.epochs

    @classmethod
    def from_dict(cls, d: dict) -> "EnhancerTrainPlan":
        d = dict(d)
        for key in ("stage1", "stage2"):
            if key in d and isinstance(d[key], dict):
                d[key] = StagePlan(**d[key])
        return cls(**d)


def sisdr_weight(epoch: int, init: float = 1e-3, step: float = 1e-4, every: int = 5,
                 fast_ramp: bool = False, total_epochs: int | None = None) -> float:
    """Weight on the separation loss: ``init`` raised by ``step`` every ``every`` epochs, capped at 1.

    ``fast_ramp`` rescales the increment so the cap is hit at the last of ``total_epochs``.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if fast_ramp:
        if not total_epochs:
            raise ValueError("fast_ramp needs total_epochs")
        steps = max(1, (total_epochs - 1) // every)
        step = (1.0 - init) / steps
    return min(1.0, init + step * (epoch // every))


def normaliser(noisy_ref: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(noisy_ref, dtype=np.float64))))
    return 1.0 / rms if rms > 0 else 1.0


def enhancer_batch(entries, rng: np.random.Generator, seg_len: int, ref_channel: int = 0) -> dict:
    """Crop, scale to unit reference RMS and stack a list of corpus entries."""
    cols = {k: [] for k in ("noisy", "target", "speech", "noise")}
    scales = []
    for e in entries:
        if e.target is None:
            raise DataError(f"entry {e.id} has no MWF target")
        length = min(seg_len, e.length)
        start = random_start(rng, e.length, length)
        noisy = crop(e.noisy, start, length)
        scale = normaliser(noisy[ref_channel])
        scales.append(scale)
        cols["noisy"].append(noisy * scale)
        for key, arr in (("target", e.target), ("speech", e.speech), ("noise", e.noise)):
            cols[key].append(crop(arr, start, length) * scale)
    width = min(x.shape[-1] for x in cols["noisy"])
    out = {k: torch.from_numpy(np.stack([x[..., :width] for x in v]).astype(np.float32)) for k, v in cols.items()}
    out["scale"] = torch.tensor(scales, dtype=torch.float32)
    return out


def enhancer_losses(model: DiffFilter, batch: dict, stage: int, weight: float,
                    generator: torch.Generator | None = None) -> dict:
    noisy = batch["noisy"]
    mu = noisy[:, model.ref_channel]
    s_est, n_est = model.conditioning(noisy)
    if stage == 1:
        s_in, n_in = batch["speech"], batch["noise"]
    else:
        s_in, n_in = s_est, n_est
    dsm = dsm_loss(model.decoder, batch["target"], mu, s_in, n_in, generator, model.decoder.schedule)
    sep = si_sdr_loss(s_est, batch["speech"]) + si_sdr_loss(n_est, batch["noise"])
    return {"loss": dsm + weight * sep, "dsm": dsm, "sisdr": sep}


def _grad_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0


def train_stage(model: DiffFilter, corpus: Corpus, plan: EnhancerTrainPlan, stage: int, seed: int,
                out_dir=None, log: JsonlLog | None = None) -> list[float]:
    """Run one enhancer stage; returns the mean training loss per epoch.

    A checkpoint is written after every finished epoch, so a divergence leaves
    the last good one in place.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    sp = plan.stage1 if stage == 1 else plan.stage2
    log = log or JsonlLog()
    params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=sp.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=sp.decay_every, gamma=sp.lr_decay)
    seg_len = int(round(plan.segment_seconds * SAMPLE_RATE))
    offset = 0 if stage == 1 else plan.stage1.epochs
    history = []
    step = 0
    model.train()
    for epoch in range(sp.epochs):
        rng = _rng(seed, stage, epoch)
        gen = _torch_gen(rng)
        weight = sisdr_weight(offset + epoch, plan.sisdr_init, plan.sisdr_step, plan.sisdr_every,
                              plan.fast_ramp, plan.total_epochs)
        order = rng.permutation(len(corpus))
        losses = []
        for b in range(0, len(order), plan.batch_size):
            batch = enhancer_batch([corpus[i] for i in order[b:b + plan.batch_size]], rng, seg_len,
                                   model.ref_channel)
            parts = enhancer_losses(model, batch, stage, weight, gen)
            loss = parts["loss"]
            if not _finite(loss):
                raise TrainingDivergence(f"stage {stage} epoch {epoch} step {step}: loss is {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            pre = float(torch.nn.utils.clip_grad_norm_(params, plan.grad_clip))
            if not math.isfinite(pre):
                raise TrainingDivergence(f"stage {stage} epoch {epoch} step {step}: gradient norm is {pre}")
            post = _grad_norm(params)
            opt.step()
            losses.append(loss.item())
            log.write(kind="step", stage=stage, epoch=epoch, step=step, loss=loss.item(),
                      dsm=parts["dsm"].item(), sisdr=parts["sisdr"].item(), weight=weight,
                      lr=opt.param_groups[0]["lr"], grad_norm=pre, grad_norm_clipped=post)
            step += 1
        mean = float(np.mean(losses))
        history.append(mean)
        log.write(kind="epoch", stage=stage, epoch=epoch, loss=mean, lr=opt.param_groups[0]["lr"])
        sched.step()
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"stage{stage}", model, {"stage": stage, "epoch": epoch})
    return history


def train_enhancer(corpus: Corpus, plan: EnhancerTrainPlan, seed: int, out_dir, stages=(1, 2),
                   tcn: TcnConfig = TcnConfig(desk_scale_divisor=8), log_path=None) -> DiffFilter:
    """Stage 1 on oracle conditioning, then stage 2 on the network's own estimates.

    Stage 2 always starts from the stage-1 checkpoint in ``out_dir``.
    """
    out_dir = Path(out_dir)
    model = None
    for stage in stages:
        log = JsonlLog(log_path(stage) if callable(log_path) else None)
        if stage == 1:
            torch.manual_seed(seed)
            model = DiffFilter(tcn)
        else:
            ckpt = out_dir / "stage1"
            if not (ckpt / "config.json").exists():
                raise FileNotFoundError(f"stage 2 needs a stage-1 checkpoint at {ckpt}")
            model = load_checkpoint(ckpt)
        train_stage(model, corpus, plan, stage, seed, out_dir, log)
    return model


# -- speaker verification pretraining -----------------------------------------------


@dataclass(frozen=True)
class SvPlan:
    iterations: int = 100_000
    batch_size: int = 16
    segment_seconds: float = 2.0
    base_lr: float = SV_BASE_LR
    max_lr: float = SV_MAX_LR
    step_size: int = 2000
    margin: float = 0.3
    scale: float = 30.0
    # augmentation: reverberant noisy copy, speed change, 1 s mask (each drawn independently)
    mix_prob: float = 0.5
    speed_prob: float = 0.5
    mask_prob: float = 0.5


def _load_speech(items) -> tuple[list[np.ndarray], list[int], list[str]]:
    waves, labels, speakers = [], [], []
    for item in items:
        utt_id, src, spk = item
        wav = read_wav(src) if isinstance(src, (str, Path)) else np.asarray(src)
        if wav.ndim != 1:
            wav = wav[0]
        if spk not in speakers:
            speakers.append(spk)
        waves.append(wav.astype(np.float32))
        labels.append(speakers.index(spk))
    return waves, labels, speakers


def _sv_segment(rng, clean, mixed, plan: SvPlan, seg_len: int) -> np.ndarray:
    src = clean
    if mixed and rng.random() < plan.mix_prob:
        src = mixed[int(rng.integers(len(mixed)))]
    if rng.random() < plan.speed_prob:
        factor = float(SPEED_FACTORS[int(rng.integers(len(SPEED_FACTORS)))])
        if round(src.shape[0] / factor) >= seg_len:
            src = speed_perturb(src, factor)
    seg = crop(src, random_start(rng, src.shape[0], seg_len), seg_len)
    if rng.random() < plan.mask_prob and seg_len > SAMPLE_RATE:
        seg = time_mask(seg, rng)
    return seg.astype(np.float32)


def pretrain_sv(items, plan: SvPlan, seed: int, cfg: EcapaConfig = EcapaConfig(), out_dir=None,
                log: JsonlLog | None = None, mixtures=None) -> EcapaTdnn:
    """AAM-softmax training of the embedder under a triangular cyclic learning rate.

    ``items`` are ``(utt_id, wav_path_or_array, speaker_id)``. ``mixtures`` is an optional
    speaker-labelled corpus whose reference channels stand in for the reverberant noisy
    augmentation of the same speakers.
    """
    waves, labels, speakers = _load_speech(items)
    if len(speakers) < 2:
        raise ValueError("speaker verification pretraining needs at least two speakers")
    by_speaker: dict[int, list[np.ndarray]] = {}
    if mixtures is not None:
        for e in mixtures.entries:
            if e.speaker in speakers:
                by_speaker.setdefault(speakers.index(e.speaker), []).append(
                    e.noisy[REF_CHANNEL].astype(np.float32))
    log = log or JsonlLog()
    torch.manual_seed(seed)
    model = EcapaTdnn(cfg)
    head = AamSoftmax(len(speakers), cfg.embedding_dim, plan.margin, plan.scale)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=plan.max_lr)
    sched = torch.optim.lr_scheduler.CyclicLR(opt, base_lr=plan.base_lr, max_lr=plan.max_lr,
                                              step_size_up=plan.step_size, mode="triangular",
                                              cycle_momentum=False)
    shortest = min(w.shape[0] for w in waves + [m for ms in by_speaker.values() for m in ms])
    seg_len = min(int(round(plan.segment_seconds * SAMPLE_RATE)), shortest)
    model.train()
    for it in range(plan.iterations):
        rng = _rng(seed, 3, it)
        idx = rng.integers(0, len(waves), plan.batch_size)
        segs = [_sv_segment(rng, waves[i], by_speaker.get(labels[i]), plan, seg_len) for i in idx]
        batch = torch.from_numpy(np.stack(segs))
        target = torch.tensor([labels[i] for i in idx])
        loss = head(model(mel_features_torch(batch)), target)
        if not _finite(loss):
            raise TrainingDivergence(f"SV pretraining iteration {it}: loss is {loss.item()}")
        lr = opt.param_groups[0]["lr"]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        log.write(kind="sv", iteration=it, loss=loss.item(), lr=lr)
    if out_dir is not None:
        save_checkpoint(out_dir, model, {"speakers": speakers, "iterations": plan.iterations})
    model.eval()
    return model


# -- pair construction -----------------------------------------------------------------


@dataclass
class SslPair:
    utt1: np.ndarray
    utt2: np.ndarray
    label: int
    id1: str
    id2: str
    factor: float | None = None


def make_ssl_pair(corpus, index: int, rng: np.random.Generator, seg_len: int,
                  positive: bool | None = None) -> SslPair:
    """Utterance 2 is an augmented copy of utterance 1 (label 1) or another entry (label 0)."""
    if len(corpus) < 2:
        raise ValueError("SSL pairs need a corpus with at least two entries")
    if positive is None:
        positive = bool(rng.integers(0, 2))
    e1 = corpus[index]
    length = min(seg_len, e1.length)
    utt1 = crop(e1.noisy, random_start(rng, e1.length, length), length)
    if positive:
        factor = float(SPEED_FACTORS[int(rng.integers(len(SPEED_FACTORS)))])
        utt2 = time_mask(speed_perturb(utt1, factor), rng)
        return SslPair(utt1, utt2.astype(np.float32), 1, e1.id, e1.id, factor)
    j = int(rng.integers(0, len(corpus) - 1))
    j = j + 1 if j >= index else j
    e2 = corpus[j]
    length2 = min(seg_len, e2.length)
    utt2 = crop(e2.noisy, random_start(rng, e2.length, length2), length2)
    return SslPair(utt1, utt2, 0, e1.id, e2.id)


def make_labelled_pair(corpus, index: int, rng: np.random.Generator, seg_len: int, positive: bool) -> SslPair:
    """Same-speaker (label 1) or different-speaker (label 0) pair from a labelled corpus."""
    e1 = corpus[index]
    pool = [i for i, e in enumerate(corpus.entries)
            if i != index and ((e.speaker == e1.speaker) == positive)]
    if not pool:
        raise DataError(f"no {'same' if positive else 'different'}-speaker partner for {e1.id}")
    e2 = corpus[pool[int(rng.integers(len(pool)))]]
    utts = []
    for e in (e1, e2):
        length = min(seg_len, e.length)
        utts.append(crop(e.noisy, random_start(rng, e.length, length), length))
    return SslPair(utts[0], utts[1], int(positive), e1.id, e2.id)


def balanced_batch(corpus, batch_size: int, rng: np.random.Generator, seg_len: int,
                   labelled: bool = False) -> list[SslPair]:
    """Exactly ``batch_size / 2`` positive and negative pairs, in random order."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be a positive even number")
    labels = rng.permutation([1] * (batch_size // 2) + [0] * (batch_size // 2))
    pairs = []
    for lab in labels:
        index = int(rng.integers(0, len(corpus)))
        if labelled:
            pairs.append(make_labelled_pair(corpus, index, rng, seg_len, bool(lab)))
        else:
            pairs.append(make_ssl_pair(corpus, index, rng, seg_len, bool(lab)))
    return pairs


# -- enhancement + embedding as one graph --------------------------------------------


def _pad_stack(utts, ref_channel: int):
    width = max(u.shape[-1] for u in utts)
    lengths = [u.shape[-1] for u in utts]
    scaled = [u * normaliser(u[ref_channel]) for u in utts]
    arr = np.stack([np.pad(u, ((0, 0), (0, width - u.shape[-1]))) for u in scaled]).astype(np.float32)
    return torch.from_numpy(arr), lengths


def enhance_tensor(model: DiffFilter, noisy: torch.Tensor, n_steps: int, generator: torch.Generator | None = None,
                   denoise: bool = True) -> torch.Tensor:
    """(B, C, T) unit-RMS noisy input -> (B, T) enhanced reference channel."""
    s, n = model.conditioning(noisy)
    mu = noisy[:, model.ref_channel]
    return reverse_sample(model.decoder, mu, s, n, n_steps, model.decoder.schedule, generator, denoise=denoise)


def embed_list(embedder: EcapaTdnn, waves) -> torch.Tensor:
    return torch.cat([embedder.embed_waveform(w[None]) for w in waves])


def pair_embeddings(pairs, model: DiffFilter | None, embedder: EcapaTdnn, n_steps: int,
                    generator: torch.Generator | None = None):
    utts = [p.utt1 for p in pairs] + [p.utt2 for p in pairs]
    ref = model.ref_channel if model is not None else 0
    noisy, lengths = _pad_stack(utts, ref)
    if model is None:
        wav = noisy[:, ref]
    else:
        wav = enhance_tensor(model, noisy, n_steps, generator)
    emb = embed_list(embedder, [wav[i, :lengths[i]] for i in range(len(utts))])
    k = len(pairs)
    return emb[:k], emb[k:]


def ssl_joint_step(pairs, model: DiffFilter, embedder: EcapaTdnn, optimizer: torch.optim.Optimizer,
                   generator: torch.Generator | None = None, n_steps: int = SSL_STEPS,
                   cosine_weight: float = 1.0, grad_clip: float | None = GRAD_CLIP) -> dict:
    """One update of enhancer and embedder through a single graph.

    L = eer_loss(cosine scores, labels) + cosine_weight * mean cosine pair loss.
    """
    labels = torch.tensor([p.label for p in pairs])
    if labels.sum() == 0 or labels.sum() == len(pairs):
        raise ValueError("joint step needs both positive and negative pairs in the batch")
    e1, e2 = pair_embeddings(pairs, model, embedder, n_steps, generator)
    scores = F.cosine_similarity(e1, e2, dim=-1)
    l_eer = eer_loss(scores, labels)
    l_cos = cosine_pair_loss(e1, e2, labels)
    loss = l_eer + cosine_weight * l_cos
    if not _finite(loss):
        raise TrainingDivergence(f"joint loss is {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    enh_norm = _grad_norm(list(model.parameters()))
    emb_norm = _grad_norm(list(embedder.parameters()))
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(list(model.parameters()) + list(embedder.parameters()), grad_clip)
    optimizer.step()
    return {"loss": loss.item(), "eer_loss": l_eer.item(), "cosine_loss": l_cos.item(),
            "grad_norm_enhancer": enh_norm, "grad_norm_embedder": emb_norm}


@dataclass(frozen=True)
class JointPlan:
    iterations: int = 50_000
    batch_size: int = 4
    segment_seconds: float = 2.0
    lr: float = SSL_LR
    weight_decay: float = SSL_WEIGHT_DECAY
    reanchor_every: int = SSL_REANCHOR
    n_steps: int = SSL_STEPS
    cosine_weight: float = 1.0
    grad_clip: float | None = GRAD_CLIP


def joint_optimizer(model, embedder, plan: JointPlan) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(model.parameters()) + list(embedder.parameters()),
                             lr=plan.lr, weight_decay=plan.weight_decay)


def train_joint(model: DiffFilter, embedder: EcapaTdnn, corpus, plan: JointPlan, seed: int,
                labelled: bool = False, out_dir=None, log: JsonlLog | None = None):
    """SSL (``labelled=False``) or speaker-supervised joint fine-tuning of both networks.

    The embedder's batch-norm statistics stay frozen (eval mode); its weights train.
    """
    log = log or JsonlLog()
    opt = joint_optimizer(model, embedder, plan)
    seg_len = int(round(plan.segment_seconds * SAMPLE_RATE))
    model.train()
    embedder.eval()
    tag = 5 if labelled else 4
    for it in range(plan.iterations):
        if it and it % plan.reanchor_every == 0:
            for group in opt.param_groups:
                group["lr"] = plan.lr
        rng = _rng(seed, tag, it)
        pairs = balanced_batch(corpus, plan.batch_size, rng, seg_len, labelled)
        out = ssl_joint_step(pairs, model, embedder, opt, _torch_gen(rng), plan.n_steps,
                             plan.cosine_weight, plan.grad_clip)
        log.write(kind="joint" if labelled else "ssl", iteration=it, lr=opt.param_groups[0]["lr"], **out)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "enhancer", model, {"iterations": plan.iterations, "labelled": labelled})
        save_checkpoint(out_dir / "embedder", embedder, {"iterations": plan.iterations, "labelled": labelled})
    return model, embedder


# -- evaluation helpers used by tests and the CLI ----------------------------------------


@torch.no_grad()
def enhance_entries(model: DiffFilter, entries, n_steps: int = INFERENCE_STEPS, seed: int = 0,
                    conditioning_only: bool = False) -> dict[str, np.ndarray]:
    """Enhance full utterances one at a time; outputs are back at the input scale."""
    out = {}
    for k, e in enumerate(entries):
        scale = normaliser(e.noisy[model.ref_channel])
        noisy = torch.from_numpy((e.noisy * scale).astype(np.float32))[None]
        if conditioning_only:
            wav = model.conditioning(noisy)[0]
        else:
            gen = _torch_gen(_rng(seed, 6, k))
            wav = enhance_tensor(model, noisy, n_steps, gen)
        out[e.id] = wav[0].numpy().astype(np.float64) / scale
    return out


@torch.no_grad()
def embed_waves(embedder: EcapaTdnn, waves: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    embedder.eval()
    return {k: embedder.embed_waveform(torch.from_numpy(np.asarray(v, dtype=np.float32))[None])[0].numpy()
            for k, v in waves.items()}


def cosine_scores(embeddings: dict[str, np.ndarray], trials) -> np.ndarray:
    scores = []
    for _, a, b in trials:
        x, y = embeddings[a], embeddings[b]
        scores.append(float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y))))
    return np.asarray(scores)


def trial_eer(embeddings: dict[str, np.ndarray], trials) -> float:
    return eer(cosine_scores(embeddings, trials), [t[0] for t in trials])


def asdict_plan(plan) -> dict:
    return asdict(plan)

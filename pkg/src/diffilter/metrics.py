"""Verification and enhancement metrics.

Exact scorers (``det_curve``, ``eer``, ``si_sdr``, ``bss_eval_sir_sdr``) are
numpy; the trainable losses (``eer_loss``, ``cosine_pair_loss``,
``si_sdr_loss``) are torch so they can sit at the end of a graph.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg as sla
from scipy.signal import fftconvolve

DB_CLAMP = 60.0
EER_TEMPERATURE = 0.05
EER_GRID = 64
COSINE_MARGIN = 0.2


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel().astype(np.int64)
        if s.shape != y.shape:
            raise ValueError(f"{s.size} scores but {y.size} labels")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    def check_both_classes(self):
        if self.labels.sum() == 0 or self.labels.sum() == self.labels.size:
            raise ValueError("EER is undefined without both target and non-target trials")


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "far", "frr"])
            for t, a, r in zip(self.thresholds, self.far, self.frr):
                writer.writerow([repr(float(t)), repr(float(a)), repr(float(r))])


def _score_set(scores, labels=None) -> ScoreSet:
    if isinstance(scores, ScoreSet):
        return scores
    return ScoreSet(scores, labels)


def det_curve(scores, labels=None) -> DetCurve:
    """FAR/FRR at every distinct score plus the +-inf sentinels.

    A trial is accepted when ``score >= threshold``.
    """
    s = _score_set(scores, labels)
    s.check_both_classes()
    pos = np.sort(s.scores[s.labels == 1])
    neg = np.sort(s.scores[s.labels == 0])
    thresholds = np.concatenate([[-np.inf], np.unique(s.scores), [np.inf]])
    far = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    return DetCurve(thresholds, far, frr)


def eer(scores, labels=None) -> float:
    """FAR at the (smallest) threshold minimising |FRR - FAR|."""
    curve = det_curve(scores, labels)
    gap = np.abs(curve.frr - curve.far)
    return float(curve.far[int(np.argmin(gap))])


def eer_loss(scores: torch.Tensor, labels, temperature: float = EER_TEMPERATURE,
             grid_size: int = EER_GRID, selection_temperature: float = 0.01) -> torch.Tensor:
    """Smooth stand-in for :func:`eer` that can be back-propagated.

    Hard accept/reject counts become sigmoids of ``(score - threshold) / temperature``
    on a fixed grid over [-1, 1]; the crossing is picked with a softmin over the
    |FRR - FAR| gap and the loss is the weighted mean of (FAR + FRR) / 2 there.
    """
    labels = torch.as_tensor(labels, device=scores.device)
    pos_mask = labels == 1
    neg_mask = labels == 0
    if not pos_mask.any() or not neg_mask.any():
        raise ValueError("eer_loss needs both target and non-target pairs in the batch")
    grid = torch.linspace(-1.0, 1.0, grid_size, dtype=scores.dtype, device=scores.device)
    z = (scores[:, None] - grid[None, :]) / temperature
    accept = torch.sigmoid(z)
    far = accept[neg_mask].mean(dim=0)
    frr = (1.0 - accept[pos_mask]).mean(dim=0)
    gap = torch.sqrt((frr - far) ** 2 + 1e-8)
    weights = torch.softmax(-gap / selection_temperature, dim=0)
    return (weights * 0.5 * (far + frr)).sum()


def cosine_pair_loss(emb1: torch.Tensor, emb2: torch.Tensor, label, margin: float = COSINE_MARGIN) -> torch.Tensor:
    """Pull positives to cos = 1; push negatives below cos = margin.

    Accepts single vectors or (B, D) batches (returns the batch mean).
    """
    emb1 = torch.as_tensor(emb1)
    emb2 = torch.as_tensor(emb2, dtype=emb1.dtype)
    if (emb1.norm(dim=-1) == 0).any() or (emb2.norm(dim=-1) == 0).any():
        raise ValueError("cosine_pair_loss got a zero-norm embedding")
    cos = F.cosine_similarity(emb1, emb2, dim=-1, eps=0.0)
    label = torch.as_tensor(label, device=cos.device)
    loss = torch.where(label == 1, 1.0 - cos, torch.clamp(cos - margin, min=0.0))
    return loss.mean()


# -- enhancement metrics -------------------------------------------------------


def _db(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CLAMP
    if num <= 0.0:
        return -DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, clamped to +-60."""
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    ref = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("si_sdr reference is all zeros")
    target = (float(est @ ref) / ref_energy) * ref
    residual = est - target
    return _db(float(target @ target), float(residual @ residual))


def si_sdr_loss(est: torch.Tensor, ref: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Negative SI-SDR (dB) averaged over the batch; inputs (..., T)."""
    alpha = (est * ref).sum(-1, keepdim=True) / (ref.pow(2).sum(-1, keepdim=True) + eps)
    target = alpha * ref
    residual = est - target
    ratio = (target.pow(2).sum(-1) + eps) / (residual.pow(2).sum(-1) + eps)
    value = 10.0 * torch.log10(ratio)
    return -torch.clamp(value, -DB_CLAMP, DB_CLAMP).mean()


def _lagged_gram(refs: np.ndarray, flen: int, nfft: int) -> np.ndarray:
    """Gram matrix of all ``flen`` delayed copies of each reference."""
    n_src = refs.shape[0]
    spec = np.fft.rfft(refs, n=nfft, axis=-1)
    gram = np.zeros((n_src * flen, n_src * flen))
    for i in range(n_src):
        for j in range(i, n_src):
            corr = np.fft.irfft(np.conj(spec[i]) * spec[j], n=nfft)
            # block[k, l] = sum_u r_i(u) r_j(u + k - l)
            block = sla.toeplitz(corr[:flen], np.concatenate([corr[:1], corr[-1:-flen:-1]]))
            gram[i * flen:(i + 1) * flen, j * flen:(j + 1) * flen] = block
            gram[j * flen:(j + 1) * flen, i * flen:(i + 1) * flen] = block.T
    return gram


def _project(refs: np.ndarray, est: np.ndarray, flen: int) -> np.ndarray:
    """Least-squares fit of ``est`` by FIR-filtered ``refs``; output length T + flen - 1."""
    n_src, length = refs.shape
    nfft = int(2 ** np.ceil(np.log2(length + flen - 1)))
    gram = _lagged_gram(refs, flen, nfft)
    ref_spec = np.fft.rfft(refs, n=nfft, axis=-1)
    est_spec = np.fft.rfft(est, n=nfft)
    rhs = np.zeros(n_src * flen)
    for i in range(n_src):
        corr = np.fft.irfft(np.conj(ref_spec[i]) * est_spec, n=nfft)
        rhs[i * flen:(i + 1) * flen] = corr[:flen]
    try:
        coeffs = sla.solve(gram, rhs, assume_a="pos")
    except (sla.LinAlgError, ValueError):
        coeffs = sla.lstsq(gram, rhs)[0]
    coeffs = coeffs.reshape(n_src, flen)
    out = np.zeros(length + flen - 1)
    for i in range(n_src):
        out += fftconvolve(refs[i], coeffs[i])
    return out


def bss_eval_sir_sdr(est, ref_speech, ref_noise, flen: int = 512) -> tuple[float, float]:
    """BSS-eval (SIR, SDR) in dB for one target speaker plus one noise reference.

    The target is ``est`` projected onto ``flen``-tap filtered speech; interference
    is what the joint speech+noise projection adds on top; the remainder is artifact.
    """
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    s = np.asarray(getattr(ref_speech, "samples", ref_speech), dtype=np.float64)
    n = np.asarray(getattr(ref_noise, "samples", ref_noise), dtype=np.float64)
    if not (est.shape == s.shape == n.shape):
        raise ValueError("est, ref_speech and ref_noise must have equal lengths")
    ns, nn = np.linalg.norm(s), np.linalg.norm(n)
    if ns == 0.0 or nn == 0.0:
        raise ValueError("BSS-eval references must be non-zero")
    if abs(s @ n) / (ns * nn) > 1.0 - 1e-8:
        raise ValueError("BSS-eval references are collinear")
    padded = np.concatenate([est, np.zeros(flen - 1)])
    s_target = _project(s[None], est, flen)
    p_all = _project(np.stack([s, n]), est, flen)
    e_interf = p_all - s_target
    e_total = padded - s_target
    target_energy = float(s_target @ s_target)
    sir = _db(target_energy, float(e_interf @ e_interf))
    sdr = _db(target_energy, float(e_total @ e_total))
    return sir, sdr


def read_score_file(path) -> list[tuple[int, str, str, float]]:
    """Parse ``<label> <enroll> <test> <score>`` lines."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        label, enroll, test, score = line.split()
        rows.append((int(label), enroll, test, float(score)))
    return rows


def write_score_file(path, rows):
    with open(path, "w") as fh:
        for label, enroll, test, score in rows:
            fh.write(f"{int(label)} {enroll} {test} {score:.8f}\n")

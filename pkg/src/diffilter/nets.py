"""Network definitions: Conv-TasNet style TCNs for the enhancer and an ECAPA-TDNN embedder.

Shapes are (batch, time) for waveforms and (batch, frames, 40) for Mel input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule
from .signal_core import N_MELS, SAMPLE_RATE, mel_features_torch

EMBED_DIM = 256
AAM_MARGIN = 0.3
AAM_SCALE = 30.0


class CheckpointError(RuntimeError):
    pass


# -- TCN ----------------------------------------------------------------------


@dataclass(frozen=True)
class TcnConfig:
    n_filters: int = 512
    filter_length: int = 20
    bottleneck: int = 256
    hidden: int = 512
    kernel_size: int = 3
    blocks: int = 8
    repeats: int = 3
    desk_scale_divisor: int = 8
    causal: bool = False

    def __post_init__(self):
        if self.causal:
            raise ValueError("only the non-causal TCN is implemented")
        if self.filter_length % 2:
            raise ValueError("filter_length must be even (stride is half of it)")

    @property
    def N(self) -> int:
        return max(1, self.n_filters // self.desk_scale_divisor)

    @property
    def B(self) -> int:
        return max(1, self.bottleneck // self.desk_scale_divisor)

    @property
    def H(self) -> int:
        return max(1, self.hidden // self.desk_scale_divisor)

    @property
    def stride(self) -> int:
        return self.filter_length // 2

    def receptive_field(self, sample_rate: int = SAMPLE_RATE) -> float:
        """Receptive field in seconds."""
        frames = 1 + self.repeats * sum((self.kernel_size - 1) * 2 ** i for i in range(self.blocks))
        return ((frames - 1) * self.stride + self.filter_length) / sample_rate


class GlobalLayerNorm(nn.Module):
    """Normalise over channels and time jointly, per example."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        # a single group spans all channels and frames, which is exactly gLN
        return F.group_norm(x, 1, self.gamma, self.beta, self.eps)


class TcnBlock(nn.Module):
    def __init__(self, B: int, H: int, P: int, dilation: int, cond_dim: int = 0, residual: bool = True):
        super().__init__()
        self.inp = nn.Conv1d(B, H, 1)
        self.norm1 = GlobalLayerNorm(H)
        self.depthwise = nn.Conv1d(H, H, P, dilation=dilation, padding=dilation * (P - 1) // 2, groups=H)
        self.norm2 = GlobalLayerNorm(H)
        # the last block feeds only the skip sum, so it carries no residual conv
        self.res = nn.Conv1d(H, B, 1) if residual else None
        self.skip = nn.Conv1d(H, B, 1)
        self.cond = nn.Linear(cond_dim, B) if cond_dim else None

    def forward(self, x, cond=None):
        y = x if self.cond is None else x + self.cond(cond)[:, :, None]
        y = self.norm1(F.gelu(self.inp(y)))
        y = self.norm2(F.gelu(self.depthwise(y)))
        return (x + self.res(y) if self.res is not None else x), self.skip(y)


class TemporalConvNet(nn.Module):
    """Bottleneck -> R x X dilated blocks -> skip sum -> 1x1 to ``out_channels``."""

    def __init__(self, cfg: TcnConfig, out_channels: int, cond_dim: int = 0):
        super().__init__()
        self.norm = GlobalLayerNorm(cfg.N)
        self.bottleneck = nn.Conv1d(cfg.N, cfg.B, 1)
        total = cfg.repeats * cfg.blocks
        self.blocks = nn.ModuleList(
            TcnBlock(cfg.B, cfg.H, cfg.kernel_size, 2 ** (k % cfg.blocks), cond_dim, residual=k < total - 1)
            for k in range(total)
        )
        self.out = nn.Conv1d(cfg.B, out_channels, 1)

    def forward(self, w, cond=None):
        x = self.bottleneck(self.norm(w))
        skips = 0
        for block in self.blocks:
            x, s = block(x, cond)
            skips = skips + s
        return self.out(F.gelu(skips))


def _pad_to_stride(x, L: int, stride: int):
    length = x.shape[-1]
    frames = max(1, math.ceil((length - L) / stride) + 1)
    need = (frames - 1) * stride + L - length
    return F.pad(x, (0, need)), length


class ConditioningNet(nn.Module):
    """Multichannel mask network giving speech and noise estimates at the reference mic.

    All channels feed the mask estimator through a C-channel encoder; the two
    masks act on an encoding of the reference channel only.
    """

    def __init__(self, cfg: TcnConfig = TcnConfig(), n_channels: int = 4, ref_channel: int = 0):
        super().__init__()
        self.cfg = cfg
        self.n_channels = n_channels
        self.ref_channel = ref_channel
        self.mix_encoder = nn.Conv1d(n_channels, cfg.N, cfg.filter_length, stride=cfg.stride, bias=False)
        self.ref_encoder = nn.Conv1d(1, cfg.N, cfg.filter_length, stride=cfg.stride, bias=False)
        self.tcn = TemporalConvNet(cfg, 2 * cfg.N)
        self.decoder = nn.ConvTranspose1d(cfg.N, 1, cfg.filter_length, stride=cfg.stride, bias=False)

    def forward(self, noisy):
        """(B, C, T) -> speech (B, T), noise (B, T)."""
        if noisy.dim() != 3 or noisy.shape[1] != self.n_channels:
            raise ValueError(f"expected (batch, {self.n_channels}, time), got {tuple(noisy.shape)}")
        if noisy.shape[-1] < self.cfg.filter_length:
            raise ValueError("input shorter than one encoder filter")
        x, length = _pad_to_stride(noisy, self.cfg.filter_length, self.cfg.stride)
        w = F.relu(self.mix_encoder(x))
        ref = F.relu(self.ref_encoder(x[:, self.ref_channel:self.ref_channel + 1]))
        masks = torch.sigmoid(self.tcn(w)).view(x.shape[0], 2, self.cfg.N, -1)
        speech = self.decoder(ref * masks[:, 0])[:, 0, :length]
        noise = self.decoder(ref * masks[:, 1])[:, 0, :length]
        return speech, noise


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class DiffusionDecoder(nn.Module):
    """TCN score network over the stacked (x_t, mu, s, n) waveforms.

    The TCN estimates the clean signal x0 (on top of a learnable linear mix of
    the four inputs); the implied noise is
    ``eps = (x_t - mu - c(t) * (x0_hat - mu)) / std(t)`` with ``c(t)`` the forward
    mean coefficient, and ``forward`` returns the score ``-eps / std(t)``.
    Predicting white noise directly through a narrow bottleneck does not train
    at desk scale; the x0 form does and leaves the loss unchanged.
    """

    def __init__(self, cfg: TcnConfig = TcnConfig(), schedule: NoiseSchedule = NoiseSchedule(),
                 embed_dim: int = 64):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        self.embed_dim = embed_dim
        self.encoder = nn.Conv1d(4, cfg.N, cfg.filter_length, stride=cfg.stride)
        self.time_mlp = nn.Sequential(nn.Linear(embed_dim, 2 * embed_dim), nn.GELU(),
                                      nn.Linear(2 * embed_dim, embed_dim))
        self.tcn = TemporalConvNet(cfg, cfg.N, cond_dim=embed_dim)
        self.decoder = nn.ConvTranspose1d(cfg.N, 1, cfg.filter_length, stride=cfg.stride)
        self.skip = nn.Conv1d(4, 1, 1, bias=False)

    def _times(self, t, x_t):
        return torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(x_t.shape[0])

    def predict_clean(self, x_t, mu, s, n, t):
        if not (x_t.shape == mu.shape == s.shape == n.shape):
            raise ValueError("x_t, mu, s and n must have identical shapes")
        t = self._times(t, x_t)
        stacked = torch.stack([x_t, mu, s, n], dim=1)
        x, length = _pad_to_stride(stacked, self.cfg.filter_length, self.cfg.stride)
        cond = self.time_mlp(time_embedding(t, self.embed_dim))
        h = self.tcn(F.gelu(self.encoder(x)), cond)
        return self.decoder(h)[:, 0, :length] + self.skip(stacked)[:, 0]

    def predict_noise(self, x_t, mu, s, n, t):
        t = self._times(t, x_t)
        coef = self.schedule.mean_coef(t)[:, None]
        std = self.schedule.std(t)[:, None]
        return (x_t - mu - coef * (self.predict_clean(x_t, mu, s, n, t) - mu)) / std

    def forward(self, x_t, mu, s, n, t):
        t = self._times(t, x_t)
        std = self.schedule.std(t)[:, None]
        return -self.predict_noise(x_t, mu, s, n, t) / std


class DiffFilter(nn.Module):
    """Conditioning network plus diffusion decoder, saved and trained as one unit."""

    def __init__(self, tcn: TcnConfig = TcnConfig(desk_scale_divisor=8), schedule: NoiseSchedule = NoiseSchedule(),
                 n_channels: int = 4, ref_channel: int = 0, embed_dim: int = 64):
        super().__init__()
        self.conditioning = ConditioningNet(tcn, n_channels, ref_channel)
        self.decoder = DiffusionDecoder(tcn, schedule, embed_dim)
        self.ref_channel = ref_channel


# -- ECAPA-TDNN ------------------------------------------------------------------


@dataclass(frozen=True)
class EcapaConfig:
    input_features: int = N_MELS
    channels: int = 256
    attention_channels: int = 128
    res2_scale: int = 8
    se_channels: int = 128
    embedding_dim: int = EMBED_DIM
    min_frames: int = 10

    def __post_init__(self):
        if self.embedding_dim != EMBED_DIM:
            raise ValueError(f"embedding_dim is fixed at {EMBED_DIM}")
        if self.channels % self.res2_scale:
            raise ValueError("channels must be divisible by res2_scale")


class TdnnBlock(nn.Module):
    def __init__(self, cin, cout, kernel, dilation=1):
        super().__init__()
        self.conv = nn.Conv1d(cin, cout, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2)
        self.bn = nn.BatchNorm1d(cout)

    def forward(self, x):
        return self.bn(F.relu(self.conv(x)))


class Res2Block(nn.Module):
    def __init__(self, channels, scale, kernel, dilation):
        super().__init__()
        width = channels // scale
        self.scale = scale
        self.convs = nn.ModuleList(TdnnBlock(width, width, kernel, dilation) for _ in range(scale - 1))

    def forward(self, x):
        chunks = torch.chunk(x, self.scale, dim=1)
        out = [chunks[0]]
        y = None
        for i, conv in enumerate(self.convs, start=1):
            y = conv(chunks[i] if y is None else chunks[i] + y)
            out.append(y)
        return torch.cat(out, dim=1)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, bottleneck):
        super().__init__()
        self.down = nn.Conv1d(channels, bottleneck, 1)
        self.up = nn.Conv1d(bottleneck, channels, 1)

    def forward(self, x):
        s = x.mean(dim=2, keepdim=True)
        return x * torch.sigmoid(self.up(F.relu(self.down(s))))


class SeRes2Block(nn.Module):
    def __init__(self, channels, scale, se_channels, kernel, dilation):
        super().__init__()
        self.pre = TdnnBlock(channels, channels, 1)
        self.res2 = Res2Block(channels, scale, kernel, dilation)
        self.post = TdnnBlock(channels, channels, 1)
        self.se = SqueezeExcite(channels, se_channels)

    def forward(self, x):
        return x + self.se(self.post(self.res2(self.pre(x))))


class AttentiveStatsPool(nn.Module):
    """Channel-dependent attention with global context; returns [mean, std]."""

    def __init__(self, channels, attention_channels):
        super().__init__()
        self.tdnn = TdnnBlock(3 * channels, attention_channels, 1)
        self.attn = nn.Conv1d(attention_channels, channels, 1)

    def forward(self, x):
        frames = x.shape[-1]
        mean = x.mean(dim=2, keepdim=True)
        std = torch.sqrt(x.var(dim=2, keepdim=True, unbiased=False).clamp(min=1e-5))
        ctx = torch.cat([x, mean.expand(-1, -1, frames), std.expand(-1, -1, frames)], dim=1)
        w = torch.softmax(self.attn(torch.tanh(self.tdnn(ctx))), dim=2)
        mu = (w * x).sum(dim=2)
        sigma = torch.sqrt(((w * x * x).sum(dim=2) - mu * mu).clamp(min=1e-5))
        return torch.cat([mu, sigma], dim=1)


class EcapaTdnn(nn.Module):
    def __init__(self, cfg: EcapaConfig = EcapaConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.stem = TdnnBlock(cfg.input_features, c, 5)
        self.layers = nn.ModuleList(SeRes2Block(c, cfg.res2_scale, cfg.se_channels, 3, d) for d in (2, 3, 4))
        self.mfa = TdnnBlock(3 * c, 3 * c, 1)
        self.pool = AttentiveStatsPool(3 * c, cfg.attention_channels)
        self.pool_bn = nn.BatchNorm1d(6 * c)
        self.fc = nn.Linear(6 * c, cfg.embedding_dim)

    def forward(self, mel):
        """(B, frames, n_mels) log-Mel -> (B, 256)."""
        if mel.dim() != 3 or mel.shape[-1] != self.cfg.input_features:
            raise ValueError(f"expected (batch, frames, {self.cfg.input_features}), got {tuple(mel.shape)}")
        if mel.shape[1] < self.cfg.min_frames:
            raise ValueError(f"need at least {self.cfg.min_frames} frames, got {mel.shape[1]}")
        # per-utterance mean normalisation of the features
        x = (mel - mel.mean(dim=1, keepdim=True)).transpose(1, 2)
        x = self.stem(x)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        x = self.mfa(torch.cat(feats, dim=1))
        return self.fc(self.pool_bn(self.pool(x)))

    def embed_waveform(self, wav):
        """(B, T) 16 kHz -> (B, 256); differentiable through the Mel front end."""
        return self(mel_features_torch(wav))


class AamSoftmax(nn.Module):
    """Additive angular margin softmax over cosine logits."""

    def __init__(self, n_classes: int, embedding_dim: int = EMBED_DIM, margin: float = AAM_MARGIN,
                 scale: float = AAM_SCALE):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)
        self.margin = margin
        self.scale = scale

    def forward(self, emb, labels):
        return aam_softmax_loss(emb, labels, self.weight, self.margin, self.scale)


def aam_softmax_loss(emb, labels, weight, margin: float = AAM_MARGIN, scale: float = AAM_SCALE):
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = weight.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"speaker index outside [0, {n_classes})")
    cos = F.linear(F.normalize(emb, dim=-1), F.normalize(weight, dim=-1))
    theta = torch.acos(cos.clamp(-1 + 1e-7, 1 - 1e-7))
    target = torch.cos(torch.clamp(theta + margin, max=math.pi))
    onehot = F.one_hot(labels, n_classes).to(cos.dtype)
    logits = scale * (onehot * target + (1 - onehot) * cos)
    return F.cross_entropy(logits, labels)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoints -------------------------------------------------------------------


def _model_config(model: nn.Module) -> dict:
    if isinstance(model, DiffFilter):
        dec = model.decoder
        return {"kind": "diff_filter", "tcn": asdict(dec.cfg), "schedule": asdict(dec.schedule),
                "n_channels": model.conditioning.n_channels, "ref_channel": model.ref_channel,
                "embed_dim": dec.embed_dim}
    if isinstance(model, EcapaTdnn):
        return {"kind": "ecapa", "ecapa": asdict(model.cfg)}
    raise TypeError(f"no checkpoint config for {type(model).__name__}")


def build_model(config: dict) -> nn.Module:
    kind = config.get("kind")
    if kind == "diff_filter":
        return DiffFilter(TcnConfig(**config["tcn"]), NoiseSchedule(**config["schedule"]),
                          config["n_channels"], config["ref_channel"], config["embed_dim"])
    if kind == "ecapa":
        return EcapaTdnn(EcapaConfig(**config["ecapa"]))
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(directory, model: nn.Module, extra: dict | None = None):
    """Write ``config.json`` and ``weights.pt`` (named tensors) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = _model_config(model)
    if extra:
        config["extra"] = extra
    torch.save({k: v.detach().clone() for k, v in model.state_dict().items()}, directory / "weights.pt")
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))


def load_checkpoint(directory, expect: nn.Module | dict | None = None) -> nn.Module:
    """Rebuild a model from a checkpoint directory.

    ``expect`` (a model or config dict) must match the stored config exactly.
    Missing files, unknown keys and shape mismatches all raise ``CheckpointError``.
    """
    directory = Path(directory)
    cfg_path, weights_path = directory / "config.json", directory / "weights.pt"
    if not cfg_path.exists() or not weights_path.exists():
        raise CheckpointError(f"{directory} is not a checkpoint (need config.json and weights.pt)")
    config = json.loads(cfg_path.read_text())
    config.pop("extra", None)
    if expect is not None:
        want = _model_config(expect) if isinstance(expect, nn.Module) else dict(expect)
        want.pop("extra", None)
        if want != config:
            raise CheckpointError(f"checkpoint config mismatch in {directory}: stored {config}, expected {want}")
    try:
        model = build_model(config)
    except TypeError as exc:
        raise CheckpointError(f"bad config in {directory}: {exc}") from exc
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"weights in {directory} do not fit the stored config: {exc}") from exc
    return model


def checkpoint_extra(directory) -> dict:
    return json.loads((Path(directory) / "config.json").read_text()).get("extra", {})


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]

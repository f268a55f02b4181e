"""Sleep scorer (encoder, decoder, segment classifier) and the transformer
discriminator ensemble."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .core import N_CLASSES, Recording, StageProbs, ValidationError


@dataclass(frozen=True)
class ScorerConfig:
    depth: int = 4
    base_filters: int = 5
    filter_growth: float = math.sqrt(2)
    kernel_size: int = 9
    pool_factor: int = 2
    input_channels: int = 2
    classes: int = N_CLASSES
    epoch_samples: int = 3840
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("depth must be at least 1")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel_size must be odd")
        if self.pool_factor < 1 or self.epoch_samples < 1:
            raise ValidationError("pool_factor and epoch_samples must be positive")

    @property
    def total_pool(self) -> int:
        return self.pool_factor**self.depth

    def encoder_filters(self) -> list[int]:
        return [max(1, int(round(self.base_filters * self.filter_growth**b))) for b in range(self.depth)]

    def bottleneck_filters(self) -> int:
        return max(1, int(round(self.base_filters * self.filter_growth**self.depth)))

    def decoder_filters(self) -> list[int]:
        """Halve per block, never below ``base_filters``."""
        out, f = [], self.bottleneck_filters()
        for _ in range(self.depth):
            f = max(self.base_filters, int(round(f / 2)))
            out.append(f)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    embed_dim: int = 16
    n_layers: int = 2
    n_heads: int = 4
    window_epochs: int = 16
    ensemble_size: int = 3
    ff_mult: int = 2

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValidationError("embed_dim must be divisible by n_heads")
        if self.window_epochs < 8:
            raise ValidationError("window_epochs must be at least 8")
        if self.ensemble_size < 1:
            raise ValidationError("ensemble_size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


class ConvNormBlock(nn.Module):
    """conv1d -> ELU -> batch norm."""

    def __init__(self, c_in: int, c_out: int, k: int, momentum: float):
        super().__init__()
        self.momentum = momentum
        bound = 1.0 / math.sqrt(c_in * k)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.gamma = nn.Parameter(torch.ones(c_out))
        self.beta = nn.Parameter(torch.zeros(c_out))
        self.register_buffer("running_mean", torch.zeros(c_out))
        self.register_buffer("running_var", torch.ones(c_out))

    def forward(self, x):
        h = ad.elu(ad.conv1d(x, self.weight, self.bias))
        return ad.batch_norm_1d(h, self.gamma, self.beta, self.running_mean, self.running_var,
                                training=self.training, momentum=self.momentum)


class Encoder(nn.Module):
    def __init__(self, cfg: ScorerConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.input_channels] + cfg.encoder_filters()
        self.blocks = nn.ModuleList(
            ConvNormBlock(chans[b], chans[b + 1], cfg.kernel_size, cfg.bn_momentum) for b in range(cfg.depth))
        self.bottleneck = ConvNormBlock(chans[-1], cfg.bottleneck_filters(), cfg.kernel_size, cfg.bn_momentum)

    def forward(self, x):
        """Returns the final feature map and the pre-pool block outputs."""
        skips = []
        h = x
        for block in self.blocks:
            h = block(h)
            skips.append(h)
            h = ad.max_pool_1d(h, self.cfg.pool_factor)
        return self.bottleneck(h), skips


class Decoder(nn.Module):
    def __init__(self, cfg: ScorerConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_filters()
        c = cfg.bottleneck_filters()
        self.up_blocks = nn.ModuleList()
        self.merge_blocks = nn.ModuleList()
        for b, f in enumerate(cfg.decoder_filters()):
            skip = enc[cfg.depth - 1 - b]
            self.up_blocks.append(ConvNormBlock(c, f, cfg.kernel_size, cfg.bn_momentum))
            self.merge_blocks.append(ConvNormBlock(f + skip, f, cfg.kernel_size, cfg.bn_momentum))
            c = f

    def forward(self, h, skips):
        for b, (up, merge) in enumerate(zip(self.up_blocks, self.merge_blocks)):
            skip = skips[self.cfg.depth - 1 - b]
            h = up(ad.nearest_upsample_1d(h, self.cfg.pool_factor))
            if h.shape[-1] != skip.shape[-1]:
                raise ad.ShapeError(f"decoder block {b}: length {h.shape[-1]} vs skip {skip.shape[-1]}")
            h = merge(ad.concat([h, skip]))
        return h


class SegmentClassifier(nn.Module):
    """Mean over each 30-s epoch, then a linear map to class logits."""

    def __init__(self, cfg: ScorerConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.decoder_filters()[-1]
        bound = 1.0 / math.sqrt(c)
        self.weight = nn.Parameter(torch.empty(cfg.classes, c).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(cfg.classes))

    def forward(self, h):
        pooled = ad.mean_pool_over_window(h, self.cfg.epoch_samples)  # (N, C, E)
        return ad.linear(pooled.transpose(-1, -2), self.weight, self.bias)  # (N, E, classes)


class ScorerModel(nn.Module):
    """Parameter names are prefixed ``encoder.``, ``decoder.`` and ``classifier.``."""

    def __init__(self, cfg: ScorerConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ScorerConfig()
        torch.manual_seed(seed)
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.classifier = SegmentClassifier(self.cfg)
        self.eval()

    @property
    def params(self) -> ad.ParamStore:
        return ad.ParamStore.from_module(self)

    def check_input(self, x):
        if x.shape[-2] != self.cfg.input_channels:
            raise ValidationError(f"model expects {self.cfg.input_channels} channels, got {x.shape[-2]}")
        n = x.shape[-1]
        if n % self.cfg.epoch_samples:
            raise ValidationError(f"length {n} is not a whole number of {self.cfg.epoch_samples}-sample epochs")
        if n % self.cfg.total_pool:
            pad = self.cfg.total_pool - n % self.cfg.total_pool
            raise ValidationError(f"length {n} not divisible by cumulative pooling {self.cfg.total_pool}; "
                                  f"pad by {pad} samples")

    def encode(self, x):
        self.check_input(x)
        return self.encoder(x)

    def decode_logits(self, feat, skips):
        return self.classifier(self.decoder(feat, skips))

    def logits(self, x, encoder: Encoder | None = None):
        """Class logits (N, E, classes); ``encoder`` swaps in another encoder (e.g. the target copy)."""
        self.check_input(x)
        feat, skips = (encoder or self.encoder)(x)
        return self.decode_logits(feat, skips)

    def forward(self, x, encoder: Encoder | None = None):
        return ad.softmax(self.logits(x, encoder), dim=-1)


def recording_tensor(r: Recording, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(r.samples)).to(dtype).unsqueeze(0)


def scorer_forward(m: ScorerModel, r: Recording, encoder: Encoder | None = None) -> StageProbs:
    """Stage probabilities for a single recording, with the model in inference mode."""
    was_training = m.training
    m.eval()
    try:
        with torch.no_grad():
            p = m(recording_tensor(r, next(m.parameters()).dtype), encoder)[0]
    finally:
        m.train(was_training)
    return StageProbs(p.double().numpy())


def zero_channel_benchmark(m: ScorerModel, role: str, channel_roles) -> ScorerModel:
    """Copy of ``m`` whose first encoder conv ignores every input channel with ``role``."""
    idx = [i for i, r in enumerate(channel_roles) if r == role]
    if not idx:
        raise ValidationError(f"no {role} channel among {tuple(channel_roles)}")
    out = copy.deepcopy(m)
    with torch.no_grad():
        out.encoder.blocks[0].weight[:, idx, :] = 0.0
    return out


# -------------------------------------------------------------- discriminator

class TransformerLayer(nn.Module):
    """Post-norm encoder layer: x + MHSA(x) -> LN -> x + FFN(x) -> LN."""

    def __init__(self, e: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.n_heads = n_heads

        def lin(o, i):
            bound = 1.0 / math.sqrt(i)
            return nn.Parameter(torch.empty(o, i).uniform_(-bound, bound)), nn.Parameter(torch.zeros(o))

        self.w_qkv, self.b_qkv = lin(3 * e, e)
        self.w_out, self.b_out = lin(e, e)
        self.w_ff1, self.b_ff1 = lin(ff_mult * e, e)
        self.w_ff2, self.b_ff2 = lin(e, ff_mult * e)
        self.ln1_g = nn.Parameter(torch.ones(e))
        self.ln1_b = nn.Parameter(torch.zeros(e))
        self.ln2_g = nn.Parameter(torch.ones(e))
        self.ln2_b = nn.Parameter(torch.zeros(e))

    def forward(self, x):
        a = ad.multi_head_self_attention(x, self.w_qkv, self.b_qkv, self.w_out, self.b_out, self.n_heads)
        x = ad.layer_norm(ad.add(x, a), self.ln1_g, self.ln1_b)
        f = ad.linear(ad.elu(ad.linear(x, self.w_ff1, self.b_ff1)), self.w_ff2, self.b_ff2)
        return ad.layer_norm(ad.add(x, f), self.ln2_g, self.ln2_b)


class DiscriminatorModel(nn.Module):
    """Projects each epoch's 5 probabilities to ``embed_dim``, adds a learnable
    positional embedding, runs the transformer stack, flattens and maps to one logit."""

    def __init__(self, cfg: DiscriminatorConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        torch.manual_seed(seed)
        e, w = cfg.embed_dim, cfg.window_epochs
        self.w_in = nn.Parameter(torch.empty(e, N_CLASSES).uniform_(-1 / math.sqrt(N_CLASSES), 1 / math.sqrt(N_CLASSES)))
        self.b_in = nn.Parameter(torch.zeros(e))
        self.pos = nn.Parameter(0.02 * torch.randn(w, e))
        self.layers = nn.ModuleList(TransformerLayer(e, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_layers))
        self.w_head = nn.Parameter(torch.empty(1, w * e).uniform_(-1 / math.sqrt(w * e), 1 / math.sqrt(w * e)))
        self.b_head = nn.Parameter(torch.zeros(1))

    @property
    def params(self) -> ad.ParamStore:
        return ad.ParamStore.from_module(self)

    def logit(self, windows: torch.Tensor) -> torch.Tensor:
        """(N, window_epochs, 5) probabilities -> (N,) logits."""
        if windows.dim() == 2:
            windows = windows.unsqueeze(0)
        if windows.shape[1:] != (self.cfg.window_epochs, N_CLASSES):
            raise ad.ShapeError(f"expected (N, {self.cfg.window_epochs}, 5) windows, got {tuple(windows.shape)}")
        h = ad.add(ad.linear(windows, self.w_in, self.b_in), self.pos.expand(windows.shape[0], -1, -1))
        for layer in self.layers:
            h = layer(h)
        return ad.linear(h.flatten(1), self.w_head, self.b_head)[:, 0]

    def forward(self, windows):
        return ad.sigmoid(self.logit(windows))


def build_ensemble(cfg: DiscriminatorConfig | None = None, seed: int = 0) -> list[DiscriminatorModel]:
    cfg = cfg or DiscriminatorConfig()
    return [DiscriminatorModel(cfg, seed=seed * 1000 + 17 * k + 1) for k in range(cfg.ensemble_size)]


def extract_windows(p, starts, window: int) -> torch.Tensor:
    """Stack fixed-length windows from an (E, 5) probability sequence (array, StageProbs or tensor)."""
    if isinstance(p, StageProbs):
        p = torch.from_numpy(np.array(p.probs))
    elif not isinstance(p, torch.Tensor):
        p = torch.as_tensor(np.asarray(p))
    e = p.shape[0]
    for s in starts:
        if s < 0 or s + window > e:
            raise ValidationError(f"window [{s}, {s + window}) out of range for {e} epochs")
    return torch.stack([p[s : s + window] for s in starts])


def discriminator_forward(d: DiscriminatorModel, p, window_start: int) -> float:
    with torch.no_grad():
        w = extract_windows(p, [window_start], d.cfg.window_epochs).to(next(d.parameters()).dtype)
        return float(d(w)[0])


def ensemble_score(ens, p, window_start: int) -> float:
    if not ens:
        raise ValidationError("ensemble is empty")
    return float(np.mean([discriminator_forward(d, p, window_start) for d in ens]))


def tiling_starts(n_epochs: int, window: int) -> list[int]:
    """Window starts covering every epoch; the last window is right-aligned."""
    if n_epochs < window:
        raise ValidationError(f"recording has {n_epochs} epochs, fewer than the window {window}")
    starts = list(range(0, n_epochs - window + 1, window))
    if starts[-1] + window < n_epochs:
        starts.append(n_epochs - window)
    return starts

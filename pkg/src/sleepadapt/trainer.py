"""Supervised pretraining, the discriminator-guided adaptation loop and the
supervised benchmark fine-tune."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .core import Hypnogram, Recording, RngStream, Stage, ValidationError
from .models import (
    ConvNormBlock,
    DiscriminatorConfig,
    DiscriminatorModel,
    Encoder,
    ScorerConfig,
    ScorerModel,
    build_ensemble,
    recording_tensor,
)

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """A loss became non-finite; ``checkpoint`` holds the last good parameters."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainerConfig:
    alpha: float = 1.0
    beta: float = 0.1
    lr_encoder: float = 1e-5
    lr_discriminator: float = 1e-6
    epochs: int = 50
    batch: int = 1
    windows_per_recording: int = 4
    seed: int = 0
    clamp_eps: float = 1e-6
    checkpoint_every: int = 0
    # "recording": E_t (and the E_s anchor reference) normalise with per-recording
    # statistics while adapting; "running": the stored source statistics are used.
    bn_mode: str = "recording"
    refresh_bn_stats: bool = True

    def __post_init__(self):
        if self.bn_mode not in ("recording", "running"):
            raise ValidationError(f"unknown bn_mode {self.bn_mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if not 1 <= self.batch <= 8:
            raise ValidationError("batch must be between 1 and 8 recordings")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 800
    crop_epochs: int = 8
    batch: int = 8
    lr: float = 3e-3
    channel_dropout: float = 0.1
    seed: int = 0
    shuffle_labels: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    FIELDS = ("epoch", "gen_loss", "disc_loss", "anchor_loss", "kappa", "accuracy", "macro_f1", "wall_time")

    def append(self, **row):
        self.rows.append({k: row.get(k) for k in self.FIELDS})

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: "" if v is None else v for k, v in r.items()})
        return path

    def losses_only(self) -> list:
        """Rows without wall time, for reproducibility comparisons."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.rows]


def _x(r: Recording, dtype=torch.float32):
    return recording_tensor(r, dtype)


def _labels(h: Hypnogram) -> torch.Tensor:
    y = torch.from_numpy(np.array(h.stages)).long()
    return torch.where(y == Stage.U, torch.full_like(y, -100), y)


def _check_finite(loss: torch.Tensor, what: str, checkpoint=None):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"{what} became non-finite", checkpoint)


# ------------------------------------------------------------------ losses

def _clamp(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def loss_disc(ens: Sequence[DiscriminatorModel], f_s: torch.Tensor, f_t: torch.Tensor, windows_s, windows_t=None,
              eps: float = 1e-6) -> torch.Tensor:
    """Binary cross-entropy with source windows labelled 1 and target windows 0,
    averaged over windows and ensemble members."""
    from .models import extract_windows

    if not ens:
        raise ValidationError("ensemble is empty")
    windows_t = windows_s if windows_t is None else windows_t
    w = ens[0].cfg.window_epochs
    xs = extract_windows(f_s, windows_s, w)
    xt = extract_windows(f_t, windows_t, w)
    total = 0.0
    for d in ens:
        ps = _clamp(d(xs.to(d.w_in.dtype)), eps)
        pt = _clamp(d(xt.to(d.w_in.dtype)), eps)
        total = total - (torch.log(ps).mean() + torch.log(1.0 - pt).mean()) / 2.0
    loss = total / len(ens)
    _check_finite(loss, "discriminator loss")
    return loss


def loss_gen(ens: Sequence[DiscriminatorModel], f_t: torch.Tensor, windows, eps: float = 1e-6) -> torch.Tensor:
    """Mean of ``log(1 - D(f_t))`` where ``D`` is the ensemble-mean score."""
    from .models import extract_windows

    if not ens:
        raise ValidationError("ensemble is empty")
    xt = extract_windows(f_t, windows, ens[0].cfg.window_epochs)
    score = torch.stack([d(xt.to(d.w_in.dtype)) for d in ens]).mean(dim=0)
    loss = torch.log(1.0 - _clamp(score, eps)).mean()
    _check_finite(loss, "generator loss")
    return loss


def loss_anchor(e_t: Encoder, e_s_features: torch.Tensor | Encoder, x_s: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between final encoder feature maps on a source input.

    ``e_s_features`` may be the frozen source encoder or its precomputed output.
    """
    if isinstance(e_s_features, Encoder):
        with torch.no_grad():
            e_s_features = e_s_features(x_s)[0]
    feat_t = e_t(x_s)[0]
    if feat_t.shape != e_s_features.shape:
        raise ad.ShapeError(f"encoder outputs differ: {tuple(feat_t.shape)} vs {tuple(e_s_features.shape)}")
    return ((feat_t - e_s_features) ** 2).mean()


# -------------------------------------------------------------- pretraining

def _crop_batch(recs, hyps, cfg: PretrainConfig, gen: np.random.Generator, shuffled=None):
    xs, ys = [], []
    for _ in range(cfg.batch):
        i = int(gen.integers(len(recs)))
        r = recs[i]
        e_total = hyps[i].epoch_count
        crop = min(cfg.crop_epochs, e_total)
        s = int(gen.integers(0, e_total - crop + 1))
        ep = r.epoch_samples
        x = np.array(r.samples[:, s * ep : (s + crop) * ep])
        if cfg.channel_dropout > 0 and gen.random() < cfg.channel_dropout:
            x[int(gen.integers(x.shape[0]))] = 0.0
        labels = (shuffled[i] if shuffled is not None else hyps[i].stages)[s : s + crop]
        xs.append(x)
        ys.append(labels)
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)).long()


def _supervised_steps(model: ScorerModel, recs, hyps, cfg: PretrainConfig, params: ad.ParamStore,
                      train_modules, shuffled=None, on_step: Callable | None = None) -> list[float]:
    gen = RngStream(cfg.seed, "pretrain").generator()
    state = ad.AdamState(lr=cfg.lr)
    losses = []
    ce = torch.nn.CrossEntropyLoss(ignore_index=-100)
    model.eval()
    for m in train_modules:
        m.train()
    for step in range(cfg.steps):
        x, y = _crop_batch(recs, hyps, cfg, gen, shuffled)
        y = torch.where(y == Stage.U, torch.full_like(y, -100), y)
        for p in params.trainable().values():
            p.grad = None
        logits = model.logits(x)
        loss = ce(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))
        _check_finite(loss, "supervised loss")
        loss.backward()
        ad.adam_step(params, None, state)
        losses.append(float(loss.detach()))
        if on_step:
            on_step(step, float(loss))
    model.eval()
    return losses


def shuffled_labels(hyps: Sequence[Hypnogram], seed: int = 0) -> list[np.ndarray]:
    """Stage labels permuted over all epochs of all recordings, split back to the original lengths."""
    # pooled, not per recording: a within-recording shuffle keeps each
    # recording's stage proportions, which the signal still reveals
    gen = RngStream(seed, "shuffle").generator()
    pooled = gen.permutation(np.concatenate([h.stages for h in hyps]))
    return np.split(pooled, np.cumsum([h.epoch_count for h in hyps])[:-1])


def pretrain(recs: Sequence[Recording], hyps: Sequence[Hypnogram], scorer_cfg: ScorerConfig | None = None,
             cfg: PretrainConfig | None = None, model: ScorerModel | None = None) -> tuple[ScorerModel, list]:
    """Supervised cross-entropy training of the whole scorer on random crops.

    Returns the model (in inference mode) and the per-step loss curve.
    ``shuffle_labels`` trains on labels permuted over all epochs of all
    recordings, so they carry no information about the signal.
    """
    cfg = cfg or PretrainConfig()
    if not recs:
        raise ValidationError("pretraining needs labelled recordings")
    model = model or ScorerModel(scorer_cfg or ScorerConfig(input_channels=recs[0].n_channels,
                                                           epoch_samples=recs[0].epoch_samples),
                                 seed=cfg.seed)
    shuffled = None
    if cfg.shuffle_labels:
        shuffled = shuffled_labels(hyps, cfg.seed)
    params = model.params
    losses = _supervised_steps(model, recs, hyps, cfg, params, [model], shuffled)
    return model, losses


def train_supervised_benchmark(recs, hyps, pretrained: ScorerModel, cfg: PretrainConfig | None = None) -> ScorerModel:
    """Fine-tune a copy of the encoder on labelled target data; decoder and classifier stay frozen."""
    cfg = cfg or PretrainConfig(channel_dropout=0.0)
    model = copy.deepcopy(pretrained)
    params = model.params
    params.unfreeze()
    params.freeze("decoder.")
    params.freeze("classifier.")
    if cfg.steps == 0:
        return model
    _supervised_steps(model, recs, hyps, cfg, params, [model.encoder])
    return model


# ------------------------------------------------------------- adaptation

def _norm_blocks(module: torch.nn.Module) -> list[ConvNormBlock]:
    return [m for m in module.modules() if isinstance(m, ConvNormBlock)]


def bn_statistics(encoder: Encoder) -> dict[str, torch.Tensor]:
    """Copy of the running mean/var buffers of an encoder."""
    return {n: b.detach().clone() for n, b in encoder.named_buffers()}


def per_recording_stats(encoder: Encoder, on: bool = True) -> Encoder:
    """Switch an encoder between per-recording normalisation (running buffers
    left untouched) and normal inference."""
    for m in _norm_blocks(encoder):
        m.train(on)
        m.momentum = 0.0 if on else encoder.cfg.bn_momentum
    return encoder


@torch.no_grad()
def recalibrate_bn(encoder: Encoder, recordings: Sequence[Recording]) -> Encoder:
    """Replace the running statistics with the average of per-recording
    statistics over ``recordings``. Weights are not touched."""
    if not recordings:
        raise ValidationError("recalibration needs at least one recording")
    blocks = _norm_blocks(encoder)
    was_training = encoder.training
    encoder.train()
    for j, r in enumerate(recordings):
        for m in blocks:
            m.momentum = 1.0 / (j + 1)
        encoder(_x(r))
    for m in blocks:
        m.momentum = encoder.cfg.bn_momentum
    encoder.train(was_training)
    return encoder


@dataclass
class AdaptedModel:
    """Frozen scorer plus the adapted target encoder.

    ``source_stats`` keeps the normalisation statistics inherited from the
    source encoder so the adapted weights can still be applied to source data.
    """

    scorer: ScorerModel
    target_encoder: Encoder
    discriminators: list
    source_stats: dict | None = None

    def as_scorer(self, domain: str = "target") -> ScorerModel:
        if domain not in ("source", "target"):
            raise ValidationError(f"domain must be 'source' or 'target', got {domain!r}")
        m = copy.deepcopy(self.scorer)
        m.encoder.load_state_dict(self.target_encoder.state_dict())
        if domain == "source" and self.source_stats is not None:
            m.encoder.load_state_dict(self.source_stats, strict=False)
        # grad flags as on a freshly built model; torch picks different kernels
        # (and last-bit results) depending on requires_grad
        m.params.unfreeze()
        m.eval()
        return m


def _sample_windows(n_epochs: int, window: int, k: int, gen: np.random.Generator) -> list[int]:
    if n_epochs < window:
        raise ValidationError(f"recording with {n_epochs} epochs is shorter than the discriminator window {window}")
    return [int(s) for s in gen.integers(0, n_epochs - window + 1, size=k)]


def adapt(source: Sequence[Recording], target: Sequence[Recording], pretrained: ScorerModel,
          cfg: TrainerConfig | None = None, disc_cfg: DiscriminatorConfig | None = None,
          on_epoch: Callable | None = None, checkpoint_dir=None) -> tuple[AdaptedModel, TrainLog]:
    """Discriminator-guided fine-tuning of a copy of the encoder on unlabelled target data.

    Each iteration takes ``batch`` target recordings and as many random source
    recordings, updates every discriminator on its own BCE, then updates the
    target encoder on ``alpha * generator loss + beta * anchor loss``.
    Decoder, classifier and source encoder never change.

    With ``bn_mode="recording"`` the target encoder normalises each target
    recording with its own statistics during training (the anchor term always
    uses the inherited source statistics), and ``refresh_bn_stats``
    re-estimates its running statistics on ``target`` once training ends.
    The source statistics stay available through ``AdaptedModel.as_scorer("source")``.

    ``on_epoch(epoch, AdaptedModel)`` may return a dict of metrics
    (kappa, accuracy, macro_f1) that is logged.
    """
    cfg = cfg or TrainerConfig()
    disc_cfg = disc_cfg or DiscriminatorConfig()
    if not source or not target:
        raise ValidationError("adaptation needs source and target recordings")
    scorer = copy.deepcopy(pretrained)
    scorer.eval()
    scorer.params.freeze()
    source_stats = bn_statistics(scorer.encoder)
    e_t = copy.deepcopy(scorer.encoder)
    enc_params = ad.ParamStore.from_module(e_t, "encoder.")
    enc_params.unfreeze()
    batch_stats = cfg.bn_mode == "recording"
    ens = build_ensemble(disc_cfg, seed=cfg.seed)
    disc_params = [d.params for d in ens]
    enc_state = ad.AdamState(lr=cfg.lr_encoder)
    disc_states = [ad.AdamState(lr=cfg.lr_discriminator) for _ in ens]

    # the source branch is frozen: its probabilities and anchor features never change.
    # Both come from E_s exactly as deployed (running statistics).
    with torch.no_grad():
        src_x = [_x(r) for r in source]
        src_probs = [torch.softmax(scorer.logits(x), -1)[0] for x in src_x]
        src_feat = [scorer.encoder(x)[0] for x in src_x]

    gen = RngStream(cfg.seed, "adapt").generator()
    w = disc_cfg.window_epochs
    k = cfg.windows_per_recording
    out = AdaptedModel(scorer, e_t, ens, source_stats)
    log_rows = TrainLog()
    last_good = copy.deepcopy(e_t.state_dict())

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        per_recording_stats(e_t, batch_stats)
        order = gen.permutation(len(target))
        g_sum = d_sum = a_sum = 0.0
        n_iter = 0
        for start in range(0, len(order), cfg.batch):
            batch_t = [int(i) for i in order[start : start + cfg.batch]]
            batch_s = [int(i) for i in gen.integers(0, len(source), size=len(batch_t))]
            try:
                f_t = [torch.softmax(scorer.logits(_x(target[i]), e_t), -1)[0] for i in batch_t]
                ws = [_sample_windows(src_probs[i].shape[0], w, k, gen) for i in batch_s]
                wt = [_sample_windows(f.shape[0], w, k, gen) for f in f_t]

                for p in disc_params:
                    for t in p.params.values():
                        t.grad = None
                ld = sum(loss_disc(ens, src_probs[i], f.detach(), s_, t_, cfg.clamp_eps)
                         for i, f, s_, t_ in zip(batch_s, f_t, ws, wt)) / len(batch_t)
                ld.backward()
                for p, st in zip(disc_params, disc_states):
                    ad.adam_step(p, None, st)

                for t in enc_params.params.values():
                    t.grad = None
                lg = sum(loss_gen(ens, f, t_, cfg.clamp_eps) for f, t_ in zip(f_t, wt)) / len(batch_t)
                # the anchor sees E_t as it will run on source data: with the inherited
                # source statistics. Under per-recording statistics a rescaling of the
                # weights would be invisible to it.
                per_recording_stats(e_t, False)
                la = sum(loss_anchor(e_t, src_feat[i], src_x[i]) for i in batch_s) / len(batch_s)
                per_recording_stats(e_t, batch_stats)
                total = cfg.alpha * lg + cfg.beta * la
                _check_finite(total, "encoder objective", last_good)
                if cfg.alpha > 0 or cfg.beta > 0:
                    total.backward()
                    ad.adam_step(enc_params, None, enc_state)
                # discriminator gradients from the generator pass are discarded
                for p in disc_params:
                    for t in p.params.values():
                        t.grad = None
            except (FloatingPointError, TrainingDivergence) as exc:
                raise TrainingDivergence(f"epoch {epoch}: {exc}", last_good) from exc
            g_sum += float(lg.detach())
            d_sum += float(ld.detach())
            a_sum += float(la.detach())
            n_iter += 1
        per_recording_stats(e_t, False)
        e_t.eval()
        last_good = copy.deepcopy(e_t.state_dict())
        metrics = {}
        if on_epoch:
            snapshot = out
            if batch_stats and cfg.refresh_bn_stats:
                snapshot = AdaptedModel(scorer, recalibrate_bn(copy.deepcopy(e_t), target), ens, source_stats)
            metrics = on_epoch(epoch, snapshot) or {}
        log_rows.append(epoch=epoch, gen_loss=g_sum / n_iter, disc_loss=d_sum / n_iter, anchor_loss=a_sum / n_iter,
                        wall_time=time.perf_counter() - t0, **metrics)
        log.info("adapt epoch %d: gen %.4f disc %.4f anchor %.5f %s", epoch, g_sum / n_iter, d_sum / n_iter,
                 a_sum / n_iter, metrics)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            ad.ParamStore.from_module(e_t).save(Path(checkpoint_dir) / f"epoch{epoch + 1:03d}")
    if batch_stats and cfg.refresh_bn_stats:
        recalibrate_bn(e_t, target)
    e_t.eval()
    return out, log_rows

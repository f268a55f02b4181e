"""scikit-learn style wrappers around pretraining, adaptation and the benchmarks.

``X`` is always a sequence of :class:`~sleepadapt.core.Recording`, ``y`` a
sequence of :class:`~sleepadapt.core.Hypnogram` of matching length.
Predictions are lists of hypnograms (one per recording), so these are not
drop-in sklearn classifiers for flat arrays, but they follow the same
fit/predict/transform and get_params/set_params conventions.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import CHANNEL_ROLES, Hypnogram, Recording, StageProbs, ValidationError, probs_to_hypnogram
from .dsp import DistortionSpec, PreprocessConfig, distort, preprocess
from .evaluation import classification_report, cohen_kappa
from .models import DiscriminatorConfig, ScorerConfig, ScorerModel, scorer_forward, zero_channel_benchmark
from .trainer import PretrainConfig, TrainerConfig, adapt, pretrain, train_supervised_benchmark


def check_recordings(X, n_channels: int | None = None, min_epochs: int | None = None,
                     sample_rate: float | None = None) -> list[Recording]:
    """Validate a recording collection and return it as a list."""
    if isinstance(X, Recording):
        raise ValidationError("expected a sequence of recordings, got a single Recording")
    X = list(X)
    if not X:
        raise ValidationError("no recordings given")
    for r in X:
        if not isinstance(r, Recording):
            raise ValidationError(f"expected Recording, got {type(r).__name__}")
        if n_channels is not None and r.n_channels != n_channels:
            raise ValidationError(f"{r.id}: {r.n_channels} channels, estimator was fitted on {n_channels}")
        if sample_rate is not None and r.sample_rate != sample_rate:
            raise ValidationError(f"{r.id}: sample rate {r.sample_rate}, expected {sample_rate}")
        if min_epochs is not None and r.n_samples // r.epoch_samples < min_epochs:
            raise ValidationError(f"{r.id}: fewer than {min_epochs} epochs")
    return X


def check_hypnograms(y, X: list[Recording]) -> list[Hypnogram]:
    y = [h if isinstance(h, Hypnogram) else Hypnogram(h) for h in y]
    if len(y) != len(X):
        raise ValidationError(f"{len(X)} recordings but {len(y)} hypnograms")
    for r, h in zip(X, y):
        if h.epoch_count != r.n_samples // r.epoch_samples:
            raise ValidationError(f"{r.id}: hypnogram has {h.epoch_count} epochs, recording "
                                  f"{r.n_samples // r.epoch_samples}")
    return y


def _mean_kappa(pred, y) -> float:
    return float(np.mean([cohen_kappa(p, h) for p, h in zip(pred, y)]))


class _ScoringMixin:
    """predict / predict_proba / score on top of ``self._scoring_model()``."""

    def _check_X(self, X):
        return check_recordings(X, n_channels=self.n_channels_)

    def predict_proba(self, X) -> list[StageProbs]:
        model = self._scoring_model()
        return [scorer_forward(model, r) for r in self._check_X(X)]

    def predict(self, X) -> list[Hypnogram]:
        return [probs_to_hypnogram(p) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Mean per-recording Cohen's kappa."""
        X = self._check_X(X)
        return _mean_kappa(self.predict(X), check_hypnograms(y, X))

    def report(self, X, y):
        """Classification report over all epochs of ``X`` pooled."""
        X = self._check_X(X)
        y = check_hypnograms(y, X)
        pred = np.concatenate([p.stages for p in self.predict(X)])
        truth = np.concatenate([h.stages for h in y])
        return classification_report(Hypnogram(pred), Hypnogram(truth))


class SleepScorer(_ScoringMixin, ClassifierMixin, BaseEstimator):
    """Encoder/decoder sleep scorer trained with supervised cross-entropy."""

    def __init__(self, depth=4, base_filters=5, kernel_size=9, steps=800, crop_epochs=8, batch=8, lr=3e-3,
                 channel_dropout=0.1, shuffle_labels=False, random_state=0):
        self.depth = depth
        self.base_filters = base_filters
        self.kernel_size = kernel_size
        self.steps = steps
        self.crop_epochs = crop_epochs
        self.batch = batch
        self.lr = lr
        self.channel_dropout = channel_dropout
        self.shuffle_labels = shuffle_labels
        self.random_state = random_state

    def _configs(self, X):
        scfg = ScorerConfig(depth=self.depth, base_filters=self.base_filters, kernel_size=self.kernel_size,
                            input_channels=X[0].n_channels, epoch_samples=X[0].epoch_samples)
        pcfg = PretrainConfig(steps=self.steps, crop_epochs=self.crop_epochs, batch=self.batch, lr=self.lr,
                              channel_dropout=self.channel_dropout, seed=self.random_state,
                              shuffle_labels=self.shuffle_labels)
        return scfg, pcfg

    def fit(self, X, y):
        X = check_recordings(X, n_channels=X[0].n_channels if X else None)
        y = check_hypnograms(y, X)
        scfg, pcfg = self._configs(X)
        self.model_, self.loss_curve_ = pretrain(X, y, scfg, pcfg)
        self._set_fitted(X[0])
        return self

    def _set_fitted(self, r: Recording):
        self.n_channels_ = r.n_channels
        self.channel_roles_ = tuple(r.channel_roles)
        self.classes_ = np.arange(self.model_.cfg.classes)

    @classmethod
    def from_model(cls, model: ScorerModel, channel_roles=CHANNEL_ROLES) -> "SleepScorer":
        """Wrap an already trained model."""
        est = cls(depth=model.cfg.depth, base_filters=model.cfg.base_filters, kernel_size=model.cfg.kernel_size)
        est.model_ = model
        est.loss_curve_ = []
        est.n_channels_ = model.cfg.input_channels
        est.channel_roles_ = tuple(channel_roles)
        est.classes_ = np.arange(model.cfg.classes)
        return est

    def _scoring_model(self):
        check_is_fitted(self, "model_")
        return self.model_

    def zero_channel(self, role: str) -> "SleepScorer":
        """Copy whose predictions ignore every channel with ``role``."""
        check_is_fitted(self, "model_")
        out = copy.copy(self)
        out.model_ = zero_channel_benchmark(self.model_, role, self.channel_roles_)
        return out


class DiscriminatorGuidedAdapter(_ScoringMixin, BaseEstimator):
    """Adapts a fitted :class:`SleepScorer` to unlabelled target recordings.

    ``fit(X_target, X_source)``: the source recordings anchor the encoder and
    provide the reference hypnogram statistics for the discriminators.
    """

    def __init__(self, scorer=None, alpha=1.0, beta=10.0, lr_encoder=1e-3, lr_discriminator=1e-4, epochs=10,
                 batch=1, windows_per_recording=4, window_epochs=16, ensemble_size=3, bn_mode="recording",
                 refresh_bn_stats=True, random_state=0):
        self.scorer = scorer
        self.alpha = alpha
        self.beta = beta
        self.lr_encoder = lr_encoder
        self.lr_discriminator = lr_discriminator
        self.epochs = epochs
        self.batch = batch
        self.windows_per_recording = windows_per_recording
        self.window_epochs = window_epochs
        self.ensemble_size = ensemble_size
        self.bn_mode = bn_mode
        self.refresh_bn_stats = refresh_bn_stats
        self.random_state = random_state

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(alpha=self.alpha, beta=self.beta, lr_encoder=self.lr_encoder,
                             lr_discriminator=self.lr_discriminator, epochs=self.epochs, batch=self.batch,
                             windows_per_recording=self.windows_per_recording, seed=self.random_state,
                             bn_mode=self.bn_mode, refresh_bn_stats=self.refresh_bn_stats)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(window_epochs=self.window_epochs, ensemble_size=self.ensemble_size)

    def fit(self, X, X_source, on_epoch=None):
        if self.scorer is None:
            raise ValidationError("adapter needs a fitted SleepScorer")
        check_is_fitted(self.scorer, "model_")
        n_ch = self.scorer.n_channels_
        X = check_recordings(X, n_channels=n_ch, min_epochs=self.window_epochs)
        X_source = check_recordings(X_source, n_channels=n_ch, min_epochs=self.window_epochs)
        self.adapted_, self.log_ = adapt(X_source, X, self.scorer.model_, self.trainer_config(),
                                         self.discriminator_config(), on_epoch=on_epoch)
        self.n_channels_ = n_ch
        self.classes_ = self.scorer.classes_
        return self

    def _scoring_model(self, domain="target"):
        check_is_fitted(self, "adapted_")
        return self.adapted_.as_scorer(domain)

    def source_scorer(self) -> SleepScorer:
        """Adapted weights with the source normalisation statistics, for source-domain data."""
        return SleepScorer.from_model(self._scoring_model("source"), self.scorer.channel_roles_)


class SupervisedBenchmark(_ScoringMixin, BaseEstimator):
    """Encoder fine-tuned with target labels; decoder and classifier frozen."""

    def __init__(self, scorer=None, steps=400, crop_epochs=8, batch=8, lr=3e-3, random_state=0):
        self.scorer = scorer
        self.steps = steps
        self.crop_epochs = crop_epochs
        self.batch = batch
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        if self.scorer is None:
            raise ValidationError("benchmark needs a fitted SleepScorer")
        check_is_fitted(self.scorer, "model_")
        X = check_recordings(X, n_channels=self.scorer.n_channels_)
        y = check_hypnograms(y, X)
        cfg = PretrainConfig(steps=self.steps, crop_epochs=self.crop_epochs, batch=self.batch, lr=self.lr,
                             channel_dropout=0.0, seed=self.random_state)
        self.model_ = train_supervised_benchmark(X, y, self.scorer.model_, cfg)
        self.n_channels_ = self.scorer.n_channels_
        self.classes_ = self.scorer.classes_
        return self

    def _scoring_model(self):
        check_is_fitted(self, "model_")
        return self.model_


class Preprocessor(TransformerMixin, BaseEstimator):
    """DC removal, band-pass, robust scaling and clipping (stateless)."""

    def __init__(self, band=(0.3, 35.0), order=4, clip_limit=20.0):
        self.band = band
        self.order = order
        self.clip_limit = clip_limit

    def fit(self, X, y=None):
        check_recordings(X)
        return self

    def transform(self, X) -> list[Recording]:
        cfg = PreprocessConfig(band=tuple(self.band), order=self.order, clip_limit=self.clip_limit)
        return [preprocess(r, cfg) for r in check_recordings(X)]


class Distorter(TransformerMixin, BaseEstimator):
    """Applies one of the simulated distortions; ``kind=None`` is the identity (target-tagged)."""

    def __init__(self, kind="white_noise", params=None, seed=0):
        self.kind = kind
        self.params = params
        self.seed = seed

    def spec(self) -> DistortionSpec | None:
        if self.kind is None:
            return None
        return DistortionSpec(self.kind, dict(self.params or {}), self.seed)

    def fit(self, X, y=None):
        check_recordings(X)
        self.spec()
        return self

    def transform(self, X) -> list[Recording]:
        spec = self.spec()
        return [distort(r, spec) for r in check_recordings(X)]

"""Domain types shared across the package: stages, recordings, hypnograms,
per-epoch stage probabilities and labelled RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

EPOCH_SECONDS = 30
DEFAULT_SAMPLE_RATE = 128
N_CLASSES = 5

CHANNEL_ROLES = ("EEG", "EOG")


class ValidationError(ValueError):
    """Raised when an input violates a data-type invariant."""


class Stage(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4
    U = 5

    @classmethod
    def scored(cls) -> tuple["Stage", ...]:
        return (cls.W, cls.N1, cls.N2, cls.N3, cls.REM)


STAGE_NAMES = tuple(s.name for s in Stage.scored())


@dataclass(frozen=True)
class RngStream:
    """Named, seeded source of random draws.

    The label is hashed with SHA-256 and mixed into a ``SeedSequence`` so the
    same ``(seed, label)`` pair gives the same draws on every platform.
    """

    seed: int
    stream_label: str = "root"

    def _entropy(self) -> list[int]:
        digest = hashlib.sha256(self.stream_label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
        return [int(self.seed) & 0xFFFFFFFFFFFFFFFF, *words]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy())))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_label}/{label}")

    def int_seed(self) -> int:
        """A 63-bit integer derived from the stream, for libraries that take plain seeds."""
        return int(self.generator().integers(0, 2**63 - 1))


@dataclass(frozen=True, eq=False)
class Recording:
    id: str
    samples: np.ndarray
    channel_names: tuple[str, ...]
    channel_roles: tuple[str, ...]
    sample_rate: float = DEFAULT_SAMPLE_RATE
    domain_tag: str = "source"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ValidationError(f"samples must be C x T, got shape {samples.shape}")
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "channel_roles", tuple(self.channel_roles))
        if len(self.channel_names) != samples.shape[0] or len(self.channel_roles) != samples.shape[0]:
            raise ValidationError("channel names/roles must match the number of rows in samples")
        for role in self.channel_roles:
            if role not in CHANNEL_ROLES:
                raise ValidationError(f"unknown channel role {role!r}")
        if not self.sample_rate > 0:
            raise ValidationError("sample_rate must be positive")
        if self.domain_tag not in ("source", "target"):
            raise ValidationError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        epoch_count(self)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def epoch_samples(self) -> int:
        return int(round(self.sample_rate * EPOCH_SECONDS))

    def channels_with_role(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.channel_roles) if r == role]

    def replace(self, **changes) -> "Recording":
        kwargs = dict(
            id=self.id,
            samples=self.samples,
            channel_names=self.channel_names,
            channel_roles=self.channel_roles,
            sample_rate=self.sample_rate,
            domain_tag=self.domain_tag,
            meta=dict(self.meta),
        )
        kwargs.update(changes)
        return Recording(**kwargs)


@dataclass(frozen=True, eq=False)
class Hypnogram:
    stages: np.ndarray

    def __post_init__(self):
        stages = np.asarray(self.stages)
        if stages.ndim != 1:
            raise ValidationError("hypnogram must be one-dimensional")
        if stages.size and (not np.issubdtype(stages.dtype, np.integer) and not np.all(stages == np.round(stages))):
            raise ValidationError("stage codes must be integers")
        stages = stages.astype(np.int64)
        if stages.size and (stages.min() < 0 or stages.max() > int(Stage.U)):
            raise ValidationError("stage codes must lie in 0..5")
        stages.setflags(write=False)
        object.__setattr__(self, "stages", stages)

    @property
    def epoch_count(self) -> int:
        return int(self.stages.size)

    def __len__(self) -> int:
        return self.epoch_count

    def __eq__(self, other) -> bool:
        return isinstance(other, Hypnogram) and np.array_equal(self.stages, other.stages)

    @classmethod
    def from_labels(cls, labels: Sequence) -> "Hypnogram":
        return cls(np.array([Stage[l] if isinstance(l, str) else Stage(l) for l in labels], dtype=np.int64))


@dataclass(frozen=True, eq=False)
class StageProbs:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
            raise ValidationError(f"stage probabilities must be E x {N_CLASSES}, got {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValidationError("stage probabilities must be finite")
        if probs.size and (probs.min() < -1e-9 or probs.max() > 1 + 1e-9):
            raise ValidationError("stage probabilities must lie in [0, 1]")
        dev = np.abs(probs.sum(axis=1) - 1.0)
        if dev.size and dev.max() > 1e-3:
            row = int(dev.argmax())
            raise ValidationError(f"row {row} sums to {probs[row].sum():.6f}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def epoch_count(self) -> int:
        return self.probs.shape[0]


def probs_to_hypnogram(p: StageProbs) -> Hypnogram:
    """Per-epoch argmax; ``np.argmax`` returns the first maximum, so ties go to the lowest stage."""
    if not isinstance(p, StageProbs):
        p = StageProbs(p)
    return Hypnogram(np.argmax(p.probs, axis=1))


def one_hot(h: Hypnogram) -> StageProbs:
    if np.any(h.stages == Stage.U):
        raise ValidationError("U epochs have no probability encoding")
    return StageProbs(np.eye(N_CLASSES)[h.stages])


def epoch_count(r) -> int:
    """Number of whole 30-s epochs in a recording (or C x T array at 128 Hz)."""
    if isinstance(r, Recording):
        n, rate = r.n_samples, r.sample_rate
    else:
        n, rate = np.asarray(r).shape[-1], DEFAULT_SAMPLE_RATE
    epoch_len = rate * EPOCH_SECONDS
    if epoch_len != int(epoch_len):
        raise ValidationError(f"sample_rate {rate} does not give an integer epoch length")
    epoch_len = int(epoch_len)
    if n <= 0 or n % epoch_len:
        raise ValidationError(f"T={n} is not a positive multiple of the epoch length {epoch_len}")
    return n // epoch_len


def split_dataset(ids, train_fraction, strata=None, rng: RngStream | None = None):
    """Stratified random split into ``(train_ids, test_ids)``.

    Each stratum contributes ``round(train_fraction * n)`` ids to the training
    side, clipped so both sides stay non-empty when the stratum has at least
    two members.
    """
    ids = list(ids)
    if not ids:
        raise ValidationError("cannot split an empty id list")
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must be in (0, 1)")
    if len(set(ids)) != len(ids):
        raise ValidationError("ids must be unique")
    if strata is None:
        strata = ["all"] * len(ids)
    elif isinstance(strata, dict):
        strata = [strata[i] for i in ids]
    else:
        strata = list(strata)
    if len(strata) != len(ids):
        raise ValidationError("every id needs a stratum label")
    gen = (rng or RngStream(0, "split")).generator()

    groups: dict = {}
    for i, s in zip(ids, strata):
        groups.setdefault(s, []).append(i)
    train, test = [], []
    for key in sorted(groups, key=str):
        members = groups[key]
        order = gen.permutation(len(members))
        n_train = int(np.floor(train_fraction * len(members) + 0.5))
        if len(members) >= 2:
            n_train = min(max(n_train, 1), len(members) - 1)
        train += [members[j] for j in order[:n_train]]
        test += [members[j] for j in order[n_train:]]
    return train, test

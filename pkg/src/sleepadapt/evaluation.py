"""Agreement metrics, chance-kappa distributions and the paired sign-flip
permutation test."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import N_CLASSES, STAGE_NAMES, Hypnogram, RngStream, Stage, ValidationError


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.stages if isinstance(a, Hypnogram) else np.asarray(a)
    b = b.stages if isinstance(b, Hypnogram) else np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"hypnograms differ in length: {a.size} vs {b.size}")
    keep = (a != Stage.U) & (b != Stage.U)
    if not keep.any():
        raise ValidationError("no scorable epochs left after dropping U")
    return a[keep], b[keep]


def confusion_matrix(a, b) -> np.ndarray:
    """5x5 counts; rows index ``a``, columns ``b``. U epochs are dropped pairwise."""
    a, b = _pair(a, b)
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(m, (a, b), 1)
    return m


def kappa_from_table(m: np.ndarray) -> tuple[float, bool]:
    """Returns ``(kappa, degenerate)``; degenerate means chance agreement is 1."""
    n = m.sum()
    p_o = np.trace(m) / n
    p_e = float(m.sum(axis=1) @ m.sum(axis=0)) / n**2
    if np.isclose(p_e, 1.0):
        return 1.0, True
    return float((p_o - p_e) / (1.0 - p_e)), False


def cohen_kappa(a, b) -> float:
    return kappa_from_table(confusion_matrix(a, b))[0]


@dataclass
class MetricReport:
    kappa: float
    accuracy: float
    macro_f1: float
    per_class: dict
    n_epochs_scored: int
    kappa_degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def per_class_rows(self) -> list[dict]:
        return [{"stage": name, **vals} for name, vals in self.per_class.items()]


def classification_report(pred, truth) -> MetricReport:
    m = confusion_matrix(truth, pred)  # rows truth, cols pred
    n = int(m.sum())
    kappa, degenerate = kappa_from_table(m)
    per_class = {}
    f1s = []
    for c, name in enumerate(STAGE_NAMES):
        tp = int(m[c, c])
        support = int(m[c].sum())
        predicted = int(m[:, c].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[name] = {"precision": precision, "recall": recall, "f1": f1, "support": support}
        if support:
            f1s.append(f1)
    return MetricReport(kappa=kappa, accuracy=float(np.trace(m) / n), macro_f1=float(np.mean(f1s)),
                        per_class=per_class, n_epochs_scored=n, kappa_degenerate=degenerate)


@dataclass
class ChanceKappaResult:
    samples: list
    mean: float
    std: float
    significance_threshold: float
    quantile_level: float = 0.999
    degenerate_count: int = 0
    pairs: list = field(default_factory=list)

    @property
    def collapsed(self) -> bool:
        """True when predictions agree regardless of input (mean kappa of 1)."""
        return bool(np.isclose(self.mean, 1.0))

    def summary(self) -> dict:
        return {"n": len(self.samples), "mean": self.mean, "std": self.std,
                "significance_threshold": self.significance_threshold,
                "quantile_level": self.quantile_level, "degenerate_count": self.degenerate_count}


def chance_kappa(predict, dataset, n: int = 300, rng: RngStream | None = None,
                 quantile: float = 0.999) -> ChanceKappaResult:
    """Kappa between predictions for randomly paired distinct recordings.

    ``predict`` maps a recording to a Hypnogram. Each recording is scored once;
    pairs are drawn with replacement across iterations.
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise ValidationError("chance kappa needs at least two recordings")
    hyps = [predict(r) for r in dataset]
    gen = (rng or RngStream(0, "chance_kappa")).generator()
    samples, pairs, degenerate = [], [], 0
    for _ in range(n):
        i, j = (int(k) for k in gen.choice(len(dataset), size=2, replace=False))
        a, b = hyps[i].stages, hyps[j].stages
        common = min(a.size, b.size)
        k, degen = kappa_from_table(confusion_matrix(a[:common], b[:common]))
        samples.append(k)
        pairs.append((i, j))
        degenerate += degen
    samples_arr = np.asarray(samples)
    return ChanceKappaResult(
        samples=samples,
        mean=float(samples_arr.mean()),
        std=float(samples_arr.std()),
        significance_threshold=float(np.quantile(samples_arr, quantile)),
        quantile_level=quantile,
        degenerate_count=int(degenerate),
        pairs=pairs,
    )


EXHAUSTIVE_MAX = 20


def permutation_test(d, n_permutations: int = 10_000, mode: str = "monte_carlo",
                     rng: RngStream | None = None, chunk: int = 20_000) -> float:
    """One-sided paired sign-flip test of ``mean(d) > 0``.

    ``p = (1 + #{perm >= obs}) / (1 + P)``, where ``P`` is ``n_permutations``
    random sign vectors, or all ``2**len(d)`` sign patterns in exhaustive mode.
    """
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValidationError("need at least one difference")
    if not np.all(np.isfinite(d)):
        raise ValidationError("differences must be finite")
    obs = d.mean()
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))
    if mode == "exhaustive":
        if d.size > EXHAUSTIVE_MAX:
            raise ValidationError(f"exhaustive mode supports at most {EXHAUSTIVE_MAX} differences")
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=d.size)))
        count = int(np.sum((signs * d).mean(axis=1) >= obs - tol))
        return (1 + count) / (1 + signs.shape[0])
    if mode != "monte_carlo":
        raise ValidationError(f"unknown mode {mode!r}")
    if n_permutations < 1:
        raise ValidationError("n_permutations must be positive")
    gen = (rng or RngStream(0, "permutation")).generator()
    count, done = 0, 0
    while done < n_permutations:
        b = min(chunk, n_permutations - done)
        signs = np.where(gen.random((b, d.size)) < 0.5, 1.0, -1.0)
        count += int(np.sum((signs * d).mean(axis=1) >= obs - tol))
        done += b
    return (1 + count) / (1 + n_permutations)

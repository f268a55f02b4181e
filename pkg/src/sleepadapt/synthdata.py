"""Synthetic sleep recordings with a known latent hypnogram, and dataset
manifests for source/target domain pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    EPOCH_SECONDS,
    Hypnogram,
    Recording,
    RngStream,
    Stage,
    ValidationError,
)
from .dsp import DistortionSpec, PreprocessConfig, distort, preprocess
from .io import read_hypnogram, read_recording, write_hypnogram, write_recording

MANIFEST_VERSION = 1

EEG_BANDS = ((0.5, 2.0), (2.0, 7.0), (7.0, 12.0), (12.0, 16.0), (16.0, 30.0))

# rows/cols ordered W, N1, N2, N3, REM
DEFAULT_TRANSITIONS = np.array(
    [
        [0.80, 0.18, 0.02, 0.00, 0.00],
        [0.10, 0.55, 0.30, 0.00, 0.05],
        [0.03, 0.04, 0.80, 0.09, 0.04],
        [0.00, 0.00, 0.12, 0.88, 0.00],
        [0.05, 0.05, 0.08, 0.00, 0.82],
    ]
)

# EEG band powers (delta, theta, alpha, sigma, beta) per stage
DEFAULT_BAND_POWERS = np.array(
    [
        [0.5, 0.8, 3.0, 0.5, 1.5],
        [1.0, 2.5, 0.8, 0.4, 0.6],
        [2.0, 1.5, 0.5, 2.5, 0.4],
        [8.0, 2.0, 0.3, 0.8, 0.2],
        [0.8, 2.0, 1.0, 0.3, 0.8],
    ]
)

# eye-movement transients per second, and slow rolling eye movement power
DEFAULT_EOG_EVENT_RATE = np.array([0.5, 0.05, 0.0, 0.0, 0.8])
DEFAULT_EOG_SLOW_POWER = np.array([0.3, 2.0, 0.2, 0.1, 0.3])


@dataclass
class SleepHmm:
    transitions: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITIONS.copy())
    initial: np.ndarray = field(default_factory=lambda: np.eye(5)[0])
    min_dwell: np.ndarray = field(default_factory=lambda: np.array([2, 1, 2, 2, 2]))
    band_powers: np.ndarray = field(default_factory=lambda: DEFAULT_BAND_POWERS.copy())
    eog_event_rate: np.ndarray = field(default_factory=lambda: DEFAULT_EOG_EVENT_RATE.copy())
    eog_slow_power: np.ndarray = field(default_factory=lambda: DEFAULT_EOG_SLOW_POWER.copy())
    eeg_bleed: float = 0.4
    recording_jitter: float = 0.25
    epoch_jitter: float = 0.2

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.min_dwell = np.asarray(self.min_dwell, dtype=np.int64)
        self.band_powers = np.asarray(self.band_powers, dtype=np.float64)
        if self.transitions.shape != (5, 5) or not np.allclose(self.transitions.sum(axis=1), 1.0):
            raise ValidationError("transition matrix must be 5x5 with rows summing to 1")
        if np.any(self.transitions < 0):
            raise ValidationError("transition probabilities must be non-negative")
        if not np.isclose(self.initial.sum(), 1.0):
            raise ValidationError("initial distribution must sum to 1")
        if np.any(self.min_dwell < 1):
            raise ValidationError("minimum dwell must be at least one epoch")
        if self.band_powers.shape != (5, len(EEG_BANDS)) or np.any(self.band_powers < 0):
            raise ValidationError("band powers must be a non-negative 5 x 5 array")

    def stationary(self) -> np.ndarray:
        """Long-run stage occupancy of the dwell-constrained chain.

        Each stage is expanded into ``min_dwell`` counter states; only the last
        counter state follows the transition matrix.
        """
        offsets = np.concatenate([[0], np.cumsum(self.min_dwell)])
        n = int(offsets[-1])
        P = np.zeros((n, n))
        for s in range(5):
            for d in range(self.min_dwell[s]):
                i = offsets[s] + d
                if d < self.min_dwell[s] - 1:
                    P[i, i + 1] = 1.0
                    continue
                for t in range(5):
                    j = i if t == s else offsets[t]
                    P[i, j] += self.transitions[s, t]
        vals, vecs = np.linalg.eig(P.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        v = v / v.sum()
        return np.array([v[offsets[s] : offsets[s + 1]].sum() for s in range(5)])

    def sample_path(self, epochs: int, gen: np.random.Generator) -> np.ndarray:
        """Stage path that starts and ends in W and honours ``min_dwell``."""
        w_dwell = int(self.min_dwell[Stage.W])
        if epochs < 4 or 2 * w_dwell > epochs:
            raise ValidationError(f"cannot fit a W-bounded path with dwell {w_dwell} into {epochs} epochs")
        path = np.empty(epochs, dtype=np.int64)
        state = int(gen.choice(5, p=self.initial))
        if state != Stage.W:
            state = int(Stage.W)
        dwell = 0
        for e in range(epochs):
            if dwell >= self.min_dwell[state]:
                nxt = int(gen.choice(5, p=self.transitions[state]))
                if nxt != state:
                    state, dwell = nxt, 0
            path[e] = state
            dwell += 1
        # close the night awake: the final W bout keeps its minimum dwell
        path[epochs - w_dwell :] = Stage.W
        return path


def _band_noise(n: int, band, rate: float, gen: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(gen.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(freqs < band[0]) | (freqs >= band[1])] = 0.0
    x = np.fft.irfft(spec, n)
    return x / (x.std() + 1e-12)


def _smooth_envelope(per_epoch: np.ndarray, epoch_len: int, ramp: int) -> np.ndarray:
    env = np.repeat(per_epoch, epoch_len)
    if ramp > 1:
        kernel = np.ones(ramp) / ramp
        env = np.convolve(np.pad(env, (ramp // 2, ramp - 1 - ramp // 2), mode="edge"), kernel, mode="valid")
    return env


def generate_recording(hmm: SleepHmm, epochs: int, rate: float = 128.0, rng: RngStream | None = None,
                       rec_id: str | None = None):
    """Sample a latent stage path and synthesise a two-channel (EEG, EOG) recording for it."""
    rng = rng or RngStream(0, "synth")
    gen = rng.generator()
    path = hmm.sample_path(epochs, gen)
    epoch_len = int(round(rate * EPOCH_SECONDS))
    T = epochs * epoch_len
    ramp = int(rate)

    rec_gain = np.exp(hmm.recording_jitter * gen.standard_normal(len(EEG_BANDS)))
    eeg = np.zeros(T)
    for b, band in enumerate(EEG_BANDS):
        jitter = np.exp(hmm.epoch_jitter * gen.standard_normal(epochs))
        power = hmm.band_powers[path, b] * rec_gain[b] * jitter
        eeg += np.sqrt(_smooth_envelope(power, epoch_len, ramp)) * _band_noise(T, band, rate, gen)
    eeg += 0.3 * _band_noise(T, (0.3, 40.0), rate, gen)

    slow_power = hmm.eog_slow_power[path] * np.exp(hmm.epoch_jitter * gen.standard_normal(epochs))
    eog = np.sqrt(_smooth_envelope(slow_power, epoch_len, ramp)) * _band_noise(T, (0.2, 1.0), rate, gen)
    eog += hmm.eeg_bleed * eeg + 0.3 * _band_noise(T, (0.3, 40.0), rate, gen)
    # saccade-like transients: fast rise, ~300 ms plateau, decay
    t = np.arange(int(0.6 * rate)) / rate
    saccade = np.tanh(t / 0.02) * np.exp(-np.maximum(t - 0.3, 0) / 0.08)
    events = np.zeros(T)
    for e in range(epochs):
        count = gen.poisson(hmm.eog_event_rate[path[e]] * EPOCH_SECONDS)
        pos = e * epoch_len + gen.integers(0, epoch_len, size=count)
        np.add.at(events, pos, gen.choice([-1.0, 1.0], size=count) * gen.uniform(2.0, 4.0, size=count))
    eog += np.convolve(events, saccade)[:T]

    overall = np.exp(0.3 * gen.standard_normal())
    samples = np.stack([eeg, eog]) * overall
    rec = Recording(
        id=rec_id or f"rec-{rng.stream_label}",
        samples=samples.astype(np.float32),
        channel_names=("EEG", "EOG"),
        channel_roles=("EEG", "EOG"),
        sample_rate=rate,
        domain_tag="source",
    )
    return rec, Hypnogram(path)


def generate_dataset(n: int, epochs: int = 64, rate: float = 128.0, seed: int = 0,
                     hmm: SleepHmm | None = None, preprocess_cfg: PreprocessConfig | None = None):
    """``n`` preprocessed clean recordings with their hypnograms, in memory."""
    hmm = hmm or SleepHmm()
    root = RngStream(seed, "synthdata")
    recs, hyps = [], []
    for i in range(n):
        rec_id = f"syn{seed}-{i:04d}"
        r, h = generate_recording(hmm, epochs, rate, root.child(rec_id), rec_id=rec_id)
        recs.append(preprocess(r, preprocess_cfg))
        hyps.append(h)
    return recs, hyps


@dataclass
class DatasetManifest:
    entries: list
    generator_seed: int
    domain_tag: str = "source"
    format_version: int = MANIFEST_VERSION
    root: Path | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "generator_seed": self.generator_seed,
                "domain_tag": self.domain_tag,
                "entries": self.entries,
            },
            indent=2,
            sort_keys=True,
        )

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        self.root = path.parent
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        if d.get("format_version") != MANIFEST_VERSION:
            raise ValidationError(f"{path}: unsupported manifest version {d.get('format_version')}")
        m = cls(d["entries"], d["generator_seed"], d["domain_tag"], d["format_version"], path.parent)
        m.validate()
        return m

    def validate(self):
        for e in self.entries:
            for key in ("recording", "hypnogram"):
                if not (self.root / e[key]).exists():
                    raise ValidationError(f"manifest entry {e['id']}: missing {e[key]}")

    def load(self):
        recs = [read_recording(self.root / e["recording"]) for e in self.entries]
        hyps = [read_hypnogram(self.root / e["hypnogram"]) for e in self.entries]
        return recs, hyps


def write_dataset(recs, hyps, out_dir, generator_seed: int, domain_tag: str = "source",
                  distortion: DistortionSpec | None = None) -> DatasetManifest:
    out_dir = Path(out_dir)
    entries = []
    for r, h in zip(recs, hyps):
        rp = write_recording(r, out_dir / f"{r.id}.json")
        hp = write_hypnogram(h, out_dir / f"{r.id}.hyp.csv")
        entries.append({
            "id": r.id,
            "recording": rp.name,
            "hypnogram": hp.name,
            "domain_tag": domain_tag,
            "distortion": distortion.to_dict() if distortion else None,
        })
    m = DatasetManifest(entries, generator_seed, domain_tag)
    m.write(out_dir / "manifest.json")
    return m


def build_domain_pair(n: int, distortion: DistortionSpec | None, out_dir, epochs: int = 64,
                      rate: float = 128.0, seed: int = 0, hmm: SleepHmm | None = None):
    """Generate ``n`` clean recordings into ``out_dir/source`` and distorted copies
    into ``out_dir/target``; hypnograms are carried over unchanged."""
    if n < 2:
        raise ValidationError("a domain pair needs at least two recordings")
    recs, hyps = generate_dataset(n, epochs, rate, seed, hmm)
    out_dir = Path(out_dir)
    source = write_dataset(recs, hyps, out_dir / "source", seed, "source")
    targets = [distort(r, distortion) for r in recs]
    if distortion is None:
        # untouched copies keep the source bytes, tag included
        targets = recs
    target = write_dataset(targets, hyps, out_dir / "target", seed, "target", distortion)
    return source, target

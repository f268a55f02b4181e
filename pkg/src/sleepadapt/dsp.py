"""Preprocessing and the distortion engines that turn clean recordings into
target-domain recordings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .core import Recording, RngStream, ValidationError

DISTORTION_KINDS = ("white_noise", "amp_overload", "spectral")

DEFAULT_PARAMS = {
    "white_noise": {"target_channel_role": "EOG", "sigma": 5.0},
    "amp_overload": {
        "pulse_rate_hz": 20.0,
        "amplitude_factor": 2.0,
        "superimposed_sigma": 1.0,
        "tau1": 0.050,
        "tau2": 0.010,
        "roles": ["EEG", "EOG"],
    },
    "spectral": {"lowcut": 5.0, "highcut": 20.0, "order": 4, "roles": ["EEG", "EOG"]},
}


@dataclass(frozen=True)
class SosFilter:
    """Cascade of normalised biquads; rows are ``(b0, b1, b2, a0=1, a1, a2)``."""

    sections: np.ndarray
    design_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sos = np.atleast_2d(np.asarray(self.sections, dtype=np.float64))
        if sos.ndim != 2 or sos.shape[1] != 6:
            raise ValidationError("SOS array must have shape (n_sections, 6)")
        if not np.allclose(sos[:, 3], 1.0):
            raise ValidationError("every section must be normalised to a0 = 1")
        sos.setflags(write=False)
        object.__setattr__(self, "sections", sos)

    def pole_radii(self) -> np.ndarray:
        return np.concatenate([np.abs(np.roots(s[3:])) for s in self.sections])

    @property
    def is_stable(self) -> bool:
        return bool(np.all(self.pole_radii() < 1.0))

    def frequency_response(self, freqs_hz, rate=None) -> np.ndarray:
        """Complex H(e^{jw}) evaluated directly from the section polynomials."""
        rate = rate or self.design_meta["sample_rate"]
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / rate)
        zi = 1.0 / z
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sections:
            h *= (b0 + b1 * zi + b2 * zi**2) / (a0 + a1 * zi + a2 * zi**2)
        return h


def design_bandpass(lowcut, highcut, order=4, rate=128.0) -> SosFilter:
    """Butterworth band-pass of the given prototype order as normalised SOS."""
    nyq = rate / 2.0
    if not (0 < lowcut < highcut < nyq):
        raise ValidationError(f"band edges must satisfy 0 < {lowcut} < {highcut} < {nyq}")
    if int(order) != order or order < 1:
        raise ValidationError("order must be a positive integer")
    sos = signal.butter(int(order), [lowcut, highcut], btype="bandpass", output="sos", fs=rate)
    f = SosFilter(sos, {"order": int(order), "lowcut": float(lowcut), "highcut": float(highcut),
                        "sample_rate": float(rate)})
    if not f.is_stable:
        raise ValidationError(f"designed filter {f.design_meta} is unstable")
    return f


def apply_sos(f: SosFilter, x) -> np.ndarray:
    """Causal cascaded DF-II-transposed filtering from zero initial state, along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValidationError("input series must be non-empty")
    return signal.sosfilt(np.array(f.sections), np.array(x), axis=-1)


@dataclass(frozen=True)
class PreprocessConfig:
    band: tuple = (0.3, 35.0)
    order: int = 4
    clip_limit: float = 20.0


def preprocess(r: Recording, cfg: PreprocessConfig | None = None) -> Recording:
    """DC removal, band-pass, robust scaling by median/IQR, then clipping."""
    cfg = cfg or PreprocessConfig()
    f = design_bandpass(cfg.band[0], cfg.band[1], cfg.order, r.sample_rate)
    x = r.samples.astype(np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    x = apply_sos(f, x)
    out = np.empty_like(x)
    flagged = []
    for c in range(x.shape[0]):
        q25, med, q75 = np.percentile(x[c], [25, 50, 75])
        iqr = q75 - q25
        if iqr <= 1e-12 * max(1.0, np.abs(x[c]).max()):
            warnings.warn(f"{r.id}: channel {r.channel_names[c]} has zero IQR; scaling by 1")
            flagged.append(r.channel_names[c])
            iqr = 1.0
        out[c] = (x[c] - med) / iqr
    np.clip(out, -cfg.clip_limit, cfg.clip_limit, out=out)
    meta = dict(r.meta, preprocessed=True)
    if flagged:
        meta["zero_iqr_channels"] = flagged
    return r.replace(samples=out.astype(np.float32), meta=meta)


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ValidationError(f"unknown distortion kind {self.kind!r}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        p = merged
        if self.kind == "white_noise" and not p["sigma"] > 0:
            raise ValidationError("sigma must be positive")
        if self.kind == "amp_overload":
            if not p["pulse_rate_hz"] > 0:
                raise ValidationError("pulse_rate_hz must be positive")
            if not (p["tau1"] > p["tau2"] > 0):
                raise ValidationError("need tau1 > tau2 > 0")
            if p["amplitude_factor"] < 0 or p["superimposed_sigma"] < 0:
                raise ValidationError("amplitude_factor and superimposed_sigma must be non-negative")
        if self.kind == "spectral" and not 0 < p["lowcut"] < p["highcut"]:
            raise ValidationError("need 0 < lowcut < highcut")

    @property
    def rng(self) -> RngStream:
        return RngStream(self.seed, f"distortion/{self.kind}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        return cls(d["kind"], dict(d.get("params", {})), int(d.get("seed", 0)))

    @property
    def label(self) -> str:
        p = self.params
        if self.kind == "white_noise":
            return f"white_noise_{p['target_channel_role'].lower()}"
        if self.kind == "amp_overload":
            return f"amp_overload_{p['pulse_rate_hz']:g}hz"
        return f"spectral_{p['lowcut']:g}_{p['highcut']:g}hz"


def _expect(spec: DistortionSpec, kind: str):
    if spec.kind != kind:
        raise ValidationError(f"expected a {kind} spec, got {spec.kind}")


def _target(r: Recording, distorted: np.ndarray, spec: DistortionSpec, **extra) -> Recording:
    meta = dict(r.meta, distortion=spec.to_dict(), **extra)
    return r.replace(samples=distorted, domain_tag="target", meta=meta)


def distort_white_noise(r: Recording, spec: DistortionSpec) -> Recording:
    _expect(spec, "white_noise")
    role = spec.params["target_channel_role"]
    idx = r.channels_with_role(role)
    if not idx:
        raise ValidationError(f"{r.id} has no {role} channel")
    gen = spec.rng.child(r.id).generator()
    x = np.array(r.samples, copy=True)
    for c in idx:
        x[c] = gen.normal(0.0, spec.params["sigma"], size=r.n_samples).astype(np.float32)
    return _target(r, x, spec)


def biexponential_pulse(rate, tau1=0.050, tau2=0.010, amplitude=1.0, support_taus=6.0) -> np.ndarray:
    """Overshoot ``A(e^{-t/tau1} - e^{-t/tau2})`` scaled to peak ``A``, minus the same
    shape delayed by ``tau1``.

    The overshoot peaks at ``t* = ln(tau1/tau2) * tau1 * tau2 / (tau1 - tau2)``, before
    the undershoot starts, so the pulse maximum is exactly ``A``.
    """
    n = int(np.ceil((support_taus + 1) * tau1 * rate)) + 1
    t = np.arange(n) / rate
    t_peak = np.log(tau1 / tau2) * tau1 * tau2 / (tau1 - tau2)
    g_peak = np.exp(-t_peak / tau1) - np.exp(-t_peak / tau2)
    over = (np.exp(-t / tau1) - np.exp(-t / tau2)) / g_peak
    delay = int(round(tau1 * rate))
    under = np.zeros(n)
    under[delay:] = over[: n - delay]
    return amplitude * (over - under)


def poisson_event_samples(duration_s, rate_hz, sample_rate, gen: np.random.Generator) -> np.ndarray:
    """Sample indices of a homogeneous Poisson process on ``[0, duration_s)``."""
    count = gen.poisson(rate_hz * duration_s)
    times = np.sort(gen.uniform(0.0, duration_s, size=count))
    return np.floor(times * sample_rate).astype(np.int64)


def distort_amp_overload(r: Recording, spec: DistortionSpec) -> Recording:
    _expect(spec, "amp_overload")
    p = spec.params
    gen = spec.rng.child(r.id).generator()
    T = r.n_samples
    events = poisson_event_samples(T / r.sample_rate, p["pulse_rate_hz"], r.sample_rate, gen)
    unit = biexponential_pulse(r.sample_rate, p["tau1"], p["tau2"], 1.0)
    train = np.zeros(T + unit.size)
    support = np.zeros(T + unit.size, dtype=bool)
    np.add.at(train, events, 1.0)
    train = np.convolve(train, unit)[: T]
    for e in events:
        support[e : e + unit.size] = True
    support = support[:T]

    x = r.samples.astype(np.float64)
    out = np.array(x, copy=True)
    for c in range(r.n_channels):
        if r.channel_roles[c] not in p["roles"]:
            continue
        amp = p["amplitude_factor"] * x[c].std()
        out[c] += amp * train
        if p["superimposed_sigma"] > 0:
            out[c, support] += gen.normal(0.0, p["superimposed_sigma"], size=int(support.sum()))
    return _target(r, out.astype(np.float32), spec, n_pulses=int(events.size))


def distort_spectral(r: Recording, spec: DistortionSpec) -> Recording:
    _expect(spec, "spectral")
    p = spec.params
    f = design_bandpass(p["lowcut"], p["highcut"], p["order"], r.sample_rate)
    out = r.samples.astype(np.float64)
    for c in range(r.n_channels):
        if r.channel_roles[c] in p["roles"]:
            out[c] = apply_sos(f, out[c])
    return _target(r, out.astype(np.float32), spec)


_ENGINES = {
    "white_noise": distort_white_noise,
    "amp_overload": distort_amp_overload,
    "spectral": distort_spectral,
}


def distort(r: Recording, spec: DistortionSpec | None) -> Recording:
    """Apply ``spec`` to ``r``; ``None`` returns an untouched target-tagged copy."""
    if spec is None:
        return r.replace(domain_tag="target")
    return _ENGINES[spec.kind](r, spec)

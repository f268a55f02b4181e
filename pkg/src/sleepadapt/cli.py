"""Experiment orchestration and the ``sleepadapt`` command line.

Subcommands: generate, distort, pretrain, adapt, benchmark, evaluate, stats,
run (full pipeline) and scaling. Exit codes: 0 success, 1 invalid input or
config, 2 training divergence, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import CHANNEL_ROLES, Hypnogram, RngStream, ValidationError, probs_to_hypnogram, split_dataset
from .dsp import DistortionSpec, distort
from .evaluation import chance_kappa, classification_report, cohen_kappa, permutation_test
from .models import DiscriminatorConfig, ScorerConfig, ScorerModel, scorer_forward, zero_channel_benchmark
from .synthdata import DatasetManifest, build_domain_pair, generate_dataset, write_dataset
from .trainer import (
    PretrainConfig,
    TrainerConfig,
    TrainingDivergence,
    adapt,
    pretrain,
    recalibrate_bn,
    train_supervised_benchmark,
)

log = logging.getLogger("sleepadapt")

SUMMARY_SCHEMA_VERSION = 1
MODEL_FORMAT = "sleepadapt-scorer"

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3


# ------------------------------------------------------------------ config

def _desk_trainer() -> dict:
    # desk-scale: far fewer recordings and epochs than a full study, so larger steps
    # and a stronger anchor; 1e-3 was unstable on the white-noise targets
    return TrainerConfig(beta=10.0, lr_encoder=1e-4, lr_discriminator=1e-5, epochs=5).to_dict()


@dataclass
class ExperimentConfig:
    """Everything a run needs; ``seed`` feeds every random stream."""

    seed: int = 0
    n_recordings: int = 200
    epochs_per_recording: int = 192
    sample_rate: float = 128.0
    train_fraction: float = 0.8
    distortion: dict | None = field(default_factory=lambda: {"kind": "spectral", "params": {"lowcut": 5.0}})
    scorer: dict = field(default_factory=lambda: ScorerConfig().to_dict())
    pretrain: dict = field(default_factory=lambda: PretrainConfig(steps=600).to_dict())
    discriminator: dict = field(default_factory=lambda: DiscriminatorConfig().to_dict())
    trainer: dict = field(default_factory=_desk_trainer)
    benchmark: dict = field(default_factory=lambda: PretrainConfig(steps=300, channel_dropout=0.0).to_dict())
    chance_n: int = 300
    permutations: int = 10_000
    svg: bool = False

    def __post_init__(self):
        if self.n_recordings < 4:
            raise ValidationError("an experiment needs at least 4 recordings")
        self.scorer_config()
        self.discriminator_config()
        self.trainer_config()
        self.distortion_spec()

    # seeds are overwritten from the global one so a single number pins a run
    def scorer_config(self) -> ScorerConfig:
        return ScorerConfig(**{**self.scorer, "epoch_samples": int(round(self.sample_rate * 30))})

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**{**self.pretrain, "seed": self.seed})

    def benchmark_config(self) -> PretrainConfig:
        return PretrainConfig(**{**self.benchmark, "seed": self.seed})

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(**self.discriminator)

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(**{**self.trainer, "seed": self.seed})

    def distortion_spec(self) -> DistortionSpec | None:
        if not self.distortion:
            return None
        return DistortionSpec.from_dict({**self.distortion, "seed": self.seed})

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def resolved(self) -> dict:
        """Config with every nested default filled in, as written next to outputs."""
        d = asdict(self)
        d["scorer"] = self.scorer_config().to_dict()
        d["pretrain"] = self.pretrain_config().to_dict()
        d["benchmark"] = self.benchmark_config().to_dict()
        d["discriminator"] = self.discriminator_config().to_dict()
        d["trainer"] = self.trainer_config().to_dict()
        spec = self.distortion_spec()
        d["distortion"] = spec.to_dict() if spec else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        defaults = {f.name: (f.default_factory() if callable(f.default_factory) else f.default) for f in fields(cls)}
        merged = {}
        for k, v in defaults.items():
            if k in d and isinstance(v, dict) and isinstance(d[k], dict) and k != "distortion":
                merged[k] = {**v, **d[k]}
            else:
                merged[k] = d.get(k, v)
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# ------------------------------------------------------------ checkpoints

def save_scorer(model: ScorerModel, directory, channel_roles=CHANNEL_ROLES, extra: dict | None = None) -> Path:
    directory = Path(directory)
    ad.ParamStore.from_module(model).save(directory)
    meta = {"format": MODEL_FORMAT, "version": 1, "scorer": model.cfg.to_dict(),
            "channel_roles": list(channel_roles), **(extra or {})}
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_scorer(directory) -> ScorerModel:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    if meta.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{directory} is not a scorer checkpoint")
    model = ScorerModel(ScorerConfig(**meta["scorer"]))
    ad.ParamStore.from_module(model).load_into(directory)
    model.params.unfreeze()
    model.eval()
    return model


# ------------------------------------------------------------- evaluation

def _predict(model: ScorerModel, recs) -> list[Hypnogram]:
    return [probs_to_hypnogram(scorer_forward(model, r)) for r in recs]


def _per_recording_kappa(preds, hyps) -> np.ndarray:
    return np.array([cohen_kappa(p, h) for p, h in zip(preds, hyps)])


def _pooled_report(preds, hyps):
    return classification_report(Hypnogram(np.concatenate([p.stages for p in preds])),
                                 Hypnogram(np.concatenate([h.stages for h in hyps])))


def evaluate_model(model: ScorerModel, recs, hyps) -> dict:
    """Mean per-recording kappa plus pooled accuracy/F1 and the per-class table."""
    preds = _predict(model, recs)
    k = _per_recording_kappa(preds, hyps)
    rep = _pooled_report(preds, hyps)
    return {"kappa": float(k.mean()), "kappa_per_recording": [float(v) for v in k], "accuracy": rep.accuracy,
            "macro_f1": rep.macro_f1, "pooled_kappa": rep.kappa, "per_class": rep.per_class}


def _p(d, cfg: ExperimentConfig, label: str) -> float:
    return float(permutation_test(np.asarray(d), cfg.permutations, rng=RngStream(cfg.seed, f"perm/{label}")))


def _write_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


# ------------------------------------------------------------- pipeline

@dataclass
class ExperimentData:
    recs: list
    hyps: list
    train: list
    test: list
    targets: list


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    recs, hyps = generate_dataset(cfg.n_recordings, cfg.epochs_per_recording, cfg.sample_rate, cfg.seed)
    ids = [r.id for r in recs]
    train_ids, test_ids = split_dataset(ids, cfg.train_fraction, rng=RngStream(cfg.seed, "split"))
    index = {i: n for n, i in enumerate(ids)}
    train = sorted(index[i] for i in train_ids)
    test = sorted(index[i] for i in test_ids)
    if len(test) < 2:
        raise ValidationError(f"only {len(test)} test recording(s); chance kappa needs two")
    spec = cfg.distortion_spec()
    targets = [distort(r, spec) for r in recs]
    return ExperimentData(recs, hyps, train, test, targets)


def pretrain_source(cfg: ExperimentConfig, data: ExperimentData) -> ScorerModel:
    model, _ = pretrain([data.recs[i] for i in data.train], [data.hyps[i] for i in data.train],
                        cfg.scorer_config(), cfg.pretrain_config())
    return model


def nested_subset(train: list[int], fraction: float, seed: int) -> list[int]:
    """Training subset of size ``round(fraction * n)``; smaller fractions are
    contained in larger ones, and 1.0 gives ``train`` unchanged."""
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction {fraction} outside (0, 1]")
    order = RngStream(seed, "scaling").generator().permutation(len(train))
    k = max(1, int(round(fraction * len(train))))
    return [train[i] for i in sorted(order[:k])]


def _adapt_and_eval(cfg, data, pretrained, train_idx):
    source = [data.recs[i] for i in train_idx]
    target = [data.targets[i] for i in train_idx]
    test_t = [data.targets[i] for i in data.test]
    test_h = [data.hyps[i] for i in data.test]
    adapted, train_log = adapt(source, target, pretrained, cfg.trainer_config(), cfg.discriminator_config())
    return adapted, train_log, evaluate_model(adapted.as_scorer("target"), test_t, test_h)


def run_experiment(cfg: ExperimentConfig, out_dir=None, pretrained: ScorerModel | None = None,
                   data: ExperimentData | None = None) -> dict:
    """Full pipeline: data, pretraining, adaptation, benchmarks, evaluation and statistics.

    Returns the JSON summary (also written to ``out_dir/summary.json`` along with
    the resolved config, training curve, scatter data and per-class table).
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    data = data or prepare_data(cfg)
    if pretrained is None:
        pretrained = pretrain_source(cfg, data)
    test_s = [data.recs[i] for i in data.test]
    test_t = [data.targets[i] for i in data.test]
    test_h = [data.hyps[i] for i in data.test]
    train_t = [data.targets[i] for i in data.train]
    train_h = [data.hyps[i] for i in data.train]

    adapted, train_log, fine = _adapt_and_eval(cfg, data, pretrained, data.train)
    if out:
        train_log.write_csv(out / "train_log.csv")
        save_scorer(adapted.as_scorer("target"), out / "adapted" / "target")
        save_scorer(adapted.as_scorer("source"), out / "adapted" / "source")

    stats_only = copy.deepcopy(pretrained)
    recalibrate_bn(stats_only.encoder, train_t)
    stats_only.eval()
    bench = train_supervised_benchmark(train_t, train_h, pretrained, cfg.benchmark_config())

    rows = {
        "pretrained": evaluate_model(pretrained, test_t, test_h),
        "fine_tuned": fine,
        "benchmark": evaluate_model(bench, test_t, test_h),
        "stats_only": evaluate_model(stats_only, test_t, test_h),
    }
    spec = cfg.distortion_spec()
    if spec is not None and spec.kind == "white_noise":
        role = spec.params["target_channel_role"]
        rows["zero_channel"] = evaluate_model(zero_channel_benchmark(pretrained, role, CHANNEL_ROLES),
                                              test_t, test_h)

    k = {name: np.array(r["kappa_per_recording"]) for name, r in rows.items()}
    clean_pre = evaluate_model(pretrained, test_s, test_h)
    clean_adapted = evaluate_model(adapted.as_scorer("source"), test_s, test_h)

    adapted_target = adapted.as_scorer("target")
    chance_pre = chance_kappa(lambda r: _predict(pretrained, [r])[0], test_s, cfg.chance_n,
                              RngStream(cfg.seed, "chance/pretrained"))
    chance_fine = chance_kappa(lambda r: _predict(adapted_target, [r])[0], test_t, cfg.chance_n,
                               RngStream(cfg.seed, "chance/adapted"))

    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "config_digest": cfg.digest(),
        "distortion": spec.label if spec else "none",
        "n_train": len(data.train),
        "n_test": len(data.test),
        "models": {name: {key: r[key] for key in ("kappa", "accuracy", "macro_f1", "pooled_kappa")}
                   for name, r in rows.items()},
        "delta": {
            "fine_minus_pre": float(k["fine_tuned"].mean() - k["pretrained"].mean()),
            "benchmark_minus_fine": float(k["benchmark"].mean() - k["fine_tuned"].mean()),
            "stats_only_minus_pre": float(k["stats_only"].mean() - k["pretrained"].mean()),
            "fine_minus_stats_only": float(k["fine_tuned"].mean() - k["stats_only"].mean()),
        },
        "p_values": {
            "fine_vs_pre": _p(k["fine_tuned"] - k["pretrained"], cfg, "fine_vs_pre"),
            "benchmark_vs_fine": _p(k["benchmark"] - k["fine_tuned"], cfg, "benchmark_vs_fine"),
            "fine_vs_stats_only": _p(k["fine_tuned"] - k["stats_only"], cfg, "fine_vs_stats_only"),
        },
        "clean_source": {"pretrained": clean_pre["kappa"], "adapted": clean_adapted["kappa"]},
        "chance_kappa": {"pretrained_source": chance_pre.summary(), "adapted_target": chance_fine.summary()},
        "training": {"epochs": len(train_log), "final": train_log.losses_only()[-1] if len(train_log) else None},
    }
    if out:
        _dump(summary, out / "summary.json")
        scatter = []
        for n, i in enumerate(data.test):
            scatter.append({"id": data.recs[i].id, **{name: float(v[n]) for name, v in k.items()}})
        _write_csv(out / "scatter.csv", scatter)
        per_class = []
        for name, r in rows.items():
            for stage, vals in r["per_class"].items():
                per_class.append({"model": name, "stage": stage, **vals})
        _write_csv(out / "per_class.csv", per_class)
        _write_csv(out / "chance_kappa.csv", [{"iteration": j, "pretrained_source": a, "adapted_target": b}
                                              for j, (a, b) in enumerate(zip(chance_pre.samples,
                                                                             chance_fine.samples))])
        if cfg.svg:
            _svg_scatter(out / "scatter.svg", k["pretrained"], k["fine_tuned"])
            _svg_curve(out / "train_log.svg", train_log)
    summary["_artifacts"] = {"adapted": adapted, "pretrained": pretrained, "benchmark": bench, "data": data}
    return summary


def public_summary(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if not k.startswith("_")}


def run_scaling_study(cfg: ExperimentConfig, fractions, out_dir=None, pretrained: ScorerModel | None = None,
                      data: ExperimentData | None = None) -> list[dict]:
    """Adapt on nested fractions of the training recordings; one row per fraction."""
    fractions = sorted(float(f) for f in fractions)
    if not fractions:
        raise ValidationError("no fractions given")
    data = data or prepare_data(cfg)
    if pretrained is None:
        pretrained = pretrain_source(cfg, data)
    test_h = [data.hyps[i] for i in data.test]
    pre = evaluate_model(pretrained, [data.targets[i] for i in data.test], test_h)["kappa"]
    rows = []
    for f in fractions:
        subset = nested_subset(data.train, f, cfg.seed)
        _, _, res = _adapt_and_eval(cfg, data, pretrained, subset)
        rows.append({"fraction": f, "n_train": len(subset), "kappa": res["kappa"], "pretrained_kappa": pre,
                     "accuracy": res["accuracy"], "macro_f1": res["macro_f1"]})
        log.info("scaling fraction %.3f (%d recordings): kappa %.4f", f, len(subset), res["kappa"])
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        _write_csv(out / "scaling.csv", rows)
        if cfg.svg:
            _svg_lines(out / "scaling.svg", [r["fraction"] for r in rows], {"fine-tuned": [r["kappa"] for r in rows]},
                       "fraction of training recordings", "kappa")
    return rows


# ------------------------------------------------------------------ plots

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sleepadapt"
    return plt


def _svg_scatter(path, pre, fine):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(pre, fine, s=10)
    lo, hi = min(np.min(pre), np.min(fine), 0), 1
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("pretrained kappa")
    ax.set_ylabel("fine-tuned kappa")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _svg_lines(path, x, series: dict, xlabel, ylabel):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, y in series.items():
        ax.plot(x, y, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _svg_curve(path, train_log):
    x = train_log.column("epoch")
    _svg_lines(path, x, {"generator": train_log.column("gen_loss"), "discriminator": train_log.column("disc_loss")},
               "epoch", "loss")


# -------------------------------------------------------------------- CLI

def _load_json_arg(s):
    if s is None:
        return None
    p = Path(s)
    if p.exists():
        return json.loads(p.read_text())
    try:
        return json.loads(s)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not a JSON file or literal: {s!r}") from exc


def _experiment_config(args) -> ExperimentConfig:
    d = _load_json_arg(getattr(args, "config", None)) or {}
    return ExperimentConfig.from_dict(d).with_seed(args.seed)


def _load_dataset(path):
    return DatasetManifest.read(path).load()


def cmd_generate(args):
    spec = None
    if args.distortion:
        spec = DistortionSpec.from_dict({**_load_json_arg(args.distortion), "seed": args.seed or 0})
    src, tgt = build_domain_pair(args.n, spec, args.out, args.epochs, args.rate, args.seed or 0)
    print(json.dumps({"source": len(src.entries), "target": len(tgt.entries), "out": str(args.out)}))


def cmd_distort(args):
    recs, hyps = _load_dataset(args.data)
    spec = DistortionSpec.from_dict({**_load_json_arg(args.spec), "seed": args.seed or 0})
    out = [distort(r, spec) for r in recs]
    m = write_dataset(out, hyps, args.out, args.seed or 0, "target", spec)
    print(json.dumps({"written": len(m.entries), "distortion": spec.label}))


def cmd_pretrain(args):
    cfg = _experiment_config(args)
    recs, hyps = _load_dataset(args.data)
    scfg = replace(cfg.scorer_config(), input_channels=recs[0].n_channels, epoch_samples=recs[0].epoch_samples)
    model, losses = pretrain(recs, hyps, scfg, cfg.pretrain_config())
    save_scorer(model, args.out, recs[0].channel_roles)
    (Path(args.out) / "config.json").write_text(cfg.to_json())
    _write_csv(Path(args.out) / "loss_curve.csv", [{"step": i, "loss": v} for i, v in enumerate(losses)])
    print(json.dumps({"steps": len(losses), "final_loss": losses[-1] if losses else None}))


def cmd_adapt(args):
    cfg = _experiment_config(args)
    source, _ = _load_dataset(args.source_dir)
    target, _ = _load_dataset(args.target_dir)
    model = load_scorer(args.model)
    out = Path(args.out)
    adapted, train_log = adapt(source, target, model, cfg.trainer_config(), cfg.discriminator_config(),
                               checkpoint_dir=out / "checkpoints")
    save_scorer(adapted.as_scorer("target"), out / "target")
    save_scorer(adapted.as_scorer("source"), out / "source")
    (out / "config.json").write_text(cfg.to_json())
    train_log.write_csv(out / "train_log.csv")
    print(json.dumps({"epochs": len(train_log), "final": train_log.losses_only()[-1] if len(train_log) else None}))


def cmd_benchmark(args):
    cfg = _experiment_config(args)
    recs, hyps = _load_dataset(args.target_dir)
    model = load_scorer(args.model)
    if args.zero_channel:
        bench = zero_channel_benchmark(model, args.zero_channel, recs[0].channel_roles)
    else:
        bench = train_supervised_benchmark(recs, hyps, model, cfg.benchmark_config())
    save_scorer(bench, args.out, recs[0].channel_roles)
    (Path(args.out) / "config.json").write_text(cfg.to_json())
    print(json.dumps({"out": str(args.out)}))


def cmd_evaluate(args):
    recs, hyps = _load_dataset(args.data)
    res = evaluate_model(load_scorer(args.model), recs, hyps)
    out = Path(args.out)
    per_class = [{"stage": s, **v} for s, v in res.pop("per_class").items()]
    _dump(res, out / "metrics.json")
    _write_csv(out / "per_class.csv", per_class)
    print(json.dumps({"kappa": res["kappa"], "accuracy": res["accuracy"], "macro_f1": res["macro_f1"]}))


def cmd_stats(args):
    recs, hyps = _load_dataset(args.data)
    model = load_scorer(args.model)
    seed = args.seed or 0
    res = chance_kappa(lambda r: _predict(model, [r])[0], recs, args.n, RngStream(seed, "chance"))
    out = Path(args.out)
    summary = {"chance_kappa": res.summary(), "collapsed": res.collapsed}
    counts, edges = np.histogram(res.samples, bins=40, range=(-1, 1))
    _write_csv(out / "chance_histogram.csv", [{"lo": float(a), "hi": float(b), "count": int(c)}
                                              for a, b, c in zip(edges[:-1], edges[1:], counts)])
    if args.compare:
        other = load_scorer(args.compare)
        d = (_per_recording_kappa(_predict(model, recs), hyps) - _per_recording_kappa(_predict(other, recs), hyps))
        summary["permutation"] = {"mean_difference": float(d.mean()), "p_value": float(
            permutation_test(d, args.permutations, rng=RngStream(seed, "perm")))}
    _dump(summary, out / "stats.json")
    if args.svg:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(res.samples, bins=40, range=(-1, 1))
        ax.set_xlabel("chance kappa")
        fig.tight_layout()
        fig.savefig(out / "chance_histogram.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
    print(json.dumps(summary, default=_json_default))


def cmd_run(args):
    cfg = _experiment_config(args)
    if args.svg:
        cfg = replace(cfg, svg=True)
    pretrained = load_scorer(args.pretrained) if args.pretrained else None
    summary = run_experiment(cfg, args.out, pretrained)
    print(json.dumps({k: summary[k] for k in ("distortion", "models", "delta", "p_values")},
                     default=_json_default, indent=2))


def cmd_scaling(args):
    cfg = _experiment_config(args)
    if args.svg:
        cfg = replace(cfg, svg=True)
    fractions = [float(f) for f in args.fractions.split(",")]
    pretrained = load_scorer(args.pretrained) if args.pretrained else None
    rows = run_scaling_study(cfg, fractions, args.out, pretrained)
    print(json.dumps(rows, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sleepadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="overrides the config's global seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("generate", cmd_generate, "write a synthetic source/target dataset pair")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--epochs", type=int, default=192)
    sp.add_argument("--rate", type=float, default=128.0)
    sp.add_argument("--distortion", help="DistortionSpec JSON (file or literal)")
    sp.add_argument("--out", required=True)

    sp = add("distort", cmd_distort, "apply a distortion to a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "supervised pretraining on a labelled dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("adapt", cmd_adapt, "discriminator-guided adaptation to an unlabelled target dataset")
    sp.add_argument("--source-dir", required=True)
    sp.add_argument("--target-dir", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("benchmark", cmd_benchmark, "supervised (or zero-channel) benchmark model")
    sp.add_argument("--target-dir", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--config")
    sp.add_argument("--zero-channel", metavar="ROLE")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score a dataset and report metrics")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("stats", cmd_stats, "chance-kappa distribution and optional paired permutation test")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--compare", help="second model; tests per-recording kappa of --model minus --compare")
    sp.add_argument("--n", type=int, default=300)
    sp.add_argument("--permutations", type=int, default=10_000)
    sp.add_argument("--svg", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("run", cmd_run, "full experiment pipeline")
    sp.add_argument("--config")
    sp.add_argument("--pretrained", help="reuse a pretrained scorer checkpoint")
    sp.add_argument("--svg", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("scaling", cmd_scaling, "adaptation on nested fractions of the training set")
    sp.add_argument("--config")
    sp.add_argument("--fractions", default="0.1,0.25,0.5,1.0")
    sp.add_argument("--pretrained")
    sp.add_argument("--svg", action="store_true")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

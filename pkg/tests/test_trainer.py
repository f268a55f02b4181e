import copy
import math

import numpy as np
import pytest
import torch

from sleepadapt import trainer as tr
from sleepadapt.core import ValidationError, probs_to_hypnogram
from sleepadapt.dsp import DistortionSpec, distort
from sleepadapt.evaluation import cohen_kappa
from sleepadapt.models import DiscriminatorConfig, DiscriminatorModel, ScorerConfig, scorer_forward
from sleepadapt.synthdata import generate_dataset
from sleepadapt.trainer import (
    AdaptedModel,
    PretrainConfig,
    TrainerConfig,
    TrainingDivergence,
    TrainLog,
    adapt,
    loss_anchor,
    loss_disc,
    loss_gen,
    pretrain,
    recalibrate_bn,
    train_supervised_benchmark,
)

DCFG = DiscriminatorConfig(embed_dim=8, n_layers=1, n_heads=2, window_epochs=8, ensemble_size=2)
SCFG = ScorerConfig(depth=3, base_filters=4, kernel_size=5)


def constant_disc(p: float, dtype=torch.float32) -> DiscriminatorModel:
    d = DiscriminatorModel(DCFG).to(dtype)
    with torch.no_grad():
        d.w_head.zero_()
        d.b_head.fill_(math.log(p / (1 - p)))
    return d


@pytest.fixture(scope="module")
def small_world():
    torch.set_num_threads(1)
    recs, hyps = generate_dataset(6, epochs=16, seed=3)
    model, _ = pretrain(recs, hyps, SCFG, PretrainConfig(steps=30, batch=4, crop_epochs=4))
    targets = [distort(r, DistortionSpec("white_noise", {"target_channel_role": "EEG"}, seed=1)) for r in recs]
    return recs, hyps, model, targets


FAST = dict(epochs=2, lr_encoder=1e-3, lr_discriminator=1e-4)


class TestLosses:
    def test_gen_at_half(self):
        f = torch.full((20, 5), 0.2)
        assert float(loss_gen([constant_disc(0.5)], f, [0, 3]).detach()) == pytest.approx(math.log(0.5), abs=1e-6)

    def test_gen_decreasing_in_score(self):
        f = torch.full((20, 5), 0.2)
        vals = [float(loss_gen([constant_disc(p)], f, [0]).detach()) for p in np.linspace(0.1, 0.9, 9)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_gen_uses_ensemble_mean(self):
        f = torch.full((20, 5), 0.2)
        val = float(loss_gen([constant_disc(0.2), constant_disc(0.6)], f, [0]).detach())
        assert val == pytest.approx(math.log(1 - 0.4), abs=1e-6)

    def test_gen_clamped(self):
        f = torch.full((20, 5), 0.2)
        val = float(loss_gen([constant_disc(1 - 1e-9, torch.float64)], f, [0]).detach())
        assert math.isfinite(val) and val == pytest.approx(math.log(1e-6), rel=1e-3)

    def test_disc_at_half(self):
        f = torch.full((20, 5), 0.2)
        assert float(loss_disc([constant_disc(0.5)], f, f, [0], [2]).detach()) == pytest.approx(math.log(2), abs=1e-6)

    def test_disc_perfect_is_small(self):
        f = torch.full((20, 5), 0.2)
        d_good = constant_disc(0.999)
        # constant output cannot separate, so loss is large on the target side
        assert float(loss_disc([d_good], f, f, [0]).detach()) > 1.0

    def test_anchor_zero_at_init(self, small_world):
        recs, _, model, _ = small_world
        x = torch.from_numpy(recs[0].samples[None].copy())
        e_t = copy.deepcopy(model.encoder)
        assert float(loss_anchor(e_t, model.encoder, x).detach()) == 0.0

    def test_anchor_continuity(self, small_world):
        recs, _, model, _ = small_world
        x = torch.from_numpy(recs[0].samples[None].copy())
        vals = []
        for delta in (1e-1, 1e-2, 1e-3):
            e_t = copy.deepcopy(model.encoder)
            with torch.no_grad():
                e_t.blocks[0].weight[0, 0, 0] += delta
            vals.append(float(loss_anchor(e_t, model.encoder, x).detach()))
        assert vals[0] > vals[1] > vals[2] > 0

    def test_anchor_shape_mismatch(self, small_world):
        from sleepadapt.autodiff import ShapeError

        recs, _, model, _ = small_world
        x = torch.from_numpy(recs[0].samples[None].copy())
        with pytest.raises(ShapeError):
            loss_anchor(model.encoder, torch.zeros(1, 1, 1), x)


class TestPretrain:
    def test_overfit_single_recording(self):
        recs, hyps = generate_dataset(1, epochs=16, seed=8)
        cfg = PretrainConfig(steps=150, batch=2, crop_epochs=16, lr=1e-2, channel_dropout=0.0)
        model, losses = pretrain(recs, hyps, SCFG, cfg)
        pred = probs_to_hypnogram(scorer_forward(model, recs[0]))
        assert cohen_kappa(pred, hyps[0]) >= 0.98
        early, late = np.mean(losses[:10]), np.mean(losses[-10:])
        assert late < early

    def test_needs_data(self):
        with pytest.raises(ValidationError):
            pretrain([], [])

    def test_shuffle_changes_targets(self, small_world):
        recs, hyps, _, _ = small_world
        _, a = pretrain(recs, hyps, SCFG, PretrainConfig(steps=3, batch=2))
        _, b = pretrain(recs, hyps, SCFG, PretrainConfig(steps=3, batch=2, shuffle_labels=True))
        assert a != b

    def test_shuffle_pools_labels_across_recordings(self):
        from sleepadapt.core import Hypnogram
        hyps = [Hypnogram([0] * 10), Hypnogram([3] * 10), Hypnogram([4] * 6)]
        out = tr.shuffled_labels(hyps, seed=1)
        assert [o.size for o in out] == [10, 10, 6]
        assert sorted(np.concatenate(out).tolist()) == [0] * 10 + [3] * 10 + [4] * 6
        # a per-recording shuffle would leave every recording single-class
        assert any(len(set(o.tolist())) > 1 for o in out)

    def test_benchmark_zero_steps_identity(self, small_world):
        recs, hyps, model, targets = small_world
        bench = train_supervised_benchmark(targets, hyps, model, PretrainConfig(steps=0))
        assert bench.params.fingerprint() == model.params.fingerprint()

    def test_benchmark_freezes_decoder(self, small_world):
        recs, hyps, model, targets = small_world
        bench = train_supervised_benchmark(targets, hyps, model, PretrainConfig(steps=3, batch=2))
        assert bench.params.fingerprint("decoder.") == model.params.fingerprint("decoder.")
        assert bench.params.fingerprint("classifier.") == model.params.fingerprint("classifier.")
        assert bench.params.fingerprint("encoder.") != model.params.fingerprint("encoder.")


class TestAdapt:
    def test_zero_weights_leave_model_unchanged(self, small_world):
        recs, _, model, targets = small_world
        cfg = TrainerConfig(alpha=0, beta=0, refresh_bn_stats=False, **FAST)
        out, log = adapt(recs, targets, model, cfg, DCFG)
        scorer = out.as_scorer()
        assert scorer.params.fingerprint() == model.params.fingerprint()
        x = torch.from_numpy(targets[0].samples[None].copy())
        assert torch.equal(scorer(x), model(x))
        assert len(log) == 2

    def test_frozen_sets_untouched(self, small_world):
        recs, _, model, targets = small_world
        before = model.params.fingerprint()
        out, _ = adapt(recs, targets, model, TrainerConfig(**FAST), DCFG)
        assert model.params.fingerprint() == before
        assert out.scorer.params.fingerprint() == before
        adapted = out.as_scorer()
        assert adapted.params.fingerprint("decoder.") == model.params.fingerprint("decoder.")
        assert adapted.params.fingerprint("classifier.") == model.params.fingerprint("classifier.")
        assert adapted.params.fingerprint("encoder.") != model.params.fingerprint("encoder.")

    def test_deterministic(self, small_world):
        recs, _, model, targets = small_world
        cfg = TrainerConfig(seed=5, **FAST)
        a, la = adapt(recs, targets, model, cfg, DCFG)
        b, lb = adapt(recs, targets, model, cfg, DCFG)
        assert la.losses_only() == lb.losses_only()
        assert a.as_scorer().params.fingerprint() == b.as_scorer().params.fingerprint()

    def test_source_stats_kept(self, small_world):
        recs, _, model, targets = small_world
        out, _ = adapt(recs, targets, model, TrainerConfig(**FAST), DCFG)
        src = out.as_scorer("source").encoder
        tgt = out.as_scorer("target").encoder
        assert torch.equal(src.blocks[0].running_mean, model.encoder.blocks[0].running_mean)
        assert not torch.equal(tgt.blocks[0].running_mean, model.encoder.blocks[0].running_mean)
        assert torch.equal(src.blocks[0].weight, tgt.blocks[0].weight)
        with pytest.raises(ValidationError):
            out.as_scorer("other")

    def test_running_mode_keeps_stats(self, small_world):
        recs, _, model, targets = small_world
        out, _ = adapt(recs, targets, model, TrainerConfig(bn_mode="running", **FAST), DCFG)
        assert torch.equal(out.target_encoder.blocks[0].running_var, model.encoder.blocks[0].running_var)

    def test_on_epoch_metrics_logged(self, small_world):
        recs, _, model, targets = small_world
        seen = []

        def cb(epoch, adapted):
            assert isinstance(adapted, AdaptedModel)
            seen.append(epoch)
            return {"kappa": 0.5 + epoch}

        _, log = adapt(recs, targets, model, TrainerConfig(**FAST), DCFG, on_epoch=cb)
        assert seen == [0, 1]
        assert list(log.column("kappa")) == [0.5, 1.5]

    def test_divergence_aborts_with_checkpoint(self, small_world, monkeypatch):
        recs, _, model, targets = small_world
        monkeypatch.setattr(tr, "loss_gen", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
        with pytest.raises(TrainingDivergence) as info:
            adapt(recs, targets, model, TrainerConfig(**FAST), DCFG)
        assert info.value.checkpoint is not None
        assert set(info.value.checkpoint) == set(model.encoder.state_dict())

    def test_checkpoints_written(self, small_world, tmp_path):
        recs, _, model, targets = small_world
        adapt(recs, targets, model, TrainerConfig(checkpoint_every=1, **FAST), DCFG, checkpoint_dir=tmp_path)
        assert (tmp_path / "epoch001" / "params.json").exists()
        assert (tmp_path / "epoch002" / "params.f32").exists()

    def test_window_longer_than_recording(self, small_world):
        recs, _, model, targets = small_world
        with pytest.raises(ValidationError):
            adapt(recs, targets, model, TrainerConfig(**FAST), DiscriminatorConfig(window_epochs=32))

    def test_empty_inputs(self, small_world):
        recs, _, model, _ = small_world
        with pytest.raises(ValidationError):
            adapt(recs, [], model)

    def test_config_checks(self):
        with pytest.raises(ValidationError):
            TrainerConfig(batch=9)
        with pytest.raises(ValidationError):
            TrainerConfig(alpha=-1)
        with pytest.raises(ValidationError):
            TrainerConfig(bn_mode="instance")


def test_recalibration_averages_recording_stats(small_world):
    recs, _, model, _ = small_world
    enc = recalibrate_bn(copy.deepcopy(model.encoder), recs[:3])
    block = model.encoder.blocks[0]
    from sleepadapt import autodiff as ad

    with torch.no_grad():
        means = [ad.elu(ad.conv1d(torch.from_numpy(r.samples[None].copy()), block.weight, block.bias)).mean(dim=(0, 2))
                 for r in recs[:3]]
    assert torch.allclose(enc.blocks[0].running_mean, torch.stack(means).mean(0), atol=1e-5)
    assert torch.equal(enc.blocks[0].weight, block.weight)


def test_trainlog_csv(tmp_path):
    log = TrainLog()
    log.append(epoch=0, gen_loss=-0.6, disc_loss=0.7, anchor_loss=0.01, wall_time=1.0)
    log.append(epoch=1, gen_loss=-0.5, disc_loss=0.6, anchor_loss=0.02, kappa=0.3, wall_time=1.2)
    path = log.write_csv(tmp_path / "log.csv")
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(TrainLog.FIELDS)
    assert len(lines) == 3
    assert np.isnan(log.column("kappa")[0])
    assert "wall_time" not in log.losses_only()[0]

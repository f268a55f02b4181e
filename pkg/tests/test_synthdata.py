import filecmp

import numpy as np
import pytest
from scipy import signal

from sleepadapt.core import RngStream, Stage, ValidationError
from sleepadapt.dsp import DistortionSpec
from sleepadapt.synthdata import (
    EEG_BANDS,
    DatasetManifest,
    SleepHmm,
    build_domain_pair,
    generate_dataset,
    generate_recording,
)


def simulated_occupancy(hmm, n_paths=20, epochs=1000, seed=0):
    gen = np.random.default_rng(seed)
    counts = np.zeros(5)
    for _ in range(n_paths):
        counts += np.bincount(hmm.sample_path(epochs, gen), minlength=5)
    return counts / counts.sum()


class TestHmm:
    def test_paths_bounded_by_wake(self):
        hmm = SleepHmm()
        gen = np.random.default_rng(1)
        for _ in range(20):
            p = hmm.sample_path(40, gen)
            assert p[0] == Stage.W and p[-1] == Stage.W
            assert set(np.unique(p)) <= set(range(5))

    def test_min_dwell_respected(self):
        hmm = SleepHmm()
        p = hmm.sample_path(2000, np.random.default_rng(2))
        runs = np.split(p, np.flatnonzero(np.diff(p)) + 1)
        # the first and last bouts are clipped by the forced wake boundaries
        for run in runs[1:-1]:
            assert len(run) >= hmm.min_dwell[run[0]]

    def test_occupancy_matches_stationary(self):
        hmm = SleepHmm()
        occ = simulated_occupancy(hmm)
        np.testing.assert_allclose(occ, hmm.stationary(), atol=0.03)

    def test_stationary_without_dwell_is_eigenvector(self):
        hmm = SleepHmm(min_dwell=np.ones(5, dtype=int))
        pi = hmm.stationary()
        np.testing.assert_allclose(pi @ hmm.transitions, pi, atol=1e-10)

    def test_too_short(self):
        with pytest.raises(ValidationError):
            SleepHmm().sample_path(3, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            SleepHmm(min_dwell=np.array([5, 1, 1, 1, 1])).sample_path(8, np.random.default_rng(0))

    def test_bad_matrix(self):
        with pytest.raises(ValidationError):
            SleepHmm(transitions=np.full((5, 5), 0.3))
        with pytest.raises(ValidationError):
            SleepHmm(min_dwell=np.zeros(5, dtype=int))


class TestSignals:
    def _band_power(self, x, band, rate=128):
        f, p = signal.welch(x, fs=rate, nperseg=512)
        sel = (f >= band[0]) & (f < band[1])
        return p[sel].sum()

    def test_delta_power_higher_in_n3(self):
        r, h = generate_recording(SleepHmm(), 300, rng=RngStream(3))
        eeg = r.samples[0].reshape(300, -1)
        delta = np.array([self._band_power(e, EEG_BANDS[0]) for e in eeg])
        assert delta[h.stages == Stage.N3].mean() > 2 * delta[h.stages == Stage.W].mean()

    def test_alpha_in_wake(self):
        r, h = generate_recording(SleepHmm(), 300, rng=RngStream(4))
        eeg = r.samples[0].reshape(300, -1)
        alpha = np.array([self._band_power(e, EEG_BANDS[2]) for e in eeg])
        assert alpha[h.stages == Stage.W].mean() > alpha[h.stages == Stage.N2].mean()

    def test_eog_bleed(self):
        r, _ = generate_recording(SleepHmm(), 60, rng=RngStream(5))
        assert np.corrcoef(r.samples[0], r.samples[1])[0, 1] > 0.1

    def test_shape_and_roles(self):
        r, h = generate_recording(SleepHmm(), 10, rng=RngStream(6), rec_id="x")
        assert r.samples.shape == (2, 10 * 3840)
        assert r.channel_roles == ("EEG", "EOG")
        assert h.epoch_count == 10 and r.id == "x"

    def test_dataset_deterministic(self):
        a, ha = generate_dataset(3, epochs=8, seed=11)
        b, hb = generate_dataset(3, epochs=8, seed=11)
        for x, y in zip(a, b):
            assert np.array_equal(x.samples, y.samples)
        assert all(p == q for p, q in zip(ha, hb))
        c, _ = generate_dataset(3, epochs=8, seed=12)
        assert not np.array_equal(a[0].samples, c[0].samples)

    def test_dataset_preprocessed(self):
        recs, _ = generate_dataset(2, epochs=8, seed=0)
        for r in recs:
            assert np.abs(r.samples).max() <= 20.0
            assert abs(float(np.median(r.samples[0]))) < 0.2


class TestDomainPair:
    def test_identity_distortion_byte_identical(self, tmp_path):
        build_domain_pair(3, None, tmp_path, epochs=8, seed=1)
        src = DatasetManifest.read(tmp_path / "source")
        for e in src.entries:
            data = e["recording"].replace(".json", ".f32")
            assert filecmp.cmp(tmp_path / "source" / data, tmp_path / "target" / data, shallow=False)

    def test_distorted_pair(self, tmp_path):
        build_domain_pair(2, DistortionSpec("spectral", seed=2), tmp_path, epochs=8, seed=1)
        src_recs, src_hyps = DatasetManifest.read(tmp_path / "source").load()
        tgt = DatasetManifest.read(tmp_path / "target")
        tgt_recs, tgt_hyps = tgt.load()
        assert all(a == b for a, b in zip(src_hyps, tgt_hyps))
        assert tgt.entries[0]["distortion"]["kind"] == "spectral"
        assert tgt_recs[0].domain_tag == "target"
        assert not np.array_equal(src_recs[0].samples, tgt_recs[0].samples)

    def test_missing_file_detected(self, tmp_path):
        build_domain_pair(2, None, tmp_path, epochs=8)
        m = DatasetManifest.read(tmp_path / "source")
        (tmp_path / "source" / m.entries[0]["hypnogram"]).unlink()
        with pytest.raises(ValidationError):
            DatasetManifest.read(tmp_path / "source")

    def test_version_checked(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format_version": 99}')
        with pytest.raises(ValidationError):
            DatasetManifest.read(tmp_path)

    def test_needs_two(self, tmp_path):
        with pytest.raises(ValidationError):
            build_domain_pair(1, None, tmp_path)

import json
from collections import Counter

import numpy as np
import pytest
import torch

from helpers import brute_force_mse, central_difference, max_relative_error
from snrjscc import channel, evaluation
from snrjscc.data import natural_patches, normalize
from snrjscc.evaluation import psnr
from snrjscc.model import ModelConfig, build_model, load_checkpoint
from snrjscc.training import (
    DivergenceError,
    Trainer,
    TrainSchedule,
    lr_at_epoch,
    mse_loss,
    sample_train_snr,
    sample_train_snrs,
    train,
)


@pytest.fixture(scope="module")
def photo_batch():
    return torch.from_numpy(normalize(natural_patches(64, "train", seed=0)))


class TestMseLoss:
    def test_identity(self, images):
        x = torch.from_numpy(images)
        assert mse_loss(x, x).item() == 0.0

    def test_constant_offset(self):
        x = torch.zeros(1, 32, 32, 3, dtype=torch.float64)
        assert mse_loss(x, x + 0.5).item() == 0.25

    def test_matches_double_loop(self, rng):
        for _ in range(3):
            a, b = rng.random((2, 4, 32, 32, 3))
            got = mse_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
            assert abs(got - brute_force_mse(a, b)) <= 1e-10 * brute_force_mse(a, b)

    def test_symmetric(self, rng):
        a, b = (torch.from_numpy(v) for v in rng.random((2, 3, 32, 32, 3)))
        assert mse_loss(a, b).item() == mse_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(torch.zeros(1, 32, 32, 3), torch.zeros(2, 32, 32, 3))

    def test_gradient(self):
        x = torch.tensor([[0.1, 0.5, 0.9]], dtype=torch.float64)
        xh = torch.tensor([[0.3, 0.2, 0.4]], dtype=torch.float64, requires_grad=True)
        mse_loss(x, xh).backward()
        with torch.no_grad():
            num = central_difference(lambda: mse_loss(x, xh), xh, range(3), eps=1e-3)
        assert max_relative_error(xh.grad.view(-1).numpy(), num) < 1e-5

    def test_psnr_relation(self, rng):
        a, b = rng.random((2, 1, 32, 32, 3))
        m = mse_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert abs(psnr(a, b)[0] - 10 * np.log10(1 / m)) < 1e-9


class TestSchedule:
    def test_lr_formula(self):
        assert lr_at_epoch(TrainSchedule(), 25) == pytest.approx(8.1e-5, rel=1e-12)
        assert lr_at_epoch(TrainSchedule(), 9) == 1e-4

    def test_lr_non_increasing(self):
        lrs = [lr_at_epoch(TrainSchedule(), e) for e in range(200)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_needs_snr_source(self):
        with pytest.raises(ValueError):
            TrainSchedule(train_snr_list=[], single_snr=None)


class TestSnrSampling:
    def test_singleton(self):
        sch = TrainSchedule(train_snr_list=[10.0])
        assert {sample_train_snr(sch, s) for s in range(50)} == {10.0}

    def test_uniform_over_list(self):
        sch = TrainSchedule(seed=3)
        n = 600_000
        counts = Counter(sample_train_snr(sch, s) for s in range(n))
        assert set(counts) == {0.0, 5.0, 10.0, 15.0, 20.0, 25.0}
        for c in counts.values():
            assert abs(c / n - 1 / 6) < 0.01 / 6

    def test_baseline_mode(self):
        sch = TrainSchedule(single_snr=20.0)
        assert {sample_train_snr(sch, s) for s in range(100)} == {20.0}
        assert set(sample_train_snrs(sch, 0, 5)) == {20.0}

    def test_deterministic(self):
        a = [sample_train_snr(TrainSchedule(seed=1), s) for s in range(30)]
        b = [sample_train_snr(TrainSchedule(seed=1), s) for s in range(30)]
        assert a == b


class TestTrainStep:
    def test_zero_lr_is_noop(self, photo_batch):
        tr = Trainer(build_model(ModelConfig(channels=2)), TrainSchedule(initial_lr=0.0))
        before = [p.detach().clone() for p in tr.model.parameters()]
        tr.train_step(photo_batch[:8])
        assert all(torch.equal(a, b) for a, b in zip(before, tr.model.parameters()))

    def test_zero_gradient_adam_is_noop(self):
        m = build_model(ModelConfig(channels=2))
        opt = torch.optim.Adam(m.parameters(), lr=1e-2)
        before = [p.detach().clone() for p in m.parameters()]
        for p in m.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))

    def test_one_step_reduces_loss_on_same_batch(self, photo_batch):
        tr = Trainer(build_model(ModelConfig()), TrainSchedule(initial_lr=1e-4))

        def fixed_loss():
            tr.model.train()
            with torch.no_grad():
                out = tr.model(photo_batch, 0.1, torch.Generator().manual_seed(5))
            return mse_loss(photo_batch, out).item()

        before = fixed_loss()
        tr.train_step(photo_batch)
        assert fixed_loss() < before

    def test_overfits_fixed_batch(self, photo_batch):
        tr = Trainer(build_model(ModelConfig()), TrainSchedule(initial_lr=1e-4))
        losses = [tr.train_step(photo_batch) for _ in range(200)]
        assert losses[-1] < 0.5 * losses[0]

    def test_single_image_overfit(self, photo_batch):
        # plain autoencoder sanity; 1e-3 because 500 steps at 1e-4 lands just short of 30 dB
        x = photo_batch[:1]
        tr = Trainer(build_model(ModelConfig()), TrainSchedule(initial_lr=1e-3, single_snr=20.0))
        for _ in range(500):
            tr.train_step(x)
        m = tr.model.eval()
        with torch.no_grad():
            out = m(x, 0.01, torch.Generator().manual_seed(0))
        assert psnr(x.numpy(), out.numpy())[0] > 30.0

    def test_deterministic_losses(self, photo_batch):
        def run():
            tr = Trainer(build_model(ModelConfig(channels=2, seed=1)), TrainSchedule(seed=1))
            return [tr.train_step(photo_batch[:16]) for _ in range(20)]

        assert run() == run()

    def test_per_image_snr(self, photo_batch):
        tr = Trainer(build_model(ModelConfig(channels=2)), TrainSchedule(per_image_snr=True))
        assert np.isfinite(tr.train_step(photo_batch[:8]))

    def test_divergence(self):
        tr = Trainer(build_model(ModelConfig(channels=2)), TrainSchedule())
        x = torch.full((2, 32, 32, 3), float("nan"))
        with pytest.raises(DivergenceError):
            tr.train_step(x)


@pytest.fixture(scope="module")
def small_sets():
    return natural_patches(128, "train", seed=1), natural_patches(32, "test", seed=1)


def _quick_schedule(**kw):
    base = dict(batch_size=32, max_epochs=3, patience=5, seed=2)
    base.update(kw)
    return TrainSchedule(**base)


class TestTrain:
    def test_runs_and_keeps_best(self, tmp_path, small_sets):
        res = train(*small_sets, _quick_schedule(), ModelConfig(channels=2), out_dir=tmp_path)
        metrics = [h["mean_test_psnr"] for h in res.history]
        assert res.state.best_metric == max(metrics) >= metrics[-1]
        best, extras = load_checkpoint(res.checkpoint)
        assert extras["train_state"]["best_metric"] == res.state.best_metric
        rows = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1, 2]
        assert set(rows[0]["test_psnr"]) == {"0.0", "5.0", "10.0", "15.0", "20.0"}
        # returned model carries the best weights
        assert all(torch.equal(a, b) for a, b in zip(best.state_dict().values(), res.model.state_dict().values()))

    def test_patience_zero_runs_at_least_one_epoch(self, small_sets):
        res = train(*small_sets, _quick_schedule(patience=0), ModelConfig(channels=2))
        assert 1 <= len(res.history) <= 3

    def test_early_stop(self, small_sets):
        # lr 0 never improves after epoch 0
        res = train(*small_sets, _quick_schedule(initial_lr=0.0, patience=2, max_epochs=10), ModelConfig(channels=2))
        assert len(res.history) == 3
        assert res.state.epochs_since_improvement == 2

    def test_baseline_selects_on_single_snr(self, small_sets):
        res = train(*small_sets, _quick_schedule(single_snr=10.0, max_epochs=1), ModelConfig(channels=2, kind="baseline"))
        assert list(res.history[0]["test_psnr"]) == ["10.0"]

    def test_resume_matches_uninterrupted(self, tmp_path, small_sets):
        cfg = ModelConfig(channels=2)
        full = train(*small_sets, _quick_schedule(max_epochs=3), cfg, out_dir=tmp_path / "a")
        train(*small_sets, _quick_schedule(max_epochs=1), cfg, out_dir=tmp_path / "b")
        resumed = train(*small_sets, _quick_schedule(max_epochs=3), cfg, out_dir=tmp_path / "b", resume=True)
        assert [h["train_loss"] for h in full.history][1:] == [h["train_loss"] for h in resumed.history]
        for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
            assert torch.equal(a, b)

    def test_training_never_perturbs_snr(self, monkeypatch, small_sets):
        def boom(*a, **k):
            raise AssertionError("training must use the true variance")

        monkeypatch.setattr(channel, "perturb_snr_estimate", boom)
        monkeypatch.setattr(evaluation, "perturb_snr_estimate", boom)
        train(*small_sets, _quick_schedule(max_epochs=1), ModelConfig(channels=2))

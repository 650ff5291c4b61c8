import numpy as np
import pytest

from piaug import model as M
from piaug.augment import AugmentConfig
from piaug.trainer import (Adam, GradCheckError, TrainConfig, build_frozen_batch,
                           grad_verify, train, write_loss_log_csv)


def tiny_cfg(mode, epochs=3, seed=0):
    return TrainConfig(mode=mode, epochs=epochs, batch_size=4, horizon=10,
                       seed=seed, hidden=32, learning_rate=1e-3)


class TestTrainLoop:
    def test_vanilla_logs_zero_physics(self, tiny_dataset, small_terrain):
        res = train(tiny_dataset, tiny_cfg("vanilla"), small_terrain.pitch_at)
        assert not res.aborted
        for _, b in res.log:
            assert b.l_phys == 0.0
            assert b.lambda_pi == 0.0
            assert b.l_total == b.l_data

    def test_loss_identity_every_epoch(self, tiny_dataset, small_terrain):
        for mode in ("pinn", "piaug"):
            res = train(tiny_dataset, tiny_cfg(mode), small_terrain.pitch_at)
            for _, b in res.log:
                assert b.l_total == b.l_data + b.lambda_pi * b.l_phys

    def test_losses_decrease(self, tiny_dataset, small_terrain):
        res = train(tiny_dataset, tiny_cfg("vanilla", epochs=15), small_terrain.pitch_at)
        first, last = res.log[0][1].l_data, res.log[-1][1].l_data
        assert last < first

    def test_seed_reproducible_bitwise(self, tiny_dataset, small_terrain):
        r1 = train(tiny_dataset, tiny_cfg("piaug", epochs=2), small_terrain.pitch_at)
        r2 = train(tiny_dataset, tiny_cfg("piaug", epochs=2), small_terrain.pitch_at)
        for (e1, b1), (e2, b2) in zip(r1.log, r2.log):
            assert (e1, b1.l_data, b1.l_phys) == (e2, b2.l_data, b2.l_phys)
        np.testing.assert_array_equal(r1.params.flat(), r2.params.flat())

    def test_piaug_with_unit_scales_matches_pinn_losses(self, tiny_dataset,
                                                        small_terrain):
        # collapsing the scale range turns augmentation into the plain
        # physics-informed variant (same physics batch seeds)
        unit = AugmentConfig(scale_lo=1.0, scale_hi=1.0)
        r_aug = train(tiny_dataset, tiny_cfg("piaug", epochs=2),
                      small_terrain.pitch_at, aug_cfg=unit)
        r_pinn = train(tiny_dataset, tiny_cfg("pinn", epochs=2),
                       small_terrain.pitch_at)
        for (_, a), (_, b) in zip(r_aug.log, r_pinn.log):
            assert a.l_data == pytest.approx(b.l_data, rel=1e-9)
            assert a.l_phys == pytest.approx(b.l_phys, rel=1e-9)

    def test_refuses_eval_tag(self, tiny_dataset, small_terrain):
        with pytest.raises(ValueError):
            train(tiny_dataset, tiny_cfg("vanilla"), small_terrain.pitch_at,
                  tag="eval")

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="hybrid")

    def test_resume_continues(self, tiny_dataset, small_terrain):
        cfg = tiny_cfg("vanilla", epochs=2)
        r1 = train(tiny_dataset, cfg, small_terrain.pitch_at)
        cfg4 = tiny_cfg("vanilla", epochs=4)
        r2 = train(tiny_dataset, cfg4, small_terrain.pitch_at, start=r1,
                   start_epoch=2)
        assert [e for e, _ in r2.log] == [0, 1, 2, 3]


class TestAdam:
    def test_moves_toward_minimum(self):
        params = M.init_params(seed=0, hidden=8)
        opt = Adam(params, lr=0.1)
        target = params.flat() * 0.0
        for _ in range(200):
            grads = {n: 2.0 * getattr(params, n) for n in M.ModelParams.WEIGHT_FIELDS}
            opt.step(params, grads)
        assert np.linalg.norm(params.flat() - target) < 0.05

    def test_state_round_trip(self):
        params = M.init_params(seed=0, hidden=8)
        opt = Adam(params, lr=0.01)
        grads = {n: np.ones_like(getattr(params, n))
                 for n in M.ModelParams.WEIGHT_FIELDS}
        opt.step(params, grads)
        arrs = opt.state_arrays()
        opt2 = Adam(params, lr=0.01)
        opt2.load_state_arrays(arrs)
        assert opt2.t == opt.t
        np.testing.assert_array_equal(opt2.m["w1"], opt.m["w1"])


class TestGradVerify:
    def test_fresh_init_passes(self, tiny_dataset, small_terrain):
        tb = build_frozen_batch(tiny_dataset, small_terrain.pitch_at, n=2, T=3)
        params = M.init_params(seed=0, hidden=16, enc_hidden=8)
        err = grad_verify(params, tb)
        assert err < 1e-4

    def test_zero_weights_pass(self, tiny_dataset, small_terrain):
        tb = build_frozen_batch(tiny_dataset, small_terrain.pitch_at, n=2, T=3)
        params = M.init_params(seed=0, hidden=16, enc_hidden=8)
        for n in M.ModelParams.WEIGHT_FIELDS:
            getattr(params, n)[...] = 0.0
        err = grad_verify(params, tb)
        assert err < 1e-6

    def test_corrupted_gradient_detected(self, tiny_dataset, small_terrain,
                                         monkeypatch):
        tb = build_frozen_batch(tiny_dataset, small_terrain.pitch_at, n=2, T=3)
        params = M.init_params(seed=0, hidden=16, enc_hidden=8)
        import piaug.trainer as tr
        real = tr.batch_loss_and_grads

        def corrupted(p, b, lam):
            breakdown, grads = real(p, b, lam)
            grads["w2"] = grads["w2"] * 1.5 + 0.01
            return breakdown, grads

        monkeypatch.setattr(tr, "batch_loss_and_grads", corrupted)
        with pytest.raises(GradCheckError):
            tr.grad_verify(params, tb)


def test_loss_log_csv(tmp_path):
    log = [(0, M.LossBreakdown(2.0, 1.0, 0.5)), (1, M.LossBreakdown(1.0, 0.5, 0.5))]
    path = tmp_path / "loss.csv"
    write_loss_log_csv(path, log, meta="meta")
    lines = path.read_text().strip().splitlines()
    assert lines[1] == "epoch,l_data,l_phys,l_total"
    assert lines[2].startswith("0,2,1,2.5")

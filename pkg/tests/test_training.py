"""Optimization loop: LR schedule, clipping, reproducibility, resume and
fine-tuning behavior."""

import numpy as np
import pytest

from trajworld import dataset, envs, model, training
from trajworld import tensor_core as tc

from conftest import tiny_model_cfg


def small_manifest(seed=0, episodes=6, T=30, gravity=10.0):
    params = envs.PendulumParams(gravity=gravity)
    records = envs.collect_mixed_replay(params, episodes, T,
                                        np.random.default_rng(seed))
    return dataset.manifest_from_records(
        params.env_id, envs.PendulumEnv(params).env_spec, records)


def small_train_cfg(**overrides):
    base = dict(total_steps=10, batch_size=4, warmup_steps=2, eval_every=5,
                seed=0)
    base.update(overrides)
    return training.TrainConfig(**base)


def small_model_cfg(**overrides):
    base = dict(num_blocks=1, num_heads=2, hidden=16, ffn_hidden=(32, 16),
                context=8, num_bins=16, max_variates=8, dropout=0.0)
    base.update(overrides)
    return model.ModelConfig(**base)


class TestSchedule:
    def test_warmup_and_cosine_values(self):
        cfg = training.TrainConfig(total_steps=20_000, warmup_steps=1000,
                                   peak_lr=1e-4)
        assert training.lr_schedule(0, cfg) == 0.0
        assert training.lr_schedule(500, cfg) == pytest.approx(5e-5)
        assert training.lr_schedule(1000, cfg) == pytest.approx(1e-4)
        mid = 1000 + (20_000 - 1000) // 2
        assert training.lr_schedule(mid, cfg) == pytest.approx(5e-5, rel=1e-3)
        assert training.lr_schedule(20_000, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_warmup_then_decreasing(self):
        cfg = training.TrainConfig(total_steps=100, warmup_steps=10)
        values = [training.lr_schedule(s, cfg) for s in range(101)]
        assert all(a <= b for a, b in zip(values[:10], values[1:11]))
        assert all(a >= b for a, b in zip(values[10:], values[11:]))

    def test_out_of_range(self):
        cfg = training.TrainConfig(total_steps=10, warmup_steps=2)
        with pytest.raises(ValueError):
            training.lr_schedule(11, cfg)

    def test_default_peaks(self):
        assert training.TrainConfig().peak_lr == 1e-4
        assert training.finetune_defaults().peak_lr == 1e-5
        assert training.finetune_defaults().mode == "finetune"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            training.TrainConfig(total_steps=10, warmup_steps=10)
        with pytest.raises(ValueError):
            training.TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            training.TrainConfig(mode="distill")


class TestClipping:
    def test_large_gradient_scaled_to_max(self):
        grads = {"a": np.array([3.0, 4.0])}  # norm 5
        clipped, raw = training.clip_global_norm(grads, 1.0)
        assert raw == pytest.approx(5.0)
        norm = np.sqrt(sum((g ** 2).sum() for g in clipped.values()))
        assert norm == pytest.approx(1.0)
        assert np.allclose(clipped["a"], [0.6, 0.8])

    def test_small_gradient_untouched(self):
        grads = {"a": np.array([0.1, 0.1])}
        clipped, raw = training.clip_global_norm(grads, 1.0)
        assert clipped["a"] is grads["a"]
        assert raw == pytest.approx(np.sqrt(0.02))

    def test_global_across_params(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, _ = training.clip_global_norm(grads, 1.0)
        assert np.allclose(clipped["a"], 0.6)
        assert np.allclose(clipped["b"], 0.8)


class TestTrainStep:
    def test_loss_decreases_on_repeated_batch(self):
        man = small_manifest()
        mc = small_model_cfg()
        cfg = small_train_cfg(total_steps=200, warmup_steps=1, peak_lr=3e-3,
                              eval_every=200)
        stats = dataset.compute_bin_stats(man, mc.num_bins)
        rng = np.random.default_rng(0)
        batch = dataset.sample_batch([man], {man.name: 1.0}, 4, mc.context,
                                     rng)
        params = model.init_params(mc, np.random.default_rng(1))
        opt = training.AdamState.init(params)
        first = None
        for step in range(100):
            params, opt, row = training.train_step(
                params, batch, opt, cfg, model_cfg=mc, stats=stats, step=step)
            first = first if first is not None else row["loss"]
        assert row["loss"] < 0.5 * first

    def test_weight_decay_shrinks_params(self):
        man = small_manifest()
        mc = small_model_cfg()
        stats = dataset.compute_bin_stats(man, mc.num_bins)
        batch = dataset.sample_batch([man], {man.name: 1.0}, 2, mc.context,
                                     np.random.default_rng(0))
        cfg_wd = small_train_cfg(weight_decay=0.5, peak_lr=1e-5,
                                 warmup_steps=0, total_steps=2)
        cfg_no = small_train_cfg(weight_decay=0.0, peak_lr=1e-5,
                                 warmup_steps=0, total_steps=2)
        out = {}
        for tag, cfg in (("wd", cfg_wd), ("no", cfg_no)):
            params = model.init_params(mc, np.random.default_rng(2))
            opt = training.AdamState.init(params)
            params, opt, _ = training.train_step(
                params, batch, opt, cfg, model_cfg=mc, stats=stats, step=1)
            out[tag] = float(np.abs(params["w_in"].data).sum())
        assert out["wd"] < out["no"]


class TestReproducibility:
    def test_same_seed_identical_runs(self):
        man1, man2 = small_manifest(0), small_manifest(0)
        mc = small_model_cfg()
        cfg = small_train_cfg()
        ck1, m1 = training.pretrain([man1], {man1.name: 1.0}, cfg, mc)
        ck2, m2 = training.pretrain([man2], {man2.name: 1.0}, cfg, mc)
        assert [r["loss"] for r in m1] == [r["loss"] for r in m2]
        for k in ck1.params:
            assert np.array_equal(ck1.params[k].data, ck2.params[k].data)

    def test_different_seed_differs(self):
        man = small_manifest(0)
        mc = small_model_cfg()
        ck1, _ = training.pretrain([man], {man.name: 1.0},
                                   small_train_cfg(seed=0), mc)
        ck2, _ = training.pretrain([man], {man.name: 1.0},
                                   small_train_cfg(seed=1), mc)
        assert not np.array_equal(ck1.params["w_in"].data,
                                  ck2.params["w_in"].data)

    def test_in_memory_resume_is_bitwise(self):
        man = small_manifest(0)
        mc = small_model_cfg()
        cfg = small_train_cfg(total_steps=8, eval_every=4)
        full, _ = training.pretrain([man], {man.name: 1.0}, cfg, mc)
        mid, _ = training.pretrain([man], {man.name: 1.0}, cfg, mc,
                                   stop_step=4)
        assert mid.step == 4
        resumed, _ = training.pretrain(
            [man], {man.name: 1.0}, cfg, mc, init=mid.params,
            start_step=4, opt_state=mid.opt_state)
        for k in full.params:
            assert np.array_equal(full.params[k].data, resumed.params[k].data)

    def test_checkpoint_resume_float32_bitwise(self, tmp_path):
        # the container stores f32 payloads, so disk round-trip resume is
        # exact when the engine itself runs in float32
        tc.set_default_dtype("float32")
        try:
            man = small_manifest(0)
            mc = small_model_cfg()
            cfg = small_train_cfg(total_steps=8, eval_every=4)
            full, _ = training.pretrain([man], {man.name: 1.0}, cfg, mc)
            mid, _ = training.pretrain([man], {man.name: 1.0}, cfg, mc,
                                       stop_step=4)
            mid.save(tmp_path / "mid")
            loaded = training.Checkpoint.load(tmp_path / "mid")
            resumed, _ = training.pretrain(
                [man], {man.name: 1.0}, cfg, mc,
                init=loaded.params, start_step=4, opt_state=loaded.opt_state)
            for k in full.params:
                assert np.array_equal(full.params[k].data.astype(np.float32),
                                      resumed.params[k].data.astype(np.float32))
        finally:
            tc.set_default_dtype("float64")


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        man = small_manifest(0)
        mc = small_model_cfg()
        ckpt, _ = training.pretrain([man], {man.name: 1.0},
                                    small_train_cfg(), mc)
        ckpt.save(tmp_path / "ck")
        back = training.Checkpoint.load(tmp_path / "ck")
        assert back.model_cfg == mc
        assert back.step == ckpt.step
        assert sorted(back.params) == sorted(ckpt.params)
        assert sorted(back.bin_stats) == sorted(ckpt.bin_stats)
        for k in ckpt.params:
            assert np.allclose(back.params[k].data, ckpt.params[k].data,
                               atol=1e-6)
        assert back.opt_state is not None
        assert back.opt_state.step == ckpt.opt_state.step


class TestValidation:
    def test_validation_loss_deterministic(self):
        man = small_manifest(0)
        mc = small_model_cfg()
        cfg = small_train_cfg()
        params = model.init_params(mc, np.random.default_rng(0))
        stats = {man.entries[0].env_spec.env_id:
                 dataset.compute_bin_stats(man, mc.num_bins)}
        a = training.validation_loss(params, mc, cfg, [man], {man.name: 1.0},
                                     stats, step=3)
        b = training.validation_loss(params, mc, cfg, [man], {man.name: 1.0},
                                     stats, step=3)
        assert a == b


class TestFinetune:
    def test_zero_steps_copies_params(self):
        man = small_manifest(0)
        mc = small_model_cfg()
        ckpt, _ = training.pretrain([man], {man.name: 1.0},
                                    small_train_cfg(), mc)
        cfg = training.TrainConfig(total_steps=0, warmup_steps=0,
                                   mode="finetune")
        tuned, metrics = training.finetune(ckpt, small_manifest(1), cfg)
        assert metrics == []
        for k in ckpt.params:
            assert np.array_equal(tuned.params[k].data, ckpt.params[k].data)
            assert tuned.params[k] is not ckpt.params[k]

    def test_recomputes_bin_stats(self):
        man = small_manifest(0)
        mc = small_model_cfg()
        ckpt, _ = training.pretrain([man], {man.name: 1.0},
                                    small_train_cfg(), mc)
        other = small_manifest(3, gravity=6.0)
        cfg = small_train_cfg(total_steps=4, mode="finetune", eval_every=2)
        tuned, _ = training.finetune(ckpt, other, cfg)
        env_id = other.entries[0].env_spec.env_id
        assert env_id in tuned.bin_stats
        assert tuned.bin_stats[env_id].num_bins == mc.num_bins

    def test_too_many_variates_rejected(self):
        man = small_manifest(0)
        mc = small_model_cfg(max_variates=5)
        ckpt, _ = training.pretrain([man], {man.name: 1.0},
                                    small_train_cfg(), mc)
        wide = dataset.manifest_from_records(
            "wide", dataset.EnvSpec("wide", 6, 2),
            [dataset.TrajectoryRecord(
                "wide", states=np.zeros((4, 6)), actions=np.zeros((3, 2)),
                rewards=np.arange(3.0))])
        with pytest.raises(ValueError):
            training.finetune(ckpt, wide,
                              small_train_cfg(total_steps=2, mode="finetune"))

import math

import numpy as np
import pytest

from lattle import tensor as T
from lattle.data import fit_normalizer, split
from lattle.errors import ConfigError, TrainingError
from lattle.gftt import GfttConfig, GfttModel, build_feature_vocab
from lattle.minilm import LmConfig, MiniLm
from lattle.training import (GfttBatches, LmBatches, TrainConfig, fit, finetune_source, finetune_target,
                             lr_schedule, warmup_steps)
from lattle.transplant import get_strategy, transplant

from conftest import tiny_dataset


class TestLrSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 100, 0.1, 3e-4) == 0.0
        assert lr_schedule(10, 100, 0.1, 3e-4) == 3e-4
        assert lr_schedule(100, 100, 0.1, 3e-4) == 0.0

    def test_hand_values(self):
        assert lr_schedule(5, 100, 0.1, 1.0) == 0.5
        assert lr_schedule(55, 100, 0.1, 1.0) == 0.5

    def test_warmup_rounds_up(self):
        assert warmup_steps(15, 0.1) == 2
        assert warmup_steps(1, 0.01) == 1

    @pytest.mark.parametrize("total,ratio", [(7, 0.1), (10, 0.1), (100, 0.05), (333, 0.01)])
    def test_piecewise_linear_with_peak(self, total, ratio):
        lrs = np.array([lr_schedule(s, total, ratio, 2.0) for s in range(total + 1)])
        assert lrs.max() == 2.0
        assert np.all(lrs >= 0)
        warm = warmup_steps(total, ratio)
        np.testing.assert_allclose(np.diff(lrs[:warm + 1]), 2.0 / warm, rtol=1e-12)
        if total > warm:
            np.testing.assert_allclose(np.diff(lrs[warm:]), -2.0 / (total - warm), rtol=1e-12)

    def test_zero_total(self):
        with pytest.raises(ConfigError):
            lr_schedule(0, 0, 0.1, 1.0)

    def test_step_out_of_range(self):
        with pytest.raises(ConfigError):
            lr_schedule(11, 10, 0.1, 1.0)


def small_target(seed=0, n=40):
    ds = tiny_dataset(n, seed=seed)
    ds.columns["t_f0"] = ds.columns["t_f0"] + 2.0 * ds.labels
    sp = split(ds, seed)
    data = fit_normalizer(ds, sp.train).apply(ds)
    return ds, data.subset(sp.train), data.subset(sp.val)


def small_gftt(ds, dropout=0.0, seed=0):
    cfg = GfttConfig(n_layers=2, n_heads=2, d_model=8, ffn_hidden=16, dropout=dropout)
    return GfttModel(cfg, ds.schema, build_feature_vocab(ds), seed=seed)


class TestFit:
    def test_zero_lr_is_a_no_op(self):
        ds, train, val = small_target()
        model = small_gftt(ds)
        before = {n: p.data.copy() for n, p in model.parameters().items()}
        result = finetune_target(model, train, val, TrainConfig(0.0, 8, 0.01, 0.0, 0.1, 3))
        for n, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[n])
        assert len({r.val_loss for r in result.curve}) == 1
        # batch order changes each epoch, so the float32 epoch mean may differ in its last bits
        np.testing.assert_allclose([r.train_loss for r in result.curve], result.curve[0].train_loss, rtol=1e-6)

    def test_nan_loss_reports_step(self):
        ds, train, val = small_target()
        model = small_gftt(ds)
        batches = GfttBatches(model, train)
        calls = []

        def loss(idx):
            calls.append(idx)
            out = batches.loss(idx)
            return T.mul(out, math.nan) if len(calls) == 4 else out

        with pytest.raises(TrainingError) as info:
            fit(model, loss, batches.mean_loss, len(batches), TrainConfig(1e-3, 8, 0.0, 0.0, 0.1, 5))
        assert info.value.step == 3
        assert "3" in str(info.value)

    def test_best_epoch_is_restored(self):
        ds, train, val = small_target()
        model = small_gftt(ds)
        tv, vv = GfttBatches(model, train), GfttBatches(model, val)
        result = finetune_target(model, train, val, TrainConfig(3e-3, 8, 0.0, 0.0, 0.1, 12))
        assert len(result.curve) == 12
        assert result.best_val_loss == min(r.val_loss for r in result.curve)
        assert result.curve[result.best_epoch - 1].val_loss == result.best_val_loss
        assert vv.mean_loss() == result.best_val_loss
        assert result.steps == 12 * math.ceil(len(tv) / 8)

    def test_curve_csv(self, tmp_path):
        ds, train, val = small_target()
        result = finetune_target(small_gftt(ds), train, val, TrainConfig(1e-3, 8, 0.0, 0.0, 0.1, 4))
        result.write_curve(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 5

    def test_deterministic(self):
        ds, train, val = small_target()
        runs = []
        for _ in range(2):
            model = small_gftt(ds, dropout=0.2)
            finetune_target(model, train, val, TrainConfig(1e-3, 8, 0.01, 0.2, 0.1, 3, seed=5))
            runs.append({n: p.data.copy() for n, p in model.parameters().items()})
        for n in runs[0]:
            np.testing.assert_array_equal(runs[0][n], runs[1][n])

    def test_frozen_tensors_survive_training(self):
        ds, train, val = small_target()
        lm = MiniLm(LmConfig(vocab_size=12, n_layers=2, n_heads=2, d_model=8, ffn_hidden=16, max_len=4))
        model = small_gftt(ds)
        mask = transplant(lm, model, get_strategy("proposed"))
        params = model.parameters()
        before = {n: params[n].data.copy() for n in params}
        result = finetune_target(model, train, val, TrainConfig(1e-2, 4, 0.01, 0.1, 0.1, 9))
        assert result.steps >= 50
        for n, p in params.items():
            if n in mask:
                np.testing.assert_array_equal(p.data, before[n])
        assert not np.array_equal(params["layers.0.w_q"].data, before["layers.0.w_q"])
        assert not np.array_equal(params["layers.1.w_k"].data, before["layers.1.w_k"])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0).validate()


class TestFinetuneSource:
    def test_learns_separable_sequences(self):
        rng = np.random.default_rng(0)
        labels = np.arange(60) % 2
        seqs = [[3 + lab, *rng.integers(5, 10, 3)] for lab in labels]
        lm = MiniLm(LmConfig(vocab_size=10, n_layers=2, n_heads=2, d_model=8, ffn_hidden=16, max_len=4), seed=1)
        result = finetune_source(lm, seqs[:40], labels[:40], seqs[40:], labels[40:],
                                 TrainConfig(3e-3, 8, 0.01, 0.0, 0.1, 30))
        pred = LmBatches(lm, seqs[:40], labels[:40]).predict().argmax(axis=1)
        assert np.mean(pred == labels[:40]) >= 0.9
        assert result.best_val_loss < math.log(2)

    def test_lower_blocks_unchanged(self):
        labels = np.arange(20) % 2
        seqs = [[3 + lab, 5, 6] for lab in labels]
        lm = MiniLm(LmConfig(vocab_size=10, n_layers=2, n_heads=2, d_model=8, ffn_hidden=16, max_len=4))
        frozen = {n: p.data.copy() for n, p in lm.parameters().items() if p.frozen}
        finetune_source(lm, seqs[:14], labels[:14], seqs[14:], labels[14:], TrainConfig(1e-2, 4, 0.01, 0.1, 0.1, 3))
        assert "layers.0.w_k" in frozen and "tok_emb" in frozen
        for n, p in lm.parameters().items():
            if n in frozen:
                np.testing.assert_array_equal(p.data, frozen[n])

    def test_autoregressive_warmup_restores_freezing(self):
        labels = np.arange(20) % 2
        seqs = [[3 + lab, 5, 6, 7] for lab in labels]
        lm = MiniLm(LmConfig(vocab_size=10, n_layers=2, n_heads=2, d_model=8, ffn_hidden=16, max_len=4))
        before = lm.tok_emb.data.copy()
        finetune_source(lm, seqs[:14], labels[:14], seqs[14:], labels[14:],
                        TrainConfig(1e-2, 4, 0.01, 0.0, 0.1, 1), ar_epochs=2)
        assert lm.tok_emb.frozen
        assert not np.array_equal(lm.tok_emb.data, before)

import math

import numpy as np
import pytest
from scipy import stats

from lattle.errors import ConfigError, SearchError, TrainingError
from lattle.search import HyperparamSpace, LogUniform, random_search
from lattle.training import TrainConfig


class TestSpace:
    def test_samples_in_support(self):
        space, rng = HyperparamSpace(), np.random.default_rng(0)
        for _ in range(2000):
            cfg = space.sample(rng)
            assert space.contains(cfg)
            assert 1e-5 <= cfg.learning_rate <= 3e-4
            assert cfg.batch_size in (32, 64, 96, 128)
            assert cfg.dropout in (0.0, 0.1, 0.2, 0.3, 0.4)
            assert cfg.warmup_ratio in (0.01, 0.05, 0.1)

    def test_every_choice_value_reached(self):
        space, rng = HyperparamSpace(), np.random.default_rng(1)
        cfgs = [space.sample(rng) for _ in range(500)]
        assert {c.batch_size for c in cfgs} == {32, 64, 96, 128}
        assert {c.dropout for c in cfgs} == {0.0, 0.1, 0.2, 0.3, 0.4}

    def test_log_uniform_ks(self):
        dist, rng = LogUniform(1e-5, 3e-4), np.random.default_rng(2)
        logs = np.log([dist.sample(rng) for _ in range(5000)])
        p = stats.kstest(logs, stats.uniform(math.log(1e-5), math.log(3e-4) - math.log(1e-5)).cdf).pvalue
        assert p > 0.01

    def test_sampling_keeps_base_fields(self):
        base = TrainConfig(max_epochs=7, seed=3)
        cfg = HyperparamSpace().sample(np.random.default_rng(0), base)
        assert (cfg.max_epochs, cfg.seed) == (7, 3)


class TestRandomSearch:
    def test_single_trial(self):
        result = random_search(lambda c: 1.0, n_trials=1, seed=4)
        assert result.best == result.trials[0].config

    def test_picks_lowest_loss(self):
        result = random_search(lambda c: abs(math.log(c.learning_rate) - math.log(1e-4)), n_trials=30)
        losses = [t.val_loss for t in result.trials]
        assert result.best_val_loss == min(losses)
        assert result.best == result.trials[int(np.argmin(losses))].config

    def test_deterministic(self):
        a = random_search(lambda c: c.learning_rate, n_trials=10, seed=9)
        b = random_search(lambda c: c.learning_rate, n_trials=10, seed=9)
        assert [t.config for t in a.trials] == [t.config for t in b.trials]

    def test_failed_trials_are_logged(self):
        calls = []

        def objective(cfg):
            calls.append(cfg)
            if len(calls) % 2:
                raise TrainingError("diverged", 3)
            return float("nan") if len(calls) == 2 else 0.5

        result = random_search(objective, n_trials=6)
        assert sum(t.error is not None for t in result.trials) == 4
        assert result.best == result.trials[3].config

    def test_all_trials_diverge(self):
        with pytest.raises(SearchError):
            random_search(lambda c: float("inf"), n_trials=3)

    def test_needs_a_trial(self):
        with pytest.raises(ConfigError):
            random_search(lambda c: 0.0, n_trials=0)

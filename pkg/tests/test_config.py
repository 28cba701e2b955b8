import pytest

from lattle.config import ExperimentConfig
from lattle.errors import ConfigError


class TestExperimentConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig()
        cfg.validate()
        assert cfg.seeds == tuple(range(10))
        assert (cfg.lm_epochs, cfg.gftt_epochs) == (200, 150)

    def test_parse_values_and_comments(self):
        cfg = ExperimentConfig.parse("""
            # comment
            d_model = 32   # trailing comment
            seeds = 3, 4,5
            lm_full_finetune = yes
            gftt_lr = 1e-4
            strategy = top-to-two
        """)
        assert (cfg.d_model, cfg.seeds, cfg.lm_full_finetune, cfg.gftt_lr, cfg.strategy) == \
            (32, (3, 4, 5), True, 1e-4, "top-to-two")

    @pytest.mark.parametrize("text,match", [
        ("bogus = 1", "unknown key"),
        ("d_model = 8\nd_model = 16", "duplicate"),
        ("d_model = eight", "bad value"),
        ("lm_full_finetune = maybe", "bad value"),
        ("just words", "key = value"),
        ("strategy = all", "unknown strategy"),
        ("gftt_heads = 3", "divisible"),
        ("seeds = ", "at least one seed"),
        ("gftt_batch = 0", "batch_size"),
    ])
    def test_rejects(self, text, match):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig.parse(text)

    def test_text_round_trip(self):
        cfg = ExperimentConfig(d_model=16, seeds=(1, 2), gftt_lr=1.5e-4, lm_full_finetune=True)
        assert ExperimentConfig.parse(cfg.to_text()) == cfg

    def test_paths_resolve_against_config_dir(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "e.cfg").write_text("source_csv = data/s.csv\nout_dir = /abs/out\n")
        cfg = ExperimentConfig.load(tmp_path / "sub" / "e.cfg")
        assert cfg.source_csv == str(tmp_path / "sub" / "data" / "s.csv")
        assert cfg.out_dir == "/abs/out"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "nope.cfg")

    def test_derived_configs(self):
        cfg = ExperimentConfig(d_model=16, lm_heads=2, gftt_heads=4, gftt_dropout=0.2, gftt_batch=32)
        lm = cfg.lm_config(vocab_size=50, n_classes=3)
        assert (lm.d_model, lm.head_d_model, lm.head_heads, lm.n_classes) == (16, 16, 4, 3)
        assert cfg.gftt_config().dropout == 0.2
        train = cfg.gftt_train(7)
        assert (train.batch_size, train.seed, train.max_epochs) == (32, 7, 150)

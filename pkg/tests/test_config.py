import pytest

from alnmil.config import RunConfig, from_dict, load_config, parse_override
from alnmil.errors import ConfigurationError


class TestLoad:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('mode = "dlcnbc-ws"\ntile_size = 32\naugment = ["rotation(10)", "vflip(0.5)"]\n[train]\nepochs = 5\n')
        cfg = load_config(path, ["train.base_lr=0.01", "n_instances=6"], seed=4)
        assert (cfg.tile_size, cfg.n_instances, cfg.seed) == (32, 6, 4)
        assert cfg.train.epochs == 5 and cfg.train.base_lr == 0.01
        assert cfg.augment == ["rotation(10)", "vflip(0.5)"]

    def test_flag_wins(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("seed = 1\n")
        assert load_config(path, ["seed=2"], seed=3).seed == 3

    @pytest.mark.parametrize("data", [{"colour": 1}, {"tile_size": "big"}, {"train": {"lr": 1}},
                                      {"train": {"T_0": 0}}, {"mode": "dlcnb"}, {"augment": ["warp"]}])
    def test_rejects(self, data):
        with pytest.raises(ConfigurationError):
            from_dict(data).validate()

    def test_mode_mask_rules(self):
        with pytest.raises(ConfigurationError):
            RunConfig(mode="dlcnbc-ws", masks_dir="m").validate()
        with pytest.raises(ConfigurationError):
            RunConfig(mode="dlcnbc").validate()
        RunConfig(mode="dlcnbc", masks_dir="m").validate()

    def test_override_parsing(self):
        assert parse_override("mode=dlcnb") == {"mode": "dlcnb"}
        assert parse_override("augment=['hflip']") == {"augment": ["hflip"]}
        with pytest.raises(ConfigurationError):
            parse_override("novalue")


class TestHash:
    def test_stage_scoping(self):
        a = RunConfig()
        b = from_dict({"threshold": 0.3})
        assert a.stage_hash("train") == b.stage_hash("train")
        assert a.stage_hash("eval") != b.stage_hash("eval")
        c = from_dict({"tile_size": 64})
        assert all(a.stage_hash(s) != c.stage_hash(s) for s in ("tile", "bags", "train", "eval"))

    def test_paths_excluded(self):
        assert RunConfig(out_dir="x", slides_dir="a").stage_hash("eval") == RunConfig(out_dir="y").stage_hash("eval")

    def test_sub_seeds_distinct(self):
        cfg = RunConfig(seed=5)
        seeds = {cfg.seed_for(p) for p in ("split", "bags", "augment", "init", "shuffle")}
        assert len(seeds) == 5
        assert cfg.train_config().seed == cfg.seed_for("shuffle")

import math
import threading

import pytest

from rose_ood.config import AppConfig, parse_norm_order
from rose_ood.errors import ConfigError
from rose_ood.runtime import THREADS_ENV, chunk_ranges, ordered_map, resolve_threads


class TestAppConfig:
    def test_defaults(self):
        cfg = AppConfig.from_dict({})
        assert cfg.model.input_shape == (1, 28, 28)
        assert cfg.model.latent_dim == 50
        assert cfg.fisher.method == "ekfac"
        assert cfg.fisher.n_samples == 2000
        assert cfg.fisher.damping_rel == 1e-8
        assert math.isinf(cfg.score.p)
        assert cfg.runtime.precision == "float32"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            AppConfig.from_dict({"fisher": {"samples": 10}})

    def test_yaml_with_overrides(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(
            "paths:\n  artifacts_dir: out\nfisher:\n  method: diag\n  n_samples: 50\nscore:\n  p: 2\n",
            encoding="utf-8",
        )
        cfg = AppConfig.load(str(path), {"fisher": {"n_samples": 10, "method": None}})
        assert cfg.fisher.method == "diag"
        assert cfg.fisher.n_samples == 10
        assert cfg.score.p == 2.0
        assert cfg.paths.artifacts_dir == str((tmp_path / "out").resolve())

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            AppConfig.from_dict({"score": {"p": 0.5}})
        with pytest.raises(ConfigError):
            AppConfig.from_dict({"fisher": {"method": "kfac"}})
        with pytest.raises(ConfigError):
            AppConfig.from_dict({"fisher": {"calibration_split": 1.0}})
        with pytest.raises(ConfigError):
            AppConfig.from_dict({"runtime": {"precision": "float16"}})

    def test_bad_yaml(self, tmp_path):
        broken = tmp_path / "broken.yaml"
        broken.write_text("fisher: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid YAML"):
            AppConfig.load(str(broken))
        listing = tmp_path / "list.yaml"
        listing.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="mapping"):
            AppConfig.load(str(listing))
        with pytest.raises(ConfigError, match="cannot read"):
            AppConfig.load(str(tmp_path / "absent.yaml"))

    @pytest.mark.parametrize("raw, expected", [(1, 1.0), ("2", 2.0), ("inf", math.inf), ("∞", math.inf)])
    def test_norm_order(self, raw, expected):
        assert parse_norm_order(raw) == expected

    def test_norm_order_rejects_text(self):
        with pytest.raises(ConfigError):
            parse_norm_order("two")


class TestRuntime:
    def test_resolve_threads(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads() == 1
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads() == 3
        assert resolve_threads(2) == 2

    @pytest.mark.parametrize("raw", ["many", "0", "-2"])
    def test_bad_env_value(self, monkeypatch, raw):
        monkeypatch.setenv(THREADS_ENV, raw)
        with pytest.raises(ConfigError):
            resolve_threads()

    def test_chunk_ranges(self):
        assert chunk_ranges(10, 4) == [range(0, 4), range(4, 8), range(8, 10)]
        assert chunk_ranges(0, 4) == []
        with pytest.raises(ConfigError):
            chunk_ranges(5, 0)

    def test_ordered_map_keeps_input_order(self):
        seen = set()

        def work(x):
            seen.add(threading.get_ident())
            return x * x

        assert ordered_map(work, range(20), threads=4) == [x * x for x in range(20)]
        assert ordered_map(work, [3], threads=4) == [9]

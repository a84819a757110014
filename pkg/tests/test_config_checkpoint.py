import numpy as np
import pytest

from maniflow import checkpoint as cp
from maniflow import config as cfgmod
from maniflow.autodiff import ParamStore
from maniflow.errors import CheckpointError, ConfigError


class TestConfigParsing:
    def test_parse_and_types(self):
        text = """
        # circle experiment
        dataset.name = circle
        model.variant = manifold
        model.n = 1
        train.epochs = 3
        train.learning_rate = 0.001
        model.conditional = false
        """
        cfg = cfgmod.config_from_pairs(cfgmod.parse_config_text(text))
        assert cfg.dataset == "circle"
        assert cfg.manifold_dim == 1
        assert cfg.epochs == 3
        assert cfg.learning_rate == pytest.approx(0.001)
        assert cfg.conditional is False

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            cfgmod.config_from_pairs({"model.bogus": "1"})

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            cfgmod.parse_config_text("a.b = 1\na.b = 2")

    def test_n_exceeding_ambient_rejected(self):
        with pytest.raises(ConfigError):
            cfgmod.config_from_pairs({"dataset.name": "circle", "model.n": "3"})

    def test_overrides_win(self):
        cfg = cfgmod.config_from_pairs(
            {"train.epochs": "5"}, overrides={"train.epochs": "9"}
        )
        assert cfg.epochs == 9

    def test_bad_value_type(self):
        with pytest.raises(ConfigError):
            cfgmod.config_from_pairs({"train.epochs": "many"})

    def test_hash_stability_and_sensitivity(self):
        a = cfgmod.config_from_pairs({"train.epochs": "5"})
        b = cfgmod.config_from_pairs({"train.epochs": "5"})
        c = cfgmod.config_from_pairs({"train.epochs": "6"})
        assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
        assert cfgmod.config_hash(a) != cfgmod.config_hash(c)

    def test_roundtrip_through_text(self):
        cfg = cfgmod.config_from_pairs({"model.variant": "pie", "model.epsilon": "0.05"})
        back = cfgmod.config_from_pairs(
            cfgmod.parse_config_text(cfgmod.config_to_text(cfg))
        )
        assert back == cfg

    def test_parse_overrides(self):
        out = cfgmod.parse_overrides(["a.b=1", "c.d = x"])
        assert out == {"a.b": "1", "c.d": "x"}
        with pytest.raises(ConfigError):
            cfgmod.parse_overrides(["novalue"])


class TestCheckpoint:
    def make_store(self):
        store = ParamStore()
        rng = np.random.default_rng(0)
        store.create("f.w", rng.normal(size=(3, 4)))
        store.create("h.b", rng.normal(size=5))
        return store

    def test_roundtrip_bitwise(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "model.bin"
        rng = np.random.default_rng(3)
        cp.save_checkpoint(path, "dataset.name = circle\n", store,
                           stats={"mean": [0.1, 0.2]}, rng=rng)
        data = cp.load_checkpoint(path)
        assert data.config_text == "dataset.name = circle\n"
        for p in store:
            np.testing.assert_array_equal(data.arrays[p.name], p.value)
            assert data.arrays[p.name].shape == p.value.shape
        np.testing.assert_allclose(data.stats["mean"], [0.1, 0.2])
        assert data.rng_state == rng.bit_generator.state

    def test_corrupted_byte_detected(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "model.bin"
        cp.save_checkpoint(path, "x = 1\n", store)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            cp.load_checkpoint(path)

    def test_truncated_file_detected(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "model.bin"
        cp.save_checkpoint(path, "x = 1\n", store)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CheckpointError):
            cp.load_checkpoint(path)

    def test_version_bump_rejected(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "model.bin"
        cp.save_checkpoint(path, "x = 1\n", store)
        raw = bytearray(path.read_bytes())
        # overwrite the version field and fix up the checksum
        import struct
        import zlib

        struct.pack_into("<I", raw, len(cp.MAGIC), 99)
        body = bytes(raw[:-4])
        raw[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            cp.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "not.bin"
        path.write_bytes(b"NOTAFLOW" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            cp.load_checkpoint(path)

import json
import os
import pathlib
import zlib

import numpy as np
import pytest

from wavediff.io.checkpoint import load_checkpoint, save_checkpoint
from wavediff.io.config import ConfigError, RunConfig, describe_keys, parse_config_text
from wavediff.io.container import FormatError, decode, encode
from wavediff.io.datasets import KINDS, SyntheticDatasetSpec, generate, load_dataset, write_dataset
from wavediff.io.images import (ImageFormatError, load_images, quantize, read_pnm, save_images, to_unit,
                                write_pnm)
from wavediff.io.tensorfile import load_wdt, save_wdt
from wavediff.metrics import assign_modes, mode_coverage, moment_error
from wavediff.wavelet import dwt_packed, multilevel_dwt

GOLDEN = pathlib.Path(__file__).parent / "golden"


class TestImages:
    def test_black_and_white(self, tmp_path):
        write_pnm(str(tmp_path / "b.pgm"), np.zeros((3, 4), np.uint8))
        write_pnm(str(tmp_path / "w.pgm"), np.full((3, 4), 255, np.uint8))
        assert np.all(to_unit(read_pnm(str(tmp_path / "b.pgm"))) == -1.0)
        assert np.all(to_unit(read_pnm(str(tmp_path / "w.pgm"))) == 1.0)

    def test_quantize_convention(self):
        assert quantize(np.zeros((1, 1, 1)))[0, 0] == 128
        assert quantize(np.full((1, 1, 1), 3.7))[0, 0] == 255
        assert quantize(np.full((1, 1, 1), -9.0))[0, 0] == 0

    def test_random_round_trip(self, tmp_path, rng):
        x = rng.uniform(-1, 1, size=(3, 5, 7))
        write_pnm(str(tmp_path / "r.ppm"), quantize(x))
        back = to_unit(read_pnm(str(tmp_path / "r.ppm")))
        assert back.shape == x.shape
        assert np.abs(back - x).max() <= 1 / 127.5

    def test_header_comments(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pnm(str(p)), [[0, 255]])

    @pytest.mark.parametrize("data,msg", [
        (b"P3\n1 1\n255\n0", "offset 0"),
        (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
        (b"P5\n2 2\n255\n\x00", "truncated"),
        (b"P5\nx 2\n255\n", "offset"),
    ])
    def test_malformed(self, tmp_path, data, msg):
        p = tmp_path / "bad.pgm"
        p.write_bytes(data)
        with pytest.raises(ImageFormatError, match=msg) as e:
            read_pnm(str(p))
        assert "bad.pgm" in str(e.value)

    def test_save_and_load_directory(self, tmp_path, rng):
        batch = rng.uniform(-1, 1, size=(11, 3, 4, 4))
        names = save_images(batch, str(tmp_path), {"seed": 3})
        files = sorted(os.listdir(tmp_path))
        assert len([f for f in files if f.endswith(".ppm")]) == 11 and "manifest.json" in files
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["count"] == 11 and manifest["seed"] == 3 and manifest["files"] == names
        back = load_images(str(tmp_path))
        assert np.abs(back - batch).max() <= 1 / 127.5  # natural order: sample_10 after sample_9

    def test_mixed_sizes(self, tmp_path):
        write_pnm(str(tmp_path / "a.pgm"), np.zeros((2, 2), np.uint8))
        write_pnm(str(tmp_path / "b.pgm"), np.zeros((3, 2), np.uint8))
        with pytest.raises(ImageFormatError, match="b.pgm"):
            load_images(str(tmp_path))


class TestContainer:
    def tensors(self, rng):
        return {"a/w": rng.normal(size=(2, 3)), "count": np.array(7, dtype=np.int64),
                "key": np.array([1, 2**63 + 5], dtype=np.uint64), "empty": np.zeros(0)}

    def test_round_trip_bitwise(self, rng):
        t = self.tensors(rng)
        version, blob, back = decode(encode(b"TEST", 3, "cfg = 1\n", t), b"TEST")
        assert (version, blob) == (3, "cfg = 1\n")
        assert list(back) == list(t)
        for k in t:
            assert back[k].dtype == t[k].dtype and back[k].tobytes() == t[k].tobytes()

    def test_f32_storage(self, rng):
        t = {"w": rng.normal(size=5)}
        _, _, back = decode(encode(b"TEST", 1, "", t, store_f32=True), b"TEST")
        assert back["w"].dtype == np.float32
        np.testing.assert_array_equal(back["w"], t["w"].astype(np.float32))

    def test_crc_detects_corruption(self, rng):
        data = bytearray(encode(b"TEST", 1, "x", self.tensors(rng)))
        data[20] ^= 0xFF
        with pytest.raises(FormatError, match="CRC32"):
            decode(bytes(data), b"TEST")

    def test_bad_magic_and_truncation(self, rng):
        data = encode(b"TEST", 1, "x", self.tensors(rng))
        with pytest.raises(FormatError, match="magic"):
            decode(data, b"NOPE")
        with pytest.raises(FormatError):
            decode(data[:3], b"TEST")
        body = data[:-4][:-8]
        with pytest.raises(FormatError, match="offset"):
            decode(body + zlib.crc32(body).to_bytes(4, "little"), b"TEST")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        text = "model.preset = tiny\n# comment kept verbatim\n"
        t = {"G/w": rng.normal(size=(3, 3)), "state/step": np.array(4, dtype=np.int64)}
        path = str(tmp_path / "ckpt_4.wdif")
        save_checkpoint(path, text, t)
        assert open(path, "rb").read(4) == b"WDIF"
        text2, t2 = load_checkpoint(path)
        assert text2 == text
        assert all(t[k].tobytes() == t2[k].tobytes() for k in t)
        assert not any(n.endswith(".tmp") for n in os.listdir(tmp_path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nothere"):
            load_checkpoint(str(tmp_path / "nothere.wdif"))


class TestTensorFile:
    def test_golden_bytes(self, tmp_path):
        from wavediff.cli import main
        for img, wdt, levels in (("ramp4.ppm", "ramp4.wdt", 1), ("gray4.pgm", "gray4_l2.wdt", 2)):
            out = tmp_path / wdt
            assert main(["dwt", "--in", str(GOLDEN / img), "--out", str(out), "--levels", str(levels)]) == 0
            assert out.read_bytes() == (GOLDEN / wdt).read_bytes()

    def test_golden_layout(self):
        y, meta = load_wdt(str(GOLDEN / "ramp4.wdt"))
        assert meta["order"] == ["ll", "lh", "hl", "hh"] and meta["image_channels"] == 3
        x = to_unit(read_pnm(str(GOLDEN / "ramp4.ppm")))
        # channel k*3 + c holds subband k of colour c; check ll and hh by hand for the top-left block
        blk = x[:, :2, :2]
        np.testing.assert_allclose(y[0, 0:3, 0, 0], blk.sum(axis=(1, 2)) / 2, atol=1e-12)
        np.testing.assert_allclose(y[0, 9:12, 0, 0], (blk[:, 0, 0] - blk[:, 0, 1] - blk[:, 1, 0] + blk[:, 1, 1]) / 2,
                                   atol=1e-12)
        y2, meta2 = load_wdt(str(GOLDEN / "gray4_l2.wdt"))
        g = to_unit(read_pnm(str(GOLDEN / "gray4.pgm")))[None]
        assert meta2["levels"] == 2 and meta2["image_channels"] == 1
        np.testing.assert_array_equal(y2, multilevel_dwt(g, 2).data)

    def test_round_trip(self, tmp_path, rng):
        y = dwt_packed(rng.normal(size=(2, 3, 4, 4))).data
        save_wdt(str(tmp_path / "y.wdt"), y, {"note": "x"})
        back, meta = load_wdt(str(tmp_path / "y.wdt"))
        assert back.tobytes() == y.tobytes() and meta["note"] == "x"

    def test_wrong_magic(self, tmp_path):
        save_checkpoint(str(tmp_path / "c.wdif"), "", {})
        with pytest.raises(FormatError):
            load_wdt(str(tmp_path / "c.wdif"))


class TestConfig:
    def test_defaults_and_parse(self):
        cfg = RunConfig.from_text("train.batch = 8  # small\n\nmodel.preset = tiny\n"
                                  "data.resolution = 16\ndata.channels = 1\n")
        assert cfg["train.batch"] == 8 and cfg["train.lambda_rec"] == 1.0
        assert cfg["train.lr_G"] == 1.6e-4 and cfg["train.lr_D"] == 1.25e-4
        assert cfg.generator_spec().base_channels == 8
        assert cfg.steps() == 2

    def test_data_must_fit_model(self):
        with pytest.raises(ConfigError, match="model expects"):
            RunConfig.from_text("model.preset = tiny\n")

    @pytest.mark.parametrize("text,msg", [
        ("train.bogus = 1\n", "unknown key"),
        ("train.batch = 1\ntrain.batch = 2\n", "twice"),
        ("train.batch = many\n", "bad value"),
        ("just words\n", "expected key"),
    ])
    def test_rejects(self, text, msg):
        with pytest.raises(ConfigError, match=msg):
            parse_config_text(text, "c.cfg")

    def test_model_overrides(self):
        cfg = RunConfig.from_text("model.preset = desk\nmodel.base_channels = 16\nmodel.channel_multipliers = 1,2\n")
        spec = cfg.generator_spec()
        assert spec.base_channels == 16 and spec.channel_multipliers == (1, 2)

    def test_seed_precedence(self, monkeypatch):
        cfg = RunConfig.from_text("train.seed = 3\n")
        monkeypatch.delenv("WAVEDIFF_SEED", raising=False)
        assert cfg.seed() == 3
        monkeypatch.setenv("WAVEDIFF_SEED", "9")
        assert cfg.seed() == 9
        assert cfg.seed(11) == 11

    def test_every_key_documented(self):
        text = describe_keys()
        from wavediff.io.config import KEYS
        assert all(k in text for k in KEYS)


class TestDatasets:
    @pytest.mark.parametrize("kind", KINDS)
    def test_pure_function_of_spec(self, kind):
        a = generate(SyntheticDatasetSpec(kind, 16, 3, 12, seed=4))
        b = generate(SyntheticDatasetSpec(kind, 16, 3, 12, seed=4))
        assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
        assert a.images.shape == (12, 3, 16, 16)
        assert a.images.min() >= -1 and a.images.max() <= 1
        assert set(np.unique(a.labels)) <= {0, 1}

    def test_two_modes_are_separable(self):
        ds = generate(SyntheticDatasetSpec(count=256))
        assert np.array_equal(assign_modes(ds.images, ds.prototypes()), ds.labels)
        assert 0.4 < ds.labels.mean() < 0.6

    def test_write_and_load(self, tmp_path):
        spec = SyntheticDatasetSpec("shapes", 8, 1, 12, seed=1)
        write_dataset(spec, str(tmp_path))
        ds = load_dataset(str(tmp_path))
        ref = generate(spec)
        np.testing.assert_array_equal(ds.images, ref.images)
        np.testing.assert_array_equal(ds.labels, ref.labels)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticDatasetSpec("noise")
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(channels=2)


class TestMetrics:
    def test_coverage(self):
        protos = np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
        s = np.stack([np.full((1, 2, 2), v) for v in (0.1, 0.2, 0.9, 0.4)])
        assert mode_coverage(s, protos) == 0.25

    def test_moment_error(self, rng):
        x = rng.normal(size=(50, 3, 4, 4))
        assert moment_error(x, x) == 0.0
        assert moment_error(x + 0.3, x) == pytest.approx(0.3)

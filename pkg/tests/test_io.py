import json

import numpy as np
import pytest
import torch
from PIL import Image

from oracles import random_scene
from splatlift.geometry import Camera, look_at
from splatlift.io import (
    DatasetManifest,
    FormatError,
    ViewEntry,
    config_hash,
    decode_checkpoint,
    decode_float_image,
    decode_scene,
    encode_checkpoint,
    encode_float_image,
    encode_scene,
    read_ply,
    read_scene,
    save_png,
    write_ply,
    write_scene,
    write_stamp,
)
from splatlift.lifter import LifterConfig, LifterParams
from splatlift.render import FloatImage, render
from splatlift.training import LossConfig


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestFloatImage:
    @pytest.mark.parametrize("semantics, c", [("color", 3), ("depth", 2), ("mask", 1)])
    def test_round_trip(self, semantics, c):
        data = np.random.default_rng(0).normal(size=(5, 7, c))
        out = decode_float_image(encode_float_image(FloatImage(data, semantics)))
        assert out.semantics == semantics and out.data.dtype == np.float32
        np.testing.assert_array_equal(out.data, data.astype(np.float32))

    def test_bad_magic_and_length(self):
        buf = encode_float_image(FloatImage(np.zeros((2, 2, 1)), "mask"))
        with pytest.raises(FormatError, match="bad magic"):
            decode_float_image(b"XXXX" + buf[4:])
        with pytest.raises(FormatError, match="payload length"):
            decode_float_image(buf[:-4])
        with pytest.raises(FormatError, match="version"):
            decode_float_image(buf[:4] + b"\x09\x00" + buf[6:])


class TestScene:
    @pytest.mark.parametrize("deg", [0, 1])
    def test_round_trip(self, deg, tmp_path):
        sc = random_scene(np.random.default_rng(deg), 9, sh_degree=deg)
        write_scene(tmp_path / "s.gscn", sc)
        out = read_scene(tmp_path / "s.gscn")
        assert out.sh_degree == deg and len(out) == 9 and out.scene_id == "s"
        for f in ("means", "opacities", "quats", "scales", "colors"):
            np.testing.assert_array_equal(getattr(out, f), f32(getattr(sc, f)))

    def test_truncated(self):
        buf = encode_scene(random_scene(np.random.default_rng(0), 3))
        with pytest.raises(FormatError):
            decode_scene(buf[:-1])

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_scene(tmp_path / "nope.gscn")


class TestPly:
    @pytest.mark.parametrize("deg", [0, 1])
    def test_round_trip_renders_alike(self, deg, tmp_path):
        sc = random_scene(np.random.default_rng(5), 12, sh_degree=deg)
        write_ply(tmp_path / "s.ply", sc)
        out = read_ply(tmp_path / "s.ply")
        np.testing.assert_allclose(out.means, sc.means, atol=1e-6)
        np.testing.assert_allclose(out.opacities, sc.opacities, atol=1e-6)
        np.testing.assert_allclose(out.scales, sc.scales, rtol=1e-6)
        np.testing.assert_allclose(out.colors, sc.colors, atol=1e-6)
        cam = Camera(16.0, 16.0, 8.0, 8.0, 16, 16)
        np.testing.assert_allclose(render(out, cam).color.data, render(sc, cam).color.data, atol=1e-5)

    def test_header_layout(self, tmp_path):
        sc = random_scene(np.random.default_rng(0), 2, sh_degree=1)
        sc.opacities[:] = 0.5
        sc.colors[:, 0, :] = 0.5
        write_ply(tmp_path / "s.ply", sc)
        buf = (tmp_path / "s.ply").read_bytes()
        head = buf[: buf.index(b"end_header")].decode().splitlines()
        props = [h.split()[2] for h in head if h.startswith("property")]
        assert props[:6] == ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        assert len(props) == 3 + 3 + 9 + 1 + 3 + 4
        body = np.frombuffer(buf[buf.index(b"end_header\n") + 11 :], "<f4").reshape(2, -1)
        # logit(0.5) = 0 and DC color 0.5 maps to 0
        assert np.all(body[:, props.index("opacity")] == 0) and np.all(body[:, 3:6] == 0)
        np.testing.assert_allclose(body[:, props.index("scale_0")], np.log(sc.scales[:, 0]), rtol=1e-6)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.ply").write_bytes(b"hello")
        with pytest.raises(FormatError):
            read_ply(tmp_path / "bad.ply")
        sc = random_scene(np.random.default_rng(0), 3)
        write_ply(tmp_path / "t.ply", sc)
        (tmp_path / "t.ply").write_bytes((tmp_path / "t.ply").read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            read_ply(tmp_path / "t.ply")


class TestManifest:
    def test_round_trip(self, tmp_path):
        cam = Camera.from_fov(8, 6, 50.0, look_at([0.2, 0, 0], [0, 0, 4]))
        (tmp_path / "a.fimg").write_bytes(b"")
        man = DatasetManifest("s0", [ViewEntry.from_camera(cam, "a.fimg")], kind="wall", seed=3)
        man.save(tmp_path)
        back = DatasetManifest.load(tmp_path)
        assert back == man
        np.testing.assert_allclose(back.views[0].camera().pose.matrix(), cam.pose.matrix(), atol=1e-15)

    def test_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            DatasetManifest.load(tmp_path)
        cam = Camera.from_fov(8, 8, 50.0)
        DatasetManifest("s0", [ViewEntry.from_camera(cam, "gone.fimg")]).save(tmp_path)
        with pytest.raises(FileNotFoundError, match="missing file"):
            DatasetManifest.load(tmp_path)
        raw = json.loads((tmp_path / "manifest.json").read_text())
        raw["format_version"] = 7
        (tmp_path / "manifest.json").write_text(json.dumps(raw))
        with pytest.raises(FormatError, match="version"):
            DatasetManifest.load(tmp_path)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError, match="malformed"):
            DatasetManifest.load(tmp_path)


class TestCheckpoint:
    def test_round_trip_with_adam(self):
        from splatlift.training import train_lifter
        from tests_support import tiny_sample

        cfg = LifterConfig(height=8, width=8, channels=(4, 4, 4, 4))
        p = LifterParams.create(cfg, seed=2)
        train_lifter([tiny_sample(8)], p, LossConfig(), steps=2)
        q = decode_checkpoint(encode_checkpoint(p))
        assert q.cfg == p.cfg and q.adam.step == 2
        for (n, a), (_, b) in zip(p.net.named_parameters(), q.net.named_parameters()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)
            np.testing.assert_array_equal(p.adam.m[n], q.adam.m[n])
        assert encode_checkpoint(q) == encode_checkpoint(p)

    def test_corrupt(self):
        p = LifterParams.create(LifterConfig(height=8, width=8, channels=(4, 4, 4, 4)))
        buf = encode_checkpoint(p)
        with pytest.raises(FormatError, match="truncated"):
            decode_checkpoint(buf[:-4])
        with pytest.raises(FormatError, match="trailing"):
            decode_checkpoint(buf + b"\0\0\0\0")


class TestPreviewAndStamp:
    def test_png(self, tmp_path):
        img = FloatImage(np.linspace(-0.5, 1.5, 12).reshape(2, 2, 3), "color")
        save_png(tmp_path / "c.png", img)
        arr = np.asarray(Image.open(tmp_path / "c.png"))
        assert arr.shape == (2, 2, 3) and arr.min() == 0 and arr.max() == 255
        save_png(tmp_path / "d.png", FloatImage(np.array([[[2.0, 1], [4.0, 1]]]), "depth"))
        np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "d.png")), [[0, 255]])

    def test_stamp_stable(self, tmp_path):
        a = write_stamp(tmp_path, "fit", 1, {"b": 2, "a": [1, 2]}).read_bytes()
        b = write_stamp(tmp_path, "fit", 1, {"a": [1, 2], "b": 2}).read_bytes()
        assert a == b
        assert json.loads(a)["config_hash"] == config_hash({"a": [1, 2], "b": 2})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

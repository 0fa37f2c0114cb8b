import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wigatr import io
from wigatr import network as net
from wigatr.surrogate import Surrogate
from wigatr.tokenizer import PowerNormalizer

from .conftest import random_scene, soup_scene


def test_scene_roundtrip_is_byte_identical(tmp_path):
    for i, scene in enumerate([random_scene(0, n_tx=2, n_rx=2), soup_scene(1)]):
        a, b = tmp_path / f"a{i}.json", tmp_path / f"b{i}.json"
        io.write_scene(a, scene)
        loaded = io.read_scene(a)
        io.write_scene(b, loaded)
        assert a.read_bytes() == b.read_bytes()
        assert np.array_equal(loaded.vertices, scene.vertices)
        assert np.array_equal(loaded.tx[0].pos, scene.tx[0].pos)


def test_malformed_scene(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(io.FormatError):
        io.read_scene(p)
    p.write_text('{"faces": []}')
    with pytest.raises(io.FormatError):
        io.read_scene(p)


def test_dataset_reader(small_dataset, tmp_path):
    ds = io.read_dataset(small_dataset)
    assert len(ds.links) == 96 and len(ds.scenes) == 8
    link = ds.links[0]
    s = ds.link_scene(link)
    assert len(s.tx) == 1 and np.array_equal(s.rx[0].pos, link.rx_pos)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(io.FormatError):
        io.read_dataset(empty)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.integers(0, 50), elements=st.floats(-1e6, 1e6, width=32)), st.floats(-100, 100), st.floats(0.1, 50))
def test_checkpoint_roundtrip(tmp_path_factory, params, mu, sigma):
    p = tmp_path_factory.mktemp("ck") / "c.bin"
    io.write_checkpoint(p, {"kind": "x", "n": 3}, mu, sigma, params)
    cfg, m, s, got = io.read_checkpoint(p)
    assert cfg == {"kind": "x", "n": 3} and m == mu and s == sigma
    assert got.dtype == np.float32 and np.array_equal(got, params)


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = net.ModelConfig("gatr", blocks=1, mv_channels=4, scalar_channels=4, heads=1)
    sur = Surrogate.create(cfg, 0, PowerNormalizer(-60.0, 8.0))
    p = tmp_path / "m.wgtr"
    sur.save(p)
    buf = p.read_bytes()
    (tmp_path / "trunc").write_bytes(buf[:-4])
    (tmp_path / "magic").write_bytes(b"XXXX" + buf[4:])
    for name in ("trunc", "magic"):
        with pytest.raises(io.FormatError):
            Surrogate.load(tmp_path / name)
    # config and parameter count disagree
    io.write_checkpoint(tmp_path / "mismatch", {"kind": "predictive", "model": cfg.to_dict()}, 0.0, 1.0, np.zeros(3, np.float32))
    with pytest.raises(io.FormatError):
        Surrogate.load(tmp_path / "mismatch")
    io.write_checkpoint(tmp_path / "kind", {"kind": "diffusion"}, 0.0, 1.0, np.zeros(3, np.float32))
    with pytest.raises(io.FormatError):
        Surrogate.load(tmp_path / "kind")


def test_ppm_roundtrip(tmp_path):
    grid = np.linspace(-90, -40, 12).reshape(3, 4)
    grid[1, 2] = np.nan
    io.write_ppm(tmp_path / "g.ppm", grid)
    rgb = io.read_ppm(tmp_path / "g.ppm")
    assert rgb.shape == (3, 4, 3)
    assert np.array_equal(rgb, io.colorize(grid))
    assert np.array_equal(rgb[1, 2], [0, 0, 0])
    # the ramp is monotone in brightness
    lum = rgb.astype(float) @ [0.299, 0.587, 0.114]
    flat = np.delete(lum.reshape(-1), 6)
    assert np.all(np.diff(flat) > 0)
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(io.FormatError):
        io.read_ppm(tmp_path / "bad.ppm")


def test_grid_csv(tmp_path):
    io.write_grid_csv(tmp_path / "g.csv", [0.0, 1.0], [2.0], np.array([[-50.0, -51.5]]))
    assert (tmp_path / "g.csv").read_text() == "x,y,power_db\n0.0,2.0,-50.0\n1.0,2.0,-51.5\n"

import numpy as np
import pytest

from wigatr import io
from wigatr.raysim import SceneSpec, generate_dataset, generate_scene, sample_receivers
from wigatr.scene import MATERIAL_LIBRARY, Antenna, Scene


def random_scene(seed: int, rooms=(1, 3), n_tx: int = 1, n_rx: int = 1) -> Scene:
    rng = np.random.default_rng(seed)
    scene = generate_scene(rng, SceneSpec(rooms=rooms, tx_per_scene=n_tx))
    return scene.with_antennas(rx=sample_receivers(rng, scene, n_rx))


def soup_scene(seed: int, n_faces: int = 20) -> Scene:
    """Random triangles with random materials and one tx/rx pair."""
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-3, 3, size=(n_faces, 3, 3))
    mats = rng.integers(0, len(MATERIAL_LIBRARY), size=n_faces)
    ori = lambda: (lambda v: v / np.linalg.norm(v))(rng.normal(size=3))
    return Scene(verts, mats, tx=[Antenna(rng.uniform(-2, 2, 3), ori())], rx=[Antenna(rng.uniform(-2, 2, 3), ori())])


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Eight single- and multi-room scenes, 2 tx x 6 rx each."""
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(3, 8, out, SceneSpec(rooms=(1, 3), tx_per_scene=2, rx_per_scene=6))
    return out / "dataset.jsonl"


@pytest.fixture(scope="session")
def small_table(small_dataset):
    from wigatr.training import LinkTable

    return LinkTable.from_dataset(io.read_dataset(small_dataset))


def pytest_terminal_summary(terminalreporter):
    import sys

    results = getattr(sys.modules.get("tests.test_acceptance"), "RESULTS", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}")

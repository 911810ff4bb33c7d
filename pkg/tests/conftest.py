import json

import numpy as np
import pytest

from canopy_fewshot.dataset import DatasetManifest, Tile, write_png


def make_tile(tid, label="a", size=128, value=None, seed=0, gsd=6.0, role_source="synthetic", excluded=False):
    if value is None:
        px = np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    else:
        px = np.full((size, size, 3), value, dtype=np.uint8)
    return Tile(tid, px, label, gsd, source=role_source, excluded=excluded)


def make_manifest(counts, role="base_train", size=128, prefix=None):
    """Manifest with ``counts[i]`` random tiles for class ``c<i>``."""
    tiles, roles = [], {}
    for ci, n in enumerate(counts):
        label = f"{prefix or 'c'}{ci}"
        for j in range(n):
            t = make_tile(f"{label}_{j:03d}", label, size=size, seed=1000 * ci + j)
            tiles.append(t)
            roles[t.tile_id] = role
    return DatasetManifest(tiles, roles)


@pytest.fixture
def tile_dir(tmp_path):
    """Five labeled PNG tiles plus a manifest.json in a temp directory."""
    (tmp_path / "img").mkdir()
    entries = []
    for i in range(5):
        px = np.random.default_rng(i).integers(0, 256, size=(100 + i, 120, 3), dtype=np.uint8)
        write_png(px, tmp_path / "img" / f"t{i}.png")
        entries.append(
            {"id": f"t{i}", "path": f"img/t{i}.png", "label": f"sp{i % 2}", "gsd_cm": 6.0,
             "role": "base_train", "excluded": i == 4}
        )
    (tmp_path / "manifest.json").write_text(json.dumps({"tiles": entries}))
    return tmp_path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} :: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

import json

import numpy as np
import pytest

from histmatch.simulator import RunOutput
from histmatch.store import RunRecord, RunStore, StoreCorruptionError

NAMES = ("a", "b")


def record(seed, tag="wave1", horizon=5):
    rng = np.random.default_rng(seed)
    out = RunOutput(*rng.integers(0, 50, (3, horizon)))
    return RunRecord(seed, tag, seed // 2, (0.1 * seed, 2.0), (0.5, 1 / 3), out)


def test_roundtrip_is_exact(tmp_path):
    store = RunStore(NAMES, 5, tmp_path)
    store.append([record(0), record(1)])
    store.append([record(2, "wave2")])
    back = RunStore.load(tmp_path)
    assert len(back) == 3 and back.next_seed == 3
    for a, b in zip(store, back):
        assert a == b
    assert [r.seed for r in back.tagged("wave2")] == [2]
    assert back[1].unit[1] == 1 / 3


def test_seed_collision_rejected_atomically(tmp_path):
    store = RunStore(NAMES, 5, tmp_path)
    store.append([record(0)])
    with pytest.raises(StoreCorruptionError, match="seed"):
        store.append([record(1), record(3)])
    assert len(store) == 1 and len(RunStore.load(tmp_path)) == 1
    with pytest.raises(StoreCorruptionError):
        store.append([record(0)])


def test_empty_append_is_noop(tmp_path):
    store = RunStore(NAMES, 5, tmp_path)
    store.append([])
    assert len(store) == 0 and not (tmp_path / "runs.csv").exists()


def test_shape_checks():
    store = RunStore(NAMES, 5)
    with pytest.raises(ValueError):
        store.append([record(0, horizon=6)])
    bad = RunRecord(0, "x", 0, (1.0,), (0.5,), record(0).output)
    with pytest.raises(ValueError):
        store.append([bad])


def test_interrupted_append_is_truncated(tmp_path):
    store = RunStore(NAMES, 5, tmp_path)
    store.append([record(0), record(1)])
    # simulate a crash after rows were written but before the manifest moved on
    with open(tmp_path / "runs.csv", "a") as fh:
        fh.write("2,2,wave1,1,0.2,2.0,0.5,0.3," + ",".join(["1"] * 15) + "\n")
    back = RunStore.load(tmp_path)
    assert len(back) == 2
    assert len((tmp_path / "runs.csv").read_text().splitlines()) == 3
    back.append([record(2)])
    assert RunStore.load(tmp_path)[2] == record(2)


def test_missing_rows_detected(tmp_path):
    store = RunStore(NAMES, 5, tmp_path)
    store.append([record(0), record(1)])
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["count"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(StoreCorruptionError):
        RunStore.load(tmp_path)


def test_open_checks_configuration(tmp_path):
    RunStore.open(tmp_path, NAMES, 5).append([record(0)])
    assert len(RunStore.open(tmp_path, NAMES, 5)) == 1
    with pytest.raises(StoreCorruptionError):
        RunStore.open(tmp_path, ("a", "c"), 5)


def test_save_copies(tmp_path):
    store = RunStore(NAMES, 5)
    store.append([record(0), record(1)])
    store.save(tmp_path / "copy")
    assert list(RunStore.load(tmp_path / "copy")) == list(store)

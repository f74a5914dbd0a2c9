"""Append-only table of simulator runs.

Run ``k`` of a pipeline always uses seed ``k``: the store hands out seeds
in insertion order and refuses records that break the sequence. On disk
it is ``runs.csv`` (one row per run, daily series flattened into columns)
plus a ``manifest.json`` holding the schema version and seed counter.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import read_json, write_json
from .errors import HistmatchError
from .simulator import RunOutput

SCHEMA_VERSION = 1
_SERIES = ("new_diagnoses", "new_deaths", "active_infections")


class StoreCorruptionError(HistmatchError, RuntimeError):
    """The store's contents contradict its seed-ordering contract."""


@dataclass(frozen=True)
class RunRecord:
    seed: int
    tag: str
    point_id: int
    theta: tuple[float, ...]
    unit: tuple[float, ...]
    output: RunOutput

    @property
    def run_id(self) -> int:
        return self.seed


class RunStore:
    """Runs in seed order; optionally mirrored to ``directory``."""

    def __init__(self, names: Sequence[str], horizon: int, directory: str | Path | None = None):
        self.names = tuple(names)
        self.horizon = int(horizon)
        self.directory = None if directory is None else Path(directory)
        self._records: list[RunRecord] = []

    # -- in-memory view
    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i) -> RunRecord:
        return self._records[i]

    @property
    def next_seed(self) -> int:
        return len(self._records)

    def tagged(self, tag: str) -> list[RunRecord]:
        return [r for r in self._records if r.tag == tag]

    def has_tag(self, tag: str) -> bool:
        return any(r.tag == tag for r in self._records)

    # -- mutation
    def append(self, records: Iterable[RunRecord]) -> None:
        """Validate then append; nothing is written if any record is bad."""
        records = list(records)
        if not records:
            return
        expect = self.next_seed
        for r in records:
            if r.seed != expect:
                raise StoreCorruptionError(
                    f"seed collision: record carries seed {r.seed}, store expects {expect}")
            if len(r.theta) != len(self.names) or len(r.unit) != len(self.names):
                raise ValueError(f"record {r.seed}: expected {len(self.names)} parameters")
            if r.output.horizon != self.horizon:
                raise ValueError(f"record {r.seed}: horizon {r.output.horizon} != {self.horizon}")
            expect += 1
        if self.directory is not None:
            self._write_rows(records)
        self._records.extend(records)
        if self.directory is not None:
            self._write_manifest()

    # -- persistence
    def _header(self) -> list[str]:
        cols = ["run_id", "seed", "tag", "point_id"]
        cols += list(self.names) + [f"u_{n}" for n in self.names]
        for s in _SERIES:
            cols += [f"{s}_{t}" for t in range(self.horizon)]
        return cols

    def _row(self, r: RunRecord) -> list:
        row = [r.seed, r.seed, r.tag, r.point_id]
        row += [repr(float(v)) for v in r.theta] + [repr(float(v)) for v in r.unit]
        for s in _SERIES:
            row += [int(v) for v in getattr(r.output, s)]
        return row

    def _write_rows(self, records) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / "runs.csv"
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(self._header())
            for r in records:
                w.writerow(self._row(r))
            fh.flush()
            os.fsync(fh.fileno())

    def _write_manifest(self) -> None:
        write_json(self.directory / "manifest.json", {
            "schema_version": SCHEMA_VERSION,
            "names": list(self.names),
            "horizon": self.horizon,
            "count": len(self._records),
            "next_seed": self.next_seed,
        })

    def save(self, directory: str | Path) -> None:
        """Write a complete copy to ``directory``, replacing any store there."""
        directory = Path(directory)
        for name in ("runs.csv", "manifest.json"):
            if (directory / name).exists():
                (directory / name).unlink()
        copy = RunStore(self.names, self.horizon, directory)
        copy.append(self._records)
        copy._write_manifest()

    @classmethod
    def open(cls, directory: str | Path, names: Sequence[str], horizon: int) -> "RunStore":
        """Load the store in ``directory`` or start an empty one there."""
        directory = Path(directory)
        if (directory / "manifest.json").exists():
            store = cls.load(directory)
            if store.names != tuple(names) or store.horizon != int(horizon):
                raise StoreCorruptionError(f"{directory}: store was created for a different configuration")
            return store
        stale = directory / "runs.csv"
        if stale.exists():
            stale.unlink()
        return cls(names, horizon, directory)

    @classmethod
    def load(cls, directory: str | Path) -> "RunStore":
        """Read a store back.

        Rows past the manifest count come from an append that was interrupted
        before the manifest update; they are dropped (and truncated on disk)
        because the pipeline regenerates them identically.
        """
        directory = Path(directory)
        man = read_json(directory / "manifest.json")
        if man.get("schema_version") != SCHEMA_VERSION:
            raise StoreCorruptionError(f"{directory}: unsupported store schema {man.get('schema_version')}")
        store = cls(man["names"], man["horizon"], directory)
        count = int(man["count"])
        path = directory / "runs.csv"
        if count == 0:
            if path.exists():
                path.unlink()
            return store
        with open(path, newline="") as fh:
            lines = fh.readlines()
        header, body = lines[0], lines[1:]
        if header.rstrip("\n").split(",") != store._header():
            raise StoreCorruptionError(f"{path}: unexpected header")
        if len(body) < count:
            raise StoreCorruptionError(f"{path}: manifest lists {count} runs, file has {len(body)}")
        if len(body) > count:
            with open(path, "w", newline="") as fh:
                fh.writelines([header] + body[:count])
            body = body[:count]
        d, h = len(store.names), store.horizon
        for i, row in enumerate(csv.reader(body)):
            seed = int(row[1])
            if int(row[0]) != i or seed != i:
                raise StoreCorruptionError(f"{path}: row {i} carries seed {seed}")
            theta = tuple(float(v) for v in row[4:4 + d])
            unit = tuple(float(v) for v in row[4 + d:4 + 2 * d])
            vals = np.array(row[4 + 2 * d:], dtype=np.int64).reshape(3, h)
            store._records.append(RunRecord(seed, row[2], int(row[3]), theta, unit, RunOutput(*vals)))
        return store

"""Append-only historical repository backed by a JSON-lines file.

File layout: a header line (ranges, sensor count), then record and gap lines,
each segment closed by a checksum line covering the lines since the previous
checksum. Contexts are stored normalised.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptStore, EmptyRepository, ShapeMismatch
from .truss import ContextRanges

KINDS = ("design_sim", "real_measurement", "inferred_pair")
LABELED_KINDS = ("design_sim", "inferred_pair")


@dataclass(frozen=True)
class RepositoryRecord:
    timestamp: int
    kind: str
    sensors: tuple
    context: tuple | None = None
    provenance: str = ""
    record_id: int = -1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        if self.kind in LABELED_KINDS and self.context is None:
            raise ValueError(f"{self.kind} records need a context")
        if self.kind == "real_measurement" and self.context is not None:
            raise ValueError("real measurements carry no context")
        object.__setattr__(self, "sensors", tuple(float(v) for v in self.sensors))
        if self.context is not None:
            object.__setattr__(self, "context", tuple(float(v) for v in self.context))

    def to_json(self) -> dict:
        return {"type": "record", "id": self.record_id, "t": self.timestamp, "kind": self.kind,
                "context": None if self.context is None else list(self.context),
                "sensors": list(self.sensors), "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj: dict) -> "RepositoryRecord":
        return cls(obj["t"], obj["kind"], obj["sensors"], obj["context"], obj["provenance"], obj["id"])


@dataclass
class GapStatistics:
    mean: np.ndarray
    std: np.ndarray
    count: int

    def upper_bound(self, k: float) -> np.ndarray:
        return self.mean + k * self.std


class Repository:
    """In-memory store with JSON-lines persistence.

    Labelled contexts are mirrored in a dense array so nearest-context
    queries are a single vectorised scan.
    """

    def __init__(self, ranges: ContextRanges, d: int):
        self.ranges = ranges
        self.d = int(d)
        self._records: list[RepositoryRecord] = []
        self._labeled_ids: list[int] = []
        self._ctx_rows: list[np.ndarray] = []
        self._ctx_cache = np.zeros((0, len(ranges.bounds)))
        self._real_ids: list[int] = []
        self._last_t: dict[str, int] = {}
        self._gaps: list[np.ndarray] = []
        self._gap_n = 0
        self._gap_mean = np.zeros(self.d)
        self._gap_m2 = np.zeros(self.d)
        self._saved_lines = 0
        self._saved_path: Path | None = None
        header = {"type": "header", "d": self.d, "ranges": ranges.to_mapping()}
        self._journal = [json.dumps(header, sort_keys=True)]

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def append(self, record: RepositoryRecord) -> int:
        if len(record.sensors) != self.d:
            raise ShapeMismatch(f"record has {len(record.sensors)} sensors, store expects {self.d}")
        last = self._last_t.get(record.kind)
        if last is not None and record.timestamp < last:
            raise ValueError(f"timestamps must be non-decreasing within {record.kind}")
        rid = len(self._records)
        record = RepositoryRecord(record.timestamp, record.kind, record.sensors, record.context,
                                  record.provenance, rid)
        self._records.append(record)
        self._last_t[record.kind] = record.timestamp
        if record.kind in LABELED_KINDS:
            self._labeled_ids.append(rid)
            self._ctx_rows.append(np.asarray(record.context))
        else:
            self._real_ids.append(rid)
        self._journal.append(json.dumps(record.to_json(), sort_keys=True))
        return rid

    def extend_labeled(self, contexts_norm, sensors, kind: str = "design_sim", t: int = 0,
                       provenance: str = "") -> list[int]:
        """Bulk append of labelled pairs (faster than repeated ``append``)."""
        contexts_norm = np.atleast_2d(np.asarray(contexts_norm, dtype=float))
        sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
        ids = []
        for c, y in zip(contexts_norm, sensors):
            rid = len(self._records)
            rec = RepositoryRecord(t, kind, y, c, provenance, rid)
            if len(rec.sensors) != self.d:
                raise ShapeMismatch("sensor width mismatch")
            last = self._last_t.get(kind)
            if last is not None and t < last:
                raise ValueError(f"timestamps must be non-decreasing within {kind}")
            self._records.append(rec)
            self._labeled_ids.append(rid)
            self._ctx_rows.append(np.asarray(rec.context))
            self._journal.append(json.dumps(rec.to_json(), sort_keys=True))
            self._last_t[kind] = t
            ids.append(rid)
        return ids

    def count(self, kinds=LABELED_KINDS) -> int:
        return sum(1 for r in self._records if r.kind in kinds)

    def query_labeled(self, limit: int | None = None, kinds=LABELED_KINDS,
                      newest_first: bool = False) -> list[RepositoryRecord]:
        rows = [self._records[i] for i in self._labeled_ids if self._records[i].kind in kinds]
        if newest_first:
            rows = rows[::-1]
        return rows if limit is None else rows[:limit]

    def labeled_arrays(self, kinds=LABELED_KINDS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(sensors, normalised contexts, record ids) for labelled records."""
        ids = [i for i in self._labeled_ids if self._records[i].kind in kinds]
        if not ids:
            return np.zeros((0, self.d)), np.zeros((0, self._labeled_ctx.shape[1])), np.zeros(0, int)
        x = np.array([self._records[i].sensors for i in ids])
        c = np.array([self._records[i].context for i in ids])
        return x, c, np.array(ids)

    def query_real(self, window: int | None = None) -> list[RepositoryRecord]:
        ids = self._real_ids if window is None else self._real_ids[-window:] if window > 0 else []
        return [self._records[i] for i in ids]

    @property
    def _labeled_ctx(self) -> np.ndarray:
        if len(self._ctx_cache) != len(self._ctx_rows):
            self._ctx_cache = np.array(self._ctx_rows).reshape(len(self._ctx_rows), -1)
        return self._ctx_cache

    def nearest_context(self, candidate) -> tuple[int, float]:
        """Exact Euclidean nearest stored context (normalised space)."""
        if not self._labeled_ids:
            raise EmptyRepository("no stored contexts")
        diff = self._labeled_ctx - np.asarray(candidate, dtype=float)
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        k = int(np.argmin(dist))
        return self._labeled_ids[k], float(dist[k])

    def record_gap(self, delta, t: int = 0) -> None:
        """Add one reality-gap vector to the repository-wide history."""
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (self.d,):
            raise ShapeMismatch("gap vector width mismatch")
        self._gaps.append((int(t), delta.copy()))
        self._journal.append(json.dumps({"type": "gap", "t": int(t), "values": delta.tolist()},
                                        sort_keys=True))
        self._gap_n += 1
        step = delta - self._gap_mean
        self._gap_mean = self._gap_mean + step / self._gap_n
        self._gap_m2 = self._gap_m2 + step * (delta - self._gap_mean)

    def gap_history(self) -> np.ndarray:
        return np.array([g for _, g in self._gaps]).reshape(-1, self.d)

    def gap_stats(self) -> GapStatistics:
        n = self._gap_n
        std = np.sqrt(self._gap_m2 / (n - 1)) if n > 1 else np.zeros(self.d)
        return GapStatistics(self._gap_mean.copy(), std, n)

    # -- persistence --------------------------------------------------------

    def persist(self, path) -> None:
        """Write to ``path``; repeated calls on the same path append a segment."""
        path = Path(path)
        if self._saved_path == path and path.exists():
            new = self._journal[self._saved_lines:]
            if new:
                with open(path, "a") as fh:
                    fh.write(_segment(new))
        else:
            with open(path, "w") as fh:
                fh.write(_segment(self._journal))
            self._saved_path = path
        self._saved_lines = len(self._journal)

    @classmethod
    def load(cls, path) -> "Repository":
        path = Path(path)
        segment, repo = [], None
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            obj = json.loads(line)
            if obj.get("type") == "checksum":
                digest = hashlib.sha256("\n".join(segment).encode()).hexdigest()
                if digest != obj["sha256"] or len(segment) != obj["lines"]:
                    raise CorruptStore(f"{path}: checksum mismatch in segment ending at line {lineno}")
                for raw in segment:
                    item = json.loads(raw)
                    if item["type"] == "header":
                        repo = cls(ContextRanges.from_mapping(item["ranges"]), item["d"])
                    elif repo is None:
                        raise CorruptStore(f"{path}: missing header")
                    elif item["type"] == "record":
                        rec = RepositoryRecord.from_json(item)
                        if repo.append(rec) != rec.record_id:
                            raise CorruptStore(f"{path}: record ids out of sequence")
                    elif item["type"] == "gap":
                        repo.record_gap(item["values"], item["t"])
                segment = []
            else:
                segment.append(line)
        if segment:
            raise CorruptStore(f"{path}: trailing segment without checksum")
        if repo is None:
            raise CorruptStore(f"{path}: empty store")
        repo._saved_path = path
        repo._saved_lines = len(repo._journal)
        return repo

    def export_labeled_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            k = len(self.ranges.bounds)
            w.writerow(["id", "t", "kind"] + [f"c{j + 1}" for j in range(k)]
                       + [f"s{i + 1}" for i in range(self.d)])
            for r in self.query_labeled():
                w.writerow([r.record_id, r.timestamp, r.kind] + [repr(v) for v in r.context]
                           + [repr(v) for v in r.sensors])

    def export_gaps_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"delta{i + 1}" for i in range(self.d)])
            for t, g in self._gaps:
                w.writerow([t] + [repr(float(v)) for v in g])


def _segment(lines: list[str]) -> str:
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    tail = json.dumps({"type": "checksum", "lines": len(lines), "sha256": digest})
    return "".join(l + "\n" for l in lines) + tail + "\n"

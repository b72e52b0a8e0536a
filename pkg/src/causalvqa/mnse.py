"""Memory bank of scene vectors with exact nearest-neighbor extraction.

The bank stores clip-level scene vectors with provenance and answers
top-k nearest-scene queries by exact full scan. Three refresh regimes:
F1 fills once and freezes; F2 refreshes per batch over a sliding window
of recent batches; F3 is F2 plus the batch's mixup scene rows. Neighbor
sourcing drives the substitution interventions (mnse_do) and their
random baseline (random_do).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .features import VideoQAInstance
from .nn_core import as_f64

Array = np.ndarray

BANK_SNAPSHOT_VERSION = 1


class Metric(str, Enum):
    COSINE = "cosine"
    L2 = "l2"


class Regime(str, Enum):
    F1_STATIC = "f1"
    F2_DYNAMIC = "f2"
    F3_DYNAMIC_MIXUP = "f3"


class Target(str, Enum):
    CAUSAL = "causal"
    COMPLEMENT = "complement"


class RegimeError(RuntimeError):
    """Operation not allowed under the bank's refresh regime."""


class BankEntry(NamedTuple):
    vector: Array  # [bank_dim] float64
    video_id: str
    clip_index: int


class ScoredNeighbor(NamedTuple):
    entry: BankEntry
    score: float  # cosine similarity (higher is closer) or L2 distance (lower is closer)


@dataclass(frozen=True)
class NeighborQuery:
    vector: Array
    k: int = 1
    exclude_video_id: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _entry_excluded(entry: BankEntry, exclude_video_id: str | None) -> bool:
    if exclude_video_id is None:
        return False
    # mixup rows carry compound provenance "a+b"; excluding either parent
    # excludes the blend
    return exclude_video_id in entry.video_id.split("+")


class MemoryBank:
    """Scene store with exact top-k queries and regime-gated refresh."""

    def __init__(
        self,
        bank_dim: int,
        metric: Metric = Metric.COSINE,
        regime: Regime = Regime.F1_STATIC,
        window: int = 8,
    ):
        if bank_dim <= 0:
            raise ValueError("bank_dim must be positive")
        if window < 1:
            raise ValueError("window must be >= 1")
        self.bank_dim = bank_dim
        self.metric = Metric(metric)
        self.regime = Regime(regime)
        self.window = window
        self._base: list[BankEntry] = []
        self._batches: deque[list[BankEntry]] = deque(maxlen=window)
        self._frozen = False
        self._matrix: Array | None = None

    def __len__(self) -> int:
        return len(self._base) + sum(len(b) for b in self._batches)

    def entries(self) -> list[BankEntry]:
        out = list(self._base)
        for batch in self._batches:
            out.extend(batch)
        return out

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _coerce(self, scenes: Iterable[tuple[Array, str, int]]) -> list[BankEntry]:
        out = []
        for vector, video_id, clip_index in scenes:
            v = as_f64(vector)
            if v.shape != (self.bank_dim,):
                raise ValueError(f"scene vector shape {v.shape}, expected ({self.bank_dim},)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"scene vector for {video_id}:{clip_index} is non-finite")
            out.append(BankEntry(v, str(video_id), int(clip_index)))
        return out

    def populate(self, scenes: Iterable[tuple[Array, str, int]]) -> "MemoryBank":
        if self._frozen:
            raise RegimeError("bank is frozen; no further population allowed")
        self._base.extend(self._coerce(scenes))
        self._matrix = None
        return self

    def freeze(self) -> "MemoryBank":
        if self.regime is not Regime.F1_STATIC:
            raise RegimeError(f"freeze applies to the static regime, not {self.regime.value}")
        self._frozen = True
        return self

    def push_batch(
        self,
        scenes: Iterable[tuple[Array, str, int]],
        mixup_scenes: Iterable[tuple[Array, str, int]] | None = None,
    ) -> "MemoryBank":
        """Refresh with one batch; evicts batches older than the window."""
        if self.regime is Regime.F1_STATIC:
            raise RegimeError("per-batch refresh requires a dynamic regime")
        batch = self._coerce(scenes)
        if mixup_scenes is not None:
            if self.regime is not Regime.F3_DYNAMIC_MIXUP:
                raise RegimeError("mixup rows are stored only under the dynamic-mixup regime")
            batch.extend(self._coerce(mixup_scenes))
        self._batches.append(batch)
        self._matrix = None
        return self

    # -- queries -----------------------------------------------------------

    def _scan(self) -> tuple[list[BankEntry], Array]:
        entries = self.entries()
        if self._matrix is None or self._matrix.shape[0] != len(entries):
            self._matrix = (
                np.stack([e.vector for e in entries])
                if entries
                else np.empty((0, self.bank_dim))
            )
        return entries, self._matrix

    def query_knn(self, q: NeighborQuery) -> list[ScoredNeighbor]:
        """Exact top-k by metric; ties broken by (video_id, clip_index)."""
        entries, matrix = self._scan()
        qv = as_f64(q.vector)
        if qv.shape != (self.bank_dim,):
            raise ValueError(f"query vector shape {qv.shape}, expected ({self.bank_dim},)")
        eligible = [
            i for i, e in enumerate(entries) if not _entry_excluded(e, q.exclude_video_id)
        ]
        if q.k > len(eligible):
            raise ValueError(
                f"k={q.k} exceeds {len(eligible)} eligible entries "
                f"(bank size {len(entries)}, excluded video {q.exclude_video_id!r})"
            )
        if self.metric is Metric.COSINE:
            qn = float(np.linalg.norm(qv))
            norms = np.linalg.norm(matrix, axis=1)
            denom = norms * qn
            raw = matrix @ qv
            scores = np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 0)

            def key(i: int):
                return (-scores[i], entries[i].video_id, entries[i].clip_index)

        else:
            scores = np.linalg.norm(matrix - qv, axis=1)

            def key(i: int):
                return (scores[i], entries[i].video_id, entries[i].clip_index)

        top = sorted(eligible, key=key)[: q.k]
        return [ScoredNeighbor(entries[i], float(scores[i])) for i in top]

    def sample_neighbor_scene(self, q: NeighborQuery) -> ScoredNeighbor:
        """Uniform seeded choice among the top-k neighbors."""
        top = self.query_knn(q)
        rng = np.random.default_rng(q.seed)
        return top[int(rng.integers(0, len(top)))]

    # -- snapshot I/O --------------------------------------------------------

    def save(self, manifest_path: str | Path) -> None:
        """Snapshot all current entries (window batches flattened into one list)."""
        manifest_path = Path(manifest_path)
        stem = manifest_path.stem
        entries, matrix = self._scan()
        files = {"vectors": f"{stem}.vectors.f32", "meta": f"{stem}.meta.json"}
        manifest = {
            "version": BANK_SNAPSHOT_VERSION,
            "kind": "memory_bank",
            "count": len(entries),
            "bank_dim": self.bank_dim,
            "metric": self.metric.value,
            "regime": self.regime.value,
            "frozen": self._frozen,
            "window": self.window,
            "files": files,
        }
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        (manifest_path.parent / files["vectors"]).write_bytes(
            matrix.astype("<f4").tobytes()
        )
        (manifest_path.parent / files["meta"]).write_text(
            json.dumps([[e.video_id, e.clip_index] for e in entries])
        )
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, manifest_path: str | Path) -> "MemoryBank":
        manifest_path = Path(manifest_path)
        m = json.loads(manifest_path.read_text())
        if m.get("kind") != "memory_bank" or m.get("version") != BANK_SNAPSHOT_VERSION:
            raise ValueError("not a memory bank snapshot")
        bank = cls(
            bank_dim=m["bank_dim"],
            metric=Metric(m["metric"]),
            regime=Regime(m["regime"]),
            window=m["window"],
        )
        raw = (manifest_path.parent / m["files"]["vectors"]).read_bytes()
        expected = m["count"] * m["bank_dim"] * 4
        if len(raw) != expected:
            raise ValueError(f"vector payload: expected {expected} bytes, found {len(raw)}")
        matrix = (
            np.frombuffer(raw, dtype="<f4").reshape(m["count"], m["bank_dim"]).astype(np.float64)
        )
        meta = json.loads((manifest_path.parent / m["files"]["meta"]).read_text())
        if len(meta) != m["count"]:
            raise ValueError(f"meta lists {len(meta)} entries, manifest count {m['count']}")
        bank._base = [
            BankEntry(matrix[i], str(vid), int(ci)) for i, (vid, ci) in enumerate(meta)
        ]
        bank._frozen = bool(m["frozen"])
        return bank


def instance_scenes(
    instances: Sequence[VideoQAInstance],
) -> list[tuple[Array, str, int]]:
    """Flatten instances into (clip row, video_id, clip_index) scene tuples."""
    out = []
    for inst in instances:
        video = inst.video.astype(np.float64)
        for c in range(inst.n_clips):
            out.append((video[c], inst.video_id, c))
    return out


def _target_rows(causal_mask: Array, target: Target) -> Array:
    mask = np.asarray(causal_mask, dtype=bool)
    return np.flatnonzero(mask if target is Target.CAUSAL else ~mask)


def mnse_do(
    video: Array,
    causal_mask: Array,
    bank: MemoryBank,
    target: Target,
    k: int = 1,
    seed: int = 0,
    exclude_video_id: str | None = None,
) -> Array:
    """Replace target-partition rows with sampled nearest-neighbor scenes.

    Each replaced row issues its own query (query vector = the row being
    replaced); non-target rows are returned bit-identical.
    """
    video = as_f64(video).copy()
    if video.shape[1] != bank.bank_dim:
        raise ValueError(f"video rows have dim {video.shape[1]}, bank dim {bank.bank_dim}")
    for idx in _target_rows(causal_mask, target):
        q = NeighborQuery(
            vector=video[idx],
            k=k,
            exclude_video_id=exclude_video_id,
            seed=seed * 100003 + int(idx),
        )
        video[idx] = bank.sample_neighbor_scene(q).entry.vector
    return video


def random_do(
    video: Array,
    causal_mask: Array,
    bank: MemoryBank,
    target: Target,
    seed: int = 0,
    exclude_video_id: str | None = None,
) -> Array:
    """Baseline intervention: target rows replaced by uniform bank draws."""
    video = as_f64(video).copy()
    if video.shape[1] != bank.bank_dim:
        raise ValueError(f"video rows have dim {video.shape[1]}, bank dim {bank.bank_dim}")
    entries = bank.entries()
    eligible = [e for e in entries if not _entry_excluded(e, exclude_video_id)]
    rows = _target_rows(causal_mask, target)
    if len(rows) and not eligible:
        raise ValueError("no eligible bank entries to draw from")
    rng = np.random.default_rng(seed)
    for idx in rows:
        video[idx] = eligible[int(rng.integers(0, len(eligible)))].vector
    return video

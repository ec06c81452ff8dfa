"""Multi-dataset manifests and the capped, size-weighted dataset sampler."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .frames import FrameRecord

log = logging.getLogger(__name__)

DEFAULT_N_T = 50_000
MANIFEST_VERSION = 1


def effective_count(size: int, n_t: int = DEFAULT_N_T) -> int:
    if size < 0:
        raise ValueError("dataset size must be non-negative")
    return min(size, n_t)


def dataset_probs(sizes, n_t: int = DEFAULT_N_T) -> np.ndarray:
    """P(D_i) = min(|D_i|, N_t) / sum_j min(|D_j|, N_t)."""
    eff = np.array([effective_count(int(s), n_t) for s in sizes], dtype=np.float64)
    total = eff.sum()
    if total <= 0:
        raise ValueError("all datasets are empty")
    return eff / total


@dataclass
class DatasetManifest:
    entries: dict[str, list[FrameRecord]] = field(default_factory=dict)
    n_t: int = DEFAULT_N_T
    seed: int = 0
    root: str = ""

    @classmethod
    def from_records(cls, records, n_t: int = DEFAULT_N_T, seed: int = 0, root: str = "") -> "DatasetManifest":
        entries: dict[str, list[FrameRecord]] = {}
        for r in records:
            entries.setdefault(r.dataset_id, []).append(r)
        return cls(entries, n_t, seed, root)

    @property
    def dataset_ids(self) -> list[str]:
        return sorted(self.entries)

    @property
    def sizes(self) -> list[int]:
        return [len(self.entries[d]) for d in self.dataset_ids]

    def records(self) -> list[FrameRecord]:
        return [r for d in self.dataset_ids for r in self.entries[d]]

    def __len__(self) -> int:
        return sum(self.sizes)

    def filter(self, pred) -> "DatasetManifest":
        return DatasetManifest.from_records([r for r in self.records() if pred(r)], self.n_t, self.seed, self.root)

    def epoch_length(self) -> int:
        return sum(effective_count(s, self.n_t) for s in self.sizes)

    # -- file format ---------------------------------------------------------
    def write(self, path) -> Path:
        """Line-delimited JSON: a header line, then one record per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"kind": "header", "version": MANIFEST_VERSION, "n_t": self.n_t, "seed": self.seed}
        lines = [json.dumps(header, sort_keys=True)]
        for r in self.records():
            d = {k: v for k, v in asdict(r).items() if v not in (None, {}, "") or k in ("dataset_id", "path")}
            lines.append(json.dumps(d, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        header, records = None, []
        for n, line in enumerate(path.read_text().splitlines()):
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("kind") == "header":
                header = obj
                continue
            if "dataset_id" not in obj:
                raise ValueError(f"{path}:{n + 1}: record without dataset_id")
            records.append(FrameRecord(**obj))
        if header is None:
            raise ValueError(f"{path}: missing header line")
        return cls.from_records(records, int(header.get("n_t", DEFAULT_N_T)), int(header.get("seed", 0)),
                                str(path.parent))

    def resolve(self, record: FrameRecord) -> Path:
        return Path(self.root) / record.path


class WeightedSampler:
    """Two-stage draw: dataset by capped size, then a uniform record inside it."""

    def __init__(self, manifest: DatasetManifest, seed: int = 0):
        if len(manifest) == 0:
            raise ValueError("empty manifest")
        self.manifest = manifest
        self.ids = manifest.dataset_ids
        self.probs = dataset_probs(manifest.sizes, manifest.n_t)
        self.rng = np.random.default_rng(seed)

    def next_record(self, rng: np.random.Generator | None = None) -> FrameRecord:
        rng = rng or self.rng
        d = self.ids[int(rng.choice(len(self.ids), p=self.probs))]
        recs = self.manifest.entries[d]
        return recs[int(rng.integers(len(recs)))]

    def draw_indices(self, n: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised draws; returns (dataset index, record index) arrays."""
        rng = rng or self.rng
        ds = rng.choice(len(self.ids), size=n, p=self.probs)
        sizes = np.array(self.manifest.sizes)
        rec = np.floor(rng.random(n) * sizes[ds]).astype(np.int64)
        return ds, rec

    def epoch(self, rng: np.random.Generator | None = None) -> list[FrameRecord]:
        """One epoch: ``sum_j min(|D_j|, N_t)`` draws with replacement."""
        ds, rec = self.draw_indices(self.manifest.epoch_length(), rng)
        return [self.manifest.entries[self.ids[d]][r] for d, r in zip(ds, rec)]


def holdout_split(manifest: DatasetManifest, fraction: float = 0.05, seed: int = 0):
    """Per-dataset proportional split into (train, validation) manifests."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    train, val = [], []
    for i, d in enumerate(manifest.dataset_ids):
        recs = manifest.entries[d]
        if len(recs) < 2:
            log.info("dataset %s has %d record(s); kept wholly in train", d, len(recs))
            train.extend(recs)
            continue
        n_val = min(max(int(round(fraction * len(recs))), 1), len(recs) - 1)
        perm = np.random.default_rng([seed, i]).permutation(len(recs))
        val_idx = set(perm[:n_val].tolist())
        for j, r in enumerate(recs):
            (val if j in val_idx else train).append(r)
    mk = lambda rs: DatasetManifest.from_records(rs, manifest.n_t, manifest.seed, manifest.root)  # noqa: E731
    return mk(train), mk(val)

"""In-memory corpora: synthetic generation, materialisation to disk, loading."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import frames as F
from .frames import FrameRecord
from .sampling import DatasetManifest, WeightedSampler

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    records: list[FrameRecord]
    frames: np.ndarray  # (N, S, S) float32 in [0, 1]
    regions: np.ndarray  # (N, S, S) bool
    labels: np.ndarray  # (N,) int, -1 when unlabelled

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus([self.records[i] for i in idx], self.frames[idx], self.regions[idx], self.labels[idx])

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=np.int64)

    def manifest(self, n_t: int, seed: int = 0) -> DatasetManifest:
        return DatasetManifest.from_records(self.records, n_t, seed)


def _stratified_tags(labels: np.ndarray, fractions, seed: int) -> list[str]:
    names = ("train", "val", "test")
    tags = [""] * len(labels)
    rng = np.random.default_rng([seed, 7])
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        for j, i in enumerate(idx):
            tags[i] = names[0] if j < n_train else names[1] if j < n_train + n_val else names[2]
    return tags


def synthetic_records(count: int, n_classes: int, seed: int = 0, dataset_shares=(0.5, 0.3, 0.2),
                      probe_split=(0.7, 0.15, 0.15)) -> list[FrameRecord]:
    """Balanced labels, per-frame seeds, dataset ids and probe split tags."""
    labels = np.arange(count) % n_classes
    ds_rng = np.random.default_rng([seed, 3])
    ds = ds_rng.choice(len(dataset_shares), size=count, p=np.asarray(dataset_shares) / np.sum(dataset_shares))
    tags = _stratified_tags(labels, probe_split, seed)
    return [
        FrameRecord(dataset_id=f"synth{int(ds[i])}", path=f"frames/{i:06d}.png", label=int(labels[i]),
                    mask_path=f"frames/{i:06d}.mask.png", seed=int(seed * 1_000_003 + i), split=tags[i])
        for i in range(count)
    ]


def _render(args):
    label, s, size, n_classes, rescale = args
    f, r, _ = F.synth_frame(label, s, size, n_classes)
    if rescale:
        f = F.percentile_rescale(f, r)
    return f.astype(np.float32), r


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=32))


def synthetic_corpus(count: int, n_classes: int = 3, size: int = 64, seed: int = 0, workers: int = 1,
                     preprocess: bool = True, **kw) -> Corpus:
    """Generate ``count`` labelled synthetic frames.

    With ``preprocess`` the frames are percentile-rescaled inside their
    ground-truth region, as the loader would do for files on disk.
    """
    recs = synthetic_records(count, n_classes, seed, **kw)
    out = _map(_render, [(r.label, r.seed, size, n_classes, preprocess) for r in recs], workers)
    frames = np.stack([o[0] for o in out])
    regions = np.stack([o[1] for o in out])
    return Corpus(recs, frames, regions, np.array([r.label for r in recs]))


def write_corpus(corpus: Corpus, root, n_t: int, seed: int = 0) -> Path:
    """Rasters, 1-bit masks and ``manifest.jsonl`` under ``root``."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for rec, f, r in zip(corpus.records, corpus.frames, corpus.regions):
        F.write_raster(root / rec.path, f)
        F.write_mask(root / rec.mask_path, r)
    return corpus.manifest(n_t, seed).write(root / "manifest.jsonl")


def _load_one(args):
    root, rec, size = args
    img = F.read_raster(Path(root) / rec.path)
    region = None
    if rec.mask_path and (Path(root) / rec.mask_path).exists():
        region = F.read_mask(Path(root) / rec.mask_path)
    f, r = F.preprocess(img, size, region)
    return f.astype(np.float32), r


def load_corpus(manifest: DatasetManifest, size: int, workers: int = 1) -> Corpus:
    """Load and preprocess every record, reusing cached region masks when present."""
    recs = manifest.records()
    out = _map(_load_one, [(manifest.root, r, size) for r in recs], workers)
    frames = np.stack([o[0] for o in out])
    regions = np.stack([o[1] for o in out])
    labels = np.array([-1 if r.label is None else r.label for r in recs])
    return Corpus(recs, frames, regions, labels)


def preprocess_corpus(manifest: DatasetManifest, out_root, size: int, workers: int = 1) -> DatasetManifest:
    """Run the full preprocessing pipeline on raw rasters and cache the results."""
    out_root = Path(out_root)
    (out_root / "frames").mkdir(parents=True, exist_ok=True)
    recs = manifest.records()
    out = _map(_preprocess_one, [(manifest.root, r, size) for r in recs], workers)
    new = []
    for i, (rec, res) in enumerate(zip(recs, out)):
        if res is None:
            log.info("record %s rejected: empty region", rec.path)
            continue
        f, r = res
        path = f"frames/{i:06d}.png"
        F.write_raster(out_root / path, f)
        F.write_mask(out_root / F.mask_path_for(path), r)
        new.append(FrameRecord(rec.dataset_id, path, rec.label, str(F.mask_path_for(path)), rec.seed, rec.split))
    m = DatasetManifest.from_records(new, manifest.n_t, manifest.seed, str(out_root))
    m.write(out_root / "manifest.jsonl")
    return m


def _preprocess_one(args):
    root, rec, size = args
    try:
        return F.preprocess(F.read_raster(Path(root) / rec.path), size)
    except F.EmptyRegionError:
        return None


def index_sampler(corpus: Corpus, idx: np.ndarray, n_t: int, seed: int = 0):
    """Callable ``rng -> indices into corpus`` drawing one capped, weighted epoch."""
    sub = corpus.subset(idx)
    manifest = DatasetManifest.from_records(sub.records, n_t, seed)
    sampler = WeightedSampler(manifest, seed)
    pos = {id(r): int(i) for r, i in zip(sub.records, idx)}
    flat = [pos[id(r)] for r in manifest.records()]
    offsets = np.concatenate([[0], np.cumsum(manifest.sizes)[:-1]])

    def draw(rng: np.random.Generator) -> np.ndarray:
        ds, rec = sampler.draw_indices(manifest.epoch_length(), rng)
        return np.asarray(flat)[offsets[ds] + rec]

    return draw

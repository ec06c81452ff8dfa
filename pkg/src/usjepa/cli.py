"""Command-line entry points: ``usjepa <subcommand> [flags]``.

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as CFG
from . import corruption as C
from . import data as D
from . import evaluation as E
from . import frames as F
from .masking import MaskRejected, render_overlay
from .model import Encoder, ModelStack, model_card
from .numerics.checkpoint import file_sha256, load_checkpoint
from .objective import Trainer, config_hash
from .sampling import DatasetManifest, holdout_split

log = logging.getLogger("usjepa")

SUBCOMMANDS = ("synth-data", "preprocess", "pretrain", "probe", "fewshot", "corrupt-sweep", "mask-viz", "report")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("run", "seed", args.seed)
    put("run", "workers", args.workers)
    put("teacher", "source", args.teacher)
    put("teacher", "mode", args.teacher_mode)
    put("loss", "kind", args.loss)
    put("masking", "usrc", None if args.usrc is None else args.usrc == "on")
    put("data", "classes", args.classes)
    put("data", "count", args.count)
    put("data", "manifest", args.manifest)
    return o


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
                           "msg": record.getMessage()})


def _setup_logging(out: Path | None, verbose: bool) -> None:
    root = logging.getLogger("usjepa")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(levelname)s %(name)s %(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    root.addHandler(h)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "run.log", mode="w")
        fh.setFormatter(_JsonFormatter())
        root.addHandler(fh)


def corpus_for(cfg: dict) -> D.Corpus:
    d = cfg["data"]
    workers = cfg["run"]["workers"]
    if d["manifest"]:
        return D.load_corpus(DatasetManifest.read(d["manifest"]), d["size"], workers)
    return D.synthetic_corpus(d["count"], d["classes"], d["size"], d["seed"], workers)


def pretrain_split(corpus: D.Corpus, cfg: dict) -> tuple[np.ndarray, np.ndarray]:
    """Indices for pretraining and its holdout; probe test frames are never seen."""
    usable = [i for i, r in enumerate(corpus.records) if r.split != "test"]
    sub = corpus.subset(usable)
    man = DatasetManifest.from_records(sub.records, cfg["data"]["n_t"], cfg["run"]["seed"])
    train_m, val_m = holdout_split(man, cfg["data"]["holdout"], cfg["run"]["seed"])
    pos = {id(r): usable[j] for j, r in enumerate(sub.records)}
    tr = np.array(sorted(pos[id(r)] for r in train_m.records()), dtype=np.int64)
    va = np.array(sorted(pos[id(r)] for r in val_m.records()), dtype=np.int64)
    return tr, va


def load_encoder(cfg: dict, checkpoint: str | None) -> Encoder:
    """Student encoder from a checkpoint, or a seeded random initialisation."""
    enc_cfg = CFG.encoder_config(cfg)
    enc = Encoder(enc_cfg, np.random.default_rng([cfg["run"]["seed"], 0]))
    if checkpoint and checkpoint != "random":
        arrays, _ = load_checkpoint(checkpoint)
        sub = {k[len("student."):]: v for k, v in arrays.items() if k.startswith("student.")}
        if not sub:
            raise ValueError(f"{checkpoint}: no student weights")
        enc.load_state_dict(sub)
    enc.freeze()
    return enc


def _splits(corpus: D.Corpus) -> np.ndarray:
    return np.array([r.split for r in corpus.records])


def _labelled(corpus: D.Corpus) -> D.Corpus:
    keep = np.flatnonzero(corpus.labels >= 0)
    if len(keep) == 0:
        raise ValueError("no labelled records for probing")
    return corpus.subset(keep)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(cfg: dict, args) -> None:
    d = cfg["data"]
    corpus = D.synthetic_corpus(d["count"], d["classes"], d["size"], cfg["run"]["seed"], cfg["run"]["workers"],
                                preprocess=False)
    path = D.write_corpus(corpus, args.out, d["n_t"], cfg["run"]["seed"])
    log.info("wrote %d records to %s", len(corpus), path)


def cmd_preprocess(cfg: dict, args) -> None:
    if not cfg["data"]["manifest"]:
        raise CFG.ConfigError("preprocess needs --manifest or data.manifest")
    m = DatasetManifest.read(cfg["data"]["manifest"])
    out = D.preprocess_corpus(m, args.out, cfg["data"]["size"], cfg["run"]["workers"])
    log.info("preprocessed %d of %d records", len(out), len(m))


def cmd_pretrain(cfg: dict, args) -> None:
    out = Path(args.out)
    seed = cfg["run"]["seed"]
    corpus = corpus_for(cfg)
    tr, va = pretrain_split(corpus, cfg)
    stack = ModelStack(CFG.encoder_config(cfg), CFG.predictor_config(cfg), CFG.teacher_mode(cfg), seed)
    teacher_before = stack.teacher_hash()
    trainer = Trainer(stack, CFG.mask_sampler(cfg), CFG.optimizer_config(cfg), CFG.loss_config(cfg),
                      batch_size=cfg["optim"]["batch_size"], epochs=cfg["optim"]["epochs"], seed=seed, out_dir=out,
                      config=cfg)
    (out / "config.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(CFG.dump(cfg) + "\n")
    sampler = D.index_sampler(corpus, tr, cfg["data"]["n_t"], seed)
    state = trainer.fit(corpus.frames, corpus.regions, sampler, corpus.frames[va], corpus.regions[va])
    if cfg["teacher"]["mode"] == "static" and stack.teacher_hash() != teacher_before:
        raise RuntimeError("static teacher weights changed during training")
    final = out / "checkpoints" / f"epoch_{state.epoch:03d}.ckpt"
    summary = {
        "config_hash": config_hash(cfg),
        "epochs": state.epoch,
        "steps": state.step,
        "val_loss": state.val_history,
        "best_epoch": state.best_epoch,
        "fallback_frames": state.fallbacks,
        "teacher_sha256": stack.teacher_hash(),
        "final_checkpoint": final.name,
        "final_sha256": file_sha256(final),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "model_card.txt").write_text(model_card(stack, seed, {"config_hash": summary["config_hash"]}))
    log.info("pretraining done: val %.6f -> %.6f", state.val_history[0], state.val_history[-1])


def _feature_table(cfg: dict, args) -> tuple[D.Corpus, Encoder, E.FeatureTable]:
    corpus = _labelled(corpus_for(cfg))
    enc = load_encoder(cfg, args.checkpoint)
    table = E.extract_features(enc, corpus.frames, corpus.labels, _splits(corpus))
    return corpus, enc, table


def _seeds(cfg: dict) -> list[int]:
    base = cfg["run"]["seed"]
    return [base + i for i in range(cfg["probe"]["seeds"])]


def cmd_probe(cfg: dict, args) -> None:
    _, enc, table = _feature_table(cfg, args)
    before = enc.weights_hash()
    rep = E.linear_probe_report(table, _seeds(cfg), CFG.probe_config(cfg), task=args.task)
    if enc.weights_hash() != before:
        raise RuntimeError("backbone weights changed during probing")
    out = Path(args.out)
    E.write_csv([rep], out / "probe.csv")
    (out / "probe.md").write_text(E.markdown_summary([rep]))
    log.info("probe macro-F1 %.4f +- %.4f", rep.mean, rep.std)


def cmd_fewshot(cfg: dict, args) -> None:
    _, _, table = _feature_table(cfg, args)
    reps = E.fewshot_curve(table, cfg["probe"]["fractions"], _seeds(cfg), CFG.probe_config(cfg), task=args.task)
    out = Path(args.out)
    E.write_csv(reps, out / "fewshot.csv")
    (out / "fewshot.md").write_text(E.markdown_summary(reps))


def cmd_corrupt_sweep(cfg: dict, args) -> None:
    corpus = _labelled(corpus_for(cfg))
    enc = load_encoder(cfg, args.checkpoint)
    out = Path(args.out)
    kinds = tuple(args.kinds.split(",")) if args.kinds else C.KINDS
    reps = E.robustness_sweep(enc, corpus.frames, corpus.regions, corpus.labels, _splits(corpus), kinds,
                              seeds=_seeds(cfg), cfg=CFG.probe_config(cfg), task=args.task)
    E.write_csv(reps, out / "sweep.csv")
    (out / "sweep.md").write_text(E.markdown_summary(reps))
    for i in range(min(args.gallery, len(corpus))):
        F.write_raster(out / "gallery" / f"frame_{i:03d}.png", C.gallery(corpus.frames[i], corpus.regions[i], seed=i))


def cmd_mask_viz(cfg: dict, args) -> None:
    corpus = corpus_for(cfg)
    sampler = CFG.mask_sampler(cfg)
    out = Path(args.out) / "masks"
    out.mkdir(parents=True, exist_ok=True)
    for i in range(min(args.frames, len(corpus))):
        try:
            ms = sampler.sample(corpus.regions[i], np.random.default_rng([cfg["run"]["seed"], i]))
        except MaskRejected:
            log.info("frame %d: no mask", i)
            continue
        Image.fromarray(render_overlay(corpus.frames[i], ms, sampler.grid)).save(out / f"frame_{i:03d}.png")
    log.info("fallback rate %.4f", sampler.fallback_rate)


def cmd_report(cfg: dict, args) -> None:
    root = Path(args.out)
    reps = []
    for path in sorted(root.rglob("*.csv")):
        reps.extend(E.read_csv(path))
    if not reps:
        raise FileNotFoundError(f"no result CSVs under {root}")
    (root / "report.md").write_text(E.markdown_summary(reps))
    sys.stdout.write(E.markdown_summary(reps))


HANDLERS = {
    "synth-data": cmd_synth_data,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "corrupt-sweep": cmd_corrupt_sweep,
    "mask-viz": cmd_mask_viz,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usjepa", description="Region-conditioned JEPA pretraining and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--workers", type=int)
        s.add_argument("--teacher", help="random | snapshot:PATH | checkpoint:PATH")
        s.add_argument("--teacher-mode", choices=("static", "ema"))
        s.add_argument("--usrc", choices=("on", "off"))
        s.add_argument("--loss", choices=("smooth_l1", "l1"))
        s.add_argument("--classes", type=int)
        s.add_argument("--count", type=int)
        s.add_argument("--manifest", help="dataset manifest (JSONL)")
        s.add_argument("--checkpoint", help="checkpoint with student weights, or 'random'")
        s.add_argument("--task", default="synthetic")
        s.add_argument("--kinds", help="comma-separated corruption kinds")
        s.add_argument("--gallery", type=int, default=0, help="number of frames to render as corruption grids")
        s.add_argument("--frames", type=int, default=8, help="frames to render (mask-viz)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    try:
        cfg = CFG.load_config(args.config, _overrides(args))
        if cfg["data"]["manifest"] and args.config and not args.manifest:
            cfg["data"]["manifest"] = CFG.resolve_path(args.config, cfg["data"]["manifest"])
        kind, sep, path = cfg["teacher"]["source"].partition(":")
        if sep and args.config and not args.teacher:
            cfg["teacher"]["source"] = f"{kind}:{CFG.resolve_path(args.config, path)}"
    except CFG.ConfigError as e:
        log.error("config error: %s", e)
        return 2
    try:
        HANDLERS[args.command](cfg, args)
    except CFG.ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except Exception as e:  # noqa: BLE001
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

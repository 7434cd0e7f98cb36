"""Command-line entry point.

Subcommands: gen-data, train, eval, viz, verify. Every command is
deterministic under a fixed --seed; run directories carry a JSON manifest
listing the config hash, seed, code version and every produced artifact.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, agents, corpus, evalsuite, game, verify
from .tensor import Tensor


class UsageError(Exception):
    """Bad flags, bad config, missing input file: exit code 2."""


EVAL_SELECTORS = ("comm", "knn", "bow", "topo", "stats", "dropcurve")


# -- manifest -----------------------------------------------------------------

class RunManifest:
    def __init__(self, command: str, seed: int, config_hash: str = ""):
        self.data = {
            "command": command,
            "seed": seed,
            "config_hash": config_hash,
            "code_version": __version__,
            "started": _now(),
            "finished": None,
            "artifacts": [],
        }

    def add(self, path) -> Path:
        self.data["artifacts"].append(str(path))
        return Path(path)

    def write(self, out_dir: Path):
        self.data["finished"] = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


# -- shared helpers -------------------------------------------------------------

def _read_text(path, what: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p.read_text()


def _load_corpus(path) -> corpus.Corpus:
    if not Path(path).is_file():
        raise UsageError(f"corpus file not found: {path}")
    return corpus.load(path)


def _parse_corpus_spec(text: str) -> corpus.CorpusSpec:
    fields = {f.name: f.type for f in dataclasses.fields(corpus.CorpusSpec)}
    kw = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise UsageError(f"line {ln}: unknown corpus spec key {key!r}")
        kw[key] = int(value)
    return corpus.CorpusSpec(**kw)


def _load_model(ckpt_path):
    """Rebuild (cfg, spec, speaker, listener) from a training checkpoint."""
    if not Path(ckpt_path).is_file():
        raise UsageError(f"checkpoint file not found: {ckpt_path}")
    arrays, meta = agents.load_checkpoint(ckpt_path)
    if "config" not in meta:
        raise UsageError(f"checkpoint {ckpt_path} carries no config")
    cfg = game.parse_config(meta["config"])
    sp, li = {}, {}
    for name, arr in arrays.items():
        scope, _, key = name.partition(".")
        if scope == "speaker":
            sp[key] = Tensor(arr, requires_grad=False)
        elif scope == "listener":
            li[key] = Tensor(arr, requires_grad=False)
    return cfg, sp, li


def _grid_spec(cfg: game.GameConfig, corp: corpus.Corpus) -> agents.PatchGridSpec:
    return agents.PatchGridSpec(corp.spec.channels, corp.spec.height,
                                corp.spec.width, cfg.patch)


def _write_json(path: Path, obj) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        raise TypeError(f"not JSON serializable: {type(o)}")

    path.write_text(json.dumps(obj, indent=2, default=default, sort_keys=True) + "\n")


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = _parse_corpus_spec(_read_text(args.config, "corpus spec"))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    corp = corpus.generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save(corp, out)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    print(f"wrote {len(corp)} images to {out} (sha256 {digest[:16]})")
    return 0


def cmd_train(args) -> int:
    try:
        cfg = game.parse_config(_read_text(args.config, "config"))
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    corp = _load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.seed, agents.config_hash(cfg.to_text()))
    manifest.add(out / "config.txt").write_text(cfg.to_text())

    def progress(row):
        print(f"epoch {row['epoch']:4d}  loss {row['loss']:.4f}  "
              f"top1 {row['top1']:.3f}  lr {row['lr']:.4f}  "
              f"tau_s {row['tau_s']:.3f}  {row['seconds']:.1f}s", flush=True)

    log, _, _ = game.train_loop(corp, cfg, out_dir=out, resume=args.resume,
                                progress=progress)
    manifest.add(out / "trainlog.csv")
    for ck in sorted(out.glob("ckpt_epoch*.bin")):
        manifest.add(ck)
    manifest.write(out)
    print(f"final top1 {log.rows[-1]['top1']:.3f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    which = [w.strip() for w in args.which.split(",")]
    if "all" in which:
        which = list(EVAL_SELECTORS)
    for w in which:
        if w not in EVAL_SELECTORS:
            raise UsageError(f"unknown selector {w!r}; valid: "
                             + ", ".join([*EVAL_SELECTORS, "all"]))
    cfg, sp, li = _load_model(args.checkpoint)
    corp = _load_corpus(args.corpus)
    spec = _grid_spec(cfg, corp)
    arch = cfg.arch()
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", seed, agents.config_hash(cfg.to_text()))
    train, val = corpus.split(corp, 0.2, seed)
    tau_s = cfg.temp_end

    def rng(tag):
        return np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1, tag)))

    results = {}
    for w in which:
        if w == "comm":
            results[w] = evalsuite.comm_success(sp, li, val, spec, cfg,
                                                trials=20, rng=rng(0))
        elif w == "knn":
            results[w] = evalsuite.knn_eval(evalsuite.extract_features(train, li),
                                            evalsuite.extract_features(val, li))
        elif w == "bow":
            tr_docs = evalsuite.speak_corpus(train, sp, spec, arch,
                                             cfg.rank_epsilon, tau_s, rng(1))
            va_docs = evalsuite.speak_corpus(val, sp, spec, arch,
                                             cfg.rank_epsilon, tau_s, rng(1))
            results[w] = evalsuite.bow_classify(tr_docs, train.labels,
                                                va_docs, val.labels, arch.vocab)
        elif w == "topo":
            n = min(12, int(np.bincount(corp.labels).min()))
            _, results[w] = evalsuite.topographic_similarity(
                sp, corp, spec, arch, cfg.rank_epsilon, tau_s, n, rng(2))
        elif w == "stats":
            docs = evalsuite.speak_corpus(corp, sp, spec, arch,
                                          cfg.rank_epsilon, tau_s, rng(3))
            results[w] = {**evalsuite.message_stats(docs),
                          **evalsuite.symbol_frequency(docs, arch.vocab)}
        elif w == "dropcurve":
            clf = evalsuite.train_patch_classifier(train, spec, rng(4))
            k = spec.num_patches
            results[w] = evalsuite.patch_drop_curve(
                clf, sp, val, spec, [k // 4, k // 2, k], rng(5))
    for w, res in results.items():
        path = manifest.add(out / f"eval_{w}.json")
        _write_json(path, res)
        print(f"{w}: {json.loads(path.read_text())}")
    manifest.write(out)
    return 0


def cmd_viz(args) -> int:
    cfg, sp, li = _load_model(args.checkpoint)
    corp = _load_corpus(args.corpus)
    spec = _grid_spec(cfg, corp)
    arch = cfg.arch()
    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x512)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("viz", seed, agents.config_hash(cfg.to_text()))

    if args.mode == "heatmaps":
        idx = rng.choice(len(corp), size=min(args.n, len(corp)), replace=False)
        scores = agents.patch_importance(corp.pixels[idx], sp, spec).data
        for row, i in enumerate(idx):
            path = manifest.add(out / f"heatmap_{int(corp.ids[i]):05d}.png")
            evalsuite.heatmap_render(corp.pixels[i], scores[row], path)
    else:  # symbols
        idx = rng.choice(len(corp), size=min(256, len(corp)), replace=False)
        msg = agents.speak(corp.pixels[idx], sp, spec, arch,
                           cfg.rank_epsilon, cfg.temp_end, rng)
        sub = corp.subset(idx)
        for sym in range(arch.vocab):
            gallery = evalsuite.symbol_gallery(msg.symbol_ids(), msg.keep_mask,
                                               sub, spec, sym, rng=rng)
            if gallery is None:
                print(f"warning: symbol {sym} never emitted, skipping",
                      file=sys.stderr)
                continue
            path = manifest.add(out / f"symbol_{sym:03d}.png")
            evalsuite.save_gallery(gallery, path)
    manifest.write(out)
    print(f"{len(manifest.data['artifacts'])} files -> {out}")
    return 0


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = verify.run_report(seed)
    failed = 0
    for name, passed, value in rows:
        status = "PASS" if passed else "FAIL"
        print(f"[{status}] {name}: {value}")
        failed += not passed
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 1 if failed else 0


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchcomm")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a labeled toy corpus")
    p.add_argument("--config", required=True, help="corpus spec file (key = value)")
    p.add_argument("--out", required=True, help="output corpus file")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train speaker and listener")
    p.add_argument("--config", required=True, help="game config file (key = value)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint in --out")
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run evaluation protocols on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--which", default="all",
                   help="comma list of " + ",".join(EVAL_SELECTORS) + " or all")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render heatmaps or symbol galleries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("heatmaps", "symbols"), required=True)
    p.add_argument("--n", type=int, default=8, help="heatmap sample count")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("verify", help="run the oracle and gradient check suite")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - single process boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

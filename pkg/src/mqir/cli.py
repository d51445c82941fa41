"""Command line interface: gen-data, train, eval, ablate, grid, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .data import (Dataset, SyntheticConfig, SyntheticWorld, Vocabulary,
                   load_dataset, render_schematic, save_dataset)
from .evaluation import (count_parameters, default_ablation_grid, evaluate,
                         format_report, run_ablation)
from .model import ModelConfig, with_temperatures
from .training import TrainConfig, train_model

SPLITS = ("train", "val", "test")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = yaml.safe_load(Path(path).read_text())
    return cfg or {}


def _cfg_get(cfg: dict, dotted: str, default=None):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _pick(cli_value, cfg: dict, dotted: str, default):
    """CLI flag wins over config file value wins over built-in default."""
    if cli_value is not None:
        return cli_value
    return _cfg_get(cfg, dotted, default)


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def load_data_dir(root) -> tuple[Vocabulary, dict[str, Dataset]]:
    root = Path(root)
    vocab = Vocabulary.load(root / "vocab.txt")
    splits = {}
    for split in SPLITS:
        manifest = root / split / "manifest.json"
        if manifest.exists():
            splits[split] = load_dataset(manifest, vocab)
    if not splits:
        raise FileNotFoundError(f"no split manifests under {root}")
    return vocab, splits


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        num_scenes=args.scenes, num_regions=args.regions,
        num_queries=args.queries, feature_dim=args.feature_dim,
        colors=args.colors, objects=args.objects, positions=args.positions,
        noise=args.noise, seed=args.seed)
    world = SyntheticWorld(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world.vocab.save(out / "vocab.txt")
    counts = {"train": args.scenes, "val": args.val_scenes,
              "test": args.test_scenes}
    for split, n in counts.items():
        if n <= 0:
            continue
        ds = world.generate_split(split, n)
        save_dataset(ds, out / split)
        if args.thumbnails:
            thumb_dir = out / split / "thumbs"
            thumb_dir.mkdir(exist_ok=True)
            for rec in ds.records:
                render_schematic(rec, thumb_dir / f"{rec.image_id}.png")
        print(f"wrote {split}: {n} scenes")
    (out / "meta.json").write_text(json.dumps(
        {"config": cfg.__dict__, "splits": counts}, indent=1))
    print(f"vocabulary: {len(world.vocab)} tokens -> {out / 'vocab.txt'}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config_from(args, cfg: dict, direction: str) -> TrainConfig:
    return TrainConfig(
        direction=direction,
        alpha=_pick(args.alpha, cfg, "alpha", 0.4),
        beta=_pick(args.beta, cfg, "beta", 0.4),
        tau=_pick(args.tau, cfg, "tau", 40.0),
        epochs=_pick(args.epochs, cfg, "epochs", 150),
        batch_size=_pick(args.batch_size, cfg, "batch_size", 128),
        lr=_pick(args.lr, cfg, "lr.base", 4e-4),
        lr_drop_epoch=_pick(args.lr_drop_epoch, cfg, "lr.drop_epoch", None),
        lr_drop_factor=_pick(None, cfg, "lr.drop_factor", 0.1),
        seed=_pick(args.seed, cfg, "seed", 0),
        eval_every=_pick(args.eval_every, cfg, "eval_every", 1),
        val_rounds=_pick(None, cfg, "val_rounds", None),
    )


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    data_root = _pick(args.data, cfg, "data.root", None)
    if not data_root:
        print("error: --data (or data.root in the config) is required",
              file=sys.stderr)
        return 2
    vocab, splits = load_data_dir(data_root)
    train_ds = splits["train"]
    val_ds = splits.get("val")
    feature_dim = train_ds.records[0].regions.feature_dim
    model_cfg = ModelConfig(
        vocab_size=len(vocab), feature_dim=feature_dim,
        word_dim=_pick(args.word_dim, cfg, "dims.E", 300),
        embed_dim=_pick(args.embed_dim, cfg, "dims.D", 256),
        lambda1=_pick(args.lambda1, cfg, "lambda1", 5.0),
        lambda2=_pick(args.lambda2, cfg, "lambda2", 15.0),
        vr_steps=_pick(args.vr_steps, cfg, "vr.steps", 3),
        intra_mode=_pick(args.intra_mode, cfg, "vr.intra_mode", "sub"),
    )
    direction = _pick(args.direction, cfg, "direction", "both")
    out = Path(_pick(args.out, cfg, "out", "checkpoints"))
    out.mkdir(parents=True, exist_ok=True)
    directions = ("it", "ti") if direction == "both" else (direction,)
    for d in directions:
        tc = _train_config_from(args, cfg, d)
        print(f"training direction={d} for {tc.epochs} epochs "
              f"on {len(train_ds)} records")
        result = train_model(model_cfg, tc, train_ds, val_ds,
                             log=lambda row: print(
                                 "  " + " ".join(f"{k}={v}" for k, v in row.items())))
        path = save_checkpoint(
            result.model, out / f"{d}.npz", direction=d,
            vocab_hash=vocab.content_hash(), alpha=tc.alpha, beta=tc.beta,
            tau=tc.tau, extra={"train": tc.to_dict(),
                               "best_epoch": result.best_epoch,
                               "best_val": result.best_val})
        counts = count_parameters(result.model)
        print(f"saved {path} (best epoch {result.best_epoch}, "
              f"params {counts['total']})")
        (out / f"{d}-history.json").write_text(json.dumps(result.history, indent=1))
    return 0


# ---------------------------------------------------------------------------
# eval / grid
# ---------------------------------------------------------------------------

def _load_models(args) -> tuple[dict, str, dict]:
    models, hashes, meta = {}, [], {}
    for d, path in (("it", args.checkpoint_it), ("ti", args.checkpoint_ti)):
        if path:
            bundle = load_checkpoint(path)
            models[d] = bundle.model
            hashes.append(bundle.file_hash)
            meta[d] = bundle.meta
    if args.checkpoint_joint:
        bundle = load_checkpoint(args.checkpoint_joint)
        models["it"] = models["ti"] = bundle.model
        hashes = [bundle.file_hash]
        meta["joint"] = bundle.meta
    if not models:
        raise SystemExit("no checkpoints given")
    return models, "+".join(hashes), meta


def _add_checkpoint_args(p):
    p.add_argument("--checkpoint-it")
    p.add_argument("--checkpoint-ti")
    p.add_argument("--checkpoint-joint")


def cmd_eval(args) -> int:
    models, _, meta = _load_models(args)
    vocab, splits = load_data_dir(args.data)
    ds = splits[args.split]
    any_meta = next(iter(meta.values()))
    alpha = args.alpha if args.alpha is not None else any_meta["alpha"]
    beta = args.beta if args.beta is not None else any_meta["beta"]
    mode = args.mode or ("ensemble" if len(models) == 2 else next(iter(models)))
    report = evaluate(models, ds, mode=mode, alpha=alpha, beta=beta,
                      rounds=args.rounds, max_records=args.limit)
    text = format_report(report, fmt=args.format)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_grid(args) -> int:
    models, _, meta = _load_models(args)
    vocab, splits = load_data_dir(args.data)
    ds = splits[args.split]
    any_meta = next(iter(meta.values()))
    lambda1s = _parse_floats(args.lambda1) if args.lambda1 else [1, 5, 10, 15, 20]
    lambda2s = _parse_floats(args.lambda2) if args.lambda2 else [1, 5, 10, 15, 20]
    alphas = _parse_floats(args.alphas) if args.alphas else [any_meta["alpha"]]
    betas = _parse_floats(args.betas) if args.betas else [any_meta["beta"]]
    mode = args.mode or ("ensemble" if len(models) == 2 else next(iter(models)))
    header = ["lambda1", "lambda2", "alpha", "beta",
              "avg_r1", "avg_r5", "avg_r10", "avg_rsum", "avg_mr"]
    print(",".join(header))
    rows = 0
    for l1 in lambda1s:
        for l2 in lambda2s:
            swapped = {d: with_temperatures(m, l1, l2)
                       for d, m in models.items()}
            for a in alphas:
                for b in betas:
                    report = evaluate(swapped, ds, mode=mode, alpha=a, beta=b,
                                      rounds=args.rounds, max_records=args.limit)
                    print(",".join([f"{l1:g}", f"{l2:g}", f"{a:g}", f"{b:g}",
                                    f"{report.avg_recalls[1]:.2f}",
                                    f"{report.avg_recalls[5]:.2f}",
                                    f"{report.avg_recalls[10]:.2f}",
                                    f"{report.avg_rsum:.2f}",
                                    f"{report.avg_mr:.2f}"]))
                    rows += 1
    print(f"# {rows} rows", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    cfg = _read_config(args.config)
    vocab, splits = load_data_dir(args.data)
    if "test" not in splits:
        raise SystemExit("ablation needs a test split")
    feature_dim = splits["train"].records[0].regions.feature_dim
    model_cfg = ModelConfig(
        vocab_size=len(vocab), feature_dim=feature_dim,
        word_dim=_pick(args.word_dim, cfg, "dims.E", 300),
        embed_dim=_pick(args.embed_dim, cfg, "dims.D", 256),
        lambda1=_pick(args.lambda1, cfg, "lambda1", 5.0),
        lambda2=_pick(args.lambda2, cfg, "lambda2", 15.0),
        vr_steps=_pick(args.vr_steps, cfg, "vr.steps", 3),
        intra_mode=_pick(args.intra_mode, cfg, "vr.intra_mode", "sub"))
    train_cfg = _train_config_from(args, cfg, "it")
    grid = default_ablation_grid()
    if args.grid_file:
        from .evaluation import AblationSpec
        spec_rows = json.loads(Path(args.grid_file).read_text())
        grid = [AblationSpec(**row) for row in spec_rows]
    rows = run_ablation(model_cfg, train_cfg, splits["train"], splits.get("val"),
                        splits["test"], grid=grid, rounds=args.rounds,
                        log=lambda row: print(f"# done {row['name']}",
                                              file=sys.stderr))
    header = ["name", "mode", "use_it", "use_ti", "use_g", "use_r",
              "avg_r1", "avg_r5", "avg_r10", "avg_rsum", "avg_mr"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) if not isinstance(row[h], float)
                              else f"{row[h]:.2f}" for h in header))
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def cmd_serve(args) -> int:
    import uvicorn

    from .service import RetrievalService, create_app

    models, combined_hash, meta = _load_models(args)
    vocab = Vocabulary.load(args.vocab)
    for m in meta.values():
        if m["vocab_hash"] != vocab.content_hash():
            raise SystemExit("vocabulary hash does not match checkpoint")
    any_meta = next(iter(meta.values()))
    service = RetrievalService(
        models, vocab, combined_hash,
        alpha=args.alpha if args.alpha is not None else any_meta["alpha"],
        beta=args.beta if args.beta is not None else any_meta["beta"],
        default_mode=args.mode or ("ensemble" if len(models) == 2
                                   else next(iter(models))),
        top_k=args.top_k)
    if args.gallery:
        manifest = Path(args.gallery)
        dataset = load_dataset(manifest, vocab)
        thumbs = {}
        thumb_dir = (manifest.parent if manifest.is_file() else manifest) / "thumbs"
        if thumb_dir.is_dir():
            thumbs = {p.stem: str(p) for p in thumb_dir.glob("*.png")}
        service.add_gallery(args.gallery_id, dataset, thumbs)
        print(f"gallery '{args.gallery_id}': {len(dataset)} images")
    app = create_app(service, dataset_loader=lambda p: load_dataset(p, vocab),
                     ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mqir", description="multi-query image retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=2000)
    p.add_argument("--val-scenes", type=int, default=200)
    p.add_argument("--test-scenes", type=int, default=500)
    p.add_argument("--regions", type=int, default=8)
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=36)
    p.add_argument("--colors", type=int, default=5)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--positions", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--thumbnails", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one or both directions")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--direction", choices=["both", "it", "ti", "joint"])
    for flag, typ in [("--alpha", float), ("--beta", float), ("--tau", float),
                      ("--lambda1", float), ("--lambda2", float),
                      ("--epochs", int), ("--batch-size", int), ("--lr", float),
                      ("--lr-drop-epoch", int), ("--seed", int),
                      ("--eval-every", int), ("--word-dim", int),
                      ("--embed-dim", int), ("--vr-steps", int)]:
        p.add_argument(flag, type=typ)
    p.add_argument("--intra-mode", choices=["sub", "concat"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-round retrieval metrics")
    _add_checkpoint_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=list(SPLITS))
    p.add_argument("--mode", choices=["it", "ti", "ensemble"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="temperature/weight sensitivity sweep")
    _add_checkpoint_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=list(SPLITS))
    p.add_argument("--mode", choices=["it", "ti", "ensemble"])
    p.add_argument("--lambda1", help="comma list, default 1,5,10,15,20")
    p.add_argument("--lambda2", help="comma list, default 1,5,10,15,20")
    p.add_argument("--alphas", help="comma list, default checkpoint value")
    p.add_argument("--betas", help="comma list, default checkpoint value")
    p.add_argument("--rounds", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="similarity-level ablation grid")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--grid-file", help="JSON list of ablation rows")
    p.add_argument("--rounds", type=int)
    p.add_argument("--out")
    for flag, typ in [("--alpha", float), ("--beta", float), ("--tau", float),
                      ("--lambda1", float), ("--lambda2", float),
                      ("--epochs", int), ("--batch-size", int), ("--lr", float),
                      ("--lr-drop-epoch", int), ("--seed", int),
                      ("--eval-every", int), ("--word-dim", int),
                      ("--embed-dim", int), ("--vr-steps", int)]:
        p.add_argument(flag, type=typ)
    p.add_argument("--intra-mode", choices=["sub", "concat"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the retrieval HTTP service")
    _add_checkpoint_args(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--gallery", help="manifest path or dataset dir")
    p.add_argument("--gallery-id", default="default")
    p.add_argument("--mode", choices=["it", "ti", "ensemble"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--top-k", type=int, default=12)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry points: build-index, train, evaluate, serve."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file supplying any flag; CLI values win")


def _merge_config(args, parser):
    if getattr(args, "config", None):
        file_values = json.loads(Path(args.config).read_text())
        defaults = {a.dest: parser.get_default(a.dest) for a in parser._actions}
        for key, value in file_values.items():
            if key not in defaults:
                raise SystemExit(f"unknown config key {key!r}")
            # CLI beats file: only apply when the CLI left the default.
            if getattr(args, key) == defaults[key]:
                setattr(args, key, value)
    return args


def _load_dataset(args):
    from .data import CorpusIndex, build_merged_index, read_manifest, write_manifest

    if args.manifest and Path(args.manifest).exists():
        return CorpusIndex(read_manifest(args.manifest))
    pascal = Path(args.pascal_root or Path(args.data_root) / "pascal")
    sbd = Path(args.sbd_root or Path(args.data_root) / "sbd")
    records = build_merged_index(pascal, sbd)
    if args.manifest:
        write_manifest(args.manifest, records)
    return CorpusIndex(records)


def _dataset_flags(p):
    p.add_argument("--data-root", type=Path, default=None,
                   help="directory containing pascal/ and sbd/ subtrees")
    p.add_argument("--pascal-root", type=Path, default=None)
    p.add_argument("--sbd-root", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None,
                   help="manifest cache; built once then reused")


def cmd_build_index(args, parser):
    from .data import write_manifest, build_merged_index

    records = build_merged_index(
        args.pascal_root or Path(args.data_root) / "pascal",
        args.sbd_root or Path(args.data_root) / "sbd",
    )
    write_manifest(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_train(args, parser):
    import torch

    from .config import ModelConfig
    from .data import fold_split
    from .model import SegmentationModel
    from .train import TrainConfig, Trainer

    args = _merge_config(args, parser)
    dataset = _load_dataset(args)
    model_cfg = ModelConfig(
        backbone_variant=args.backbone,
        pretrained_backbone=args.pretrained_backbone,
        feature_channels=args.channels,
        input_patch=args.patch,
    )
    torch.manual_seed(args.seed)
    model = SegmentationModel(model_cfg)
    cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed,
        k_shots=args.shots, carry_prob=args.carry_prob, augment=not args.no_augment,
    )
    trainer = Trainer(dataset, fold_split(args.fold), model, cfg, out_dir=args.out)
    path = trainer.train()
    print(f"final checkpoint: {path}")


def cmd_evaluate(args, parser):
    from .data import fold_split
    from .engine import MaskPredictor
    from .evaluate import run_validation
    from .model import load_checkpoint

    args = _merge_config(args, parser)
    dataset = _load_dataset(args)
    model, _ = load_checkpoint(args.checkpoint)
    predictor = MaskPredictor(model)
    report, results = run_validation(
        predictor, dataset, fold_split(args.fold),
        s=args.shots, q=args.queries,
        episodes_per_class=args.episodes, seed=args.seed, budget=args.budget,
        out_dir=args.out,
    )
    print(json.dumps(report.to_dict(), indent=2))


def cmd_serve(args, parser):
    import uvicorn

    from .engine import MaskPredictor
    from .model import load_checkpoint
    from .service import SessionStore, create_app

    model, _ = load_checkpoint(args.checkpoint)
    store = SessionStore(
        MaskPredictor(model),
        corpus_root=args.corpus,
        state_dir=os.environ.get("IFSEG_STATE_DIR", args.state),
        checkpoint_version=str(args.checkpoint),
    )
    app = create_app(store)
    port = int(os.environ.get("IFSEG_PORT", args.port))
    uvicorn.run(app, host=args.host, port=port)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="ifseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="scan both dataset roots into a manifest")
    _dataset_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_build_index, _parser=p)

    p = sub.add_parser("train", help="train on one fold")
    _dataset_flags(p)
    _add_common(p)
    p.add_argument("--fold", type=int, choices=[0, 1, 2, 3], default=0)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.0025)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--carry-prob", type=float, default=0.9)
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--patch", type=int, default=512)
    p.add_argument("--backbone", default="resnet50")
    p.add_argument("--pretrained-backbone", action="store_true",
                   help="load ImageNet backbone weights (needs network/cache)")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train, _parser=p)

    p = sub.add_parser("evaluate", help="episodic validation of a checkpoint")
    _dataset_flags(p)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fold", type=int, choices=[0, 1, 2, 3], default=0)
    p.add_argument("--shots", type=int, choices=[1, 5], default=1)
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=20,
                   help="clicks per support image (20 is the full regime)")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate, _parser=p)

    p = sub.add_parser("serve", help="run the live annotation service")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--state", type=Path, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve, _parser=p)

    args = parser.parse_args(argv)
    return args.func(args, args._parser)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``scenegcn <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_gen_data(args) -> int:
    from .relation import save_relation_dataset
    from .synthetic import SceneConfig, WorldConfig, generate_dataset, write_dataset

    kinds = tuple(k for k in args.kinds.split(",") if k)
    per = args.questions_per_kind
    scene_cfg = SceneConfig(objects_min=args.objects_min, objects_max=args.objects_max,
                            attribute=per, existence=per, relation_open=per, relation_binary=per)
    world_cfg = WorldConfig(seed=args.world_seed, n_categories=args.categories)
    data = generate_dataset(args.scenes, args.seed, world_cfg, scene_cfg, args.val_fraction, kinds)
    out = Path(args.out)
    write_dataset(out, data)
    summary = {"scenes": len(data.scenes), "questions": len(data.questions), "out": str(out)}
    if args.relation_samples:
        samples = data.world.relation_samples(args.relation_samples, np.random.default_rng([args.seed, 1]))
        save_relation_dataset(out / "relations", samples)
        summary["relation_samples"] = len(samples)
    _print(summary)
    return EXIT_OK


def _world_for(cfg):
    from .synthetic import SyntheticWorld, WorldConfig

    meta = Path(cfg.data_dir) / "meta.json"
    if not cfg.data_dir or not meta.exists():
        raise FileNotFoundError(f"relation training needs data_dir with meta.json (got {cfg.data_dir!r})")
    return SyntheticWorld(WorldConfig(**json.loads(meta.read_text())["world"]))


def cmd_train_rel(args) -> int:
    from .relation import load_relation_dataset
    from .train import ExperimentConfig, recall_at_1, save_relation_encoder, train_relation_encoder

    cfg = ExperimentConfig.load(args.config)
    world = _world_for(cfg)
    seed = cfg.seeds[0]
    if cfg.rel_data_dir:
        samples = load_relation_dataset(cfg.rel_data_dir)
    else:
        samples = world.relation_samples(cfg.rel_per_predicate, np.random.default_rng([seed, 2]))
    held_out = world.relation_samples(50, np.random.default_rng([seed, 3]))
    lexicon = [world.predicate_tokens(p) for p in range(len(world.predicates))]
    enc, history = train_relation_encoder(samples, world.vocabulary(), cfg, seed, lexicon, held_out)
    path = save_relation_encoder(Path(cfg.out_dir) / "relation_encoder.ckpt", enc, history)
    _print({"checkpoint": str(path), "history": history, "recall_at_1": recall_at_1(enc, held_out, lexicon)})
    return EXIT_OK


def cmd_train_vqa(args) -> int:
    from .synthetic import read_dataset
    from .train import ExperimentConfig, final_report, load_relation_encoder, prepare_data, train, with_variant

    cfg = ExperimentConfig.load(args.config)
    if args.variant:
        cfg = with_variant(cfg, args.variant)
    dataset = read_dataset(cfg.data_dir)
    encoder = load_relation_encoder(cfg.relation_ckpt) if cfg.relation_ckpt else None
    data = prepare_data(dataset, cfg, encoder)
    reports = []
    for seed in cfg.seeds:
        out = Path(cfg.out_dir) / cfg.variant / f"seed_{seed}"
        state = train(cfg, data, seed, out, resume=args.resume)
        report = final_report(state, cfg, data)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
        reports.append(report.to_dict())
        print(f"{cfg.variant} seed {seed}: val accuracy {report.overall:.4f}", file=sys.stderr)
    _print({"variant": cfg.variant, "reports": reports,
            "mean_accuracy": float(np.mean([r["overall"] for r in reports]))})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    _print(evaluate(args.ckpt, args.data).to_dict())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    failed = 0
    for name, report in run_suite(args.scope, args.tol):
        print(f"{args.scope:6s} {name:28s} {report}")
        failed += not report.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_dump_attention(args) -> int:
    from .train import dump_attention

    trace = dump_attention(args.ckpt, args.example, args.out, args.data)
    print(f"central object {trace['central_object']}, {len(trace['top_edges'])} top edges -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenegcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene/question dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--objects-min", type=int, default=3)
    p.add_argument("--objects-max", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="attribute,existence,relation_open,relation_binary")
    p.add_argument("--questions-per-kind", type=int, default=1)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--relation-samples", type=int, default=0,
                   help="also write this many relation samples per predicate to OUT/relations")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-rel", help="train the relation encoder")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_rel)

    p = sub.add_parser("train-vqa", help="train a question-answering variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train_vqa)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory (default: the one in the checkpoint config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("op", "module", "e2e"), default="op")
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-attention", help="export attention maps for one question")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--example", type=int, required=True, help="question id")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    from .graph import EmptySceneError, ValidationError
    from .model import ConfigError
    from .synthetic import GenerationError
    from .tensor import FormatError
    from .text import InputError, VocabularyError
    from .train import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValidationError, EmptySceneError, GenerationError, InputError, VocabularyError,
            FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

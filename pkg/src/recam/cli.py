"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, missing or invalid
input), 2 internal error. Settings resolve as flag > config file >
default, and every command writes a manifest of what it actually used.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from recam import __version__
from recam.augment import HttpTranslator, IdentityTranslator, MockTranslator, TranslationCache, augment_split
from recam.backends import make_embedder
from recam.config import TECHNIQUES, RunConfig, subtask_name
from recam.dataset import DatasetSplit, describe, find_split_file, load_data_dir, load_jsonl, save_jsonl
from recam.errors import RecamError
from recam.evaluate import TOKEN_SWEEP_ORDER, evaluate, predict_split, run_ablation, run_token_sweep, run_transfer
from recam.ranker import Ranker
from recam.train import Checkpoint, seed_everything, train

logger = logging.getLogger("recam")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, args: argparse.Namespace, config: RunConfig | None = None,
                   inputs: Sequence[Path] = (), extra: dict | None = None) -> None:
    """Record the resolved settings; no timestamps, so reruns are byte-identical."""
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in ("func",)}
    manifest = {
        "command": command,
        "version": __version__,
        "flags": flags,
        "config": config.to_dict() if config else None,
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _existing(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.exists():
        raise UsageError(f"{flag}: {path} does not exist")
    return path


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        with open(_existing(args.config, "--config"), encoding="utf-8") as f:
            data.update(yaml.safe_load(f) or {})
    overrides = {
        "seed": args.seed,
        "backend": args.backend,
        "subtask": args.subtask,
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None),
        "warmup": getattr(args, "warmup", None),
        "special_token_scheme": getattr(args, "scheme", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "unsafe", False):
        data["unsafe"] = True
    techs = getattr(args, "techniques", None)
    if techs is not None:
        data.update({t: t in techs for t in TECHNIQUES})
    return RunConfig.from_dict(data)


def make_translator(args: argparse.Namespace):
    kind = getattr(args, "translator", None) or "identity"
    if kind == "identity":
        return IdentityTranslator()
    if kind == "mock":
        return MockTranslator()
    return HttpTranslator(endpoint=getattr(args, "endpoint", None))


def _load_splits(data_dir: Path, config: RunConfig, needed: Sequence[str]) -> dict[str, DatasetSplit]:
    splits = load_data_dir(data_dir, config.subtask, config.placeholder)
    for name in needed:
        if name not in splits:
            raise UsageError(f"--data-dir: no {name}.jsonl (or Task_N_{name}.jsonl) in {data_dir}")
    return splits


def _split_inputs(data_dir: Path, config: RunConfig) -> list[Path]:
    return [p for name in ("train", "trial", "dev", "test")
            if (p := find_split_file(data_dir, name, config.subtask)) is not None]


def cmd_prepare(args) -> None:
    config = resolve_config(args)
    data_dir = _existing(args.data_dir, "--data-dir")
    splits = load_data_dir(data_dir, config.subtask, config.placeholder)
    if not splits:
        raise UsageError(f"--data-dir: no split files found in {data_dir}")
    stats = {name: describe(s).to_dict() for name, s in splits.items()}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out / "manifest.json", "prepare", args, config, _split_inputs(data_dir, config))
    for name, st in stats.items():
        print(f"{name}: {st['count']} examples, labels {st['label_histogram']}")


def cmd_rank(args) -> None:
    config = resolve_config(args)
    src = _existing(args.inp, "--in")
    split = load_jsonl(src, args.split, config.subtask, config.placeholder)
    ranker = Ranker(make_embedder(config), recall_only=args.recall_only,
                    strip_placeholder=args.strip_placeholder, placeholder=config.placeholder)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        for ex in split:
            rec = ex.to_record()
            if ex.article.strip():
                ranked = ranker.rank(ex.article, ex.question)
                rec["article_ranked"] = ranked.rearranged_text
                rec["sentence_scores"] = list(ranked.scores)
                rec["sentence_order"] = list(ranked.order)
            else:
                rec["article_ranked"], rec["sentence_scores"], rec["sentence_order"] = "", [], []
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    write_manifest(Path(f"{args.out}.manifest.json"), "rank", args, config, [src])


def cmd_augment(args) -> None:
    config = resolve_config(args)
    src = _existing(args.inp, "--in")
    split = load_jsonl(src, args.split, config.subtask, config.placeholder)
    pivots = tuple(p.strip() for p in args.pivot.split(",") if p.strip())
    out = augment_split(split, make_translator(args), pivots, TranslationCache(args.cache_dir),
                        max_retries=args.max_retries, parallelism=args.parallelism)
    save_jsonl(out, args.out)
    write_manifest(Path(f"{args.out}.manifest.json"), "augment", args, config, [src],
                   {"augmented": len(out), "skipped": out.meta.get("skipped", [])})
    print(f"wrote {len(out)} back-translated examples ({len(out.meta.get('skipped', []))} skipped)")


def cmd_train(args) -> None:
    config = resolve_config(args)
    data_dir = _existing(args.data_dir, "--data-dir")
    splits = _load_splits(data_dir, config, ("train", "dev"))
    seed_everything(config.seed)
    translator = make_translator(args) if config.back_translation else None
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = train(splits["train"], splits["dev"], config, translator=translator,
                 cache=TranslationCache(args.cache_dir))
    ckpt.save(args.out)
    write_manifest(args.out / "run_manifest.json", "train", args, config, _split_inputs(data_dir, config),
                   {"dev_accuracy": ckpt.dev_accuracy, "best_epoch": ckpt.epoch})
    print(f"best dev accuracy {ckpt.dev_accuracy:.4f} at epoch {ckpt.epoch}; checkpoint in {args.out}")


def _eval_split(args, ckpt: Checkpoint) -> tuple[DatasetSplit, Path]:
    if args.inp is not None:
        src = _existing(args.inp, "--in")
        return load_jsonl(src, args.split, ckpt.config.subtask, ckpt.config.placeholder), src
    data_dir = _existing(args.data_dir, "--data-dir")
    subtask = subtask_name(args.subtask) if args.subtask else ckpt.config.subtask
    src = find_split_file(data_dir, args.split, subtask)
    if src is None:
        raise UsageError(f"--data-dir: no {args.split} split in {data_dir}")
    return load_jsonl(src, args.split, subtask, ckpt.config.placeholder), src


def cmd_evaluate(args) -> None:
    ckpt = Checkpoint.load(_existing(args.ckpt, "--ckpt"))
    split, src = _eval_split(args, ckpt)
    report = evaluate(ckpt, split)
    args.out.mkdir(parents=True, exist_ok=True)
    report.save(args.out / f"eval_{split.name}.json")
    write_manifest(args.out / f"eval_{split.name}.manifest.json", "evaluate", args, ckpt.config, [src])
    print(f"{split.name} accuracy {report.accuracy:.4f} ({report.correct}/{report.total})")


def cmd_predict(args) -> None:
    ckpt = Checkpoint.load(_existing(args.ckpt, "--ckpt"))
    src = _existing(args.inp, "--in")
    split = load_jsonl(src, "test", ckpt.config.subtask, ckpt.config.placeholder)
    preds = predict_split(ckpt, split)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        for ex, p in zip(split, preds):
            f.write(json.dumps({"id": ex.id, "prediction": p}) + "\n")
    write_manifest(Path(f"{args.out}.manifest.json"), "predict", args, ckpt.config, [src])


def _harness_data(args, config) -> dict[str, DatasetSplit]:
    data_dir = _existing(args.data_dir, "--data-dir")
    return _load_splits(data_dir, config, ("train", "dev"))


def cmd_ablate(args) -> None:
    config = resolve_config(args).with_techniques(())
    data = _harness_data(args, config)
    techniques = args.ablate or list(TECHNIQUES)
    table = run_ablation(config, techniques, data, translator=make_translator(args),
                         cache=TranslationCache(args.cache_dir))
    table.save(args.out, "ablation")
    write_manifest(args.out / "manifest.json", "ablate", args, config, _split_inputs(args.data_dir, config))
    print(table.to_text(), end="")


def cmd_sweep_tokens(args) -> None:
    config = resolve_config(args)
    data = _harness_data(args, config)
    table = run_token_sweep(config, data, args.schemes or TOKEN_SWEEP_ORDER)
    table.save(args.out, "token_sweep")
    write_manifest(args.out / "manifest.json", "sweep-tokens", args, config, _split_inputs(args.data_dir, config))
    print(table.to_text(), end="")


def cmd_transfer(args) -> None:
    ckpts, tests, inputs = {}, {}, []
    for n, ckpt_dir, data_dir in ((1, args.ckpt1, args.data_dir1), (2, args.ckpt2, args.data_dir2)):
        sub = subtask_name(n)
        ckpts[sub] = Checkpoint.load(ckpt_dir) if ckpt_dir and ckpt_dir.exists() else None
        path = find_split_file(data_dir, args.split, sub) if data_dir else None
        tests[sub] = load_jsonl(path, args.split, sub) if path else None
        if path:
            inputs.append(path)
    matrix = run_transfer(ckpts, tests)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "transfer.json").write_text(json.dumps(matrix.to_dict(), indent=2, sort_keys=True) + "\n")
    (args.out / "transfer.txt").write_text(matrix.to_table().to_text())
    write_manifest(args.out / "manifest.json", "transfer", args, None, inputs, {"complete": matrix.complete})
    print(matrix.to_table().to_text(), end="")
    if not matrix.complete:
        print(f"transfer matrix incomplete: missing {matrix.metadata['missing']}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed for every source of randomness")
    common.add_argument("--config", type=Path, help="YAML file of RunConfig keys")
    common.add_argument("--subtask", choices=["1", "2"], help="1 = imperceptibility, 2 = nonspecificity")
    common.add_argument("--backend", choices=["tiny", "pretrained"], help="encoder backend")
    common.add_argument("--translator", choices=["identity", "mock", "http"], default="identity",
                        help="translation service for back translation")
    common.add_argument("--endpoint", help="HTTP translator endpoint (else $RECAM_TRANSLATE_URL)")
    common.add_argument("--cache-dir", type=Path, help="translation cache directory")
    common.add_argument("--log-level", default="WARNING", help="logging level")

    hp = _Parser(add_help=False)
    hp.add_argument("--lr", type=float, help="learning rate")
    hp.add_argument("--batch-size", type=int, help="batch size")
    hp.add_argument("--epochs", type=int, help="training epochs")
    hp.add_argument("--warmup", type=float, help="warm-up: <1 fraction of steps, >=1 epochs")
    hp.add_argument("--scheme", help="special token scheme (<e>, <#>, <$>, #, $, none)")
    hp.add_argument("--techniques", nargs="*", choices=TECHNIQUES, help="technique switches to turn on")
    hp.add_argument("--unsafe", action="store_true", help="allow values outside the published grid")

    parser = _Parser(prog="recam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="validate a data directory and write split statistics")
    p.add_argument("--data-dir", type=Path, required=True, help="directory with <split>.jsonl files")
    p.add_argument("--out", type=Path, required=True, help="output run directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("rank", parents=[common], help="re-rank passage sentences against the question")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="input JSONL")
    p.add_argument("--out", type=Path, required=True, help="output JSONL")
    p.add_argument("--split", default="train", help="split name of the input file")
    p.add_argument("--strip-placeholder", action="store_true", help="drop the placeholder before scoring")
    p.add_argument("--recall-only", action="store_true", help="score by recall instead of F")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("augment", parents=[common], help="back-translate passages into pseudo examples")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="input JSONL (labeled)")
    p.add_argument("--out", type=Path, required=True, help="output JSONL of pseudo examples")
    p.add_argument("--pivot", default="fr", help="pivot language(s), comma-separated")
    p.add_argument("--split", default="train", help="split name of the input file")
    p.add_argument("--max-retries", type=int, default=3, help="translator attempts per request")
    p.add_argument("--parallelism", type=int, default=1, help="concurrent translations")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common, hp], help="fine-tune and save the best-dev checkpoint")
    p.add_argument("--data-dir", type=Path, required=True, help="directory with train/dev JSONL")
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint on a labeled split")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data-dir", type=Path, help="directory holding the split")
    p.add_argument("--in", dest="inp", type=Path, help="explicit split file instead of --data-dir")
    p.add_argument("--split", default="dev", help="split to evaluate")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="predict answers for (possibly unlabeled) examples")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="input JSONL")
    p.add_argument("--out", type=Path, required=True, help="output JSONL of {id, prediction}")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", parents=[common, hp], help="baseline, single-technique rows and final mix")
    p.add_argument("--data-dir", type=Path, required=True, help="directory with train/trial/dev JSONL")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--ablate", nargs="*", choices=TECHNIQUES, help="techniques to ablate (default: all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-tokens", parents=[common, hp], help="compare special-token schemes")
    p.add_argument("--data-dir", type=Path, required=True, help="directory with train/trial/dev JSONL")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--schemes", nargs="*", help="schemes to compare (default: all six)")
    p.set_defaults(func=cmd_sweep_tokens)

    p = sub.add_parser("transfer", parents=[common], help="2x2 train-on/test-on subtask matrix")
    p.add_argument("--ckpt1", type=Path, help="checkpoint trained on subtask 1")
    p.add_argument("--ckpt2", type=Path, help="checkpoint trained on subtask 2")
    p.add_argument("--data-dir1", type=Path, help="subtask 1 data directory")
    p.add_argument("--data-dir2", type=Path, help="subtask 2 data directory")
    p.add_argument("--split", default="test", help="split used as the test set")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.set_defaults(func=cmd_transfer)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, RecamError, FileNotFoundError) as e:
        print(f"recam {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

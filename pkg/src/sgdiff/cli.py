"""Command-line entry point: ``sgdiff <command> ...``.

Exit codes: 0 success, 1 other failure, 2 config error, 3 missing or stale
upstream stage, 4 invalid data, 5 non-finite numbers.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from sgdiff.config import PRESETS, load_config, load_preset
from sgdiff.errors import ConfigError, DataValidationError, SGDiffError

EDIT_OPS = ("replace-object", "replace-relation", "add", "remove")


def _config(args):
    if args.preset and args.config:
        raise ConfigError("pass either --config or --preset, not both")
    cfg = load_preset(args.preset) if args.preset else load_config(args.config) if args.config else None
    if cfg is None:
        raise ConfigError("a --config file or --preset is required")
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg


def _print(doc) -> None:
    print(json.dumps(doc, sort_keys=True, indent=2))


def _vocab(args):
    from sgdiff.corpus import synthetic_vocab
    from sgdiff.scenegraph import Vocab

    return Vocab.load(args.vocab) if args.vocab else synthetic_vocab()


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    from sgdiff.config import CorpusConfig, parse_config
    from sgdiff.corpus import SynthSpec, generate_synthetic, write_corpus

    path = Path(args.spec)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            spec = SynthSpec.from_dict(json.loads(text))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataValidationError):
                raise
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        c: CorpusConfig = parse_config(text, str(path)).corpus
        count = c.heldout_scenes if args.split != "train" else c.num_scenes
        spec = SynthSpec(c.seed, count, c.image_size, c.max_objects)
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        manifest = write_corpus(generate_synthetic(spec, args.split), args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write corpus to {args.out}: {exc}") from exc
    _print({"manifest": str(manifest), "scenes": spec.num_scenes, "split": args.split})
    return 0


def _stage_command(runner):
    def run(args) -> int:
        cfg = _config(args)
        result = runner(cfg, stop_after=args.stop_after)
        _print(result)
        return 0

    return run


def cmd_sample(args) -> int:
    from sgdiff.pipeline import load_corpora, run_sample
    from sgdiff.scenegraph import read_graph_file

    cfg = _config(args)
    vocab = load_corpora(cfg)[0].vocab
    graph, _, _ = read_graph_file(args.graph, vocab)
    _print(run_sample(cfg, graph, args.count, args.seed, args.out))
    return 0


def cmd_edit(args) -> int:
    from sgdiff import scenegraph as sg

    vocab = _vocab(args)
    graph, boxes, image = sg.read_graph_file(args.graph, vocab)

    def need(*names):
        missing = [n for n in names if getattr(args, n) is None]
        if missing:
            raise ConfigError(f"--op {args.op} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))

    if args.op == "replace-object":
        need("position", "category")
        graph = sg.replace_object(graph, args.position, args.category, vocab)
    elif args.op == "replace-relation":
        need("position", "relation")
        graph = sg.replace_relation(graph, args.position, args.relation, vocab)
    elif args.op == "add":
        need("subject", "relation", "object")
        graph = sg.add_triplet(graph, args.subject, args.relation, args.object, vocab)
    else:
        need("position")
        graph = sg.remove_triplet(graph, args.position)
    problems = sg.validate(graph, vocab)
    if problems:
        raise DataValidationError("; ".join(str(p) for p in problems))
    sg.write_graph_file(args.out, graph, vocab, boxes, image)
    _print({"out": str(args.out), "objects": graph.num_objects, "triplets": graph.num_triplets})
    return 0


def cmd_retrieve(args) -> int:
    from sgdiff.pipeline import run_retrieve

    _print(run_retrieve(_config(args), args.corpus))
    return 0


def cmd_evaluate(args) -> int:
    from sgdiff.pipeline import run_evaluate

    _print(run_evaluate(_config(args), args.generated, args.reference, args.out))
    return 0


def cmd_probe(args) -> int:
    from sgdiff.pipeline import run_probe

    _print(run_probe(_config(args), args.count, args.seed))
    return 0


def cmd_train_classifier(args) -> int:
    from sgdiff.pipeline import run_train_classifier

    _print(run_train_classifier(_config(args)))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config(p, stop_after: bool = False) -> None:
    p.add_argument("--config", help="INI run config")
    p.add_argument("--preset", choices=PRESETS, help="use a shipped config instead of --config")
    p.add_argument("--out-dir", help="override [run] out_dir")
    if stop_after:
        p.add_argument("--stop-after", type=int, default=None, metavar="STEP",
                       help="checkpoint and exit after this many total steps (resume later)")


def build_parser() -> argparse.ArgumentParser:
    from sgdiff.pipeline import run_pretrain, run_train_ae, run_train_diffusion

    parser = argparse.ArgumentParser(prog="sgdiff", description="Scene-graph to image diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic corpus to disk")
    p.add_argument("--spec", required=True, help="SynthSpec JSON, or a run config with a [corpus] section")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_synth_data)

    for name, runner, text in (
        ("pretrain", run_pretrain, "masked contrastive pretraining of the graph encoder"),
        ("train-ae", run_train_ae, "train the latent autoencoder"),
        ("train-diffusion", run_train_diffusion, "train the conditional latent diffusion model"),
    ):
        p = sub.add_parser(name, help=text)
        _add_config(p, stop_after=True)
        p.set_defaults(func=_stage_command(runner))

    p = sub.add_parser("sample", help="generate images for one scene graph")
    _add_config(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="edit a scene-graph document")
    p.add_argument("--graph", required=True)
    p.add_argument("--op", required=True, choices=EDIT_OPS)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocab JSON (defaults to the synthetic vocabulary)")
    p.add_argument("--position", type=int)
    p.add_argument("--category")
    p.add_argument("--relation")
    p.add_argument("--subject", type=int)
    p.add_argument("--object", type=int)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("retrieve", help="graph/image retrieval accuracy of the pretrained encoders")
    _add_config(p)
    p.add_argument("--corpus", help="manifest of paired scenes (default: the held-out split)")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="IS and FID of generated images")
    _add_config(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", help="report path (default: <generated>/metrics.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="color/position alignment probe on left-of graphs")
    _add_config(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("train-classifier", help="train the desk-scale IS/FID backbone")
    _add_config(p)
    p.set_defaults(func=cmd_train_classifier)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except SGDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

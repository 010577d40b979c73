"""Command-line entry point: one subcommand per pipeline stage.

Pipeline order: gen-synth -> build-vocab -> train-elm -> precompute-soft ->
train -> eval (or infer). Every stage reads the same flat config.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import Config, describe_keys, load_config
from .caption_decoder import CaptionModel, DecoderConfig
from .diagnostics import gradient_suite
from .errors import ConfigError, OrgTrlError
from .feature_store import (
    SynthConfig,
    Vocabulary,
    build_vocabulary,
    caption_examples,
    corpus_stats,
    generate_synthetic,
    load_dataset,
)
from .org_encoder import OrgConfig
from .trainer import RunPaths, caption_records, evaluate, train, write_captions, write_evaluation
from .trl_objectives import NgramElm, precompute_soft_targets, train_elm

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("orgtrl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _records(paths: RunPaths):
    return load_dataset(paths.manifest)


def cmd_gen_synth(cfg: Config, paths: RunPaths) -> None:
    sc = SynthConfig(videos=cfg["synth.videos"], frames=cfg["synth.frames"], objects=cfg["synth.objects"],
                     d_a=cfg["synth.d_a"], d_m=cfg["synth.d_m"], d_o=cfg["synth.d_o"],
                     noise=cfg["synth.noise"])
    manifest = generate_synthetic(sc, cfg["seed"], paths.data_dir)
    print(f"wrote {sc.videos} videos to {manifest}")


def cmd_build_vocab(cfg: Config, paths: RunPaths) -> None:
    records = _records(paths)
    vocab = build_vocabulary((c for r in records for c in r.captions), cfg["vocab.min_count"])
    paths.out.mkdir(parents=True, exist_ok=True)
    vocab.save(paths.vocab)
    print(f"vocabulary size {len(vocab)} -> {paths.vocab}")


def cmd_stats(cfg: Config, paths: RunPaths) -> None:
    records = _records(paths)
    report = corpus_stats((c for r in records for c in r.captions), cfg["stats.top_n"])
    text = report.to_text(cfg["stats.top_n"])
    paths.out.mkdir(parents=True, exist_ok=True)
    (paths.out / "stats.txt").write_text(text)
    sys.stdout.write(text)


def cmd_train_elm(cfg: Config, paths: RunPaths) -> None:
    vocab = Vocabulary.load(paths.vocab)
    examples = caption_examples(_records(paths), vocab, cfg["vocab.max_len"])
    elm = train_elm([e.tokens for e in examples], len(vocab), cfg["elm.order"], cfg["elm.alpha"])
    elm.save(paths.elm)
    print(f"order-{elm.order} ELM over {len(examples)} captions -> {paths.elm}")


def cmd_precompute_soft(cfg: Config, paths: RunPaths) -> None:
    vocab = Vocabulary.load(paths.vocab)
    examples = caption_examples(_records(paths), vocab, cfg["vocab.max_len"])
    elm = NgramElm.load(paths.elm)
    store = precompute_soft_targets(examples, elm, cfg["trl.k"], cfg["trl.temperature"], len(vocab))
    store.save(paths.soft_targets)
    print(f"{len(store)} soft-target entries (k={store.k}) -> {paths.soft_targets}")


def cmd_train(cfg: Config, paths: RunPaths) -> None:
    paths.out.mkdir(parents=True, exist_ok=True)
    (paths.out / "config.txt").write_text(cfg.to_text())
    result = train(cfg, paths)
    if result.log:
        last = result.log[-1]
        print(f"epoch {last.epoch} step {last.step} loss {last.loss:.4f} ce {last.ce:.4f}")
    print(f"checkpoint {result.checkpoint}")


def _load_for_inference(cfg: Config, paths: RunPaths):
    ckpt = Path(cfg["eval.checkpoint"]) if cfg["eval.checkpoint"] else paths.latest_checkpoint()
    model = CaptionModel.load(ckpt)
    manifest = cfg["eval.manifest"] or paths.manifest
    return model, load_dataset(manifest), Vocabulary.load(paths.vocab)


def cmd_infer(cfg: Config, paths: RunPaths) -> None:
    model, records, vocab = _load_for_inference(cfg, paths)
    captions = caption_records(model, records, vocab, cfg["decoder.beam"], cfg["decoder.max_len"])
    write_captions(paths.captions, records, captions)
    for r, c in zip(records, captions):
        print(f"{r.video_id}\t{c}")


def cmd_eval(cfg: Config, paths: RunPaths) -> None:
    model, records, vocab = _load_for_inference(cfg, paths)
    captions, report = evaluate(model, records, vocab, cfg["decoder.beam"], cfg["decoder.max_len"])
    write_evaluation(paths, records, captions, report)
    print(f"bleu4 {report['bleu4']:.4f}  rouge_l {report['rouge_l']:.4f}  cider {report['cider']:.4f}")


def cmd_grad_check(cfg: Config, paths: RunPaths) -> int:
    w = cfg["gradcheck.dim"]
    org_cfg = OrgConfig(cfg["org.mode"], cfg["org.top_k"], w)
    dec_cfg = DecoderConfig(w, w, w)
    results = gradient_suite(org_cfg, dec_cfg, seed=cfg["seed"], eps=cfg["gradcheck.eps"],
                             sample=cfg["gradcheck.sample"])
    for key, value in results.items():
        print(f"{key}\t{value:.3e}")
    worst = max(v for k, v in results.items() if not k.endswith("inert_abs_grad"))
    print(f"max relative error {worst:.3e}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "generate the synthetic grammar dataset into data.dir"),
    "build-vocab": (cmd_build_vocab, "build vocab.txt from the training captions"),
    "stats": (cmd_stats, "word-frequency statistics of the caption corpus"),
    "train-elm": (cmd_train_elm, "fit the n-gram external language model"),
    "precompute-soft": (cmd_precompute_soft, "write the top-k soft-target store"),
    "train": (cmd_train, "train the captioner"),
    "infer": (cmd_infer, "caption a manifest with a checkpoint"),
    "eval": (cmd_eval, "caption and score a manifest (BLEU-4, ROUGE-L, CIDEr)"),
    "grad-check": (cmd_grad_check, "finite-difference check of the model gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "configuration keys (file lines or --set KEY=VALUE):\n" + describe_keys()
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one key; repeatable, applied after --config")
    common.add_argument("--seed", type=int, help="global seed (overrides the seed key)")
    common.add_argument("--out", metavar="DIR", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="orgtrl", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=keys,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        paths = RunPaths.from_config(cfg, args.out)
        handler = COMMANDS[args.command][0]
        code = handler(cfg, paths)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"orgtrl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OrgTrlError, OSError, ValueError) as exc:
        print(f"orgtrl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

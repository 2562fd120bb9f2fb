# - Command-line entry point: prepare, train-tokenizer, train, translate,
#   backtranslate and eval subcommands over one shared run configuration.

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from bokeh.io import save as save_html
from bokeh.resources import CDN

from ._version import __version__
from .clients import (
    JUDGE_URL_ENV,
    MT_URL_ENV,
    SCORER_URL_ENV,
    judge_client,
    scorer_client,
    translation_client,
)
from .core_data_pipeline import (
    PipelineStats,
    backtranslate,
    dedup,
    format_samples,
    llm_filter,
    read_aligned,
    read_lines,
    read_tsv,
    shuffle_file,
    write_pairs_tsv,
    write_rejection_log,
    write_samples,
)
from .core_decoder import DecodeParams, translate_file
from .core_metrics import (
    TOKENIZERS,
    MetricReport,
    corpus_bleu,
    evaluate,
    load_report,
    render_report,
    save_report,
)
from .core_model import ModelConfig, load_checkpoint
from .core_portrait_plot import report_portrait_plot
from .core_tensor import PRECISIONS, set_precision
from .core_tokenizer import DESK_VOCAB_SIZE, load_vocab, train_bpe
from .core_trainer import RECIPES, TrainConfig, describe_recipes, train
from .support_functions import (
    ConfigError,
    DietaError,
    dataclass_from_mapping,
    format_key_value_lines,
    read_key_value_file,
    setup_logging,
    write_key_value_file,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

# neural metrics scored without references
REFERENCE_FREE = ("qe-metricx", "cometkiwi")

ENV_FIELDS = {
    "judge_url": JUDGE_URL_ENV,
    "mt_url": MT_URL_ENV,
    "scorer_url": SCORER_URL_ENV,
}


@dataclasses.dataclass
class RunConfig:
    """
    Fully resolved settings of one invocation. Precedence: field defaults <
    ``--config`` file < environment variables < command-line flags.
    """

    seed: int = 0
    precision: str = "float32"
    debug: bool = False
    progress: bool = False
    workers: int = 4
    output_dir: str = "runs"
    judge_url: Optional[str] = None
    mt_url: Optional[str] = None
    scorer_url: Optional[str] = None
    # model
    preset: str = "desk"
    d_model: Optional[int] = None
    n_heads: Optional[int] = None
    n_layers: Optional[int] = None
    max_seq_len: Optional[int] = None
    # tokenizer
    vocab_size: int = DESK_VOCAB_SIZE
    byte_fallback: bool = True
    # training
    peak_lr: float = 2e-4
    warmup_fraction: float = 0.10
    max_tokens_per_batch: int = 4096
    epochs: int = 1
    max_steps: Optional[int] = None
    checkpoint_every: int = 0
    log_every: int = 10
    # decoding
    beam: int = 1
    max_new_tokens: int = 128
    length_penalty: float = 0.6
    # evaluation
    tokenize: str = "intl"

    def validate(self) -> "RunConfig":
        if self.precision not in PRECISIONS:
            raise ConfigError(
                f"precision must be one of {sorted(PRECISIONS)}, "
                f"got {self.precision!r}"
            )
        if self.preset not in ("desk", "full"):
            raise ConfigError(f"preset must be 'desk' or 'full', got {self.preset!r}")
        if self.tokenize not in TOKENIZERS:
            raise ConfigError(
                f"tokenize must be one of {TOKENIZERS}, got {self.tokenize!r}"
            )
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        return self

    def model_config(self, vocab_size: Optional[int] = None) -> ModelConfig:
        base = ModelConfig.full() if self.preset == "full" else ModelConfig.desk()
        overrides = {
            key: getattr(self, key)
            for key in ("d_model", "n_heads", "n_layers", "max_seq_len")
            if getattr(self, key) is not None
        }
        if vocab_size is not None:
            overrides["vocab_size"] = vocab_size
        config = dataclasses.replace(base, **overrides)
        config.validate()
        return config

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            peak_lr=self.peak_lr,
            warmup_fraction=self.warmup_fraction,
            max_tokens_per_batch=self.max_tokens_per_batch,
            epochs=self.epochs,
            max_steps=self.max_steps,
            seed=self.seed,
            precision=self.precision,
            checkpoint_every=self.checkpoint_every,
            log_every=self.log_every,
            output_dir=self.output_dir,
            progress=self.progress,
        )

    def decode_params(self) -> DecodeParams:
        return DecodeParams(
            max_new_tokens=self.max_new_tokens,
            beam_width=self.beam,
            length_penalty=self.length_penalty,
        )


def resolve_config(
    args: argparse.Namespace, environ: Optional[Dict[str, str]] = None
) -> RunConfig:
    """Merge defaults, the ``--config`` file, environment variables and flags."""
    environ = os.environ if environ is None else environ
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_key_value_file(args.config))
    for key, env_var in ENV_FIELDS.items():
        if environ.get(env_var):
            values[key] = environ[env_var]
    for field in dataclasses.fields(RunConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            values[field.name] = flag
    return dataclass_from_mapping(RunConfig, values).validate()


# -----------
# Subcommands
# -----------


def cmd_prepare(cfg: RunConfig, args: argparse.Namespace) -> int:
    """dedup -> optional judge filter -> templating -> shuffle."""
    stats = PipelineStats()
    pairs = []
    if bool(args.en) != bool(args.it):
        raise ConfigError("--en and --it must be given together")
    if len(args.en or []) != len(args.it or []):
        raise ConfigError("every --en file needs a matching --it file")
    for en_path, it_path in zip(args.en or [], args.it or []):
        pairs += read_aligned(en_path, it_path, stats=stats)
    for path in args.tsv or []:
        pairs += read_tsv(path, stats=stats)
    if not pairs and not (args.en or args.tsv):
        raise ConfigError("prepare needs --en/--it or --tsv inputs")

    stream = dedup(pairs, stats, progress=cfg.progress)
    rejections: List = []
    if args.filter:
        judge = judge_client(cfg.judge_url)
        stream = llm_filter(
            stream,
            judge,
            rejections,
            stats,
            workers=cfg.workers,
            progress=cfg.progress,
            debug=cfg.debug,
        )
    # templated samples go to disk first; the shuffle holds only a line index
    output = Path(args.output)
    unshuffled = output.with_name(output.name + ".unshuffled")
    try:
        write_samples(format_samples(stream, stats), unshuffled)
        shuffle_file(unshuffled, output, cfg.seed)
    finally:
        unshuffled.unlink(missing_ok=True)
    if args.rejections:
        write_rejection_log(rejections, args.rejections)

    stats.log()
    print(format_key_value_lines(stats.as_dict()), end="")
    if args.stats:
        write_key_value_file(args.stats, stats.as_dict())
    return EXIT_OK


def cmd_train_tokenizer(cfg: RunConfig, args: argparse.Namespace) -> int:
    corpus = [line for path in args.corpus for line in read_lines(path)]
    vocab = train_bpe(
        corpus,
        vocab_size=cfg.vocab_size,
        byte_fallback=cfg.byte_fallback,
        progress=cfg.progress,
        debug=cfg.debug,
    )
    vocab.save(args.output)
    logger.info(
        "wrote %d-piece %s vocabulary to %s", len(vocab), vocab.mode, args.output
    )
    print(args.output)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.list_recipes:
        print(describe_recipes())
        return EXIT_OK
    if not args.corpus or not args.vocab:
        raise ConfigError("train needs --corpus and --vocab")
    tokenizer = load_vocab(args.vocab)
    data = [line for path in args.corpus for line in read_lines(path) if line.strip()]
    result = train(
        args.recipe,
        cfg.model_config(vocab_size=len(tokenizer)),
        data,
        tokenizer,
        train_config=cfg.train_config(),
        starting_checkpoint=args.start_from,
        resume_from=args.resume,
        debug=cfg.debug,
    )
    if result.losses:
        logger.info("final loss %.4f after %d steps", result.losses[-1], result.steps)
    print(result.checkpoint)
    return EXIT_OK


def cmd_translate(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    tokenizer = load_vocab(args.vocab)
    if len(tokenizer) != model.config.vocab_size:
        raise ConfigError(
            f"vocabulary has {len(tokenizer)} pieces "
            f"but the model expects {model.config.vocab_size}"
        )
    count = translate_file(
        model,
        tokenizer,
        args.input,
        args.output,
        args.direction,
        cfg.decode_params(),
        workers=cfg.workers,
        progress=cfg.progress,
    )
    if cfg.beam > 1:
        policy = f"beam search with {cfg.beam} beams (-b{cfg.beam})"
    else:
        policy = "greedy decoding"
    logger.info("translated %d segments with %s", count, policy)
    return EXIT_OK


def cmd_backtranslate(cfg: RunConfig, args: argparse.Namespace) -> int:
    mt = translation_client(cfg.mt_url)
    stats = PipelineStats()
    pairs = backtranslate(
        read_lines(args.input),
        mt,
        args.direction,
        stats,
        workers=cfg.workers,
        progress=cfg.progress,
    )
    written = write_pairs_tsv(pairs, args.output)
    stats.log()
    counters = {"synthetic_pairs": written, "mt_failures": stats.mt_failures}
    print(format_key_value_lines(counters), end="")
    return EXIT_OK


def _scorers(cfg: RunConfig, names: Sequence[str]):
    return [
        scorer_client(
            name,
            cfg.scorer_url,
            reference_based=name.lower() not in REFERENCE_FREE,
        )
        for name in names
    ]


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    hypotheses = read_lines(args.hyp)
    references = read_lines(args.ref)
    sources = read_lines(args.src) if args.src else None
    system = args.system or Path(args.hyp).stem

    reports: List[MetricReport] = []
    if args.report and Path(args.report).exists():
        reports = load_report(args.report)
    report = next((r for r in reports if r.system == system), None)
    if report is None:
        report = MetricReport(system)
        reports.append(report)
    evaluate(
        system,
        args.direction,
        hypotheses,
        references,
        sources=sources,
        scorers=_scorers(cfg, args.scorer or []),
        tokenize=cfg.tokenize,
        report=report,
    )

    bleu_result = corpus_bleu(hypotheses, references, tokenize=cfg.tokenize)
    print(f"BLEU {bleu_result.score:.2f}")
    print(f"chrF {report.get(args.direction, 'chrf'):.2f}")
    for metric in report.metrics():
        if metric in ("bleu", "chrf"):
            continue
        value = report.get(args.direction, metric)
        print(f"{metric} {'absent' if value is None else f'{value:.4f}'}")
    logger.info("BLEU signature: %s", bleu_result.signature)

    if args.report:
        save_report(reports, args.report)
    if args.render:
        print(render_report(reports, fmt=args.render), end="")
    if args.plot:
        plot = report_portrait_plot(reports, show_plot=False, debug=cfg.debug)
        save_html(plot, filename=args.plot, resources=CDN, title="leaderboard")
    return EXIT_OK


# ------
# Parser
# ------


class DietaArgumentParser(argparse.ArgumentParser):
    """Usage errors print one ``error:`` line and exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _global_options() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting options given before it
    parent = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    group = parent.add_argument_group("run configuration")
    group.add_argument("--config", help="key=value configuration file")
    group.add_argument(
        "--seed", type=int, help="global seed (shuffle, init, batch order)"
    )
    group.add_argument(
        "--precision", choices=sorted(PRECISIONS), help="floating point mode"
    )
    group.add_argument("--debug", action="store_true", help="DEBUG logging")
    group.add_argument("--progress", action="store_true", help="progress bars")
    group.add_argument(
        "--workers",
        type=int,
        help="worker threads for endpoint calls and translation",
    )
    group.add_argument(
        "--output-dir", dest="output_dir", help="directory for checkpoints and logs"
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _global_options()
    parser = DietaArgumentParser(
        prog="dieta",
        description=(
            "Italian-English decoder-only translation: "
            "data, training, decoding, evaluation."
        ),
        parents=[parent],
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(
        dest="command", metavar="COMMAND", parser_class=DietaArgumentParser
    )
    sub.required = True

    p = sub.add_parser(
        "prepare",
        parents=[parent],
        help="build the formatted, shuffled training corpus",
    )
    p.add_argument(
        "--en", action="append", help="English side of an aligned corpus (repeatable)"
    )
    p.add_argument(
        "--it", action="append", help="Italian side of an aligned corpus (repeatable)"
    )
    p.add_argument(
        "--tsv",
        action="append",
        help="english<TAB>italian[<TAB>tag] corpus (repeatable)",
    )
    p.add_argument(
        "--filter", action="store_true", help="keep only pairs the judge accepts"
    )
    p.add_argument(
        "--judge-url",
        dest="judge_url",
        help=f"judge endpoint (default ${JUDGE_URL_ENV})",
    )
    p.add_argument("--rejections", help="TSV log of judge rejections")
    p.add_argument("--stats", help="write the stage counters as key=value lines")
    p.add_argument(
        "--output", required=True, help="formatted corpus, one sample per line"
    )
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser(
        "train-tokenizer", parents=[parent], help="learn a byte-level BPE vocabulary"
    )
    p.add_argument(
        "--corpus", action="append", required=True, help="training text (repeatable)"
    )
    p.add_argument(
        "--vocab-size", dest="vocab_size", type=int, help=f"default {DESK_VOCAB_SIZE}"
    )
    p.add_argument(
        "--char-mode",
        dest="byte_fallback",
        action="store_false",
        default=None,
        help="character symbols with <unk> instead of byte fallback",
    )
    p.add_argument("--output", required=True, help="vocabulary file")
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train", parents=[parent], help="train one checkpoint recipe")
    p.add_argument(
        "--recipe", default="DIETA", choices=list(RECIPES), help="checkpoint variant"
    )
    p.add_argument(
        "--list-recipes", action="store_true", help="describe the recipes and exit"
    )
    p.add_argument(
        "--corpus", action="append", help="formatted, shuffled corpus (repeatable)"
    )
    p.add_argument("--vocab", help="vocabulary file")
    p.add_argument(
        "--start-from",
        dest="start_from",
        help="checkpoint of the recipe this one continues",
    )
    p.add_argument("--resume", help="interval checkpoint of an interrupted run")
    p.add_argument("--preset", choices=["desk", "full"], help="architecture preset")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float, help="default 2e-4")
    p.add_argument(
        "--warmup",
        dest="warmup_fraction",
        type=float,
        help="warmup fraction, default 0.1",
    )
    p.add_argument(
        "--batch-tokens",
        dest="max_tokens_per_batch",
        type=int,
        help="token budget per batch",
    )
    p.add_argument("--epochs", type=int)
    p.add_argument(
        "--steps", dest="max_steps", type=int, help="stop after this many steps"
    )
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "translate", parents=[parent], help="translate a file line by line"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="one source segment per line")
    p.add_argument("--output", required=True, help="one translation per line")
    p.add_argument("--direction", required=True, choices=["en-it", "it-en"])
    p.add_argument("--beam", type=int, help="beam width; 1 decodes greedily")
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument(
        "--length-penalty",
        dest="length_penalty",
        type=float,
        help="alpha, default 0.6",
    )
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser(
        "backtranslate",
        parents=[parent],
        help="synthesise pairs from monolingual text",
    )
    p.add_argument(
        "--input", required=True, help="monolingual text, one segment per line"
    )
    p.add_argument(
        "--direction",
        required=True,
        choices=["en-it", "it-en"],
        help="direction of the MT call",
    )
    p.add_argument(
        "--mt-url",
        dest="mt_url",
        help=f"translation endpoint (default ${MT_URL_ENV})",
    )
    p.add_argument("--output", required=True, help="synthetic pairs TSV")
    p.set_defaults(func=cmd_backtranslate)

    p = sub.add_parser("eval", parents=[parent], help="score a system output")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", help="source segments (needed by neural scorers)")
    p.add_argument("--direction", required=True, choices=["en-it", "it-en"])
    p.add_argument(
        "--system", help="system name in the report (default: hypothesis file stem)"
    )
    p.add_argument(
        "--tokenize", choices=list(TOKENIZERS), help="BLEU tokenisation, default intl"
    )
    p.add_argument(
        "--scorer",
        action="append",
        help="external metric name, e.g. comet (repeatable)",
    )
    p.add_argument(
        "--scorer-url",
        dest="scorer_url",
        help=f"scorer endpoint (default ${SCORER_URL_ENV})",
    )
    p.add_argument("--report", help="leaderboard TSV to update")
    p.add_argument("--render", choices=["text", "tsv"], help="print the leaderboard")
    p.add_argument("--plot", help="write the leaderboard portrait plot as HTML")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(cfg.debug)
    set_precision(cfg.precision)
    logger.info("dieta %s %s: %s", __version__, args.command, dataclasses.asdict(cfg))
    try:
        return args.func(cfg, args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DietaError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

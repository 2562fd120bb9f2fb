# - Corpus BLEU-4 and chrF computed natively with the canonical scorer's
#   tokenisation, smoothing and averaging conventions.
# - External neural scorer seam and leaderboard tables (TSV / aligned text).

import functools
import logging
import math
import re
import sys
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ._version import __version__
from .support_functions import ClientError, ContractError, ConfigError, call_with_retry

logger = logging.getLogger(__name__)

NGRAM_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2
SMOOTH_METHODS = ("exp", "floor", "add-k", "none")
SMOOTH_VALUE_DEFAULT = {"floor": 0.1, "add-k": 1}
TOKENIZERS = ("intl", "13a", "none")
DEFAULT_TOKENIZER = "intl"

REPORT_DIRECTIONS = ("en-it", "it-en")
DIRECTION_LABELS = {"en-it": "en→it", "it-en": "it→en"}

# True when larger is better
METRIC_POLARITY: Dict[str, bool] = {
    "bleu": True,
    "chrf": True,
    "bleurt": True,
    "comet": True,
    "metricx": False,
    "qe-metricx": False,
    "cometkiwi": True,
}

SCORE_SLACK = 1e-9

BEAM_SUFFIX = re.compile(r"-b(\d+)$")
SYSTEM_GROUP_LAST = "dieta"

# ------------
# Tokenisation
# ------------


def tokenize_13a(line: str) -> str:
    """mteval-v13a tokenisation as used by WMT."""
    norm = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in norm:
        norm = norm.replace("&quot;", '"').replace("&amp;", "&")
        norm = norm.replace("&lt;", "<").replace("&gt;", ">")
    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    return " ".join(norm.split())


@functools.lru_cache(maxsize=None)
def _property_chars(prefix: str) -> str:
    chars = (chr(x) for x in range(sys.maxunicode))
    return "".join(c for c in chars if unicodedata.category(c).startswith(prefix))


@functools.lru_cache(maxsize=1)
def _intl_patterns() -> Tuple[re.Pattern, re.Pattern, re.Pattern]:
    punct = re.escape(_property_chars("P"))
    symbols = re.escape(_property_chars("S"))
    return (
        re.compile(r"([^\d])([" + punct + r"])"),
        re.compile(r"([" + punct + r"])([^\d])"),
        re.compile("([" + symbols + "])"),
    )


def tokenize_intl(line: str) -> str:
    """
    International (mteval-v14) tokenisation.

    Every Unicode punctuation character is split off unless it sits between
    digits (decimal and thousands separators stay attached), and every
    Unicode symbol becomes its own token.
    """
    nondigit_punct, punct_nondigit, symbol = _intl_patterns()
    line = nondigit_punct.sub(r"\1 \2 ", line)
    line = punct_nondigit.sub(r" \1 \2", line)
    line = symbol.sub(r" \1 ", line)
    return " ".join(line.split())


def tokenize_none(line: str) -> str:
    return " ".join(line.split())


_TOKENIZER_FUNCS = {"intl": tokenize_intl, "13a": tokenize_13a, "none": tokenize_none}


def get_tokenizer(name: str):
    if name not in _TOKENIZER_FUNCS:
        raise ConfigError(
            f"unknown BLEU tokenizer {name!r}; choose one of {TOKENIZERS}"
        )
    return _TOKENIZER_FUNCS[name]


def _check_corpora(hypotheses: Sequence[str], references: Sequence[str], what: str):
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{what}: {len(hypotheses)} hypotheses but {len(references)} references"
        )
    if len(hypotheses) == 0:
        raise ContractError(f"{what}: the corpus is empty")


# ----
# BLEU
# ----


@dataclass
class BLEUScore:
    score: float
    precisions: List[float]
    bp: float
    sys_len: int
    ref_len: int
    signature: str

    def format(self, width: int = 2) -> str:
        prec = "/".join(f"{p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.score:.{width}f} {prec} (BP = {self.bp:.3f} "
            f"ratio = {self.sys_len / max(1, self.ref_len):.3f} "
            f"hyp_len = {self.sys_len} ref_len = {self.ref_len})"
        )


def extract_ngrams(tokens: Sequence[str], max_order: int = NGRAM_ORDER) -> Counter:
    ngrams = Counter()
    for n in range(1, max_order + 1):
        for i in range(len(tokens) - n + 1):
            ngrams[tuple(tokens[i : i + n])] += 1
    return ngrams


def bleu_statistics(
    hypotheses: Sequence[str],
    references: Sequence[str],
    tokenize: str = DEFAULT_TOKENIZER,
    lowercase: bool = False,
) -> Tuple[List[int], List[int], int, int]:
    """Corpus sufficient statistics ``(correct, total, sys_len, ref_len)``."""
    tok = get_tokenizer(tokenize)
    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if lowercase:
            hyp, ref = hyp.lower(), ref.lower()
        hyp_tokens = tok(hyp.rstrip()).split()
        ref_tokens = tok(ref.rstrip()).split()
        sys_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        hyp_ngrams = extract_ngrams(hyp_tokens)
        ref_ngrams = extract_ngrams(ref_tokens)
        for ngram, count in hyp_ngrams.items():
            n = len(ngram) - 1
            total[n] += count
            correct[n] += min(count, ref_ngrams.get(ngram, 0))
    return correct, total, sys_len, ref_len


def _log(value: float) -> float:
    return -9999999999.0 if value == 0 else math.log(value)


def compute_bleu(
    correct: Sequence[float],
    total: Sequence[float],
    sys_len: int,
    ref_len: int,
    smooth_method: str = "exp",
    smooth_value: Optional[float] = None,
    use_effective_order: bool = False,
) -> Tuple[float, List[float], float]:
    """
    BLEU from sufficient statistics.

    ``exp`` halves the pseudo-precision of every successive zero-match order
    (NIST method 3); ``floor`` replaces zero matches with ``smooth_value``;
    ``add-k`` adds ``smooth_value`` to the counts of orders 2 and above;
    ``none`` lets a zero precision collapse the geometric mean to 0.

    Returns
    -------
    tuple
        ``(score, precisions, brevity_penalty)``.
    """
    if smooth_method not in SMOOTH_METHODS:
        raise ConfigError(
            f"unknown smoothing {smooth_method!r}; choose one of {SMOOTH_METHODS}"
        )
    if smooth_value is None:
        smooth_value = SMOOTH_VALUE_DEFAULT.get(smooth_method, 0.0)
    correct = list(correct)
    total = list(total)

    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0
    else:
        bp = 1.0

    precisions = [0.0] * NGRAM_ORDER
    smooth_mteval = 1.0
    effective_order = NGRAM_ORDER
    for n in range(1, NGRAM_ORDER + 1):
        if smooth_method == "add-k" and n > 1:
            correct[n - 1] += smooth_value
            total[n - 1] += smooth_value
        if total[n - 1] == 0:
            break
        if use_effective_order:
            effective_order = n
        if correct[n - 1] == 0:
            if smooth_method == "exp":
                smooth_mteval *= 2
                precisions[n - 1] = 100.0 / (smooth_mteval * total[n - 1])
            elif smooth_method == "floor":
                precisions[n - 1] = 100.0 * smooth_value / total[n - 1]
        else:
            precisions[n - 1] = 100.0 * correct[n - 1] / total[n - 1]

    if sys_len == 0:
        return 0.0, precisions, bp
    log_mean = sum(_log(p) for p in precisions[:effective_order]) / effective_order
    return bp * math.exp(log_mean), precisions, bp


def bleu_signature(
    tokenize: str, smooth_method: str, lowercase: bool, effective_order: bool = False
) -> str:
    case = "lc" if lowercase else "mixed"
    eff = "yes" if effective_order else "no"
    return (
        f"nrefs:1|case:{case}|eff:{eff}|tok:{tokenize}"
        f"|smooth:{smooth_method}|version:{__version__}"
    )


def corpus_bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    tokenize: str = DEFAULT_TOKENIZER,
    smooth_method: str = "exp",
    smooth_value: Optional[float] = None,
    lowercase: bool = False,
) -> BLEUScore:
    """
    Corpus-level BLEU-4 against a single reference per segment.

    Parameters
    ----------
    hypotheses, references : sequence of str
        Detokenised segments, aligned by position.
    tokenize : str, optional
        'intl' (default), '13a' or 'none'.
    smooth_method : str, optional
        'exp' (default), 'floor', 'add-k' or 'none'.
    smooth_value : float, optional
        Value used by 'floor' (0.1) and 'add-k' (1).
    lowercase : bool, optional

    Returns
    -------
    BLEUScore
    """
    _check_corpora(hypotheses, references, "bleu")
    correct, total, sys_len, ref_len = bleu_statistics(
        hypotheses, references, tokenize, lowercase
    )
    score, precisions, bp = compute_bleu(
        correct, total, sys_len, ref_len, smooth_method, smooth_value
    )
    return BLEUScore(
        score=score,
        precisions=precisions,
        bp=bp,
        sys_len=sys_len,
        ref_len=ref_len,
        signature=bleu_signature(tokenize, smooth_method, lowercase),
    )


def bleu(hypotheses: Sequence[str], references: Sequence[str], **kwargs) -> float:
    """Corpus BLEU in [0, 100]; keyword arguments as :func:`corpus_bleu`."""
    return corpus_bleu(hypotheses, references, **kwargs).score


# ----
# chrF
# ----


def extract_char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i : i + n] for i in range(len(text) - n + 1))


def chrf_statistics(
    hypotheses: Sequence[str],
    references: Sequence[str],
    order: int = CHRF_ORDER,
    remove_whitespace: bool = True,
) -> List[int]:
    """Per order ``[hyp n-grams, ref n-grams, matches]``, summed over the corpus."""
    stats = [0] * (order * 3)
    for hyp, ref in zip(hypotheses, references):
        if remove_whitespace:
            hyp, ref = "".join(hyp.split()), "".join(ref.split())
        for i in range(order):
            hyp_ngrams = extract_char_ngrams(hyp, i + 1)
            ref_ngrams = extract_char_ngrams(ref, i + 1)
            stats[3 * i] += sum(hyp_ngrams.values())
            stats[3 * i + 1] += sum(ref_ngrams.values())
            stats[3 * i + 2] += sum((hyp_ngrams & ref_ngrams).values())
    return stats


def compute_chrf(
    stats: Sequence[int], order: int = CHRF_ORDER, beta: float = CHRF_BETA
) -> float:
    """
    F-beta of precision and recall averaged over the orders where both sides
    have at least one n-gram.
    """
    avg_prec = avg_rec = 0.0
    effective_order = 0
    for i in range(order):
        n_hyp, n_ref, n_match = stats[3 * i : 3 * i + 3]
        if n_hyp > 0 and n_ref > 0:
            avg_prec += n_match / n_hyp
            avg_rec += n_match / n_ref
            effective_order += 1
    if effective_order == 0:
        return 0.0
    avg_prec /= effective_order
    avg_rec /= effective_order
    if avg_prec + avg_rec == 0:
        return 0.0
    factor = beta**2
    return 100.0 * (1 + factor) * avg_prec * avg_rec / (factor * avg_prec + avg_rec)


def chrf_signature(
    order: int = CHRF_ORDER, beta: float = CHRF_BETA, remove_whitespace: bool = True
) -> str:
    space = "no" if remove_whitespace else "yes"
    return (
        f"nrefs:1|case:mixed|eff:yes|nc:{order}|nw:0|space:{space}"
        f"|beta:{beta}|version:{__version__}"
    )


def chrf(
    hypotheses: Sequence[str],
    references: Sequence[str],
    order: int = CHRF_ORDER,
    beta: float = CHRF_BETA,
    remove_whitespace: bool = True,
) -> float:
    """
    Corpus chrF in [0, 100]: character n-grams of orders 1 to ``order``
    with whitespace removed, recall weighted by ``beta``.
    """
    _check_corpora(hypotheses, references, "chrf")
    stats = chrf_statistics(hypotheses, references, order, remove_whitespace)
    return compute_chrf(stats, order, beta)


# ----------------
# External scorers
# ----------------


@dataclass
class ExternalScore:
    """Outcome of one external scorer run; ``mean`` is None when the call failed."""

    name: str
    segment_scores: List[float] = field(default_factory=list)
    mean: Optional[float] = None
    error: Optional[str] = None


def score_external(
    hypotheses: Sequence[str],
    sources: Sequence[str],
    references: Optional[Sequence[str]],
    scorer,
    retries: int = 1,
    backoff: float = 0.5,
) -> ExternalScore:
    """
    Score segments with an external neural metric.

    Parameters
    ----------
    hypotheses, sources : sequence of str
    references : sequence of str or None
        Required when ``scorer.reference_based`` is true.
    scorer : object
        ``score(sources, hypotheses, references) -> list of float`` plus
        ``name`` and ``reference_based`` attributes.

    Returns
    -------
    ExternalScore
        Endpoint failures are reported through ``error`` with ``mean`` left
        None, so the metric renders as absent.
    """
    name = getattr(scorer, "name", type(scorer).__name__)
    reference_based = getattr(scorer, "reference_based", True)
    if reference_based and references is None:
        raise ContractError(
            f"scorer {name!r} is reference-based but no references were given"
        )
    if len(sources) != len(hypotheses):
        raise ContractError(
            f"{name}: {len(hypotheses)} hypotheses but {len(sources)} sources"
        )
    if references is not None and len(references) != len(hypotheses):
        raise ContractError(
            f"{name}: {len(hypotheses)} hypotheses but {len(references)} references"
        )

    refs = list(references) if references is not None else None
    try:
        scores = call_with_retry(
            lambda: scorer.score(list(sources), list(hypotheses), refs),
            retries=retries,
            backoff=backoff,
            what=f"scorer {name}",
        )
    except ClientError as err:
        logger.warning("scorer %s unavailable: %s", name, err)
        return ExternalScore(name=name, error=str(err))
    if len(scores) != len(hypotheses):
        message = f"returned {len(scores)} scores for {len(hypotheses)} segments"
        logger.warning("scorer %s %s", name, message)
        return ExternalScore(name=name, error=message)
    return ExternalScore(
        name=name, segment_scores=list(scores), mean=float(np.mean(scores))
    )


# ------------------
# Leaderboard report
# ------------------


@dataclass
class MetricReport:
    """
    Scores of one system: ``scores[direction][metric]``. A None score is
    an absent entry (e.g. a scorer outage) and is never rendered as zero.
    """

    system: str
    scores: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    signatures: Dict[str, str] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)

    def set(self, direction: str, metric: str, value: Optional[float]):
        if direction not in REPORT_DIRECTIONS:
            raise ContractError(
                f"direction must be one of {REPORT_DIRECTIONS}, got {direction!r}"
            )
        metric = metric.lower()
        if value is not None and metric in ("bleu", "chrf"):
            if not -SCORE_SLACK <= value <= 100.0 + SCORE_SLACK:
                raise ContractError(f"{metric} must lie in [0, 100], got {value}")
            # exp(log(100)) lands a few ulps above 100
            value = min(max(value, 0.0), 100.0)
        self.scores.setdefault(direction, {})[metric] = value

    def get(self, direction: str, metric: str) -> Optional[float]:
        return self.scores.get(direction, {}).get(metric.lower())

    def metrics(self) -> List[str]:
        return sorted({m for d in self.scores.values() for m in d})


def evaluate(
    system: str,
    direction: str,
    hypotheses: Sequence[str],
    references: Sequence[str],
    sources: Optional[Sequence[str]] = None,
    scorers: Iterable = (),
    tokenize: str = DEFAULT_TOKENIZER,
    report: Optional[MetricReport] = None,
) -> MetricReport:
    """
    Add BLEU, chrF and any external metric for one direction to ``report``
    (a new one when omitted).
    """
    report = report or MetricReport(system)
    bleu_result = corpus_bleu(hypotheses, references, tokenize=tokenize)
    report.set(direction, "bleu", bleu_result.score)
    report.signatures["bleu"] = bleu_result.signature
    report.set(direction, "chrf", chrf(hypotheses, references))
    report.signatures["chrf"] = chrf_signature()
    for scorer in scorers:
        refs = references if getattr(scorer, "reference_based", True) else None
        if sources is None:
            name = getattr(scorer, "name", scorer)
            raise ContractError(f"scorer {name!r} needs source segments")
        result = score_external(hypotheses, sources, refs, scorer)
        report.set(direction, result.name, result.mean)
        if result.error:
            report.notes[f"{direction}:{result.name}"] = result.error
    return report


def _metric_order(metric: str) -> Tuple[int, str]:
    known = list(METRIC_POLARITY)
    return (known.index(metric), "") if metric in known else (len(known), metric)


def metric_header(metric: str) -> str:
    """'bleu(↑)', 'metricx(↓)'; unknown metrics carry no arrow."""
    if metric not in METRIC_POLARITY:
        return metric
    return f"{metric}({'↑' if METRIC_POLARITY[metric] else '↓'})"


def _system_key(name: str) -> Tuple[bool, str]:
    return (name.lower().startswith(SYSTEM_GROUP_LAST), name)


def report_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """
    Systems × (direction, metric) table. Rows are sorted lexicographically
    with DIETA variants grouped last; columns are ordered by direction then
    by the metric polarity table.
    """
    if not reports:
        raise ContractError("render_report needs at least one report")
    columns = []
    for direction in REPORT_DIRECTIONS:
        metrics = {m for r in reports for m in r.scores.get(direction, {})}
        columns += [(direction, m) for m in sorted(metrics, key=_metric_order)]
    if not columns:
        raise ContractError("the reports carry no scores")
    ordered = sorted(reports, key=lambda r: _system_key(r.system))
    frame = pd.DataFrame(
        [[r.get(d, m) for d, m in columns] for r in ordered],
        index=pd.Index([r.system for r in ordered], name="system"),
        columns=pd.MultiIndex.from_tuples(columns, names=["direction", "metric"]),
    )
    return frame.astype(float)


def _flat_header(columns) -> List[str]:
    return [f"{metric_header(m)} {DIRECTION_LABELS[d]}" for d, m in columns]


def _footnotes(reports: Sequence[MetricReport]) -> List[str]:
    matches = (BEAM_SUFFIX.search(r.system) for r in reports)
    widths = sorted({int(m.group(1)) for m in matches if m})
    notes = [
        f"The suffix -b{w} indicates that beam search with {w} beams was used."
        for w in widths
    ]
    signatures = {}
    for report in reports:
        signatures.update(report.signatures)
    notes += [f"{name} signature: {sig}" for name, sig in sorted(signatures.items())]
    for report in reports:
        for key, note in sorted(report.notes.items()):
            notes.append(f"{report.system} {key} absent: {note}")
    return notes


def render_report(
    reports: Sequence[MetricReport], fmt: str = "text", precision: int = 2
) -> str:
    """
    Render the leaderboard as aligned text or TSV.

    Missing entries are blank in TSV and '-' in text. Footnotes list the
    beam-search suffix convention when a system name ends in ``-b<N>``,
    the metric signatures and the notes of absent scores.
    """
    if fmt not in ("text", "tsv"):
        raise ConfigError(f"unknown report format {fmt!r}; choose 'text' or 'tsv'")
    frame = report_frame(reports)
    table = frame.copy()
    table.columns = _flat_header(frame.columns)
    table = table.reset_index()
    if fmt == "tsv":
        body = table.to_csv(
            sep="\t",
            index=False,
            float_format=f"%.{precision}f",
            na_rep="",
            lineterminator="\n",
        )
        notes = "".join(f"# {line}\n" for line in _footnotes(reports))
        return body + notes
    formatted = table.drop(columns="system").apply(
        lambda col: col.map(lambda v: "-" if pd.isna(v) else f"{v:.{precision}f}")
    )
    formatted.insert(0, "system", table["system"])
    body = formatted.to_string(index=False)
    notes = "\n".join(_footnotes(reports))
    return body + ("\n\n" + notes if notes else "") + "\n"


def save_report(reports: Sequence[MetricReport], path: Union[str, Path]):
    """Long-format TSV: system, direction, metric, score, note."""
    records = []
    for report in reports:
        for direction in REPORT_DIRECTIONS:
            for metric, value in sorted(report.scores.get(direction, {}).items()):
                note = report.notes.get(f"{direction}:{metric}", "")
                records.append((report.system, direction, metric, value, note))
    frame = pd.DataFrame.from_records(
        records, columns=["system", "direction", "metric", "score", "note"]
    )
    frame.to_csv(path, sep="\t", index=False, na_rep="", lineterminator="\n")


def load_report(path: Union[str, Path]) -> List[MetricReport]:
    frame = pd.read_csv(path, sep="\t", keep_default_na=False, dtype=str)
    reports: Dict[str, MetricReport] = {}
    for row in frame.itertuples(index=False):
        report = reports.setdefault(row.system, MetricReport(row.system))
        score = float(row.score) if row.score != "" else None
        report.set(row.direction, row.metric, score)
        if row.note:
            report.notes[f"{row.direction}:{row.metric}"] = row.note
    return list(reports.values())

# - Corpus ingestion, exact deduplication, LLM-judge filtering, direction
#   tagged formatting, deterministic shuffling and back-translation.

import csv
import enum
import hashlib
import logging
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from itertools import islice
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import numpy as np
import pandas as pd
from tqdm import tqdm

from .support_functions import (
    ClientError,
    InputError,
    PipelineError,
    call_with_retry,
    debug_print,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# corpus bookkeeping of the released mixtures
OPUS_PAIRS = 207_864_437
PARALLEL_SAMPLES = 2 * OPUS_PAIRS  # 415,728,874
NEWSCRAWL_SYNTHETIC_PAIRS = 144_195_695
FINEWEB_SYNTHETIC_PAIRS = 208_516_318
BT_MIXTURE_SAMPLES = PARALLEL_SAMPLES + NEWSCRAWL_SYNTHETIC_PAIRS  # 559,924,569
ALLSYNTH_MIXTURE_SAMPLES = BT_MIXTURE_SAMPLES + FINEWEB_SYNTHETIC_PAIRS  # 768,440,887

FILTER_INSTRUCTION = (
    "Given the English and Italian sentences below, are they translations "
    "of each other? Answer with yes or no only."
)

EN_TAG = "ENG:"
IT_TAG = "IT:"

PARALLEL_TAG = "parallel"
SYNTHETIC_TAG = "synthetic"

REJECT_NO = "no"
REJECT_MALFORMED = "malformed"

SHARD_SIZE = 256


class Direction(str, enum.Enum):
    EN_IT = "en-it"
    IT_EN = "it-en"

    @classmethod
    def parse(cls, value: Union[str, "Direction"]) -> "Direction":
        try:
            return cls(value)
        except ValueError:
            raise InputError(
                f"direction must be 'en-it' or 'it-en', got {value!r}"
            ) from None

    @property
    def source_tag(self) -> str:
        return EN_TAG if self is Direction.EN_IT else IT_TAG

    @property
    def target_tag(self) -> str:
        return IT_TAG if self is Direction.EN_IT else EN_TAG

    @property
    def reverse(self) -> "Direction":
        return Direction.IT_EN if self is Direction.EN_IT else Direction.EN_IT


# -----------
# Domain data
# -----------


def trim_newline(line: str) -> str:
    """Remove one trailing line terminator and nothing else."""
    if line.endswith("\r\n"):
        return line[:-2]
    if line.endswith("\n") or line.endswith("\r"):
        return line[:-1]
    return line


@dataclass(frozen=True)
class SentencePair:
    """
    Aligned English/Italian sentences.

    Parameters
    ----------
    english, italian : str
        Sentence text, trailing newline already trimmed.
    source_tag : str, optional
        Corpus provenance ('parallel', 'synthetic', a corpus name ...).
    direction : Direction, optional
        Training direction of a synthetic pair: the machine-translated side
        is the source and the human side the target.
    """

    english: str
    italian: str
    source_tag: str = PARALLEL_TAG
    direction: Optional[Direction] = None

    def __post_init__(self):
        for side in ("english", "italian"):
            text = getattr(self, side)
            if not isinstance(text, str) or not text.strip():
                raise InputError(f"{side} side of a sentence pair is empty")
            if "\n" in text or "\r" in text:
                raise InputError(f"{side} side of a sentence pair contains a newline")

    @classmethod
    def from_lines(
        cls, english: str, italian: str, source_tag: str = PARALLEL_TAG
    ) -> "SentencePair":
        return cls(trim_newline(english), trim_newline(italian), source_tag)

    @property
    def is_synthetic(self) -> bool:
        return self.source_tag == SYNTHETIC_TAG


@dataclass(frozen=True)
class FormattedSample:
    text: str
    direction: Direction


@dataclass(frozen=True)
class JudgeVerdict:
    """``keep`` is True iff the normalised reply starts with 'yes'."""

    keep: bool
    raw_reply: str
    reason: str = ""


@dataclass(frozen=True)
class Rejection:
    position: int
    reason: str
    raw_reply: str
    english: str
    italian: str


@dataclass
class PipelineStats:
    """Counters reported by the pipeline stages."""

    input_pairs: int = 0
    skipped_empty: int = 0
    duplicates_removed: int = 0
    rejected_no: int = 0
    rejected_malformed: int = 0
    kept_pairs: int = 0
    mt_failures: int = 0
    synthetic_pairs: int = 0
    output_samples: int = 0

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)

    def log(self):
        logger.info(
            "pipeline stats: %s",
            " ".join(f"{key}={value}" for key, value in self.as_dict().items()),
        )


# ------
# Corpus
# ------


def read_lines(path: Union[str, Path]) -> List[str]:
    """Lines of a UTF-8 file without their trailing newlines."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [trim_newline(line) for line in f]


def read_aligned(
    english_path: Union[str, Path],
    italian_path: Union[str, Path],
    source_tag: str = PARALLEL_TAG,
    stats: Optional[PipelineStats] = None,
) -> List[SentencePair]:
    """
    Sentence pairs from two aligned one-sentence-per-line files.

    Lines where either side is blank are skipped and counted.

    Raises
    ------
    InputError
        If the files hold different numbers of lines.
    """
    english = read_lines(english_path)
    italian = read_lines(italian_path)
    if len(english) != len(italian):
        raise InputError(
            f"misaligned corpus: {english_path} has {len(english)} lines, "
            f"{italian_path} has {len(italian)} lines"
        )
    return _build_pairs(zip(english, italian, [source_tag] * len(english)), stats)


def read_tsv(
    path: Union[str, Path],
    source_tag: str = PARALLEL_TAG,
    stats: Optional[PipelineStats] = None,
) -> List[SentencePair]:
    """
    Sentence pairs from a TSV file with columns english, italian and an
    optional provenance tag.
    """
    try:
        frame = pd.read_csv(
            path,
            sep="\t",
            header=None,
            dtype=str,
            quoting=csv.QUOTE_NONE,
            keep_default_na=False,
            na_filter=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as err:
        raise InputError(f"{path}: {err}") from None
    if frame.shape[1] not in (2, 3):
        raise InputError(
            f"{path}: expected 2 or 3 tab-separated columns, found {frame.shape[1]}"
        )
    frame.columns = ["english", "italian", "tag"][: frame.shape[1]]
    if "tag" not in frame:
        frame["tag"] = source_tag
    rows = zip(frame["english"], frame["italian"], frame["tag"].replace("", source_tag))
    return _build_pairs(rows, stats)


def _build_pairs(
    rows: Iterable[Tuple[str, str, str]], stats: Optional[PipelineStats]
) -> List[SentencePair]:
    pairs = []
    for lineno, (english, italian, tag) in enumerate(rows, start=1):
        if not english.strip() or not italian.strip():
            logger.warning("line %d: empty side, pair skipped", lineno)
            if stats is not None:
                stats.skipped_empty += 1
            continue
        direction = None
        head, _, suffix = tag.rpartition(":")
        if head and suffix in (Direction.EN_IT.value, Direction.IT_EN.value):
            tag, direction = head, Direction(suffix)
        pairs.append(SentencePair(english, italian, tag, direction))
    if stats is not None:
        stats.input_pairs += len(pairs)
    return pairs


def write_samples(samples: Iterable[FormattedSample], path: Union[str, Path]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sample in samples:
            f.write(sample.text + "\n")
            count += 1
    return count


def read_test_set(
    path: Union[str, Path], direction: Union[str, Direction]
) -> Tuple[List[str], List[str]]:
    """
    Sources and references of an evaluation set stored as an
    english<TAB>italian TSV (one segment per row).
    """
    direction = Direction.parse(direction)
    pairs = read_tsv(path, source_tag="test")
    english = [p.english for p in pairs]
    italian = [p.italian for p in pairs]
    if direction is Direction.EN_IT:
        return english, italian
    return italian, english


EN_DIGITS = (
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
)
IT_DIGITS = (
    "zero",
    "uno",
    "due",
    "tre",
    "quattro",
    "cinque",
    "sei",
    "sette",
    "otto",
    "nove",
)


def synthetic_number_corpus(
    n_pairs: int = 5000,
    seed: int = 0,
    min_digits: int = 1,
    max_digits: int = 6,
) -> List[SentencePair]:
    """
    Deterministic toy parallel corpus of digit strings spelled out digit by
    digit, in English words on one side and Italian words on the other.

    Example
    -------
    >>> synthetic_number_corpus(1, seed=3)[0]          # doctest: +SKIP
    SentencePair(english='four zero one', italian='quattro zero uno', ...)
    """
    capacity = sum(10**k for k in range(min_digits, max_digits + 1))
    if n_pairs > capacity:
        raise InputError(
            f"only {capacity} distinct digit strings "
            f"of length {min_digits}..{max_digits}"
        )
    rng = np.random.default_rng(seed)
    seen = set()
    pairs = []
    while len(pairs) < n_pairs:
        length = int(rng.integers(min_digits, max_digits + 1))
        digits = tuple(int(d) for d in rng.integers(0, 10, size=length))
        if digits in seen:
            continue
        seen.add(digits)
        pairs.append(
            SentencePair(
                " ".join(EN_DIGITS[d] for d in digits),
                " ".join(IT_DIGITS[d] for d in digits),
                "numbers",
            )
        )
    return pairs


# -------------
# Deduplication
# -------------


def pair_key(pair: SentencePair) -> bytes:
    """Digest of the exact bytes of both sides."""
    h = hashlib.blake2b(digest_size=16)
    for side in (pair.english, pair.italian):
        data = side.encode("utf-8")
        # length prefix keeps the boundary between the sides unambiguous
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.digest()


def dedup(
    pairs: Iterable[SentencePair],
    stats: Optional[PipelineStats] = None,
    progress: bool = False,
) -> Iterator[SentencePair]:
    """
    Drop exact (english, italian) duplicates, keeping first occurrences in
    their original order.
    """
    seen = set()
    removed = 0
    for pair in tqdm(pairs, desc="dedup", disable=not progress):
        key = pair_key(pair)
        if key in seen:
            removed += 1
            continue
        seen.add(key)
        yield pair
    if stats is not None:
        stats.duplicates_removed += removed
    logger.info("dedup removed %d duplicate pairs", removed)


# ---------
# Filtering
# ---------


def build_filter_prompt(pair: SentencePair) -> str:
    return f"{FILTER_INSTRUCTION}\n\nEnglish: {pair.english}\nItalian: {pair.italian}"


def normalize_reply(reply: str) -> str:
    """Lowercase and drop every unicode punctuation character."""
    return "".join(
        ch for ch in reply.lower() if not unicodedata.category(ch).startswith("P")
    )


def classify_reply(reply: str) -> Optional[str]:
    """'yes', 'no', or None for anything else."""
    tokens = normalize_reply(reply).split()
    if tokens and tokens[0] in ("yes", "no"):
        return tokens[0]
    return None


def judge_pair(pair: SentencePair, judge, backoff: float = 0.5) -> JudgeVerdict:
    """
    Ask ``judge`` whether the two sides translate each other.

    A reply that is neither yes nor no is asked once more; a second
    malformed reply rejects the pair with reason 'malformed'.

    Raises
    ------
    ClientError
        If the judge still fails after one retry.
    """
    prompt = build_filter_prompt(pair)
    reply = ""
    for _ in range(2):
        reply = call_with_retry(
            lambda: judge.judge(prompt), retries=1, backoff=backoff, what="judge"
        )
        label = classify_reply(reply)
        if label == "yes":
            return JudgeVerdict(True, reply, "yes")
        if label == "no":
            return JudgeVerdict(False, reply, REJECT_NO)
    return JudgeVerdict(False, reply, REJECT_MALFORMED)


def _ordered_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: int,
    shard_size: int = SHARD_SIZE,
) -> Iterator[Tuple[T, R]]:
    """Apply ``fn`` on a bounded worker pool, yielding results in input order."""
    iterator = iter(items)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while True:
            shard = list(islice(iterator, shard_size))
            if not shard:
                break
            futures = [pool.submit(fn, item) for item in shard]
            for item, future in zip(shard, futures):
                yield item, future


def llm_filter(
    pairs: Iterable[SentencePair],
    judge,
    rejections: Optional[List[Rejection]] = None,
    stats: Optional[PipelineStats] = None,
    workers: int = 4,
    backoff: float = 0.5,
    progress: bool = False,
    debug: bool = False,
) -> Iterator[SentencePair]:
    """
    Keep the pairs the judge accepts.

    Parameters
    ----------
    pairs : iterable of SentencePair
    judge : object
        Anything with a ``judge(prompt) -> reply`` method.
    rejections : list, optional
        Receives a :class:`Rejection` for every dropped pair.
    stats : PipelineStats, optional
    workers : int, optional
        Size of the worker pool. Output order always follows input order.
    backoff : float, optional
        Seconds before the retry of a failed judge call.

    Raises
    ------
    PipelineError
        If the judge is unreachable after the retry; the message names the
        0-based position of the pair.
    """
    kept = rejected_no = rejected_malformed = 0
    indexed = enumerate(pairs)
    results = _ordered_map(
        lambda item: judge_pair(item[1], judge, backoff), indexed, workers
    )
    for (position, pair), future in tqdm(results, desc="judge", disable=not progress):
        try:
            verdict = future.result()
        except ClientError as err:
            raise PipelineError(f"judge failed on pair {position}: {err}") from err
        if verdict.keep:
            kept += 1
            yield pair
            continue
        if verdict.reason == REJECT_NO:
            rejected_no += 1
        else:
            rejected_malformed += 1
        logger.warning(
            "pair %d rejected (%s): %r", position, verdict.reason, verdict.raw_reply
        )
        debug_print(
            debug, f"rejected pair {position}: {pair.english!r} / {pair.italian!r}"
        )
        if rejections is not None:
            rejections.append(
                Rejection(
                    position,
                    verdict.reason,
                    verdict.raw_reply,
                    pair.english,
                    pair.italian,
                )
            )
    if stats is not None:
        stats.kept_pairs += kept
        stats.rejected_no += rejected_no
        stats.rejected_malformed += rejected_malformed
    logger.info(
        "judge kept %d pairs, rejected %d (no) and %d (malformed)",
        kept,
        rejected_no,
        rejected_malformed,
    )


def write_rejection_log(rejections: Sequence[Rejection], path: Union[str, Path]):
    """TSV with one line per rejected pair (position, reason, reply and both sides)."""
    columns = ["position", "reason", "raw_reply", "english", "italian"]
    frame = pd.DataFrame([asdict(r) for r in rejections], columns=columns)
    frame.to_csv(path, sep="\t", index=False)


# ----------
# Formatting
# ----------


def format_pair(
    pair: SentencePair, direction: Union[str, Direction]
) -> FormattedSample:
    direction = Direction.parse(direction)
    if direction is Direction.EN_IT:
        text = f"{EN_TAG} {pair.english} {IT_TAG} {pair.italian}"
    else:
        text = f"{IT_TAG} {pair.italian} {EN_TAG} {pair.english}"
    return FormattedSample(text, direction)


def format_bidirectional(
    pairs: Iterable[SentencePair],
    stats: Optional[PipelineStats] = None,
) -> Iterator[FormattedSample]:
    """Two samples per pair: the en-it template first, then the it-en template."""
    count = 0
    for pair in pairs:
        yield format_pair(pair, Direction.EN_IT)
        yield format_pair(pair, Direction.IT_EN)
        count += 2
    if stats is not None:
        stats.output_samples += count


def format_samples(
    pairs: Iterable[SentencePair],
    stats: Optional[PipelineStats] = None,
) -> Iterator[FormattedSample]:
    """
    Training samples of a mixture: human pairs in both directions,
    synthetic pairs only in the direction whose target is human text.
    """
    count = 0
    for pair in pairs:
        if pair.direction is not None:
            yield format_pair(pair, pair.direction)
            count += 1
        else:
            yield format_pair(pair, Direction.EN_IT)
            yield format_pair(pair, Direction.IT_EN)
            count += 2
    if stats is not None:
        stats.output_samples += count


# ---------
# Shuffling
# ---------

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """Seed scrambler: one step of SplitMix64."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """
    xorshift64* generator (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D).

    The state is seeded with ``splitmix64(seed)`` (never zero).
    """

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULTIPLIER) & MASK64


def permutation(n: int, seed: int) -> np.ndarray:
    """
    Fisher-Yates permutation of ``range(n)``: for i = n-1 .. 1 swap i with
    ``next() % (i + 1)``.
    """
    rng = XorShift64Star(seed)
    order = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def shuffle(samples: Sequence[T], seed: int) -> List[T]:
    """Deterministic permutation of ``samples`` under ``seed``."""
    return [samples[i] for i in permutation(len(samples), seed)]


def shuffle_file(src: Union[str, Path], dst: Union[str, Path], seed: int) -> int:
    """
    Shuffle the lines of ``src`` into ``dst`` without loading the text:
    only an index of line offsets is held in memory.

    Returns
    -------
    int
        Number of lines written.
    """
    offsets = []
    with open(src, "rb") as f:
        position = 0
        for line in f:
            offsets.append(position)
            position += len(line)
    offsets = np.asarray(offsets, dtype=np.int64)
    order = permutation(len(offsets), seed)
    with open(src, "rb") as fin, open(dst, "wb") as fout:
        for index in order:
            fin.seek(int(offsets[index]))
            line = fin.readline()
            fout.write(line if line.endswith(b"\n") else line + b"\n")
    return len(offsets)


# ----------------
# Back-translation
# ----------------

TSV_UNSAFE = ("\t", "\r", "\n")


def _writable(text: str) -> bool:
    """Non-blank and free of the characters the TSV layout reserves."""
    return bool(text.strip()) and not any(ch in text for ch in TSV_UNSAFE)


def _usable_lines(monolingual: Iterable[str]) -> Iterator[str]:
    for position, line in enumerate(monolingual):
        line = trim_newline(line)
        if not line.strip():
            continue
        if not _writable(line):
            logger.warning("line %d: tab or line break in input, skipped", position)
            continue
        yield line


def backtranslate(
    monolingual: Iterable[str],
    mt,
    direction: Union[str, Direction],
    stats: Optional[PipelineStats] = None,
    workers: int = 4,
    backoff: float = 0.5,
    progress: bool = False,
) -> Iterator[SentencePair]:
    """
    Synthetic pairs from target-side monolingual text.

    Parameters
    ----------
    monolingual : iterable of str
        Human-written lines in the source language of ``direction``.
    mt : object
        Anything with a ``translate(text, direction) -> str`` method.
    direction : {'it-en', 'en-it'}
        Direction of the MT call: Italian lines with 'it-en' produce
        English sources for en-it training samples.

    Yields
    ------
    SentencePair
        Tagged 'synthetic'; the MT output is the training source and the
        human line the training target. Lines whose translation fails
        after one retry are skipped and counted.
    """
    direction = Direction.parse(direction)
    lines = _usable_lines(monolingual)

    def call(line: str) -> str:
        return call_with_retry(
            lambda: mt.translate(line, direction.value),
            retries=1,
            backoff=backoff,
            what="translation",
        )

    produced = failures = 0
    results = tqdm(
        _ordered_map(call, lines, workers),
        desc="back-translate",
        disable=not progress,
    )
    for position, (line, future) in enumerate(results):
        try:
            translation = trim_newline(future.result())
        except ClientError as err:
            failures += 1
            logger.warning("line %d: translation failed (%s), skipped", position, err)
            continue
        if not _writable(translation):
            failures += 1
            logger.warning(
                "line %d: unusable translation %r, skipped", position, translation
            )
            continue
        if direction is Direction.IT_EN:
            pair = SentencePair(translation, line, SYNTHETIC_TAG, Direction.EN_IT)
        else:
            pair = SentencePair(line, translation, SYNTHETIC_TAG, Direction.IT_EN)
        produced += 1
        yield pair
    if stats is not None:
        stats.synthetic_pairs += produced
        stats.mt_failures += failures
    logger.info("back-translation produced %d pairs, %d failures", produced, failures)


def write_pairs_tsv(pairs: Iterable[SentencePair], path: Union[str, Path]) -> int:
    """
    english<TAB>italian<TAB>tag rows (the TSV corpus layout). Synthetic
    pairs carry their training direction in the tag, e.g. 'synthetic:en-it'.
    """
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            if "\t" in pair.english or "\t" in pair.italian:
                raise InputError(
                    f"pair {count} contains a tab and cannot be written as TSV"
                )
            tag = pair.source_tag
            if pair.direction is not None:
                tag = f"{tag}:{pair.direction.value}"
            f.write(f"{pair.english}\t{pair.italian}\t{tag}\n")
            count += 1
    return count

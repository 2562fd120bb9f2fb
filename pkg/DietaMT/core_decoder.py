# - Greedy decoding and length-normalised beam search over a cached model.
# - Translation prompt protocol and batch translation of files.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .core_data_pipeline import Direction, read_lines
from .core_tensor import log_softmax_array
from .core_tokenizer import EOS_ID, Vocab
from .support_functions import (
    ConfigError,
    ContractError,
    SequenceLengthError,
    debug_print,
)

logger = logging.getLogger(__name__)

StopFn = Callable[[Sequence[int]], bool]


@dataclass(frozen=True)
class DecodeParams:
    """
    Parameters
    ----------
    max_new_tokens : int
        Generation budget.
    beam_width : int, optional
        1 decodes greedily.
    length_penalty : float, optional
        Exponent alpha of the length normalisation ``logprob / len ** alpha``.
    eos_id : int or None, optional
        Token ending a hypothesis; None disables it.
    stop_sequences : tuple of tuple of int, optional
        Token suffixes that end a hypothesis.
    """

    max_new_tokens: int = 128
    beam_width: int = 1
    length_penalty: float = 0.6
    eos_id: Optional[int] = EOS_ID
    stop_sequences: Tuple[Tuple[int, ...], ...] = ()

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be at least 1, got {self.beam_width}")
        if self.max_new_tokens < 1:
            raise ConfigError(
                f"max_new_tokens must be at least 1, got {self.max_new_tokens}"
            )


@dataclass
class BeamHypothesis:
    """
    Partial decode: generated tokens, cumulative log-probability and whether
    it has terminated. ``cache`` and ``logits`` belong to live hypotheses.
    """

    tokens: Tuple[int, ...]
    logprob: float
    finished: bool = False
    cache: object = field(default=None, repr=False, compare=False)
    logits: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def score(self, alpha: float) -> float:
        if alpha == 0 or not self.tokens:
            return self.logprob
        return self.logprob / (len(self.tokens) ** alpha)

    def extend(self, token: int, token_logprob: float) -> "BeamHypothesis":
        if self.finished:
            raise ContractError("a finished hypothesis cannot be extended")
        return BeamHypothesis(self.tokens + (token,), self.logprob + token_logprob)


def _max_seq_len(model) -> Optional[int]:
    config = getattr(model, "config", None)
    return getattr(config, "max_seq_len", None)


def _check_prompt(model, prompt_ids: Sequence[int]) -> List[int]:
    prompt = [int(t) for t in prompt_ids]
    if not prompt:
        raise ContractError("the prompt must contain at least one token")
    limit = _max_seq_len(model)
    if limit is not None and len(prompt) > limit:
        raise SequenceLengthError(
            f"prompt of {len(prompt)} tokens exceeds max_seq_len={limit}"
        )
    return prompt


def _budget(model, prompt: Sequence[int], params: DecodeParams) -> int:
    # the last generated token is never fed back, so one position past the
    # window is usable
    limit = _max_seq_len(model)
    if limit is None:
        return params.max_new_tokens
    return max(1, min(params.max_new_tokens, limit - len(prompt) + 1))


def _stops(
    tokens: Sequence[int], params: DecodeParams, stop_fn: Optional[StopFn]
) -> bool:
    if params.eos_id is not None and tokens and tokens[-1] == params.eos_id:
        return True
    for seq in params.stop_sequences:
        if seq and len(tokens) >= len(seq) and tuple(tokens[-len(seq) :]) == tuple(seq):
            return True
    return stop_fn is not None and stop_fn(tokens)


def greedy_decode(
    model,
    prompt_ids: Sequence[int],
    params: Optional[DecodeParams] = None,
    stop_fn: Optional[StopFn] = None,
) -> List[int]:
    """
    Append the most probable token (lowest id on ties) until a stop
    condition or the budget is reached.

    Parameters
    ----------
    model : object
        Provides ``new_cache()`` and ``forward_step(ids, cache) -> logits``.
    prompt_ids : sequence of int
    params : DecodeParams, optional
    stop_fn : callable, optional
        Extra stop predicate on the generated tokens.

    Returns
    -------
    list of int
        Generated tokens, the stopping token included.
    """
    params = params or DecodeParams()
    prompt = _check_prompt(model, prompt_ids)
    budget = _budget(model, prompt, params)
    cache = model.new_cache()
    logits = model.forward_step(prompt, cache)
    generated: List[int] = []
    while True:
        token = int(np.argmax(logits))
        generated.append(token)
        if _stops(generated, params, stop_fn) or len(generated) >= budget:
            return generated
        logits = model.forward_step([token], cache)


def _greedy_hypothesis(model, prompt, params, stop_fn) -> BeamHypothesis:
    cache = model.new_cache()
    logits = model.forward_step(prompt, cache)
    hyp = BeamHypothesis((), 0.0)
    budget = _budget(model, prompt, params)
    while True:
        logp = log_softmax_array(np.asarray(logits, dtype=np.float64))
        token = int(np.argmax(logp))
        hyp = hyp.extend(token, float(logp[token]))
        if _stops(hyp.tokens, params, stop_fn) or len(hyp.tokens) >= budget:
            hyp.finished = True
            return hyp
        logits = model.forward_step([token], cache)


def _top_tokens(logp: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps the lowest id first among equal scores
    return np.argsort(-logp, kind="stable")[:k]


def beam_search(
    model,
    prompt_ids: Sequence[int],
    params: Optional[DecodeParams] = None,
    stop_fn: Optional[StopFn] = None,
    debug: bool = False,
) -> BeamHypothesis:
    """
    Length-normalised beam search.

    Every live hypothesis is expanded by its ``beam_width`` best tokens;
    candidates and finished hypotheses compete for the ``beam_width`` slots
    by ``logprob / len ** alpha`` (ties: lower score first, then the
    lexicographically smaller token sequence). Search ends when every kept
    hypothesis has finished or the budget is spent.

    Returns
    -------
    BeamHypothesis
        The best finished hypothesis, or the best live one if none
        finished. The greedy path is among the candidates, so the result
        never scores below greedy decoding.
    """
    params = params or DecodeParams()
    prompt = _check_prompt(model, prompt_ids)
    alpha = params.length_penalty
    width = params.beam_width
    budget = _budget(model, prompt, params)

    root = BeamHypothesis((), 0.0, cache=model.new_cache())
    root.logits = model.forward_step(prompt, root.cache)
    beams = [root]
    finished: List[BeamHypothesis] = []

    def rank(h: BeamHypothesis):
        return (-h.score(alpha), h.tokens)

    for step in range(budget):
        candidates = []
        for beam in beams:
            if beam.finished:
                candidates.append((beam, None, 0.0))
                continue
            logp = log_softmax_array(np.asarray(beam.logits, dtype=np.float64))
            for token in _top_tokens(logp, width):
                candidates.append((beam, int(token), float(logp[token])))

        scored = []
        for parent, token, token_logprob in candidates:
            hyp = parent if token is None else parent.extend(token, token_logprob)
            scored.append((rank(hyp), hyp, parent))
        scored.sort(key=lambda item: item[0])

        beams = []
        for _, hyp, parent in scored[:width]:
            if hyp is not parent:
                hyp.finished = (
                    _stops(hyp.tokens, params, stop_fn) or len(hyp.tokens) >= budget
                )
                if hyp.finished:
                    finished.append(hyp)
                else:
                    hyp.cache = parent.cache.fork()
                    hyp.logits = model.forward_step([hyp.tokens[-1]], hyp.cache)
            beams.append(hyp)
        if debug:
            summary = ", ".join(f"{h.tokens}:{h.score(alpha):.4f}" for h in beams)
            debug_print(debug, f"beam step {step}: {summary}")
        if all(h.finished for h in beams):
            break

    pool = finished if finished else beams
    greedy = _greedy_hypothesis(model, prompt, params, stop_fn)
    best = min(pool + [greedy], key=rank)
    return BeamHypothesis(best.tokens, best.logprob, best.finished)


def decode(
    model,
    prompt_ids: Sequence[int],
    params: Optional[DecodeParams] = None,
    stop_fn=None,
) -> List[int]:
    """Greedy decoding when ``beam_width`` is 1, beam search otherwise."""
    params = params or DecodeParams()
    if params.beam_width == 1:
        return greedy_decode(model, prompt_ids, params, stop_fn)
    return list(beam_search(model, prompt_ids, params, stop_fn).tokens)


# -----------
# Translation
# -----------


def build_prompt(text: str, direction: Union[str, Direction]) -> str:
    """'ENG: {text} IT:' for en-it, 'IT: {text} ENG:' for it-en."""
    direction = Direction.parse(direction)
    return f"{direction.source_tag} {text} {direction.target_tag}"


def _cut_at_tag(text: str, tag: str) -> str:
    position = text.find(tag)
    return text if position < 0 else text[:position]


def translate(
    model,
    tokenizer: Vocab,
    text: str,
    direction: Union[str, Direction],
    params: Optional[DecodeParams] = None,
) -> str:
    """
    Translate one segment.

    The prompt is the source text between the two direction tags; decoding
    stops at EOS or as soon as the output contains the source-language tag
    again, and that tag (with anything after it) is removed.

    Returns
    -------
    str
        The stripped target text; '' for blank input, without decoding.
    """
    direction = Direction.parse(direction)
    if not text.strip():
        return ""
    params = params or DecodeParams()
    prompt = tokenizer.encode(build_prompt(text, direction))
    guard = direction.source_tag

    def stop_fn(tokens: Sequence[int]) -> bool:
        return guard in tokenizer.decode(tokens)

    generated = decode(model, prompt, params, stop_fn)
    return _cut_at_tag(tokenizer.decode(generated), guard).strip()


def translate_file(
    model,
    tokenizer: Vocab,
    src: Union[str, Path],
    dst: Union[str, Path],
    direction: Union[str, Direction],
    params: Optional[DecodeParams] = None,
    workers: int = 1,
    progress: bool = False,
) -> int:
    """
    Translate ``src`` line by line into ``dst``, keeping line order.

    Returns
    -------
    int
        Number of lines written.
    """
    lines = read_lines(src)
    params = params or DecodeParams()

    def job(line: str) -> str:
        return translate(model, tokenizer, line, direction, params)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outputs = list(
            tqdm(
                pool.map(job, lines),
                total=len(lines),
                desc="translate",
                disable=not progress,
            )
        )
    with open(dst, "w", encoding="utf-8", newline="\n") as f:
        for out in outputs:
            f.write(out.replace("\r", " ").replace("\n", " ") + "\n")
    logger.info(
        "translated %d lines %s -> %s (%s)",
        len(lines),
        src,
        dst,
        Direction.parse(direction).value,
    )
    return len(outputs)

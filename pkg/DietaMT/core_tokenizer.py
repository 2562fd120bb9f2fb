# - Byte-level (or character-level) byte-pair-merge tokenizer.
# - Vocabulary file reader/writer.

import logging
import re
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from .support_functions import ConfigError, InputError, TokenIndexError, debug_print

logger = logging.getLogger(__name__)

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
SPECIAL_PIECES = ("<pad>", "</s>", "<unk>")

DESK_VOCAB_SIZE = 4096
PAPER_VOCAB_SIZE = 51200

SPACE_MARK = "▁"
VOCAB_HEADER = "#dieta-vocab"

# a chunk is a run of non-space characters together with the whitespace
# in front of it; trailing whitespace forms its own chunk
PRETOKENIZE = re.compile(r"\s*\S+|\s+")

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


def bytes_to_unicode() -> Dict[int, str]:
    """
    Reversible map from the 256 byte values to printable unicode characters.

    Printable latin-1 bytes map to themselves; the others are shifted above
    U+0100 so that no symbol is whitespace or a control character.
    """
    keep = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    mapping = {b: chr(b) for b in keep}
    shift = 0
    for b in range(256):
        if b not in mapping:
            mapping[b] = chr(256 + shift)
            shift += 1
    return mapping


BYTE_ENCODER = bytes_to_unicode()
BYTE_DECODER = {v: k for k, v in BYTE_ENCODER.items()}


def pretokenize(text: str) -> List[str]:
    """Split ``text`` into chunks that keep their leading whitespace."""
    return PRETOKENIZE.findall(text)


def _escape(piece: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in piece)


def _unescape(piece: str) -> str:
    return re.sub(r"\\[\\tnr]", lambda m: _UNESCAPES[m.group(0)], piece)


def _merge_symbols(symbols: Sequence[str], pair: Tuple[str, str]) -> List[str]:
    left, right = pair
    merged = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            merged.append(left + right)
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return merged


class Vocab:
    """
    Immutable id <-> piece bijection with its merge ranks.

    Parameters
    ----------
    pieces : list of str
        Piece of every id; the first three are the special pieces.
    merges : list of (str, str)
        Merge rules in rank order.
    size : int
        Declared vocabulary size (an upper bound of ``len(pieces)``).
    byte_fallback : bool, optional
        Byte-level symbols when True, characters (with UNK) when False.
    """

    def __init__(
        self,
        pieces: Sequence[str],
        merges: Sequence[Tuple[str, str]],
        size: int,
        byte_fallback: bool = True,
    ):
        if tuple(pieces[: len(SPECIAL_PIECES)]) != SPECIAL_PIECES:
            raise InputError(
                "vocabulary must start with the special pieces <pad> </s> <unk>"
            )
        if len(pieces) > size:
            raise InputError(f"{len(pieces)} pieces exceed the declared size {size}")
        self.pieces = list(pieces)
        self.piece_ids = {piece: i for i, piece in enumerate(self.pieces)}
        if len(self.piece_ids) != len(self.pieces):
            raise InputError("vocabulary pieces are not unique")
        self.merges = [tuple(m) for m in merges]
        self.merge_ranks = {pair: rank for rank, pair in enumerate(self.merges)}
        self.size = size
        self.byte_fallback = byte_fallback
        self._cache: Dict[str, Tuple[int, ...]] = dict()

    def __len__(self):
        return len(self.pieces)

    def __eq__(self, other):
        if not isinstance(other, Vocab):
            return NotImplemented
        return (
            self.pieces == other.pieces
            and self.merges == other.merges
            and self.size == other.size
            and self.byte_fallback == other.byte_fallback
        )

    @property
    def mode(self) -> str:
        return "byte" if self.byte_fallback else "char"

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    def id_to_piece(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.pieces):
            raise TokenIndexError(
                f"token id {token_id} outside vocabulary of size {len(self.pieces)}"
            )
        return self.pieces[token_id]

    def piece_to_id(self, piece: str) -> int:
        return self.piece_ids.get(piece, UNK_ID)

    # encoding
    def base_symbols(self, chunk: str) -> List[str]:
        if self.byte_fallback:
            return [BYTE_ENCODER[b] for b in chunk.encode("utf-8")]
        return [SPACE_MARK if ch == " " else ch for ch in chunk]

    def _encode_chunk(self, chunk: str) -> Tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        symbols = self.base_symbols(chunk)
        while len(symbols) > 1:
            ranked = [
                (self.merge_ranks[pair], pair)
                for pair in zip(symbols, symbols[1:])
                if pair in self.merge_ranks
            ]
            if not ranked:
                break
            symbols = _merge_symbols(symbols, min(ranked)[1])
        ids = tuple(self.piece_to_id(s) for s in symbols)
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> List[int]:
        """
        Token ids of ``text``; never emits PAD or EOS.

        In byte mode every string is encodable; in character mode characters
        never seen in training map to UNK.
        """
        ids: List[int] = []
        for chunk in pretokenize(text):
            ids.extend(self._encode_chunk(chunk))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """
        Text of ``ids`` with special pieces removed.

        Raises
        ------
        TokenIndexError
            If an id is not in the vocabulary.
        """
        pieces = []
        for token_id in ids:
            token_id = int(token_id)
            piece = self.id_to_piece(token_id)
            if token_id < len(SPECIAL_PIECES):
                continue
            pieces.append(piece)
        joined = "".join(pieces)
        if self.byte_fallback:
            raw = bytes(BYTE_DECODER[ch] for ch in joined)
            return raw.decode("utf-8", errors="replace")
        return joined.replace(SPACE_MARK, " ")

    # persistence
    def save(self, path: Union[str, Path]):
        """
        Write the vocabulary file.

        Layout: one header line declaring mode, size, counts and specials,
        one ``piece<TAB>rank`` line per id, then one ``left<TAB>right`` line
        per merge in rank order.
        """
        header = "\t".join(
            [
                VOCAB_HEADER,
                f"mode={self.mode}",
                f"size={self.size}",
                f"pieces={len(self.pieces)}",
                f"merges={len(self.merges)}",
                "specials=" + ",".join(SPECIAL_PIECES),
            ]
        )
        lines = [header]
        lines.extend(
            f"{_escape(piece)}\t{rank}" for rank, piece in enumerate(self.pieces)
        )
        lines.extend(
            f"{_escape(left)}\t{_escape(right)}" for left, right in self.merges
        )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        fields = lines[0].split("\t")
        if fields[0] != VOCAB_HEADER:
            raise InputError(f"{path}: missing {VOCAB_HEADER} header line")
        header = dict(f.split("=", 1) for f in fields[1:])
        n_pieces, n_merges = int(header["pieces"]), int(header["merges"])
        body = lines[1 : 1 + n_pieces + n_merges]
        if len(body) != n_pieces + n_merges:
            raise InputError(
                f"{path}: expected {n_pieces} pieces and {n_merges} merges"
            )
        pieces = []
        for rank, line in enumerate(body[:n_pieces]):
            piece, declared = line.rsplit("\t", 1)
            if int(declared) != rank:
                raise InputError(
                    f"{path}: piece {piece!r} declared rank {declared}, "
                    f"expected {rank}"
                )
            pieces.append(_unescape(piece))
        merges = [
            tuple(_unescape(p) for p in line.split("\t")) for line in body[n_pieces:]
        ]
        return cls(pieces, merges, int(header["size"]), header["mode"] == "byte")


def train_bpe(
    corpus: Iterable[str],
    vocab_size: int = DESK_VOCAB_SIZE,
    byte_fallback: bool = True,
    progress: bool = False,
    debug: bool = False,
) -> Vocab:
    """
    Learn byte-pair merges from a corpus.

    Parameters
    ----------
    corpus : iterable of str
        Text lines.
    vocab_size : int, optional
        Upper bound of the final vocabulary (specials included). Default is 4096.
    byte_fallback : bool, optional
        If True, the base alphabet is the 256 byte symbols so every string
        is encodable. Otherwise the base alphabet is the set of characters
        seen in ``corpus``. Default is True.
    progress : bool, optional
        Show a progress bar over merges.
    debug : bool, optional
        Log every merge.

    Returns
    -------
    Vocab

    Raises
    ------
    InputError
        If the corpus holds no text.
    ConfigError
        If ``vocab_size`` cannot even hold the base alphabet.

    Notes
    -----
    The most frequent adjacent pair is merged repeatedly until the vocabulary
    is full or no pair occurs twice; ties go to the lexicographically
    smallest pair.
    """
    word_counts: Counter = Counter()
    for line in corpus:
        word_counts.update(pretokenize(line.rstrip("\n")))
    if not word_counts:
        raise InputError("cannot train a tokenizer on an empty corpus")

    scratch = Vocab(
        list(SPECIAL_PIECES),
        [],
        max(vocab_size, len(SPECIAL_PIECES)),
        byte_fallback,
    )
    words = [scratch.base_symbols(w) for w in word_counts]
    freqs = list(word_counts.values())

    if byte_fallback:
        base = [BYTE_ENCODER[b] for b in range(256)]
    else:
        base = sorted({s for w in words for s in w})
    if vocab_size < len(SPECIAL_PIECES) + len(base) + 1:
        raise ConfigError(
            f"vocab_size={vocab_size} leaves no room for merges above "
            f"{len(SPECIAL_PIECES)} specials and {len(base)} base symbols"
        )
    pieces = list(SPECIAL_PIECES) + base
    known = set(pieces)
    merges: List[Tuple[str, str]] = []
    applied = set()
    # merges that would spell a special piece are never learned
    blocked = set()

    pair_counts: Counter = Counter()
    where: Dict[Tuple[str, str], set] = defaultdict(set)
    for index, (word, freq) in enumerate(zip(words, freqs)):
        for pair in zip(word, word[1:]):
            pair_counts[pair] += freq
            where[pair].add(index)

    bar = tqdm(total=vocab_size - len(pieces), desc="bpe merges", disable=not progress)
    while len(pieces) < vocab_size and pair_counts:
        pair, count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        piece = pair[0] + pair[1]
        if piece in SPECIAL_PIECES:
            blocked.add(pair)
            del pair_counts[pair]
            where.pop(pair, None)
            continue
        if pair not in applied:
            applied.add(pair)
            merges.append(pair)
        if piece not in known:
            known.add(piece)
            pieces.append(piece)
            bar.update(1)
        debug_print(debug, f"merge {len(merges)}: {pair!r} x{count}")
        for index in sorted(where.pop(pair, ())):
            word, freq = words[index], freqs[index]
            for old in zip(word, word[1:]):
                pair_counts[old] -= freq
                if pair_counts[old] <= 0:
                    del pair_counts[old]
            word = _merge_symbols(word, pair)
            words[index] = word
            for new in zip(word, word[1:]):
                if new not in blocked:
                    pair_counts[new] += freq
                    where[new].add(index)
    bar.close()
    logger.info(
        "trained %s-level vocabulary: %d pieces, %d merges",
        scratch.mode,
        len(pieces),
        len(merges),
    )
    return Vocab(pieces, merges, vocab_size, byte_fallback)


def load_vocab(path: Optional[Union[str, Path]]) -> Vocab:
    if path is None:
        raise ConfigError("a vocabulary file is required (--vocab)")
    return Vocab.load(path)

# - Decoder-only translation transformer: post-norm layers, rotary positions,
#   query-key normalised attention with residual score accumulation and a
#   squared-ReLU feed-forward block.
# - Checkpoint reader/writer for the DIETA1 binary format.

import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core_tensor import (
    PRECISIONS,
    Tensor,
    add,
    as_tensor,
    cross_entropy,
    l2_normalize,
    layer_norm,
    masked_fill,
    matmul,
    mul,
    no_grad,
    reshape,
    rotate_pairs,
    softmax,
    squared_relu,
    swapaxes,
    take_rows,
    transpose,
)
from .support_functions import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    SequenceLengthError,
    dataclass_from_mapping,
    format_key_value_lines,
    parse_key_value_lines,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DIETA1"
SECTION_MAGIC_LENGTH = 5


# -------------
# Configuration
# -------------


@dataclass
class ModelConfig:
    """
    Architecture hyperparameters.

    The defaults are the desk configuration used by the tests and the toy
    experiment; :meth:`full` returns the full-size preset.
    """

    vocab_size: int = 512
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    ffn_multiplier: int = 4
    rope_base: float = 10000.0
    max_seq_len: int = 256
    tie_output: bool = False
    residual_scores: bool = True
    qk_norm_eps: float = 1e-6
    init_std: float = 0.02

    @classmethod
    def full(cls) -> "ModelConfig":
        """51,200-token vocabulary, width 2048, 32 heads, 6 layers, FFN x4."""
        return cls(
            vocab_size=51200,
            d_model=2048,
            n_heads=32,
            n_layers=6,
            ffn_multiplier=4,
            max_seq_len=512,
        )

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """2 layers, width 128, 4 heads, 512-token vocabulary."""
        return cls(**overrides)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.ffn_multiplier * self.d_model

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.d_head % 2 != 0:
            raise ConfigError(
                f"d_head={self.d_head} must be even for rotary embeddings"
            )
        for name in (
            "vocab_size",
            "d_model",
            "n_heads",
            "n_layers",
            "ffn_multiplier",
            "max_seq_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def projection_parameter_count(self) -> int:
        """Embedding, attention/FFN projections and (untied) output head."""
        d, v = self.d_model, self.vocab_size
        per_layer = 4 * d * d + 2 * d * self.d_ffn
        head = 0 if self.tie_output else d * v
        return v * d + self.n_layers * per_layer + head

    def parameter_count(self) -> int:
        """Total learned scalars, computed without allocating any weights."""
        norm_terms = self.n_layers * (4 * self.d_model + self.n_heads)
        return self.projection_parameter_count() + norm_terms

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return dataclass_from_mapping(
            cls, {k: v for k, v in values.items() if k in known}
        )


# ----------
# Operations
# ----------


def rope_apply(
    x: Tensor, positions: Sequence[int], rope_base: float = 10000.0
) -> Tensor:
    """
    Rotary position embedding.

    Parameters
    ----------
    x : Tensor
        Shape (..., T, n_heads, d_head).
    positions : sequence of int
        Absolute position of each of the T rows.
    rope_base : float, optional
        Base of the geometric frequency ladder, theta_i = base ** (-2i / d_head).

    Returns
    -------
    Tensor
        Same shape; pairs (2i, 2i+1) rotated by ``position * theta_i``.
    """
    x = as_tensor(x)
    d_head = x.shape[-1]
    if d_head % 2 != 0:
        raise ConfigError(
            f"rotary embeddings need an even head dimension, got {d_head}"
        )
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim != 1 or positions.shape[0] != x.shape[-3]:
        raise DimensionError(
            f"rope_apply: {positions.shape[0]} positions for input of shape {x.shape}"
        )
    if positions.size and positions.min() < 0:
        raise ContractError("rope_apply: positions must be nonnegative")
    inv_freq = rope_base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.cos(angles).astype(x.data.dtype)[:, None, :]
    sin = np.sin(angles).astype(x.data.dtype)[:, None, :]
    return rotate_pairs(x, cos, sin)


def qk_normalize(
    q: Tensor, k: Tensor, g_h: Tensor, eps: float = 1e-6
) -> Tuple[Tensor, Tensor]:
    """
    L2-normalise queries and keys along the head dimension and fold the
    learned per-head scale into the queries.

    Parameters
    ----------
    q, k : Tensor
        Shape (..., n_heads, d_head).
    g_h : Tensor
        Shape (n_heads,); replaces the 1/sqrt(d_head) scale.

    Returns
    -------
    tuple of Tensor
        ``(g_h * q_hat, k_hat)`` so that ``q . k`` equals ``g_h * (q_hat . k_hat)``.
    """
    g_h = as_tensor(g_h)
    q_hat = l2_normalize(q, eps)
    k_hat = l2_normalize(k, eps)
    return mul(q_hat, reshape(g_h, (g_h.shape[0], 1))), k_hat


def causal_mask(query_positions: np.ndarray, key_count: int) -> np.ndarray:
    """True where a key lies strictly in the future of its query."""
    return np.arange(key_count)[None, :] > np.asarray(query_positions)[:, None]


def attention_weights(scores: Tensor, query_positions: np.ndarray) -> Tensor:
    """Mask future keys of the accumulated scores and normalise each row."""
    future = causal_mask(query_positions, scores.shape[-1])
    return softmax(masked_fill(scores, future, -np.inf), axis=-1)


def _heads_first(x: Tensor) -> Tensor:
    # (..., T, H, dh) <-> (..., H, T, dh)
    lead = x.ndim - 3
    axes = list(range(lead)) + [lead + 1, lead, lead + 2]
    return transpose(x, axes)


def attention(
    x: Tensor,
    prev_scores: Optional[Tensor],
    layer: Dict[str, Tensor],
    config: ModelConfig,
    positions: np.ndarray,
    cache: Optional["DecodeCache"] = None,
    layer_index: int = 0,
) -> Tuple[Tensor, Tensor]:
    """
    Causal multi-head attention with QK-norm, rotary positions and residual
    score accumulation.

    Parameters
    ----------
    x : Tensor
        Shape (..., T, d_model).
    prev_scores : Tensor or None
        Accumulated pre-mask scores of the previous layer, shape
        (..., n_heads, T, S); None at the first layer (treated as zeros).
    layer : dict of Tensor
        Parameters of one decoder layer.
    config : ModelConfig
    positions : array of int
        Absolute positions of the T query rows.
    cache : DecodeCache, optional
        Keys/values of earlier positions; extended in place.
    layer_index : int, optional
        Index into ``cache``.

    Returns
    -------
    tuple of Tensor
        Output of shape (..., T, d_model) and this layer's accumulated scores
        (pre-mask, pre-softmax) of shape (..., n_heads, T, S).
    """
    *lead, t, d = x.shape
    if t > config.max_seq_len:
        raise SequenceLengthError(
            f"sequence of length {t} exceeds max_seq_len={config.max_seq_len}"
        )
    heads, d_head = config.n_heads, config.d_head
    split = (*lead, t, heads, d_head)

    q = reshape(matmul(x, layer["w_q"]), split)
    k = reshape(matmul(x, layer["w_k"]), split)
    v = reshape(matmul(x, layer["w_v"]), split)
    q, k = qk_normalize(q, k, layer["qk_scale"], config.qk_norm_eps)
    q = _heads_first(rope_apply(q, positions, config.rope_base))
    k = _heads_first(rope_apply(k, positions, config.rope_base))
    v = _heads_first(v)
    if cache is not None:
        k, v = cache.extend(layer_index, k, v)

    scores = matmul(q, swapaxes(k, -1, -2))
    if prev_scores is not None:
        scores = add(scores, prev_scores)
    weights = attention_weights(scores, positions)
    mixed = reshape(_heads_first(matmul(weights, v)), (*lead, t, d))
    return matmul(mixed, layer["w_o"]), scores


def feed_forward(y: Tensor, layer: Dict[str, Tensor]) -> Tensor:
    """W2 . squared_relu(W1 . y)"""
    return matmul(squared_relu(matmul(y, layer["ffn_in"])), layer["ffn_out"])


def decoder_layer(
    x: Tensor,
    prev_scores: Optional[Tensor],
    layer: Dict[str, Tensor],
    config: ModelConfig,
    positions: np.ndarray,
    cache: Optional["DecodeCache"] = None,
    layer_index: int = 0,
) -> Tuple[Tensor, Tensor]:
    """
    Post-norm decoder layer::

        y  = LN1(x + Attention(x))
        x' = LN2(y + FFN(y))
    """
    attended, scores = attention(
        x, prev_scores, layer, config, positions, cache, layer_index
    )
    y = layer_norm(add(x, attended), layer["ln1_gain"], layer["ln1_bias"])
    out = layer_norm(
        add(y, feed_forward(y, layer)), layer["ln2_gain"], layer["ln2_bias"]
    )
    return out, scores


# ------------
# Decode cache
# ------------


class DecodeCache:
    """
    Per-layer keys and values of the positions already processed.

    Accumulated scores need no storage: the score row of a new position only
    depends on the rows of the same position in earlier layers, which are
    threaded through the layers within one step.
    """

    def __init__(self, n_layers: int):
        self.keys: List[Optional[np.ndarray]] = [None] * n_layers
        self.values: List[Optional[np.ndarray]] = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def extend(self, layer_index: int, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
        past_k, past_v = self.keys[layer_index], self.values[layer_index]
        if past_k is None:
            self.keys[layer_index], self.values[layer_index] = k.data, v.data
        else:
            self.keys[layer_index] = np.concatenate([past_k, k.data], axis=-2)
            self.values[layer_index] = np.concatenate([past_v, v.data], axis=-2)
        return (
            Tensor(self.keys[layer_index], dtype=k.data.dtype),
            Tensor(self.values[layer_index], dtype=v.data.dtype),
        )

    def fork(self) -> "DecodeCache":
        # arrays are replaced, never mutated, so sharing them is safe
        clone = DecodeCache(len(self.keys))
        clone.keys = list(self.keys)
        clone.values = list(self.values)
        return clone


# -----
# Model
# -----

LAYER_PARAMETERS = (
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "ffn_in",
    "ffn_out",
    "ln1_gain",
    "ln1_bias",
    "ln2_gain",
    "ln2_bias",
    "qk_scale",
)


class DietaModel:
    """
    Parameter set and forward pass of the decoder-only translation model.

    Parameters
    ----------
    config : ModelConfig
        Architecture hyperparameters.
    seed : int, optional
        Seed of the weight initialisation. Default is 0.

    Example
    -------
    >>> from DietaMT import DietaModel, ModelConfig
    >>> model = DietaModel(ModelConfig.desk(), seed=0)
    >>> logits = model.forward([5, 6, 7])
    >>> logits.shape
    (3, 512)
    """

    def __init__(self, config: ModelConfig, seed: int = 0, initialize: bool = True):
        self.config = config.validate()
        self.params: Dict[str, Tensor] = dict()
        if initialize:
            self._initialize(seed)

    def _initialize(self, seed: int):
        c = self.config
        rng = np.random.default_rng(seed)

        def normal(name, shape):
            values = rng.normal(0.0, c.init_std, shape)
            self.params[name] = Tensor(values, requires_grad=True, name=name)

        def constant(name, shape, value):
            values = np.full(shape, value)
            self.params[name] = Tensor(values, requires_grad=True, name=name)

        normal("embed", (c.vocab_size, c.d_model))
        for i in range(c.n_layers):
            p = f"layers.{i}."
            for w in ("w_q", "w_k", "w_v", "w_o"):
                normal(p + w, (c.d_model, c.d_model))
            normal(p + "ffn_in", (c.d_model, c.d_ffn))
            normal(p + "ffn_out", (c.d_ffn, c.d_model))
            constant(p + "ln1_gain", (c.d_model,), 1.0)
            constant(p + "ln1_bias", (c.d_model,), 0.0)
            constant(p + "ln2_gain", (c.d_model,), 1.0)
            constant(p + "ln2_bias", (c.d_model,), 0.0)
            constant(p + "qk_scale", (c.n_heads,), math.sqrt(c.d_head))
        if not c.tie_output:
            normal("head", (c.d_model, c.vocab_size))

    # parameters
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def layer(self, index: int) -> Dict[str, Tensor]:
        prefix = f"layers.{index}."
        return {name: self.params[prefix + name] for name in LAYER_PARAMETERS}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def output_projection(self) -> Tensor:
        if self.config.tie_output:
            return transpose(self.params["embed"], (1, 0))
        return self.params["head"]

    def new_cache(self) -> DecodeCache:
        return DecodeCache(self.config.n_layers)

    # forward
    def forward(self, tokens, cache: Optional[DecodeCache] = None) -> Tensor:
        """
        Logits for every position of ``tokens``.

        Parameters
        ----------
        tokens : array_like of int
            Shape (T,) or (B, T).
        cache : DecodeCache, optional
            When given, ``tokens`` continue the cached prefix and the cache is
            extended.

        Returns
        -------
        Tensor
            Shape (T, vocab) or (B, T, vocab).

        Raises
        ------
        TokenIndexError
            If an id is outside the vocabulary.
        SequenceLengthError
            If the (cached + new) length exceeds ``max_seq_len``.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
            raise ContractError(
                "forward expects a non-empty (T,) or (B, T) id array, "
                f"got shape {ids.shape}"
            )
        offset = 0 if cache is None else cache.length
        t = ids.shape[-1]
        limit = self.config.max_seq_len
        if offset + t > limit:
            raise SequenceLengthError(
                f"sequence of length {offset + t} exceeds max_seq_len={limit}"
            )
        positions = offset + np.arange(t)
        x = take_rows(self.params["embed"], ids)
        scores = None
        for i in range(self.config.n_layers):
            x, layer_scores = decoder_layer(
                x, scores, self.layer(i), self.config, positions, cache, i
            )
            scores = layer_scores if self.config.residual_scores else None
        return matmul(x, self.output_projection())

    __call__ = forward

    def loss(self, ids: np.ndarray, mask: np.ndarray):
        """
        Next-token cross entropy over a padded batch.

        Parameters
        ----------
        ids : array of int
            Shape (B, L): token ids including the trailing EOS, PAD-padded.
        mask : array of bool
            Shape (B, L): True on non-PAD positions.
        """
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        logits = self.forward(ids[..., :-1])
        return cross_entropy(logits, ids[..., 1:], mask[..., 1:])

    def forward_step(self, new_ids: Sequence[int], cache: DecodeCache) -> np.ndarray:
        """Logits (vocab,) of the last of ``new_ids``, extending ``cache``."""
        with no_grad():
            logits = self.forward(np.asarray(new_ids, dtype=np.int64), cache=cache)
        return logits.data[-1]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        expected = set(self.params) if self.params else None
        if expected is not None and set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise CheckpointError(
                f"parameter names differ: missing={missing} unexpected={extra}"
            )
        for name, array in arrays.items():
            if name in self.params and self.params[name].shape != array.shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {array.shape} "
                    f"!= model shape {self.params[name].shape}"
                )
            self.params[name] = Tensor(
                array.copy(), requires_grad=True, name=name, dtype=array.dtype
            )


# ----------
# Checkpoint
# ----------


def _write_section_header(f: BinaryIO, magic: bytes, header: Dict[str, object]):
    encoded = format_key_value_lines(header).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)


def write_arrays(f: BinaryIO, arrays: Dict[str, np.ndarray], dtype: str):
    """Parameter records: name length, name, rank, extents, raw little-endian floats."""
    code = "<f4" if dtype == "float32" else "<f8"
    f.write(struct.pack("<I", len(arrays)))
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=code).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise CheckpointError("truncated checkpoint file")
    return chunk


def read_arrays(f: BinaryIO, dtype: str) -> Dict[str, np.ndarray]:
    code = "<f4" if dtype == "float32" else "<f8"
    if dtype not in PRECISIONS:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype!r}")
    itemsize = 4 if dtype == "float32" else 8
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    arrays = dict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4))
        shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        raw = _read_exact(f, size * itemsize)
        values = np.frombuffer(raw, dtype=code).astype(PRECISIONS[dtype])
        arrays[name] = values.reshape(shape)
    return arrays


def save_checkpoint(
    path: Union[str, Path],
    model: DietaModel,
    dtype: Optional[str] = None,
    sections: Sequence[Tuple[bytes, Dict[str, object], Dict[str, np.ndarray]]] = (),
):
    """
    Write ``model`` in the DIETA1 format, followed by optional extra sections.

    Parameters
    ----------
    path : str or Path
        Output file.
    model : DietaModel
    dtype : str, optional
        'float32' or 'float64' payload; defaults to the parameters' dtype.
    sections : sequence of (magic, header, arrays)
        Extra sections appended after the parameters (optimizer state).
    """
    if dtype is None:
        is_double = model.params["embed"].data.dtype == np.float64
        dtype = "float64" if is_double else "float32"
    header = dict(model.config.to_dict())
    header["dtype"] = dtype
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        _write_section_header(f, CHECKPOINT_MAGIC, header)
        write_arrays(f, model.state_dict(), dtype)
        for magic, section_header, arrays in sections:
            section_header = dict(section_header)
            section_header["dtype"] = dtype
            _write_section_header(f, magic, section_header)
            write_arrays(f, arrays, dtype)
    tmp.replace(path)
    logger.info("wrote checkpoint %s (%d tensors, %s)", path, len(model.params), dtype)


def load_checkpoint(
    path: Union[str, Path],
) -> Tuple[DietaModel, Dict[bytes, Tuple[Dict[str, str], Dict[str, np.ndarray]]]]:
    """
    Read a DIETA1 checkpoint.

    Returns
    -------
    tuple
        The model and a mapping ``magic -> (header, arrays)`` of any extra
        sections found after the parameters.

    Raises
    ------
    CheckpointError
        If the magic bytes or the layout do not match.
    """
    sections = dict()
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a DIETA1 checkpoint (magic {magic!r})")
        header = _read_header(f)
        dtype = header.pop("dtype", "float32")
        config = ModelConfig.from_dict(header)
        model = DietaModel(config, initialize=False)
        arrays = read_arrays(f, dtype)
        model.params = {
            name: Tensor(array, requires_grad=True, name=name, dtype=array.dtype)
            for name, array in arrays.items()
        }
        while True:
            magic = f.read(SECTION_MAGIC_LENGTH)
            if not magic:
                break
            section_header = _read_header(f)
            section_dtype = section_header.get("dtype", dtype)
            sections[magic] = (section_header, read_arrays(f, section_dtype))
    _check_names(model, config)
    return model, sections


def _read_header(f: BinaryIO) -> Dict[str, str]:
    (length,) = struct.unpack("<I", _read_exact(f, 4))
    return parse_key_value_lines(_read_exact(f, length).decode("utf-8"))


def _check_names(model: DietaModel, config: ModelConfig):
    names = {"embed"} | {
        f"layers.{i}.{p}" for i in range(config.n_layers) for p in LAYER_PARAMETERS
    }
    if not config.tie_output:
        names.add("head")
    if set(model.params) != names:
        raise CheckpointError(
            "checkpoint parameters do not match the configuration: "
            f"{sorted(set(model.params) ^ names)}"
        )

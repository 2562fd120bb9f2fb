# - Lion optimizer, warmup + linear decay schedule, token-budgeted batching.
# - Training loop with interval checkpoints, resume and a TSV metrics log.
# - The five released checkpoint recipes as configuration presets.

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .core_data_pipeline import (
    ALLSYNTH_MIXTURE_SAMPLES,
    BT_MIXTURE_SAMPLES,
    PARALLEL_SAMPLES,
    FormattedSample,
    permutation,
)
from .core_model import DietaModel, ModelConfig, load_checkpoint, save_checkpoint
from .core_tensor import Tensor, backward, get_precision, precision, zero_grad
from .core_tokenizer import EOS_ID, PAD_ID, Vocab
from .support_functions import CheckpointError, ConfigError, ContractError, debug_print

logger = logging.getLogger(__name__)

OPTIMIZER_MAGIC = b"LION1"
METRICS_COLUMNS = ["step", "lr", "loss", "tokens_per_sec"]


# ---------
# Optimizer
# ---------


def lion_step(
    param: np.ndarray,
    grad: np.ndarray,
    momentum: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    weight_decay: float = 0.01,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One Lion update of a single parameter.

    ::

        c  = beta1 * m + (1 - beta1) * g
        p' = p - lr * (sign(c) + weight_decay * p)
        m' = beta2 * m + (1 - beta2) * g

    Returns
    -------
    tuple of numpy.ndarray
        New parameter and new momentum; the inputs are not modified.

    Raises
    ------
    ContractError
        If the three arrays do not have the same shape.
    """
    param, grad, momentum = np.asarray(param), np.asarray(grad), np.asarray(momentum)
    if not param.shape == grad.shape == momentum.shape:
        raise ContractError(
            f"lion_step: parameter {param.shape}, gradient {grad.shape} "
            f"and momentum {momentum.shape} differ"
        )
    interpolated = beta1 * momentum + (1 - beta1) * grad
    updated = param - lr * (np.sign(interpolated) + weight_decay * param)
    new_momentum = beta2 * momentum + (1 - beta2) * grad
    return (
        updated.astype(param.dtype, copy=False),
        new_momentum.astype(momentum.dtype, copy=False),
    )


@dataclass
class LionState:
    """
    Momentum buffers (one per named parameter, zero-initialised) and the
    optimizer hyperparameters.
    """

    momenta: Dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor], **hyper) -> "LionState":
        return cls({name: np.zeros_like(p.data) for name, p in params.items()}, **hyper)

    def apply(self, params: Dict[str, Tensor], lr: float):
        """Update every parameter holding a gradient, in place."""
        for name, p in params.items():
            if p.grad is None:
                continue
            if name not in self.momenta:
                raise CheckpointError(f"optimizer state has no momentum for {name}")
            p.data, self.momenta[name] = lion_step(
                p.data,
                p.grad,
                self.momenta[name],
                lr,
                self.beta1,
                self.beta2,
                self.weight_decay,
            )
        self.step += 1

    def section(
        self, total_steps: int
    ) -> Tuple[bytes, Dict[str, object], Dict[str, np.ndarray]]:
        header = {
            "step": self.step,
            "total_steps": total_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "weight_decay": self.weight_decay,
        }
        return OPTIMIZER_MAGIC, header, self.momenta

    @classmethod
    def from_section(
        cls, header: Dict[str, str], arrays: Dict[str, np.ndarray]
    ) -> "LionState":
        return cls(
            dict(arrays),
            beta1=float(header["beta1"]),
            beta2=float(header["beta2"]),
            weight_decay=float(header["weight_decay"]),
            step=int(header["step"]),
        )


# --------
# Schedule
# --------


@dataclass(frozen=True)
class Schedule:
    """
    Linear warmup from 0 to ``peak_lr`` over the first ``warmup_fraction``
    of the steps, then linear decay to ``floor_lr`` at ``total_steps``.
    """

    total_steps: int
    peak_lr: float = 2e-4
    warmup_fraction: float = 0.10
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(
                f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}"
            )
        if self.floor_lr < 0 or self.floor_lr > self.peak_lr:
            raise ConfigError(f"floor_lr must lie in [0, peak_lr], got {self.floor_lr}")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))


def lr_at(step: int, schedule: Schedule) -> float:
    """
    Learning rate at ``step`` (0 <= step <= total_steps).

    Raises
    ------
    ContractError
        If ``step`` is outside the schedule.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(
            f"step {step} outside the schedule [0, {schedule.total_steps}]"
        )
    warmup = schedule.warmup_steps
    if step <= warmup:
        return schedule.peak_lr * (step / warmup)
    remaining = (schedule.total_steps - step) / (schedule.total_steps - warmup)
    return schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * remaining


# -------
# Recipes
# -------


@dataclass(frozen=True)
class TrainRecipe:
    """
    One released checkpoint variant.

    Parameters
    ----------
    name : str
    mixture : tuple of str
        Corpora of the training mixture.
    starts_from : str, optional
        Recipe whose checkpoint initialises the run (None: from scratch).
    epoch : int
        Cumulative epoch count the finished checkpoint has seen.
    samples : int, optional
        Published number of training examples of the mixture.
    """

    name: str
    mixture: Tuple[str, ...]
    starts_from: Optional[str] = None
    epoch: int = 1
    samples: Optional[int] = None

    @property
    def slug(self) -> str:
        return recipe_slug(self.name)


def recipe_slug(name: str) -> str:
    """'DIETA' -> 'dieta', '+cont' -> 'dieta-cont'"""
    return "dieta" if name == "DIETA" else "dieta-" + name.lstrip("+").lower()


RECIPES: Dict[str, TrainRecipe] = {
    "DIETA": TrainRecipe("DIETA", ("parallel",), None, 1, PARALLEL_SAMPLES),
    "+BT": TrainRecipe(
        "+BT", ("parallel", "newscrawl-bt"), None, 1, BT_MIXTURE_SAMPLES
    ),
    "+cont": TrainRecipe(
        "+cont", ("parallel", "newscrawl-bt"), "DIETA", 2, BT_MIXTURE_SAMPLES
    ),
    "+nosynth": TrainRecipe("+nosynth", ("parallel",), "DIETA", 2, PARALLEL_SAMPLES),
    "+allsynth": TrainRecipe(
        "+allsynth",
        ("parallel", "newscrawl-bt", "fineweb-bt"),
        "+cont",
        3,
        ALLSYNTH_MIXTURE_SAMPLES,
    ),
}


def get_recipe(name: str) -> TrainRecipe:
    try:
        return RECIPES[name]
    except KeyError:
        raise ConfigError(
            f"unknown recipe {name!r}; choose from {', '.join(RECIPES)}"
        ) from None


# --------
# Batching
# --------


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ids.shape


@dataclass
class BatchStats:
    samples: int = 0
    tokens: int = 0
    truncated: int = 0
    batches: int = 0


def _pad(sequences: List[List[int]]) -> Batch:
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return Batch(ids, mask)


def make_batches(
    samples: Iterable[Union[str, FormattedSample]],
    tokenizer: Vocab,
    max_tokens_per_batch: int,
    max_seq_len: int,
    stats: Optional[BatchStats] = None,
) -> Iterator[Batch]:
    """
    Encode samples, append EOS, truncate and pack them into padded batches.

    Samples are taken in order and added to the current batch while
    ``rows * longest_row`` stays within ``max_tokens_per_batch``; a sample
    that alone exceeds the budget forms its own batch.

    Yields
    ------
    Batch
        ``ids`` (B, L) padded with PAD and ``mask`` (B, L) True on real tokens.
    """
    if max_tokens_per_batch < 1 or max_seq_len < 2:
        raise ConfigError(
            "max_tokens_per_batch must be positive and max_seq_len at least 2"
        )
    stats = stats if stats is not None else BatchStats()
    current: List[List[int]] = []
    longest = 0
    for sample in samples:
        text = sample.text if isinstance(sample, FormattedSample) else sample
        seq = tokenizer.encode(text) + [EOS_ID]
        if len(seq) > max_seq_len:
            seq = seq[:max_seq_len]
            stats.truncated += 1
        stats.samples += 1
        stats.tokens += len(seq)
        padded_size = (len(current) + 1) * max(longest, len(seq))
        if current and padded_size > max_tokens_per_batch:
            stats.batches += 1
            yield _pad(current)
            current, longest = [], 0
        current.append(seq)
        longest = max(longest, len(seq))
    if current:
        stats.batches += 1
        yield _pad(current)
    if stats.truncated:
        logger.info(
            "truncated %d of %d samples to %d tokens",
            stats.truncated,
            stats.samples,
            max_seq_len,
        )


# --------
# Training
# --------


@dataclass
class TrainConfig:
    """Optimisation and bookkeeping settings of one training run."""

    peak_lr: float = 2e-4
    warmup_fraction: float = 0.10
    floor_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    max_tokens_per_batch: int = 4096
    epochs: int = 1
    max_steps: Optional[int] = None
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 10
    output_dir: str = "runs"
    progress: bool = False

    def schedule(self, total_steps: int) -> Schedule:
        return Schedule(total_steps, self.peak_lr, self.warmup_fraction, self.floor_lr)


@dataclass
class TrainResult:
    model: DietaModel
    losses: List[float] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    metrics: Optional[Path] = None
    steps: int = 0


def checkpoint_path(
    output_dir: Union[str, Path], recipe_name: str, step: Optional[int] = None
) -> Path:
    stem = recipe_slug(recipe_name)
    if step is not None:
        stem = f"{stem}-step{step:07d}"
    return Path(output_dir) / f"{stem}.ckpt"


def _starting_model(
    recipe: TrainRecipe,
    starting_checkpoint: Optional[Union[str, Path]],
    output_dir: Path,
):
    if recipe.starts_from is None:
        return None
    if starting_checkpoint:
        path = Path(starting_checkpoint)
    else:
        path = checkpoint_path(output_dir, recipe.starts_from)
    if not path.exists():
        raise ConfigError(
            f"recipe {recipe.name} continues {recipe.starts_from}, "
            f"but {path} does not exist"
        )
    model, _ = load_checkpoint(path)
    logger.info("starting %s from %s", recipe.name, path)
    return model


def _epoch_order(n_batches: int, epoch: int, seed: int) -> np.ndarray:
    # the corpus is shuffled once upstream; later epochs revisit batches
    # in a seeded order
    if epoch == 0:
        return np.arange(n_batches)
    return permutation(n_batches, seed + epoch)


def train(
    recipe: Union[str, TrainRecipe],
    config: ModelConfig,
    data: Sequence[Union[str, FormattedSample]],
    tokenizer: Vocab,
    train_config: Optional[TrainConfig] = None,
    starting_checkpoint: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    debug: bool = False,
) -> TrainResult:
    """
    Train one recipe on a formatted, shuffled corpus.

    Parameters
    ----------
    recipe : str or TrainRecipe
        Recipe name (see ``RECIPES``) or instance.
    config : ModelConfig
        Architecture of a run from scratch; continued recipes take the
        architecture of their starting checkpoint.
    data : sequence of str or FormattedSample
        Training samples in their final order.
    tokenizer : Vocab
    train_config : TrainConfig, optional
    starting_checkpoint : path, optional
        Checkpoint of ``recipe.starts_from``; defaults to
        ``<output_dir>/<slug>.ckpt``.
    resume_from : path, optional
        Interval checkpoint of an interrupted run of the same recipe and data.
    debug : bool, optional

    Returns
    -------
    TrainResult
        The trained model, per-step losses of this invocation and the paths
        of the final checkpoint and metrics log.

    Raises
    ------
    ConfigError
        If a continued recipe's starting checkpoint is missing.
    """
    recipe = get_recipe(recipe) if isinstance(recipe, str) else recipe
    tc = train_config or TrainConfig()
    output_dir = Path(tc.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = output_dir / f"{recipe.slug}.metrics.tsv"

    with precision(tc.precision):
        state = None
        if resume_from is not None:
            model, sections = load_checkpoint(resume_from)
            if OPTIMIZER_MAGIC not in sections:
                raise CheckpointError(f"{resume_from} carries no optimizer state")
            state = LionState.from_section(*sections[OPTIMIZER_MAGIC])
            logger.info(
                "resuming %s at step %d from %s", recipe.name, state.step, resume_from
            )
        else:
            model = _starting_model(recipe, starting_checkpoint, output_dir)
            if model is None:
                model = DietaModel(config, seed=tc.seed)
            if metrics_path.exists():
                metrics_path.unlink()
        if state is None:
            state = LionState.zeros_like(
                model.params,
                beta1=tc.beta1,
                beta2=tc.beta2,
                weight_decay=tc.weight_decay,
            )

        batch_stats = BatchStats()
        batches = list(
            make_batches(
                data,
                tokenizer,
                tc.max_tokens_per_batch,
                model.config.max_seq_len + 1,
                batch_stats,
            )
        )
        if not batches:
            raise ConfigError("no training data")
        plan = [
            int(i)
            for epoch in range(tc.epochs)
            for i in _epoch_order(len(batches), epoch, tc.seed)
        ]
        if tc.max_steps is not None:
            plan = plan[: tc.max_steps]
        schedule = tc.schedule(len(plan))
        logger.info(
            "training %s: %d samples, %d batches, %d steps, %d parameters, %s",
            recipe.name,
            batch_stats.samples,
            len(batches),
            len(plan),
            model.num_parameters(),
            get_precision(),
        )

        result = TrainResult(model, metrics=metrics_path)
        rows: List[Dict[str, float]] = []
        params = model.params
        steps = range(state.step + 1, len(plan) + 1)
        for step in tqdm(steps, desc=recipe.name, disable=not tc.progress):
            batch = batches[plan[step - 1]]
            lr = lr_at(step, schedule)
            started = time.perf_counter()
            zero_grad(params.values())
            loss = model.loss(batch.ids, batch.mask)
            backward(loss, params=params.values())
            state.apply(params, lr)
            elapsed = max(time.perf_counter() - started, 1e-9)
            value = float(loss.data)
            result.losses.append(value)
            throughput = batch.n_tokens / elapsed
            rows.append(
                {"step": step, "lr": lr, "loss": value, "tokens_per_sec": throughput}
            )
            if tc.log_every and step % tc.log_every == 0:
                logger.info(
                    "step %d lr %.3e loss %.4f tok/s %.0f", step, lr, value, throughput
                )
            debug_print(debug, f"step {step}: batch {batch.shape} loss {value!r}")
            if (
                tc.checkpoint_every
                and step % tc.checkpoint_every == 0
                and step < len(plan)
            ):
                _append_metrics(rows, metrics_path)
                rows = []
                save_checkpoint(
                    checkpoint_path(output_dir, recipe.name, step),
                    model,
                    sections=[state.section(len(plan))],
                )
        _append_metrics(rows, metrics_path)
        final = checkpoint_path(output_dir, recipe.name)
        save_checkpoint(final, model, sections=[state.section(len(plan))])
    result.checkpoint = final
    result.steps = state.step
    return result


def _append_metrics(rows: List[Dict[str, float]], path: Path):
    if not rows:
        return
    frame = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    frame.to_csv(path, sep="\t", index=False, mode="a", header=not path.exists())


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t")


def describe_recipes() -> str:
    lines = []
    for recipe in RECIPES.values():
        origin = "scratch" if recipe.starts_from is None else recipe.starts_from
        samples = f"{recipe.samples:,}" if recipe.samples else "-"
        lines.append(
            f"{recipe.name:<10} from {origin:<7} epoch {recipe.epoch} "
            f"mixture {'+'.join(recipe.mixture)} ({samples})"
        )
    return "\n".join(lines)

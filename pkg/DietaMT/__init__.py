from ._version import __version__
from .core_data_pipeline import (
    Direction,
    SentencePair,
    backtranslate,
    dedup,
    format_bidirectional,
    format_pair,
    llm_filter,
    shuffle,
)
from .core_decoder import DecodeParams, beam_search, greedy_decode, translate
from .core_metrics import MetricReport, bleu, chrf, render_report, score_external
from .core_model import DietaModel, ModelConfig, load_checkpoint, save_checkpoint
from .core_portrait_plot import report_portrait_plot
from .core_tokenizer import Vocab, train_bpe
from .core_trainer import RECIPES, Schedule, TrainConfig, lion_step, lr_at, train

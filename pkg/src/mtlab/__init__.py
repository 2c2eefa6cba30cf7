"""Low-resource machine translation by transfer learning, on numpy.

Modules: :mod:`~mtlab.autodiff` (reverse-mode tensors), :mod:`~mtlab.tokenizer`
(byte-level BPE), :mod:`~mtlab.model` (encoder-decoder transformer),
:mod:`~mtlab.training` (Adam, transfer strategies), :mod:`~mtlab.metrics`
(chrF), :mod:`~mtlab.corpus` (parallel data and synthetic languages) and
:mod:`~mtlab.harness` (experiments, reports, command line).
"""

from .corpus import ParallelCorpus, load_corpus, make_shared_task_replica, stats
from .harness import ExperimentPlan, cli_main, render_report, run_experiment
from .metrics import ChrFConfig, chrf_corpus, chrf_segment
from .model import ModelConfig, Transformer, forward, greedy_decode, init_params
from .tokenizer import Vocab, train_bpe
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ParallelCorpus",
    "load_corpus",
    "make_shared_task_replica",
    "stats",
    "ExperimentPlan",
    "cli_main",
    "render_report",
    "run_experiment",
    "ChrFConfig",
    "chrf_corpus",
    "chrf_segment",
    "ModelConfig",
    "Transformer",
    "forward",
    "greedy_decode",
    "init_params",
    "Vocab",
    "train_bpe",
    "TrainConfig",
    "train",
]

"""taskweave: desk-scale lab for interleaved multi-task metric learning.

Trains one unit-norm embedding space on several synthetic recognition tasks
of differing granularity via gradient-coupled interleaved curricula, and
analyzes the resulting space (linear task probes, principal angles between
task subspaces, cross-task PC-subspace evaluation).
"""

from .config import ExperimentConfig, default_config
from .datagen import Corpus, CorpusSpec, Loader, TaskGenSpec, build_corpus
from .experiments import run, run_forgetting_comparison, score_paper_table

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusSpec",
    "ExperimentConfig",
    "Loader",
    "TaskGenSpec",
    "build_corpus",
    "default_config",
    "run",
    "run_forgetting_comparison",
    "score_paper_table",
]

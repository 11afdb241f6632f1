"""Fairness-aware dual data augmentation lab for graph collaborative filtering.

Pipeline: pretrain a performance model and a biased (attribute-capturing)
model, then train a debiased model whose forward pass prunes sensitive
edges, masks sensitive embedding dimensions, reconstructs the interaction
signal on the augmented view, aligns the two views contrastively, and
penalizes HSIC dependence between augmented and biased user
representations. Evaluation covers Recall/NDCG utility and DP/EO group
fairness over top-K lists.
"""

from .config import RunConfig, build_config
from .data import generate_synthetic, load_lastfm, load_movielens, split_dataset
from .metrics import evaluate
from .pipeline import run_pipeline, run_single

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "build_config", "generate_synthetic", "load_lastfm",
    "load_movielens", "split_dataset", "evaluate", "run_pipeline",
    "run_single", "__version__",
]

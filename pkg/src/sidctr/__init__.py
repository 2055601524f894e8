"""Semantic-ID enhanced cold-start item representations for CTR prediction.

The package assembles four pieces around one experiment: a hierarchical
item quantizer (residual k-means plus rotated product quantization), a
small numpy autodiff substrate, a CTR model whose item representation
blends id embeddings with quantized-code embeddings through an adaptive
gate and two auxiliary losses, and a synthetic cold/warm benchmark with an
ablation harness that measures what each piece buys on cold items.
"""

from . import cli, datagen, diffcore, evaluation, io, model, quantizer
from .datagen import Catalog, GenConfig, TrainingSample
from .diffcore import ParameterStore, Tensor, grad_check
from .evaluation import (Benchmark, MetricsReport, ablation, auc,
                         directional_checks, gauc, prepare_benchmark, report)
from .model import VARIANTS, CTRModel, HyperParams, train
from .quantizer import (OPQEncoder, RQEncoder, SemanticId,
                        assign_semantic_ids, opq_code_similarity_topk,
                        train_opq, train_rq)

__version__ = "0.1.0"

__all__ = [
    "cli", "datagen", "diffcore", "evaluation", "io", "model", "quantizer",
    "Catalog", "GenConfig", "TrainingSample",
    "ParameterStore", "Tensor", "grad_check",
    "Benchmark", "MetricsReport", "ablation", "auc", "directional_checks",
    "gauc", "prepare_benchmark", "report",
    "VARIANTS", "CTRModel", "HyperParams", "train",
    "OPQEncoder", "RQEncoder", "SemanticId", "assign_semantic_ids",
    "opq_code_similarity_topk", "train_opq", "train_rq",
    "__version__",
]

"""Layer-wise attention pooling for sentence embeddings.

Contrastive training of an attention pooler over transformer layers, STS
Spearman evaluation with per-layer sweeps, and an IVF-flat semantic-search
harness, all in float64 numpy with a reverse-mode tape.
"""

from .autodiff import Rng, Tensor, cosine_sim, dropout_mask, grad_check, log_sum_exp, softmax_rows
from .encoder import Encoder, EncoderConfig, FrozenFeatures, LayerStack, Tokenizer, load_frozen, save_frozen
from .objectives import loss_sup_basic, loss_sup_hard, loss_unsup, similarity_matrix
from .pooler import AttentionReport, PoolerParams, PoolStrategy, attention_scores, pool, pool_layerwise, project
from .search import EmbeddingMatrix, IvfIndex, SearchMetrics, build_index, embed_corpus, evaluate_search, kmeans_fit, query
from .sts_eval import StsRecord, SweepResult, attention_report, evaluate, layer_sweep, spearman
from .trainer import Checkpoint, TrainConfig, init_params, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

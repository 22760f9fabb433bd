"""Momentum contrast with soft uniform-negative pseudo-labels and cross-similarity regularization."""

from .bank import MemoryBank, ProbQueue, assemble_peers, enqueue_dequeue, extend_marginals
from .encoder import EncoderParams, MomentumPair, backward, embed, forward, init_encoder, momentum_update
from .eval import EvalReport, knn_eval, linear_probe
from .loss import LossReport, classical_loss, cross_entropy_term, xmoco_loss
from .matrix import cosine_similarity, l2_normalize_columns, softmax_columns
from .probability import ProbMatrix, get_prob
from .pseudolabel import PseudoLabelMatrix, one_hot_labels, oracle_labels, sinkhorn_labels
from .training import TrainConfig, cosine_lr, run, sgd_update, train_step

__version__ = "0.1.0"

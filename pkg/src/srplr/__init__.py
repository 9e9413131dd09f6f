"""Sequential recommendation with probabilistic logical reasoning over Beta embeddings."""

from .beta import (
    AttentionNet,
    BetaEmbedding,
    TransferParams,
    attention_weights,
    beta_mean,
    conjoin,
    disjoin,
    kl_distance,
    negate,
    project_to_beta,
)
from .data import DatasetSplit, Interaction, SequenceExample, SyntheticSpec
from .encoders import EncoderConfig
from .model import SRPLR, LogicConfig, ModelVariant, ReasoningInput

__version__ = "0.1.0"

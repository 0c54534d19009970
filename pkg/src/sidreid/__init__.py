"""Person re-identification with semantic-ID prototypes.

Every image gets five group embeddings (head, upper body, lower body,
identity, carrying). Each group also owns one learnable prototype per
semantic ID, a single combination of that group's attribute labels. The
same embeddings serve image retrieval, attribute-based search and
attribute recognition.
"""

from .config import RunConfig, desk_config, load_config
from .losses import LossWeights
from .metrics import EvalReport
from .model import PersonEmbedder
from .retrieval import AttributeQuery, GalleryIndex, parse_query
from .schema import GROUPS, AttributeSchema, builtin_schema, load_schema
from .workbench import Trainer, evaluate, load_model

__all__ = [
    "GROUPS", "AttributeQuery", "AttributeSchema", "EvalReport", "GalleryIndex", "LossWeights", "PersonEmbedder",
    "RunConfig", "Trainer", "builtin_schema", "desk_config", "evaluate", "load_config", "load_model",
    "load_schema", "parse_query",
]
__version__ = "0.1.0"

"""Complex logical query answering over ordered knowledge hypergraphs."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, KhgqaError
from .graph import GraphSplits, Hyperedge, KnowledgeHypergraph, load_splits, parse_facts
from .oracle import answers
from .query import QUERY_TYPES, QueryInstance, template

__all__ = ["ConfigError", "DataError", "KhgqaError", "GraphSplits", "Hyperedge",
           "KnowledgeHypergraph", "load_splits", "parse_facts", "answers", "QUERY_TYPES",
           "QueryInstance", "template", "__version__"]

# Interaction corpus utilities for the tree-identifier retrieval engine
from .interactions import (
    CorpusFormatError,
    DatasetSplit,
    Interaction,
    InteractionDb,
    UserHistory,
    build_histories,
    load_corpus,
    load_interactions,
    split_users,
    synthesize_corpus,
    write_interactions,
)

__all__ = [
    'CorpusFormatError', 'DatasetSplit', 'Interaction', 'InteractionDb', 'UserHistory',
    'build_histories', 'load_corpus', 'load_interactions', 'split_users', 'synthesize_corpus',
    'write_interactions',
]

"""PCPE: persona-conditioned multi-stream response ranking.

Library + CLI for retrieval-style conversational response scoring with two
attention streams (persona-coded and code-coded), three post-fusion
strategies, in-batch-negative training on a self-contained float64 autodiff
core, retrieval metrics, and offline embedding caches.
"""

__version__ = "0.1.0"

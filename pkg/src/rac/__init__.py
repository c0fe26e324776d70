"""Two-branch long-tail classifier: trainable base head fused with a k-NN
retrieval branch over an HNSW or exact index."""

__version__ = "0.1.0"

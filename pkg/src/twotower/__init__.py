"""Two-tower retrieval with paragraph-level pre-training, dense and BM25
search, and a recall@k benchmark harness."""

__version__ = "0.1.0"

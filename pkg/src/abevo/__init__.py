"""Evolution-aware antibody language-model pretraining and benchmark harness."""

__version__ = "0.1.0"

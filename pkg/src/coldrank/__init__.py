"""Cold-start movie popularity ranking with LLMs and embedding baselines."""

__version__ = "0.1.0"

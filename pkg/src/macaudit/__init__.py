"""Multi-branch attribute classifier over face embeddings, with MC-dropout reliability scoring."""

__version__ = "0.1.0"

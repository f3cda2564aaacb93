"""Language-free training for zero-shot temporal video grounding.

Train a grounding model from video features alone: pseudo temporal
intervals come from clustering the video's self-similarity structure, and
pseudo language features are frame embeddings chosen by a small selection
transformer in a joint vision-language embedding space. At inference the
same network grounds real text features.
"""

__version__ = "0.1.0"

"""ICU clinical-notes pipeline for early prediction of acute kidney injury.

Stages: table ingestion and synthetic corpora, KDIGO cohort labeling,
WordPiece tokenization, MLM+NSP pre-training of a small transformer
encoder, imbalance-aware classifier fine-tuning, bootstrap evaluation,
and attention-based note highlighting.
"""

__version__ = "0.1.0"

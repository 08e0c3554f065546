"""Meta Fusion: cohorts of cross-modal students, mutual learning and ensemble selection."""
__version__ = "0.1.0"

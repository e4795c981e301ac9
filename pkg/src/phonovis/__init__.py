"""Phoneme-viseme prototype alignment, phoneme-guided sparse expert routing and
lip-landmark metrics, exercised on a synthetic multilingual corpus."""

__version__ = "0.1.0"

"""Multi-party voice activity detection with cross-talk rejection."""

__version__ = "0.1.0"

SAMPLE_RATE = 16000
N_CHANNELS = 4

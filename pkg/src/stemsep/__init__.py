"""Desk-scale music source separation toolkit.

Spectrogram-mask separation with a tape-based autodiff core, differentiable
STFT/ISTFT, joint multi-source training (optionally with bridged network
paths and combination losses), and BSSEval-style SDR/SAR evaluation.
"""

__version__ = "0.1.0"

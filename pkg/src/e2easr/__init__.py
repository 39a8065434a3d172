"""Numpy end-to-end speech recognition: CTC, transducer and attention models on
BLSTM or Conformer encoders, with SpecAugment, variational noise and EMA training."""

__version__ = "0.1.0"

"""Encoder + decoder head bundles with their training loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .encoders import BlstmConfig, ConformerConfig, build_encoder
from .heads import HeadConfig, build_head, default_head_config, frame_with_sos
from .losses import attention_loss, batch_ctc_loss, batch_transducer_loss, ctc_min_frames, masked_mean
from .nn import Module
from .search import (SearchConfig, attention_beam, attention_greedy, ctc_greedy_hypothesis,
                     transducer_beam, transducer_greedy)

ENCODERS = ("conformer", "blstm")
DECODERS = ("ctc", "transducer", "attention")


@dataclass
class ModelConfig:
    """Architecture manifest; stored in checkpoints and compared on load."""

    encoder: str = "conformer"
    decoder: str = "transducer"
    vocab_size: int = 16
    num_mel: int = 80
    encoder_cfg: dict = field(default_factory=dict)
    head_cfg: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; choose from {ENCODERS}")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}; choose from {DECODERS}")
        enc_cls = ConformerConfig if self.encoder == "conformer" else BlstmConfig
        self.encoder_cfg = asdict(enc_cls(**self.encoder_cfg))
        head = asdict(default_head_config(self.encoder, self.decoder))
        head.update(self.head_cfg)
        head["kind"] = self.decoder
        self.head_cfg = asdict(HeadConfig(**head))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def toy_model_config(encoder: str, decoder: str, vocab_size: int, d_model: int = 64,
                     depth: int = 2) -> ModelConfig:
    """Reduced-size configuration used on the synthetic corpus."""
    if encoder == "conformer":
        enc = dict(num_blocks=depth, d_model=d_model, num_heads=4, conv_kernel=15,
                   d_ffn=4 * d_model, dropout=0.1, subsample_channels=16)
        head = dict(embed_dim=32, lstm_dim=d_model, joint_dim=d_model,
                    attention_type="dot", attention_dim=d_model, attention_heads=4)
    else:
        enc = dict(num_layers=depth, d_model=d_model, dropout=0.1, subsample_channels=16)
        head = dict(embed_dim=32, lstm_dim=d_model, joint_dim=d_model,
                    attention_type="additive", attention_dim=32, attention_heads=1)
    return ModelConfig(encoder, decoder, vocab_size, 80, enc, head)


class AsrModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder, cfg.encoder_cfg, rng, cfg.num_mel)
        self.head = build_head(HeadConfig(**cfg.head_cfg), self.encoder.d_out, cfg.vocab_size, rng)

    def encode(self, feats, lengths):
        return self.encoder(feats, np.asarray(lengths))

    def per_utterance_loss(self, feats, lengths, targets: Sequence[Sequence[int]]):
        """(B,) losses and a validity mask (false where no alignment exists)."""
        enc, enc_len = self.encode(feats, lengths)
        kind = self.cfg.decoder
        valid = np.ones(len(targets), dtype=bool)
        if kind == "ctc":
            valid = np.array([ctc_min_frames(y) <= n for y, n in zip(targets, enc_len)])
            losses = batch_ctc_loss(self.head(enc), targets, enc_len)
        elif kind == "transducer":
            losses = batch_transducer_loss(self.head.lattice_log_probs(enc, targets), targets, enc_len)
        else:
            inputs, outputs = frame_with_sos(targets)
            losses = attention_loss(self.head.teacher_forced(enc, enc_len, inputs), outputs)
        return losses, valid

    def loss(self, feats, lengths, targets) -> T.Tensor:
        losses, valid = self.per_utterance_loss(feats, lengths, targets)
        return masked_mean(losses, valid)

    def decode(self, feats, lengths, search_cfg: Optional[SearchConfig] = None,
               greedy: bool = False) -> list:
        """Best hypothesis per utterance; runs in eval mode without gradients."""
        search_cfg = search_cfg or SearchConfig()
        was_training = self.training
        self.eval()
        out = []
        try:
            with T.no_grad():
                enc, enc_len = self.encode(feats, lengths)
                kind = self.cfg.decoder
                lp = self.head(enc).data if kind == "ctc" else None
                for j, n in enumerate(enc_len):
                    x = enc.data[j, :n]
                    if kind == "ctc":
                        out.append(ctc_greedy_hypothesis(lp[j, :n]))
                    elif kind == "transducer":
                        out.append(transducer_greedy(x, self.head, search_cfg) if greedy
                                   else transducer_beam(x, self.head, search_cfg)[0])
                    else:
                        out.append(attention_greedy(x, self.head, search_cfg) if greedy
                                   else attention_beam(x, self.head, search_cfg)[0])
        finally:
            self.train(was_training)
        return out


def pad_batch(feature_list: List[np.ndarray]):
    """Stack (T_i, F) matrices into a zero-padded (B, T_max, F) array plus lengths."""
    lengths = np.array([f.shape[0] for f in feature_list])
    out = np.zeros((len(feature_list), int(lengths.max()), feature_list[0].shape[1]))
    for i, f in enumerate(feature_list):
        out[i, :f.shape[0]] = f
    return out, lengths

"""The dual-branch recognizer: rectifier, shared CNN, CTC head, Bi-LSTM + attention decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .alphabet import Alphabet
from .attention import AttnDecoder
from .ctc import ctc_loss, greedy_decode
from .encoder import FULL, TOY, ContextEncoder, EncoderConfig, VisualEncoder
from .nn import Linear, Module
from .rectifier import Rectifier
from .tensor import Tensor

BRANCHES = ("dual", "ctc", "attn")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = TOY
    num_control_points: int = 10
    loc_channels: tuple = (8, 16, 32, 32, 32, 32)
    loc_fc: int = 64
    decoder_hidden: int = 128
    attn_units: int = 128
    embed_dim: int = 32
    max_label_len: int = 5
    max_decode_steps: int = 0
    use_rectifier: bool = True
    branches: str = "dual"

    def __post_init__(self):
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}, got {self.branches!r}")

    @property
    def max_steps(self) -> int:
        return self.max_decode_steps or 2 * self.max_label_len + 1

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "toy":
            base = cls()
        elif name == "full":
            base = cls(encoder=FULL, loc_channels=(32, 64, 128, 256, 256, 256), loc_fc=512,
                       decoder_hidden=1024, attn_units=1024, embed_dim=256, max_label_len=25)
        else:
            raise ValueError(f"unknown preset {name!r} (expected 'toy' or 'full')")
        enc_keys = {k: overrides.pop(k) for k in list(overrides) if k in EncoderConfig.__dataclass_fields__}
        if enc_keys:
            base = replace(base, encoder=replace(base.encoder, **enc_keys))
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Outputs:
    rectified: Optional[Tensor]
    source_points: Optional[Tensor]
    features: Tensor
    ctc_logits: Optional[Tensor]
    context: Optional[Tensor]


class Recognizer(Module):
    def __init__(self, cfg: ModelConfig, alphabet: Alphabet, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._alphabet = alphabet
        self._dtype = np.dtype(dtype)
        enc = cfg.encoder
        self.rectifier = (Rectifier(enc.in_h, enc.in_w, cfg.num_control_points, cfg.loc_channels,
                                    cfg.loc_fc, rng, dtype) if cfg.use_rectifier else None)
        self.visual = VisualEncoder(enc, rng, dtype)
        n = alphabet.n
        self.ctc_head = Linear(enc.final_channels, n + 1, rng, dtype) if cfg.branches != "attn" else None
        if cfg.branches != "ctc":
            self.context = ContextEncoder(enc.final_channels, enc.lstm_hidden, rng, dtype)
            self.decoder = AttnDecoder(n, 2 * enc.lstm_hidden, cfg.decoder_hidden, cfg.attn_units,
                                       cfg.embed_dim, rng, dtype, max_steps=cfg.max_steps)
        else:
            self.context = None
            self.decoder = None

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def alphabet(self) -> Alphabet:
        return self._alphabet

    @property
    def dtype(self):
        return self._dtype

    def forward(self, images) -> Outputs:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self._dtype))
        rectified = source = None
        if self.rectifier is not None:
            rectified, source = self.rectifier(x)
            x = rectified
        feats = self.visual(x)
        n, _, w, c = feats.shape
        seq = ops.reshape(feats, (n, w, c))
        logits = self.ctc_head(seq) if self.ctc_head is not None else None
        context = self.context(seq) if self.context is not None else None
        return Outputs(rectified, source, feats, logits, context)

    def losses(self, out: Outputs, labels: Sequence[Sequence[int]]):
        """``(l_attn, l_ctc)``; a branch that is absent yields ``None``."""
        l_ctc = ctc_loss(out.ctc_logits, labels) if out.ctc_logits is not None else None
        l_attn = self.decoder.loss(out.context, labels) if self.decoder is not None else None
        return l_attn, l_ctc

    def decode(self, out: Outputs) -> tuple[Optional[list], Optional[list]]:
        """Greedy ``(attn, ctc)`` index sequences per sample."""
        attn = self.decoder.greedy_decode(out.context) if self.decoder is not None else None
        ctc = greedy_decode(out.ctc_logits.data) if out.ctc_logits is not None else None
        return attn, ctc

    def recognize(self, images) -> list[dict]:
        """Transcripts per image.  ``final`` is the attention branch when present."""
        out = self.forward(images)
        attn, ctc = self.decode(out)
        results = []
        for i in range(out.features.shape[0]):
            a = self._alphabet.decode(attn[i]) if attn is not None else None
            c = self._alphabet.decode(ctc[i]) if ctc is not None else None
            results.append({"final": a if a is not None else c, "attn": a, "ctc": c})
        return results

"""scikit-learn style wrappers around the front-end and the recognizer."""

from __future__ import annotations

import tempfile
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as tt
from ._validation import check_tokens, check_triples
from .evaluation import wer
from .model import TSRNNT, ModelConfig
from .signal import Waveform, extract_features
from .toy import ToySample
from .training import StageConfig, run_stage
from .transducer import greedy_decode_stream


class LogMelFeatures(TransformerMixin, BaseEstimator):
    """Waveforms (1-D arrays at ``sample_rate``) to log-mel matrices.

    Stateless: ``fit`` only validates its arguments.
    """

    def __init__(self, n_mels: int = 40, frame_length: float = 0.025, frame_shift: float = 0.010,
                 fft_size: int = 512, sample_rate: int = 16000):
        self.n_mels = n_mels
        self.frame_length = frame_length
        self.frame_shift = frame_shift
        self.fft_size = fft_size
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        self.n_features_out_ = self.n_mels
        return self

    def transform(self, X) -> list[np.ndarray]:
        out = []
        for x in X:
            w = x if isinstance(x, Waveform) else Waveform(np.asarray(x, dtype=np.float64), self.sample_rate)
            out.append(extract_features(w, self.n_mels, self.frame_length, self.frame_shift, self.fft_size).frames)
        return out


class TargetSpeakerRecognizer(BaseEstimator):
    """Train and run one transducer variant on ``(enrollment, wake, mixture)`` triples.

    ``X`` is a sequence of triples (or :class:`~tsrnnt.toy.ToySample` objects),
    ``y`` the matching token transcripts. ``score`` returns ``1 - WER``.
    """

    def __init__(self, variant: str = "robust", d_model: int = 32, attention_heads: int = 4,
                 encoder_layers: int = 2, causal_context: int = 8, vocab_size: int = 17,
                 epochs: int = 10, learning_rate: float = 0.01, batch_frames: int = 900,
                 max_symbols_per_frame: int = 4, seed: int = 0):
        self.variant = variant
        self.d_model = d_model
        self.attention_heads = attention_heads
        self.encoder_layers = encoder_layers
        self.causal_context = causal_context
        self.vocab_size = vocab_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_frames = batch_frames
        self.max_symbols_per_frame = max_symbols_per_frame
        self.seed = seed

    def _config(self, feat_dim: int) -> ModelConfig:
        return ModelConfig(variant=self.variant, feat_dim=feat_dim, d_model=self.d_model,
                           attention_heads=self.attention_heads, encoder_heads=self.attention_heads,
                           encoder_layers=self.encoder_layers, vocab_size=self.vocab_size,
                           causal_context=self.causal_context)

    def fit(self, X: Sequence, y: Sequence[Sequence[int]]):
        triples = check_triples(X, None, self.vocab_size)
        if len(y) != len(triples):
            raise ValueError(f"{len(triples)} samples but {len(y)} transcripts")
        feat_dim = triples[0][0].shape[1]
        samples = [ToySample(f"fit-{i:06d}", enr, mix, check_tokens(t, self.vocab_size, name="transcript"),
                             wake, -1, -1, float("nan"), float("nan"), False)
                   for i, ((enr, wake, mix), t) in enumerate(zip(triples, y))]
        stage = StageConfig(stage="main", learning_rate=self.learning_rate, max_batch_seconds=self.batch_frames,
                            epochs=self.epochs, seed=self.seed, validation_fraction=0.0)
        config = self._config(feat_dim)
        with tempfile.TemporaryDirectory() as tmp:
            res = run_stage(stage, config, samples, tmp)
        self.model_ = TSRNNT(config, res.state.params)
        self.loss_curve_ = res.epoch_losses
        self.n_features_in_ = feat_dim
        return self

    def predict(self, X: Sequence) -> list[list[int]]:
        check_is_fitted(self, "model_")
        m = self.model_
        out = []
        with tt.no_grad():
            for enr, wake, mix in check_triples(X, self.n_features_in_, self.vocab_size):
                bias = m.speaker_bias(enr, wake if m.config.variant == "robust" else None)
                z = m.asr_encode(mix, bias).data[0]
                out.append(greedy_decode_stream(z, m, self.max_symbols_per_frame).tokens)
        return out

    def score(self, X: Sequence, y: Sequence[Sequence[int]]) -> float:
        rate, _ = wer([list(t) for t in y], self.predict(X))
        return 1.0 - rate


__all__ = ["LogMelFeatures", "TargetSpeakerRecognizer"]

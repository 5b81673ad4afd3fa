"""Target-speaker transducer in three flavours.

``baseline``
    The enrollment embedding is projected, averaged over time and multiplied
    elementwise into the output of the first ASR encoder layer.
``attentive``
    Encoder frames attend over the enrollment embedding sequence (keys and
    values); the readout is added back to the frame (residual).
``robust``
    The enrollment embedding first attends over a text encoding of the known
    wake word. Each output row is a mixture of wake-word token encodings; that
    sequence then replaces the acoustic keys/values of the ``attentive`` path.

All sub-networks are tiny and written against :mod:`tsrnnt.tensor`. The ASR
encoder is strictly causal with a fixed left window, so encoding any prefix
reproduces the corresponding rows of the full encoding bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import tensor as tt
from .checkpoint import config_hash
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor
from .transducer import Lattice, rnnt_loss

VARIANTS = ("baseline", "attentive", "robust")


@dataclass
class ModelConfig:
    variant: str = "baseline"
    feat_dim: int = 40
    d_model: int = 128
    d_h: int | None = None
    d_a: int | None = None
    d_l: int | None = None
    attention_heads: int = 8
    attention_dim: int | None = None
    encoder_layers: int = 2
    encoder_heads: int = 4
    enroll_layers: int = 1
    ff_dim: int | None = None
    fusion_layer_index: int = 1
    vocab_size: int = 17
    blank_id: int = 0
    causal_context: int = 16
    streaming: bool = True

    def __post_init__(self):
        for name in ("d_h", "d_a", "d_l", "attention_dim"):
            if getattr(self, name) is None:
                setattr(self, name, self.d_model)
        if self.ff_dim is None:
            self.ff_dim = 2 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 1 <= self.fusion_layer_index < self.encoder_layers:
            raise ConfigError("need 1 <= fusion_layer_index < encoder_layers")
        if self.attention_dim % self.attention_heads:
            raise ConfigError("attention_dim must be divisible by attention_heads")
        if self.d_model % self.encoder_heads:
            raise ConfigError("d_model must be divisible by encoder_heads")
        if not 0 <= self.blank_id < self.vocab_size:
            raise ConfigError("blank_id must be < vocab_size")
        if self.causal_context < 0:
            raise ConfigError("causal_context must be >= 0")
        if self.variant == "attentive" and self.d_h != self.d_a:
            raise ConfigError("attentive variant uses the acoustic embedding as h_target: d_h must equal d_a")
        if self.variant == "robust" and self.d_h != self.d_l:
            raise ConfigError("robust variant uses the text-guided output as h_target: d_h must equal d_l")
        if self.variant == "baseline" and self.d_h != self.d_a:
            raise ConfigError("baseline fuses the acoustic embedding: d_h must equal d_a")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class SpeakerBias:
    """Speaker conditioning handed to the ASR encoder.

    ``pooled`` is the ``d_model`` vector multiplied into the encoder (baseline);
    ``sequence`` is the ``T' x d_h`` key/value sequence (attentive, robust).
    """

    provenance: str  # "acoustic_only" | "text_guided"
    sequence: Tensor | None = None
    pooled: Tensor | None = None


# -- parameter initialisation -----------------------------------------------

def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` everywhere.

    The output projection of the encoder-side cross-attention starts at zero
    so a new model initially behaves like the bias-free encoder.
    """
    c = config
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out, bias=True):
        p[f"{name}.w"] = _uniform(rng, n_in, (n_in, n_out))
        if bias:
            p[f"{name}.b"] = _uniform(rng, n_in, (n_out,))

    def norm(name, d):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def block(name, d):
        norm(f"{name}.ln1", d)
        for proj in ("q", "k", "v", "o"):
            linear(f"{name}.att.{proj}", d, d, bias=False)
        norm(f"{name}.ln2", d)
        linear(f"{name}.ff1", d, c.ff_dim)
        linear(f"{name}.ff2", c.ff_dim, d)

    def attention_unit(name, d_q, d_kv, d_out):
        linear(f"{name}.q", d_q, c.attention_dim, bias=False)
        linear(f"{name}.k", d_kv, c.attention_dim, bias=False)
        linear(f"{name}.v", d_kv, c.attention_dim, bias=False)
        linear(f"{name}.o", c.attention_dim, d_out, bias=False)

    def stateless(name, d):
        p[f"{name}.emb"] = rng.uniform(-1.0, 1.0, size=(c.vocab_size, d))
        linear(f"{name}.ctx", 2 * d, d)

    linear("enr_enc.in", c.feat_dim, c.d_model)
    for i in range(c.enroll_layers):
        block(f"enr_enc.layers.{i}", c.d_model)
    norm("enr_enc.ln", c.d_model)
    linear("enr_enc.out", c.d_model, c.d_a)

    linear("asr_enc.in", c.feat_dim, c.d_model)
    for i in range(c.encoder_layers):
        block(f"asr_enc.layers.{i}", c.d_model)
    norm("asr_enc.ln", c.d_model)

    if c.variant == "baseline":
        linear("fusion.lin", c.d_h, c.d_model)
    else:
        attention_unit("enr_att", c.d_model, c.d_h, c.d_model)
        p["enr_att.o.w"] = np.zeros_like(p["enr_att.o.w"])
    if c.variant == "robust":
        stateless("txt_dec", c.d_l)
        attention_unit("txt_att", c.d_a, c.d_l, c.d_l)

    stateless("pred", c.d_model)
    linear("joint.z", c.d_model, c.d_model, bias=False)
    linear("joint.g", c.d_model, c.d_model)
    linear("joint.out", c.d_model, c.vocab_size)
    return {k: tt.parameter(v, name=k) for k, v in p.items()}


# -- attention primitives ------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, A = x.shape
    return tt.transpose(tt.reshape(x, (B, L, heads, A // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return tt.reshape(tt.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def multi_head_attention(query: Tensor, key_value: Tensor, wq, wk, wv, wo, heads: int,
                         return_weights: bool = False):
    """Scaled dot-product attention, keys and values taken from one sequence.

    ``query`` is ``(B, Lq, d_q)``, ``key_value`` is ``(B, Lk, d_kv)``. Returns
    ``(B, Lq, d_out)`` and, optionally, the ``(B, heads, Lq, Lk)`` weights.
    """
    if key_value.shape[1] == 0:
        raise ContractError("attention needs at least one key")
    if query.shape[0] != key_value.shape[0]:
        raise DimensionError(f"batch sizes differ: {query.shape} vs {key_value.shape}")
    q = _split_heads(query @ wq, heads)
    k = _split_heads(key_value @ wk, heads)
    v = _split_heads(key_value @ wv, heads)
    scores = tt.scale(q @ tt.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(q.shape[-1]))
    weights = tt.softmax(scores, axis=-1)
    out = _merge_heads(weights @ v) @ wo
    return (out, weights) if return_weights else out


def window_mask(first_frame: int, length: int, window: int) -> np.ndarray:
    """True where a window slot falls before the start of the signal."""
    t = np.arange(first_frame, first_frame + length)[:, None]
    j = np.arange(window)[None, :]
    return t - (window - 1) + j < 0


def windowed_attention(q: Tensor, kw: Tensor, vw: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Attention where each query row carries its own fixed-size key window.

    ``q`` is ``(B, T, A)``, ``kw``/``vw`` are ``(B, T, W, A)``, ``mask`` is
    ``(T, W)``. Every row is computed with identical shapes, which keeps the
    result independent of how many rows are processed together.
    """
    B, T, A = q.shape
    W = kw.shape[2]
    dh = A // heads
    qh = tt.reshape(q, (B, T, heads, 1, dh))
    kh = tt.transpose(tt.reshape(kw, (B, T, W, heads, dh)), (0, 1, 3, 4, 2))
    vh = tt.transpose(tt.reshape(vw, (B, T, W, heads, dh)), (0, 1, 3, 2, 4))
    scores = tt.scale(qh @ kh, 1.0 / math.sqrt(dh))
    scores = tt.masked_fill(scores, mask[None, :, None, None, :], -np.inf)
    w = tt.softmax(scores, axis=-1)
    return tt.reshape(w @ vh, (B, T, A))


class TSRNNT:
    """Parameters plus forward passes for one architecture variant."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = dict(params) if params is not None else init_params(config, seed)
        missing = set(init_params_names(config)) - set(self.params)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)[:5]}")

    # convenience
    @property
    def blank_id(self) -> int:
        return self.config.blank_id

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def _linear(self, x: Tensor, name: str) -> Tensor:
        y = x @ self.params[f"{name}.w"]
        b = self.params.get(f"{name}.b")
        return y if b is None else y + b

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return tt.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _att(self, name: str) -> tuple:
        p = self.params
        return p[f"{name}.q.w"], p[f"{name}.k.w"], p[f"{name}.v.w"], p[f"{name}.o.w"]

    # -- encoder blocks --------------------------------------------------
    def _feed_forward(self, x: Tensor, name: str) -> Tensor:
        h = self._norm(x, f"{name}.ln2")
        return x + self._linear(tt.relu(self._linear(h, f"{name}.ff1")), f"{name}.ff2")

    def _full_block(self, x: Tensor, name: str) -> Tensor:
        h = self._norm(x, f"{name}.ln1")
        x = x + multi_head_attention(h, h, *self._att(f"{name}.att"), heads=self.config.encoder_heads)
        return self._feed_forward(x, name)

    def _causal_block(self, x: Tensor, name: str) -> Tensor:
        B, T, d = x.shape
        W = self.config.causal_context + 1
        wq, wk, wv, wo = self._att(f"{name}.att")
        h = self._norm(x, f"{name}.ln1")
        q, k, v = h @ wq, h @ wk, h @ wv
        pad = Tensor(np.zeros((B, W - 1, d)))
        idx = np.arange(T)[:, None] + np.arange(W)[None, :]
        kw = tt.concat([pad, k], axis=1)[:, idx]
        vw = tt.concat([pad, v], axis=1)[:, idx]
        att = windowed_attention(q, kw, vw, window_mask(0, T, W), self.config.encoder_heads)
        x = x + att @ wo
        return self._feed_forward(x, name)

    # -- enrollment side -------------------------------------------------
    def enroll_encode(self, feats) -> Tensor:
        """Offline encoder over the enrollment features: ``(B, T', F) -> (B, T', d_a)``."""
        x = _batched(feats)
        if x.shape[1] < 1:
            raise ContractError("enrollment must contain at least one frame")
        x = self._linear(x, "enr_enc.in")
        for i in range(self.config.enroll_layers):
            x = self._full_block(x, f"enr_enc.layers.{i}")
        return self._linear(self._norm(x, "enr_enc.ln"), "enr_enc.out")

    def _stateless(self, name: str, contexts: np.ndarray) -> Tensor:
        """``contexts`` holds token pairs ``(..., 2)``; returns ``relu(W [e_a; e_b] + b)``."""
        ids = np.asarray(contexts, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ContractError(f"token id outside vocabulary [0, {self.config.vocab_size})")
        e = tt.embedding(self.params[f"{name}.emb"], ids)  # (..., 2, d)
        flat = tt.reshape(e, e.shape[:-2] + (2 * e.shape[-1],))
        return tt.relu(self._linear(flat, f"{name}.ctx"))

    def text_decode(self, wake_tokens) -> Tensor:
        """Wake-word text encoding ``(B, N) -> (B, N, d_l)``; row n sees tokens <= n."""
        y = _batched_tokens(wake_tokens)
        if y.shape[1] < 1:
            raise ContractError("wake word must contain at least one token")
        padded = np.concatenate([np.full((y.shape[0], 1), self.blank_id), y], axis=1)
        ctx = np.stack([padded[:, :-1], padded[:, 1:]], axis=-1)
        return self._stateless("txt_dec", ctx)

    def text_guided_attention(self, h_aco: Tensor, h_ling: Tensor, return_weights: bool = False):
        """Acoustic enrollment frames query the wake-word encoding (keys = values)."""
        return multi_head_attention(_batched(h_aco), _batched(h_ling), *self._att("txt_att"),
                                    heads=self.config.attention_heads, return_weights=return_weights)

    def contextual_bias_attention(self, z1: Tensor, h_target: Tensor, return_weights: bool = False):
        """``z1 + OutputProj(MHA(query=z1, key=value=h_target))``."""
        z1, h_target = _batched(z1), _batched(h_target)
        out, w = multi_head_attention(z1, h_target, *self._att("enr_att"),
                                      heads=self.config.attention_heads, return_weights=True)
        a = z1 + out
        return (a, w) if return_weights else a

    def baseline_fuse(self, z1: Tensor, h_target_seq: Tensor) -> Tensor:
        """``z1[t] * mean_t(Linear(h_target_seq))``."""
        return hadamard_fuse(_batched(z1), tt.mean(self._linear(_batched(h_target_seq), "fusion.lin"), axis=1))

    def speaker_bias(self, enroll_feats, wake_tokens=None) -> SpeakerBias:
        h_aco = self.enroll_encode(enroll_feats)
        variant = self.config.variant
        if variant == "baseline":
            seq = self._linear(h_aco, "fusion.lin")
            return SpeakerBias("acoustic_only", sequence=seq, pooled=tt.mean(seq, axis=1))
        if variant == "attentive":
            return SpeakerBias("acoustic_only", sequence=h_aco)
        if wake_tokens is None:
            raise ContractError("robust variant needs the wake-word tokens")
        h_ling = self.text_decode(wake_tokens)
        return SpeakerBias("text_guided", sequence=self.text_guided_attention(h_aco, h_ling))

    # -- ASR side ----------------------------------------------------------
    def _fuse(self, z1: Tensor, bias: SpeakerBias | None) -> Tensor:
        if bias is None:
            return z1
        variant = self.config.variant
        if variant == "baseline":
            if bias.pooled is None:
                raise ContractError("baseline variant needs a pooled speaker bias")
            return hadamard_fuse(z1, bias.pooled)
        want = "acoustic_only" if variant == "attentive" else "text_guided"
        if bias.sequence is None or bias.provenance != want:
            raise ContractError(f"{variant} variant needs a {want} bias sequence, got {bias.provenance}")
        return self.contextual_bias_attention(z1, bias.sequence)

    def asr_encode(self, feats, bias: SpeakerBias | None) -> Tensor:
        """``(B, T, F) -> (B, T, d_model)``; ``bias=None`` runs the bias-free encoder."""
        c = self.config
        x = self._linear(_batched(feats), "asr_enc.in")
        block = self._causal_block if c.streaming else self._full_block
        for i in range(c.encoder_layers):
            if i == c.fusion_layer_index:
                x = self._fuse(x, bias)
            x = block(x, f"asr_enc.layers.{i}")
        return self._norm(x, "asr_enc.ln")

    def encode_stream(self, frames: Iterable, bias: SpeakerBias | None) -> Iterator[np.ndarray]:
        """Encode feature frames one at a time, yielding each ``d_model`` output.

        Keeps a per-layer cache of the last ``causal_context`` keys/values and
        produces exactly the rows :meth:`asr_encode` would.
        """
        c = self.config
        if not c.streaming:
            raise ContractError("offline encoder cannot run incrementally")
        W = c.causal_context + 1
        d = c.d_model
        caches = [([np.zeros(d)] * (W - 1), [np.zeros(d)] * (W - 1)) for _ in range(c.encoder_layers)]
        with tt.no_grad():
            for t, frame in enumerate(frames):
                frame = np.asarray(frame.data if isinstance(frame, Tensor) else frame, dtype=np.float64)
                x = self._linear(Tensor(frame.reshape(1, 1, -1)), "asr_enc.in")
                for i in range(c.encoder_layers):
                    if i == c.fusion_layer_index:
                        x = self._fuse(x, bias)
                    name = f"asr_enc.layers.{i}"
                    wq, wk, wv, wo = self._att(f"{name}.att")
                    h = self._norm(x, f"{name}.ln1")
                    q, k, v = h @ wq, h @ wk, h @ wv
                    kc, vc = caches[i]
                    kc.append(k.data[0, 0])
                    vc.append(v.data[0, 0])
                    kw = Tensor(np.stack(kc)[None, None])
                    vw = Tensor(np.stack(vc)[None, None])
                    del kc[0], vc[0]
                    att = windowed_attention(q, kw, vw, window_mask(t, 1, W), c.encoder_heads)
                    x = self._feed_forward(x + att @ wo, name)
                yield self._norm(x, "asr_enc.ln").data[0, 0]

    # -- prediction and joint ----------------------------------------------
    def predict(self, prefix) -> Tensor:
        """``(B, U) -> (B, U+1, d_model)``; row u depends on tokens ``< u`` only."""
        y = _batched_tokens(prefix)
        B = y.shape[0]
        padded = np.concatenate([np.full((B, 2), self.blank_id), y], axis=1)
        ctx = np.stack([padded[:, :-1], padded[:, 1:]], axis=-1)  # (B, U+1, 2)
        return self._stateless("pred", ctx)

    def joint(self, z_t, g_u) -> Tensor:
        """Logits over the vocabulary for one (frame, prefix) pair."""
        h = tt.tanh(self._linear(tt.as_tensor(z_t), "joint.z") + self._linear(tt.as_tensor(g_u), "joint.g"))
        return self._linear(h, "joint.out")

    def lattice_log_probs(self, z: Tensor, g: Tensor) -> Tensor:
        """``(B, T, d), (B, U+1, d) -> (B, T, U+1, V)`` log-softmaxed joint grid."""
        h = tt.outer_add(self._linear(z, "joint.z"), self._linear(g, "joint.g"))
        return tt.log_softmax(self._linear(tt.tanh(h), "joint.out"), axis=-1)

    def loss(self, enroll, wake, mixture, targets, reduction: str = "sum") -> Tensor:
        """Transducer NLL of ``targets`` for a batch of equal-shape samples."""
        bias = self.speaker_bias(enroll, wake if self.config.variant == "robust" else None)
        z = self.asr_encode(mixture, bias)
        g = self.predict(targets)
        y = _batched_tokens(targets)
        lattice = Lattice(self.lattice_log_probs(z, g), y, self.blank_id, check=False)
        return rnnt_loss(lattice, reduction=reduction)

    # -- decoder protocol (numpy in, numpy out) ------------------------------
    def prediction_start(self):
        state = (self.blank_id, self.blank_id)
        return self._pred_row(state), state

    def prediction_step(self, state, token: int):
        new = (state[1], int(token))
        return self._pred_row(new), new

    def _pred_row(self, state) -> np.ndarray:
        with tt.no_grad():
            return self._stateless("pred", np.array(state)).data

    def joint_logits(self, z_t, g_u) -> np.ndarray:
        with tt.no_grad():
            return self.joint(np.asarray(z_t), np.asarray(g_u)).data

    # -- persistence ----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def config_hash(self) -> str:
        return self.config.hash()


def init_params_names(config: ModelConfig) -> list[str]:
    return sorted(_param_shapes(config))


def _param_shapes(config: ModelConfig) -> dict[str, tuple]:
    key = tuple(sorted(config.to_dict().items()))
    hit = _SHAPE_CACHE.get(key)
    if hit is None:
        hit = _SHAPE_CACHE[key] = {k: v.shape for k, v in init_params(config, 0).items()}
    return hit


_SHAPE_CACHE: dict = {}


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    return dict(_param_shapes(config))


def hadamard_fuse(z1: Tensor, pooled: Tensor) -> Tensor:
    """Multiply every frame of ``z1`` (B, T, d) by the per-utterance vector ``pooled`` (B, d)."""
    pooled = tt.as_tensor(pooled)
    if pooled.ndim == 1:
        pooled = tt.reshape(pooled, (1, pooled.shape[0]))
    B, T, d = z1.shape
    if pooled.shape != (B, d):
        raise DimensionError(f"pooled bias shape {pooled.shape} does not match encoder output {z1.shape}")
    tiled = tt.reshape(pooled, (B, 1, d))[:, np.zeros(T, dtype=np.int64)]
    return z1 * tiled


def _batched(x) -> Tensor:
    x = tt.as_tensor(x.frames if hasattr(x, "frames") else x)
    if x.ndim == 2:
        return tt.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"expected (T, d) or (B, T, d), got shape {x.shape}")
    return x


def _batched_tokens(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2:
        raise DimensionError(f"expected token ids (U,) or (B, U), got shape {y.shape}")
    return y

"""Synthetic feature-domain corpus for fast target-speaker experiments.

Token ``k`` has a fixed on/off energy pattern ``e_k`` in ``{0, 1}^D``; speaker ``s``
has a signature ``v_s = 1 + beta * r_s`` with ``r_s`` in ``{-1, +1}^D``, so each
speaker emphasises a different half of the feature dimensions. A spoken token
is ``frames_per_token`` frames of ``e_k * v_s`` plus a little Gaussian jitter.

Every utterance starts with a wake word. Its frames form the enrollment
segment; the remaining tokens are the command to transcribe. Mixing follows
the waveform pipeline in :mod:`tsrnnt.mixing`, only with frames instead of
samples: one interferer gain for both segments, one noise gain, then a joint
RMS normalisation of enrollment and command.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError

_PATTERN_STREAM = 0x70A7
_SPEAKER_STREAM = 0x5EA4


@dataclass
class ToyConfig:
    vocab_tokens: int = 16  # ids 1..vocab_tokens; 0 is blank
    n_speakers: int = 8
    feat_dim: int = 32
    frames_per_token: int = 4
    wake_tokens: tuple[int, int] = (2, 2)  # inclusive (min, max)
    command_tokens: tuple[int, int] = (3, 5)
    signature_strength: float = 0.9
    jitter: float = 0.1
    max_interferer_offset: int = 3
    sir_range: tuple[float, float] = (-5.0, 5.0)
    snr_range: tuple[float, float] = (0.0, 20.0)
    corpus_seed: int = 1234  # fixes token patterns and speaker signatures

    def __post_init__(self):
        if self.vocab_tokens < 2:
            raise ConfigError("toy corpus needs at least 2 tokens")
        if self.n_speakers < 2:
            raise ConfigError("toy corpus needs at least 2 speakers")
        if self.frames_per_token < 1 or self.feat_dim < 1:
            raise ConfigError("frames_per_token and feat_dim must be positive")
        lo, hi = self.wake_tokens
        if not 1 <= lo <= hi:
            raise ConfigError("wake word needs at least one token")
        lo, hi = self.command_tokens
        if not 1 <= lo <= hi:
            raise ConfigError("command needs at least one token")

    @property
    def vocab_size(self) -> int:
        return self.vocab_tokens + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wake_tokens"] = list(self.wake_tokens)
        d["command_tokens"] = list(self.command_tokens)
        d["sir_range"] = list(self.sir_range)
        d["snr_range"] = list(self.snr_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "ToyConfig":
        d = dict(d)
        for k in ("wake_tokens", "command_tokens", "sir_range", "snr_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ToySample:
    sample_id: str
    enrollment: np.ndarray  # (T', D)
    command: np.ndarray  # (T, D)
    transcript: list[int]
    wake: list[int]
    target_speaker: int
    interferer_speaker: int
    sir_db: float
    snr_db: float
    overlapping_enrollment: bool
    achieved_sir_db: float = math.nan
    achieved_snr_db: float = math.nan
    norm_factor: float = 1.0
    clean_command: np.ndarray | None = field(default=None, repr=False)

    def shape_key(self) -> tuple[int, int, int, int]:
        return (len(self.command), len(self.enrollment), len(self.wake), len(self.transcript))

    def num_frames(self) -> int:
        return len(self.command) + len(self.enrollment)


class ToyWorld:
    """Token patterns and speaker signatures shared by every split."""

    def __init__(self, config: ToyConfig):
        self.config = config
        c = config
        rng = np.random.default_rng([c.corpus_seed, _PATTERN_STREAM])
        self.patterns = np.zeros((c.vocab_size, c.feat_dim))
        self.patterns[1:] = rng.choice([0.0, 1.0], size=(c.vocab_tokens, c.feat_dim))
        rng = np.random.default_rng([c.corpus_seed, _SPEAKER_STREAM])
        r = rng.choice([-1.0, 1.0], size=(c.n_speakers, c.feat_dim))
        self.signatures = 1.0 + c.signature_strength * r

    def render(self, tokens: Sequence[int], speaker: int, rng: np.random.Generator) -> np.ndarray:
        c = self.config
        frames = np.repeat(self.patterns[np.asarray(tokens, dtype=np.int64)], c.frames_per_token, axis=0)
        frames = frames * self.signatures[speaker]
        return frames + c.jitter * rng.standard_normal(frames.shape)

    def cheat_decode(self, frames: np.ndarray, speaker: int) -> list[int]:
        """Nearest speaker-scaled token template for each block of clean frames."""
        c = self.config
        n = len(frames) // c.frames_per_token
        blocks = frames[: n * c.frames_per_token].reshape(n, c.frames_per_token, c.feat_dim).mean(axis=1)
        templates = self.patterns[1:] * self.signatures[speaker]
        dist = ((blocks[:, None, :] - templates[None]) ** 2).sum(axis=-1)
        return [int(k) + 1 for k in np.argmin(dist, axis=1)]


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def _place(x: np.ndarray, length: int, offset: int) -> np.ndarray:
    out = np.zeros((length, x.shape[1]))
    seg = x[: max(0, length - offset)]
    out[offset:offset + len(seg)] = seg
    return out


def make_sample(world: ToyWorld, rng: np.random.Generator, sample_id: str, *, sir_db: float | None = None,
                snr_db: float | None = None, overlapping: bool = True,
                target_speaker: int | None = None) -> ToySample:
    c = world.config
    if target_speaker is None:
        target_speaker = int(rng.integers(c.n_speakers))
    interferer = int(rng.integers(c.n_speakers - 1))
    interferer += interferer >= target_speaker
    tok = lambda lo_hi: rng.integers(1, c.vocab_size, size=int(rng.integers(lo_hi[0], lo_hi[1] + 1))).tolist()
    wake, command = tok(c.wake_tokens), tok(c.command_tokens)
    i_wake, i_command = tok(c.wake_tokens), tok(c.command_tokens)
    if sir_db is None:
        sir_db = float(rng.uniform(*c.sir_range))
    if snr_db is None:
        snr_db = float(rng.uniform(*c.snr_range))

    t_enr = world.render(wake, target_speaker, rng)
    t_cmd = world.render(command, target_speaker, rng)
    off = int(rng.integers(0, c.max_interferer_offset + 1))
    i_enr = _place(world.render(i_wake, interferer, rng), len(t_enr), off)
    i_cmd = _place(world.render(i_command, interferer, rng), len(t_cmd), off)
    if not overlapping:
        i_enr = np.zeros_like(t_enr)

    t_active = np.concatenate([t_enr, t_cmd]) if overlapping else t_cmd
    i_active = np.concatenate([i_enr, i_cmd]) if overlapping else i_cmd
    gain = math.sqrt(_power(t_active) / (_power(i_active) * 10.0 ** (sir_db / 10.0)))
    achieved_sir = 10.0 * math.log10(_power(t_active) / _power(gain * i_active))
    speech = np.concatenate([t_enr + gain * i_enr, t_cmd + gain * i_cmd])

    if math.isinf(snr_db):
        noise = np.zeros_like(speech)
        achieved_snr = math.inf
    else:
        raw = rng.standard_normal(speech.shape)
        noise = raw * math.sqrt(_power(speech) / (_power(raw) * 10.0 ** (snr_db / 10.0)))
        achieved_snr = 10.0 * math.log10(_power(speech) / _power(noise))
    mix = speech + noise
    norm = 1.0 / math.sqrt(_power(mix))
    mix *= norm
    n_enr = len(t_enr)
    return ToySample(sample_id, mix[:n_enr], mix[n_enr:], command, wake, target_speaker, interferer,
                     sir_db, snr_db, overlapping, achieved_sir, achieved_snr, norm,
                     clean_command=t_cmd)


def generate_toy_corpus(config: ToyConfig, seed: int, n_samples: int, *, overlapping: bool = True,
                        sir_db: float | None = None, prefix: str = "toy") -> list[ToySample]:
    """Deterministic list of samples; each sample draws from its own child generator."""
    world = ToyWorld(config)
    root = np.random.SeedSequence([seed, int(overlapping)])
    out = []
    for i, child in enumerate(root.spawn(n_samples)):
        out.append(make_sample(world, np.random.default_rng(child), f"{prefix}-{seed}-{i:06d}",
                               sir_db=sir_db, overlapping=overlapping))
    return out


def cell_samples(config: ToyConfig, seed: int, sir_db: float, overlapping: bool, n_samples: int) -> list[ToySample]:
    """Fixed test set for one grid cell.

    The cell seed ignores the overlap flag so the on/off cells share speakers,
    tokens and noise draws and differ only in the enrollment interferer.
    """
    world = ToyWorld(config)
    cell = np.random.SeedSequence([seed, int(round((sir_db + 100.0) * 1000))])
    tag = "on" if overlapping else "off"
    return [make_sample(world, np.random.default_rng(child), f"test-{sir_db:+.1f}-{tag}-{i:04d}",
                        sir_db=sir_db, overlapping=overlapping)
            for i, child in enumerate(cell.spawn(n_samples))]


def validation_split(samples: Sequence[ToySample], seed: int, fraction: float = 0.1):
    """Split by a seeded hash of the sample id; returns ``(train, valid)``."""
    train, valid = [], []
    for s in samples:
        h = hashlib.sha256(f"{seed}:{s.sample_id}".encode()).digest()
        (valid if int.from_bytes(h[:8], "little") / 2**64 < fraction else train).append(s)
    return train, valid


# -- manifests -------------------------------------------------------------

_META_FIELDS = ("sample_id", "transcript", "wake", "target_speaker", "interferer_speaker", "sir_db", "snr_db",
                "overlapping_enrollment", "achieved_sir_db", "achieved_snr_db", "norm_factor")


def save_manifest(directory, samples: Iterable[ToySample], config: ToyConfig | None = None) -> Path:
    """Write ``manifest.jsonl`` plus ``features.npz`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as fh:
        if config is not None:
            fh.write(json.dumps({"toy_config": config.to_dict()}) + "\n")
        for s in samples:
            rec = {k: getattr(s, k) for k in _META_FIELDS}
            for k in ("achieved_snr_db", "snr_db"):
                if math.isinf(rec[k]):
                    rec[k] = "inf"
            fh.write(json.dumps(rec) + "\n")
            arrays[f"{s.sample_id}/enrollment"] = s.enrollment
            arrays[f"{s.sample_id}/command"] = s.command
    np.savez(directory / "features.npz", **arrays)
    return directory / "manifest.jsonl"


def load_manifest(directory) -> tuple[list[ToySample], ToyConfig | None]:
    directory = Path(directory)
    path = directory / "manifest.jsonl"
    if not path.exists():
        raise FormatError(f"no manifest.jsonl in {directory}")
    config, samples = None, []
    with np.load(directory / "features.npz") as feats, open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "toy_config" in rec:
                config = ToyConfig.from_dict(rec["toy_config"])
                continue
            for k in ("achieved_snr_db", "snr_db"):
                rec[k] = float(rec[k])
            sid = rec["sample_id"]
            try:
                enr, cmd = feats[f"{sid}/enrollment"], feats[f"{sid}/command"]
            except KeyError as exc:
                raise FormatError(f"features for {sid} missing from features.npz") from exc
            samples.append(ToySample(enrollment=enr, command=cmd, **rec))
    return samples, config


def manifest_hash(samples: Sequence[ToySample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(np.ascontiguousarray(s.enrollment).tobytes())
        h.update(np.ascontiguousarray(s.command).tobytes())
        h.update(json.dumps([s.transcript, s.wake]).encode())
    return h.hexdigest()


def check_shapes(samples: Sequence[ToySample], feat_dim: int) -> None:
    for s in samples:
        if s.enrollment.ndim != 2 or s.enrollment.shape[1] != feat_dim or s.command.shape[1:] != (feat_dim,):
            raise ContractError(f"{s.sample_id}: feature dimension does not match {feat_dim}")

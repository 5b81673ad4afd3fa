"""Two-speaker mixture synthesis with reverberation and background noise.

One sample is produced in four steps: reverberate target, interferer and
noise with distinct impulse responses; cut each speech signal into an
enrollment prefix (whole words, at most ``enrollment_cut`` seconds) and a
command remainder; add the interferer to both segments with a single gain
chosen for the requested SIR; add the noise (prefix to enrollment, rest to
command) with a single gain chosen for the requested SNR. The two mixtures
are finally peak-normalised together.

SIR and SNR are measured on the stems before normalisation, so they come out
exact up to rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve

from .errors import ContractError, DegenerateInputError, FormatError, UnsplittableError
from .signal import CANONICAL_RATE, Waveform, read_wav, write_wav

MAX_ENROLLMENT_SECONDS = 1.5
PEAK_LEVEL = 0.9
CROSSFADE_SECONDS = 0.010


@dataclass
class MixtureSpec:
    target_utterance_id: str
    interferer_utterance_id: str
    noise_id: str | None
    sir_db: float
    snr_db: float
    rir_set_id: str | None = None
    enrollment_cut: float = MAX_ENROLLMENT_SECONDS
    rng_seed: int = 0
    overlapping_enrollment: bool = True

    def __post_init__(self):
        if not -5.0 <= self.sir_db <= 5.0:
            raise ContractError(f"sir_db must lie in [-5, 5], got {self.sir_db}")
        if not (0.0 <= self.snr_db <= 20.0 or self.snr_db == math.inf):
            raise ContractError(f"snr_db must lie in [0, 20] (or inf to disable noise), got {self.snr_db}")
        if not 0.0 < self.enrollment_cut <= MAX_ENROLLMENT_SECONDS:
            raise ContractError(f"enrollment_cut must lie in (0, 1.5], got {self.enrollment_cut}")


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int = CANONICAL_RATE
    t60: float | None = None

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or self.taps.size == 0:
            raise ContractError("RIR must be a non-empty 1-D array")
        if not np.isfinite(self.taps).all():
            raise ContractError("RIR taps must be finite")
        first = int(np.flatnonzero(self.taps)[0]) if np.any(self.taps) else 0
        if first > self.sample_rate // 1000:
            raise ContractError("RIR direct path must lie within 1 ms of the origin")


@dataclass
class Utterance:
    waveform: Waveform
    words: list[tuple[float, float]]
    transcript: list[str]
    speaker: str = ""

    def __post_init__(self):
        if len(self.words) != len(self.transcript):
            raise ContractError("one word boundary per transcript word is required")


@dataclass
class AudioCorpus:
    utterances: dict[str, Utterance]
    noises: dict[str, Waveform] = field(default_factory=dict)
    rir_sets: dict[str, Sequence[Rir]] = field(default_factory=dict)


@dataclass
class MixedSample:
    enrollment_mix: Waveform
    command_mix: Waveform
    enrollment_clean: Waveform
    transcript: list
    wake_text: list
    achieved_sir_db: float
    achieved_snr_db: float
    overlapping_enrollment: bool
    norm_factor: float
    interferer_gain: float
    noise_gain: float
    stems: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x))) if len(x) else 0.0


def _overlap(a: Waveform | np.ndarray, b: Waveform | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = getattr(a, "samples", a)
    b = getattr(b, "samples", b)
    n = min(len(a), len(b))
    return np.asarray(a[:n], dtype=np.float64), np.asarray(b[:n], dtype=np.float64)


def gain_for_sir(target, interferer, sir_db: float) -> float:
    """Interferer scale giving ``10 log10(P_target / P_scaled) == sir_db`` over the overlap."""
    t, i = _overlap(target, interferer)
    pt, pi = _power(t), _power(i)
    if pt == 0.0 or pi == 0.0:
        raise DegenerateInputError("gain_for_sir: a signal has zero power over the overlap region")
    return math.sqrt(pt / (pi * 10.0 ** (sir_db / 10.0)))


def measure_sir(target_component, interferer_component) -> float:
    t, i = _overlap(target_component, interferer_component)
    pt, pi = _power(t), _power(i)
    if pt == 0.0 or pi == 0.0:
        raise DegenerateInputError("measure_sir: a component has zero power")
    return 10.0 * math.log10(pt / pi)


# the SNR measurement is the same power ratio
measure_snr = measure_sir
gain_for_snr = gain_for_sir


def apply_rir(w: Waveform, rir: Rir) -> Waveform:
    """Full linear convolution: output length is ``len(w) + len(rir) - 1``."""
    if w.sample_rate != rir.sample_rate:
        raise ContractError(f"sample rates differ: signal {w.sample_rate} Hz, RIR {rir.sample_rate} Hz")
    small = len(rir.taps) * len(w.samples) < 4_000_000
    out = convolve(w.samples, rir.taps, mode="full", method="direct" if small else "fft")
    return Waveform(out, w.sample_rate)


def synthetic_rir(rng: np.random.Generator, sample_rate: int = CANONICAL_RATE,
                  t60_range: tuple[float, float] = (0.2, 0.6)) -> Rir:
    """Exponentially decaying white noise with a unit direct-path tap at 0."""
    t60 = float(rng.uniform(*t60_range))
    n = int(t60 * sample_rate)
    t = np.arange(n) / sample_rate
    # amplitude falls by 60 dB after t60 seconds
    taps = rng.standard_normal(n) * 10.0 ** (-3.0 * t / t60) * 0.3
    taps[0] = 1.0
    return Rir(taps, sample_rate, t60)


def split_enrollment(w: Waveform, word_boundaries: Sequence[tuple[float, float]],
                     max_seconds: float = MAX_ENROLLMENT_SECONDS) -> tuple[Waveform, Waveform, float, int]:
    """Cut after the last whole word ending at or before ``max_seconds``.

    Returns ``(enrollment, command, cut_seconds, n_enrollment_words)``.
    """
    if not word_boundaries:
        raise UnsplittableError("no word boundaries supplied")
    prev_end = 0.0
    for start, end in word_boundaries:
        if start < prev_end - 1e-9 or end < start:
            raise ContractError("word boundaries must be sorted and non-overlapping")
        prev_end = end
    if word_boundaries[-1][1] > w.duration + 1e-9:
        raise ContractError("word boundaries extend past the end of the signal")
    n_words = sum(1 for _, end in word_boundaries if end <= max_seconds + 1e-9)
    if n_words == 0:
        raise UnsplittableError(
            f"first word ends at {word_boundaries[0][1]:.3f} s, after the {max_seconds} s enrollment limit")
    cut = float(word_boundaries[n_words - 1][1])
    k = int(round(cut * w.sample_rate))
    return Waveform(w.samples[:k], w.sample_rate), Waveform(w.samples[k:], w.sample_rate), cut, n_words


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Truncate or zero-pad to exactly ``n`` samples."""
    if len(x) >= n:
        return x[:n].copy()
    return np.concatenate([x, np.zeros(n - len(x))])


def loop_noise(noise: np.ndarray, n: int, sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    """Repeat ``noise`` to ``n`` samples, joining copies with a linear crossfade."""
    if len(noise) == 0:
        raise DegenerateInputError("empty noise recording")
    if len(noise) >= n:
        return noise[:n].copy()
    fade = min(int(CROSSFADE_SECONDS * sample_rate), len(noise) // 2)
    out = noise.copy()
    ramp = np.linspace(0.0, 1.0, fade, endpoint=False) if fade else np.zeros(0)
    while len(out) < n:
        if fade:
            head = out[-fade:] * (1.0 - ramp) + noise[:fade] * ramp
            out = np.concatenate([out[:-fade], head, noise[fade:]])
        else:
            out = np.concatenate([out, noise])
    return out[:n]


def _rirs_for(spec: MixtureSpec, corpus: AudioCorpus, rng: np.random.Generator, sr: int) -> list[Rir]:
    if spec.rir_set_id is not None and spec.rir_set_id in corpus.rir_sets:
        rirs = list(corpus.rir_sets[spec.rir_set_id])
        if len(rirs) < 3:
            raise ContractError(f"RIR set {spec.rir_set_id!r} needs three responses (target, interferer, noise)")
        return rirs[:3]
    return [synthetic_rir(rng, sr) for _ in range(3)]


def synthesize(spec: MixtureSpec, corpus: AudioCorpus) -> MixedSample:
    """Build one (enrollment, command, transcript) triple from ``spec``."""
    try:
        tgt = corpus.utterances[spec.target_utterance_id]
        itf = corpus.utterances[spec.interferer_utterance_id]
    except KeyError as exc:
        raise ContractError(f"unknown utterance id {exc.args[0]!r}") from exc
    use_noise = spec.snr_db != math.inf
    if use_noise and spec.noise_id not in corpus.noises:
        raise ContractError(f"unknown noise id {spec.noise_id!r}")
    sr = tgt.waveform.sample_rate
    rng = np.random.default_rng(spec.rng_seed)

    # 1. reverberation, one response per source
    rir_t, rir_i, rir_n = _rirs_for(spec, corpus, rng, sr)
    t_rev = apply_rir(tgt.waveform, rir_t)
    i_rev = apply_rir(itf.waveform, rir_i)

    # 2. enrollment / command split on word boundaries
    t_enr, t_cmd, _, n_wake = split_enrollment(t_rev, tgt.words, spec.enrollment_cut)
    i_enr, i_cmd, _, _ = split_enrollment(i_rev, itf.words, spec.enrollment_cut)
    n_enr, n_cmd = len(t_enr), len(t_cmd)
    i_enr_stem = fit_length(i_enr.samples, n_enr)
    i_cmd_stem = fit_length(i_cmd.samples, n_cmd)
    if not spec.overlapping_enrollment:
        i_enr_stem = np.zeros(n_enr)

    # 3. one interferer gain for both segments, measured where the interferer is active
    t_active = np.concatenate([t_enr.samples, t_cmd.samples] if spec.overlapping_enrollment else [t_cmd.samples])
    i_active = np.concatenate([i_enr_stem, i_cmd_stem] if spec.overlapping_enrollment else [i_cmd_stem])
    g_i = gain_for_sir(t_active, i_active, spec.sir_db)
    speech_enr = t_enr.samples + g_i * i_enr_stem
    speech_cmd = t_cmd.samples + g_i * i_cmd_stem
    achieved_sir = measure_sir(t_active, g_i * i_active)

    # 4. noise: head on the enrollment, remainder on the command, one gain
    if use_noise:
        n_rev = apply_rir(corpus.noises[spec.noise_id], rir_n).samples
        noise = loop_noise(n_rev, n_enr + n_cmd, sr)
        speech = np.concatenate([speech_enr, speech_cmd])
        g_n = gain_for_snr(speech, noise, spec.snr_db)
        noise_enr, noise_cmd = g_n * noise[:n_enr], g_n * noise[n_enr:]
        achieved_snr = measure_snr(speech, g_n * noise)
    else:
        g_n = 0.0
        noise_enr, noise_cmd = np.zeros(n_enr), np.zeros(n_cmd)
        achieved_snr = math.inf

    enr_mix = speech_enr + noise_enr
    cmd_mix = speech_cmd + noise_cmd
    peak = max(np.max(np.abs(enr_mix), initial=0.0), np.max(np.abs(cmd_mix), initial=0.0))
    norm = PEAK_LEVEL / peak if peak > 0 else 1.0

    return MixedSample(
        enrollment_mix=Waveform(enr_mix * norm, sr),
        command_mix=Waveform(cmd_mix * norm, sr),
        enrollment_clean=Waveform(t_enr.samples * norm, sr),
        transcript=list(tgt.transcript[n_wake:]),
        wake_text=list(tgt.transcript[:n_wake]),
        achieved_sir_db=achieved_sir,
        achieved_snr_db=achieved_snr,
        overlapping_enrollment=spec.overlapping_enrollment,
        norm_factor=norm,
        interferer_gain=g_i,
        noise_gain=g_n,
        stems={"target_enrollment": t_enr.samples, "target_command": t_cmd.samples,
               "interferer_enrollment": g_i * i_enr_stem, "interferer_command": g_i * i_cmd_stem,
               "noise_enrollment": noise_enr, "noise_command": noise_cmd},
    )


def tone_corpus(seed: int = 0, n_speakers: int = 4, utts_per_speaker: int = 3,
                n_noises: int = 2, sample_rate: int = CANONICAL_RATE) -> AudioCorpus:
    """Small synthetic audio corpus: each 'word' is a speaker-pitched tone burst.

    Useful for exercising :func:`synthesize` without real recordings.
    """
    rng = np.random.default_rng(seed)
    words = ["hey", "box", "play", "stop", "next", "up", "down", "lights"]
    utts = {}
    for s in range(n_speakers):
        f0 = rng.uniform(100, 300)
        for k in range(utts_per_speaker):
            n_words = int(rng.integers(3, 7))
            chunks, bounds, text, t = [], [], [], 0.0
            for _ in range(n_words):
                gap = rng.uniform(0.05, 0.15)
                dur = rng.uniform(0.2, 0.5)
                w = words[int(rng.integers(len(words)))]
                n_gap, n_dur = int(gap * sample_rate), int(dur * sample_rate)
                tt_ = np.arange(n_dur) / sample_rate
                harm = 1 + words.index(w) % 4
                burst = np.sin(2 * np.pi * f0 * harm * tt_) * np.hanning(n_dur) * 0.3
                chunks += [np.zeros(n_gap), burst]
                start = t + n_gap / sample_rate
                t = start + n_dur / sample_rate
                bounds.append((start, t))
                text.append(w)
            samples = np.concatenate(chunks + [np.zeros(int(0.1 * sample_rate))])
            utts[f"spk{s}_utt{k}"] = Utterance(Waveform(samples, sample_rate), bounds, text, f"spk{s}")
    noises = {f"noise{j}": Waveform(rng.standard_normal(int(rng.uniform(0.5, 3.0) * sample_rate)) * 0.05,
                                    sample_rate) for j in range(n_noises)}
    return AudioCorpus(utts, noises)


def random_spec(corpus: AudioCorpus, rng: np.random.Generator, sir_range=(-5.0, 5.0),
                snr_range=(0.0, 20.0), overlapping: bool = True) -> MixtureSpec:
    """Draw a MixtureSpec whose two utterances come from different speakers."""
    ids = sorted(corpus.utterances)
    while True:
        a, b = (ids[i] for i in rng.choice(len(ids), size=2, replace=False))
        if corpus.utterances[a].speaker != corpus.utterances[b].speaker or not corpus.utterances[a].speaker:
            break
    noise_ids = sorted(corpus.noises)
    return MixtureSpec(
        target_utterance_id=a, interferer_utterance_id=b,
        noise_id=noise_ids[int(rng.integers(len(noise_ids)))] if noise_ids else None,
        sir_db=float(rng.uniform(*sir_range)), snr_db=float(rng.uniform(*snr_range)) if noise_ids else math.inf,
        rng_seed=int(rng.integers(2**63)), overlapping_enrollment=overlapping)


def load_audio_corpus(directory) -> AudioCorpus:
    """Read a corpus directory.

    Layout: ``utterances.jsonl`` with one record per utterance
    (``id``, ``wav``, ``speaker``, ``words`` as ``[[start, end], ...]`` in
    seconds, ``transcript``), noise recordings under ``noises/*.wav`` and
    optional impulse responses under ``rirs/<set>/*.wav`` (at least three per
    set, used for target, interferer and noise in sorted order).
    """
    root = Path(directory)
    index = root / "utterances.jsonl"
    if not index.exists():
        raise FormatError(f"{root}: missing utterances.jsonl")
    utts = {}
    for line_no, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            utts[rec["id"]] = Utterance(read_wav(root / rec["wav"]), [tuple(b) for b in rec["words"]],
                                        list(rec["transcript"]), str(rec.get("speaker", "")))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{index}:{line_no}: bad record ({exc})") from exc
    noises = {p.stem: read_wav(p) for p in sorted((root / "noises").glob("*.wav"))}
    rirs = {}
    for d in sorted(p for p in (root / "rirs").glob("*") if p.is_dir()):
        rirs[d.name] = [Rir(read_wav(p).samples) for p in sorted(d.glob("*.wav"))]
    return AudioCorpus(utts, noises, rirs)


def write_sample(out_dir, sample_id: str, spec: MixtureSpec, mixed: MixedSample) -> dict:
    """Write the three WAVs of ``mixed`` and return its manifest record."""
    out = Path(out_dir)
    paths = {}
    for kind, w in (("enrollment", mixed.enrollment_mix), ("command", mixed.command_mix),
                    ("enrollment_clean", mixed.enrollment_clean)):
        rel = f"wav/{sample_id}_{kind}.wav"
        write_wav(out / rel, w)
        paths[kind] = rel
    spec_fields = asdict(spec)
    if math.isinf(spec_fields["snr_db"]):
        spec_fields["snr_db"] = "inf"
    return {"id": sample_id, "paths": paths, "transcript": mixed.transcript, "wake_text": mixed.wake_text,
            "spec": spec_fields, "achieved_sir_db": mixed.achieved_sir_db,
            "achieved_snr_db": "inf" if math.isinf(mixed.achieved_snr_db) else mixed.achieved_snr_db,
            "norm_factor": mixed.norm_factor, "interferer_gain": mixed.interferer_gain,
            "overlapping_enrollment": mixed.overlapping_enrollment}

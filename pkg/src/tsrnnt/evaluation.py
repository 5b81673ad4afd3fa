"""Token error rate and the SIR sweep over enrollment conditions."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DegenerateInputError
from .model import TSRNNT
from .toy import ToyConfig, ToySample, cell_samples
from .transducer import greedy_decode_stream

# packed alignment cost: edits dominate, then more matches, then more substitutions
_E, _M = 1 << 40, 1 << 20


@dataclass(slots=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    matches: int = 0
    ref_tokens: int = 0

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.ref_tokens == 0:
            raise DegenerateInputError("error rate undefined: no reference tokens")
        return self.edits / self.ref_tokens

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.substitutions + other.substitutions, self.insertions + other.insertions,
                           self.deletions + other.deletions, self.matches + other.matches,
                           self.ref_tokens + other.ref_tokens)


def _packed_costs(refs: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    """Optimal packed alignment cost for a batch of equal-length pairs.

    ``refs`` is ``(B, m)``, ``hyps`` is ``(B, n)``; the dynamic programme is
    run once for the whole batch.
    """
    B, m = refs.shape
    n = hyps.shape[1]
    prev = np.broadcast_to(np.arange(n + 1, dtype=np.int64) * _E, (B, n + 1)).copy()
    for i in range(1, m + 1):
        cur = np.empty_like(prev)
        cur[:, 0] = i * _E
        for j in range(1, n + 1):
            same = refs[:, i - 1] == hyps[:, j - 1]
            diag = prev[:, j - 1] + np.where(same, -_M, _E - 1)
            cur[:, j] = np.minimum(diag, np.minimum(prev[:, j], cur[:, j - 1]) + _E)
        prev = cur
    return prev[:, n]


def edit_count_table(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> np.ndarray:
    """Per-pair minimum-edit counts as an int array with columns (S, I, D, matches, ref_len).

    Among alignments with the fewest edits the one with the most matches wins,
    then the one with the most substitutions.
    """
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    vocab: dict = {}
    seen: dict[tuple, tuple[int, int]] = {}  # sequence -> (length, row in that length's table)
    tables: dict[int, list[tuple[int, ...]]] = {}

    def enc(seq) -> tuple[int, int]:
        key = tuple(seq)
        loc = seen.get(key)
        if loc is None:
            rows = tables.setdefault(len(key), [])
            rows.append(tuple(vocab.setdefault(tok, len(vocab)) for tok in key))
            loc = seen[key] = (len(key), len(rows) - 1)
        return loc

    pairs = np.array([enc(r) + enc(h) for r, h in zip(refs, hyps)], dtype=np.int64).reshape(-1, 4)
    codes = {m: np.array(rows, dtype=np.int64).reshape(len(rows), m) for m, rows in tables.items()}
    subs_all = np.zeros(len(pairs), dtype=np.int64)
    match_all = np.zeros(len(pairs), dtype=np.int64)
    for m, n in sorted(set(map(tuple, pairs[:, [0, 2]].tolist()))):
        idx = np.flatnonzero((pairs[:, 0] == m) & (pairs[:, 2] == n))
        cost = _packed_costs(codes[m][pairs[idx, 1]], codes[n][pairs[idx, 3]])
        # cost = edits*E - matches*M - subs
        edits = (cost + _E - 1) // _E
        rest = edits * _E - cost
        match_all[idx] = rest // _M
        subs_all[idx] = rest - match_all[idx] * _M
    m, n = pairs[:, 0], pairs[:, 2]
    return np.stack([subs_all, n - match_all - subs_all, m - match_all - subs_all, match_all, m], axis=1)


def align_counts(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> list[ErrorCounts]:
    """Per-pair :class:`ErrorCounts`; see :func:`edit_count_table`."""
    return [ErrorCounts(*row) for row in edit_count_table(refs, hyps).tolist()]


def wer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> tuple[float, ErrorCounts]:
    """Corpus-level error rate: total edits over total reference tokens."""
    total = ErrorCounts(*edit_count_table(refs, hyps).sum(axis=0).tolist())
    if total.ref_tokens == 0:
        raise DegenerateInputError("all references are empty")
    return total.rate, total


# -- decoding -----------------------------------------------------------------

def decode_samples(model: TSRNNT, samples: Sequence[ToySample], max_symbols_per_frame: int = 4) -> list[list[int]]:
    """Greedy transcripts for ``samples``, encoding equal-shape groups together."""
    groups: dict[tuple, list[int]] = {}
    for k, s in enumerate(samples):
        groups.setdefault((s.enrollment.shape, s.command.shape, len(s.wake)), []).append(k)
    out: list[list[int] | None] = [None] * len(samples)
    robust = model.config.variant == "robust"
    with tt.no_grad():
        for idx in groups.values():
            enroll = np.stack([samples[k].enrollment for k in idx])
            mix = np.stack([samples[k].command for k in idx])
            wake = np.array([samples[k].wake for k in idx]) if robust else None
            z = model.asr_encode(mix, model.speaker_bias(enroll, wake)).data
            for row, k in enumerate(idx):
                out[k] = greedy_decode_stream(z[row], model, max_symbols_per_frame).tokens
    return out  # type: ignore[return-value]


# -- the sweep --------------------------------------------------------------------

DEFAULT_GRID = tuple(float(s) for s in range(5, -6, -1))


@dataclass
class CellResult:
    variant: str
    overlapping: bool
    sir_db: float
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    samples: int
    ref_tokens: int

    def key(self) -> tuple:
        return (self.variant, self.overlapping, self.sir_db)


@dataclass
class EvalReport:
    cells: dict[tuple, CellResult] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key) -> CellResult:
        return self.cells[key]

    def wer(self, variant: str, overlapping: bool, sir_db: float) -> float:
        return self.cells[(variant, overlapping, float(sir_db))].wer

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(k[0] for k in self.cells))

    @property
    def grid(self) -> list[float]:
        return sorted({k[2] for k in self.cells}, reverse=True)

    def check_complete(self) -> None:
        for v in self.variants:
            for ov in (True, False):
                for s in self.grid:
                    if (v, ov, s) not in self.cells:
                        raise ContractError(f"report is missing cell {(v, ov, s)}")

    def records(self) -> list[dict]:
        return [dict(vars(c)) for c in self.cells.values()]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records()]
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        """Monospace table: one row per (variant, enrollment condition), SIR columns high to low."""
        grid = self.grid
        head = f"{'model':<12}{'enrollment':<13}" + "".join(f"{s:>8g}" for s in grid)
        lines = ["WER (%) by SIR (dB)", head, "-" * len(head)]
        for v in self.variants:
            for ov in (False, True):
                if not any((v, ov, s) in self.cells for s in grid):
                    continue
                label = "overlapping" if ov else "clean"
                cells = "".join(f"{100 * self.cells[(v, ov, s)].wer:>8.2f}" if (v, ov, s) in self.cells
                                else f"{'-':>8}" for s in grid)
                lines.append(f"{v:<12}{label:<13}{cells}")
        return "\n".join(lines) + "\n"

    def write(self, table_path, records_path=None) -> None:
        table_path = Path(table_path)
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table_path.write_text(self.render(), encoding="utf-8")
        if records_path is None:
            records_path = table_path.with_suffix(".jsonl")
        Path(records_path).write_text(self.to_jsonl(), encoding="utf-8")


def model_digest(model: TSRNNT) -> str:
    h = hashlib.sha256(model.config_hash().encode())
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k].data).tobytes())
    return h.hexdigest()


Decoder = Callable[[Sequence[ToySample]], list[list[int]]]


def sir_sweep(models: Mapping[str, TSRNNT | Decoder], toy_config: ToyConfig, *, seed: int = 0,
              grid: Iterable[float] = DEFAULT_GRID, overlaps: Iterable[bool] = (True, False),
              samples_per_cell: int = 50, max_symbols_per_frame: int = 4) -> EvalReport:
    """Decode the fixed per-cell test sets with every model and tabulate error rates.

    ``models`` maps a display name (usually the variant) to a model or to any
    callable turning a list of samples into transcripts.
    """
    if not models:
        raise ConfigError("no models to evaluate")
    grid = [float(s) for s in grid]
    overlaps = list(overlaps)
    report = EvalReport(meta={"seed": seed, "samples_per_cell": samples_per_cell, "grid": grid,
                              "toy_config": toy_config.to_dict(), "models": {}})
    cache: dict[tuple, list[ToySample]] = {}
    manifest = hashlib.sha256()
    for name, m in models.items():
        if isinstance(m, TSRNNT):
            report.meta["models"][name] = model_digest(m)
            decode = lambda samples, m=m: decode_samples(m, samples, max_symbols_per_frame)
        else:
            report.meta["models"][name] = getattr(m, "__name__", "callable")
            decode = m
        for ov in overlaps:
            for sir in grid:
                key = (sir, ov)
                if key not in cache:
                    cache[key] = cell_samples(toy_config, seed, sir, ov, samples_per_cell)
                samples = cache[key]
                hyps = decode(samples)
                rate, c = wer([s.transcript for s in samples], hyps)
                report.cells[(name, ov, sir)] = CellResult(name, ov, sir, rate, c.substitutions, c.insertions,
                                                           c.deletions, len(samples), c.ref_tokens)
    for key in sorted(cache):
        for s in cache[key]:
            manifest.update(np.ascontiguousarray(s.command).tobytes())
    report.meta["manifest_hash"] = manifest.hexdigest()
    return report

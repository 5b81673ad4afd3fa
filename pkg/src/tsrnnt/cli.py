"""Command-line entry point: ``tsrnnt {synth,train,decode,eval,selfcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Settings are layered: a JSON config file (``--config``) is overridden by
``TSRNNT_*`` environment variables, which are overridden by explicit flags.
The effective settings are echoed to stderr when a command starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .checkpoint import FORMAT_VERSION
from .errors import IntegrityError, TsrnntError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 20240917
ENV_PREFIX = "TSRNNT_"


class UsageError(Exception):
    """Bad command-line usage; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration layering ----------------------------------------------------

GLOBAL_KEYS = {"seed": int, "verbose": int, "toy": bool, "float64": bool, "jobs": int}


def _env_value(kind, raw: str):
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return kind(raw)


def effective_settings(args: argparse.Namespace, file_cfg: dict) -> dict:
    settings = {"seed": DEFAULT_SEED, "verbose": 0, "toy": False, "float64": False, "jobs": 1}
    settings.update({k: v for k, v in file_cfg.get("global", {}).items() if k in GLOBAL_KEYS})
    for key, kind in GLOBAL_KEYS.items():
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            try:
                settings[key] = _env_value(kind, raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {ENV_PREFIX + key.upper()}: {raw!r}") from exc
    for key in GLOBAL_KEYS:
        val = getattr(args, key, None)
        if val not in (None, False):
            settings[key] = val
    return settings


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _echo(settings: dict, extra: dict | None = None) -> None:
    print("effective config: " + json.dumps({**settings, **(extra or {})}, sort_keys=True, default=str),
          file=sys.stderr)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args, settings, file_cfg) -> int:
    from ._validation import parse_range
    from .mixing import load_audio_corpus, random_spec, synthesize, tone_corpus, write_sample
    from .toy import ToyConfig, generate_toy_corpus, save_manifest

    try:
        sir = parse_range(args.sir_range, "--sir-range")
        snr = parse_range(args.snr_range, "--snr-range")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if sir[0] < -5 or sir[1] > 5 or snr[0] < 0 or snr[1] > 20:
        raise UsageError("SIR must stay within -5:5 dB and SNR within 0:20 dB")
    overlapping = args.overlapping_enrollment == "on"
    out = Path(args.out)
    if settings["toy"]:
        toy = ToyConfig.from_dict({**file_cfg.get("toy", {}), "sir_range": sir, "snr_range": snr})
        samples = generate_toy_corpus(toy, settings["seed"], args.n, overlapping=overlapping)
        path = save_manifest(out, samples, toy)
        print(f"wrote {len(samples)} toy samples to {path}")
        return EXIT_OK

    corpus = load_audio_corpus(args.corpus) if args.corpus else tone_corpus(settings["seed"])
    rng = np.random.default_rng(settings["seed"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i in range(args.n):
            spec = random_spec(corpus, rng, sir, snr, overlapping)
            rec = write_sample(out, f"mix{i:06d}", spec, synthesize(spec, corpus))
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {args.n} mixtures to {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args, settings, file_cfg) -> int:
    from .model import ModelConfig
    from .toy import load_manifest
    from .training import StageConfig, TrainState, load_model, run_stage, warm_start

    if not args.manifest:
        raise UsageError("train needs --manifest pointing at a synthesized toy manifest directory")
    samples, toy = load_manifest(args.manifest)
    model_cfg = dict(file_cfg.get("model", {}))
    if toy is not None:
        model_cfg.setdefault("feat_dim", toy.feat_dim)
        model_cfg.setdefault("vocab_size", toy.vocab_size)
    if args.variant:
        model_cfg["variant"] = args.variant
    stage_cfg = {**file_cfg.get("stage", {}), "stage": args.stage, "seed": settings["seed"],
                 "toy": settings["toy"] or toy is not None}
    for key in ("epochs", "learning_rate"):
        if getattr(args, key) is not None:
            stage_cfg[key] = getattr(args, key)
    stage = StageConfig(**stage_cfg)
    inits = [p for p in (args.init or "").split(",") if p]
    _echo(settings, {"stage": vars(stage), "model": model_cfg, "init": inits})

    params = report = state = None
    if args.resume:
        state = TrainState.load(args.resume)
        config = ModelConfig.from_dict(model_cfg)
    elif len(inits) == 2:
        donors = {}
        for p in inits:
            m = load_model(p)
            donors["streaming" if m.config.streaming else "offline"] = m.params
        if set(donors) != {"streaming", "offline"}:
            raise UsageError("--init with two checkpoints needs one streaming and one offline donor")
        config = ModelConfig.from_dict(model_cfg)
        params, report = warm_start(config, donors, settings["seed"])
    elif len(inits) == 1:
        m = load_model(inits[0])
        config = m.config
        params = m.params
    elif not inits:
        config = ModelConfig.from_dict(model_cfg)
    else:
        raise UsageError("--init takes at most two checkpoints")

    res = run_stage(stage, config, samples, args.out, params=params, state=state, warm_start_report=report,
                    log=(lambda s: print(s, file=sys.stderr)) if settings["verbose"] else None)
    print(f"checkpoint: {res.checkpoint}\nbest: {res.best_checkpoint}\nmetrics: {res.metrics}")
    return EXIT_OK


def _load_input(path: str, feat_dim: int) -> np.ndarray:
    from ._validation import check_features
    from .signal import extract_features, read_wav

    p = Path(path)
    if p.suffix == ".wav":
        return check_features(extract_features(read_wav(p), n_mels=feat_dim).frames, feat_dim, p.name)
    if p.suffix == ".npy":
        return check_features(np.load(p), feat_dim, p.name)
    raise UsageError(f"{path}: expected a .wav or .npy file")


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"--wake-text must be token ids separated by spaces or commas, got {text!r}") from exc


def cmd_decode(args, settings, file_cfg) -> int:
    from . import tensor as tt
    from ._validation import check_tokens
    from .model import ModelConfig
    from .training import load_model
    from .transducer import GreedyDecoder

    expected = ModelConfig.from_dict(file_cfg["model"]) if "model" in file_cfg else None
    model = load_model(args.ckpt, expected)
    robust = model.config.variant == "robust"
    if robust and not args.wake_text:
        raise UsageError("the robust variant needs --wake-text")
    wake = None
    if robust:
        wake = check_tokens(_parse_tokens(args.wake_text), model.config.vocab_size, allow_empty=False,
                            name="wake word")
    enroll = _load_input(args.enrollment, model.config.feat_dim)
    mixture = _load_input(args.mixture, model.config.feat_dim)
    with tt.no_grad():
        bias = model.speaker_bias(enroll, wake)
        dec = GreedyDecoder(model, args.max_symbols)
        if args.streaming:
            for z_t in model.encode_stream(mixture, bias):
                for token, frame in dec.feed(z_t):
                    print(f"event token={token} frame={frame}", flush=True)
        else:
            for z_t in model.asr_encode(mixture, bias).data[0]:
                dec.feed(z_t)
    print(" ".join(str(t) for t in dec.result().tokens))
    return EXIT_OK


def cmd_eval(args, settings, file_cfg) -> int:
    from ._validation import parse_grid
    from .evaluation import sir_sweep
    from .toy import ToyConfig
    from .training import load_model

    paths = [p for p in args.ckpt.split(",") if p]
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise UsageError(f"checkpoint not found: {', '.join(missing)}")
    models = {}
    for p in paths:
        m = load_model(p)
        name = m.config.variant
        models[name if name not in models else f"{name}:{Path(p).stem}"] = m
    overlaps = {"both": (True, False), "on": (True,), "off": (False,)}[args.overlap]
    toy = ToyConfig.from_dict(file_cfg.get("toy", {}))
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _echo(settings, {"grid": grid, "overlap": args.overlap, "checkpoints": paths})
    report = sir_sweep(models, toy, seed=settings["seed"], grid=grid, overlaps=overlaps,
                       samples_per_cell=args.samples_per_cell)
    report.write(args.out)
    print(report.render(), end="")
    return EXIT_OK


def run_selfcheck(checkpoint: str | None = None) -> list[tuple[str, bool, str]]:
    """The fast invariant suite; returns ``(name, passed, detail)`` per check."""
    from . import tensor as tt
    from .checkpoint import load_checkpoint
    from .evaluation import align_counts
    from .mixing import random_spec, synthesize, tone_corpus
    from .model import TSRNNT, ModelConfig
    from .transducer import Lattice, rnnt_loss, rnnt_loss_bruteforce

    rng = np.random.default_rng(0)
    results = []

    def check(name: str, fn: Callable[[], tuple[bool, str]]):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, f"{detail} ({time.perf_counter() - t0:.2f}s)"))

    def ops_grad():
        a = tt.parameter(rng.uniform(-1, 1, (3, 4)))
        b = tt.parameter(rng.uniform(-1, 1, (4, 2)))
        g = tt.parameter(rng.uniform(-1, 1, 2))
        err = tt.grad_check(lambda: tt.sum(tt.tanh(tt.layer_norm(a @ b, g, g)) * tt.softmax_rows(a @ b)), [a, b, g])
        return err <= 1e-4, f"max rel err {err:.2e}"

    def model_grad():
        cfg = ModelConfig(variant="robust", feat_dim=3, d_model=4, attention_heads=1, encoder_heads=1,
                          vocab_size=3, causal_context=2)
        m = TSRNNT(cfg, seed=1)
        enr, mix = rng.standard_normal((2, 3)), rng.standard_normal((3, 3))
        ps = [m.params[k] for k in ("enr_att.o.w", "txt_att.q.w", "asr_enc.in.w", "joint.out.b")]
        err = tt.grad_check(lambda: m.loss(enr, [1, 2], mix, [2, 1]), ps)
        return err <= 1e-4, f"max rel err {err:.2e}"

    def loss_oracle():
        worst = 0.0
        for _ in range(50):
            T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 5))
            logits = rng.standard_normal((T, U + 1, V))
            lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
            lat = Lattice(lp, rng.integers(1, V, U))
            worst = max(worst, abs(float(rnnt_loss(lat).data) - rnnt_loss_bruteforce(lat)))
        return worst <= 1e-10, f"max abs diff {worst:.1e}"

    def sir_measure():
        corpus = tone_corpus(0)
        worst = 0.0
        for _ in range(20):
            spec = random_spec(corpus, rng)
            mixed = synthesize(spec, corpus)
            worst = max(worst, abs(mixed.achieved_sir_db - spec.sir_db), abs(mixed.achieved_snr_db - spec.snr_db))
        return worst <= 1e-6, f"max dB error {worst:.1e}"

    def wer_oracle():
        import itertools
        seqs = [list(s) for n in range(4) for s in itertools.product("abc", repeat=n)]
        pairs = [(r, h) for r in seqs for h in seqs]
        counts = align_counts([p[0] for p in pairs], [p[1] for p in pairs])
        bad = sum(c.edits != _levenshtein(r, h) for c, (r, h) in zip(counts, pairs))
        return bad == 0, f"{len(pairs)} pairs, {bad} mismatches"

    def ckpt_integrity():
        if checkpoint is None:
            return True, "no checkpoint supplied"
        load_checkpoint(checkpoint)
        return True, f"{checkpoint} verified"

    check("tensor ops gradient", ops_grad)
    check("end-to-end gradient", model_grad)
    check("transducer loss oracle", loss_oracle)
    check("mixture SIR/SNR", sir_measure)
    check("error-rate oracle", wer_oracle)
    check("checkpoint integrity", ckpt_integrity)
    return results


def _levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cmd_selfcheck(args, settings, file_cfg) -> int:
    ckpt = args.checkpoint or os.environ.get(ENV_PREFIX + "SELFCHECK_CKPT")
    results = run_selfcheck(ckpt)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    ok = all(r[1] for r in results)
    print("selfcheck: " + ("all checks passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAILURE


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (lowest precedence)")
    common.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("-v", "--verbose", action="count", default=None)
    common.add_argument("--toy", action="store_true", default=None, help="use the synthetic toy corpus")
    common.add_argument("--float64", action="store_true", default=None, help="verification precision")
    common.add_argument("--jobs", type=int, help="worker thread bound")

    p = _Parser(prog="tsrnnt", description="Target-speaker transducer toolkit.")
    p.add_argument("--version", action="version",
                   version=f"tsrnnt {__version__} (checkpoint format {FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="synthesize mixtures")
    s.add_argument("--corpus", help="audio corpus directory (omit for a built-in tone corpus)")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--sir-range", default="-5:5")
    s.add_argument("--snr-range", default="0:20")
    s.add_argument("--overlapping-enrollment", choices=("on", "off"), default="on")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", choices=("pretrain", "main", "finetune"), required=True)
    t.add_argument("--manifest", help="toy manifest directory written by synth --toy")
    t.add_argument("--init", help="checkpoint, or streaming,offline donor pair")
    t.add_argument("--resume", help="training state to continue from")
    t.add_argument("--variant", choices=("baseline", "attentive", "robust"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", parents=[common], help="transcribe one mixture")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--enrollment", required=True, help=".wav or .npy features")
    d.add_argument("--mixture", required=True, help=".wav or .npy features")
    d.add_argument("--wake-text", help="wake-word token ids (required for the robust variant)")
    d.add_argument("--streaming", action="store_true", help="print (token, frame) events as they occur")
    d.add_argument("--max-symbols", type=int, default=4)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", parents=[common], help="SIR sweep over the toy test grid")
    e.add_argument("--ckpt", required=True, help="comma-separated checkpoints")
    e.add_argument("--grid", default="-5:5:1")
    e.add_argument("--overlap", choices=("both", "on", "off"), default="both")
    e.add_argument("--samples-per-cell", type=int, default=50)
    e.add_argument("--out", default="report.txt")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("selfcheck", parents=[common], help="run the fast invariant suite")
    c.add_argument("--checkpoint", help=f"also verify this checkpoint (or set {ENV_PREFIX}SELFCHECK_CKPT)")
    c.set_defaults(func=cmd_selfcheck)
    return p


_RANGE_OPTIONS = ("--sir-range", "--snr-range", "--grid")


def _attach_range_values(argv: Sequence[str]) -> list[str]:
    """Turn ``--grid -5:5:1`` into ``--grid=-5:5:1`` so argparse does not read the value as a flag."""
    out, it = [], iter(argv)
    for tok in it:
        if tok in _RANGE_OPTIONS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = _attach_range_values(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (synth, train, decode, eval, selfcheck)")
        file_cfg = load_config_file(args.config)
        settings = effective_settings(args, file_cfg)
        return args.func(args, settings, file_cfg)
    except UsageError as exc:
        print(f"tsrnnt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"tsrnnt: integrity error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (TsrnntError, OSError, ValueError) as exc:
        print(f"tsrnnt: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed in the
summary at the end) or as a script, ``python3 tests/test_acceptance.py``. Criterion 5 trains the
full three-stage toy experiment and takes up to half an hour on one core;
set ``TSRNNT_SKIP_TREND=1`` to skip it.
"""

import itertools
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tsrnnt import tensor as tt
from tsrnnt.evaluation import edit_count_table, sir_sweep
from tsrnnt.experiment import ExperimentConfig, run_experiment
from tsrnnt.mixing import measure_sir, random_spec, synthesize, tone_corpus
from tsrnnt.model import TSRNNT, VARIANTS, ModelConfig, SpeakerBias, hadamard_fuse
from tsrnnt.tensor import Tensor
from tsrnnt.toy import ToyConfig, generate_toy_corpus
from tsrnnt.training import StageConfig, TrainState, load_model, run_stage, save_model
from tsrnnt.transducer import Lattice, greedy_decode_stream, iter_greedy_events, rnnt_loss, rnnt_loss_bruteforce

sys.path.insert(0, str(Path(__file__).parent))
from test_tensor import EPS, _op_cases  # noqa: E402

_LINES: list[str] = []


def _emit(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    _LINES.append(line)


def _random_lattice(rng, T, U, V):
    logits = rng.standard_normal((T, U + 1, V)) * 2.0
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    return Lattice(lp, rng.integers(1, V, size=U))


# -- 1 -------------------------------------------------------------------------

def test_criterion_1_loss_oracle():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 5))
        lat = _random_lattice(rng, T, U, V)
        worst = max(worst, abs(float(rnnt_loss(lat).data) - rnnt_loss_bruteforce(lat)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 10
    _emit(1, ok, f"max |dp - exhaustive| = {worst:.2e}, {elapsed:.2f} s")
    assert ok


# -- 2 -------------------------------------------------------------------------

def test_criterion_2_gradients():
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(2)
    for trial in range(3):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        for name, (fn, params) in _op_cases(rng, m, n).items():
            proj = Tensor(rng.standard_normal(fn().shape))
            err = tt.grad_check(lambda: tt.sum(fn() * proj), params, EPS)
            worst[name] = max(worst.get(name, 0.0), err)

    cfg = ModelConfig(variant="robust", feat_dim=4, d_model=4, attention_heads=2, encoder_heads=1, vocab_size=4)
    model = TSRNNT(cfg, seed=3)
    model.params["enr_att.o.w"].data = rng.uniform(-0.5, 0.5, (4, 4))
    q, kv = tt.parameter(rng.standard_normal((3, 4))), tt.parameter(rng.standard_normal((2, 4)))
    proj = Tensor(rng.standard_normal((1, 3, 4)))
    for name, fn in (("text_guided_attention", model.text_guided_attention),
                     ("contextual_bias_attention", model.contextual_bias_attention)):
        prefix = "txt_att." if name.startswith("text") else "enr_att."
        params = [q, kv] + [p for k, p in model.params.items() if k.startswith(prefix)]
        worst[name] = tt.grad_check(lambda: tt.sum(fn(q, kv) * proj), params, EPS)

    for variant in VARIANTS:
        cfg = ModelConfig(variant=variant, feat_dim=3, d_model=4, attention_heads=1, encoder_heads=1,
                          vocab_size=4, causal_context=2)
        m = TSRNNT(cfg, seed=1)
        if variant != "baseline":
            m.params["enr_att.o.w"].data = rng.uniform(-0.5, 0.5, (4, 4))
        enr, mix = rng.standard_normal((2, 3)), rng.standard_normal((3, 3))
        worst[f"end-to-end {variant}"] = tt.grad_check(lambda: m.loss(enr, [1, 3], mix, [2, 1]),
                                                       m.parameters(), EPS)
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-4 and elapsed < 60
    _emit(2, ok, f"{len(worst)} checks, worst {name} = {err:.2e}, {elapsed:.1f} s")
    assert ok


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_streaming():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    models = {}
    for variant in VARIANTS:
        cfg = ModelConfig(variant=variant, feat_dim=6, d_model=8, attention_heads=2, encoder_heads=2,
                          vocab_size=6, causal_context=3)
        m = TSRNNT(cfg, seed=int(rng.integers(1000)))
        if variant != "baseline":
            m.params["enr_att.o.w"].data = rng.uniform(-0.5, 0.5, (8, 8))
        m.params["joint.out.b"].data[0] = -1.0  # keep hypotheses non-trivial
        models[variant] = m
    prefix_ok = decode_ok = True
    emitted = 0
    with tt.no_grad():
        for i in range(100):
            m = models[VARIANTS[i % 3]]
            T = int(rng.integers(1, 13))
            enr, mix = rng.standard_normal((int(rng.integers(1, 6)), 6)), rng.standard_normal((T, 6))
            bias = m.speaker_bias(enr, rng.integers(1, 6, size=2) if m.config.variant == "robust" else None)
            full = m.asr_encode(mix, bias).data[0]
            cut = int(rng.integers(1, T + 1))
            prefix_ok &= np.array_equal(m.asr_encode(mix[:cut], bias).data[0], full[:cut])
            batch = greedy_decode_stream(full, m)
            stream = list(iter_greedy_events(m.encode_stream(mix, bias), m))
            decode_ok &= stream == batch.events()
            emitted += len(stream)
    elapsed = time.perf_counter() - start
    ok = prefix_ok and decode_ok and elapsed < 30
    _emit(3, ok, f"prefix invariance {prefix_ok}, stream == batch {decode_ok}, "
                 f"{emitted} tokens emitted, {elapsed:.1f} s")
    assert ok


# -- 4 -------------------------------------------------------------------------

def test_criterion_4_mixture_fidelity():
    corpus = tone_corpus(seed=4)
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    sir_err = snr_err = gain_err = 0.0
    for i in range(1000):
        spec = random_spec(corpus, rng, overlapping=bool(i % 2))
        mx = synthesize(spec, corpus)
        s = mx.stems
        sir_err = max(sir_err, abs(mx.achieved_sir_db - spec.sir_db))
        snr_err = max(snr_err, abs(mx.achieved_snr_db - spec.snr_db))
        # recompute from stems with one shared interferer gain
        t = np.concatenate([s["target_enrollment"], s["target_command"]])
        itf = np.concatenate([s["interferer_enrollment"], s["interferer_command"]])
        if spec.overlapping_enrollment:
            sir_err = max(sir_err, abs(measure_sir(t, itf) - spec.sir_db))
        noise = np.concatenate([s["noise_enrollment"], s["noise_command"]])
        snr_err = max(snr_err, abs(measure_sir(t + itf, noise) - spec.snr_db))
        recon = (s["target_enrollment"] + s["interferer_enrollment"] + s["noise_enrollment"]) * mx.norm_factor
        gain_err = max(gain_err, float(np.max(np.abs(recon - mx.enrollment_mix.samples))))
    elapsed = time.perf_counter() - start
    ok = sir_err <= 1e-6 and snr_err <= 1e-6 and gain_err <= 1e-12 and elapsed < 60
    _emit(4, ok, f"max SIR error {sir_err:.1e} dB, max SNR error {snr_err:.1e} dB, {elapsed:.1f} s")
    assert ok


# -- 5 -------------------------------------------------------------------------

@pytest.mark.skipif(os.environ.get("TSRNNT_SKIP_TREND") == "1", reason="TSRNNT_SKIP_TREND=1")
def test_criterion_5_table_trend(tmp_path):
    cfg = ExperimentConfig()
    result = run_experiment(cfg, tmp_path, log=None)
    rep = result.report
    w = lambda v, ov, s: rep.wer(v, ov, s)
    a = all(w(v, False, -5.0) > w(v, False, 5.0) for v in cfg.variants)
    b = (w("robust", True, -5.0) < 0.7 * w("baseline", True, -5.0)
         and w("robust", True, -5.0) < 0.7 * w("attentive", True, -5.0))
    gap = lambda v: w(v, True, -5.0) - w(v, False, -5.0)
    c = gap("robust") < 0.25 * gap("baseline")
    minutes = result.seconds / 60
    ok = a and b and c and minutes < 30
    at = {f"{v}/{'on' if ov else 'off'}": round(100 * w(v, ov, -5.0), 1) for v in cfg.variants for ov in (True, False)}
    _emit(5, ok, f"(a) {a}, (b) {b}, (c) {c}, {minutes:.1f} min; WER % at -5 dB {at}")
    print(rep.render())
    assert ok


# -- 6 -------------------------------------------------------------------------

def _exhaustive(seqs):
    d = {}
    for a in seqs:
        for b in seqs:
            if not a or not b:
                d[a, b] = len(a) + len(b)
            else:
                d[a, b] = min(d[a[:-1], b] + 1, d[a, b[:-1]] + 1, d[a[:-1], b[:-1]] + (a[-1] != b[-1]))
    return d


def test_criterion_6_wer_oracle():
    seqs = [s for n in range(7) for s in itertools.product((1, 2, 3), repeat=n)]
    refs = [r for r in seqs for _ in seqs]
    hyps = [h for _ in seqs for h in seqs]
    start = time.perf_counter()
    table = edit_count_table(refs, hyps)
    elapsed = time.perf_counter() - start
    oracle = _exhaustive(seqs)
    expected = np.array([oracle[r, h] for r, h in zip(refs, hyps)])
    agree = bool(np.array_equal(table[:, :3].sum(axis=1), expected))
    ok = agree and elapsed < 10
    _emit(6, ok, f"{len(refs)} pairs, agreement {agree}, {elapsed:.2f} s")
    assert ok


# -- 7 -------------------------------------------------------------------------

def test_criterion_7_persistence(tmp_path):
    toy = ToyConfig(n_speakers=3, feat_dim=8, vocab_tokens=5)
    mc = ModelConfig(variant="robust", feat_dim=8, d_model=8, attention_heads=2, encoder_heads=2,
                     vocab_size=toy.vocab_size, causal_context=4)
    model = TSRNNT(mc, seed=7)
    for p in model.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    save_model(tmp_path / "m.ckpt", model)
    loaded = load_model(tmp_path / "m.ckpt", mc)
    round_trip = all(np.array_equal(loaded.params[k].data, p.data) for k, p in model.params.items())

    samples = generate_toy_corpus(toy, 7, 40)
    stage = StageConfig("main", epochs=2, seed=7, max_batch_seconds=100)
    straight = run_stage(stage, mc, samples, tmp_path / "a", max_steps=10)
    run_stage(stage, mc, samples, tmp_path / "b", max_steps=5)
    state = TrainState.load(tmp_path / "b" / "state.ckpt", mc.hash())
    resumed = run_stage(stage, mc, samples, tmp_path / "b", state=state, max_steps=10)
    resume = all(np.array_equal(p.data, resumed.state.params[k].data) for k, p in straight.state.params.items())

    m = TSRNNT(mc, straight.state.params)
    r1 = sir_sweep({"robust": m}, toy, seed=3, grid=(5.0, 0.0, -5.0), samples_per_cell=5).to_jsonl()
    r2 = sir_sweep({"robust": load_model(tmp_path / "a" / "state.ckpt")}, toy, seed=3, grid=(5.0, 0.0, -5.0),
                   samples_per_cell=5).to_jsonl()
    reports = r1 == r2
    ok = round_trip and resume and reports
    _emit(7, ok, f"round trip {round_trip}, resume 5+5 == 10 {resume}, identical reports {reports}")
    assert ok


# -- 8 -------------------------------------------------------------------------

def test_criterion_8_degenerate_cases():
    rng = np.random.default_rng(8)
    cfg = ModelConfig(variant="robust", feat_dim=4, d_model=8, attention_heads=2, encoder_heads=2, vocab_size=5)
    m = TSRNNT(cfg, seed=8)
    _, w_txt = m.text_guided_attention(rng.standard_normal((5, 8)), rng.standard_normal((1, 8)),
                                       return_weights=True)
    _, w_enr = m.contextual_bias_attention(rng.standard_normal((5, 8)), rng.standard_normal((1, 8)),
                                           return_weights=True)
    single_key = bool(np.all(w_txt.data == 1.0) and np.all(w_enr.data == 1.0))

    z1 = Tensor(rng.standard_normal((1, 6, 8)))
    hadamard = bool(np.array_equal(hadamard_fuse(z1, np.ones(8)).data, z1.data))
    base = TSRNNT(ModelConfig(variant="baseline", feat_dim=4, d_model=8, attention_heads=2, encoder_heads=2,
                              vocab_size=5), seed=8)
    mix = rng.standard_normal((6, 4))
    ones = SpeakerBias("acoustic_only", pooled=Tensor(np.ones((1, 8))))
    hadamard &= bool(np.array_equal(base.asr_encode(mix, ones).data, base.asr_encode(mix, None).data))

    residual = bool(np.array_equal(m.contextual_bias_attention(z1, rng.standard_normal((3, 8))).data, z1.data))

    p = np.array([0.3, 0.7])
    closed = float(rnnt_loss(Lattice(np.log(p)[None, None, :], np.zeros(0, dtype=int))).data) == -math.log(0.3)
    ok = single_key and hadamard and residual and closed
    _emit(8, ok, f"single key {single_key}, all-ones Hadamard {hadamard}, zero projection {residual}, "
                 f"T=1/U=0 closed form {closed}")
    assert ok


if __name__ == "__main__":
    import tempfile

    failures = 0
    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_criterion_")):
        if name.endswith("table_trend") and os.environ.get("TSRNNT_SKIP_TREND") == "1":
            continue
        args = [Path(tempfile.mkdtemp())] if fn.__code__.co_argcount else []
        try:
            fn(*args)
        except AssertionError:
            failures += 1
    print("\n".join(_LINES))
    sys.exit(1 if failures else 0)

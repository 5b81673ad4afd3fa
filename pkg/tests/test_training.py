import json

import numpy as np
import pytest

from tsrnnt import tensor as tt
from tsrnnt.errors import ConfigError, ContractError, DimensionError
from tsrnnt.model import TSRNNT, VARIANTS, ModelConfig, init_params
from tsrnnt.toy import ToyConfig, generate_toy_corpus
from tsrnnt.training import (
    DONOR_OFFLINE,
    DONOR_STREAMING,
    FRESH,
    StageConfig,
    TrainState,
    adam_step,
    batch_loss,
    load_model,
    make_batches,
    run_stage,
    train_step,
    warm_start,
)

TOY = ToyConfig(n_speakers=4, feat_dim=8, vocab_tokens=6)


def cfg(variant="robust", **kw):
    base = dict(variant=variant, feat_dim=8, d_model=8, attention_heads=2, encoder_heads=2,
                vocab_size=TOY.vocab_size, causal_context=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return generate_toy_corpus(TOY, 0, 40)


# -- Adam ------------------------------------------------------------------------

def _state(values):
    return TrainState.fresh({"w": tt.parameter(np.array(values, dtype=float))})


def test_adam_first_step_is_minus_lr_sign():
    st = _state([0.0])
    adam_step(st, {"w": np.array([1.0])}, lr=0.1)
    assert st.params["w"].data[0] == pytest.approx(-0.1, abs=1e-8)
    assert st.step == 1


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    st = _state([1.0, -2.0])
    adam_step(st, {"w": np.array([0.5, 0.5])}, lr=0.1)
    before = st.params["w"].data.copy()
    m = st.m["w"].copy()
    # with m != 0 a zero gradient still moves params, so reset the first moment
    st.m["w"][:] = 0.0
    adam_step(st, {"w": np.zeros(2)}, lr=0.1)
    assert np.array_equal(st.params["w"].data, before)
    assert np.all(st.m["w"] == 0.0)
    assert np.all(st.v["w"] < (1 - 0.98) * 0.25 + 1e-18)
    assert not np.array_equal(m, st.m["w"])


def test_adam_nan_skips():
    st = _state([1.0])
    adam_step(st, {"w": np.array([np.nan])}, lr=0.1)
    assert st.params["w"].data.tolist() == [1.0] and st.skip_count == 1 and st.step == 0


def test_adam_clips_global_norm():
    a, b = _state([0.0]), _state([0.0])
    norm = adam_step(a, {"w": np.array([50.0])}, lr=0.1)
    assert norm == 50.0
    # after clipping to norm 5 the first step is still -lr * sign
    adam_step(b, {"w": np.array([5.0])}, lr=0.1)
    assert a.params["w"].data == pytest.approx(b.params["w"].data, abs=1e-15)
    with pytest.raises(DimensionError):
        adam_step(a, {"w": np.zeros(3)}, lr=0.1)


# -- warm start -------------------------------------------------------------------------

def _donors(seed=1):
    streaming = {k: v.data for k, v in init_params(cfg("baseline"), seed).items()}
    offline = {k: v.data for k, v in init_params(cfg("baseline", streaming=False), seed + 1).items()}
    return {"streaming": streaming, "offline": offline}


@pytest.mark.parametrize("variant", VARIANTS)
def test_warm_start_copies_and_reports(variant):
    donors = _donors()
    params, report = warm_start(cfg(variant), donors, seed=7)
    assert set(report) == set(params) == set(init_params(cfg(variant)))
    assert set(report.values()) <= {DONOR_STREAMING, DONOR_OFFLINE, FRESH}
    for name, source in report.items():
        if name.startswith("enr_enc."):
            assert source == DONOR_OFFLINE and np.array_equal(params[name].data, donors["offline"][name])
        elif name.startswith("txt_dec."):
            assert np.array_equal(params[name].data, donors["offline"]["pred." + name[8:]])
        elif name.startswith(("asr_enc.", "pred.", "joint.", "fusion.")):
            assert source == DONOR_STREAMING and np.array_equal(params[name].data, donors["streaming"][name])
        else:
            assert source == FRESH
    if variant != "baseline":
        assert report["enr_att.o.w"] == FRESH and np.all(params["enr_att.o.w"].data == 0)


def test_warm_start_errors():
    donors = _donors()
    del donors["streaming"]["joint.out.w"]
    with pytest.raises(ContractError, match="joint.out.w"):
        warm_start(cfg("attentive"), donors)
    with pytest.raises(ContractError):
        warm_start(cfg("attentive"), {"streaming": _donors()["streaming"]})
    bad = _donors()
    bad["offline"]["enr_enc.in.w"] = np.zeros((3, 3))
    with pytest.raises(DimensionError, match="enr_enc.in.w"):
        warm_start(cfg("attentive"), bad)


# -- batching and stage runs ---------------------------------------------------------------

def test_batches_are_uniform_and_within_budget(samples):
    batches = make_batches(samples, 120, np.random.default_rng(0))
    assert sorted(s.sample_id for b in batches for s in b) == sorted(s.sample_id for s in samples)
    for b in batches:
        assert len({s.shape_key() for s in b}) == 1
        assert len(b) == 1 or sum(s.num_frames() for s in b) <= 120


@pytest.mark.parametrize("variant", VARIANTS)
def test_overfit_single_batch(variant, samples):
    model = TSRNNT(cfg(variant), seed=0)
    state = TrainState.fresh(model.params)
    batch = make_batches(samples, 200, np.random.default_rng(1))[0]
    losses = [train_step(model, state, batch, 0.01)[0] for _ in range(6)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_stage_config_defaults_and_errors():
    s = StageConfig("finetune")
    assert (s.learning_rate, s.frame_budget, s.epochs) == (0.005, 1200, 40)
    assert StageConfig("main").epochs == 30
    with pytest.raises(ConfigError):
        StageConfig("warmup")
    with pytest.raises(ConfigError):
        StageConfig("main", learning_rate=0.0)


def test_one_epoch_writes_outputs(tmp_path, samples):
    res = run_stage(StageConfig("main", epochs=1), cfg(), samples[:10], tmp_path)
    assert len(res.epoch_losses) == 1
    assert res.checkpoint.exists() and res.best_checkpoint.exists() and (tmp_path / "state.ckpt").exists()
    recs = [json.loads(line) for line in res.metrics.read_text().splitlines()]
    steps = [r for r in recs if "step" in r]
    assert steps and set(steps[0]) == {"epoch", "step", "loss", "lr", "grad_norm", "skip_count"}
    assert load_model(res.checkpoint, cfg()).config == cfg()
    with pytest.raises(ConfigError):
        run_stage(StageConfig("main", epochs=1), cfg(), [], tmp_path / "empty")


def test_same_seed_same_checkpoint(tmp_path, samples):
    a = run_stage(StageConfig("main", epochs=2, seed=3), cfg(), samples, tmp_path / "a")
    b = run_stage(StageConfig("main", epochs=2, seed=3), cfg(), samples, tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert (tmp_path / "a" / "state.ckpt").read_bytes() == (tmp_path / "b" / "state.ckpt").read_bytes()


def test_resume_is_bit_exact(tmp_path, samples):
    stage = StageConfig("main", epochs=3, seed=5, max_batch_seconds=100)
    straight = run_stage(stage, cfg(), samples, tmp_path / "straight", max_steps=10)
    first = run_stage(stage, cfg(), samples, tmp_path / "resumed", max_steps=5)
    assert first.state.step == 5
    state = TrainState.load(tmp_path / "resumed" / "state.ckpt", cfg().hash())
    resumed = run_stage(stage, cfg(), samples, tmp_path / "resumed", state=state, max_steps=10)
    assert resumed.state.step == straight.state.step == 10
    for k, p in straight.state.params.items():
        assert np.array_equal(p.data, resumed.state.params[k].data), k
        assert np.array_equal(straight.state.m[k], resumed.state.m[k])
        assert np.array_equal(straight.state.v[k], resumed.state.v[k])


def test_resume_across_epoch_boundary(tmp_path, samples):
    stage = StageConfig("main", epochs=2, seed=6, max_batch_seconds=300)
    straight = run_stage(stage, cfg(), samples, tmp_path / "s")
    n = straight.state.step
    run_stage(stage, cfg(), samples, tmp_path / "r", max_steps=n // 2 + 1)
    state = TrainState.load(tmp_path / "r" / "state.ckpt")
    resumed = run_stage(stage, cfg(), samples, tmp_path / "r", state=state)
    assert resumed.state.step == n and resumed.state.loss_history == straight.state.loss_history
    assert all(np.array_equal(p.data, resumed.state.params[k].data) for k, p in straight.state.params.items())


def test_toy_main_stage_converges(tmp_path):
    data = generate_toy_corpus(TOY, 1, 150, overlapping=False, sir_db=5.0)
    res = run_stage(StageConfig("main"), cfg("baseline"), data, tmp_path)
    assert len(res.epoch_losses) == 30
    assert res.epoch_losses[-1] < 0.5 * res.epoch_losses[0]


def test_batch_loss_is_per_token_mean(samples):
    model = TSRNNT(cfg(), seed=0)
    batch = make_batches(samples, 200, np.random.default_rng(1))[0]
    with tt.no_grad():
        per = [float(batch_loss(model, [s]).data) for s in batch]
        assert float(batch_loss(model, batch).data) == pytest.approx(np.mean(per), rel=1e-12)

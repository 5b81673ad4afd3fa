"""Adam, warm starts and the staged training loop.

A stage trains one model on one manifest for a fixed number of epochs. Batches
group samples with identical shapes (command frames, enrollment frames, wake
length, transcript length) so each batch is a single dense forward pass; a
batch is closed once its frame count would exceed the stage's frame budget.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tt
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DimensionError, IntegrityError
from .model import TSRNNT, ModelConfig, init_params
from .toy import ToySample, validation_split

STAGES = ("pretrain", "main", "finetune")
BETA1, BETA2, ADAM_EPS = 0.9, 0.98, 1e-9
CLIP_NORM = 5.0

# full-scale stage settings; toy mode keeps the ratios and shrinks the epochs
STAGE_DEFAULTS = {
    "pretrain": {"learning_rate": 0.01, "max_batch_seconds": 900.0, "epochs": 150},
    "main": {"learning_rate": 0.01, "max_batch_seconds": 900.0, "epochs": 150},
    "finetune": {"learning_rate": 0.005, "max_batch_seconds": 1200.0, "epochs": 200},
}
TOY_EPOCH_SCALE = 0.2


@dataclass
class StageConfig:
    stage: str = "main"
    learning_rate: float | None = None
    max_batch_seconds: float | None = None
    epochs: int | None = None
    manifest: str | None = None
    init: str = "random"  # "random" or a checkpoint path
    seed: int = 0
    toy: bool = True
    frame_shift: float = 0.010
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        d = STAGE_DEFAULTS[self.stage]
        if self.learning_rate is None:
            self.learning_rate = d["learning_rate"]
        if self.max_batch_seconds is None:
            self.max_batch_seconds = d["max_batch_seconds"]
        if self.epochs is None:
            self.epochs = max(1, round(d["epochs"] * (TOY_EPOCH_SCALE if self.toy else 1.0)))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.max_batch_seconds > 0:
            raise ConfigError("max_batch_seconds must be positive")

    @property
    def frame_budget(self) -> int:
        """Batch size limit in frames.

        In toy mode the configured seconds are read directly as a frame count,
        which keeps the 900 : 1200 ratio between stages.
        """
        if self.toy:
            return int(self.max_batch_seconds)
        return int(self.max_batch_seconds / self.frame_shift)


@dataclass
class TrainState:
    params: dict[str, tt.Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    skip_count: int = 0
    rng_state: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)
    best_valid: float = math.inf
    epoch_step: int = 0  # batches already taken in the current epoch
    epoch_losses: list[float] = field(default_factory=list)  # their losses

    @classmethod
    def fresh(cls, params: Mapping[str, tt.Tensor], seed: int = 0) -> "TrainState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        rng = np.random.default_rng(seed)
        return cls(dict(params), m, v, rng_state=rng.bit_generator.state)

    # -- persistence -----------------------------------------------------
    def save(self, path, cfg_hash: str, config: Mapping | None = None) -> Path:
        arrays = {}
        for k, p in self.params.items():
            arrays[f"param/{k}"] = p.data
            arrays[f"adam_m/{k}"] = self.m[k]
            arrays[f"adam_v/{k}"] = self.v[k]
        meta = {"kind": "train_state", "step": self.step, "epoch": self.epoch, "skip_count": self.skip_count,
                "rng_state": _jsonable_rng(self.rng_state), "loss_history": self.loss_history,
                "best_valid": None if math.isinf(self.best_valid) else self.best_valid,
                "epoch_step": self.epoch_step, "epoch_losses": self.epoch_losses}
        return save_checkpoint(path, arrays, cfg_hash, config=config, meta=meta, dtype="float64")

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "TrainState":
        arrays, header = load_checkpoint(path, expected_hash)
        meta = header["meta"]
        if meta.get("kind") != "train_state":
            raise ContractError(f"{path} holds model weights, not a resumable training state")
        names = [k[len("param/"):] for k in arrays if k.startswith("param/")]
        params = {k: tt.parameter(arrays[f"param/{k}"].copy(), name=k) for k in names}
        best = meta.get("best_valid")
        return cls(params, {k: arrays[f"adam_m/{k}"].copy() for k in names},
                   {k: arrays[f"adam_v/{k}"].copy() for k in names}, meta["step"], meta["epoch"],
                   meta["skip_count"], meta["rng_state"], list(meta["loss_history"]),
                   math.inf if best is None else best, meta["epoch_step"], list(meta["epoch_losses"]))


def _jsonable_rng(state: dict) -> dict:
    return json.loads(json.dumps(state))


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, tt.Tensor) else np.asarray(x)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def adam_step(state: TrainState, grads: Mapping[str, np.ndarray | None], lr: float,
              clip_norm: float | None = CLIP_NORM) -> float:
    """One bias-corrected Adam update in place; returns the pre-clip gradient norm.

    Missing gradients count as zero. Non-finite gradients leave every
    parameter and moment untouched and bump ``state.skip_count``.
    """
    g = {k: (np.zeros_like(p.data) if grads.get(k) is None else np.asarray(grads[k]))
         for k, p in state.params.items()}
    for k, gk in g.items():
        if gk.shape != state.params[k].shape:
            raise DimensionError(f"gradient for {k} has shape {gk.shape}, parameter has {state.params[k].shape}")
    norm = global_norm(g)
    if not math.isfinite(norm):
        state.skip_count += 1
        return norm
    factor = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for k, p in state.params.items():
        gk = g[k] * factor
        m, v = state.m[k], state.v[k]
        m *= BETA1
        m += (1.0 - BETA1) * gk
        v *= BETA2
        v += (1.0 - BETA2) * gk * gk
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return norm


# -- warm start ------------------------------------------------------------

DONOR_STREAMING = "donor-streaming"
DONOR_OFFLINE = "donor-offline"
FRESH = "fresh"


def warm_start_source(name: str) -> tuple[str, str | None]:
    """Where a target parameter comes from: ``(provenance, donor parameter name)``."""
    if name.startswith(("asr_enc.", "pred.", "joint.", "fusion.")):
        return DONOR_STREAMING, name
    if name.startswith("enr_enc."):
        return DONOR_OFFLINE, name
    if name.startswith("txt_dec."):
        # the text decoder copies the offline donor's prediction network
        return DONOR_OFFLINE, "pred." + name[len("txt_dec."):]
    return FRESH, None


def warm_start(target_config: ModelConfig, donors: Mapping[str, Mapping[str, np.ndarray]],
               seed: int = 0) -> tuple[dict[str, tt.Tensor], dict[str, str]]:
    """Merge donor weights into a freshly initialised target model.

    ``donors`` maps ``"streaming"`` and ``"offline"`` to parameter dicts.
    Returns the parameters and a report tagging each one with its provenance.
    """
    fresh = init_params(target_config, seed)
    table = {DONOR_STREAMING: donors.get("streaming"), DONOR_OFFLINE: donors.get("offline")}
    params, report = {}, {}
    for name in sorted(fresh):
        provenance, src = warm_start_source(name)
        if provenance == FRESH:
            params[name], report[name] = fresh[name], FRESH
            continue
        donor = table[provenance]
        if donor is None:
            raise ContractError(f"{name} needs the {provenance} checkpoint, which was not supplied")
        if src not in donor:
            raise ContractError(f"{provenance} checkpoint has no parameter {src!r} (needed for {name})")
        arr = _array(donor[src])
        if arr.shape != fresh[name].shape:
            raise DimensionError(f"{name}: donor {src} has shape {arr.shape}, target expects {fresh[name].shape}")
        params[name] = tt.parameter(arr.astype(np.float64, copy=True), name=name)
        report[name] = provenance
    return params, report


# -- batching ------------------------------------------------------------------

def make_batches(samples: Sequence[ToySample], frame_budget: int, rng: np.random.Generator) -> list[list[ToySample]]:
    """Bucket by exact shape, shuffle within buckets, cap each batch at ``frame_budget`` frames."""
    buckets: dict[tuple, list[ToySample]] = {}
    for s in samples:
        buckets.setdefault(s.shape_key(), []).append(s)
    batches = []
    for key in sorted(buckets):
        group = buckets[key]
        order = rng.permutation(len(group))
        per = max(1, frame_budget // group[0].num_frames())
        for i in range(0, len(group), per):
            batches.append([group[j] for j in order[i:i + per]])
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_arrays(batch: Sequence[ToySample]):
    enroll = np.stack([s.enrollment for s in batch])
    wake = np.array([s.wake for s in batch], dtype=np.int64)
    mix = np.stack([s.command for s in batch])
    targets = np.array([s.transcript for s in batch], dtype=np.int64)
    return enroll, wake, mix, targets


def batch_loss(model: TSRNNT, batch: Sequence[ToySample]) -> tt.Tensor:
    """Mean per-token transducer loss of one equal-shape batch."""
    enroll, wake, mix, targets = batch_arrays(batch)
    total = model.loss(enroll, wake, mix, targets, reduction="sum")
    return tt.scale(total, 1.0 / (len(batch) * max(1, targets.shape[1])))


def train_step(model: TSRNNT, state: TrainState, batch: Sequence[ToySample], lr: float) -> tuple[float, float]:
    tt.zero_grad(state.params.values())
    with tt.Tape() as tape:
        loss = batch_loss(model, batch)
        tape.backward(loss)
    grads = {k: p.grad for k, p in state.params.items()}
    norm = adam_step(state, grads, lr)
    tt.zero_grad(state.params.values())
    tape.reset()
    return float(loss.data), norm


def evaluate_loss(model: TSRNNT, samples: Sequence[ToySample], frame_budget: int) -> float:
    """Mean per-token loss over ``samples`` in a fixed order."""
    if not samples:
        return math.nan
    total = tokens = 0.0
    with tt.no_grad():
        for batch in make_batches(samples, frame_budget, np.random.default_rng(0)):
            n = len(batch) * max(1, len(batch[0].transcript))
            total += float(batch_loss(model, batch).data) * n
            tokens += n
    return total / tokens


@dataclass
class StageResult:
    checkpoint: Path
    best_checkpoint: Path
    metrics: Path
    epoch_losses: list[float]
    valid_losses: list[float]
    state: TrainState = field(repr=False)


def run_stage(stage: StageConfig, model_config: ModelConfig, samples: Sequence[ToySample], out_dir,
              *, params: Mapping[str, tt.Tensor] | None = None, state: TrainState | None = None,
              max_steps: int | None = None, log: Callable[[str], None] | None = None,
              warm_start_report: Mapping[str, str] | None = None) -> StageResult:
    """Train for ``stage.epochs`` epochs and write checkpoints plus a metrics log.

    Writes ``final.ckpt`` (float32 weights), ``best.ckpt`` (lowest validation
    loss), ``state.ckpt`` (float64 resumable state) and ``metrics.jsonl``.
    ``max_steps`` stops early, mid-epoch if need be, which is how resume
    equivalence is exercised.
    """
    if not samples:
        raise ConfigError("training manifest is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, valid = validation_split(samples, stage.seed, stage.validation_fraction)
    if not train:
        train, valid = list(samples), []

    if state is None:
        if params is None:
            params = init_params(model_config, stage.seed)
        state = TrainState.fresh(params, stage.seed)
    model = TSRNNT(model_config, state.params)
    cfg = model_config.to_dict()
    cfg_hash = model_config.hash()
    metrics = out / "metrics.jsonl"
    mode = "a" if state.step else "w"
    epoch_losses: list[float] = []
    valid_losses: list[float] = []

    with open(metrics, mode, encoding="utf-8") as mf:
        if warm_start_report and not state.step:
            mf.write(json.dumps({"warm_start": dict(warm_start_report)}) + "\n")
        while state.epoch < stage.epochs:
            # rng_state is the generator state at the start of the current epoch, so a
            # resumed run rebuilds the same batch order and skips the batches it has done
            epoch_rng = np.random.default_rng()
            epoch_rng.bit_generator.state = state.rng_state
            batches = make_batches(train, stage.frame_budget, epoch_rng)
            t0 = time.perf_counter()
            for batch in batches[state.epoch_step:]:
                if max_steps is not None and state.step >= max_steps:
                    break
                loss, norm = train_step(model, state, batch, stage.learning_rate)
                state.epoch_step += 1
                state.epoch_losses.append(loss)
                mf.write(json.dumps({"epoch": state.epoch, "step": state.step, "loss": loss,
                                     "lr": stage.learning_rate, "grad_norm": norm,
                                     "skip_count": state.skip_count}) + "\n")
            if state.epoch_step < len(batches):
                break
            mean = float(np.mean(state.epoch_losses))
            state.epoch += 1
            state.epoch_step = 0
            state.epoch_losses = []
            state.rng_state = epoch_rng.bit_generator.state
            state.loss_history.append(mean)
            epoch_losses.append(mean)
            vl = evaluate_loss(model, valid, stage.frame_budget) if valid else mean
            valid_losses.append(vl)
            mf.write(json.dumps({"epoch": state.epoch - 1, "epoch_loss": mean, "valid_loss": vl,
                                 "seconds": round(time.perf_counter() - t0, 3)}) + "\n")
            if log:
                log(f"[{stage.stage}] epoch {state.epoch}/{stage.epochs} loss {mean:.4f} valid {vl:.4f}")
            if vl < state.best_valid:
                state.best_valid = vl
                save_model(out / "best.ckpt", model, meta={"stage": stage.stage, "epoch": state.epoch})
    final = save_model(out / "final.ckpt", model, meta={"stage": stage.stage, "epoch": state.epoch})
    state.save(out / "state.ckpt", cfg_hash, cfg)
    best = out / "best.ckpt"
    if not best.exists():
        save_model(best, model, meta={"stage": stage.stage, "epoch": state.epoch})
    return StageResult(final, best, metrics, epoch_losses, valid_losses, state)


def save_model(path, model: TSRNNT, meta: Mapping | None = None, dtype: str = "float32") -> Path:
    return save_checkpoint(path, model.state_arrays(), model.config_hash(),
                           config=model.config.to_dict(), meta=dict(meta or {}), dtype=dtype)


def load_model(path, expected_config: ModelConfig | None = None) -> TSRNNT:
    """Rebuild a model from a weight checkpoint, verifying its config hash."""
    expected = expected_config.hash() if expected_config is not None else None
    arrays, header = load_checkpoint(path, expected)
    if header.get("config") is None:
        raise ContractError(f"{path} does not embed a model config")
    config = ModelConfig.from_dict(header["config"])
    if config.hash() != header["config_hash"]:
        raise IntegrityError(f"{path}: embedded config does not match its hash")
    if header["meta"].get("kind") == "train_state":
        arrays = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    params = {k: tt.parameter(v.astype(np.float64), name=k) for k, v in arrays.items()}
    return TSRNNT(config, params)

"""The staged toy experiment end to end.

1. Two donor models (baseline architecture, one causal, one offline) are
   trained on clean-enrollment data.
2. Each variant is assembled from the donors with :func:`warm_start`.
3. ``main`` trains it on clean-enrollment mixtures, ``finetune`` continues on
   mixtures whose enrollment also contains the interferer.
4. Every variant is scored on the same SIR grid in both conditions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .evaluation import DEFAULT_GRID, EvalReport, sir_sweep
from .model import VARIANTS, TSRNNT, ModelConfig
from .toy import ToyConfig, generate_toy_corpus
from .training import StageConfig, run_stage, warm_start


@dataclass
class ExperimentConfig:
    toy: ToyConfig = field(default_factory=ToyConfig)
    d_model: int = 64
    attention_heads: int = 4
    attention_dim: int | None = None
    encoder_heads: int = 4
    encoder_layers: int = 2
    causal_context: int = 8
    train_samples: int = 6000
    epochs: dict = field(default_factory=lambda: {"pretrain": 6, "main": 4, "finetune": 4})
    batch_frames: dict = field(default_factory=lambda: {"pretrain": 900, "main": 900, "finetune": 1200})
    # the 2:1 ratio between main and finetune rates is kept; the base rate is
    # lower than the full-scale default because 0.01 stalls on the toy plateau
    learning_rate: dict = field(default_factory=lambda: {"pretrain": 0.003, "main": 0.003, "finetune": 0.0015})
    variants: tuple = VARIANTS
    seed: int = 0
    eval_seed: int = 777
    samples_per_cell: int = 60
    grid: tuple = DEFAULT_GRID

    def model_config(self, variant: str, streaming: bool = True) -> ModelConfig:
        return ModelConfig(variant=variant, feat_dim=self.toy.feat_dim, d_model=self.d_model,
                           attention_heads=self.attention_heads, attention_dim=self.attention_dim,
                           encoder_layers=self.encoder_layers, encoder_heads=self.encoder_heads,
                           vocab_size=self.toy.vocab_size, causal_context=self.causal_context,
                           streaming=streaming)

    def stage(self, name: str, seed: int) -> StageConfig:
        return StageConfig(stage=name, learning_rate=self.learning_rate[name],
                           max_batch_seconds=self.batch_frames[name], epochs=self.epochs[name], seed=seed)


@dataclass
class ExperimentResult:
    report: EvalReport
    models: dict[str, TSRNNT]
    stage_losses: dict[str, list[float]]
    seconds: float


def run_experiment(cfg: ExperimentConfig, out_dir, log: Callable[[str], None] | None = print) -> ExperimentResult:
    out = Path(out_dir)
    t0 = time.perf_counter()
    clean = generate_toy_corpus(cfg.toy, cfg.seed, cfg.train_samples, overlapping=False, prefix="clean")
    overlapped = generate_toy_corpus(cfg.toy, cfg.seed + 1, cfg.train_samples, overlapping=True, prefix="overlap")
    losses: dict[str, list[float]] = {}

    donors = {}
    for role, streaming in (("streaming", True), ("offline", False)):
        res = run_stage(cfg.stage("pretrain", cfg.seed + 10 + streaming), cfg.model_config("baseline", streaming),
                        clean, out / f"donor-{role}", log=log)
        donors[role] = res.state.params
        losses[f"donor-{role}"] = res.epoch_losses

    models = {}
    for k, variant in enumerate(cfg.variants):
        mc = cfg.model_config(variant)
        params, report = warm_start(mc, donors, seed=cfg.seed + 100 + k)
        main = run_stage(cfg.stage("main", cfg.seed + 200 + k), mc, clean, out / variant / "main",
                         params=params, log=log, warm_start_report=report)
        fine = run_stage(cfg.stage("finetune", cfg.seed + 300 + k), mc, overlapped, out / variant / "finetune",
                         params=main.state.params, log=log)
        losses[f"{variant}-main"] = main.epoch_losses
        losses[f"{variant}-finetune"] = fine.epoch_losses
        models[variant] = TSRNNT(mc, fine.state.params)

    report = sir_sweep(models, cfg.toy, seed=cfg.eval_seed, grid=cfg.grid,
                       samples_per_cell=cfg.samples_per_cell)
    report.write(out / "report.txt")
    (out / "losses.json").write_text(json.dumps(losses, indent=1), encoding="utf-8")
    if log:
        log(report.render())
    return ExperimentResult(report, models, losses, time.perf_counter() - t0)

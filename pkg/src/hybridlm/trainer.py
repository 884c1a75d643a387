"""Training loop: task streams, schedule, checkpoints, resumable state.

Streams are pure functions of (config, seed, step), so a resumed run sees
exactly the token batches the uninterrupted run would have seen; combined
with saved optimizer moments this makes resume == uninterrupted, which the
tests assert on loss traces.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .configfile import dataclass_from_dict, dataclass_to_dict, parse_sections, render_sections
from .model import HybridModelConfig, ModelParams, build_model, forward_train
from .optim import OptimizerState, adamw_step, lr_schedule
from .tasks import gen_phonebook
from .tensor import Tape, Tensor, cross_entropy
from .tokenizer import EOS_ID, encode

__all__ = [
    "TrainerConfig",
    "TaskStreamConfig",
    "TrainingDiverged",
    "TrainResult",
    "make_stream",
    "PhonebookStream",
    "CopyStream",
    "TextStream",
    "train",
    "load_experiment",
    "save_training_state",
    "load_training_state",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    """Optimization defaults follow the published recipe; desk_scale shrinks
    the sample counts and raises the rates by one shared factor."""

    batch_size: int = 256
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_samples: float = 122_000.0
    total_samples: float = 268_554_688.0  # 1.1T tokens at sequence length 4096
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    precision: str = "float64"
    max_steps: int = 0  # 0 = run total_samples / batch_size steps
    log_every: int = 10
    checkpoint_every: int = 0  # additionally to the final checkpoint; 0 = final only

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def desk_scale(self, factor: float) -> "TrainerConfig":
        if factor <= 0:
            raise ValueError("factor must be positive")
        return replace(
            self,
            batch_size=max(1, round(self.batch_size / factor)),
            warmup_samples=self.warmup_samples / factor,
            total_samples=self.total_samples / factor,
            peak_lr=self.peak_lr * factor,
            min_lr=self.min_lr * factor,
        )

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def steps(self) -> int:
        if self.max_steps > 0:
            return self.max_steps
        return max(1, int(self.total_samples // self.batch_size))

    def lr_at(self, step: int) -> float:
        return lr_schedule(step * self.batch_size, self.warmup_samples,
                           self.total_samples, self.peak_lr, self.min_lr)


@dataclass(frozen=True)
class TaskStreamConfig:
    kind: str = "phonebook-standard"
    min_entries: int = 3
    max_entries: int = 12
    mask_prompt: bool = True
    copy_len: int = 16
    text_path: str = ""
    text_window: int = 128


IGNORE = -1


def _pad_batch(rows: list[np.ndarray], masks: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length token rows; targets before each row's mask
    boundary and in the padding are ignored by the loss."""
    width = max(len(r) for r in rows)
    inputs = np.full((len(rows), width - 1), EOS_ID, dtype=np.int64)
    targets = np.full((len(rows), width - 1), IGNORE, dtype=np.int64)
    for i, (row, keep_from) in enumerate(zip(rows, masks)):
        n = len(row)
        inputs[i, :n - 1] = row[:-1]
        targets[i, :n - 1] = row[1:]
        if keep_from > 0:
            targets[i, :keep_from - 1] = IGNORE
    return inputs, targets


def _row_seed(seed: int, step: int, row: int) -> list[int]:
    return [seed, step, row]


class PhonebookStream:
    """Endless phonebook lookups; each row is prompt + answer + end marker."""

    def __init__(self, config: TaskStreamConfig, batch_size: int, seed: int):
        if config.min_entries < 3 or config.max_entries < config.min_entries:
            raise ValueError("need 3 <= min_entries <= max_entries")
        self.config = config
        self.batch_size = batch_size
        self.seed = seed
        self.variant = config.kind.split("-", 1)[1]

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rows, masks = [], []
        for r in range(self.batch_size):
            rng = np.random.default_rng(_row_seed(self.seed, step, r))
            n = int(rng.integers(self.config.min_entries, self.config.max_entries + 1))
            sample = gen_phonebook(n, int(rng.integers(0, 2**31)), self.variant)
            prompt_ids = encode(sample.prompt)
            full = np.concatenate([prompt_ids, encode(" " + sample.answer),
                                   np.array([EOS_ID], dtype=np.int64)])
            rows.append(full)
            masks.append(len(prompt_ids) if self.config.mask_prompt else 0)
        return _pad_batch(rows, masks)


class CopyStream:
    """payload=payload rows; loss on the echoed half."""

    LETTERS = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)

    def __init__(self, config: TaskStreamConfig, batch_size: int, seed: int):
        if config.copy_len < 1:
            raise ValueError("copy_len must be >= 1")
        self.config = config
        self.batch_size = batch_size
        self.seed = seed

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rows, masks = [], []
        for r in range(self.batch_size):
            rng = np.random.default_rng(_row_seed(self.seed, step, r))
            payload = self.LETTERS[rng.integers(0, 26, size=self.config.copy_len)]
            text = payload.tobytes().decode() + "=" + payload.tobytes().decode()
            full = np.concatenate([encode(text), np.array([EOS_ID], dtype=np.int64)])
            rows.append(full)
            masks.append(self.config.copy_len + 1 if self.config.mask_prompt else 0)
        return _pad_batch(rows, masks)


class TextStream:
    """Random fixed-width windows over a byte corpus; plain LM loss."""

    def __init__(self, config: TaskStreamConfig, batch_size: int, seed: int):
        data = Path(config.text_path).read_bytes()
        if len(data) < config.text_window + 1:
            raise ValueError(f"corpus too small for window {config.text_window}")
        self.data = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        self.window = config.text_window
        self.batch_size = batch_size
        self.seed = seed

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rows = []
        for r in range(self.batch_size):
            rng = np.random.default_rng(_row_seed(self.seed, step, r))
            start = int(rng.integers(0, len(self.data) - self.window))
            rows.append(self.data[start:start + self.window + 1])
        return _pad_batch(rows, [0] * len(rows))


def make_stream(config: TaskStreamConfig, batch_size: int, seed: int):
    if config.kind in ("phonebook-standard", "phonebook-reversed"):
        return PhonebookStream(config, batch_size, seed)
    if config.kind == "copy":
        return CopyStream(config, batch_size, seed)
    if config.kind == "text":
        return TextStream(config, batch_size, seed)
    raise ValueError(f"unknown stream kind {config.kind!r}")


@dataclass
class TrainResult:
    steps: int
    losses: list
    final_loss: float
    checkpoint_path: str
    curve_path: str
    manifest_path: str


def _experiment_text(model_config: HybridModelConfig, trainer: TrainerConfig,
                     task: TaskStreamConfig) -> str:
    return render_sections({
        "model": dataclass_to_dict(model_config),
        "trainer": dataclass_to_dict(trainer),
        "task": dataclass_to_dict(task),
    })


def load_experiment(text: str):
    """Parse a full experiment config; returns (model, trainer, task)."""
    sections = parse_sections(text)
    for name in ("model", "trainer", "task"):
        if name not in sections:
            raise ValueError(f"config is missing the [{name}] section")
    return (dataclass_from_dict(HybridModelConfig, sections["model"]),
            dataclass_from_dict(TrainerConfig, sections["trainer"]),
            dataclass_from_dict(TaskStreamConfig, sections["task"]))


def save_training_state(path, model_config: HybridModelConfig, trainer: TrainerConfig,
                        task: TaskStreamConfig, params: ModelParams,
                        opt: OptimizerState, step: int) -> None:
    arrays = {name: t.data for name, t in params.named_tensors().items()}
    for name, m in opt.m.items():
        arrays[f"opt.m.{name}"] = m
    for name, v in opt.v.items():
        arrays[f"opt.v.{name}"] = v
    save_checkpoint(path, arrays,
                    config_text=_experiment_text(model_config, trainer, task),
                    meta={"step": str(step), "opt_t": str(opt.t)})


def load_training_state(path):
    """Returns (model_config, trainer, task, params, opt, step)."""
    data = load_checkpoint(path)
    model_config, trainer, task = load_experiment(data.config_text)
    params = build_model(model_config, seed=trainer.seed, dtype=trainer.dtype)
    named = params.named_tensors()
    opt = OptimizerState.init(named, beta1=trainer.beta1, beta2=trainer.beta2,
                              weight_decay=trainer.weight_decay)
    for name, t in named.items():
        t.data = data.arrays[name].astype(trainer.dtype, copy=False)
        opt.m[name] = data.arrays[f"opt.m.{name}"].astype(trainer.dtype, copy=False)
        opt.v[name] = data.arrays[f"opt.v.{name}"].astype(trainer.dtype, copy=False)
    opt.t = int(data.meta["opt_t"])
    return model_config, trainer, task, params, opt, int(data.meta["step"])


def train(model_config: HybridModelConfig, trainer: TrainerConfig,
          task: TaskStreamConfig, out_dir, resume_from=None,
          progress=None) -> TrainResult:
    """Run (or continue) a training job; writes checkpoint, loss CSV, manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    if resume_from is not None:
        saved_model, saved_trainer, saved_task, params, opt, start_step = \
            load_training_state(resume_from)
        if saved_model != model_config:
            raise ValueError("checkpoint model config does not match this experiment")
        trainer, task = saved_trainer, saved_task
    else:
        params = build_model(model_config, seed=trainer.seed, dtype=trainer.dtype)
        opt = OptimizerState.init(params.named_tensors(), beta1=trainer.beta1,
                                  beta2=trainer.beta2,
                                  weight_decay=trainer.weight_decay)
        start_step = 0

    stream = make_stream(task, trainer.batch_size, trainer.seed)
    total_steps = trainer.steps()
    ckpt_path = out / "checkpoint.bin"
    curve_path = out / "loss.csv"
    losses = []
    mode = "a" if resume_from is not None and curve_path.exists() else "w"
    with open(curve_path, mode) as curve:
        if mode == "w":
            curve.write("step,samples,lr,loss\n")
        for step in range(start_step, total_steps):
            inputs, targets = stream.batch(step)
            lr = trainer.lr_at(step)
            params.zero_grads()
            with Tape() as tape:
                logits = forward_train(model_config, params, inputs)
                loss = cross_entropy(logits, targets, ignore_index=IGNORE)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at step {step} (lr={lr:.3e})")
            tape.backward(loss)
            named = params.named_tensors()
            grads = {k: t.grad for k, t in named.items() if t.grad is not None}
            adamw_step(named, grads, opt, lr)
            losses.append(value)
            curve.write(f"{step},{(step + 1) * trainer.batch_size},{lr:.10e},{value:.10e}\n")
            if progress is not None and (step + 1) % trainer.log_every == 0:
                progress(step + 1, total_steps, value)
            if trainer.checkpoint_every and (step + 1) % trainer.checkpoint_every == 0 \
                    and step + 1 < total_steps:
                save_training_state(ckpt_path, model_config, trainer, task,
                                    params, opt, step + 1)
    save_training_state(ckpt_path, model_config, trainer, task, params, opt,
                        total_steps)
    manifest_path = out / "manifest.json"
    manifest = {
        "config": _experiment_text(model_config, trainer, task),
        "code_version": __version__,
        "seed": trainer.seed,
        "steps": total_steps,
        "resumed_from_step": start_step,
        "wall_clock_s": round(time.time() - started, 3),
        "final_loss": losses[-1] if losses else None,
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return TrainResult(steps=total_steps, losses=losses,
                       final_loss=losses[-1] if losses else float("nan"),
                       checkpoint_path=str(ckpt_path), curve_path=str(curve_path),
                       manifest_path=str(manifest_path))

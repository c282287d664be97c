"""SGD training loop with cosine schedule, identity-balanced batches and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ivt.alignment import AlignmentConfig, Batch, LossReport, training_step_loss
from ivt.checkpoint import Checkpoint
from ivt.dataset import DatasetSplit
from ivt.encoder import EncoderConfig, IVTEncoder, no_decay_names
from ivt.text import Vocab, build_vocab

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite loss at step {diagnostics['step']}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    grad_clip: float = 0.0  # max global grad norm, 0 disables
    batch_size: int = 32
    total_steps: int = 2000
    warmup_steps: int | None = None  # None -> 5% of total_steps
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    eval_every: int = 0

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", int(0.05 * self.total_steps))
        if self.total_steps <= 0:
            raise ValueError("train.total_steps must be positive")
        if self.batch_size < 2:
            raise ValueError("train.batch_size must be >= 2")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("train.base_lr, train.weight_decay must be >= 0 and train.momentum in [0, 1)")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("train.warmup_steps must be in [0, total_steps)")
        if self.grad_clip < 0:
            raise ValueError("train.grad_clip must be >= 0")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("train.checkpoint_every and train.eval_every must be >= 0")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    step = min(max(step, 0), cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD with decoupled weight decay.

    For decayed parameters: ``p <- p * (1 - lr * wd)``, then
    ``buf <- momentum * buf + grad`` and ``p <- p - lr * buf``. Parameters
    without a gradient are left alone.
    """

    def __init__(self, model: IVTEncoder, momentum: float, weight_decay: float):
        self.params = dict(model.named_parameters())
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = no_decay_names(model)
        self.buffers = {name: torch.zeros_like(p) for name, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if name not in self.no_decay and self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            buf = self.buffers[name]
            buf.mul_(self.momentum).add_(p.grad)
            p.sub_(lr * buf)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class BalancedSampler:
    """B/2 identities x 2 pairs per batch when the split allows it.

    Every step draws from its own generator seeded by (seed, step), so a
    resumed run sees exactly the batches of an uninterrupted one.
    """

    def __init__(self, split: DatasetSplit, batch_size: int, seed: int):
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        by_label: dict[int, list[int]] = {}
        for i, p in enumerate(split.pairs):
            by_label.setdefault(p.label, []).append(i)
        self.labels = sorted(by_label)
        self.by_label = by_label

    def indices(self, step: int) -> list[int]:
        rng = np.random.default_rng([self.seed, step, 0])
        n_ids = min(self.batch_size // 2, len(self.labels))
        chosen = []
        for lab in rng.choice(self.labels, size=n_ids, replace=False):
            pool = self.by_label[int(lab)]
            chosen.extend(int(i) for i in rng.choice(pool, size=min(2, len(pool)), replace=False))
        remaining = self.batch_size - len(chosen)
        if remaining > 0:
            rest = np.setdiff1d(np.arange(len(self.split.pairs)), chosen)
            chosen.extend(int(i) for i in rng.choice(rest, size=min(remaining, len(rest)), replace=False))
        return chosen

    def batch(self, step: int) -> Batch:
        pairs = [self.split.pairs[i] for i in self.indices(step)]
        return Batch(np.stack([p.image for p in pairs]), [p.caption for p in pairs], np.array([p.label for p in pairs]))


@dataclass
class TrainState:
    model: IVTEncoder
    optimizer: SGD
    vocab: Vocab
    model_cfg: EncoderConfig
    train_cfg: TrainConfig
    align_cfg: AlignmentConfig
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def config_dict(self) -> dict:
        return {
            "model": self.model_cfg.to_dict(),
            "train": asdict(self.train_cfg),
            "alignment": {**asdict(self.align_cfg), "level_augmentation": dict(self.align_cfg.level_augmentation)},
        }

    def checkpoint(self) -> Checkpoint:
        arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        arrays.update({f"optim.momentum.{k}": v.cpu().numpy() for k, v in self.optimizer.buffers.items()})
        return Checkpoint(self.config_dict(), arrays, self.train_cfg.seed, self.step, self.vocab.tokens)


def load_model(ckpt: Checkpoint) -> tuple[IVTEncoder, Vocab]:
    cfg = EncoderConfig(**ckpt.config["model"])
    model = IVTEncoder(cfg)
    state = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, Vocab.from_tokens(ckpt.vocab)


def configs_from_checkpoint(ckpt: Checkpoint) -> tuple[EncoderConfig, TrainConfig, AlignmentConfig]:
    c = ckpt.config
    return EncoderConfig(**c["model"]), TrainConfig(**c["train"]), AlignmentConfig(**c["alignment"])


def init_state(
    model_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    align_cfg: AlignmentConfig,
    data: DatasetSplit,
    vocab: Vocab | None = None,
) -> TrainState:
    if not len(data):
        raise ValueError("training split is empty")
    vocab = vocab or build_vocab([p.caption for p in data.pairs])
    model_cfg = replace(model_cfg, vocab_size=vocab.size)
    model = IVTEncoder(model_cfg, seed=train_cfg.seed)
    opt = SGD(model, train_cfg.momentum, train_cfg.weight_decay)
    return TrainState(model, opt, vocab, model_cfg, train_cfg, align_cfg)


def resume_state(ckpt: Checkpoint) -> TrainState:
    model_cfg, train_cfg, align_cfg = configs_from_checkpoint(ckpt)
    model, vocab = load_model(ckpt)
    opt = SGD(model, train_cfg.momentum, train_cfg.weight_decay)
    for name in opt.buffers:
        opt.buffers[name] = torch.from_numpy(ckpt.arrays[f"optim.momentum.{name}"].copy())
    return TrainState(model, opt, vocab, model_cfg, train_cfg, align_cfg, step=ckpt.step)


def train_step(state: TrainState, sampler: BalancedSampler, lr: float | None = None) -> LossReport:
    cfg = state.train_cfg
    step = state.step
    lr = cosine_lr(step, cfg) if lr is None else lr
    batch = sampler.batch(step)
    state.optimizer.zero_grad()
    report = training_step_loss(batch, state.model, state.vocab, state.align_cfg, np.random.default_rng([cfg.seed, step, 1]))
    if not math.isfinite(report.total):
        raise NonFiniteLossError({"step": step, "lr": lr, **report.as_record()})
    report.loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step(lr)
    state.step += 1
    record = {"step": step, "lr": lr, **report.as_record()}
    state.history.append(record)
    return report


def train(
    model_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    align_cfg: AlignmentConfig,
    data: DatasetSplit,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    eval_split: DatasetSplit | None = None,
    stop_at: int | None = None,
) -> TrainState:
    """Run (or resume) training; writes ``metrics.jsonl`` and checkpoints under ``out_dir``.

    ``stop_at`` ends the run early at that step (checkpointing it), which is
    how interrupted runs are simulated.
    """
    state = resume_state(resume) if resume is not None else init_state(model_cfg, train_cfg, align_cfg, data)
    cfg = state.train_cfg
    sampler = BalancedSampler(data, cfg.batch_size, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state.vocab.save(out / "vocab.txt")
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)

    torch.manual_seed(cfg.seed)
    state.model.train()
    while state.step < end:
        try:
            train_step(state, sampler)
        except NonFiniteLossError as e:
            if out is not None:
                (out / "abort.json").write_text(json.dumps(e.diagnostics, indent=1) + "\n")
            raise
        rec = state.history[-1]
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                state.checkpoint().save(out / f"step_{state.step:06d}.ckpt")
        if cfg.eval_every and eval_split is not None and state.step % cfg.eval_every == 0:
            from ivt.evaluation import evaluate_split

            metrics = evaluate_split(state.model, state.vocab, eval_split)
            log.info("step %d eval %s", state.step, metrics)
            if out is not None:
                with open(out / "eval.jsonl", "a", encoding="utf-8") as f:
                    f.write(json.dumps({"step": state.step, **metrics}, sort_keys=True) + "\n")
        if state.step % 100 == 0:
            log.info("step %d lr %.2e loss %.4f (%s)", rec["step"], rec["lr"], rec["total"], rec["level"])
    state.model.eval()
    if out is not None:
        name = "final.ckpt" if state.step == cfg.total_steps else f"step_{state.step:06d}.ckpt"
        state.checkpoint().save(out / name)
    return state

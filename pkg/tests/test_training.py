import json
import math

import numpy as np
import pytest
import torch

from ivt import training
from ivt.alignment import BASELINE, AlignmentConfig, LossReport
from ivt.checkpoint import Checkpoint
from ivt.encoder import DESK_PRESET, EncoderConfig, IVTEncoder, no_decay_names
from ivt.training import (
    SGD, BalancedSampler, NonFiniteLossError, TrainConfig, cosine_lr, init_state, load_model, resume_state, train, train_step,
)

SMALL = EncoderConfig(depth=1, width=16, heads=2)


def test_warmup_defaults_to_five_percent():
    assert TrainConfig(total_steps=2000).warmup_steps == 100


def test_cosine_schedule_points():
    cfg = TrainConfig(total_steps=2000)
    assert cosine_lr(cfg.warmup_steps, cfg) == pytest.approx(5e-3, abs=1e-15)
    assert abs(cosine_lr(cfg.total_steps, cfg)) < 1e-12
    assert cosine_lr((cfg.warmup_steps + cfg.total_steps) // 2, cfg) == pytest.approx(2.5e-3, rel=1e-12)
    assert cosine_lr(0, cfg) == 0.0
    assert cosine_lr(50, cfg) == pytest.approx(2.5e-3)
    assert cosine_lr(5000, cfg) == cosine_lr(2000, cfg)


def test_schedule_monotone_after_warmup():
    cfg = TrainConfig(total_steps=300)
    lrs = [cosine_lr(s, cfg) for s in range(cfg.warmup_steps, 301)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("kwargs", [dict(total_steps=0), dict(batch_size=1), dict(momentum=1.0), dict(warmup_steps=10, total_steps=10), dict(grad_clip=-1)])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_sgd_update_equation_per_group():
    model = IVTEncoder(SMALL, seed=0)
    lr, wd, mom = 0.1, 0.5, 0.9
    opt = SGD(model, mom, wd)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    grads = {n: torch.randn_like(p) for n, p in model.named_parameters()}
    for step in range(2):
        for n, p in model.named_parameters():
            p.grad = grads[n].clone()
        opt.step(lr)
    skip = no_decay_names(model)
    for n, p in model.named_parameters():
        decay = 0.0 if n in skip else wd
        p1 = before[n] * (1 - lr * decay) - lr * grads[n]
        p2 = p1 * (1 - lr * decay) - lr * (mom * grads[n] + grads[n])
        torch.testing.assert_close(p.detach(), p2, rtol=1e-6, atol=1e-6, msg=n)


def test_balanced_sampler(small_corpus):
    split = small_corpus.split("train")
    sampler = BalancedSampler(split, 8, seed=0)
    idx = sampler.indices(3)
    assert len(idx) == len(set(idx)) == 8
    labels = [split.pairs[i].label for i in idx]
    assert all(labels.count(l) >= 2 for l in set(labels))
    assert idx == BalancedSampler(split, 8, seed=0).indices(3)
    assert idx != sampler.indices(4)


def test_zero_lr_step_leaves_parameters(small_corpus):
    state = init_state(SMALL, TrainConfig(total_steps=10, batch_size=8), AlignmentConfig(), small_corpus.split("train"))
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    train_step(state, BalancedSampler(small_corpus.split("train"), 8, 0), lr=0.0)
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_one_step_updates_shared_attention(small_corpus):
    split = small_corpus.split("train")
    state = init_state(SMALL, TrainConfig(total_steps=10, batch_size=8, warmup_steps=0), AlignmentConfig(), split)
    qkv = state.model.blocks[0].attn.qkv.weight.detach().clone()
    train_step(state, BalancedSampler(split, 8, 0))
    assert not torch.equal(qkv, state.model.blocks[0].attn.qkv.weight)


def test_image_only_loss_leaves_text_mlp(small_corpus):
    state = init_state(SMALL, TrainConfig(total_steps=10, batch_size=8), AlignmentConfig(), small_corpus.split("train"))
    text_mlp = {n: p.detach().clone() for n, p in state.model.named_parameters() if ".mlp.text." in n}
    images = torch.from_numpy(np.stack([p.image for p in small_corpus.split("train").pairs[:4]]))
    (state.model.encode_image(images) @ torch.randn(16)).sum().backward()
    state.optimizer.step(0.1)
    for n, p in state.model.named_parameters():
        if n in text_mlp:
            assert torch.equal(p, text_mlp[n]), n


def _cfg(**kw):
    return TrainConfig(**{"total_steps": 12, "batch_size": 8, "grad_clip": 5.0, "checkpoint_every": 4, **kw})


def test_same_seed_identical_checkpoints(tmp_path, small_corpus):
    split = small_corpus.split("train")
    train(SMALL, _cfg(), AlignmentConfig(), split, tmp_path / "a")
    train(SMALL, _cfg(), AlignmentConfig(), split, tmp_path / "b")
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    train(SMALL, _cfg(seed=1), AlignmentConfig(), split, tmp_path / "c")
    assert (tmp_path / "a/final.ckpt").read_bytes() != (tmp_path / "c/final.ckpt").read_bytes()


def test_resume_equivalence(tmp_path, small_corpus):
    split = small_corpus.split("train")
    full = train(SMALL, _cfg(), AlignmentConfig(), split, tmp_path / "full")
    train(SMALL, _cfg(), AlignmentConfig(), split, tmp_path / "part", stop_at=4)
    assert not (tmp_path / "part/final.ckpt").exists()
    resumed = train(SMALL, _cfg(), AlignmentConfig(), split, tmp_path / "part", resume=Checkpoint.load(tmp_path / "part/step_000004.ckpt"))
    assert resumed.step == full.step == 12
    assert (tmp_path / "full/final.ckpt").read_bytes() == (tmp_path / "part/final.ckpt").read_bytes()


def test_checkpoint_contents(tmp_path, small_corpus):
    state = train(SMALL, _cfg(total_steps=4), BASELINE, small_corpus.split("train"), tmp_path)
    ckpt = Checkpoint.load(tmp_path / "final.ckpt")
    assert ckpt.step == 4 and ckpt.seed == 0 and ckpt.vocab == state.vocab.tokens
    assert ckpt.config["alignment"]["mla_enabled"] is False
    model, vocab = load_model(ckpt)
    for k, v in state.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v)
    again = resume_state(ckpt).checkpoint()
    assert again.to_bytes() == ckpt.to_bytes()
    log = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    assert {"total", "t2v", "v2t", "level", "ratio", "lr"} <= set(log[0])
    assert (tmp_path / "vocab.txt").read_text().split("\n")[:5] == ["[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]"]


def test_non_finite_loss_aborts_with_dump(tmp_path, small_corpus, monkeypatch):
    def bad(*args, **kwargs):
        return LossReport(float("nan"), float("nan"), 1.0, "sentence", 0.0, loss=torch.tensor(float("nan")))

    monkeypatch.setattr(training, "training_step_loss", bad)
    with pytest.raises(NonFiniteLossError):
        train(SMALL, _cfg(), AlignmentConfig(), small_corpus.split("train"), tmp_path)
    dump = json.loads((tmp_path / "abort.json").read_text())
    assert dump["step"] == 0 and "lr" in dump and math.isnan(dump["total"]) and dump["v2t"] == 1.0


def test_loss_descends_on_desk_preset():
    from ivt.config import RunConfig
    from ivt.pipeline import run_training

    early, late = [], []
    for seed in range(3):
        cfg = RunConfig.from_flat({"output_dir": "unused", "train.seed": seed})
        state = run_training(cfg, stop_at=201, write=False)
        losses = [h["total"] for h in state.history]
        early.append(np.mean(losses[:11]))
        late.append(losses[200])
    assert np.mean(late) < np.mean(early)

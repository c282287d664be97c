"""CMPM matching loss, bidirectional masking and multi-level alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ivt.image import augment, patchify
from ivt.text import CLS, MASK, PAD, SEP, TokenSequence, Vocab, split_levels, tokenize

LEVELS = ("sentence", "phrase", "word")
DEFAULT_LEVEL_AUGMENTATION = {"sentence": "identity", "phrase": "hflip", "word": "random_crop"}


@dataclass(frozen=True)
class AlignmentConfig:
    mla_enabled: bool = True
    bmm_enabled: bool = True
    bmm_ratio: float = 0.3
    epsilon: float = 1e-8
    normalize_targets: bool = False
    level_augmentation: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_LEVEL_AUGMENTATION))

    def __post_init__(self):
        if not 0.0 <= self.bmm_ratio < 1.0:
            raise ValueError("bmm.ratio must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("cmpm.epsilon must be positive")
        if set(self.level_augmentation) != set(LEVELS):
            raise ValueError(f"mla.level_augmentation_map must map exactly {LEVELS}")


BASELINE = AlignmentConfig(mla_enabled=False, bmm_enabled=False)


@dataclass
class LossReport:
    total: float
    t2v: float
    v2t: float
    level: str = "sentence"
    mask_ratio: float = 0.0
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_record(self) -> dict:
        return {"total": self.total, "t2v": self.t2v, "v2t": self.v2t, "level": self.level, "ratio": self.mask_ratio}


# -- CMPM -------------------------------------------------------------------


def identity_match(labels: torch.Tensor) -> torch.Tensor:
    return (labels[:, None] == labels[None, :])


def cmpm_one_direction(
    f_a: torch.Tensor,
    f_b: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float = 1e-8,
    normalize_targets: bool = False,
) -> torch.Tensor:
    """KL(p || q) averaged over the batch, where p is the softmax over in-batch
    matching scores ``f_a[i] . f_b[j]`` and q the label-derived match distribution."""
    if f_a.shape[0] < 2:
        raise ValueError("CMPM needs a batch of at least 2")
    if normalize_targets:
        f_b = F.normalize(f_b, dim=1)
    log_p = torch.log_softmax(f_a @ f_b.t(), dim=1)
    y = identity_match(labels).to(f_a.dtype)
    q = y / y.sum(dim=1, keepdim=True)
    return (log_p.exp() * (log_p - torch.log(q + epsilon))).sum(dim=1).mean()


def cmpm_total(
    f_img: torch.Tensor,
    f_txt: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float = 1e-8,
    normalize_targets: bool = False,
    level: str = "sentence",
    mask_ratio: float = 0.0,
) -> LossReport:
    t2v = cmpm_one_direction(f_txt, f_img, labels, epsilon, normalize_targets)
    v2t = cmpm_one_direction(f_img, f_txt, labels, epsilon, normalize_targets)
    total = t2v + v2t
    return LossReport(float(total.detach()), float(t2v.detach()), float(v2t.detach()), level, mask_ratio, loss=total)


# -- masking ----------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """Token positions to mask. Image indices are 1..K (0 is the class token);
    text indices are positions of real caption tokens."""

    ratio: float
    image_indices: tuple[int, ...] = ()
    text_indices: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.image_indices and not self.text_indices


def mask_count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 0.5))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_mask(num_patches: int, num_real_tokens: int, ratio: float, rng_seed=None) -> MaskSpec:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    rng = _rng(rng_seed)
    n_img = mask_count(ratio, num_patches)
    n_txt = mask_count(ratio, num_real_tokens)
    img = rng.choice(num_patches, size=n_img, replace=False) + 1 if n_img else []
    txt = rng.choice(num_real_tokens, size=n_txt, replace=False) + 1 if n_txt else []
    return MaskSpec(ratio, tuple(sorted(int(i) for i in img)), tuple(sorted(int(i) for i in txt)))


def mask_tokens(tokens: TokenSequence, spec: MaskSpec) -> TokenSequence:
    if not spec.text_indices:
        return tokens
    ids = list(tokens.ids)
    for i in spec.text_indices:
        if not 0 <= i < len(ids):
            raise IndexError(f"text mask index {i} out of range")
        if ids[i] in (CLS, SEP, PAD):
            raise IndexError(f"text mask index {i} is not a caption token")
        ids[i] = MASK
    return TokenSequence(tuple(ids), tokens.modality, tokens.type_id, tokens.positions)


def image_mask_flags(spec: MaskSpec, num_patches: int) -> np.ndarray:
    """Boolean per-patch flags (patch k is token k+1)."""
    flags = np.zeros(num_patches, dtype=bool)
    for i in spec.image_indices:
        if not 1 <= i <= num_patches:
            raise IndexError(f"image mask index {i} out of range 1..{num_patches}")
        flags[i - 1] = True
    return flags


def apply_mask(x, spec: MaskSpec, mask_vector: torch.Tensor | None = None):
    """Mask a TokenSequence (ids -> MASK) or a ``[K, D]`` patch tensor (rows -> ``mask_vector``)."""
    if isinstance(x, TokenSequence):
        return mask_tokens(x, spec)
    flags = image_mask_flags(spec, x.shape[0])
    if not flags.any():
        return x
    if mask_vector is None:
        raise ValueError("masking patches needs the learned mask vector")
    return torch.where(torch.from_numpy(flags)[:, None], mask_vector.to(x.dtype), x)


# -- training step ----------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, 3]
    texts: list[str]
    labels: np.ndarray  # [B]

    def __post_init__(self):
        if not (len(self.images) == len(self.texts) == len(self.labels)):
            raise ValueError("batch fields must have equal length")


def encode_batch(model, images: np.ndarray, seqs: Sequence[TokenSequence], image_masks: np.ndarray | None = None):
    dtype = next(model.parameters()).dtype
    imgs = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    mask = None if image_masks is None else torch.from_numpy(image_masks)
    patches = patchify(imgs, model.config.patch_size)
    return model.encode_image(patches, mask), model.encode_text(ids)


def training_step_loss(batch: Batch, model, vocab: Vocab, config: AlignmentConfig, rng_seed=None) -> LossReport:
    """Sample one MLA level for the step, draw per-sample text/augmentation,
    optionally mask both modalities, encode and score with bidirectional CMPM."""
    rng = _rng(rng_seed)
    mcfg = model.config
    level = LEVELS[int(rng.integers(len(LEVELS)))] if config.mla_enabled else "sentence"
    kind = config.level_augmentation[level] if config.mla_enabled else "identity"

    images, seqs = [], []
    for image, text in zip(batch.images, batch.texts):
        if config.mla_enabled:
            choices = split_levels(text)[level]
            text = choices[int(rng.integers(len(choices)))]
            image = augment(image, kind, rng)
        images.append(image)
        seqs.append(tokenize(text, vocab, mcfg.max_text_len))

    ratio = config.bmm_ratio if config.bmm_enabled else 0.0
    image_masks = None
    if config.bmm_enabled and ratio > 0:
        specs = [sample_mask(mcfg.num_patches, len(s.real_positions), ratio, rng) for s in seqs]
        seqs = [mask_tokens(s, spec) for s, spec in zip(seqs, specs)]
        image_masks = np.stack([image_mask_flags(spec, mcfg.num_patches) for spec in specs])

    f_img, f_txt = encode_batch(model, np.stack(images), seqs, image_masks)
    labels = torch.as_tensor(np.asarray(batch.labels), dtype=torch.long)
    return cmpm_total(f_img, f_txt, labels, config.epsilon, config.normalize_targets, level, ratio)

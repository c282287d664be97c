"""Unified visual-textual transformer.

Both modalities run through the same blocks. Inside a block, the layer norms
and multi-head self-attention are single modules used by both modalities;
only the feed-forward is routed to an image or a text MLP.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from ivt.image import num_patches, patchify
from ivt.text import IMAGE_TYPE, PAD, TEXT_TYPE

MODALITIES = ("image", "text")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    patch_size: int = 8
    image_height: int = 32
    image_width: int = 16
    vocab_size: int = 64
    max_text_len: int = 16
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"model.{f.name} must be positive")
        if self.width % self.heads:
            raise ConfigError("model.width must be divisible by model.heads")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("image not divisible by patch size")
        if self.max_text_len < 3:
            raise ConfigError("model.max_text_len must be >= 3")

    @property
    def num_patches(self) -> int:
        return num_patches(self.image_height, self.image_width, self.patch_size)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


DESK_PRESET = EncoderConfig()
PAPER_PRESET = EncoderConfig(
    depth=12, width=768, heads=12, patch_size=16, image_height=384, image_width=128,
    vocab_size=30522, max_text_len=64,
)


def _trunc_normal(t: torch.Tensor, generator: torch.Generator | None) -> None:
    nn.init.trunc_normal_(t, std=0.02, a=-0.04, b=0.04, generator=generator)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm block: shared LN + MSA, modality-routed feed-forward."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.ModuleDict({"image": Mlp(dim, hidden), "text": Mlp(dim, hidden)})

    def forward(self, x: torch.Tensor, modality: str, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        x = x + self.attn(self.norm1(x), key_padding_mask)
        x = x + self.mlp[modality](self.norm2(x))
        return x


class IVTEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d = config.width
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.mask_patch = nn.Parameter(torch.empty(config.patch_dim))
        self.cls_image = nn.Parameter(torch.empty(d))
        self.pos_image = nn.Parameter(torch.empty(config.num_patches + 1, d))
        # row CLS of the word table is the text class token
        self.word_embed = nn.Embedding(config.vocab_size, d)
        self.pos_text = nn.Parameter(torch.empty(config.max_text_len, d))
        self.type_embed = nn.Embedding(2, d)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if ".norm" in f".{name}" and name.endswith("weight"):
                nn.init.ones_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            else:
                with torch.no_grad():
                    _trunc_normal(p, g)

    # -- embeddings ---------------------------------------------------------

    def embed_image(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``[B, K, P*P*C]`` patches -> ``[B, K+1, d]`` token states.

        ``mask`` is a ``[B, K]`` boolean array; flagged patches are swapped for
        the learned mask patch before projection.
        """
        if patches.shape[-2] != self.config.num_patches:
            raise ConfigError(f"expected {self.config.num_patches} patches, got {patches.shape[-2]}")
        if mask is not None:
            patches = torch.where(mask[..., None], self.mask_patch.to(patches.dtype), patches)
        x = self.patch_embed(patches)
        cls = self.cls_image.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        return x + self.pos_image + self.type_embed.weight[IMAGE_TYPE]

    def embed_text(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``[B, n]`` ids -> (``[B, n, d]`` states, ``[B, n]`` PAD flags)."""
        n = ids.shape[-1]
        if n > self.config.max_text_len:
            raise ConfigError(f"text length {n} exceeds max_text_len {self.config.max_text_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise IndexError("token id out of range for vocab_size")
        x = self.word_embed(ids) + self.pos_text[:n] + self.type_embed.weight[TEXT_TYPE]
        return x, ids == PAD

    # -- forward ------------------------------------------------------------

    def run_blocks(self, x: torch.Tensor, modality: str, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, modality, key_padding_mask)
        return self.norm(x)

    def image_tokens(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """All final-LN token states for ``[B, H, W, C]`` images (or ``[B, K, P*P*C]`` patches)."""
        patches = images if images.dim() == 3 else patchify(images, self.config.patch_size)
        return self.run_blocks(self.embed_image(patches, mask), "image")

    def text_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        x, pad = self.embed_text(ids)
        return self.run_blocks(x, "text", pad)

    def encode_image(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.image_tokens(images, mask)[:, 0]

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_tokens(ids)[:, 0]

    def encode(self, x: torch.Tensor, modality: str) -> torch.Tensor:
        if modality == "image":
            return self.encode_image(x)
        if modality == "text":
            return self.encode_text(x)
        raise ValueError(f"unknown modality {modality!r}")


def no_decay_names(model: nn.Module) -> set[str]:
    """LayerNorm parameters and embedding tables; everything else gets weight decay."""
    names = set()
    for name, _ in model.named_parameters():
        leaf = name.split(".")[-2] if "." in name else ""
        if leaf.startswith("norm") or name.startswith(("word_embed", "type_embed")) or "." not in name:
            names.add(name)
    return names


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def make_encoder(config: EncoderConfig, seed: int = 0, dtype=torch.float32) -> IVTEncoder:
    model = IVTEncoder(config, seed=seed)
    return model.to(dtype)


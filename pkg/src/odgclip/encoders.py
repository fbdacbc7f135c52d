"""Frozen dual encoders: the backend contract, a deterministic mock, and a CLIP adapter.

Every backend exposes

* ``visual(images)`` taking ``(B, 3, H, W)`` and returning a :class:`VisualOutput`
  with the pooled embedding plus the mean/std of the final patch tokens,
* ``text(tokens)`` taking ``(..., L, d_tok)`` token-embedding sequences and
  returning ``(..., d_t)`` embeddings,
* ``name_embedding(name)`` giving the fixed ``d_tok`` class-token vector of a
  class name.

Backends hold no trainable state. Gradients flow through them to their inputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DataError

DTYPE = torch.float64


class VisualOutput(NamedTuple):
    embedding: torch.Tensor  # (B, d_v)
    token_mean: torch.Tensor  # (B, d_v)
    token_std: torch.Tensor  # (B, d_v), population convention


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "mock"
    seed: int = 0
    d_v: int = 32
    d_tok: int = 32
    d_t: int = 32
    n_patch_tokens: int = 16
    weights: str | None = None


def images_to_tensor(images) -> torch.Tensor:
    """``(B, H, W, 3)`` (or a single ``H x W x 3``) array to ``(B, 3, H, W)`` float64."""
    t = torch.as_tensor(np.asarray(images), dtype=DTYPE)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise DataError(f"expected H x W x 3 images, got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous()


def token_stats(tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel-wise mean and population std over the token axis of ``(B, T, d)``."""
    mu = tokens.mean(dim=1)
    var = ((tokens - mu.unsqueeze(1)) ** 2).mean(dim=1)
    # sqrt has an infinite slope at 0; the tiny floor keeps gradients finite
    # while leaving sigma == 0 exactly representable for constant tokens
    sigma = torch.where(var > 0, torch.sqrt(var.clamp_min(1e-300)), torch.zeros_like(var))
    return mu, sigma


def _seeded_normal(seed: int, shape, scale: float = 1.0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=DTYPE) * scale


def gabor_bank(n_filters: int, size: int = 7) -> torch.Tensor:
    """Zero-mean, unit-norm oriented Gabor filters over a few orientations, scales and phases."""
    half = size // 2
    yy, xx = torch.meshgrid(torch.arange(-half, half + 1, dtype=DTYPE), torch.arange(-half, half + 1, dtype=DTYPE), indexing="ij")
    out = []
    k = 0
    while len(out) < n_filters:
        theta = math.pi * (k % 4) / 4
        period = (3.0, 5.0, 7.0)[(k // 4) % 3]
        phase = 0.0 if (k // 12) % 2 == 0 else math.pi / 2
        rot = xx * math.cos(theta) + yy * math.sin(theta)
        g = torch.exp(-(xx**2 + yy**2) / (2 * (0.45 * size) ** 2)) * torch.cos(2 * math.pi * rot / period + phase)
        g = g - g.mean()
        out.append(g / g.norm())
        k += 1
    return torch.stack(out).unsqueeze(1)


class EncoderBackend(nn.Module):
    """Base class for frozen dual encoders."""

    d_v: int
    d_tok: int
    d_t: int
    max_context: int

    def freeze(self) -> "EncoderBackend":
        for p in self.parameters():
            p.requires_grad_(False)
        for b in self.buffers():
            b.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.shape[-1] != self.d_tok:
            raise DataError(f"token width {tokens.shape[-1]} != backend d_tok {self.d_tok}")
        if tokens.shape[-2] < 1 or tokens.shape[-2] > self.max_context:
            raise DataError(f"sequence length {tokens.shape[-2]} outside [1, {self.max_context}]")
        if not torch.isfinite(tokens).all():
            raise DataError("non-finite token vectors")

    def check_images(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise DataError("non-finite image values")

    def word_embedding(self, word: str) -> torch.Tensor:
        raise NotImplementedError

    def name_embedding(self, name: str) -> torch.Tensor:
        """Single ``d_tok`` token standing for a (possibly multi-word) name."""
        words = name.replace("_", " ").split()
        if not words:
            raise DataError("empty class name")
        return torch.stack([self.word_embedding(w) for w in words]).sum(0) / math.sqrt(len(words))

    def phrase_embedding(self, phrase: str) -> torch.Tensor:
        """One ``d_tok`` row per word of ``phrase``."""
        return torch.stack([self.word_embedding(w) for w in phrase.split()])


class MockBackend(EncoderBackend):
    """Tiny fixed-weight differentiable stand-in for a CLIP ViT/Transformer pair.

    Vision: a fixed 7x7 Gabor bank on the grayscale image (stride 2) with a
    bounded energy nonlinearity, joined with local colour and average-pooled
    into a square grid of patch tokens, linearly embedded, then one residual
    channel-mixing layer and one token-mixing layer. Text: positional
    embeddings, a tanh layer, fixed causal mixing, one causal softmax
    self-attention layer and a readout of the last and mean token states.
    The attention makes token effects interact, so prompt differentials
    depend on the domain token instead of cancelling it.
    """

    def __init__(self, seed: int = 0, d_v: int = 32, d_tok: int = 32, d_t: int = 32,
                 n_patch_tokens: int = 16, n_filters: int = 16, max_context: int = 77, attn_gain: float = 2.0):
        super().__init__()
        if min(d_v, d_tok, d_t) < 8:
            raise ConfigurationError("mock backend dims must be >= 8")
        grid = int(round(math.sqrt(n_patch_tokens)))
        if grid * grid != n_patch_tokens or grid < 2:
            raise ConfigurationError("n_patch_tokens must be a square >= 4")
        self.seed = seed
        self.d_v, self.d_tok, self.d_t = d_v, d_tok, d_t
        self.grid = grid
        self.max_context = max_context
        s = seed * 1009

        self.register_buffer("filters", gabor_bank(n_filters))
        n_feat = n_filters + 3
        self.register_buffer("patch_w", _seeded_normal(s + 2, (n_feat, d_v), 1.5 / math.sqrt(n_feat)))
        self.register_buffer("pos_v", _seeded_normal(s + 3, (n_patch_tokens, d_v), 0.1))
        self.register_buffer("mix_c", _seeded_normal(s + 4, (d_v, d_v), 1.0 / math.sqrt(d_v)))
        self.register_buffer("mix_t", _seeded_normal(s + 5, (n_patch_tokens, n_patch_tokens), 0.3 / math.sqrt(n_patch_tokens)))
        self.register_buffer("proj_v", _seeded_normal(s + 6, (d_v, d_v), 1.0 / math.sqrt(d_v)))

        d_h = max(d_tok, d_t)
        self.register_buffer("pos_t", _seeded_normal(s + 7, (max_context, d_tok), 0.5))
        self.register_buffer("w1", _seeded_normal(s + 8, (d_tok, d_h), 1.0 / math.sqrt(d_tok)))
        causal = torch.tril(torch.rand(max_context, max_context, generator=torch.Generator().manual_seed(s + 9), dtype=DTYPE))
        self.register_buffer("causal", causal / causal.sum(dim=1, keepdim=True))
        self.register_buffer("w2", _seeded_normal(s + 10, (d_h, d_h), 1.0 / math.sqrt(d_h)))
        self.register_buffer("wq", _seeded_normal(s + 13, (d_h, d_h), attn_gain / math.sqrt(d_h)))
        self.register_buffer("wk", _seeded_normal(s + 14, (d_h, d_h), attn_gain / math.sqrt(d_h)))
        self.register_buffer("wv", _seeded_normal(s + 15, (d_h, d_h), 1.0 / math.sqrt(d_h)))
        self.register_buffer("w_last", _seeded_normal(s + 11, (d_h, d_t), 1.0 / math.sqrt(d_h)))
        self.register_buffer("w_mean", _seeded_normal(s + 12, (d_h, d_t), 1.0 / math.sqrt(d_h)))
        self.freeze()

    def patch_tokens(self, images: torch.Tensor) -> torch.Tensor:
        gray = images.mean(dim=1, keepdim=True)
        z = F.conv2d(gray, self.filters, stride=2, padding=self.filters.shape[-1] // 2) * 4.0
        energy = z * z / (1.0 + z * z) - 0.5
        color = F.avg_pool2d(images, 2, ceil_mode=True) - 0.5
        feats = torch.cat([energy, color[..., : energy.shape[-2], : energy.shape[-1]]], dim=1)
        pooled = F.adaptive_avg_pool2d(feats, (self.grid, self.grid))  # (B, C, g, g)
        tokens = pooled.flatten(2).transpose(1, 2) @ self.patch_w + self.pos_v
        tokens = tokens + torch.tanh(tokens @ self.mix_c)
        tokens = tokens + self.mix_t @ tokens
        return tokens

    def visual(self, images: torch.Tensor) -> VisualOutput:
        self.check_images(images)
        tokens = self.patch_tokens(images)
        mu, sigma = token_stats(tokens)
        emb = torch.tanh(tokens).mean(dim=1) @ self.proj_v
        return VisualOutput(emb, mu, sigma)

    def text(self, tokens: torch.Tensor) -> torch.Tensor:
        self.check_tokens(tokens)
        L = tokens.shape[-2]
        h = torch.tanh((tokens + self.pos_t[:L]) @ self.w1)
        h = h + self.causal[:L, :L] @ h
        scores = (h @ self.wq) @ (h @ self.wk).transpose(-1, -2) / math.sqrt(h.shape[-1])
        mask = torch.ones(L, L, dtype=torch.bool, device=h.device).triu(1)
        h = h + torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1) @ (h @ self.wv)
        h = torch.tanh(h @ self.w2)
        return h[..., -1, :] @ self.w_last + h.mean(dim=-2) @ self.w_mean

    def word_embedding(self, word: str) -> torch.Tensor:
        digest = hashlib.sha256(f"{self.seed}:{word.lower()}".encode()).digest()
        return _seeded_normal(int.from_bytes(digest[:8], "little") >> 1, (self.d_tok,))

    def descriptor(self) -> dict:
        return {"backend": "mock", "seed": self.seed, "d_v": self.d_v, "d_tok": self.d_tok,
                "d_t": self.d_t, "n_patch_tokens": self.grid * self.grid}


def make_mock_backend(seed: int = 0, d_v: int = 32, d_tok: int = 32, d_t: int = 32,
                      n_patch_tokens: int = 16) -> MockBackend:
    return MockBackend(seed=seed, d_v=d_v, d_tok=d_tok, d_t=d_t, n_patch_tokens=n_patch_tokens)


class ClipBackend(EncoderBackend):
    """Adapter around a Hugging Face ``CLIPModel``.

    Patch-token statistics are taken after the final layer norm and the visual
    projection so that ``mu``/``sigma`` live in the same ``d_v`` space as the
    pooled embedding. Text sequences are fed as token embeddings wrapped in the
    model's start/end tokens; the end token state is the sequence embedding.
    """

    def __init__(self, model, tokenizer=None, image_size: int | None = None):
        super().__init__()
        self.model = model.to(DTYPE)
        self.tokenizer = tokenizer
        cfg = model.config
        self.d_v = cfg.projection_dim
        self.d_t = cfg.projection_dim
        self.d_tok = cfg.text_config.hidden_size
        # two slots go to the start/end tokens
        self.max_context = cfg.text_config.max_position_embeddings - 2
        self.image_size = image_size or cfg.vision_config.image_size
        self.bos_id = getattr(cfg.text_config, "bos_token_id", 0)
        self.eos_id = getattr(cfg.text_config, "eos_token_id", 1)
        self.freeze()

    @classmethod
    def from_pretrained(cls, path: str) -> "ClipBackend":
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ConfigurationError("the clip backend needs the 'transformers' package") from exc
        return cls(CLIPModel.from_pretrained(path), CLIPTokenizer.from_pretrained(path))

    def visual(self, images: torch.Tensor) -> VisualOutput:
        self.check_images(images)
        vm = self.model.vision_model
        if images.shape[-1] != self.image_size or images.shape[-2] != self.image_size:
            images = F.interpolate(images, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.48145466, 0.4578275, 0.40821073], dtype=DTYPE).view(1, 3, 1, 1)
        std = torch.tensor([0.26862954, 0.26130258, 0.27577711], dtype=DTYPE).view(1, 3, 1, 1)
        out = vm(pixel_values=(images - mean) / std)
        hidden = vm.post_layernorm(out.last_hidden_state)
        projected = self.model.visual_projection(hidden)
        mu, sigma = token_stats(projected[:, 1:])
        return VisualOutput(projected[:, 0], mu, sigma)

    def text(self, tokens: torch.Tensor) -> torch.Tensor:
        self.check_tokens(tokens)
        tm = self.model.text_model
        lead = tokens.shape[:-2]
        seq = tokens.reshape(-1, *tokens.shape[-2:])
        emb_table = tm.embeddings.token_embedding.weight
        n = seq.shape[0]
        bos = emb_table[self.bos_id].expand(n, 1, -1)
        eos = emb_table[self.eos_id].expand(n, 1, -1)
        x = torch.cat([bos, seq, eos], dim=1)
        L = x.shape[1]
        pos = tm.embeddings.position_embedding.weight[:L]
        h = x + pos
        mask = torch.full((L, L), float("-inf"), dtype=h.dtype).triu(1).view(1, 1, L, L)
        h = tm.encoder(inputs_embeds=h, causal_attention_mask=mask).last_hidden_state
        h = tm.final_layer_norm(h)
        out = self.model.text_projection(h[:, -1])
        return out.reshape(*lead, -1)

    def word_embedding(self, word: str) -> torch.Tensor:
        if self.tokenizer is None:
            raise ConfigurationError("clip backend built without a tokenizer cannot embed words")
        ids = self.tokenizer(word, add_special_tokens=False)["input_ids"]
        table = self.model.text_model.embeddings.token_embedding.weight
        return table[ids].mean(0)

    def descriptor(self) -> dict:
        return {"backend": "clip", "d_v": self.d_v, "d_tok": self.d_tok, "d_t": self.d_t}


def make_backend(spec: BackendSpec) -> EncoderBackend:
    if spec.kind == "mock":
        return make_mock_backend(spec.seed, spec.d_v, spec.d_tok, spec.d_t, spec.n_patch_tokens)
    if spec.kind == "clip":
        if not spec.weights:
            raise ConfigurationError("backend 'clip' needs a weight path")
        return ClipBackend.from_pretrained(spec.weights)
    raise ConfigurationError(f"unknown backend kind {spec.kind!r}")


def visual_encode(backend: EncoderBackend, image) -> VisualOutput:
    """Encode one ``H x W x 3`` image (array or tensor) or a batch."""
    t = image if isinstance(image, torch.Tensor) and image.ndim == 4 and image.shape[1] == 3 else images_to_tensor(image)
    return backend.visual(t)


def text_encode(backend: EncoderBackend, seq: torch.Tensor) -> torch.Tensor:
    return backend.text(seq)

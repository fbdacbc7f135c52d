"""The (C+1)-way classifier assembled from a frozen backend and the trainable parts."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from .encoders import EncoderBackend
from .errors import ConfigurationError
from .latentspace import FuseProjector, Upsampler, differentials, latent_images
from .promptspace import PromptState


class ForwardOut(NamedTuple):
    xhat: torch.Tensor  # (B, K, d_t) prompt differentials
    text: torch.Tensor  # (B, K, d_t) domain+class prompt embeddings
    visual: torch.Tensor  # (B, K, d_v) embeddings of the latent images
    cos: torch.Tensor  # (B, K) cosine similarities


class ODGModel:
    """Holds the frozen backend plus prompt state, upsampler and fuse projector.

    ``use_xhat=False`` classifies the raw image embedding instead of the latent
    image. ``manual_xhat=True`` replaces every differential by the text
    embedding of the bare class-name token, identical across domains.
    """

    def __init__(self, backend: EncoderBackend, state: PromptState, ups: Upsampler, proj: FuseProjector,
                 use_xhat: bool = True, manual_xhat: bool = False):
        if backend.d_v != backend.d_t:
            raise ConfigurationError("cosine similarity needs d_v == d_t")
        self.backend = backend
        self.state = state
        self.ups = ups
        self.proj = proj
        self.use_xhat = use_xhat
        self.manual_xhat = manual_xhat

    @property
    def class_names(self) -> list[str]:
        return self.state.class_names

    def trainables(self) -> dict[str, torch.nn.Parameter]:
        out = {}
        for prefix, mod in (("prompt", self.state), ("upsampler", self.ups), ("fuse", self.proj)):
            for name, p in mod.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"prompt_state": self.state, "upsampler": self.ups, "fuse_projector": self.proj}

    def manual_table(self) -> torch.Tensor:
        """``(K, d_t)`` fixed class-name embeddings used by the manual ablation."""
        with torch.no_grad():
            return self.backend.text(self.state.class_table.unsqueeze(1))

    def forward(self, images: torch.Tensor) -> ForwardOut:
        xhat, t_cls = differentials(self.backend, self.state, images)
        B, K, _ = xhat.shape
        if self.manual_xhat:
            xhat = self.manual_table().unsqueeze(0).expand(B, K, -1)
        if self.use_xhat:
            lat = latent_images(self.ups, self.proj, images, xhat)
            v = self.backend.visual(lat).embedding.view(B, K, -1)
        else:
            v = self.backend.visual(images).embedding.unsqueeze(1).expand(B, K, -1)
        cos = F.cosine_similarity(t_cls, v, dim=-1)
        return ForwardOut(xhat, t_cls, v, cos)

    __call__ = forward

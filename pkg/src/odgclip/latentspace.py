"""Prompt differentials and the class-conditioned latent image.

For an image ``x`` and class ``y`` the differential is
``text(P_dom_cls(x, y)) - text(P_dom(x))``. It is laid out on a small square
grid, upsampled by four stride-2 transpose convolutions (each followed by a
ReLU) and bilinearly resized to the image size. The resulting one-channel map
is stacked onto ``x`` and a 1x1 convolution brings the four channels back to
three, giving the latent image that the visual encoder embeds.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import DTYPE, EncoderBackend, images_to_tensor
from .errors import DataError
from .promptspace import PromptState, compose_dom, compose_dom_cls, domain_token

DEFAULT_WIDTHS = (1, 16, 16, 8, 1)


def seed_grid_side(d_t: int) -> int:
    return math.ceil(math.sqrt(d_t))


def _uniform_(t: torch.Tensor, bound: float, g: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=g, dtype=t.dtype) * 2 - 1) * bound)


class Upsampler(nn.Module):
    def __init__(self, d_t: int, widths: Sequence[int] = DEFAULT_WIDTHS, kernel: int = 4, seed: int = 0):
        super().__init__()
        if len(widths) != 5 or widths[0] != 1 or widths[-1] != 1:
            raise ValueError("widths must describe four layers from 1 to 1 channel")
        self.d_t = d_t
        self.side = seed_grid_side(d_t)
        self.layers = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, kernel, stride=2, padding=(kernel - 2) // 2, dtype=DTYPE)
            for cin, cout in zip(widths[:-1], widths[1:])
        )
        g = torch.Generator().manual_seed(seed)
        for layer in self.layers:
            fan_in = layer.weight.shape[0] * kernel * kernel // 4  # stride 2: about a quarter of the taps hit each output
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            _uniform_(layer.weight, bound, g)
            _uniform_(layer.bias, 0.1 * bound, g)

    def grid(self, vectors: torch.Tensor) -> torch.Tensor:
        """``(n, d_t)`` vectors to zero-padded ``(n, 1, side, side)`` grids."""
        n, d = vectors.shape
        pad = self.side * self.side - d
        if pad < 0:
            raise DataError(f"vector of length {d} does not fit a {self.side}x{self.side} grid")
        return F.pad(vectors, (0, pad)).view(n, 1, self.side, self.side)

    def forward(self, vectors: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        h = self.grid(vectors)
        for layer in self.layers:
            h = F.relu(layer(h))
        return F.interpolate(h, size=tuple(target_hw), mode="bilinear", align_corners=False)


class FuseProjector(nn.Module):
    """1x1 convolution from image+map (4 channels) to 3 channels."""

    def __init__(self, seed: int = 0, kernel: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(4, 3, kernel, padding=kernel // 2, dtype=DTYPE)
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            # start close to passing the image through untouched
            self.conv.weight.zero_()
            c = kernel // 2
            self.conv.weight[:, :3, c, c] = torch.eye(3, dtype=DTYPE)
            self.conv.weight.add_(0.05 * torch.randn(self.conv.weight.shape, generator=g, dtype=DTYPE))
            self.conv.bias.zero_()

    def set_identity(self) -> None:
        """Copy the image channels through and ignore the map."""
        with torch.no_grad():
            self.conv.weight.zero_()
            c = self.conv.kernel_size[0] // 2
            self.conv.weight[:, :3, c, c] = torch.eye(3, dtype=DTYPE)
            self.conv.bias.zero_()

    def forward(self, images: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != maps.shape[-2:] or images.shape[0] != maps.shape[0]:
            raise DataError(f"image {tuple(images.shape)} and map {tuple(maps.shape)} do not align")
        return self.conv(torch.cat([images, maps], dim=1))


# -- per-item operations -------------------------------------------------------


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor) and image.ndim == 4 and image.shape[1] == 3:
        return image
    return images_to_tensor(image)


def differentials(backend: EncoderBackend, state: PromptState, images: torch.Tensor,
                  classes: Sequence[str] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched differentials. Returns ``(xhat, t_cls)``, both ``(B, K, d_t)``."""
    vo = backend.visual(images)
    dt = domain_token(state, vo)
    t_cls = backend.text(compose_dom_cls(state, dt, classes))
    t_dom = backend.text(compose_dom(state, dt))
    return t_cls - t_dom.unsqueeze(1), t_cls


def differential(backend: EncoderBackend, state: PromptState, image, class_name: str) -> torch.Tensor:
    """``d_t`` differential of one image for one class."""
    state.class_index(class_name)
    xhat, _ = differentials(backend, state, _as_batch(image), [class_name])
    return xhat[0, 0]


def upsample(ups: Upsampler, dv: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """One differential (``d_t``) to an ``H x W x 1`` map."""
    return ups(dv.reshape(1, -1), target_hw)[0].permute(1, 2, 0)


def fuse(proj: FuseProjector, image, fmap: torch.Tensor) -> torch.Tensor:
    """``H x W x 3`` image and ``H x W x 1`` map to the ``H x W x 3`` latent image."""
    img = image if isinstance(image, torch.Tensor) else torch.as_tensor(image, dtype=DTYPE)
    if img.shape[:2] != fmap.shape[:2]:
        raise DataError(f"image {tuple(img.shape)} and map {tuple(fmap.shape)} do not align")
    out = proj(img.permute(2, 0, 1).unsqueeze(0), fmap.permute(2, 0, 1).unsqueeze(0))
    return out[0].permute(1, 2, 0)


def latent_images(ups: Upsampler, proj: FuseProjector, images: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    """``(B, 3, H, W)`` images and ``(B, K, d_t)`` differentials to ``(B*K, 3, H, W)`` latents."""
    B, K, d = xhat.shape
    H, W = images.shape[-2:]
    maps = ups(xhat.reshape(B * K, d), (H, W))
    rep = images.unsqueeze(1).expand(B, K, *images.shape[1:]).reshape(B * K, *images.shape[1:])
    return proj(rep, maps)


def latent_embed(backend: EncoderBackend, state: PromptState, ups: Upsampler, proj: FuseProjector,
                 image, class_name: str) -> torch.Tensor:
    """Visual embedding of the latent image of ``image`` for ``class_name``."""
    images = _as_batch(image)
    xhat, _ = differentials(backend, state, images, [class_name])
    return backend.visual(latent_images(ups, proj, images, xhat)).embedding[0]

"""Learnable prompt state and the two prompt constructors.

A domain+class prompt is ``[dom] nu_1 .. nu_M [cls]`` and a domain-only prompt
is ``[dom] omega_1 .. omega_N``, where ``[dom]`` is a linear projection of the
image's patch-token mean and std. The domain token can also sit in the middle
of the context or at its end (just before ``[cls]``).
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .datasets import UNKNOWN
from .encoders import DTYPE, EncoderBackend, VisualOutput
from .errors import ConfigurationError, DataError

INIT_PHRASE = "Image of a"
POSITIONS = ("front", "middle", "end")


class PromptState(nn.Module):
    def __init__(self, nu: torch.Tensor, omega: torch.Tensor, d_v: int,
                 class_names: Sequence[str], class_table: torch.Tensor, position: str = "front"):
        super().__init__()
        if nu.ndim != 2 or omega.ndim != 2 or nu.shape[0] < 1 or omega.shape[0] < 1:
            raise ConfigurationError("context matrices need at least one row")
        if len(set(class_names)) != len(class_names):
            raise ConfigurationError("duplicate class names")
        if position not in POSITIONS:
            raise ConfigurationError(f"domain token position must be one of {POSITIONS}")
        d_tok = nu.shape[1]
        self.nu = nn.Parameter(nu.clone())
        self.omega = nn.Parameter(omega.clone())
        self.dom_proj = nn.Linear(2 * d_v, d_tok, dtype=DTYPE)
        self.class_names = list(class_names)
        self.register_buffer("class_table", class_table.clone())
        self.position = position
        self.d_v = d_v

    @property
    def d_tok(self) -> int:
        return self.nu.shape[1]

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DataError(f"class {name!r} not in the prompt vocabulary") from None

    def class_token(self, name: str) -> torch.Tensor:
        return self.class_table[self.class_index(name)]


def init_prompt_state(
    backend: EncoderBackend,
    class_names: Sequence[str],
    init_mode: str = "phrase",
    seed: int = 0,
    n_ctx_cls: int = 4,
    n_ctx_dom: int = 4,
    phrase: str = INIT_PHRASE,
    position: str = "front",
) -> PromptState:
    """Build a fresh state for ``class_names`` (which must include ``unknown``).

    ``phrase`` mode tiles the word embeddings of ``phrase`` into both
    contexts; ``gaussian`` mode draws them from N(0, I).
    """
    if len(set(class_names)) != len(class_names):
        raise ConfigurationError("duplicate class names")
    if UNKNOWN not in class_names:
        raise ConfigurationError(f"class vocabulary must contain {UNKNOWN!r}")
    g = torch.Generator().manual_seed(seed)
    d_tok = backend.d_tok
    if init_mode == "phrase":
        words = backend.phrase_embedding(phrase)
        nu = words[torch.arange(n_ctx_cls) % len(words)]
        omega = words[torch.arange(n_ctx_dom) % len(words)]
    elif init_mode == "gaussian":
        nu = torch.randn(n_ctx_cls, d_tok, generator=g, dtype=DTYPE)
        omega = torch.randn(n_ctx_dom, d_tok, generator=g, dtype=DTYPE)
    else:
        raise ConfigurationError(f"unknown init_mode {init_mode!r}")
    table = torch.stack([backend.name_embedding(c) for c in class_names])
    state = PromptState(nu, omega, backend.d_v, class_names, table, position)
    with torch.no_grad():
        w = torch.randn(state.dom_proj.weight.shape, generator=g, dtype=DTYPE)
        state.dom_proj.weight.copy_(w / math.sqrt(2 * backend.d_v))
        state.dom_proj.bias.zero_()
    return state


def domain_token(state: PromptState, vo: VisualOutput) -> torch.Tensor:
    """``(B, d_tok)`` domain tokens from patch-token statistics."""
    stats = torch.cat([vo.token_mean, vo.token_std], dim=-1)
    if stats.shape[-1] != state.dom_proj.in_features:
        raise DataError(f"visual statistics of width {stats.shape[-1]} do not fit a projector "
                        f"expecting {state.dom_proj.in_features}")
    return state.dom_proj(stats)


def _place(ctx: torch.Tensor, dt: torch.Tensor, position: str) -> torch.Tensor:
    """Insert ``dt`` (B, d) into the shared context (n, d); returns (B, n+1, d)."""
    B = dt.shape[0]
    ctx = ctx.unsqueeze(0).expand(B, -1, -1)
    dt = dt.unsqueeze(1)
    if position == "front":
        return torch.cat([dt, ctx], dim=1)
    if position == "end":
        return torch.cat([ctx, dt], dim=1)
    k = ctx.shape[1] // 2
    return torch.cat([ctx[:, :k], dt, ctx[:, k:]], dim=1)


def compose_dom_cls(state: PromptState, dt: torch.Tensor, classes: Sequence[str] | None = None) -> torch.Tensor:
    """Domain+class prompts.

    ``dt`` is ``(d_tok,)`` or ``(B, d_tok)``. Returns ``(B, K, M+2, d_tok)``
    for K classes (all of the vocabulary by default); with a 1-D ``dt`` and a
    single class name the leading axes are dropped.
    """
    single = dt.ndim == 1
    if isinstance(classes, str):
        idx = [state.class_index(classes)]
    else:
        idx = [state.class_index(c) for c in (classes if classes is not None else state.class_names)]
    dts = dt.unsqueeze(0) if single else dt
    head = _place(state.nu, dts, state.position)  # (B, M+1, d)
    cls = state.class_table[idx]  # (K, d)
    B, K = head.shape[0], len(idx)
    seq = torch.cat([head.unsqueeze(1).expand(B, K, -1, -1), cls.view(1, K, 1, -1).expand(B, K, 1, -1)], dim=2)
    if single and isinstance(classes, str):
        return seq[0, 0]
    return seq[0] if single else seq


def compose_dom(state: PromptState, dt: torch.Tensor) -> torch.Tensor:
    """Domain-only prompts, ``(N+1, d_tok)`` or ``(B, N+1, d_tok)``."""
    if dt.ndim == 1:
        return _place(state.omega, dt.unsqueeze(0), state.position)[0]
    return _place(state.omega, dt, state.position)

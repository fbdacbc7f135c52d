"""Shared test utilities."""

from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import torch


def fd_check(loss_fn, params, n_coords=3, h=1e-7, seed=0, floor=1e-4):
    """Compare autograd with central differences at a few coordinates per parameter.

    The default step is small because ReLU kinks in the upsampler make larger
    steps straddle activation boundaries (see ``frozen_relu`` for a kink-free
    alternative). Returns ``(name, flat_index, analytic, numeric, rel_err)``
    rows. Gradients smaller than ``floor`` are compared against ``floor``:
    below it the difference quotient is roundoff-limited.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    # parameters the loss does not reach have no grad; their analytic gradient is zero
    grads = {k: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    rows = []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = grads[name].view(-1)
            # probe the largest-gradient entry plus random ones
            picks = {int(g.abs().argmax())} | set(rng.choice(flat.numel(), size=min(n_coords, flat.numel()),
                                                             replace=False).tolist())
            for i in sorted(picks):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = g[i].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                rows.append((name, i, ana, num, rel))
    return rows


@contextmanager
def frozen_relu(module, record):
    """Freeze the ReLU masks used by ``module`` (a module namespace) at the current point.

    ``record()`` runs one forward pass to capture the masks in call order;
    inside the block every ``F.relu`` in ``module`` multiplies by its stored
    mask instead. The loss becomes smooth around the recording point while its
    value and autograd gradient there are unchanged, so central differences
    stay valid when a step would cross a kink.
    """
    real = torch.nn.functional
    masks, state = [], {"recording": True, "k": 0}

    def relu(x, inplace=False):
        if state["recording"]:
            masks.append((x > 0).to(x.dtype))
            return real.relu(x)
        m = masks[state["k"] % len(masks)]
        state["k"] += 1
        return x * m

    proxy = SimpleNamespace(**{k: getattr(real, k) for k in dir(real) if not k.startswith("__")})
    proxy.relu = relu
    saved = module.F
    module.F = proxy
    try:
        with torch.no_grad():
            record()
        state["recording"] = False
        yield
    finally:
        module.F = saved


def worst(rows):
    return max(rows, key=lambda r: r[-1])

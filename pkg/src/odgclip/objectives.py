"""Class posterior, contrastive loss, cross-domain consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .datasets import TrainBatch
from .encoders import DTYPE, images_to_tensor
from .errors import ConfigurationError, DataError
from .model import ForwardOut, ODGModel


@dataclass
class LossReport:
    l_con: torch.Tensor
    l_sem: torch.Tensor
    n_sem_pairs: int

    @property
    def total(self) -> torch.Tensor:
        return self.l_con + self.l_sem

    def as_dict(self) -> dict:
        return {"l_con": self.l_con.item(), "l_sem": self.l_sem.item(),
                "total": self.total.item(), "n_sem_pairs": self.n_sem_pairs}


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")


def log_posterior_from_cos(cos: torch.Tensor, tau: float) -> torch.Tensor:
    """Log-softmax of ``cos / tau`` over the last axis (max-subtracted)."""
    _check_tau(tau)
    logits = cos / tau
    logits = logits - logits.max(dim=-1, keepdim=True).values.detach()
    return logits - torch.logsumexp(logits, dim=-1, keepdim=True)


def posterior_from_cos(cos: torch.Tensor, tau: float) -> torch.Tensor:
    return log_posterior_from_cos(cos, tau).exp()


def class_posterior(model: ODGModel, images, tau: float) -> torch.Tensor:
    """``(B, |Y_aug|)`` posteriors; every class scores its own latent image."""
    _check_tau(tau)
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
    return posterior_from_cos(model(x).cos, tau)


def _batch_tensors(batch: TrainBatch) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    if len(batch) == 0:
        raise DataError("empty batch")
    return images_to_tensor(batch.images()), torch.as_tensor(batch.labels()), batch.domains()


def con_from_forward(out: ForwardOut, labels: torch.Tensor, tau: float) -> torch.Tensor:
    logp = log_posterior_from_cos(out.cos, tau)
    return F.nll_loss(logp, labels)


def sem_pairs(labels, domains) -> list[tuple[int, int]]:
    """Index pairs sharing a label but coming from different (pseudo-)domains."""
    labels = [int(y) for y in labels]
    return [(i, j) for i in range(len(labels)) for j in range(i + 1, len(labels))
            if labels[i] == labels[j] and domains[i] != domains[j]]


def sem_from_forward(out: ForwardOut, labels: torch.Tensor, domains) -> tuple[torch.Tensor, int]:
    pairs = sem_pairs(labels, domains)
    if not pairs:
        return torch.zeros((), dtype=DTYPE), 0
    own = out.xhat[torch.arange(len(labels)), labels].abs()  # |xhat| at each sample's label
    i = torch.tensor([p[0] for p in pairs])
    j = torch.tensor([p[1] for p in pairs])
    dist = 1.0 - F.cosine_similarity(own[i], own[j], dim=-1)
    return dist.mean(), len(pairs)


def loss_con(model: ODGModel, batch: TrainBatch, tau: float) -> torch.Tensor:
    """Mean negative log posterior of the true label (pseudo-open -> ``unknown``)."""
    _check_tau(tau)
    x, y, _ = _batch_tensors(batch)
    return con_from_forward(model(x), y, tau)


def loss_sem(model: ODGModel, batch: TrainBatch) -> torch.Tensor:
    """Mean cosine distance of |differentials| over same-label, cross-domain pairs; 0 if none."""
    x, y, d = _batch_tensors(batch)
    return sem_from_forward(model(x), y, d)[0]


def total_loss(model: ODGModel, batch: TrainBatch, tau: float, use_sem: bool = True) -> LossReport:
    _check_tau(tau)
    x, y, d = _batch_tensors(batch)
    out = model(x)
    l_con = con_from_forward(out, y, tau)
    if use_sem:
        l_sem, n = sem_from_forward(out, y, d)
    else:
        l_sem, n = torch.zeros((), dtype=DTYPE), 0
    return LossReport(l_con, l_sem, n)

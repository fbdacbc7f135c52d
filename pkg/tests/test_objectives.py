import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import fd_check, worst
from odgclip.datasets import OpenSample, TrainBatch, sample_batch, source_pool
from odgclip.encoders import DTYPE
from odgclip.errors import ConfigurationError, DataError
from odgclip.model import ForwardOut
from odgclip.objectives import (LossReport, class_posterior, log_posterior_from_cos, loss_con, loss_sem,
                                posterior_from_cos, sem_from_forward, sem_pairs, total_loss)


def test_two_class_softmax_oracle():
    p = posterior_from_cos(torch.tensor([[0.01, 0.0]], dtype=DTYPE), 0.01)
    assert p[0].tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_uniform_on_equal_similarity():
    p = posterior_from_cos(torch.full((1, 7), 0.3, dtype=DTYPE), 0.01)
    assert torch.allclose(p, torch.full((1, 7), 1 / 7, dtype=DTYPE))
    # mean NLL at uniform posterior is ln 7
    assert -log_posterior_from_cos(torch.zeros(1, 7, dtype=DTYPE), 0.01)[0, 0].item() == pytest.approx(1.9459, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1, 1)), st.floats(-50, 50), st.floats(0.005, 2.0))
def test_posterior_normalized_and_shift_invariant(cos, shift, tau):
    c = torch.as_tensor(cos)
    p = posterior_from_cos(c, tau)
    assert torch.allclose(p.sum(-1), torch.ones(3, dtype=DTYPE), atol=1e-6)
    q = posterior_from_cos(c + shift * tau, tau)  # shifts every logit by the same amount
    assert torch.allclose(p, q, atol=1e-9)


def test_tau_must_be_positive():
    with pytest.raises(ConfigurationError):
        posterior_from_cos(torch.zeros(1, 2, dtype=DTYPE), 0.0)


def test_sem_pairs():
    assert sem_pairs([0, 0, 1, 0], ["a", "b", "a", "a"]) == [(0, 1), (1, 3)]
    assert sem_pairs([0, 1], ["a", "b"]) == []


def _fake_out(xhat):
    b, k, _ = xhat.shape
    z = torch.zeros(b, k, dtype=DTYPE)
    return ForwardOut(xhat, xhat, xhat, z)


def test_sem_zero_for_identical_and_no_pairs():
    x = torch.randn(1, 2, 8, dtype=DTYPE).expand(3, 2, 8)
    l, n = sem_from_forward(_fake_out(x), torch.tensor([1, 1, 1]), ["a", "b", "c"])
    assert n == 3 and l.item() == pytest.approx(0.0, abs=1e-12)
    l, n = sem_from_forward(_fake_out(x), torch.tensor([0, 1, 1]), ["a", "b", "b"])
    assert n == 0 and l.item() == 0.0


def test_sem_uses_absolute_values():
    x = torch.randn(1, 1, 8, dtype=DTYPE)
    pair = torch.cat([x, -x])  # same magnitude, opposite sign
    l, _ = sem_from_forward(_fake_out(pair), torch.tensor([0, 0]), ["a", "b"])
    assert l.item() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 2, 6), elements=st.floats(-3, 3)))
def test_sem_range(x):
    l, n = sem_from_forward(_fake_out(torch.as_tensor(x)), torch.tensor([0, 0, 1, 1]), ["a", "b", "a", "b"])
    assert n == 2 and -1e-12 <= l.item() <= 1.0 + 1e-12


def test_report_total():
    r = LossReport(torch.tensor(0.5, dtype=DTYPE), torch.tensor(0.2, dtype=DTYPE), 3)
    assert r.total.item() == pytest.approx(0.7)
    assert r.as_dict()["total"] == pytest.approx(0.7)


def _batch(small_suite, small_split, model, n=8):
    real = source_pool(small_suite, small_split)
    rng = np.random.default_rng(0)
    pool = [OpenSample(rng.random((32, 32, 3)), d) for d in small_split.sources for _ in range(2)]
    return sample_batch(small_split, real, pool, n, 0.25, rng)


def test_posterior_over_augmented_labels(model, small_suite, small_split):
    b = _batch(small_suite, small_split, model)
    p = class_posterior(model, b.images(), 0.01)
    assert p.shape == (8, 5)
    assert torch.allclose(p.sum(1), torch.ones(8, dtype=DTYPE), atol=1e-6)


def test_total_loss_components(model, small_suite, small_split):
    b = _batch(small_suite, small_split, model)
    r = total_loss(model, b, 0.01)
    assert r.total.item() == pytest.approx(loss_con(model, b, 0.01).item() + loss_sem(model, b).item())
    assert r.n_sem_pairs > 0
    off = total_loss(model, b, 0.01, use_sem=False)
    assert off.l_sem.item() == 0.0 and off.total.item() == pytest.approx(off.l_con.item())


def test_empty_batch(model):
    with pytest.raises(DataError):
        loss_con(model, TrainBatch([], []), 0.01)


@pytest.mark.parametrize("which", ["con", "sem"])
def test_gradients_match_finite_differences(model, small_suite, small_split, which):
    b = _batch(small_suite, small_split, model, n=4)
    fn = (lambda: loss_con(model, b, 0.05)) if which == "con" else (lambda: loss_sem(model, b))
    params = model.trainables()
    if which == "sem":  # the latent path does not reach L_sem
        params = {k: v for k, v in params.items() if k.startswith("prompt.")}
    rows = fd_check(fn, params, n_coords=1)
    assert worst(rows)[-1] < 1e-4, worst(rows)


def test_ln7_mean_nll_when_logits_tie():
    cos = torch.zeros(4, 7, dtype=DTYPE)
    logp = log_posterior_from_cos(cos, 0.01)
    nll = torch.nn.functional.nll_loss(logp, torch.tensor([0, 3, 6, 2]))
    assert nll.item() == pytest.approx(math.log(7), abs=1e-12)

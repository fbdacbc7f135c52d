import pytest
import torch

from odgclip.encoders import DTYPE, VisualOutput
from odgclip.errors import ConfigurationError, DataError
from odgclip.promptspace import compose_dom, compose_dom_cls, domain_token, init_prompt_state

CLASSES = ["cat", "dog", "unknown"]


def _vo(b=2, d=16):
    g = torch.Generator().manual_seed(0)
    return VisualOutput(torch.zeros(b, d, dtype=DTYPE), torch.randn(b, d, generator=g, dtype=DTYPE),
                        torch.rand(b, d, generator=g, dtype=DTYPE))


def test_init_requires_unknown(backend):
    with pytest.raises(ConfigurationError):
        init_prompt_state(backend, ["cat", "dog"])
    with pytest.raises(ConfigurationError):
        init_prompt_state(backend, ["cat", "cat", "unknown"])
    with pytest.raises(ConfigurationError):
        init_prompt_state(backend, CLASSES, init_mode="zeros")


def test_phrase_init_tiles_words(backend):
    st = init_prompt_state(backend, CLASSES, n_ctx_cls=4, n_ctx_dom=5)
    words = backend.phrase_embedding("Image of a")
    assert torch.equal(st.nu[:3], words) and torch.equal(st.nu[3], words[0])
    assert st.omega.shape == (5, 16)


def test_gaussian_init_seeded(backend):
    a = init_prompt_state(backend, CLASSES, init_mode="gaussian", seed=1)
    b = init_prompt_state(backend, CLASSES, init_mode="gaussian", seed=1)
    c = init_prompt_state(backend, CLASSES, init_mode="gaussian", seed=2)
    assert torch.equal(a.nu, b.nu) and not torch.equal(a.nu, c.nu)


def test_domain_token_is_linear_in_stats(backend):
    st = init_prompt_state(backend, CLASSES)
    vo = _vo()
    dt = domain_token(st, vo)
    ref = torch.cat([vo.token_mean, vo.token_std], 1) @ st.dom_proj.weight.T + st.dom_proj.bias
    assert dt.shape == (2, 16) and torch.allclose(dt, ref)


def test_domain_token_width_mismatch(backend):
    st = init_prompt_state(backend, CLASSES)
    with pytest.raises(DataError):
        domain_token(st, _vo(d=8))


@pytest.mark.parametrize("position,slot", [("front", 0), ("middle", 2), ("end", 4)])
def test_prompt_layout(backend, position, slot):
    st = init_prompt_state(backend, CLASSES, position=position)
    dt = torch.full((16,), 7.0, dtype=DTYPE)
    seq = compose_dom_cls(st, dt, "dog")
    assert seq.shape == (6, 16)  # dom + 4 context + class
    assert torch.equal(seq[slot], dt)
    assert torch.equal(seq[-1], st.class_token("dog"))
    ctx = torch.cat([seq[:slot], seq[slot + 1: -1]])
    assert torch.equal(ctx, st.nu)
    dom = compose_dom(st, dt)
    assert dom.shape == (5, 16) and torch.equal(dom[slot], dt)


def test_batched_compose(backend):
    st = init_prompt_state(backend, CLASSES)
    dt = torch.randn(4, 16, dtype=DTYPE)
    assert compose_dom_cls(st, dt).shape == (4, 3, 6, 16)
    assert compose_dom_cls(st, dt, ["cat", "unknown"]).shape == (4, 2, 6, 16)
    assert compose_dom(st, dt).shape == (4, 5, 16)
    with pytest.raises(DataError):
        compose_dom_cls(st, dt, ["horse"])


def test_class_table_is_frozen(backend):
    st = init_prompt_state(backend, CLASSES)
    names = [n for n, _ in st.named_parameters()]
    assert "class_table" not in names
    assert set(names) == {"nu", "omega", "dom_proj.weight", "dom_proj.bias"}

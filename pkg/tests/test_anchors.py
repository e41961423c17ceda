import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gla.anchors import (DEFAULT_PROMPTS, EXTERNAL_ID, STUB_ID, ExternalEmbeddings, ProjectionHead, StubTextEncoder,
                         TextAnchorSet, alignment_loss, cosine_logits, embed_prompts, make_provider,
                         project_and_normalize)
from gla.errors import DegenerateProjectionError, ValidationError


@pytest.fixture(scope="module")
def anchors():
    return embed_prompts(DEFAULT_PROMPTS)


# -- embedding ------------------------------------------------------------------

def test_stub_is_deterministic_and_unit_norm():
    enc = StubTextEncoder()
    a, b = enc("a person walking"), enc("a person walking")
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6
    assert a.shape == (512,)


@settings(max_examples=30, deadline=None)
@given(st.text(min_size=1, max_size=40))
def test_stub_norm_for_any_prompt(prompt):
    assert abs(np.linalg.norm(StubTextEncoder(64)(prompt)) - 1.0) < 1e-6


def test_stub_similarity_of_default_prompts(anchors):
    cos = float(anchors.vectors[0] @ anchors.vectors[1])
    assert -0.5 < cos < 0.5
    assert anchors.provider_id == STUB_ID


def test_external_provider(tmp_path):
    path = tmp_path / "emb.json"
    path.write_text(json.dumps({DEFAULT_PROMPTS[0]: [3.0, 4.0, 0.0], DEFAULT_PROMPTS[1]: [0.0, 0.0, 2.0]}))
    a = embed_prompts(DEFAULT_PROMPTS, make_provider("external", 3, path))
    np.testing.assert_allclose(a.vectors, [[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]])
    assert a.provider_id == EXTERNAL_ID


def test_external_missing_prompt_is_named(tmp_path):
    path = tmp_path / "emb.json"
    path.write_text(json.dumps({DEFAULT_PROMPTS[0]: [1.0, 0.0]}))
    with pytest.raises(KeyError, match="person present"):
        embed_prompts(DEFAULT_PROMPTS, ExternalEmbeddings(path, 2))


def test_external_wrong_length(tmp_path):
    path = tmp_path / "emb.json"
    path.write_text(json.dumps({p: [1.0, 0.0] for p in DEFAULT_PROMPTS}))
    with pytest.raises(ValidationError):
        embed_prompts(DEFAULT_PROMPTS, ExternalEmbeddings(path, 3))


def test_prompt_count_and_provider_validation():
    with pytest.raises(ValidationError):
        embed_prompts(["only one"])
    with pytest.raises(ValidationError):
        embed_prompts(["a", ""])
    with pytest.raises(ValidationError):
        make_provider("clip")


def test_anchor_set_is_frozen(anchors):
    with pytest.raises(ValueError):
        anchors.vectors[0, 0] = 1.0
    with pytest.raises(Exception):
        anchors.prompts = ("x", "y")
    with pytest.raises(ValidationError):
        TextAnchorSet(("a", "b"), np.ones((2, 4)), STUB_ID)


# -- projection ------------------------------------------------------------------------

def test_identity_projection_example():
    mu = torch.tensor([3.0, 4.0, 0.0, 0.0])
    out = project_and_normalize(mu, torch.eye(4))
    np.testing.assert_allclose(out.numpy(), [0.6, 0.8, 0.0, 0.0], atol=1e-7)


def test_zero_projection_is_degenerate():
    with pytest.raises(DegenerateProjectionError):
        project_and_normalize(torch.zeros(3), torch.randn(5, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_unit_norm_and_scale_invariance(seed, c):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(16, 4, generator=g, dtype=torch.float64)
    mu = torch.randn(4, generator=g, dtype=torch.float64)
    a = project_and_normalize(mu, W)
    b = project_and_normalize(c * mu, W)
    assert abs(a.norm().item() - 1.0) < 1e-6
    torch.testing.assert_close(a, b, rtol=1e-9, atol=1e-12)
    t = torch.nn.functional.normalize(torch.randn(2, 16, generator=g, dtype=torch.float64), dim=1)
    la, lb = cosine_logits(a, t, 10.0), cosine_logits(b, t, 10.0)
    torch.testing.assert_close(la, lb, rtol=1e-9, atol=1e-9)
    assert la.argmax() == lb.argmax()


def test_head_initialization():
    head = ProjectionHead(32)
    assert head.weight.shape == (512, 32)
    assert head.tau.item() == pytest.approx(10.0)
    assert ProjectionHead(4, 8, freeze_tau=True).log_tau.requires_grad is False


# -- logits ---------------------------------------------------------------------------------

def test_logit_examples(anchors):
    t = anchors.tensor(torch.float64)
    assert cosine_logits(t[0], anchors, 10.0)[0].item() == pytest.approx(10.0, abs=1e-9)
    assert cosine_logits(-t[1], anchors, 10.0)[1].item() == pytest.approx(-10.0, abs=1e-9)
    ortho = t[0] - (t[0] @ t[1]) * t[1]
    ortho = ortho / ortho.norm()
    assert cosine_logits(ortho, anchors, 10.0)[1].item() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_logit_bound(seed, tau):
    g = torch.Generator().manual_seed(seed)
    mu_bar = torch.nn.functional.normalize(torch.randn(8, generator=g, dtype=torch.float64), dim=0)
    t = torch.nn.functional.normalize(torch.randn(2, 8, generator=g, dtype=torch.float64), dim=1)
    assert torch.all(cosine_logits(mu_bar, t, tau).abs() <= tau * (1 + 1e-12))


def test_no_gradient_reaches_anchors():
    t = torch.nn.functional.normalize(torch.randn(2, 6), dim=1).requires_grad_(True)
    mu_bar = torch.nn.functional.normalize(torch.randn(6), dim=0).requires_grad_(True)
    cosine_logits(mu_bar, t, 10.0).sum().backward()
    assert t.grad is None and mu_bar.grad is not None


# -- alignment loss ----------------------------------------------------------------------------

@pytest.mark.parametrize("y", [0, 1])
def test_uniform_logits_give_ln2(y):
    assert alignment_loss(torch.zeros(2, dtype=torch.float64), y).item() == pytest.approx(math.log(2), abs=1e-12)


def test_saturated_logits():
    s = torch.tensor([10.0, -10.0], dtype=torch.float64)
    assert alignment_loss(s, 0).item() == pytest.approx(-math.log(1 / (1 + math.exp(-20))), rel=1e-6)
    assert alignment_loss(s, 1).item() == pytest.approx(20 + math.log1p(math.exp(-20)), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.integers(0, 1))
def test_softmax_ce_gradient_identity(s0, s1, y):
    s = torch.tensor([s0, s1], dtype=torch.float64, requires_grad=True)
    alignment_loss(s, y).backward()
    expected = torch.softmax(s.detach(), 0) - torch.nn.functional.one_hot(torch.tensor(y), 2).double()
    torch.testing.assert_close(s.grad, expected, rtol=1e-9, atol=1e-12)
    h = 1e-6
    for k in range(2):
        d = torch.zeros(2, dtype=torch.float64)
        d[k] = h
        fd = (alignment_loss(s.detach() + d, y) - alignment_loss(s.detach() - d, y)).item() / (2 * h)
        assert fd == pytest.approx(expected[k].item(), abs=1e-6)


def test_alignment_loss_rejects_bad_labels():
    with pytest.raises(ValidationError):
        alignment_loss(torch.zeros(2), 2)

import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from deend.config import TrainConfig, WatermarkMessage
from deend.metrics import (
    bit_accuracy,
    coupling_consistency,
    coupling_score,
    decoder_needed_map,
    encoded_residual_map,
    normalize_map,
    psnr,
)
from deend.networks import Decoder, make_variant
from oracles import coordinate_gradient_error


def test_psnr_examples():
    x = torch.rand(3, 16, 16) * 0.5
    assert psnr(x, x) == 100.0
    q = torch.round(x * 255) / 255
    assert psnr(q, q + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert psnr(q, q + 1 / 255) == pytest.approx(48.13, abs=0.005)
    assert psnr(torch.zeros(3, 8, 8), torch.ones(3, 8, 8)) == 0.0
    with pytest.raises(ValueError):
        psnr(x, x[:, :8])


def test_psnr_is_symmetric():
    a, b = torch.rand(3, 16, 16), torch.rand(3, 16, 16)
    assert psnr(a, b) == psnr(b, a)


def test_bit_accuracy_examples():
    assert bit_accuracy([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert bit_accuracy([1, 0, 1, 1], [0, 1, 0, 0]) == 0.0
    assert bit_accuracy([1, 0, 1, 1], [1, 0, 1, 0]) == 0.75
    assert bit_accuracy(WatermarkMessage((1, 0)), WatermarkMessage((1, 1))) == 0.5
    with pytest.raises(ValueError):
        bit_accuracy([1, 0], [1, 0, 1])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=64), st.data())
def test_bit_accuracy_complement_property(a, data):
    b = data.draw(st.lists(st.integers(0, 1), min_size=len(a), max_size=len(a)))
    assert bit_accuracy(a, b) + bit_accuracy(a, [1 - v for v in b]) == pytest.approx(1.0)


def test_decoder_needed_map_of_constant_decoder_is_zero():
    def constant(x):
        return torch.ones(x.shape[0], 4, dtype=x.dtype) + 0 * x.sum()

    g = decoder_needed_map(constant, torch.rand(3, 8, 8), torch.tensor([1.0, 0, 1, 0]))
    assert torch.equal(g, torch.zeros(3, 8, 8))


def test_decoder_needed_map_linear_closed_form():
    L, shape = 5, (3, 8, 8)
    W = torch.randn(L, 3 * 8 * 8, dtype=torch.float64)
    x = torch.rand(shape, dtype=torch.float64)
    m = torch.tensor([1.0, 0, 1, 1, 0], dtype=torch.float64)

    def linear(batch):
        return batch.flatten(1) @ W.T

    expected = (2 / L) * W.T @ (W @ x.flatten() - m)
    assert torch.allclose(decoder_needed_map(linear, x, m), expected.view(shape), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("unions", [3, 4, 5, 6, 7])
def test_decoder_needed_map_matches_finite_differences(unions):
    torch.manual_seed(unions)
    dec = Decoder(16, 16, 3, 4, unions).double()
    dec.train()
    with torch.no_grad():
        dec(torch.rand(4, 3, 16, 16, dtype=torch.float64))
    dec.eval()
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    m = torch.tensor([1.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    g = decoder_needed_map(dec, x, m)

    def loss(t):
        return ((dec(t[None]) - m) ** 2).mean()

    # the map must be the gradient of the per-image loss...
    assert coordinate_gradient_error(loss, x, k=20) < 1e-4
    # ...and decoder_needed_map must return exactly that gradient
    xg = x.clone().requires_grad_(True)
    (ref,) = torch.autograd.grad(loss(xg), xg)
    assert torch.equal(g, ref)
    assert not dec.training


def test_decoder_needed_map_restores_training_mode():
    dec = Decoder(16, 16, 3, 4)
    dec.train()
    decoder_needed_map(dec, torch.rand(3, 16, 16), torch.zeros(4))
    assert dec.training
    with pytest.raises(ValueError):
        decoder_needed_map(dec, torch.rand(3, 16, 16), torch.zeros(5))


def test_encoded_residual_map():
    torch.manual_seed(0)
    bundle = make_variant(TrainConfig(H=16, W=16, L=8)).eval()
    host = torch.rand(3, 16, 16) * 0.5 + 0.25
    m = torch.randint(0, 2, (8,)).float()
    assert torch.equal(encoded_residual_map(bundle, host, m, alpha=0.0), torch.zeros(3, 16, 16))
    r = encoded_residual_map(bundle, host, m, alpha=0.5)
    with torch.no_grad():
        raw = bundle.residual(host[None], m[None])[0]
    inside = ((host + 0.5 * raw) > 0) & ((host + 0.5 * raw) < 1)
    assert torch.allclose(r[inside], (0.5 * raw)[inside], atol=1e-6)
    # the decoder-guided encoder depends on the host
    nudged = host.clone()
    nudged[0, 5, 5] += 0.1
    assert (encoded_residual_map(bundle, nudged, m) - encoded_residual_map(bundle, host, m)).abs().max() > 0


def test_normalize_map():
    assert torch.equal(normalize_map(torch.tensor([-2.0, 0.0, 2.0])), torch.tensor([1.0, 0.0, 1.0]))
    assert torch.equal(normalize_map(torch.full((3, 4, 4), 7.0)), torch.zeros(3, 4, 4))
    n = normalize_map(torch.randn(3, 8, 8))
    assert n.min() == 0 and n.max() == 1
    assert torch.allclose(normalize_map(n), n)


def test_coupling_consistency_examples():
    a = torch.rand(3, 8, 8)
    assert coupling_consistency(a, a) == pytest.approx(1.0)
    assert coupling_consistency(a, 1 - a) == pytest.approx(-1.0)
    assert coupling_consistency(a, torch.zeros_like(a)) == 0.0
    with pytest.raises(ValueError):
        coupling_consistency(a, a[:2])


def test_coupling_consistency_disjoint_supports_by_hand():
    r = torch.tensor([1.0, 1.0, 0.0, 0.0])
    g = torch.tensor([0.0, 0.0, 1.0, 1.0])
    # centered: [.5, .5, -.5, -.5] and [-.5, -.5, .5, .5]
    rc = [0.5, 0.5, -0.5, -0.5]
    gc = [-0.5, -0.5, 0.5, 0.5]
    dot = sum(x * y for x, y in zip(rc, gc))
    expected = dot / (math.sqrt(sum(x * x for x in rc)) * math.sqrt(sum(y * y for y in gc)))
    assert coupling_consistency(r, g) == pytest.approx(expected)
    assert expected == -1.0
    # partially overlapping support
    g2 = torch.tensor([1.0, 0.0, 1.0, 0.0])
    assert coupling_consistency(r, g2) == pytest.approx(0.0)


def test_consistency_invariant_to_positive_rescaling():
    r, g = torch.randn(3, 8, 8), torch.randn(3, 8, 8)
    base = coupling_consistency(normalize_map(r), normalize_map(g))
    assert coupling_consistency(normalize_map(2 * r), normalize_map(g)) == pytest.approx(base, abs=1e-6)
    assert coupling_consistency(normalize_map(r), normalize_map(0.3 * g)) == pytest.approx(base, abs=1e-6)


def test_coupling_score_in_range():
    torch.manual_seed(0)
    bundle = make_variant(TrainConfig(H=16, W=16, L=8)).eval()
    s = coupling_score(bundle, torch.rand(3, 16, 16), torch.randint(0, 2, (8,)).float())
    assert -1 <= s <= 1

import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import pytest

from padtok.errors import RangeError, ShapeError
from padtok.quantizer import QuantizedSequence, VectorQuantizer, nearest_codes, straight_through, truncate, vq_loss


def brute_force(latents, entries):
    out = []
    for z in latents.reshape(-1, latents.shape[-1]).double():
        best, best_d = 0, None
        for j, e in enumerate(entries.double()):
            d = float(((z - e) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return torch.tensor(out).reshape(latents.shape[:-1])


def test_two_entry_examples():
    entries = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    assert nearest_codes(torch.tensor([[0.2, 0.1]]), entries).tolist() == [0]
    # equidistant: lowest index wins
    assert nearest_codes(torch.tensor([[0.5, 0.5]]), entries).tolist() == [0]


def test_tie_goes_to_lowest_index_among_duplicates():
    entries = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert nearest_codes(torch.tensor([[0.0, 0.9]]), entries).tolist() == [1]


def test_matches_brute_force_64():
    g = torch.Generator().manual_seed(0)
    entries = torch.randn(32, 4, generator=g)
    latents = torch.randn(64, 4, generator=g)
    assert torch.equal(nearest_codes(latents, entries), brute_force(latents, entries))


def test_brute_force_1000_instances():
    g = torch.Generator().manual_seed(2)
    for _ in range(1000):
        k, d = int(torch.randint(1, 33, (1,), generator=g)), int(torch.randint(1, 9, (1,), generator=g))
        entries = torch.randn(k, d, generator=g)
        latents = torch.randn(3, d, generator=g)
        assert torch.equal(nearest_codes(latents, entries), brute_force(latents, entries))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_brute_force_property(k, length, d, seed):
    g = torch.Generator().manual_seed(seed)
    entries = torch.randn(k, d, generator=g)
    latents = torch.randn(2, length, d, generator=g)
    assert torch.equal(nearest_codes(latents, entries), brute_force(latents, entries))


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        nearest_codes(torch.zeros(3, 4), torch.zeros(5, 3))


@pytest.mark.parametrize("l2", [False, True])
def test_quantize_contract(l2):
    q = VectorQuantizer(16, 4, l2_norm=l2)
    z = q.project(torch.randn(2, 5, 4))
    seq = q.quantize(z)
    assert seq.codes.shape == (2, 5) and seq.retained_k == 5
    assert torch.equal(seq.embeddings, q.table()[seq.codes])
    assert int(q.usage_counts.sum()) == 10
    # idempotence
    assert torch.equal(q.codes_for(seq.embeddings), seq.codes)
    assert int(q.usage_counts.sum()) == 10
    assert torch.equal(q.lookup(seq.codes), seq.embeddings)


def test_codebook_init_scale():
    torch.manual_seed(0)
    q = VectorQuantizer(4096, 8)
    assert abs(float(q.entries.detach().std()) - 8 ** -0.5) < 0.01


def test_lookup_range():
    q = VectorQuantizer(8, 2)
    with pytest.raises(RangeError):
        q.lookup(torch.tensor([[8]]))


def test_straight_through_forward_exact():
    z = torch.randn(3, 4, requires_grad=True)
    e = torch.randn(3, 4)
    assert torch.equal(straight_through(z, e), e)


def test_straight_through_sum_gives_ones():
    z = torch.randn(3, 4, requires_grad=True)
    straight_through(z, torch.randn(3, 4)).sum().backward()
    assert torch.equal(z.grad, torch.ones(3, 4))


def test_straight_through_square_uses_quantized():
    z = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    e = torch.randn(3, 4, dtype=torch.float64)
    straight_through(z, e).pow(2).sum().backward()
    assert torch.equal(z.grad, 2 * e)


def test_straight_through_shape_check():
    with pytest.raises(ShapeError):
        straight_through(torch.zeros(2, 3), torch.zeros(3, 2))


def test_vq_loss_values():
    assert float(vq_loss(torch.ones(2, 3, 4), torch.ones(2, 3, 4))) == 0.0
    z = torch.tensor([[[1.0]]])
    e = torch.tensor([[[0.0]]])
    assert float(vq_loss(z, e, 0.25)) == pytest.approx(1.25, abs=1e-12)


def test_vq_commitment_gradient_finite_difference():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(2, 3, 4, dtype=torch.float64, generator=g, requires_grad=True)
    e = torch.randn(2, 3, 4, dtype=torch.float64, generator=g)
    beta = 0.25
    vq_loss(z, e, beta).backward()

    def commit(v):
        return float(beta * (v - e).pow(2).sum(-1).mean())

    h = 1e-6
    fd = torch.zeros_like(z)
    flat = z.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        fd.view(-1)[i] = (commit(up.view_as(z)) - commit(down.view_as(z))) / (2 * h)
    assert torch.allclose(z.grad, fd, rtol=1e-5, atol=1e-9)


def test_truncate():
    codes = torch.arange(16).reshape(2, 8)
    seq = QuantizedSequence(codes, torch.randn(2, 8, 3), 8)
    assert truncate(seq, 8).codes.tolist() == codes.tolist()
    t3 = truncate(seq, 3)
    assert t3.codes.tolist() == codes[:, :3].tolist() and t3.retained_k == 3
    for k1 in range(1, 9):
        for k2 in range(1, k1 + 1):
            a = truncate(truncate(seq, k1), k2)
            b = truncate(seq, min(k1, k2))
            assert torch.equal(a.codes, b.codes) and torch.equal(a.embeddings, b.embeddings)
    with pytest.raises(RangeError):
        truncate(seq, 0)
    with pytest.raises(RangeError):
        truncate(seq, 9)

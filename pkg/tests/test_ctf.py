import itertools

import numpy as np
import pytest
import torch

from ctfgan.ctf import (
    CtfExtractor,
    GlhTrace,
    LabelEmbedding,
    assemble_ctf,
    embed_labels,
    extract_all_ctfs,
)
from ctfgan.errors import ContractError, LabelDomainError
from ctfgan.transfer import TransferGenerator

from oracles import spatial_first, spatial_inner


def test_embed_zero_and_identity_tables():
    g, b = torch.randn(3), torch.randn(3)
    assert torch.equal(embed_labels(g, b, 1, torch.zeros(8, 5), 2), torch.zeros(5))
    out = embed_labels(g, b, 1, torch.eye(8), 2)
    assert torch.equal(out, torch.cat([g, b, torch.tensor([0.0, 1.0])]))


def test_embed_hand_matrix_product():
    g, b = torch.tensor([0.5]), torch.tensor([-1.0])
    weight = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    # concat = [0.5, -1, 1]
    assert embed_labels(g, b, 0, weight, 1).tolist() == [0.5 - 3 + 5, 1 - 4 + 6]


def test_embed_batched_and_errors():
    g, b = torch.randn(4, 2), torch.randn(4, 2)
    w = torch.randn(7, 3)
    out = embed_labels(g, b, torch.tensor([0, 1, 2, 0]), w, 3)
    assert out.shape == (4, 3)
    assert torch.allclose(out[1], embed_labels(g[1], b[1], 1, w, 3))
    with pytest.raises(ContractError):
        embed_labels(g, b, torch.tensor([0, 1, 2, 0]), torch.randn(6, 3), 3)
    with pytest.raises(LabelDomainError):
        embed_labels(g, b, torch.tensor([0, 1, 3, 0]), w, 3)


@pytest.mark.parametrize("t,e,res", list(itertools.product([1, 2, 5], [1, 4], [4, 8])))
def test_channel_arithmetic_grid(t, e, res):
    maps = torch.randn(2, t, res, res)
    vec = torch.randn(2, e)
    ctf = assemble_ctf(maps, vec, 1)
    assert ctf.values.shape == (2, t + e, res, res)
    assert ctf.num_difference_channels == t and ctf.num_embed_channels == e
    assert torch.equal(ctf.difference_maps, maps)
    planes = ctf.values[:, t:]
    assert (planes.var(dim=(2, 3)) == 0).all()
    assert torch.equal(planes[:, :, 0, 0], vec)


def test_assemble_single_and_zero_embedding():
    ctf = assemble_ctf(torch.randn(2, 4, 4), torch.zeros(3), 2)
    assert ctf.values.shape == (1, 5, 4, 4)
    assert ctf.block_index == 2 and ctf.resolution == (4, 4)
    assert torch.equal(ctf.values[:, 2:], torch.zeros(1, 3, 4, 4))
    assert torch.equal(ctf.zeros_like().values, torch.zeros(1, 5, 4, 4))
    with pytest.raises(ContractError):
        assemble_ctf(torch.randn(4, 4), torch.zeros(3), 1)
    with pytest.raises(ContractError):
        assemble_ctf(torch.randn(2, 1, 4, 4), torch.zeros(3, 2), 1)
    with pytest.raises(ContractError):
        assemble_ctf(torch.randn(1, 1, 4, 4), torch.zeros(1, 0), 1)


def _hand_trace():
    g = torch.Generator().manual_seed(7)
    f1 = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    f2 = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    params = [
        (torch.randn(1, 2, generator=g, dtype=torch.float64), torch.randn(1, 2, generator=g, dtype=torch.float64)),
        (torch.randn(1, 3, generator=g, dtype=torch.float64), torch.randn(1, 3, generator=g, dtype=torch.float64)),
    ]
    lq = torch.rand(1, 3, 2, 2, generator=g, dtype=torch.float64) * 2 - 1
    trace = GlhTrace([f1, f2], params, torch.tensor([0]), torch.tensor([1]), 2)
    return trace, lq


def test_two_block_extraction_matches_composed_oracle():
    trace, lq = _hand_trace()
    tables = [LabelEmbedding(2, 2, 3).double(), LabelEmbedding(3, 2, 3).double()]
    ctfs = extract_all_ctfs(trace, lq, tables)
    assert [c.block_index for c in ctfs] == [1, 2]
    assert ctfs[0].resolution == (4, 4) and ctfs[1].resolution == (8, 8)

    f1, f2 = (f[0].numpy() for f in trace.features)
    h1 = spatial_first(f1, lq[0].numpy())
    h2 = spatial_inner(f2, f1)
    for ctf, h, table, (gm, bt) in zip(ctfs, (h1, h2), tables, trace.cbn2_params):
        onehot = np.array([0.0, 1.0])
        vec = np.concatenate([gm[0].numpy(), bt[0].numpy(), onehot]) @ table.weight.detach().numpy()
        expected = np.concatenate([h, np.broadcast_to(vec[:, None, None], (3,) + h.shape[1:])])
        assert np.abs(ctf.values[0].detach().numpy() - expected).max() <= 1e-5


def test_single_block_and_fixed_point():
    lq = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    gray = (lq[:, 0] * 0.299 + lq[:, 1] * 0.587 + lq[:, 2] * 0.114).unsqueeze(1)
    f1 = gray.expand(1, 2, 4, 4).clone()
    trace = GlhTrace([f1], [(torch.ones(1, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))],
                     torch.tensor([0]), torch.tensor([0]), 1)
    ctfs = extract_all_ctfs(trace, lq, [LabelEmbedding(2, 1, 4).double()])
    assert len(ctfs) == 1
    assert ctfs[0].difference_maps.abs().max() < 1e-12
    assert ctfs[0].values[:, 2:].abs().sum() > 0


def test_extraction_errors():
    trace, lq = _hand_trace()
    tables = [LabelEmbedding(2, 2, 3).double(), LabelEmbedding(3, 2, 3).double()]
    with pytest.raises(ContractError):
        extract_all_ctfs(trace, lq, tables[:1])
    broken = GlhTrace([trace.features[0], None], trace.cbn2_params, trace.class_ids, trace.lq_labels, 2)
    with pytest.raises(ContractError):
        extract_all_ctfs(broken, lq, tables)
    swapped = GlhTrace(trace.features[::-1], trace.cbn2_params[::-1], trace.class_ids, trace.lq_labels, 2)
    with pytest.raises(ContractError):
        extract_all_ctfs(swapped, lq, tables[::-1])
    empty = GlhTrace([], [], trace.class_ids, trace.lq_labels, 2)
    with pytest.raises(ContractError):
        extract_all_ctfs(empty, lq, [])


def test_gradient_flow_from_ctf_loss():
    torch.manual_seed(0)
    glh = TransferGenerator(4, [6, 5, 4], 3, num_hq_classes=2, num_lq_classes=3)
    extractor = CtfExtractor(glh.cbn2_channels, 3, embed_dim=4)
    lq = torch.rand(4, 3, 4, 4) * 2 - 1
    _, trace = glh(lq, torch.tensor([0, 1, 2, 0]), torch.tensor([1, 0, 1, 1]))
    for f in trace.features:
        f.retain_grad()
    ctfs = extractor(trace, lq)
    for m, ctf in enumerate(ctfs):
        glh.zero_grad()
        extractor.zero_grad()
        ctf.values.square().sum().backward(retain_graph=True)
        block = glh.blocks[m]
        assert block.cbn2.gamma.grad.abs().sum() > 0
        assert block.cbn2.beta.grad.abs().sum() > 0
        assert extractor.embeddings[m].weight.grad.abs().sum() > 0
        assert trace.features[m].grad.abs().sum() > 0


def test_extraction_is_deterministic():
    trace, lq = _hand_trace()
    tables = [LabelEmbedding(2, 2, 3).double(), LabelEmbedding(3, 2, 3).double()]
    a = extract_all_ctfs(trace, lq, tables)
    b = extract_all_ctfs(trace, lq, tables)
    assert all(torch.equal(x.values, y.values) for x, y in zip(a, b))

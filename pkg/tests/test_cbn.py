import pytest
import torch

from ctfgan.cbn import (
    ConditionalBatchNorm2d,
    cbn_forward,
    cbn_init,
    check_labels,
    select_class_params,
)
from ctfgan.errors import ContractError, LabelDomainError


def test_hand_example():
    x = torch.tensor([0.0, 2.0]).view(1, 1, 1, 2)
    gamma = torch.tensor([[3.0]])
    beta = torch.tensor([[1.0]])
    y = cbn_forward(x, 0, gamma, beta, eps=0.0)
    assert y.flatten().tolist() == [-2.0, 4.0]


def test_standardization():
    x = torch.randn(8, 5, 6, 6, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 3 + 2
    gamma, beta = cbn_init(2, 5)
    y = cbn_forward(x, 1, gamma.double(), beta.double())
    assert y.mean(dim=(0, 2, 3)).abs().max() <= 1e-4
    assert (y.var(dim=(0, 2, 3), unbiased=False) - 1).abs().max() <= 1e-3


def test_constant_channel_gives_beta():
    x = torch.full((2, 1, 3, 3), 4.0)
    gamma = torch.tensor([[2.0], [5.0]])
    beta = torch.tensor([[0.5], [-1.5]])
    assert torch.equal(cbn_forward(x, 1, gamma, beta), torch.full_like(x, -1.5))


def test_zero_variance_gradient_is_finite():
    x = torch.full((2, 1, 2, 2), 1.0, requires_grad=True)
    gamma, beta = cbn_init(1, 1)
    cbn_forward(x, 0, gamma, beta).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_class_isolation():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, 3, 4, 4, generator=g)
    gamma, beta = torch.randn(3, 3, generator=g), torch.randn(3, 3, generator=g)
    before = cbn_forward(x, 1, gamma, beta)
    gamma2, beta2 = gamma.clone(), beta.clone()
    gamma2[[0, 2]] += 10
    beta2[[0, 2]] -= 7
    assert torch.equal(before, cbn_forward(x, 1, gamma2, beta2))


def test_gradient_reaches_only_selected_class():
    x = torch.randn(2, 3, 4, 4, requires_grad=True)
    gamma = torch.randn(4, 3, requires_grad=True)
    beta = torch.randn(4, 3, requires_grad=True)
    cbn_forward(x, torch.tensor([2, 2]), gamma, beta).pow(2).sum().backward()
    for table in (gamma.grad, beta.grad):
        assert table[2].abs().sum() > 0
        assert table[[0, 1, 3]].abs().sum() == 0
    assert x.grad.abs().sum() > 0


def _central_difference(fn, t, h=1e-6):
    grad = torch.zeros_like(t)
    flat, gflat = t.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


@pytest.mark.parametrize("seed", range(3))
def test_finite_difference_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64)
    gamma = torch.randn(2, 3, generator=g, dtype=torch.float64)
    beta = torch.randn(2, 3, generator=g, dtype=torch.float64)
    w = torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64)
    cls = torch.tensor([1, 0])

    def loss():
        return float((cbn_forward(x, cls, gamma, beta) * w).sum())

    leaves = [t.clone().requires_grad_(True) for t in (x, gamma, beta)]
    (cbn_forward(leaves[0], cls, leaves[1], leaves[2]) * w).sum().backward()
    for leaf, t in zip(leaves, (x, gamma, beta)):
        numeric = _central_difference(loss, t)
        rel = (leaf.grad - numeric).norm() / numeric.norm().clamp_min(1e-12)
        assert rel <= 1e-4


def test_torch_gradcheck():
    x = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    gamma = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    beta = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b, c: cbn_forward(a, 1, b, c), (x, gamma, beta))


def test_select_class_params():
    gamma = torch.arange(6.0).view(2, 3)
    beta = -gamma
    g, b = select_class_params(gamma, beta, 1)
    assert g.tolist() == [3.0, 4.0, 5.0] and b.tolist() == [-3.0, -4.0, -5.0]
    onehot = torch.eye(3)
    assert [int(select_class_params(onehot, onehot, c)[0].argmax()) for c in range(3)] == [0, 1, 2]
    same = torch.ones(3, 2)
    x = torch.randn(2, 2, 3, 3)
    assert torch.equal(cbn_forward(x, 0, same, same), cbn_forward(x, 2, same, same))
    with pytest.raises(LabelDomainError):
        select_class_params(gamma, beta, 2)
    with pytest.raises(LabelDomainError):
        select_class_params(gamma, beta, -1)
    with pytest.raises(ContractError):
        select_class_params(gamma, beta[:, :2], 0)


def test_label_checks():
    assert check_labels([0, 1], 2).dtype == torch.long
    with pytest.raises(LabelDomainError):
        check_labels(torch.tensor([0.5]), 2)
    with pytest.raises(IndexError):
        check_labels([3], 3)


def test_init():
    gamma, beta = cbn_init(3, 4)
    assert gamma.shape == beta.shape == (3, 4)
    assert torch.equal(gamma, torch.ones(3, 4)) and torch.equal(beta, torch.zeros(3, 4))
    again = cbn_init(3, 4)
    assert torch.equal(again[0], gamma) and torch.equal(again[1], beta)
    x = torch.randn(4, 4, 3, 3)
    mu = x.mean(dim=(0, 2, 3), keepdim=True)
    plain = (x - mu) / x.var(dim=(0, 2, 3), unbiased=False, keepdim=True).sqrt()
    assert torch.allclose(cbn_forward(x, 0, gamma, beta, eps=0.0), plain, atol=1e-5)
    for bad in ((0, 4), (3, 0)):
        with pytest.raises(ContractError):
            cbn_init(*bad)


def test_shape_errors():
    gamma, beta = cbn_init(2, 3)
    with pytest.raises(ContractError):
        cbn_forward(torch.zeros(3, 2, 2), 0, gamma, beta)
    with pytest.raises(ContractError):
        cbn_forward(torch.zeros(1, 4, 2, 2), 0, gamma, beta)


def test_module_running_stats_and_eval_mode():
    layer = ConditionalBatchNorm2d(2, 3, momentum=1.0)
    x = torch.randn(6, 2, 4, 4) * 2 + 1
    y = layer(x, torch.tensor([0, 1, 2, 0, 1, 2]))
    assert y.shape == x.shape
    assert torch.allclose(layer.running_mean, x.mean(dim=(0, 2, 3)))
    assert torch.allclose(layer.running_var, x.var(dim=(0, 2, 3), unbiased=False))
    layer.eval()
    one = layer(x[:1], 0)
    assert torch.allclose(one, layer(x, 0)[:1], atol=1e-6)
    g, b = layer.class_params(torch.tensor([1]))
    assert g.shape == (1, 2) and b.shape == (1, 2)

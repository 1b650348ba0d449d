"""Conditional batch normalization with per-class scale and shift tables.

Class labels are 0-based throughout the package.
"""

import torch
from torch import nn

from .errors import ContractError, LabelDomainError

__all__ = [
    "DEFAULT_EPS",
    "check_labels",
    "select_class_params",
    "cbn_forward",
    "cbn_init",
    "ConditionalBatchNorm2d",
]

DEFAULT_EPS = 1e-5


def check_labels(labels, num_classes, what="class label"):
    """Return ``labels`` as a long tensor after a range check."""
    labels = torch.as_tensor(labels)
    if labels.is_floating_point():
        raise LabelDomainError(f"{what} must be integer-valued")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelDomainError(
            f"{what} out of range [0, {num_classes}): got {labels.tolist()}"
        )
    return labels


def select_class_params(gamma, beta, class_id):
    """Rows of the gamma/beta tables for ``class_id`` (int or 1-D tensor)."""
    if gamma.shape != beta.shape:
        raise ContractError("gamma and beta tables must share a shape")
    ids = check_labels(class_id, gamma.shape[0])
    return gamma[ids], beta[ids]


def _spread(values):
    # std with a NaN-free gradient at zero variance
    positive = values > 0
    safe = torch.where(positive, values, torch.ones_like(values))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(values))


def cbn_forward(x, class_id, gamma, beta, eps=DEFAULT_EPS, mean=None, var=None):
    """y = gamma_c * (x - mu) / (sigma + eps) + beta_c, channel-wise.

    ``x`` is (N, C, H, W). Without ``mean``/``var`` the statistics are taken
    over the batch and spatial axes (biased variance). ``class_id`` is a
    single label or one label per sample.
    """
    if x.dim() != 4:
        raise ContractError(f"expected (N, C, H, W) input, got {tuple(x.shape)}")
    if gamma.shape[1] != x.shape[1]:
        raise ContractError(f"table has {gamma.shape[1]} channels, input has {x.shape[1]}")
    g, b = select_class_params(gamma, beta, class_id)
    if g.dim() == 1:
        g, b = g.unsqueeze(0), b.unsqueeze(0)
    if mean is None:
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
    x_hat = (x - mean.view(1, -1, 1, 1)) / (_spread(var).view(1, -1, 1, 1) + eps)
    return g[:, :, None, None] * x_hat + b[:, :, None, None]


def cbn_init(num_classes, channels):
    """Identity-start tables: gamma = 1, beta = 0 for every class."""
    if num_classes < 1 or channels < 1:
        raise ContractError(f"positive dimensions required, got ({num_classes}, {channels})")
    return torch.ones(num_classes, channels), torch.zeros(num_classes, channels)


class ConditionalBatchNorm2d(nn.Module):
    """Batch norm whose affine parameters are looked up per class.

    Training mode normalizes with batch statistics and updates running
    estimates; eval mode uses the running estimates.
    """

    def __init__(self, num_features, num_classes, eps=DEFAULT_EPS, momentum=0.1, layer_id=None):
        super().__init__()
        gamma, beta = cbn_init(num_classes, num_features)
        self.gamma = nn.Parameter(gamma)
        self.beta = nn.Parameter(beta)
        self.num_features = num_features
        self.num_classes = num_classes
        self.eps = eps
        self.momentum = momentum
        self.layer_id = layer_id
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def class_params(self, class_id):
        return select_class_params(self.gamma, self.beta, class_id)

    def forward(self, x, class_id):
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                self.running_mean.lerp_(mean.detach(), self.momentum)
                self.running_var.lerp_(var.detach(), self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        return cbn_forward(x, class_id, self.gamma, self.beta, self.eps, mean, var)

    def extra_repr(self):
        return f"{self.num_features}, num_classes={self.num_classes}, eps={self.eps}"

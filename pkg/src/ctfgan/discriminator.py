"""Shared discriminator D_LH and the hinge adversarial losses."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .cbn import check_labels
from .errors import ContractError

__all__ = [
    "DiscOutput",
    "Discriminator",
    "d_hinge_loss",
    "g_hinge_loss",
    "spectral_norm_estimate",
]


@dataclass
class DiscOutput:
    adv_score: torch.Tensor  # (N,)
    bbox_pred: torch.Tensor  # (N, 4), (x1, y1, x2, y2) in [0, 1]


class OptimizedDisBlock(nn.Module):
    """First block: conv-relu-conv then downsample, shortcut pool-then-conv."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = spectral_norm(nn.Conv2d(in_channels, out_channels, 3, padding=1))
        self.conv2 = spectral_norm(nn.Conv2d(out_channels, out_channels, 3, padding=1))
        self.shortcut = spectral_norm(nn.Conv2d(in_channels, out_channels, 1))

    def forward(self, x):
        h = F.avg_pool2d(self.conv2(F.relu(self.conv1(x))), 2)
        return h + self.shortcut(F.avg_pool2d(x, 2))


class DisBlock(nn.Module):
    def __init__(self, in_channels, out_channels, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.conv1 = spectral_norm(nn.Conv2d(in_channels, out_channels, 3, padding=1))
        self.conv2 = spectral_norm(nn.Conv2d(out_channels, out_channels, 3, padding=1))
        self.learnable_sc = in_channels != out_channels or downsample
        if self.learnable_sc:
            self.shortcut = spectral_norm(nn.Conv2d(in_channels, out_channels, 1))

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        sc = self.shortcut(x) if self.learnable_sc else x
        if self.downsample:
            h, sc = F.avg_pool2d(h, 2), F.avg_pool2d(sc, 2)
        return h + sc


class Discriminator(nn.Module):
    """Residual trunk with a projection adversarial head and a bbox head.

    The trunk halves the resolution until it reaches 8 (at least once),
    then applies ``extra_blocks`` resolution-preserving blocks and sums
    over space. Every weight is spectrally normalized.
    """

    def __init__(self, resolution, num_classes, channels=64, extra_blocks=2):
        super().__init__()
        self.resolution = resolution
        self.num_classes = num_classes
        blocks = [OptimizedDisBlock(3, channels)]
        res = resolution // 2
        while res > 8:
            blocks.append(DisBlock(channels, channels, downsample=True))
            res //= 2
        blocks += [DisBlock(channels, channels) for _ in range(extra_blocks)]
        self.trunk = nn.Sequential(*blocks)
        self.linear = spectral_norm(nn.Linear(channels, 1))
        self.embed = spectral_norm(nn.Embedding(num_classes, channels))
        self.bbox = spectral_norm(nn.Linear(channels, 4))

    def features(self, images):
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, self.resolution, self.resolution):
            raise ContractError(
                f"expected images (N, 3, {self.resolution}, {self.resolution}), got {tuple(images.shape)}"
            )
        return F.relu(self.trunk(images)).sum(dim=(2, 3))

    def score_terms(self, feats, class_id):
        """Return the unconditional and the class-projection parts of the score."""
        class_id = check_labels(class_id, self.num_classes, "high-quality class")
        if class_id.dim() == 0:
            class_id = class_id.expand(feats.shape[0])
        linear = self.linear(feats).squeeze(1)
        proj = (self.embed(class_id) * feats).sum(dim=1)
        return linear, proj

    def forward(self, images, class_id):
        feats = self.features(images)
        linear, proj = self.score_terms(feats, class_id)
        return DiscOutput(linear + proj, torch.sigmoid(self.bbox(feats)))


def _check_scores(scores, name):
    if scores.numel() == 0:
        raise ContractError(f"{name} is empty")


def d_hinge_loss(real_scores, fake_scores):
    _check_scores(real_scores, "real scores")
    _check_scores(fake_scores, "fake scores")
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def g_hinge_loss(fake_scores):
    _check_scores(fake_scores, "fake scores")
    return -fake_scores.mean()


@torch.no_grad()
def spectral_norm_estimate(weight, iters=100, seed=0):
    """Top singular value of ``weight`` (reshaped to 2-D) by power iteration."""
    mat = weight.reshape(weight.shape[0], -1).double()
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(mat.shape[1], 1, generator=g, dtype=mat.dtype)
    v /= v.norm()
    for _ in range(iters):
        u = mat @ v
        u /= u.norm()
        v = mat.T @ u
        v /= v.norm()
    return float((u.T @ mat @ v).abs())

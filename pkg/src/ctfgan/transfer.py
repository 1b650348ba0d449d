"""Transfer generator: low-quality image -> high-quality-like image.

A stack of residual unpooling blocks, each doubling the resolution, each fed
its own noise vector and conditioned on a high-quality class through two
CBN layers. The forward pass returns the trace needed to build CTFs.
"""

import torch
import torch.nn.functional as F
from torch import nn

from .cbn import ConditionalBatchNorm2d, check_labels
from .ctf import GlhTrace
from .errors import ContractError
from .spectral import bilinear_upscale

__all__ = ["ResUnpoolBlock", "TransferGenerator"]


class ResUnpoolBlock(nn.Module):
    """CBN -> ReLU -> conv -> CBN -> ReLU -> unpool -> conv, plus shortcut.

    The noise vector is mapped to one channel plane at the input resolution
    and concatenated to the input before the first CBN.
    """

    def __init__(self, block_index, in_channels, out_channels, noise_dim, num_classes, in_resolution):
        super().__init__()
        self.block_index = block_index
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.noise_dim = noise_dim
        self.in_resolution = in_resolution
        h = w = in_resolution
        self.noise_embed = nn.Linear(noise_dim, h * w)
        self.cbn1 = ConditionalBatchNorm2d(in_channels + 1, num_classes, layer_id=(block_index, 1))
        self.conv1 = nn.Conv2d(in_channels + 1, out_channels, 3, padding=1)
        self.cbn2 = ConditionalBatchNorm2d(out_channels, num_classes, layer_id=(block_index, 2))
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x, z, class_id):
        """Return (F_m, (gamma2_c, beta2_c))."""
        n, c, h, w = x.shape
        if c != self.in_channels or h != self.in_resolution or w != self.in_resolution:
            raise ContractError(
                f"block {self.block_index} expects (N, {self.in_channels}, "
                f"{self.in_resolution}, {self.in_resolution}), got {tuple(x.shape)}"
            )
        if z.shape != (n, self.noise_dim):
            raise ContractError(f"block {self.block_index} expects noise ({n}, {self.noise_dim})")
        noise_plane = self.noise_embed(z).view(n, 1, h, w)
        hid = torch.cat([x, noise_plane], dim=1)
        hid = self.conv1(F.relu(self.cbn1(hid, class_id)))
        hid = F.relu(self.cbn2(hid, class_id))
        hid = self.conv2(F.interpolate(hid, scale_factor=2, mode="nearest"))
        skip = self.shortcut(bilinear_upscale(x, (2 * h, 2 * w)))
        return hid + skip, self.cbn2.class_params(class_id)


class TransferGenerator(nn.Module):
    """G_LH. ``channels`` has M + 1 entries: stem width, then each block's T."""

    def __init__(self, lq_resolution, channels, noise_dim, num_hq_classes, num_lq_classes):
        super().__init__()
        if len(channels) < 2:
            raise ContractError("need at least one block (channels of length >= 2)")
        self.lq_resolution = lq_resolution
        self.num_blocks = len(channels) - 1
        self.hq_resolution = lq_resolution * 2 ** self.num_blocks
        self.noise_dim = noise_dim
        self.num_hq_classes = num_hq_classes
        self.num_lq_classes = num_lq_classes
        self.stem = nn.Conv2d(3, channels[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            ResUnpoolBlock(
                m + 1, channels[m], channels[m + 1], noise_dim, num_hq_classes,
                lq_resolution * 2 ** m,
            )
            for m in range(self.num_blocks)
        )
        self.head_bn = nn.BatchNorm2d(channels[-1])
        self.head = nn.Conv2d(channels[-1], 3, 3, padding=1)

    @property
    def cbn2_channels(self):
        return [b.out_channels for b in self.blocks]

    @property
    def feature_resolutions(self):
        return [self.lq_resolution * 2 ** (m + 1) for m in range(self.num_blocks)]

    def sample_noises(self, batch_size, generator=None, device="cpu"):
        return [
            torch.randn(batch_size, self.noise_dim, generator=generator, device=device)
            for _ in range(self.num_blocks)
        ]

    def forward(self, lq_images, lq_labels, class_id, noises=None, generator=None):
        """Translate a batch; returns (image in [-1, 1], GlhTrace)."""
        n = lq_images.shape[0]
        if tuple(lq_images.shape[1:]) != (3, self.lq_resolution, self.lq_resolution):
            raise ContractError(
                f"expected LQ batch (N, 3, {self.lq_resolution}, {self.lq_resolution}), "
                f"got {tuple(lq_images.shape)}"
            )
        class_id = check_labels(class_id, self.num_hq_classes, "high-quality class")
        if class_id.dim() == 0:
            class_id = class_id.expand(n)
        lq_labels = check_labels(lq_labels, self.num_lq_classes, "low-quality label")
        if lq_labels.dim() == 0:
            lq_labels = lq_labels.expand(n)
        if noises is None:
            noises = self.sample_noises(n, generator, lq_images.device)
        if len(noises) != self.num_blocks:
            raise ContractError(f"expected {self.num_blocks} noise vectors, got {len(noises)}")
        h = self.stem(lq_images)
        features, cbn2 = [], []
        for block, z in zip(self.blocks, noises):
            h, params = block(h, z, class_id)
            features.append(h)
            cbn2.append(params)
        out = torch.tanh(self.head(F.relu(self.head_bn(h))))
        trace = GlhTrace(features, cbn2, class_id, lq_labels, self.num_lq_classes)
        return out, trace

"""Synthesis generator G_A: noise plus per-resolution CTFs -> image."""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cbn import ConditionalBatchNorm2d, check_labels
from .ctf import CtfTensor
from .errors import ContractError, DataError

__all__ = ["GBlock", "SynthesisGenerator", "sample"]


class _Norm(nn.Module):
    """Plain BN or CBN behind one call signature."""

    def __init__(self, channels, mode, num_classes):
        super().__init__()
        self.mode = mode
        if mode == "cbn":
            self.norm = ConditionalBatchNorm2d(channels, num_classes)
        elif mode == "bn":
            self.norm = nn.BatchNorm2d(channels)
        else:
            raise ContractError(f"unknown norm mode {mode!r}")

    def forward(self, x, class_id):
        return self.norm(x, class_id) if self.mode == "cbn" else self.norm(x)


class GBlock(nn.Module):
    """Upsampling residual block of the SN-GAN generator family."""

    def __init__(self, in_channels, out_channels, norm="bn", num_classes=1):
        super().__init__()
        self.norm1 = _Norm(in_channels, norm, num_classes)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = _Norm(out_channels, norm, num_classes)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x, class_id):
        h = F.interpolate(F.relu(self.norm1(x, class_id)), scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.norm2(h, class_id)))
        return h + self.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))


class SynthesisGenerator(nn.Module):
    """G_A.

    ``channels`` has M + 1 entries (the base map width, then each block's
    output width); ``ctf_channels[m]`` is T_m + E for the CTF injected after
    block m + 1. After every block the output is concatenated with the CTF
    of the same resolution and passed through a 3x3 fusion convolution.
    """

    def __init__(self, noise_dim, base_resolution, channels, ctf_channels, num_classes, norm="bn"):
        super().__init__()
        if len(ctf_channels) != len(channels) - 1:
            raise ContractError("one CTF width per block is required")
        self.noise_dim = noise_dim
        self.base_resolution = base_resolution
        self.num_blocks = len(channels) - 1
        self.hq_resolution = base_resolution * 2 ** self.num_blocks
        self.num_classes = num_classes
        self.norm_mode = norm
        self.ctf_channels = list(ctf_channels)
        self.base_channels = channels[0]
        self.fc = nn.Linear(noise_dim, channels[0] * base_resolution ** 2)
        self.blocks = nn.ModuleList(
            GBlock(channels[m], channels[m + 1], norm, num_classes) for m in range(self.num_blocks)
        )
        self.fusions = nn.ModuleList(
            nn.Conv2d(channels[m + 1] + ctf_channels[m], channels[m + 1], 3, padding=1)
            for m in range(self.num_blocks)
        )
        self.head_bn = nn.BatchNorm2d(channels[-1])
        self.head = nn.Conv2d(channels[-1], 3, 3, padding=1)

    def forward(self, z, ctfs, class_id):
        n = z.shape[0]
        if z.shape[1:] != (self.noise_dim,):
            raise ContractError(f"expected noise (N, {self.noise_dim}), got {tuple(z.shape)}")
        if len(ctfs) != self.num_blocks:
            raise ContractError(f"expected {self.num_blocks} CTFs, got {len(ctfs)}")
        class_id = check_labels(class_id, self.num_classes, "high-quality class")
        if class_id.dim() == 0:
            class_id = class_id.expand(n)
        h = self.fc(z).view(n, self.base_channels, self.base_resolution, self.base_resolution)
        for m, (block, fuse, ctf) in enumerate(zip(self.blocks, self.fusions, ctfs)):
            h = block(h, class_id)
            values = ctf.values if isinstance(ctf, CtfTensor) else ctf
            if values.shape[0] != n or values.shape[1] != self.ctf_channels[m] or values.shape[-2:] != h.shape[-2:]:
                raise ContractError(
                    f"CTF {m + 1} has shape {tuple(values.shape)}, expected "
                    f"({n}, {self.ctf_channels[m]}, {h.shape[-2]}, {h.shape[-1]})"
                )
            h = fuse(torch.cat([h, values], dim=1))
        return torch.tanh(self.head(F.relu(self.head_bn(h))))


@torch.no_grad()
def sample(generator, transfer, extractor, lq_images, lq_labels, n, class_id, seed=0, zero_ctfs=False):
    """Draw ``n`` images of ``class_id`` from G_A with CTFs from a frozen G_LH.

    LQ inputs are drawn uniformly from the pool; z_A and every z_m come from
    ``seed``, either an int or a ``torch.Generator`` to continue drawing from.
    All modules run in eval mode and their previous modes are restored.
    ``zero_ctfs`` replaces every CTF by zeros (the ablation generator).
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if lq_images is None or len(lq_images) == 0:
        raise DataError("low-quality pool is empty")
    modes = [m.training for m in (generator, transfer, extractor)]
    for m in (generator, transfer, extractor):
        m.eval()
    try:
        rng = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
        pick = torch.randint(len(lq_images), (n,), generator=rng)
        lq = lq_images[pick]
        gl = torch.as_tensor(np.asarray(lq_labels))[pick]
        classes = check_labels(class_id, generator.num_classes, "high-quality class")
        if classes.dim() == 0:
            classes = classes.expand(n)
        noises = transfer.sample_noises(n, rng)
        z = torch.randn(n, generator.noise_dim, generator=rng)
        _, trace = transfer(lq, gl, classes, noises)
        ctfs = extractor(trace, lq)
        if zero_ctfs:
            ctfs = [c.zeros_like() for c in ctfs]
        return generator(z, ctfs, classes)
    finally:
        for m, mode in zip((generator, transfer, extractor), modes):
            m.train(mode)

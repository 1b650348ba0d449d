"""Conditional transferring features.

A CTF for block m stacks the T difference maps of that block with E
spatially constant channels. Those channels hold a learned linear embedding of
the block's second CBN parameters for the target class, concatenated with
the one-hot low-quality label.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .cbn import check_labels
from .errors import ContractError
from .spectral import difference_map_first, difference_map_inner

__all__ = [
    "DEFAULT_EMBED_DIM",
    "GlhTrace",
    "CtfTensor",
    "LabelEmbedding",
    "embed_labels",
    "assemble_ctf",
    "extract_all_ctfs",
    "CtfExtractor",
]

DEFAULT_EMBED_DIM = 16


@dataclass
class GlhTrace:
    """What the transfer generator exposes for CTF extraction.

    ``features[m-1]`` is F_m as (N, T_m, h_m, w_m); ``cbn2_params[m-1]`` is
    the (gamma_c, beta_c) pair of that block's second CBN, each (N, C).
    """

    features: List[torch.Tensor]
    cbn2_params: List[Tuple[torch.Tensor, torch.Tensor]]
    class_ids: torch.Tensor
    lq_labels: torch.Tensor
    num_lq_classes: int

    @property
    def num_blocks(self):
        return len(self.features)

    def detach(self):
        return GlhTrace(
            [f.detach() for f in self.features],
            [(g.detach(), b.detach()) for g, b in self.cbn2_params],
            self.class_ids,
            self.lq_labels,
            self.num_lq_classes,
        )


@dataclass
class CtfTensor:
    values: torch.Tensor  # (N, T + E, h, w)
    block_index: int  # 1-based block number m
    num_difference_channels: int
    source_class: torch.Tensor = field(default=None, repr=False)
    source_lq_labels: torch.Tensor = field(default=None, repr=False)

    @property
    def num_embed_channels(self):
        return self.values.shape[1] - self.num_difference_channels

    @property
    def resolution(self):
        return tuple(self.values.shape[-2:])

    @property
    def difference_maps(self):
        return self.values[:, : self.num_difference_channels]

    def zeros_like(self):
        return CtfTensor(
            torch.zeros_like(self.values),
            self.block_index,
            self.num_difference_channels,
            self.source_class,
            self.source_lq_labels,
        )


def _one_hot(labels, num_classes, dtype):
    labels = check_labels(labels, num_classes, "low-quality label")
    return F.one_hot(labels, num_classes).to(dtype)


def embed_labels(gamma_c, beta_c, lq_labels, weight, num_lq_classes):
    """Embed(Concat(gamma_c, beta_c, onehot(g_L))) as a plain matrix product.

    ``gamma_c``/``beta_c`` are (N, C) or (C,); ``lq_labels`` are integer
    labels (N,) or a scalar; ``weight`` is (2C + c_L, E). Returns (N, E) or (E,).
    """
    squeeze = gamma_c.dim() == 1
    if squeeze:
        gamma_c, beta_c = gamma_c.unsqueeze(0), beta_c.unsqueeze(0)
    onehot = _one_hot(lq_labels, num_lq_classes, gamma_c.dtype).reshape(-1, num_lq_classes)
    if onehot.shape[0] != gamma_c.shape[0]:
        raise ContractError("one low-quality label per conditioning row is required")
    concat = torch.cat([gamma_c, beta_c, onehot], dim=1)
    if concat.shape[1] != weight.shape[0]:
        raise ContractError(
            f"embedding table expects input_dim {weight.shape[0]}, got {concat.shape[1]}"
        )
    out = concat @ weight
    return out.squeeze(0) if squeeze else out


def assemble_ctf(difference_maps, embed_vec, block_index):
    """Concatenate T difference maps with E broadcast embedding channels."""
    if difference_maps.dim() == 3:
        difference_maps = difference_maps.unsqueeze(0)
    if difference_maps.dim() != 4:
        raise ContractError("difference maps must be (N, T, h, w) or (T, h, w)")
    if embed_vec.dim() == 1:
        embed_vec = embed_vec.unsqueeze(0).expand(difference_maps.shape[0], -1)
    n, t, h, w = difference_maps.shape
    if embed_vec.shape[0] != n:
        raise ContractError("batch size of embedding and difference maps differ")
    if embed_vec.shape[1] < 1:
        raise ContractError("embedding width E must be >= 1")
    planes = embed_vec[:, :, None, None].expand(n, embed_vec.shape[1], h, w)
    values = torch.cat([difference_maps, planes.to(difference_maps.dtype)], dim=1)
    return CtfTensor(values, block_index, t)


class LabelEmbedding(nn.Module):
    """Bias-free linear map used as the Embed operator of one block."""

    def __init__(self, cbn_channels, num_lq_classes, embed_dim=DEFAULT_EMBED_DIM):
        super().__init__()
        if embed_dim < 1:
            raise ContractError("embed_dim must be >= 1")
        self.cbn_channels = cbn_channels
        self.num_lq_classes = num_lq_classes
        self.input_dim = 2 * cbn_channels + num_lq_classes
        self.embed_dim = embed_dim
        self.weight = nn.Parameter(torch.empty(self.input_dim, embed_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, gamma_c, beta_c, lq_labels):
        return embed_labels(gamma_c, beta_c, lq_labels, self.weight, self.num_lq_classes)


def extract_all_ctfs(trace, low_quality_images, embeddings):
    """Build CTF_1..CTF_M from a transfer-generator trace.

    Block 1 is differenced against the gray LQ image, later blocks against
    the previous block's features.
    """
    m_total = trace.num_blocks
    if m_total < 1:
        raise ContractError("trace holds no blocks")
    if len(trace.cbn2_params) != m_total or len(embeddings) != m_total:
        raise ContractError(
            f"trace has {m_total} feature stacks, {len(trace.cbn2_params)} CBN entries "
            f"and {len(embeddings)} embedding tables"
        )
    ctfs = []
    for m in range(m_total):
        feats = trace.features[m]
        if feats is None:
            raise ContractError(f"block {m + 1} missing from trace")
        if m == 0:
            diff = difference_map_first(feats, low_quality_images)
        else:
            prev = trace.features[m - 1]
            if prev.shape[-1] >= feats.shape[-1]:
                raise ContractError("block resolutions must strictly increase")
            diff = difference_map_inner(feats, prev)
        gamma_c, beta_c = trace.cbn2_params[m]
        vec = embeddings[m](gamma_c, beta_c, trace.lq_labels)
        ctf = assemble_ctf(diff, vec, m + 1)
        ctf.source_class = trace.class_ids
        ctf.source_lq_labels = trace.lq_labels
        ctfs.append(ctf)
    return ctfs


class CtfExtractor(nn.Module):
    """Holds one embedding table per block and turns traces into CTFs."""

    def __init__(self, cbn2_channels, num_lq_classes, embed_dim=DEFAULT_EMBED_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        self.embeddings = nn.ModuleList(
            LabelEmbedding(c, num_lq_classes, embed_dim) for c in cbn2_channels
        )

    def forward(self, trace, low_quality_images):
        return extract_all_ctfs(trace, low_quality_images, self.embeddings)

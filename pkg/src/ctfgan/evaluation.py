"""Desk-scale quality metrics and sample grids.

The Inception-score and FID surrogates use a small convolutional classifier
trained on the toy HQ corpus instead of a published inception network, so
values are only comparable between reports sharing a classifier fingerprint.
"""

from dataclasses import asdict, dataclass
import hashlib
import io
import logging
import os
from pathlib import Path
import tempfile

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .data import to_uint8
from .errors import ContractError

logger = logging.getLogger(__name__)

FID_EPS = 1e-6


def inception_score_surrogate(probs, splits=10):
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError("probabilities must be a non-empty (n, K) matrix")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("every row must be a probability vector")
    splits = max(1, min(int(splits), p.shape[0]))
    scores = []
    for part in np.array_split(p, splits):
        py = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(py)), 0.0)
        scores.append(np.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def _sqrt_psd(mat):
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=FID_EPS):
    """Frechet distance between two Gaussians.

    The cross term uses the symmetric form tr sqrt(A^1/2 B A^1/2), which
    equals tr sqrt(A B) and stays in symmetric eigendecompositions. Both
    covariances are stabilized by ``eps * I``.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    a = np.atleast_2d(sigma1) + eps * np.eye(len(mu1))
    b = np.atleast_2d(sigma2) + eps * np.eye(len(mu2))
    ra = _sqrt_psd(a)
    mid = ra @ b @ ra
    cross = np.sqrt(np.clip(np.linalg.eigvalsh((mid + mid.T) / 2), 0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(a) + np.trace(b) - 2 * cross, 0.0))


def feature_stats(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ContractError("features must be a non-empty (n, d) matrix")
    if not np.isfinite(feats).all():
        raise ContractError("features contain non-finite values")
    mu = feats.mean(axis=0)
    if feats.shape[0] > 1:
        sigma = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
    else:
        sigma = np.zeros((feats.shape[1], feats.shape[1]))
    return mu, sigma


def fid_surrogate(feats_real, feats_fake, eps=FID_EPS):
    mu_r, s_r = feature_stats(feats_real)
    mu_f, s_f = feature_stats(feats_fake)
    if mu_r.shape != mu_f.shape:
        raise ContractError("real and fake features differ in dimension")
    return frechet_distance(mu_r, s_r, mu_f, s_f, eps)


class SurrogateClassifier(nn.Module):
    """Small CNN whose penultimate activations serve as FID features."""

    def __init__(self, num_classes, width=16, feature_dim=32):
        super().__init__()
        self.num_classes = num_classes
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, feature_dim, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.fc = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.fc(self.features(x))

    def fingerprint(self):
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def train_surrogate_classifier(images, labels, num_classes, seed=0, epochs=15, batch_size=64,
                               lr=1e-3, target_accuracy=0.9):
    """Fit the surrogate on a labelled HQ set; returns (classifier, train accuracy).

    Runs a fixed number of epochs and warns when the final train accuracy
    is below ``target_accuracy``.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        clf = SurrogateClassifier(num_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    n = len(labels)
    for _ in range(epochs):
        clf.train()
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(clf(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    acc = classifier_accuracy(clf, images, labels)
    if acc < target_accuracy:
        logger.warning("surrogate classifier reached only %.3f train accuracy", acc)
    clf.eval()
    return clf, acc


@torch.no_grad()
def classifier_accuracy(clf, images, labels, batch_size=256):
    was = clf.training
    clf.eval()
    hits = 0
    for i in range(0, len(labels), batch_size):
        hits += int((clf(images[i:i + batch_size]).argmax(1) == labels[i:i + batch_size]).sum())
    clf.train(was)
    return hits / max(1, len(labels))


@torch.no_grad()
def classifier_outputs(clf, images, batch_size=256):
    """(softmax probabilities, features) as float64 numpy arrays."""
    clf.eval()
    probs, feats = [], []
    for i in range(0, len(images), batch_size):
        f = clf.features(images[i:i + batch_size])
        feats.append(f.double())
        probs.append(F.softmax(clf.fc(f).double(), dim=1))
    return torch.cat(probs).numpy(), torch.cat(feats).numpy()


@dataclass
class EvalReport:
    is_mean: float
    is_std: float
    fid: float
    n_samples: int
    classifier_fingerprint: str
    step: int
    phase: int

    def to_record(self):
        return {"kind": "eval", **asdict(self)}

    @classmethod
    def from_record(cls, record):
        return cls(**{k: v for k, v in record.items() if k != "kind"})


def evaluate_images(clf, fake_images, real_images, splits=10, step=0, phase=0):
    probs, fake_feats = classifier_outputs(clf, fake_images)
    _, real_feats = classifier_outputs(clf, real_images)
    # renormalize in float64 so rows pass the probability check exactly
    probs = probs / probs.sum(axis=1, keepdims=True)
    is_mean, is_std = inception_score_surrogate(probs, splits)
    fid = fid_surrogate(real_feats, fake_feats)
    return EvalReport(is_mean, is_std, fid, len(fake_images), clf.fingerprint(), step, phase)


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def make_grid_array(images, grid):
    """Tile (N, 3, h, w) images in [-1, 1] (or uint8) row-major into an (rows*h, cols*w, 3) array."""
    rows, cols = grid
    n = images.shape[0]
    if rows < 1 or cols < 1 or rows * cols != n:
        raise ContractError(f"grid {rows}x{cols} does not fit {n} images")
    pix = images if images.dtype == torch.uint8 else to_uint8(images.detach().cpu())
    _, c, h, w = pix.shape
    tiled = pix.reshape(rows, cols, c, h, w).permute(0, 3, 1, 4, 2).reshape(rows * h, cols * w, c)
    return tiled.numpy()


def emit_sample_grid(images, path, grid):
    """Write the images as one PNG tiled row-major; the write is atomic."""
    arr = make_grid_array(images, grid)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())

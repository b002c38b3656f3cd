"""Quantitative protocols: map pixel accuracy, FID, translate-then-classify, attention IoU."""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import InitializationError, InputError
from .weights import FID_INCEPTION_ARCHIVE, load_archive


# --------------------------------------------------------------------------
# map prediction


def map_accuracy(pred, gt, tol=12, rule="sum"):
    """Fraction of pixels whose RGB difference is within ``tol``.

    ``pred`` and ``gt`` are uint8 arrays of shape (H, W, 3) or (N, H, W, 3),
    or equal-length sequences of such images. ``rule="sum"`` compares the summed
    absolute channel difference, ``rule="max"`` the largest channel difference.
    """
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(gt):
            raise InputError(f"{len(pred)} predictions for {len(gt)} ground truths")
        counts = [_map_counts(p, g, tol, rule) for p, g in zip(pred, gt)]
        correct = sum(c for c, _ in counts)
        total = sum(t for _, t in counts)
        return correct / total
    correct, total = _map_counts(pred, gt, tol, rule)
    return correct / total


def _map_counts(pred, gt, tol, rule):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    if pred.shape[-1] != 3:
        raise InputError(f"expected RGB images, got trailing dim {pred.shape[-1]}")
    diff = np.abs(pred.astype(np.int32) - gt.astype(np.int32))
    if rule == "sum":
        err = diff.sum(axis=-1)
    elif rule == "max":
        err = diff.max(axis=-1)
    else:
        raise InputError(f"unknown map accuracy rule {rule!r}")
    return int((err <= tol).sum()), int(err.size)


# --------------------------------------------------------------------------
# Frechet Inception Distance


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise InputError(f"covariance {self.sigma.shape} does not match mean of length {d}")

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise InputError("need a (n >= 2, d) feature matrix")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False), feats.shape[0])


def _psd_sqrt(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a, b):
    """Frechet distance between two Gaussians.

    Tr((S_a S_b)^(1/2)) is evaluated as the trace of the square root of the
    symmetric PSD matrix S_a^(1/2) S_b S_a^(1/2), whose eigenvalues match those
    of S_a S_b. Negative eigenvalues from round-off are clipped.
    """
    for s in (a, b):
        if not (np.all(np.isfinite(s.mu)) and np.all(np.isfinite(s.sigma))):
            raise InputError("statistics contain non-finite values")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_covmean = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_covmean
    return float(max(value, 0.0))


class InceptionEmbedder(nn.Module):
    """Pool3 (2048-d) features of the FID Inception-v3 network.

    Built from the FID-specific blocks shipped with ``pytorch_fid`` and loaded
    from the local archive ``pt_inception-2015-12-05-6726825d.pth``. With
    ``pretrained=False`` the weights are random; such features only support
    identity checks, never comparisons with published numbers.
    """

    def __init__(self, pretrained=True, weights_dir=None):
        super().__init__()
        from pytorch_fid import inception as pf
        from torchvision.models.inception import Inception3

        net = Inception3(num_classes=1008, aux_logits=False, init_weights=not pretrained)
        net.Mixed_5b = pf.FIDInceptionA(192, pool_features=32)
        net.Mixed_5c = pf.FIDInceptionA(256, pool_features=64)
        net.Mixed_5d = pf.FIDInceptionA(288, pool_features=64)
        net.Mixed_6b = pf.FIDInceptionC(768, channels_7x7=128)
        net.Mixed_6c = pf.FIDInceptionC(768, channels_7x7=160)
        net.Mixed_6d = pf.FIDInceptionC(768, channels_7x7=160)
        net.Mixed_6e = pf.FIDInceptionC(768, channels_7x7=192)
        net.Mixed_7b = pf.FIDInceptionE_1(1280)
        net.Mixed_7c = pf.FIDInceptionE_2(2048)
        if pretrained:
            try:
                net.load_state_dict(load_archive(FID_INCEPTION_ARCHIVE, weights_dir))
            except RuntimeError as exc:
                raise InitializationError(f"FID Inception archive does not fit: {exc}") from exc
        self.pretrained = pretrained
        self.body = nn.Sequential(
            net.Conv2d_1a_3x3, net.Conv2d_2a_3x3, net.Conv2d_2b_3x3, nn.MaxPool2d(3, 2),
            net.Conv2d_3b_1x1, net.Conv2d_4a_3x3, nn.MaxPool2d(3, 2),
            net.Mixed_5b, net.Mixed_5c, net.Mixed_5d, net.Mixed_6a, net.Mixed_6b,
            net.Mixed_6c, net.Mixed_6d, net.Mixed_6e, net.Mixed_7a, net.Mixed_7b,
            net.Mixed_7c, nn.AdaptiveAvgPool2d(1),
        )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x):
        """``x`` in model space [-1, 1]; returns (N, 2048)."""
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.body(x).flatten(1)

    def embed(self, images, batch_size=16):
        feats = [self(images[i:i + batch_size]).double() for i in range(0, len(images), batch_size)]
        return torch.cat(feats).numpy()


def fid_from_images(images_a, images_b, embedder, batch_size=16):
    sa = GaussianStats.from_features(embedder.embed(images_a, batch_size))
    sb = GaussianStats.from_features(embedder.embed(images_b, batch_size))
    return fid(sa, sb)


# --------------------------------------------------------------------------
# translate-then-classify


class DigitClassifier(nn.Module):
    """Small fixed conv net for digit-style images."""

    def __init__(self, n_classes=10, in_ch=3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_ch, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(64 * 16, 128), nn.ReLU(),
                                  nn.Linear(128, n_classes))

    def forward(self, x):
        return self.head(self.features(x))


def train_classifier(images, labels, n_classes, epochs=10, seed=0, batch_size=64, lr=1e-3):
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DigitClassifier(n_classes, images.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    labels = torch.as_tensor(labels, dtype=torch.long)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(images), generator=gen)
        for i in range(0, len(images), batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def classify_accuracy(model, images, labels, batch_size=256):
    labels = torch.as_tensor(labels, dtype=torch.long)
    preds = torch.cat([model(images[i:i + batch_size]).argmax(1)
                       for i in range(0, len(images), batch_size)])
    return float((preds == labels).double().mean())


def adapt_classify(translator, source, target, n_classes=10, epochs=10, seed=0, batch_size=64):
    """Translate labelled source images, train a classifier on them, score on target.

    ``source`` and ``target`` are ``(images, labels)`` pairs with images as
    model-space tensors. ``translator`` maps a batch to a batch (``None`` means
    no translation, the baseline arm).
    """
    src_x, src_y = source
    tgt_x, tgt_y = target
    if len(src_x) != len(src_y) or len(tgt_x) != len(tgt_y):
        raise InputError("image and label counts differ")
    if translator is not None:
        with torch.no_grad():
            src_x = torch.cat([translator(src_x[i:i + batch_size])
                               for i in range(0, len(src_x), batch_size)])
    model = train_classifier(src_x, src_y, n_classes, epochs=epochs, seed=seed)
    return classify_accuracy(model, tgt_x, tgt_y)


# --------------------------------------------------------------------------
# attention quality


def attention_iou(attn, mask, thresh=0.5):
    """IoU of ``attn >= thresh`` against a boolean mask (1 if both are empty)."""
    a = np.asarray(attn.detach().cpu() if torch.is_tensor(attn) else attn)
    m = np.asarray(mask.detach().cpu() if torch.is_tensor(mask) else mask).astype(bool)
    a = np.squeeze(a)
    m = np.squeeze(m)
    if a.shape != m.shape:
        raise InputError(f"attention {a.shape} and mask {m.shape} differ")
    pa = a >= thresh
    union = np.logical_or(pa, m).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pa, m).sum() / union)


def background_change(x, out, mask):
    """Mean |out - x| over background pixels (mask False), all channels."""
    bg = ~torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    bg = bg.reshape(x.shape[0], 1, *x.shape[2:]).expand_as(x)
    return float((out - x).abs()[bg].mean())


# --------------------------------------------------------------------------
# reporting


def _to_uint8_hwc(t):
    t = t.detach().cpu().double()
    if t.shape[0] == 1:
        t = t.expand(3, *t.shape[1:])
        arr = torch.round(t * 255.0)
    else:
        arr = torch.round((t + 1.0) * 127.5)
    return arr.clamp(0, 255).to(torch.uint8).permute(1, 2, 0).numpy()


def export_grid(inputs, g0_outs, attns, finals, path, pad=2):
    """One row per sample: input, G0 output, attention (grayscale), final.

    Images are model-space tensors; attention maps are (N, 1, H, W) in [0, 1].
    Writes a PNG and returns its path.
    """
    n, _, h, w = inputs.shape
    cols = [inputs, g0_outs, attns, finals]
    for c in cols:
        if c.shape[0] != n or tuple(c.shape[2:]) != (h, w):
            raise InputError("all grid columns need the same batch and spatial size")
    grid = np.full((n * h + (n + 1) * pad, 4 * w + 5 * pad, 3), 255, dtype=np.uint8)
    for i in range(n):
        for j, col in enumerate(cols):
            y0 = pad + i * (h + pad)
            x0 = pad + j * (w + pad)
            grid[y0:y0 + h, x0:x0 + w] = _to_uint8_hwc(col[i])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path, format="PNG", optimize=False, compress_level=6)
    return path


@dataclass
class MetricReport:
    metric: str
    value: float
    n_samples: int
    config_hash: str = ""
    timestamp: float = field(default_factory=time.time)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise InputError(f"{self.metric} is not finite: {self.value}")
        if self.n_samples <= 0:
            raise InputError("a report needs at least one sample")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def write_report(report, path):
    """Append one JSON line to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(report.to_json() + "\n")
    return path

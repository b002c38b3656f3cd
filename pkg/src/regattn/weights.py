"""Locating and validating pretrained weight archives.

Nothing is downloaded. The archives are the public torchvision VGG-19 and
FID-Inception checkpoints; drop them into the cache directory
(``$REGATTN_CACHE``, default ``~/.cache/regattn``). Each filename embeds the
leading hex digits of the file's SHA-256, which is checked on load, the same
convention torch hub uses.
"""

import hashlib
import os
import re
from pathlib import Path

import torch

from .errors import InitializationError

CACHE_ENV = "REGATTN_CACHE"

VGG19_ARCHIVE = "vgg19-dcbb9e9d.pth"
FID_INCEPTION_ARCHIVE = "pt_inception-2015-12-05-6726825d.pth"


def cache_dir():
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "regattn"))


def _expected_prefix(filename):
    m = re.search(r"-([0-9a-f]{8,})\.pth$", filename)
    return m.group(1) if m else None


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def load_archive(filename, directory=None):
    """Return the state dict stored in ``filename`` after checksum validation."""
    path = Path(directory) if directory is not None else cache_dir()
    path = path / filename
    if not path.is_file():
        raise InitializationError(
            f"pretrained weights {filename!r} not found in {path.parent} "
            f"(set ${CACHE_ENV} or pass pretrained=False)"
        )
    prefix = _expected_prefix(filename)
    if prefix is not None:
        digest = sha256_file(path)
        if not digest.startswith(prefix):
            raise InitializationError(
                f"checksum mismatch for {path}: sha256 {digest[:12]}... "
                f"does not start with {prefix}"
            )
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt pickle, wrong format
        raise InitializationError(f"could not read {path}: {exc}") from exc

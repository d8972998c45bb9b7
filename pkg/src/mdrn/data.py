"""Image corpora: manifests, 8-bit PNG I/O and the flat patch-archive format."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")
COLOR_MODES = ("gray", "rgb")

# ITU-R BT.601 luma weights
BT601 = np.array([0.299, 0.587, 0.114])


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) 8-bit RGB -> (H, W) 8-bit luma, rounded half-up."""
    y = rgb[..., :3].astype(np.float64) @ BT601
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def read_image(path, color: str = "gray") -> np.ndarray:
    """Decode an 8-bit image into a float32 (C, H, W) array in [0, 1]."""
    if color not in COLOR_MODES:
        raise ConfigError(f"unknown color mode {color!r}")
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    if color == "gray":
        if arr.ndim == 3:
            arr = to_gray(arr)
        arr = arr[None]
    else:
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def quantize(x) -> np.ndarray:
    """[0, 1] floats -> uint8 with clipping and round-half-up."""
    x = np.asarray(x, dtype=np.float64)
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, x):
    """Write a (C, H, W) or (H, W) array in [0, 1] as an 8-bit PNG."""
    q = quantize(x)
    if q.ndim == 3:
        q = q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)


@dataclass
class CorpusManifest:
    root: Path
    ids: list[str]
    color: str = "gray"
    splits: dict[str, str] = field(default_factory=dict)
    _warned: set = field(default_factory=set, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.color not in COLOR_MODES:
            raise ConfigError(f"unknown color mode {self.color!r}")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("manifest ids must be unique")

    @classmethod
    def from_directory(cls, root, color="gray", split="train") -> "CorpusManifest":
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"corpus directory not found: {root}")
        ids = sorted(p.name for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return cls(root, ids, color, {i: split for i in ids})

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        """Read a JSON manifest, or a plain-text list of file names (root = its directory)."""
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        if path.suffix == ".json":
            d = json.loads(path.read_text())
            root = Path(d.get("root", "."))
            if not root.is_absolute():
                root = path.parent / root
            return cls(root, list(d["ids"]), d.get("color", "gray"), dict(d.get("splits", {})))
        ids = [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        return cls(path.parent, ids)

    def save(self, path):
        d = {"root": str(self.root), "ids": self.ids, "color": self.color, "splits": self.splits}
        Path(path).write_text(json.dumps(d, indent=2) + "\n")

    def select(self, split: str) -> "CorpusManifest":
        ids = [i for i in self.ids if self.splits.get(i) == split]
        return CorpusManifest(self.root, ids, self.color, {i: split for i in ids})

    @property
    def channels(self) -> int:
        return 1 if self.color == "gray" else 3

    def path(self, image_id: str) -> Path:
        return self.root / image_id

    def read(self, image_id: str) -> np.ndarray:
        return read_image(self.path(image_id), self.color)

    @cached_property
    def images(self) -> dict[str, np.ndarray]:
        """Every image decoded once; decode failures are logged and dropped."""
        out = {}
        for i in self.ids:
            try:
                out[i] = self.read(i)
            except DataError as e:
                log.warning("%s", e)
        return out

    def images_at_least(self, size: int) -> list[np.ndarray]:
        """Decoded images whose both sides are >= size; smaller ones are skipped with a warning."""
        if not self.ids:
            raise DataError(f"empty manifest for {self.root}")
        pool = []
        for image_id, img in self.images.items():
            if min(img.shape[-2:]) < size:
                if (image_id, size) not in self._warned:
                    log.warning("skipping %s: %s smaller than patch %d", image_id, img.shape[-2:], size)
                    self._warned.add((image_id, size))
                continue
            pool.append(img)
        if not pool:
            raise DataError(f"no image in {self.root} is at least {size}x{size}")
        return pool


# Patch archive: magic, uint8 dtype-string length, dtype string (numpy str,
# e.g. "<f4"), uint32 ndim, ndim x uint32 dims, then the row-major payload.
ARCHIVE_MAGIC = b"MDRNPAT1"


def save_patch_archive(path, array: np.ndarray):
    a = np.ascontiguousarray(array)
    dt = a.dtype.str.encode("ascii")
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<B", len(dt)) + dt)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes(order="C"))


def load_patch_archive(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(len(ARCHIVE_MAGIC)) != ARCHIVE_MAGIC:
            raise DataError(f"{path} is not a patch archive")
        (n,) = struct.unpack("<B", f.read(1))
        dtype = np.dtype(f.read(n).decode("ascii"))
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        payload = f.read()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

"""Dataset manifests: disjoint unlabeled / train / test split of image files.

File format (UTF-8 text)::

    # diffseg manifest v1
    #num_classes=3
    #patch_size=64
    #stride=64
    #skipped=<path>            (zero or more)
    <split>\t<image path>\t<mask path or ->

Paths are relative to the manifest's directory.  ``split`` is one of
``unlabeled``, ``train``, ``validation``, ``test``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError, DataError
from .io import read_image, read_mask, write_image, write_mask
from .patches import LabeledPatch, extract_patches
from .synth import synth_generate

SPLITS = ("unlabeled", "train", "validation", "test")
IMAGE_SUFFIXES = (".png", ".rawf")


@dataclass
class ManifestEntry:
    split: str
    image: str
    mask: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    num_classes: int = 3
    patch_size: int = 64
    stride: int = 64
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.validate()

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split tag {e.split!r} for {e.image}")
            if e.split != "unlabeled" and not e.mask:
                raise DataError(f"labeled entry {e.image} ({e.split}) has no mask")
            key = os.path.normpath(e.image)
            if key in seen:
                raise DataError(f"{e.image} appears in both {seen[key]} and {e.split}")
            seen[key] = e.split

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def write(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.txt"
        lines = ["# diffseg manifest v1", f"#num_classes={self.num_classes}",
                 f"#patch_size={self.patch_size}", f"#stride={self.stride}"]
        lines += [f"#skipped={s}" for s in self.skipped]
        lines += [f"{e.split}\t{e.image}\t{e.mask or '-'}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> DatasetManifest:
        path = Path(path)
        header = {"num_classes": 3, "patch_size": 64, "stride": 64}
        skipped, entries = [], []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("# "):
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                if key == "skipped":
                    skipped.append(val)
                elif key in header:
                    header[key] = int(val)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            split, image, mask = parts
            entries.append(ManifestEntry(split, image, None if mask == "-" else mask))
        return cls(path.parent, entries, skipped=skipped, **header)

    # -- patch loading --------------------------------------------------------
    def load_patches(self, split: str, stride: int | None = None,
                     labeled: bool | None = None) -> list[LabeledPatch]:
        """Extract patches from every image of ``split``.

        Test patches default to ``stride = patch_size`` (no overlap).
        """
        if stride is None:
            stride = self.patch_size if split == "test" else self.stride
        labeled = split != "unlabeled" if labeled is None else labeled
        out = []
        for e in self.split(split):
            img = read_image(self.resolve(e.image))
            mask = read_mask(self.resolve(e.mask)) if labeled and e.mask else None
            if mask is not None and mask.max() >= self.num_classes:
                raise DataError(f"{e.mask}: class index {mask.max()} >= num_classes "
                                f"{self.num_classes}")
            patches = extract_patches(img, mask, self.patch_size, stride, source=e.image,
                                      num_classes=self.num_classes if mask is not None else None)
            if not patches and e.image not in self.skipped:
                self.skipped.append(e.image)
            out.extend(patches)
        return out


def _split_counts(n: int, fractions) -> list[int]:
    fractions = list(fractions)
    if len(fractions) == 3:
        fractions = [fractions[0], fractions[1], 0.0, fractions[2]]
    if len(fractions) != 4 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise ConfigError(f"split fractions must be 3 or 4 non-negative values, got {fractions}")
    total = sum(fractions)
    raw = [n * f / total for f in fractions]
    counts = [math.floor(r) for r in raw]
    # largest remainder
    for i in sorted(range(4), key=lambda i: raw[i] - counts[i], reverse=True)[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _image_extent(path: Path) -> tuple[int, int]:
    if path.suffix == ".rawf":
        return read_image(path).shape[:2]
    with Image.open(path) as im:
        return im.height, im.width


def build_manifest(root, split_fractions=(0.6, 0.3, 0.1), rng=None, *, num_classes: int = 3,
                   patch_size: int = 64, stride: int = 64, write: bool = True) -> DatasetManifest:
    """Assign the images under ``root/images`` to disjoint splits.

    Masks are looked up as ``root/masks/<same name>``.  Fractions are
    (unlabeled, train, test) or (unlabeled, train, validation, test).  Images
    without a mask can only be unlabeled.  Images smaller than one patch keep
    their split entry but are listed as skipped.
    """
    root = Path(root)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"{root}: no images/ directory")
    files = sorted(p.name for p in image_dir.iterdir() if p.suffix in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{image_dir}: no images found")
    has_mask = {f: (root / "masks" / f).exists() for f in files}
    order = [files[i] for i in rng.permutation(len(files))]
    n_unl, n_tr, n_val, n_te = _split_counts(len(files), split_fractions)

    unlabeled_only = [f for f in order if not has_mask[f]]
    with_mask = [f for f in order if has_mask[f]]
    n_labeled = n_tr + n_val + n_te
    if n_labeled > len(with_mask):
        raise DataError(f"labeled split needs {n_labeled} masked images but only "
                        f"{len(with_mask)} have masks; missing e.g. masks/{unlabeled_only[0]}")
    labeled = with_mask[:n_labeled]
    unlabeled = unlabeled_only + with_mask[n_labeled:]
    entries = [ManifestEntry("unlabeled", f"images/{f}") for f in unlabeled]
    bounds = {"train": labeled[:n_tr], "validation": labeled[n_tr:n_tr + n_val],
              "test": labeled[n_tr + n_val:]}
    for split, names in bounds.items():
        entries += [ManifestEntry(split, f"images/{f}", f"masks/{f}") for f in names]
    skipped = [e.image for e in entries if min(_image_extent(root / e.image)) < patch_size]
    manifest = DatasetManifest(root, entries, num_classes, patch_size, stride, skipped)
    if write:
        manifest.write()
    return manifest


def write_synth_dataset(out_dir, n_images: int, side: int = 64, seed: int = 0,
                        split_fractions=(0.6, 0.3, 0.1), *, patch_size: int = 64,
                        stride: int = 64, shares=None) -> DatasetManifest:
    """Generate ``n_images`` synthetic image/mask PNG pairs plus a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images, masks = synth_generate(n_images, side, 3, rng, shares)
    width = max(3, len(str(n_images - 1)))
    for i, (img, mask) in enumerate(zip(images, masks)):
        name = f"tile_{i:0{width}d}.png"
        write_image(out / "images" / name, img)
        write_mask(out / "masks" / name, mask)
    return build_manifest(out, split_fractions, np.random.default_rng([seed, 1]),
                          patch_size=patch_size, stride=stride)

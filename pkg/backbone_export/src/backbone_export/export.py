"""Bridge from image files to TKFM feature-map files.

For each image and scale the bridge resizes preserving aspect ratio, runs
the final convolutional feature map of a torchvision backbone, and writes
one TKFM file (the binary contract of the aggregation pipeline:
magic "TKFM", version u32, C/H/W u32, float32 little-endian payload laid
out [C][H][W]). A JSON manifest maps every image id to its per-scale
files; unreadable images are skipped and recorded.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SCALES = (1.0 / math.sqrt(2.0), 1.0, math.sqrt(2.0))
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}

# channel statistics the torchvision backbones were trained with
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class ExportSpec:
    image_dir: str
    output_dir: str
    scales: tuple[float, ...] = DEFAULT_SCALES
    max_larger_dim: int = 1024
    backbone: str = "resnet18"
    pretrained: bool = False
    torch_seed: int = 0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales:
            raise ValueError("at least one scale required")
        if self.max_larger_dim < 1:
            raise ValueError(f"max larger dimension must be >= 1, got {self.max_larger_dim}")


def scaled_size(width: int, height: int, scale: float, max_larger_dim: int) -> tuple[int, int]:
    """Resize rule: larger dimension becomes round(max_larger_dim * scale)."""
    larger = max(width, height)
    target_larger = max(1, round(max_larger_dim * scale))
    factor = target_larger / larger
    return max(1, round(width * factor)), max(1, round(height * factor))


def write_tkfm(path, values: np.ndarray):
    """Independent TKFM writer implementing the documented layout."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"feature map must be C x H x W, got shape {values.shape}")
    c, h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"TKFM")
        fh.write(struct.pack("<IIII", 1, c, h, w))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


class TorchBackbone:
    """Final convolutional feature map of a torchvision classification net."""

    def __init__(self, name: str = "resnet18", pretrained: bool = False, seed: int = 0):
        import torch
        import torchvision.models

        torch.manual_seed(seed)
        factory = getattr(torchvision.models, name, None)
        if factory is None:
            raise ValueError(f"unknown torchvision backbone {name!r}")
        weights = "DEFAULT" if pretrained else None
        model = factory(weights=weights)
        # drop the pooling/classifier tail; works for the resnet family
        self._torch = torch
        self._features = torch.nn.Sequential(*list(model.children())[:-2]).eval()

    def __call__(self, image_rgb: np.ndarray) -> np.ndarray:
        """(H, W, 3) uint8 -> (C, H', W') float32 feature map."""
        x = image_rgb.astype(np.float32) / 255.0
        x = (x - IMAGENET_MEAN) / IMAGENET_STD
        tensor = self._torch.from_numpy(x.transpose(2, 0, 1)[None])
        with self._torch.no_grad():
            out = self._features(tensor)
        return out[0].numpy()


def list_images(image_dir: str) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {image_dir!r} does not exist")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def export_features(spec: ExportSpec, backbone=None) -> dict:
    """Export one TKFM per (image, scale) plus a manifest.

    Returns the manifest payload: items with id, per-scale relative file
    paths, and per-scale resized image sizes; skipped entries carry the
    failure reason. Deterministic for a sorted input listing.
    """
    from PIL import Image

    if backbone is None:
        backbone = TorchBackbone(spec.backbone, spec.pretrained, spec.torch_seed)
    out_root = Path(spec.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    items = []
    skipped = []
    for path in list_images(spec.image_dir):
        item_id = path.stem
        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB")
                relative = []
                sizes = []
                for scale_index, scale in enumerate(spec.scales):
                    w, h = scaled_size(rgb.width, rgb.height, scale, spec.max_larger_dim)
                    resized = np.asarray(rgb.resize((w, h), Image.BILINEAR))
                    features = backbone(resized)
                    rel = f"{item_id}_s{scale_index}.tkfm"
                    write_tkfm(out_root / rel, features)
                    relative.append(rel)
                    sizes.append([h, w])
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping {path.name}: {exc}")
            skipped.append({"path": path.name, "reason": str(exc)})
            continue
        items.append({
            "id": item_id,
            "scales": relative,
            "image_sizes": sizes,
            "scale_factors": list(spec.scales),
        })

    manifest = {"items": items, "skipped": skipped}
    with open(out_root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest

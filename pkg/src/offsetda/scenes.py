"""Seeded synthetic scenes: labeled source images and shifted target twins.

Scenes are procedurally drawn 3-channel float images in [0,1] with one
distinct silhouette per class (disc, box, triangle). A DomainShift maps a
clean scene to its degraded counterpart (fog or photometric style) without
touching boxes or labels, so target ground truth stays valid for
evaluation-only use.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

CLASS_NAMES = ("disc", "box", "triangle")


def subseed(seed, name):
    """Stable named sub-stream of a global seed."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (128, 128)  # (H, W)
    num_classes: int = 3
    objects_range: tuple = (1, 6)   # inclusive count range per scene
    side_range: tuple = (6, 56)     # object bounding-square side, pixels
    background_seed: int = 0

    def validate(self):
        h, w = self.image_size
        lo, hi = self.objects_range
        smin, smax = self.side_range
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not (0 <= lo <= hi):
            raise ValueError(f"bad objects_range {self.objects_range}")
        if not (1 <= smin <= smax):
            raise ValueError(f"bad side_range {self.side_range}")
        if smax > min(h, w):
            raise ValueError(f"objects of side {smax} cannot fit in "
                             f"a {h}x{w} image")


@dataclass
class Scene:
    image: np.ndarray            # (3, H, W) float64 in [0,1]
    boxes: np.ndarray            # (K, 4) pixel (x1,y1,x2,y2), origin top-left
    labels: np.ndarray           # (K,) int class ids

    def validate(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels length mismatch")
        if len(self.boxes) and not (np.all(self.boxes[:, 0] < self.boxes[:, 2])
                                    and np.all(self.boxes[:, 1] < self.boxes[:, 3])):
            raise ValueError("degenerate box")


@dataclass(frozen=True)
class DomainShift:
    kind: str = "fog"            # fog | style
    fog_beta: float = 0.0        # blend weight toward uniform gray
    blur_radius: float = 0.0     # Gaussian sigma in pixels
    style_gain: tuple = (1.0, 1.0, 1.0)
    style_bias: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    # smaller objects get proportionally thicker fog, mimicking
    # depth-dependent attenuation
    fog_depth_boost: float = 0.6

    def validate(self):
        if self.kind not in ("fog", "style"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not 0.0 <= self.fog_beta <= 1.0:
            raise ValueError("fog_beta must lie in [0,1]")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError("blur_radius and noise_sigma must be >= 0")


def _draw_background(rng, h, w):
    """Smooth ramp plus blurred noise, mid-range intensities."""
    img = np.empty((3, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for c in range(3):
        gx, gy = rng.uniform(-0.25, 0.25, size=2)
        base = rng.uniform(0.3, 0.6)
        ramp = base + gx * (xx / w - 0.5) + gy * (yy / h - 0.5)
        noise = gaussian_filter(rng.normal(0.0, 1.0, size=(h, w)), 6.0)
        noise *= 0.15 / max(noise.std(), 1e-9)
        img[c] = ramp + noise
    return np.clip(img, 0.05, 0.95)


def _silhouette(label, side, rng):
    """Filled 0/1 mask of the class shape inside a side x side square."""
    yy, xx = np.mgrid[0:side, 0:side]
    if label % 3 == 0:      # disc
        r = (side - 1) / 2.0
        return ((xx - r) ** 2 + (yy - r) ** 2) <= r ** 2
    if label % 3 == 1:      # box, mildly rectangular
        shrink = int(rng.integers(0, max(side // 4, 1)))
        mask = np.zeros((side, side), dtype=bool)
        mask[:, shrink:side - shrink] = True
        return mask
    # triangle, apex up
    base = side - 1
    frac = np.where(yy == 0, 0.0, yy / base)
    half_width = frac * (base / 2.0)
    cx = base / 2.0
    return np.abs(xx - cx) <= half_width


def _tight_box(mask, x0, y0):
    ys, xs = np.nonzero(mask)
    return np.array([x0 + xs.min(), y0 + ys.min(),
                     x0 + xs.max() + 1, y0 + ys.max() + 1], dtype=np.float64)


def generate_scene(seed, spec: SceneSpec) -> Scene:
    """Deterministically draw one labeled scene for (seed, spec)."""
    spec.validate()
    h, w = spec.image_size
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), int(spec.background_seed)]))

    image = _draw_background(rng, h, w)
    lo, hi = spec.objects_range
    count = int(rng.integers(lo, hi + 1))
    boxes, labels = [], []
    for _ in range(count):
        label = int(rng.integers(0, spec.num_classes))
        side = int(rng.integers(spec.side_range[0], spec.side_range[1] + 1))
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        mask = _silhouette(label, side, rng)

        patch = image[:, y0:y0 + side, x0:x0 + side]
        bg_mean = patch.mean(axis=(1, 2))
        fill = rng.uniform(0.0, 1.0, size=3)
        # keep objects visible: push fill away from the local background
        for c in range(3):
            if abs(fill[c] - bg_mean[c]) < 0.2:
                fill[c] = bg_mean[c] + 0.35 if bg_mean[c] < 0.5 else bg_mean[c] - 0.35
        fill = np.clip(fill, 0.0, 1.0)
        shade = 1.0 - 0.15 * rng.uniform(size=(side, side))  # mild texture
        for c in range(3):
            patch[c][mask] = (fill[c] * shade)[mask]

        box = _tight_box(mask, x0, y0)
        box[0::2] = np.clip(box[0::2], 0, w)
        box[1::2] = np.clip(box[1::2], 0, h)
        boxes.append(box)
        labels.append(label)

    scene = Scene(
        image=np.clip(image, 0.0, 1.0),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.array(labels, dtype=np.int64),
    )
    scene.validate()
    return scene


def apply_shift(scene: Scene, shift: DomainShift, seed) -> Scene:
    """Label-preserving photometric domain shift."""
    shift.validate()
    img = scene.image.copy()
    h, w = img.shape[1:]

    if shift.kind == "fog":
        beta_map = np.full((h, w), shift.fog_beta)
        if len(scene.boxes):
            smin, smax = 1.0, max(h, w)
            sides = np.maximum(scene.boxes[:, 2] - scene.boxes[:, 0],
                               scene.boxes[:, 3] - scene.boxes[:, 1])
            for box, side in zip(scene.boxes, sides):
                size_norm = (side - smin) / (smax - smin)
                boost = 1.0 + shift.fog_depth_boost * (1.0 - size_norm)
                x1, y1, x2, y2 = box.astype(int)
                region = beta_map[y1:y2, x1:x2]
                np.maximum(region, min(shift.fog_beta * boost, 1.0), out=region)
        img = (1.0 - beta_map) * img + beta_map * 0.5
        if shift.blur_radius > 0:
            for c in range(3):
                img[c] = gaussian_filter(img[c], shift.blur_radius,
                                         mode="nearest")
    else:
        rng = np.random.default_rng(subseed(seed, "style"))
        gain = np.asarray(shift.style_gain, dtype=np.float64)[:, None, None]
        bias = np.asarray(shift.style_bias, dtype=np.float64)[:, None, None]
        img = gain * img + bias
        if shift.noise_sigma > 0:
            img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)

    return Scene(image=np.clip(img, 0.0, 1.0),
                 boxes=scene.boxes.copy(),
                 labels=scene.labels.copy())


def build_dataset(spec: SceneSpec, shift: DomainShift, n_source, n_target,
                  seed):
    """Disjoint seeded source/target splits.

    Target scenes keep their ground truth, but it is evaluation-only:
    training code must never read target boxes or labels.
    """
    src_seeds = subseed(seed, "source-scenes").generate_state(max(n_source, 1))
    tgt_seeds = subseed(seed, "target-scenes").generate_state(max(n_target, 1))
    shift_seeds = subseed(seed, "target-shift").generate_state(max(n_target, 1))

    source = [generate_scene(int(s), spec) for s in src_seeds[:n_source]]
    target = [apply_shift(generate_scene(int(s), spec), shift, int(ss))
              for s, ss in zip(tgt_seeds[:n_target], shift_seeds[:n_target])]
    return source, target


# -- disk interchange -------------------------------------------------------


def save_split(directory, scenes, prefix="scene"):
    """Write PNG images plus one JSON annotation file for a split."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        fname = f"{prefix}_{i:05d}.png"
        arr = np.round(scene.image * 255.0).astype(np.uint8)
        Image.fromarray(np.moveaxis(arr, 0, 2)).save(directory / fname)
        records.append({
            "file": fname,
            "boxes": [[float(v) for v in box] for box in scene.boxes],
            "labels": [int(v) for v in scene.labels],
        })
    with open(directory / "annotations.json", "w") as fh:
        json.dump(records, fh, indent=1)


def load_split(directory):
    from pathlib import Path
    directory = Path(directory)
    with open(directory / "annotations.json") as fh:
        records = json.load(fh)
    scenes = []
    for rec in records:
        arr = np.asarray(Image.open(directory / rec["file"]), dtype=np.float64)
        scenes.append(Scene(
            image=np.moveaxis(arr, 2, 0) / 255.0,
            boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
            labels=np.asarray(rec["labels"], dtype=np.int64),
        ))
    return scenes

"""Synthetic two-domain image generator with controllable style shift,
plus a small on-disk format (manifest.json + raw float32 payload).

Each class draws an oriented bright bar on a dark background with
per-sample jitter in angle, position, width and amplitude.  The target
domain applies a style transform (partial intensity inversion, contrast
and brightness changes, extra texture noise, small rotation offset) that
preserves the class geometry while shifting the appearance.

Pixel values are quantized to float32 precision at generation time so a
save/load round-trip through the float32 payload is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError

DATASET_FORMAT_VERSION = 1
PAYLOAD_NAME = "images.f32"


@dataclass
class ShiftSpec:
    """Style transform applied to the target domain."""

    invert: float = 0.0       # blend toward 1-x, in [0, 1]
    noise: float = 0.0        # extra additive noise std, in [0, 0.5]
    brightness: float = 0.0   # additive offset, in [-0.5, 0.5]
    contrast: float = 1.0     # scale around 0.5, in (0, 3]
    rotation: float = 0.0     # bar angle offset in radians, in [-0.5, 0.5]

    def validate(self):
        if not 0.0 <= self.invert <= 1.0:
            raise ConfigurationError(f"shift.invert must be in [0, 1], got {self.invert}")
        if not 0.0 <= self.noise <= 0.5:
            raise ConfigurationError(f"shift.noise must be in [0, 0.5], got {self.noise}")
        if not -0.5 <= self.brightness <= 0.5:
            raise ConfigurationError(f"shift.brightness must be in [-0.5, 0.5], got {self.brightness}")
        if not 0.0 < self.contrast <= 3.0:
            raise ConfigurationError(f"shift.contrast must be in (0, 3], got {self.contrast}")
        if not -0.5 <= self.rotation <= 0.5:
            raise ConfigurationError(f"shift.rotation must be in [-0.5, 0.5], got {self.rotation}")


@dataclass
class SyntheticTaskSpec:
    num_classes: int = 4
    samples_per_domain: int = 512
    image_side: int = 16
    channels: int = 1
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_domain < self.num_classes:
            raise ConfigurationError("samples_per_domain must be >= num_classes")
        if self.image_side < 4:
            raise ConfigurationError("image_side must be >= 4")
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1")
        self.shift.validate()


@dataclass
class DomainSample:
    image: np.ndarray
    label: int
    domain: str
    id: int


class DomainSet:
    """A domain's samples as stacked arrays with per-sample access."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, domain: str,
                 num_classes: int, ids=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.intp)
        self.domain = domain
        self.num_classes = num_classes
        self.ids = np.arange(len(self.labels)) if ids is None else np.asarray(ids, dtype=np.intp)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> DomainSample:
        return DomainSample(self.images[i], int(self.labels[i]), self.domain, int(self.ids[i]))


def _balanced_labels(n: int, num_classes: int) -> np.ndarray:
    # round-robin keeps per-class counts within +-1
    return np.arange(n, dtype=np.intp) % num_classes


def _render_bar(side: int, angle: float, cx: float, cy: float,
                width: float, amplitude: float, background: float) -> np.ndarray:
    coords = np.arange(side, dtype=np.float64) - (side - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dist = np.abs(-(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle))
    return background + amplitude * np.exp(-(dist * dist) / (2.0 * width * width))


def _render_domain(spec: SyntheticTaskSpec, labels: np.ndarray, rng,
                   shift: ShiftSpec | None) -> np.ndarray:
    side = spec.image_side
    images = np.empty((len(labels), spec.channels, side, side))
    for i, label in enumerate(labels):
        angle = np.pi * label / spec.num_classes + rng.normal(0.0, 0.10)
        if shift is not None:
            angle += shift.rotation
        cx, cy = rng.uniform(-2.0, 2.0, size=2)
        width = 1.5 + rng.normal(0.0, 0.2)
        amplitude = 0.7 + rng.normal(0.0, 0.08)
        background = 0.15 + rng.normal(0.0, 0.03)
        img = _render_bar(side, angle, cx, cy, max(width, 0.6), amplitude, background)
        img = img + rng.normal(0.0, 0.03, size=img.shape)
        if shift is not None:
            img = 0.5 + (img - 0.5) * shift.contrast
            img = img + shift.brightness
            img = (1.0 - shift.invert) * img + shift.invert * (1.0 - img)
            if shift.noise > 0:
                img = img + rng.normal(0.0, shift.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        images[i] = np.broadcast_to(img, (spec.channels, side, side))
    # quantize so the float32 on-disk payload round-trips bit-exactly
    return images.astype("<f4").astype(np.float64)


def generate(spec: SyntheticTaskSpec) -> tuple[DomainSet, DomainSet]:
    """Produce (source, target) sets; target labels are kept for evaluation."""
    spec.validate()
    src_seq, tgt_seq = np.random.SeedSequence(spec.seed).spawn(2)
    labels = _balanced_labels(spec.samples_per_domain, spec.num_classes)
    src_images = _render_domain(spec, labels, np.random.default_rng(src_seq), None)
    tgt_images = _render_domain(spec, labels, np.random.default_rng(tgt_seq), spec.shift)
    source = DomainSet(src_images, labels, "source", spec.num_classes)
    target = DomainSet(tgt_images, labels.copy(), "target", spec.num_classes)
    return source, target


# ---------------------------------------------------------------------------
# on-disk format


def save_dataset(dataset: DomainSet, path):
    """Write manifest.json plus a flat little-endian float32 payload."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "num_classes": int(dataset.num_classes),
        "height": int(h),
        "width": int(w),
        "channels": int(c),
        "domain": dataset.domain,
        "payload": PAYLOAD_NAME,
        "samples": [
            {"id": int(i), "label": int(l)} for i, l in zip(dataset.ids, dataset.labels)
        ],
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    dataset.images.astype("<f4").tofile(path / PAYLOAD_NAME)


def load_dataset(path) -> DomainSet:
    path = Path(path)
    manifest_path = path / "manifest.json"
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IngestionError(f"{manifest_path}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: malformed JSON ({exc})") from exc

    required = {"format_version", "num_classes", "height", "width", "channels", "domain", "payload", "samples"}
    missing = required - manifest.keys()
    if missing:
        raise IngestionError(f"{manifest_path}: missing fields {sorted(missing)}")
    if manifest["format_version"] != DATASET_FORMAT_VERSION:
        raise IngestionError(f"{manifest_path}: unsupported format_version {manifest['format_version']}")

    n = len(manifest["samples"])
    c, h, w = manifest["channels"], manifest["height"], manifest["width"]
    labels = np.array([s["label"] for s in manifest["samples"]], dtype=np.intp)
    ids = np.array([s["id"] for s in manifest["samples"]], dtype=np.intp)
    if n and (labels.min() < 0 or labels.max() >= manifest["num_classes"]):
        raise IngestionError(
            f"{manifest_path}: labels exceed num_classes {manifest['num_classes']}"
        )

    payload_path = path / manifest["payload"]
    try:
        raw = np.fromfile(payload_path, dtype="<f4")
    except OSError as exc:
        raise IngestionError(f"{payload_path}: cannot read payload ({exc})") from exc
    expected = n * c * h * w
    if raw.size != expected:
        raise IngestionError(
            f"{payload_path}: payload holds {raw.size} values, expected {expected}"
        )
    images = raw.astype(np.float64).reshape(n, c, h, w)
    return DomainSet(images, labels, manifest["domain"], manifest["num_classes"], ids)


def spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> SyntheticTaskSpec:
    d = dict(d)
    shift = d.pop("shift", {})
    if isinstance(shift, dict):
        shift = ShiftSpec(**shift)
    return SyntheticTaskSpec(shift=shift, **d)

"""Datasets, the synthetic confusable-pairs generator, and episode sampling."""
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError, InsufficientData, InvalidSpec
from .tensorio import atomic_write_text, load_tensors, save_tensors

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Images with string class labels; each class belongs to exactly one split.

    ``split`` is ``None`` for a full dataset and the split name for a view
    returned by :meth:`subset`.
    """

    images: np.ndarray
    labels: np.ndarray
    class_splits: dict
    split: str = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=object)
        if len(self.images) != len(self.labels):
            raise InvalidSpec("images and labels differ in length")
        self._index = {}
        for i, lab in enumerate(self.labels):
            self._index.setdefault(lab, []).append(i)
        self._index = {k: np.asarray(v, dtype=np.int64) for k, v in self._index.items()}

    @property
    def classes(self):
        return sorted(self._index)

    @property
    def class_index(self):
        return self._index

    @property
    def image_size(self):
        return self.images.shape[1]

    @property
    def channels(self):
        return self.images.shape[3]

    def subset(self, split):
        if split not in SPLITS:
            raise InvalidSpec(f"unknown split {split!r}")
        keep = {c for c, s in self.class_splits.items() if s == split}
        mask = np.array([lab in keep for lab in self.labels], dtype=bool)
        return Dataset(
            self.images[mask],
            self.labels[mask],
            {c: s for c, s in self.class_splits.items() if c in keep},
            split=split,
            meta=self.meta,
        )


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: list
    support_ids: np.ndarray
    query_ids: np.ndarray

    @property
    def n_way(self):
        return len(self.class_map)

    @property
    def k_shot(self):
        return len(self.support_labels) // self.n_way

    def to_tensors(self):
        return {
            "support_images": self.support_images,
            "support_labels": self.support_labels.astype(np.float64),
            "query_images": self.query_images,
            "query_labels": self.query_labels.astype(np.float64),
        }


def sample_episode(dataset, n_way, k_shot, t_query, rng):
    """Draw an N-way K-shot episode with T queries per class.

    Classes are chosen without replacement from ``dataset.classes``; within
    each class ``K + T`` items are drawn without replacement and split K/T.
    Support and query arrays are class-major with episode-local labels.
    """
    if n_way < 2 or k_shot < 1 or t_query < 1:
        raise InvalidSpec("need N >= 2, K >= 1, T >= 1")
    classes = [c for c in dataset.classes if len(dataset.class_index[c]) >= k_shot + t_query]
    if len(classes) < n_way:
        raise InsufficientData(
            f"{len(classes)} classes with >= {k_shot + t_query} items, episode needs {n_way}"
        )
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    sup, qry = [], []
    for c in chosen:
        idx = dataset.class_index[c]
        pick = idx[rng.choice(len(idx), size=k_shot + t_query, replace=False)]
        sup.append(pick[:k_shot])
        qry.append(pick[k_shot:])
    sup, qry = np.concatenate(sup), np.concatenate(qry)
    return Episode(
        support_images=dataset.images[sup],
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query_images=dataset.images[qry],
        query_labels=np.repeat(np.arange(n_way), t_query),
        class_map=chosen,
        support_ids=sup,
        query_ids=qry,
    )


# Synthetic data.


def split_sizes(n_classes):
    n_val = max(2, int(round(0.2 * n_classes)))
    n_test = max(2, int(round(0.2 * n_classes)))
    return n_classes - n_val - n_test, n_val, n_test


def _grating(rng, size, freq, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic generator (all intensities on the [0, 1] scale)."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    color_low: float = 0.3
    color_high: float = 0.7
    min_color_gap: float = 0.2
    image_color_jitter: float = 0.02
    patch_color_jitter: float = 0.25
    pixel_noise: float = 0.04
    amplitude: tuple = (0.06, 0.09)
    freq_range: tuple = (0.1, 0.2)
    min_theta_gap: float = np.pi / 4


def _class_signatures(rng, n, spec):
    """Chain layout inside one split: classes 2j and 2j+1 share a colour,
    classes 2j+1 and 2j+2 share a texture."""
    color_ids = [j // 2 for j in range(n)]
    texture_ids = [(j + 1) // 2 for j in range(n)]
    colors = []
    while len(colors) < max(color_ids) + 1:
        cand = rng.uniform(spec.color_low, spec.color_high, size=spec.channels)
        if all(np.linalg.norm(cand - c) >= spec.min_color_gap for c in colors[-3:]):
            colors.append(cand)
    textures = []
    for _ in range(max(texture_ids) + 1):
        mix = np.abs(rng.normal(size=spec.channels)) + 0.3
        theta = rng.uniform(0.0, np.pi)
        if textures:
            # orientations are compared modulo pi
            prev = textures[-1]["theta"]
            while abs((theta - prev + np.pi / 2) % np.pi - np.pi / 2) < spec.min_theta_gap:
                theta = rng.uniform(0.0, np.pi)
        textures.append(
            {
                "amplitude": rng.uniform(*spec.amplitude),
                "freq": rng.uniform(*spec.freq_range),
                "theta": theta,
                "mix": mix / np.linalg.norm(mix) * np.sqrt(spec.channels),
            }
        )
    return [(colors[ci], textures[ti], ci, ti) for ci, ti in zip(color_ids, texture_ids)]


def _render(rng, color, texture, spec):
    s, p, ch = spec.image_size, spec.patch_size, spec.channels
    img = np.empty((s, s, ch))
    img[...] = color + rng.normal(0.0, spec.image_color_jitter, size=ch)
    g = s // p
    offsets = rng.normal(0.0, spec.patch_color_jitter, size=(g, g, ch))
    offsets -= offsets.mean(axis=(0, 1))
    img += np.repeat(np.repeat(offsets, p, axis=0), p, axis=1)
    pattern = _grating(rng, s, texture["freq"], texture["theta"])
    img += texture["amplitude"] * pattern[:, :, None] * texture["mix"][None, None, :]
    img += rng.normal(0.0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synthetic(n_classes, per_class, seed, spec=None):
    """Procedural few-shot dataset with colour and texture confusable pairs.

    Classes are split 60/20/20 into train/val/test. Within every split the
    classes form a chain: consecutive even/odd classes share their mean colour
    but not their texture, consecutive odd/even classes share their texture but
    not their colour. ``meta["confusable_pairs"]`` lists both kinds.
    """
    spec = spec or SyntheticSpec()
    if n_classes < 10:
        raise InvalidSpec(f"need at least 10 classes, got {n_classes}")
    if per_class < 2:
        raise InvalidSpec(f"need at least 2 images per class, got {per_class}")
    if spec.image_size % spec.patch_size:
        raise InvalidSpec("image_size must be divisible by patch_size")
    rng = np.random.default_rng(seed)
    sizes = split_sizes(n_classes)
    images, labels, class_splits = [], [], {}
    same_color, same_texture = [], []
    for split, n in zip(SPLITS, sizes):
        sigs = _class_signatures(rng, n, spec)
        names = [f"{split}_{j:03d}" for j in range(n)]
        for j, (color, texture, _, _) in enumerate(sigs):
            class_splits[names[j]] = split
            for _ in range(per_class):
                images.append(_render(rng, color, texture, spec))
                labels.append(names[j])
            if j + 1 < n:
                (same_color if j % 2 == 0 else same_texture).append([names[j], names[j + 1]])
    meta = {
        "generator": "confusable-chain",
        "seed": int(seed),
        "confusable_pairs": {"same_color": same_color, "same_texture": same_texture},
    }
    return Dataset(np.stack(images), np.array(labels, dtype=object), class_splits, meta=meta)


def image_moment_stats(images, patch_size):
    """Mean colour ``(C,)`` and patchwise second-moment matrix of a class.

    The second moment is ``E[d d^T]`` over all patches of all images, where
    ``d`` is a patch flattened to ``patch_size**2 * C`` values after removing
    that patch's own per-channel mean.
    """
    x = np.asarray(images, dtype=np.float64)
    b, s, _, ch = x.shape
    g = s // patch_size
    patches = x.reshape(b, g, patch_size, g, patch_size, ch).transpose(0, 1, 3, 2, 4, 5)
    dev = patches - patches.mean(axis=(3, 4), keepdims=True)
    dev = dev.reshape(-1, patch_size * patch_size * ch)
    return x.mean(axis=(0, 1, 2)), dev.T @ dev / len(dev)


# Manifest format.


def save_dataset(dataset, out_dir):
    """Write one tensor-container blob per image plus ``manifest.json``."""
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "blobs"), exist_ok=True)
    classes = []
    for c in dataset.classes:
        paths = []
        for n, i in enumerate(dataset.class_index[c]):
            rel = f"blobs/{c}_{n:04d}.stnt"
            save_tensors(os.path.join(out_dir, rel), {"image": dataset.images[i]})
            paths.append(rel)
        classes.append({"label": c, "split": dataset.class_splits[c], "image_blobs": paths})
    manifest = {
        "classes": classes,
        "image_size": int(dataset.image_size),
        "channels": int(dataset.channels),
        "meta": dataset.meta,
    }
    path = os.path.join(out_dir, "manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path):
    """Read a manifest (or a directory holding ``manifest.json``)."""
    manifest_path = os.fspath(manifest_path)
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest {manifest_path}: {exc.strerror}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    root = os.path.dirname(manifest_path)
    try:
        size, channels = int(manifest["image_size"]), int(manifest["channels"])
        entries = list(manifest["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {manifest_path} lacks a required field: {exc}") from exc
    images, labels, class_splits = [], [], {}
    for entry in entries:
        try:
            label, split, blobs = entry["label"], entry["split"], entry["image_blobs"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed class entry in {manifest_path}: {exc}") from exc
        if split not in SPLITS:
            raise FormatError(f"class {label!r}: unknown split {split!r}")
        if label in class_splits:
            raise FormatError(f"duplicate class label {label!r}")
        class_splits[label] = split
        for rel in blobs:
            path = os.path.join(root, rel)
            if not os.path.exists(path):
                raise FormatError(f"missing image blob {rel!r} for class {label!r}")
            tensors = load_tensors(path)
            if len(tensors) != 1:
                raise FormatError(f"blob {rel!r} holds {len(tensors)} tensors, expected 1")
            (img,) = tensors.values()
            if img.shape != (size, size, channels):
                raise FormatError(f"blob {rel!r} has shape {img.shape}, expected {(size, size, channels)}")
            images.append(img)
            labels.append(label)
    if not images:
        raise FormatError(f"manifest {manifest_path} lists no images")
    return Dataset(
        np.stack(images),
        np.array(labels, dtype=object),
        class_splits,
        meta=manifest.get("meta", {}),
    )

"""Synthetic imbalanced image data, classification metrics, and on-disk formats."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("blob", "ring", "bar", "cross")

TENSOR_MAGIC = b"DCUB"
TENSOR_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0}


@dataclass
class ToyDatasetSpec:
    num_classes: int = 3
    counts: tuple[int, ...] = (100, 100, 400)
    image_size: tuple[int, int, int] = (1, 32, 32)
    shape_kinds: tuple[str, ...] = ("blob", "ring", "bar")
    size_range: tuple[float, float] = (5.0, 10.0)
    noise_level: float = 0.2
    difficulty: float = 0.0
    train_fraction: float = 0.5

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.shape_kinds = tuple(self.shape_kinds)
        self.size_range = tuple(float(v) for v in self.size_range)

    def validate(self) -> None:
        if len(self.counts) != self.num_classes:
            raise ValueError(f"counts has {len(self.counts)} entries for {self.num_classes} classes")
        if min(self.counts) < 2:
            raise ValueError("every class needs at least 2 samples")
        if len(self.shape_kinds) < self.num_classes:
            raise ValueError("need one shape kind per class")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError("difficulty must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError("size_range must satisfy 0 < lo <= hi")


@dataclass
class LabeledImages:
    x: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    y: np.ndarray  # (N,) int64
    synthetic: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.synthetic is None:
            self.synthetic = np.zeros(len(self.y), dtype=bool)
        self.synthetic = np.asarray(self.synthetic, dtype=bool)
        if not (len(self.x) == len(self.y) == len(self.synthetic)):
            raise ValueError("images, labels and synthetic flags differ in length")

    def __len__(self) -> int:
        return len(self.y)

    def counts(self, num_classes: int) -> list[int]:
        return np.bincount(self.y, minlength=num_classes).tolist()


@dataclass
class ToyDataset:
    spec: ToyDatasetSpec
    seed: int
    train: LabeledImages
    test: LabeledImages


def _render(kind: str, rng: np.random.Generator, h: int, w: int, size_range) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = rng.uniform(*size_range)
    margin = min(r, min(h, w) / 2 - 1)
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    dist = np.hypot(yy - cy, xx - cx)
    if kind == "blob":
        return np.clip(r - dist + 0.5, 0.0, 1.0)
    if kind == "ring":
        width = max(1.2, 0.25 * r)
        return np.clip(width / 2 - np.abs(dist - r) + 0.5, 0.0, 1.0)
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    half_w = 1.5

    def stroke(a, b):
        return np.clip(half_w - np.abs(b) + 0.5, 0.0, 1.0) * np.clip(r - np.abs(a) + 0.5, 0.0, 1.0)

    if kind == "bar":
        return stroke(u, v)
    if kind == "cross":
        return np.maximum(stroke(u, v), stroke(v, u))
    raise ValueError(f"unknown shape kind {kind!r}")


def render_image(spec: ToyDatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    c, h, w = spec.image_size
    img = _render(spec.shape_kinds[label], rng, h, w, spec.size_range)
    if spec.difficulty > 0 and spec.num_classes > 1:
        other = int(rng.integers(spec.num_classes - 1))
        other += other >= label
        img = np.maximum(img, spec.difficulty * _render(spec.shape_kinds[other], rng, h, w, spec.size_range))
    img = -1.0 + 2.0 * img + spec.noise_level * rng.standard_normal((h, w))
    img = np.clip(img, -1.0, 1.0)
    return np.broadcast_to(img, (c, h, w)).astype(np.float32)


def generate_toy_dataset(spec: ToyDatasetSpec, seed: int) -> ToyDataset:
    """Render a labeled dataset and split it per class into disjoint train/test parts."""
    spec.validate()
    root = np.random.SeedSequence([int(seed), 0xD47A])
    labels = np.repeat(np.arange(spec.num_classes), spec.counts)
    child_seeds = root.spawn(len(labels) + 1)
    images = np.stack(
        [render_image(spec, int(lab), np.random.default_rng(s)) for lab, s in zip(labels, child_seeds[:-1])]
    )
    split_rng = np.random.default_rng(child_seeds[-1])
    train_idx, test_idx = [], []
    for k, n_k in enumerate(spec.counts):
        idx = np.flatnonzero(labels == k)
        idx = idx[split_rng.permutation(n_k)]
        n_train = min(max(1, int(round(spec.train_fraction * n_k))), n_k - 1)
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ToyDataset(
        spec=spec,
        seed=int(seed),
        train=LabeledImages(images[train_idx], labels[train_idx]),
        test=LabeledImages(images[test_idx], labels[test_idx]),
    )


def image_hashes(x: np.ndarray) -> set[str]:
    return {hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest() for img in x}


# --------------------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, truth, num_classes: int) -> MetricsReport:
    """Accuracy plus macro (unweighted) precision, recall and F1.

    A class that is never predicted gets precision 0; a class with no true
    samples gets recall 0; F1 is 0 when precision + recall is 0. Macro means
    run over the classes seen in either ``truth`` or ``predictions``, so a
    shard holding a single class is not dragged down by absent ones.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_pos = conf.sum(0).astype(np.float64)
    support = conf.sum(1).astype(np.float64)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    seen = (support > 0) | (pred_pos > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / conf.sum()),
        macro_precision=float(precision[seen].mean()),
        macro_recall=float(recall[seen].mean()),
        macro_f1=float(f1[seen].mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=conf.tolist(),
    )


# --------------------------------------------------------------------------- rebalancing


def solve_rebalance(counts, target_ratio, total_synthetic: int | None = None, cap: int | None = None) -> list[int]:
    """Per-class synthetic counts that bring ``counts`` to ``target_ratio`` by appending only.

    Without ``total_synthetic`` the smallest append-only solution is used;
    otherwise the final dataset size is fixed to ``sum(counts) + total_synthetic``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    ratio = np.asarray(target_ratio, dtype=np.float64)
    if counts.shape != ratio.shape or np.any(ratio <= 0):
        raise ValueError("target_ratio needs one positive entry per class")
    share = ratio / ratio.sum()
    if total_synthetic is None:
        final_total = float(np.max(counts / share))
        final_total = max(final_total, counts.sum())
    else:
        final_total = counts.sum() + int(total_synthetic)
    ideal = share * final_total - counts
    if np.any(ideal < -1e-9):
        raise ValueError(f"ratio {list(target_ratio)} is unreachable by appending {total_synthetic} samples")
    ideal = np.clip(ideal, 0.0, None)
    n_add = int(round(ideal.sum()))
    add = np.floor(ideal + 1e-9).astype(np.int64)
    rest = n_add - int(add.sum())
    if rest > 0:
        order = np.argsort(-(ideal - add), kind="stable")
        add[order[:rest]] += 1
    if cap is not None and add.sum() > cap:
        raise ValueError(f"ratio needs {int(add.sum())} synthetic samples, above the cap of {cap}")
    return add.tolist()


def rebalance_with_synthetic(
    data: LabeledImages,
    model,
    target_ratio,
    schedule,
    seed: int,
    total_synthetic: int | None = None,
    cap: int | None = None,
    batch_size: int = 256,
) -> LabeledImages:
    """Append class-conditional samples until ``target_ratio`` is met; originals are kept as-is."""
    from .denoiser import sample_class_conditional

    k = model.config.num_classes
    add = solve_rebalance(data.counts(k), target_ratio, total_synthetic, cap)
    xs, ys = [data.x], [data.y]
    for cls, n in enumerate(add):
        if n == 0:
            continue
        imgs = sample_class_conditional(model, n, cls, schedule, seed=(int(seed) * 1009 + cls) % 2**63, batch_size=batch_size)
        xs.append(imgs.float().numpy())
        ys.append(np.full(n, cls, dtype=np.int64))
    n_syn = int(sum(add))
    return LabeledImages(
        np.concatenate(xs),
        np.concatenate(ys),
        np.concatenate([data.synthetic, np.ones(n_syn, dtype=bool)]),
    )


# --------------------------------------------------------------------------- file formats


def write_tensor(path, array: np.ndarray) -> None:
    """Packed tensor: magic, u32 version, u32 ndim, u32 dims, u32 dtype code, LE float32 payload."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<I", DTYPE_CODES[arr.dtype])
    _atomic_write(path, header + arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    (code,) = struct.unpack_from("<I", raw, 12 + 4 * ndim)
    if code != 0:
        raise ValueError(f"{path}: unsupported dtype code {code}")
    offset = 16 + 4 * ndim
    arr = np.frombuffer(raw, dtype="<f4", offset=offset)
    if arr.size != int(np.prod(dims, dtype=np.int64)):
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return arr.reshape(dims).astype(np.float32)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels do not fit in u16")
    _atomic_write(path, labels.astype("<u2").tobytes())


def read_labels(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<u2").astype(np.int64)


def _atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_dataset(out_dir, splits: dict[str, LabeledImages], spec: dict | None = None, seed: int | None = None) -> Path:
    """Write one tensor and one label file per split; the manifest goes last."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"spec": spec, "seed": seed, "counts": {}, "splits": {}}
    for name, part in splits.items():
        write_tensor(out / f"{name}_images.bin", part.x)
        write_labels(out / f"{name}_labels.u16", part.y)
        manifest["counts"][name] = np.bincount(part.y).tolist() if len(part) else []
        manifest["splits"][name] = {
            "images": f"{name}_images.bin",
            "labels": f"{name}_labels.u16",
            "size": len(part),
            "synthetic_indices": np.flatnonzero(part.synthetic).tolist(),
        }
    write_json(out / "manifest.json", manifest)
    return out


def load_dataset(path) -> tuple[dict, dict[str, LabeledImages]]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = {}
    for name, entry in manifest["splits"].items():
        x = read_tensor(root / entry["images"])
        y = read_labels(root / entry["labels"])
        syn = np.zeros(len(y), dtype=bool)
        syn[entry.get("synthetic_indices", [])] = True
        splits[name] = LabeledImages(x, y, syn)
    return manifest, splits

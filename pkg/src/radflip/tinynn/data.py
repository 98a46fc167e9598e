"""Procedural toy datasets, stored as ``.npy`` tensors plus a JSON manifest.

Classification scenes hold one shape on a noisy background.  Detection
scenes hold up to three shapes, at most one centred in each grid cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("square", "ring", "disk", "plus", "cross", "triangle")
DETECTION_SHAPES = ("square", "disk", "plus")
MANIFEST_NAME = "manifest.json"


@dataclass
class Dataset:
    x: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    y: np.ndarray  # class ids, or (n, grid, grid, 6) detection targets
    classes: tuple[str, ...]
    task: str = "classification"
    grid: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes, self.task, self.grid)

    def stratified(self, n: int, seed: int = 0) -> "Dataset":
        """``n`` samples drawn round-robin over classes in a seeded order."""
        rng = np.random.Generator(np.random.PCG64(seed))
        if self.task != "classification":
            return self.subset(np.sort(rng.permutation(len(self))[:n]))
        pools = [rng.permutation(np.flatnonzero(self.y == c)) for c in range(len(self.classes))]
        picked, k = [], 0
        while len(picked) < min(n, len(self)):
            pool = pools[k % len(pools)]
            j = k // len(pools)
            if j < pool.size:
                picked.append(pool[j])
            k += 1
        return self.subset(np.sort(np.array(picked, dtype=np.int64)))


def _canvas_coords(size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64) + 0.5, xx.astype(np.float64) + 0.5


def draw_shape(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Binary mask of a shape of half-extent ``r`` centred at ``(cy, cx)``."""
    yy, xx = _canvas_coords(size)
    dy, dx = yy - cy, xx - cx
    t = max(1.0, r / 3.0)
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "ring":
        outer = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return outer & ~((np.abs(dy) <= r - t) & (np.abs(dx) <= r - t))
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "plus":
        return ((np.abs(dy) <= t / 1.5) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t / 1.5) & (np.abs(dy) <= r))
    if kind == "cross":
        near = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return near & ((np.abs(dy - dx) <= t / 1.2) | (np.abs(dy + dx) <= t / 1.2))
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise ValueError(f"unknown shape {kind!r}")


def make_shapes(n: int, seed: int, size: int = 16, classes=SHAPES, noise: float = 0.1) -> Dataset:
    rng = np.random.Generator(np.random.PCG64(seed))
    x = np.empty((n, 1, size, size), dtype=np.float32)
    y = rng.integers(0, len(classes), size=n)
    for i in range(n):
        r = rng.uniform(size * 0.2, size * 0.35)
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = draw_shape(classes[y[i]], size, cy, cx, r)
        img = rng.normal(0.0, noise, (size, size)) + mask * rng.uniform(0.6, 1.0)
        x[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(x, y.astype(np.int64), tuple(classes))


def make_detection(n: int, seed: int, size: int = 16, grid: int = 4, classes=DETECTION_SHAPES,
                   max_objects: int = 3, noise: float = 0.08) -> Dataset:
    """Targets per cell: ``(present, cy, cx, h, w, class)`` with the centre
    relative to the cell and the extent relative to the image."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cell = size / grid
    x = np.empty((n, 1, size, size), dtype=np.float32)
    y = np.zeros((n, grid, grid, 6), dtype=np.float32)
    for i in range(n):
        img = rng.normal(0.0, noise, (size, size))
        k = rng.integers(1, max_objects + 1)
        cells = rng.permutation(grid * grid)[:k]
        for c in cells:
            gy, gx = divmod(int(c), grid)
            cls = rng.integers(len(classes))
            r = rng.uniform(1.5, 2.5)
            cy = (gy + rng.uniform(0.2, 0.8)) * cell
            cx = (gx + rng.uniform(0.2, 0.8)) * cell
            img = np.maximum(img, draw_shape(classes[cls], size, cy, cx, r) * rng.uniform(0.7, 1.0))
            y[i, gy, gx] = (1.0, cy / cell - gy, cx / cell - gx, 2 * r / size, 2 * r / size, cls)
        x[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(x, y, tuple(classes), "detection", grid)


def save_dataset(splits: dict[str, Dataset], root: str | Path, seed: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    manifest = {"task": first.task, "classes": list(first.classes), "grid": first.grid,
                "seed": seed, "splits": {}}
    for name, ds in splits.items():
        np.save(root / f"{name}_x.npy", ds.x)
        np.save(root / f"{name}_y.npy", ds.y)
        manifest["splits"][name] = {"x": f"{name}_x.npy", "y": f"{name}_y.npy", "count": len(ds)}
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> dict[str, Dataset]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    m = json.loads(path.read_text())
    out = {}
    for name, entry in m["splits"].items():
        x = np.load(path.parent / entry["x"])
        y = np.load(path.parent / entry["y"])
        if x.shape[0] != entry["count"] or y.shape[0] != entry["count"]:
            raise ValueError(f"split {name!r} does not match its manifest count")
        out[name] = Dataset(x, y, tuple(m["classes"]), m["task"], int(m.get("grid", 0)))
    return out


def build_toy_splits(task: str, seed: int, sizes=(6000, 1000, 1000)) -> dict[str, Dataset]:
    make = make_shapes if task == "classification" else make_detection
    n_train, n_val, n_test = sizes
    return {"train": make(n_train, seed), "val": make(n_val, seed + 1), "test": make(n_test, seed + 2)}

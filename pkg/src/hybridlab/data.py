"""Synthetic datasets and negative-data plumbing.

Two worlds:
  * a 2D point world: inliers from a two-bar Gaussian mixture centred at
    the origin, train negatives in two rectangles of the right half
    plane, test anomalies on a ring that surrounds everything;
  * a dense grid world: K class regions with distinct channel
    signatures, held-out anomaly shapes with out-of-palette signatures,
    and a texture bank that serves as the real-negative pool.

All generators are pure functions of (seed, config).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import flow_sample
from .losses import MixedBatch
from .model import VOID

# Inlier mixture: component 1 is a wide horizontal bar; component 2 is
# defined through a linear transform A of standard normal noise (its
# effective covariance A A^T is close to diag(0.01, 0.82), a tall bar).
COMPONENT1_COV = np.array([[0.9, 0.0], [0.0, 0.1]])
COMPONENT2_TRANSFORM = np.array([[0.071, 0.071], [-0.639, 0.639]])

NEGATIVE_RADIUS = (1.5, 3.0)      # train-negative rectangles in quadrants I/IV
NEGATIVE_SCATTER_FRAC = 0.1       # minority of negatives scattered at all
                                  # angles, imitating a finite broad pool
NEGATIVE_SCATTER_RADIUS = (1.5, 4.0)
ANOMALY_RING_WIDTH = 2.0          # ring thickness beyond the inlier extent
ANOMALY_RING_QUANTILE = 0.99      # inlier-radius quantile for the inner edge


@dataclass
class Toy2dDataset:
    train_x: np.ndarray        # inlier train points
    train_labels: np.ndarray   # mixture-component ids (the 2 toy classes)
    test_x: np.ndarray         # inlier test points
    test_labels: np.ndarray
    negatives: np.ndarray      # train negatives (mostly quadrants I and IV)
    anomalies: np.ndarray      # test anomalies (surrounding ring)
    seed: int

    @property
    def n_classes(self):
        return 2


def _sample_mixture(rng, n):
    comp = rng.integers(0, 2, size=n)
    eps = rng.standard_normal((n, 2))
    chol1 = np.linalg.cholesky(COMPONENT1_COV)
    x1 = eps @ chol1.T
    x2 = eps @ COMPONENT2_TRANSFORM.T
    return np.where(comp[:, None] == 0, x1, x2), comp


def generate_toy2d(seed=7, n_train=1000, n_test=1000, n_negative=500,
                   n_anomaly=1000):
    """Deterministic 2D toy dataset for the given seed."""
    rng = np.random.default_rng(seed)
    train_x, train_y = _sample_mixture(rng, n_train)
    test_x, test_y = _sample_mixture(rng, n_test)

    # negatives: the majority sit in two squares whose corners span radius
    # 1.5 to 3.0, one per quadrant I/IV; a scattered minority covers all
    # angles so the pool is concentrated but not axis-blind
    lo = NEGATIVE_RADIUS[0] / np.sqrt(2.0)
    hi = NEGATIVE_RADIUS[1] / np.sqrt(2.0)
    neg = rng.uniform(lo, hi, size=(n_negative, 2))
    flip = rng.integers(0, 2, size=n_negative) * 2 - 1
    neg[:, 1] *= flip  # half in quadrant I, half in quadrant IV
    n_scatter = int(round(NEGATIVE_SCATTER_FRAC * n_negative))
    if n_scatter:
        r = np.sqrt(rng.uniform(NEGATIVE_SCATTER_RADIUS[0] ** 2,
                                NEGATIVE_SCATTER_RADIUS[1] ** 2,
                                size=n_scatter))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n_scatter)
        neg[:n_scatter] = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)

    # anomalies: area-uniform annulus that encompasses the inliers
    radii = np.linalg.norm(train_x, axis=1)
    inner = float(np.quantile(radii, ANOMALY_RING_QUANTILE))
    outer = inner + ANOMALY_RING_WIDTH
    r = np.sqrt(rng.uniform(inner ** 2, outer ** 2, size=n_anomaly))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_anomaly)
    anomalies = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

    return Toy2dDataset(train_x, train_y, test_x, test_y, neg, anomalies,
                        seed=seed)


# -- dense grid world ---------------------------------------------------------

@dataclass
class DenseToyScene:
    features: np.ndarray   # (H, W, C)
    labels: np.ndarray     # (H, W) class ids; anomaly regions carry K


@dataclass
class DenseToyWorld:
    train: list
    calib: list
    test: list
    class_signatures: np.ndarray   # (K, C)
    texture_bank: list             # real-negative patches, each (h, w, C)
    n_classes: int
    seed: int


def _scene(rng, signatures, grid, noise, anomaly_sig=None, anomaly_frac=0.1):
    k, c = signatures.shape
    h = w = grid
    centers = rng.uniform(0, grid, size=(k, 2))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = ((yy[..., None] - centers[:, 0]) ** 2
          + (xx[..., None] - centers[:, 1]) ** 2)
    labels = np.argmin(d2, axis=-1)
    # Voronoi cells of in-grid centers: the center pixel belongs to its
    # own cell, so every class appears in every scene
    labels[tuple(np.clip(centers.astype(int), 0, grid - 1).T)] = np.arange(k)
    feats = signatures[labels] + noise * rng.standard_normal((h, w, c))
    if anomaly_sig is not None:
        side = max(2, int(round(np.sqrt(anomaly_frac) * grid)))
        top = rng.integers(0, h - side + 1)
        left = rng.integers(0, w - side + 1)
        feats[top:top + side, left:left + side] = (
            anomaly_sig + noise * rng.standard_normal((side, side, c)))
        labels = labels.copy()
        labels[top:top + side, left:left + side] = k
    return DenseToyScene(feats, labels)


def _out_of_palette(rng, n, channels, radius):
    """Signatures at a norm radius that puts them outside the convex hull
    of the class signatures (which live inside the unit ball)."""
    v = rng.standard_normal((n, channels))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(radius[0], radius[1], size=(n, 1))


def generate_dense_toy(seed=7, n_classes=4, grid=32, channels=3, noise=0.3,
                       n_train=16, n_calib=6, n_test=6, bank_size=32,
                       bank_sides=(8, 16)):
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if grid < 8:
        raise ValueError("grid too small")
    rng = np.random.default_rng(seed)
    sig = rng.standard_normal((n_classes, channels))
    sig /= np.maximum(np.linalg.norm(sig, axis=1, keepdims=True), 1.0)

    train = [_scene(rng, sig, grid, noise) for _ in range(n_train)]
    anomaly_sigs = _out_of_palette(rng, n_calib + n_test, channels, (3.0, 4.0))
    calib = [_scene(rng, sig, grid, noise, anomaly_sigs[i])
             for i in range(n_calib)]
    test = [_scene(rng, sig, grid, noise, anomaly_sigs[n_calib + i])
            for i in range(n_test)]

    bank_sigs = _out_of_palette(rng, bank_size, channels, (2.0, 3.0))
    bank = []
    for i in range(bank_size):
        side = int(rng.integers(bank_sides[0], bank_sides[1] + 1))
        bank.append(bank_sigs[i]
                    + noise * rng.standard_normal((side, side, channels)))
    return DenseToyWorld(train, calib, test, sig, bank, n_classes, seed)


# -- pasting -------------------------------------------------------------------

def make_rect_mask(shape, top, left, height, width):
    mask = np.zeros(shape, dtype=bool)
    if top < 0 or left < 0 or top + height > shape[0] or left + width > shape[1]:
        raise ValueError("rectangle does not fit the grid")
    mask[top:top + height, left:left + width] = True
    return mask


def paste(inlier_x, patch, mask, labels):
    """Mix negative content into an inlier batch or scene.

    Flat batches: `mask` is (n,) and the patch provides one row per
    masked element. Grids: `mask` is (H, W) and the patch must match the
    mask's bounding box; elements where the mask is 0 inside the box keep
    their inlier values. Masked elements get the VOID label.
    """
    x = np.array(inlier_x, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    mask = mask.astype(bool)
    patch = np.asarray(patch, dtype=np.float64)

    if mask.ndim == 1:
        if patch.shape[0] != int(mask.sum()):
            raise ValueError("patch length does not match mask")
        x[mask] = patch
    else:
        if not mask.any():
            if patch.size:
                raise ValueError("non-empty patch with an empty mask")
        else:
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = (rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1)
            if patch.shape[:2] != box:
                raise ValueError(f"patch {patch.shape[:2]} does not fit "
                                 f"mask bounding box {box}")
            padded = np.zeros_like(x)
            padded[rows[0]:rows[0] + box[0], cols[0]:cols[0] + box[1]] = patch
            x = np.where(mask[..., None], padded, x)
    labels[mask] = VOID
    return MixedBatch(x, labels, mask)


# -- negative sources ----------------------------------------------------------

@dataclass
class NegativeSource:
    kind: str                  # "real-pool" | "flow" | "mixture"
    b_real: float = None       # mixture probability of drawing a real negative
    flow: object = None
    pool: object = None        # array of points or list of patches

    def __post_init__(self):
        if self.kind not in ("real-pool", "flow", "mixture"):
            raise ValueError(f"unknown negative source {self.kind!r}")
        if self.kind == "mixture":
            if self.b_real is None or not 0.0 <= self.b_real <= 1.0:
                raise ValueError("mixture requires b_real in [0, 1]")
        elif self.b_real is not None:
            raise ValueError("b_real is only defined for mixtures")


def _draw_real(pool, size, rng):
    if pool is None or len(pool) == 0:
        raise ValueError("real-negative pool is empty")
    if np.isscalar(size):
        idx = rng.choice(len(pool), size=int(size), replace=len(pool) < size)
        return np.asarray(pool)[idx]
    h, w = int(size[0]), int(size[1])
    eligible = [p for p in pool if p.shape[0] >= h and p.shape[1] >= w]
    if not eligible:
        raise ValueError(f"no pool patch can cover a {h}x{w} crop")
    patch = eligible[int(rng.integers(0, len(eligible)))]
    top = int(rng.integers(0, patch.shape[0] - h + 1))
    left = int(rng.integers(0, patch.shape[1] - w + 1))
    return patch[top:top + h, left:left + w]


def sample_negative(source, size, rng, interval=None):
    """Draw one negative patch; mixtures pick their source with a
    Bernoulli(b_real) draw first."""
    if source.kind == "real-pool":
        return _draw_real(source.pool, size, rng)
    if source.kind == "flow":
        return flow_sample(source.flow, size, rng=rng, interval=interval)
    if rng.random() < source.b_real:
        return _draw_real(source.pool, size, rng)
    return flow_sample(source.flow, size, rng=rng, interval=interval)


# -- run-length encoded masks ---------------------------------------------------

def rle_encode(mask):
    """Run lengths of a flattened binary mask, zeros first."""
    flat = np.asarray(mask).astype(bool).ravel()
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return np.asarray(runs, dtype=np.uint32)


def rle_decode(runs, shape):
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, False
    for run in np.asarray(runs, dtype=np.int64):
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(shape)


# -- on-disk container -----------------------------------------------------------

_DTYPES = {"float64": "<f8", "int64": "<i8"}


def save_arrays(directory, arrays, masks=None, meta=None):
    """Write named tensors as a JSON header plus one flat binary blob;
    binary masks go run-length encoded into a second blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"format": "hybridlab-arrays-v1", "meta": meta or {},
              "arrays": [], "masks": []}
    with open(directory / "data.bin", "wb") as fh:
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = "int64" if np.issubdtype(arr.dtype, np.integer) else "float64"
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            header["arrays"].append({"name": name, "shape": list(arr.shape),
                                     "dtype": dtype, "offset": offset})
            fh.write(raw)
            offset += len(raw)
    if masks:
        with open(directory / "masks.bin", "wb") as fh:
            offset = 0
            for name, mask in masks.items():
                runs = rle_encode(mask)
                raw = np.ascontiguousarray(runs, dtype="<u4").tobytes()
                header["masks"].append({"name": name,
                                        "shape": list(np.asarray(mask).shape),
                                        "n_runs": int(runs.size),
                                        "offset": offset})
                fh.write(raw)
                offset += len(raw)
    with open(directory / "header.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory / "header.json"


def load_arrays(directory):
    directory = Path(directory)
    with open(directory / "header.json") as fh:
        header = json.load(fh)
    if header.get("format") != "hybridlab-arrays-v1":
        raise ValueError("not a dataset container")
    arrays, masks = {}, {}
    blob = (directory / "data.bin").read_bytes()
    for entry in header["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    if header["masks"]:
        mblob = (directory / "masks.bin").read_bytes()
        for entry in header["masks"]:
            runs = np.frombuffer(mblob, dtype="<u4", count=entry["n_runs"],
                                 offset=entry["offset"])
            masks[entry["name"]] = rle_decode(runs, entry["shape"])
    return arrays, masks, header["meta"]


def save_toy2d(ds, directory):
    arrays = {"train_x": ds.train_x, "train_labels": ds.train_labels,
              "test_x": ds.test_x, "test_labels": ds.test_labels,
              "negatives": ds.negatives, "anomalies": ds.anomalies}
    meta = {"kind": "toy2d", "seed": ds.seed, "n_classes": ds.n_classes,
            "splits": {name: list(np.asarray(arr).shape)
                       for name, arr in arrays.items()}}
    return save_arrays(directory, arrays, meta=meta)

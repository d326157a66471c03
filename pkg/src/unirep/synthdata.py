"""Synthetic identities with controllable, labelled quality variations.

Each identity is a unit prototype vector. Clean observations are noisy
copies of it. Three corruptions destroy information along separate axes:

* ``blur``      circular moving average over coordinates (kernel 3..11)
* ``occlusion`` zero a contiguous run of 1/7-sized coordinate blocks
* ``pose``      rotate a fixed set of 2-planes by 40..60 degrees

Every applied corruption is followed by a fresh draw of capture noise
(``degrade_noise``), so degraded samples lose identity signal rather than
collapsing onto a common point.

Variation labels use 1 for clean and 0 for corrupted. After the three
augmentable labels come ``T`` identity-level attribute labels derived from
fixed linear functionals of the prototype.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .numerics import DegenerateInputError, RngStream, l2_normalize

AUGMENTABLE = ("blur", "occlusion", "pose")
ATTRIBUTE_NAMES = ("smiling", "young", "gender")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    train_identities: int = 20
    test_identities: int = 10
    obs_dim: int = 64
    train_samples_per_identity: int = 50
    test_samples_per_identity: int = 50
    gallery_per_identity: int = 5
    identity_rank: int | None = 16
    noise: float = 0.3
    template_weight: float = 0.5
    degrade_noise: float = 0.6
    aug_prob: float = 0.3
    test_aug_prob: float = 0.3
    blur_kernel: tuple = (3, 11)
    occlusion_grid: int = 7
    occlusion_blocks: tuple = (1, 3)
    pose_angle: tuple = (40.0, 60.0)
    pose_planes: int = 8
    attributes: int = 3
    seed: int = 0
    format: str = "csv"

    def __post_init__(self):
        for name in ("blur_kernel", "occlusion_blocks", "pose_angle"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("aug_prob", "test_aug_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} must lie in [0, 1]")
        if self.noise < 0 or self.degrade_noise < 0:
            raise ValueError("noise levels must be non-negative")
        for name in ("train_identities", "obs_dim", "train_samples_per_identity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.test_identities < 0 or self.test_samples_per_identity < 0:
            raise ValueError("test sizes must be non-negative")
        if self.gallery_per_identity > self.test_samples_per_identity:
            raise ValueError("gallery_per_identity exceeds test samples per identity")
        if self.identity_rank is not None and not 1 <= self.identity_rank <= self.obs_dim:
            raise ValueError("identity_rank must be in [1, obs_dim]")
        if 2 * self.pose_planes > self.obs_dim:
            raise ValueError("too many pose planes for obs_dim")
        if self.attributes < 0:
            raise ValueError("attributes must be >= 0")
        if self.format not in ("csv", "bin"):
            raise ValueError("format must be 'csv' or 'bin'")

    @property
    def variation_count(self) -> int:
        return len(AUGMENTABLE) + self.attributes

    @property
    def variation_names(self):
        extra = [ATTRIBUTE_NAMES[i] if i < len(ATTRIBUTE_NAMES) else f"attr{i}" for i in range(self.attributes)]
        return list(AUGMENTABLE) + extra

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class VariationSample:
    x: np.ndarray
    y: int
    u: np.ndarray


@dataclass
class Split:
    """Columnar storage: ``X`` (n, D_obs), ``y`` (n,), ``u`` (n, V)."""

    X: np.ndarray
    y: np.ndarray
    u: np.ndarray
    gallery: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.gallery is None:
            self.gallery = np.zeros(len(self.y), dtype=bool)

    def __len__(self):
        return len(self.y)

    def sample(self, i) -> VariationSample:
        return VariationSample(self.X[i].copy(), int(self.y[i]), self.u[i].copy())

    @property
    def corrupted(self):
        return np.any(self.u[:, : len(AUGMENTABLE)] == 0, axis=1)


@dataclass
class Dataset:
    config: DatasetConfig
    train: Split
    test: Split
    prototypes: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray

    def manifest(self):
        cfg = self.config
        return {
            "version": FORMAT_VERSION,
            "config": cfg.to_dict(),
            "obs_dim": cfg.obs_dim,
            "seed": cfg.seed,
            "format": cfg.format,
            "variation_names": cfg.variation_names,
            "columns": ["identity", "gallery"] + [f"u_{n}" for n in cfg.variation_names]
            + [f"x_{i}" for i in range(cfg.obs_dim)],
            "splits": {
                "train": {"rows": len(self.train), "identities": [int(i) for i in self.train_ids]},
                "test": {"rows": len(self.test), "identities": [int(i) for i in self.test_ids]},
            },
        }


# ---------------------------------------------------------------------------
# generation


def template_vector(dim: int):
    """Shared appearance component common to every identity (constant direction)."""
    return np.full(dim, 1.0 / np.sqrt(dim))


class Corruptor:
    """Holds the fixed random structure the corruptions rely on.

    The first pose plane contains the shared template direction, so a pose
    change moves the common appearance component as well as identity detail.
    """

    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        rng = RngStream(cfg.seed, "pose-basis")
        raw = rng.normal(size=(cfg.obs_dim, cfg.obs_dim))
        raw[:, 0] = template_vector(cfg.obs_dim)
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))[None, :]
        self.planes = [(q[:, 2 * i], q[:, 2 * i + 1]) for i in range(cfg.pose_planes)]


def gen_identities(cfg: DatasetConfig, rng: RngStream, count: int | None = None):
    """Unit-norm identity prototypes, one row per identity."""
    count = cfg.train_identities + cfg.test_identities if count is None else count
    if cfg.identity_rank is None:
        raw = rng.normal(size=(count, cfg.obs_dim))
    else:
        basis = RngStream(cfg.seed, "identity-basis").normal(size=(cfg.identity_rank, cfg.obs_dim))
        raw = rng.normal(size=(count, cfg.identity_rank)) @ basis
    protos, _ = l2_normalize(raw)
    return protos


def sample_clean(prototype, noise: float, rng: RngStream, variations: int = len(AUGMENTABLE),
                 template_weight: float = 0.0):
    """Clean observation ``normalize(prototype + template + noise)``."""
    prototype = np.asarray(prototype, dtype=np.float64)
    D = prototype.shape[0]
    x = prototype.copy()
    if template_weight:
        x += template_weight * template_vector(D)
    if noise > 0:
        x += rng.normal(0.0, noise / np.sqrt(D), D)
    x, _ = l2_normalize(x)
    return VariationSample(x, -1, np.ones(variations))


def _renorm(x):
    try:
        out, _ = l2_normalize(x)
    except DegenerateInputError as exc:
        raise DegenerateInputError("corruption removed every coordinate") from exc
    return out


def corrupt_blur(x, kernel: int):
    """Circular moving average with window ``kernel``; 0 or 1 is a no-op."""
    x = np.asarray(x, dtype=np.float64)
    kernel = int(kernel)
    if kernel <= 1:
        return x.copy()
    D = x.shape[0]
    left = (kernel - 1) // 2
    idx = (np.arange(D)[:, None] + np.arange(-left, kernel - left)[None, :]) % D
    return _renorm(x[idx].mean(axis=1))


def corrupt_occlude(x, fraction: float, rng: RngStream):
    """Zero a contiguous run covering ``fraction`` of the coordinates."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("occlusion fraction must lie in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    D = x.shape[0]
    width = int(round(fraction * D))
    if width == 0:
        return x.copy()
    start = int(rng.integers(0, D - width + 1))
    out = x.copy()
    out[start : start + width] = 0.0
    return _renorm(out)


def corrupt_pose(x, angle_deg: float, planes):
    """Rotate ``x`` by ``angle_deg`` inside each of the given orthonormal 2-planes."""
    x = np.asarray(x, dtype=np.float64)
    if angle_deg == 0:
        return x.copy()
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    out = x.copy()
    for a, b in planes:
        alpha, beta = a @ x, b @ x
        out += (alpha * c - beta * s - alpha) * a + (alpha * s + beta * c - beta) * b
    return _renorm(out)


def augment(sample: VariationSample, cfg: DatasetConfig, rng: RngStream, corruptor: Corruptor = None,
            families=AUGMENTABLE, prob: float | None = None) -> VariationSample:
    """Apply each enabled corruption independently with probability ``prob``."""
    corruptor = corruptor or Corruptor(cfg)
    prob = cfg.aug_prob if prob is None else prob
    x = sample.x
    u = sample.u.copy()
    # one draw per family regardless of which are enabled, so enabling a
    # family does not shift the random sequence of the others
    draws = rng.random(len(AUGMENTABLE))
    for t, name in enumerate(AUGMENTABLE):
        if name not in families or draws[t] >= prob:
            continue
        if name == "blur":
            lo, hi = cfg.blur_kernel
            kernel = int(_odd(rng, lo, hi))
            x = corrupt_blur(x, kernel)
        elif name == "occlusion":
            lo, hi = cfg.occlusion_blocks
            blocks = int(rng.integers(lo, hi + 1))
            x = corrupt_occlude(x, blocks / cfg.occlusion_grid, rng)
        else:
            lo, hi = cfg.pose_angle
            x = corrupt_pose(x, float(rng.uniform(lo, hi)), corruptor.planes)
        if cfg.degrade_noise > 0:
            # capture noise on top of the degraded signal
            x = _renorm(x + rng.normal(0.0, cfg.degrade_noise / np.sqrt(x.shape[0]), x.shape[0]))
        u[t] = 0.0
    return VariationSample(x, sample.y, u)


def _odd(rng, lo, hi):
    choices = np.arange(lo, hi + 1)
    choices = choices[choices % 2 == 1]
    return choices[int(rng.integers(0, len(choices)))]


def attribute_functionals(cfg: DatasetConfig):
    g, _ = l2_normalize(RngStream(cfg.seed, "attributes").normal(size=(max(cfg.attributes, 1), cfg.obs_dim)))
    return g[: cfg.attributes]


def mine_attribute_labels(prototype, T: int, functionals):
    """Identity-level binary labels: sign of fixed linear functionals."""
    functionals = np.asarray(functionals)
    if T > len(functionals):
        raise ValueError(f"T={T} exceeds the {len(functionals)} available functionals")
    return (functionals[:T] @ np.asarray(prototype) > 0).astype(np.float64)


def _make_split(cfg, protos, ids, per_id, gallery_per_id, prob, rng, corruptor, functionals):
    X, y, u, gal = [], [], [], []
    for ident in ids:
        attrs = mine_attribute_labels(protos[ident], cfg.attributes, functionals)
        for j in range(per_id):
            s = sample_clean(protos[ident], cfg.noise, rng, template_weight=cfg.template_weight)
            is_gallery = j < gallery_per_id
            if not is_gallery and prob > 0:
                s = augment(s, cfg, rng, corruptor, prob=prob)
            X.append(s.x)
            y.append(ident)
            u.append(np.concatenate([s.u, attrs]))
            gal.append(is_gallery)
    V = cfg.variation_count
    return Split(
        np.array(X).reshape(-1, cfg.obs_dim),
        np.array(y, dtype=np.int64),
        np.array(u).reshape(-1, V),
        np.array(gal, dtype=bool),
    )


def make_dataset(cfg: DatasetConfig) -> Dataset:
    """Train and test splits over disjoint identities.

    The train split holds clean samples only (augmentation happens during
    training); the test split mixes clean gallery samples with probes that
    were corrupted under ``test_aug_prob``.
    """
    root = RngStream(cfg.seed, "dataset")
    protos = gen_identities(cfg, root.substream("identities"))
    corruptor = Corruptor(cfg)
    functionals = attribute_functionals(cfg)
    train_ids = np.arange(cfg.train_identities)
    test_ids = np.arange(cfg.train_identities, cfg.train_identities + cfg.test_identities)
    train = _make_split(cfg, protos, train_ids, cfg.train_samples_per_identity, 0, 0.0,
                        root.substream("train"), corruptor, functionals)
    test = _make_split(cfg, protos, test_ids, cfg.test_samples_per_identity, cfg.gallery_per_identity,
                       cfg.test_aug_prob, root.substream("test"), corruptor, functionals)
    return Dataset(cfg, train, test, protos, train_ids, test_ids)


# ---------------------------------------------------------------------------
# serialisation


def _rows(split: Split):
    return np.column_stack([split.y.astype(np.float64), split.gallery.astype(np.float64), split.u, split.X])


def _from_rows(rows, V):
    rows = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    return Split(
        rows[:, 2 + V :].copy(),
        rows[:, 0].astype(np.int64),
        rows[:, 2 : 2 + V].copy(),
        rows[:, 1].astype(bool),
    )


def write_dataset(ds: Dataset, out_dir, fmt: str | None = None):
    """Write ``dataset.json`` plus ``train``/``test`` row files; returns the paths."""
    fmt = fmt or ds.config.format
    if fmt != ds.config.format:
        ds = replace(ds, config=replace(ds.config, format=fmt))
    os.makedirs(out_dir, exist_ok=True)
    manifest = ds.manifest()
    paths = [os.path.join(out_dir, "dataset.json")]
    for name, split in (("train", ds.train), ("test", ds.test)):
        rows = _rows(split)
        path = os.path.join(out_dir, f"{name}.{fmt}")
        manifest["splits"][name]["file"] = os.path.basename(path)
        if fmt == "csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(manifest["columns"])
            for r in rows:
                w.writerow([repr(float(v)) for v in r])
            with open(path, "w", newline="") as fh:
                fh.write(buf.getvalue())
        else:
            with open(path, "wb") as fh:
                fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
                fh.write(rows.astype("<f8").tobytes(order="C"))
        paths.append(path)
    with open(paths[0], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader])


def _read_bin(path):
    with open(path, "rb") as fh:
        n, c = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * c:
        raise ValueError(f"{path}: expected {n * c} values, found {data.size}")
    return data.reshape(n, c).astype(np.float64)


def load_dataset(data_dir) -> Dataset:
    with open(os.path.join(data_dir, "dataset.json")) as fh:
        manifest = json.load(fh)
    cfg = DatasetConfig(**manifest["config"])
    V = cfg.variation_count
    reader = _read_csv if manifest["format"] == "csv" else _read_bin
    splits = {}
    for name in ("train", "test"):
        rows = reader(os.path.join(data_dir, manifest["splits"][name]["file"]))
        splits[name] = _from_rows(rows, V) if len(rows) else Split(
            np.zeros((0, cfg.obs_dim)), np.zeros(0, dtype=np.int64), np.zeros((0, V)))
    protos = gen_identities(cfg, RngStream(cfg.seed, "dataset").substream("identities"))
    return Dataset(
        cfg,
        splits["train"],
        splits["test"],
        protos,
        np.array(manifest["splits"]["train"]["identities"], dtype=np.int64),
        np.array(manifest["splits"]["test"]["identities"], dtype=np.int64),
    )

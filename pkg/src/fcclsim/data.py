"""Synthetic multi-domain classification scenarios.

All domains share one set of latent class means. A domain is defined by an
affine map (rotation, per-dimension scaling, bias) applied to latent
samples, so the same label produces different features in different
domains. The public pool is unlabeled and drawn from the equal mixture of
the domain maps (or from a held-out map).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.linalg import expm

from .errors import ParameterError, ShapeError, StateError
from .numerics import Matrix, as_matrix
from .seeding import rng_for

DATASET_MAGIC = "FCCLSIM-DATA"
DATASET_FORMAT_VERSION = 1
PUBLIC_MODES = ("mixture", "heldout")
AUGMENT_MODES = ("off", "weak", "strong")


@dataclass(frozen=True)
class ScenarioConfig:
    domains: int = 4
    classes: int = 5
    input_dim: int = 16
    train_sizes: tuple[int, ...] = (150, 80, 500, 300)
    test_size: int = 200
    public_size: int = 1000
    shift_strength: float = 1.0
    class_sep: float = 1.0
    noise: float = 1.0
    public_mode: str = "mixture"
    seed: int = 7

    def validate(self) -> None:
        if self.domains < 2:
            raise ParameterError("need at least 2 domains")
        if self.classes < 2:
            raise ParameterError("need at least 2 classes")
        if self.input_dim < 1:
            raise ParameterError("input_dim must be >= 1")
        if len(self.train_sizes) != self.domains:
            raise ParameterError(f"train_sizes has {len(self.train_sizes)} entries for {self.domains} domains")
        if min(self.train_sizes) < 1 or self.test_size < 1 or self.public_size < 1:
            raise ParameterError("dataset sizes must be positive")
        if self.shift_strength < 0 or self.noise < 0 or self.class_sep <= 0:
            raise ParameterError("shift_strength and noise must be >= 0, class_sep > 0")
        if self.public_mode not in PUBLIC_MODES:
            raise ParameterError(f"public_mode must be one of {PUBLIC_MODES}")
        if self.seed < 0:
            raise ParameterError("seed must be non-negative")


@dataclass(frozen=True)
class DomainTransform:
    rotation: Matrix
    scale: Matrix  # 1 x dim
    bias: Matrix  # 1 x dim

    def apply(self, latent: Matrix) -> Matrix:
        return (latent @ self.rotation.T) * self.scale + self.bias


@dataclass(frozen=True)
class DomainDataset:
    domain_id: int
    train_x: Matrix
    train_y: np.ndarray
    test_x: Matrix
    test_y: np.ndarray
    transform: DomainTransform = field(repr=False)
    seed: int = 0


@dataclass(frozen=True)
class PublicPool:
    """Unlabeled shared data. There is deliberately no label field."""

    x: Matrix
    provenance: str = "mixture"

    def __post_init__(self):
        if self.x.shape[0] == 0:
            raise ParameterError("public pool must not be empty")


def class_means(cfg: ScenarioConfig) -> Matrix:
    return rng_for(cfg.seed, "latent-means").normal(0.0, cfg.class_sep, (cfg.classes, cfg.input_dim))


def domain_transform(cfg: ScenarioConfig, key) -> DomainTransform:
    """Random rotation with angles up to ``shift_strength * pi/2``, plus scaling and bias."""
    rng = rng_for(cfg.seed, "transform", key)
    d = cfg.input_dim
    g = rng.normal(size=(d, d))
    skew = g - g.T
    norm = np.linalg.norm(skew, 2)
    gen = skew / norm if norm > 0 else skew
    rotation = expm(cfg.shift_strength * (np.pi / 2) * gen)
    scale = np.exp(cfg.shift_strength * 0.3 * rng.normal(size=(1, d)))
    bias = cfg.shift_strength * rng.normal(size=(1, d))
    return DomainTransform(rotation, scale, bias)


def sample_latent(means: Matrix, n: int, noise: float, rng: np.random.Generator) -> tuple[Matrix, np.ndarray]:
    """Class-balanced labels in random order plus Gaussian latent points."""
    labels = rng.permutation(np.arange(n) % means.shape[0])
    latent = means[labels] + noise * rng.normal(size=(n, means.shape[1]))
    return latent, labels


def domain_latent(cfg: ScenarioConfig, domain_id: int, split: str) -> tuple[Matrix, np.ndarray]:
    size = cfg.train_sizes[domain_id] if split == "train" else cfg.test_size
    return sample_latent(class_means(cfg), size, cfg.noise, rng_for(cfg.seed, "domain", domain_id, split))


def _draw_public(cfg: ScenarioConfig, transforms: list[DomainTransform]) -> tuple[Matrix, np.ndarray]:
    rng = rng_for(cfg.seed, "public")
    latent, classes = sample_latent(class_means(cfg), cfg.public_size, cfg.noise, rng)
    if cfg.public_mode == "heldout":
        return domain_transform(cfg, "heldout").apply(latent), classes
    x = np.empty_like(latent)
    owner = np.arange(cfg.public_size) % cfg.domains
    for k, t in enumerate(transforms):
        rows = owner == k
        x[rows] = t.apply(latent[rows])
    return x, classes


def generate_scenario(cfg: ScenarioConfig) -> tuple[list[DomainDataset], PublicPool]:
    cfg.validate()
    domains = []
    transforms = [domain_transform(cfg, k) for k in range(cfg.domains)]
    for k, t in enumerate(transforms):
        tr_latent, tr_y = domain_latent(cfg, k, "train")
        te_latent, te_y = domain_latent(cfg, k, "test")
        domains.append(DomainDataset(k, t.apply(tr_latent), tr_y, t.apply(te_latent), te_y, t, cfg.seed))
    x0, _ = _draw_public(cfg, transforms)
    return domains, PublicPool(x0, cfg.public_mode)


def augment(x: Matrix, mode: str, seed) -> Matrix:
    """Vector analog of image augmentation.

    weak: jitter with sigma = 0.05 * column std, then zero 10% of coordinates.
    strong: per-column scaling in [0.6, 1.4], jitter 0.2 * std, same masking.
    """
    if mode not in AUGMENT_MODES:
        raise ParameterError(f"augmentation mode must be one of {AUGMENT_MODES}")
    x = as_matrix(x, "x")
    if mode == "off":
        return x.copy()
    rng = np.random.default_rng(seed)
    std = x.std(axis=0, keepdims=True)
    if mode == "weak":
        out = x + rng.normal(size=x.shape) * (0.05 * std)
    else:
        out = x * rng.uniform(0.6, 1.4, (1, x.shape[1])) + rng.normal(size=x.shape) * (0.2 * std)
    out[rng.random(x.shape) < 0.1] = 0.0
    return out


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 2:
        raise ParameterError("batch_size must be >= 2")
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def batches(x: Matrix, y: np.ndarray | None, batch_size: int, seed: int, epoch: int) -> Iterator:
    """Shuffled batches for one pass; a trailing batch smaller than 2 is dropped."""
    for idx in batch_indices(x.shape[0], batch_size, seed, epoch):
        yield (x[idx], y[idx]) if y is not None else x[idx]


# ---------------------------------------------------------------------------
# Persistence


def _write_block(lines: list[str], name: str, arr: np.ndarray) -> None:
    arr = np.atleast_2d(arr)
    lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
    lines.extend(" ".join(repr(float(v)) for v in row) for row in arr)


def dump_scenario(domains: list[DomainDataset], pool: PublicPool, path: str | Path) -> None:
    """Text format::

        FCCLSIM-DATA 1
        domains <K> seed <seed> provenance <tag>
        domain <id>
        <block> ...   (train_x, train_y, test_x, test_y, rotation, scale, bias)
        public
        x <rows> <cols>
        ...

    Each block is a header ``<name> <rows> <cols>`` followed by that many rows.
    """
    seed = domains[0].seed if domains else 0
    lines = [f"{DATASET_MAGIC} {DATASET_FORMAT_VERSION}", f"domains {len(domains)} seed {seed} provenance {pool.provenance}"]
    for d in domains:
        lines.append(f"domain {d.domain_id}")
        _write_block(lines, "train_x", d.train_x)
        _write_block(lines, "train_y", d.train_y[None, :])
        _write_block(lines, "test_x", d.test_x)
        _write_block(lines, "test_y", d.test_y[None, :])
        _write_block(lines, "rotation", d.transform.rotation)
        _write_block(lines, "scale", d.transform.scale)
        _write_block(lines, "bias", d.transform.bias)
    lines.append("public")
    _write_block(lines, "x", pool.x)
    Path(path).write_text("\n".join(lines) + "\n")


def load_scenario(path: str | Path) -> tuple[list[DomainDataset], PublicPool]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != [DATASET_MAGIC, str(DATASET_FORMAT_VERSION)]:
        raise StateError(f"{path}: not a {DATASET_MAGIC} v{DATASET_FORMAT_VERSION} file")
    header = lines[1].split()
    count, seed, provenance = int(header[1]), int(header[3]), header[5]
    pos = 2

    def block():
        nonlocal pos
        name, rows, cols = lines[pos].split()
        rows, cols = int(rows), int(cols)
        data = [[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows)]
        pos += 1 + rows
        return name, np.array(data, dtype=np.float64).reshape(rows, cols)

    domains = []
    for _ in range(count):
        domain_id = int(lines[pos].split()[1])
        pos += 1
        parts = dict(block() for _ in range(7))
        transform = DomainTransform(parts["rotation"], parts["scale"], parts["bias"])
        domains.append(
            DomainDataset(
                domain_id,
                parts["train_x"],
                parts["train_y"][0].astype(np.int64),
                parts["test_x"],
                parts["test_y"][0].astype(np.int64),
                transform,
                seed,
            )
        )
    if lines[pos] != "public":
        raise ShapeError(f"{path}: expected public section at line {pos + 1}")
    pos += 1
    _, x0 = block()
    return domains, PublicPool(x0, provenance)

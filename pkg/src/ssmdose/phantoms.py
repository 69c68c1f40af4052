"""Synthetic thoracic phantoms with an analytic dose, and their on-disk dataset.

Each phantom is an axial slice: an elliptical body containing two lungs
(one mask), a heart, a spinal cord in a vertebral ring, and an elliptical
target (PTV). The reference dose is 1 inside the PTV and decays as
``exp(-d / falloff)`` with ``d`` the Euclidean distance (pixels) to the
nearest PTV pixel, zero outside the body.

Structure channels: 0 CT-like intensity in [0, 1], 1 PTV, 2 heart,
3 lungs, 4 spinal cord.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import container

logger = logging.getLogger(__name__)

ORGANS = ("heart", "lungs", "spinal_cord")
STRUCTURE_NAMES = ("ct", "ptv") + ORGANS
MANIFEST_VERSION = 1
SPLIT_RATIO = (200, 20, 80)
MAX_ATTEMPTS = 10


class PhantomGeometryError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    """Geometry ranges in units of the body semi-axes (fractions), dose falloff in pixels."""

    seed: int = 0
    H: int = 64
    W: int = 64
    body_axes: tuple[float, float] = (0.80, 0.92)  # horizontal semi-axis range, fraction of half-width
    body_aspect: tuple[float, float] = (0.68, 0.80)  # vertical / horizontal
    lung_axes: tuple[float, float] = (0.22, 0.30)
    heart_axes: tuple[float, float] = (0.18, 0.26)
    cord_radius: float = 0.06
    ptv_axes: tuple[float, float] = (0.10, 0.22)
    falloff: float = 8.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class Phantom:
    structure: np.ndarray  # (2 + O, H, W)
    dose: np.ndarray  # (1, H, W)
    body: np.ndarray  # (H, W) bool
    seed: int = 0
    attempts: int = field(default=1, repr=False)

    @property
    def ptv(self) -> np.ndarray:
        return self.structure[1] > 0.5

    def organ(self, name: str) -> np.ndarray:
        return self.structure[2 + ORGANS.index(name)] > 0.5


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def dose_from_ptv(ptv: np.ndarray, body: np.ndarray, falloff: float) -> np.ndarray:
    """Exponential falloff from the PTV, 1 inside it, 0 outside the body."""
    dist = ndimage.distance_transform_edt(~ptv)
    dose = np.exp(-dist / falloff)
    dose[ptv] = 1.0
    dose[~body] = 0.0
    return dose


def _draw(spec: PhantomSpec, rng: np.random.Generator) -> Phantom:
    H, W = spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    half = min(H, W) / 2.0

    bx = rng.uniform(*spec.body_axes) * half
    by = bx * rng.uniform(*spec.body_aspect)
    bcy, bcx = cy + rng.uniform(-0.02, 0.02) * half, cx + rng.uniform(-0.02, 0.02) * half
    body = _ellipse(yy, xx, bcy, bcx, by, bx)

    cord_r = spec.cord_radius * bx
    cord_cy = bcy + 0.72 * by
    cord = _ellipse(yy, xx, cord_cy, bcx, cord_r, cord_r)
    vertebra = _ellipse(yy, xx, cord_cy, bcx, 2.2 * cord_r, 2.2 * cord_r) & ~cord

    lungs = np.zeros((H, W), bool)
    for side in (-1.0, 1.0):
        lx = rng.uniform(*spec.lung_axes) * bx
        ly = by * rng.uniform(0.50, 0.62)
        lcx = bcx + side * bx * rng.uniform(0.40, 0.48)
        lcy = bcy + by * rng.uniform(-0.12, 0.02)
        lungs |= _ellipse(yy, xx, lcy, lcx, ly, lx, rng.uniform(-0.2, 0.2))

    hx = rng.uniform(*spec.heart_axes) * bx
    hy = hx * rng.uniform(0.8, 1.1)
    heart = _ellipse(yy, xx, bcy + by * rng.uniform(-0.05, 0.15), bcx + bx * rng.uniform(0.02, 0.12), hy, hx)
    lungs &= ~heart
    lungs &= ~vertebra

    # PTV: anywhere inside the thorax, kept clear of the cord
    px = rng.uniform(*spec.ptv_axes) * bx
    py = px * rng.uniform(0.7, 1.3)
    pcx = bcx + bx * rng.uniform(-0.55, 0.55)
    pcy = bcy + by * rng.uniform(-0.5, 0.35)
    ptv = _ellipse(yy, xx, pcy, pcx, py, px, rng.uniform(0, np.pi)) & body

    organs = [heart & body, lungs & body, cord & body]
    ct = np.zeros((H, W))
    ct[body] = 0.45
    ct[lungs] = 0.10
    ct[heart] = 0.55
    ct[vertebra] = 0.95
    ct[cord] = 0.60
    ct[ptv] = 0.50
    ct = np.clip(ndimage.gaussian_filter(ct, sigma=0.8), 0.0, 1.0)

    structure = np.stack([ct, ptv.astype(float)] + [o.astype(float) for o in organs])
    dose = dose_from_ptv(ptv, body, spec.falloff)[None]
    return Phantom(structure=structure, dose=dose, body=body)


def _valid(ph: Phantom) -> bool:
    ptv = ph.ptv
    if ptv.sum() < 4:
        return False
    overlaps = [bool(np.any(ptv & ph.organ(name))) for name in ORGANS]
    if overlaps[ORGANS.index("spinal_cord")]:
        return False
    return sum(overlaps) <= 1


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Deterministic phantom for ``spec.seed``.

    Degenerate draws (empty or tiny PTV, PTV touching the cord or more than one
    organ) are redrawn from a perturbed stream; after 10 attempts a
    :class:`PhantomGeometryError` is raised.
    """
    if spec.H < 32 or spec.W < 32:
        raise ValueError(f"generate_phantom: grid {spec.H}x{spec.W} smaller than 32x32")
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        ph = _draw(spec, rng)
        if _valid(ph):
            ph.seed = spec.seed
            ph.attempts = attempt + 1
            return ph
    raise PhantomGeometryError(f"generate_phantom: no valid geometry for seed {spec.seed} after {MAX_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# dataset on disk


def split_counts(total: int) -> tuple[int, int, int]:
    """Scale the 200/20/80 split to ``total`` samples, each split at least 1."""
    if total < 3:
        raise ValueError(f"split_counts: need at least 3 samples, got {total}")
    den = sum(SPLIT_RATIO)
    val = max(1, total * SPLIT_RATIO[1] // den)
    test = max(1, total * SPLIT_RATIO[2] // den)
    return total - val - test, val, test


def build_dataset(
    path,
    n_train: int,
    n_val: int,
    n_test: int,
    base_seed: int = 0,
    template: PhantomSpec | None = None,
    overwrite: bool = False,
) -> dict:
    """Generate and persist phantoms; returns the manifest.

    Splits use consecutive, disjoint seed ranges starting at ``base_seed``.
    The directory is assembled under a temporary name and renamed into place,
    so a failed build leaves nothing behind.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("build_dataset: every split needs at least one sample")
    path = Path(path)
    if path.exists():
        if not overwrite:
            raise FileExistsError(f"build_dataset: {path} exists (pass overwrite/--force to replace)")
    template = template or PhantomSpec()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / "samples").mkdir()
        splits: dict[str, list] = {}
        index = 0
        for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
            entries = []
            for _ in range(n):
                seed = base_seed + index
                ph = generate_phantom(replace(template, seed=seed))
                rel = f"samples/{index:04d}.bin"
                digest = save_phantom(tmp / rel, ph)
                entries.append({"id": f"{index:04d}", "file": rel, "seed": seed, "sha256": digest})
                index += 1
            splits[split] = entries
        spec_dict = template.to_dict()
        spec_dict.pop("seed")
        manifest = {
            "version": MANIFEST_VERSION,
            "base_seed": base_seed,
            "spec": spec_dict,
            "structures": list(STRUCTURE_NAMES),
            "splits": splits,
        }
        text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        (tmp / "manifest.json").write_text(text)
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info("wrote %d phantoms to %s", index, path)
    return json.loads(text)


def save_phantom(path, ph: Phantom) -> str:
    arrays = {"structure": ph.structure, "dose": ph.dose, "body": ph.body.astype(float)}
    return container.save(path, arrays, {"seed": ph.seed, "kind": "phantom"})


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no dataset manifest at {path}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')}")
    return manifest


def dataset_entries(path, split: str | None = None) -> list[dict]:
    manifest = read_manifest(path)
    if split is None:
        return [e for s in ("train", "val", "test") for e in manifest["splits"][s]]
    if split not in manifest["splits"]:
        raise KeyError(f"unknown split {split!r}")
    return manifest["splits"][split]


def load_sample(path, index: int, split: str | None = None) -> Phantom:
    """Load sample ``index`` (within ``split``, or over all splits in order), verifying its checksum."""
    entries = dataset_entries(path, split)
    if not 0 <= index < len(entries):
        raise IndexError(f"load_sample: index {index} outside [0, {len(entries)})")
    e = entries[index]
    arrays, meta = container.load(Path(path) / e["file"], expected_sha256=e["sha256"])
    return Phantom(
        structure=arrays["structure"], dose=arrays["dose"], body=arrays["body"] > 0.5, seed=int(meta["seed"])
    )


def load_split(path, split: str) -> list[Phantom]:
    return [load_sample(path, i, split) for i in range(len(dataset_entries(path, split)))]


def dataset_checksum(path) -> str:
    """sha256 over the manifest and every sample file, in manifest order."""
    h = hashlib.sha256((Path(path) / "manifest.json").read_bytes())
    for e in dataset_entries(path):
        h.update((Path(path) / e["file"]).read_bytes())
    return h.hexdigest()

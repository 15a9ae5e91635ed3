"""Volume files, dataset manifests, and the synthetic phantom generator.

Volume file layout ("AVOL1"):

    AVOL1\n
    shape X Y Z C dtype f32 spacing SX SY SZ\n
    <raw little-endian payload, last index fastest>

Supported dtypes are f32 (images, probabilities) and u8 (label masks).
Write-then-read and read-then-write are both bit-exact.

A dataset manifest is a text file of lines `<split> <image> [<mask>]` with
paths relative to the manifest's directory, preceded by a `seed` line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import BadMagicError, ConfigError, DataError, PayloadMismatchError, UnknownDtypeError

VOLUME_MAGIC = b"AVOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Volume:
    """A 4-D scalar grid (X, Y, Z, C) with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[..., None]
        if arr.ndim != 4:
            raise DataError(f"volume data must be 3-D or 4-D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.uint8):
            arr = arr.astype(np.float32)
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be strictly positive, got {self.spacing}")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype_tag(self) -> str:
        return "u8" if self.data.dtype == np.uint8 else "f32"


def write_volume(path: str | Path, volume: Volume) -> None:
    shape = " ".join(str(d) for d in volume.data.shape)
    spacing = " ".join(repr(float(s)) for s in volume.spacing)
    header = f"shape {shape} dtype {volume.dtype_tag} spacing {spacing}\n"
    payload = np.ascontiguousarray(volume.data, dtype=_DTYPES[volume.dtype_tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC + b"\n")
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_volume(path: str | Path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(VOLUME_MAGIC + b"\n"):
        raise BadMagicError(f"{path}: not a volume file (bad magic)")
    header_end = blob.find(b"\n", len(VOLUME_MAGIC) + 1)
    if header_end < 0:
        raise DataError(f"{path}: missing header line")
    tokens = blob[len(VOLUME_MAGIC) + 1:header_end].decode("ascii").split()
    try:
        shape = tuple(int(t) for t in tokens[tokens.index("shape") + 1:tokens.index("dtype")])
        dtype_tag = tokens[tokens.index("dtype") + 1]
        sp = tokens[tokens.index("spacing") + 1:tokens.index("spacing") + 4]
        spacing = (float(sp[0]), float(sp[1]), float(sp[2]))
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc
    if dtype_tag not in _DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype {dtype_tag!r}")
    if len(shape) != 4:
        raise DataError(f"{path}: expected 4 shape entries, got {shape}")
    payload = blob[header_end + 1:]
    expected = int(np.prod(shape)) * _DTYPES[dtype_tag].itemsize
    if len(payload) != expected:
        raise PayloadMismatchError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    data = np.frombuffer(payload, dtype=_DTYPES[dtype_tag]).reshape(shape)
    return Volume(data=data.copy(), spacing=spacing)


def zscore(data: np.ndarray) -> np.ndarray:
    """Per-volume intensity standardization (zero mean, unit variance)."""
    data = np.asarray(data, dtype=np.float64)
    std = data.std()
    if std == 0.0:
        return data - data.mean()
    return (data - data.mean()) / std


def pad_volume(data: np.ndarray, lows: tuple[int, int, int], highs: tuple[int, int, int],
               mode: str = "mirror") -> np.ndarray:
    """Pad the three spatial axes; mirror = edge-inclusive reflection.

    Mirror padding wider than the axis extent is applied in repeated passes.
    """
    if mode not in ("mirror", "zero"):
        raise ConfigError(f"padding mode must be mirror or zero, got {mode!r}")
    pads = [list(p) for p in zip(lows, highs)] + [[0, 0]]
    if mode == "zero":
        return np.pad(data, pads, mode="constant", constant_values=0.0)
    out = data
    while any(p[0] > 0 or p[1] > 0 for p in pads[:3]):
        step = []
        for axis, p in enumerate(pads[:3]):
            cap = out.shape[axis]
            lo, hi = min(p[0], cap), min(p[1], cap)
            p[0] -= lo
            p[1] -= hi
            step.append((lo, hi))
        out = np.pad(out, step + [(0, 0)], mode="symmetric")
    return out


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    image: Path
    mask: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0

    def paths(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def validate(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split tag {e.split!r}")
            key = str(e.image)
            if key in seen:
                raise DataError(f"{e.image} appears in more than one split")
            seen.add(key)


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    lines = [f"seed {manifest.seed}"]
    for e in manifest.entries:
        rel_img = e.image.name if e.image.parent == path.parent else str(e.image)
        if e.mask is None:
            lines.append(f"{e.split} {rel_img}")
        else:
            rel_msk = e.mask.name if e.mask.parent == path.parent else str(e.mask)
            lines.append(f"{e.split} {rel_img} {rel_msk}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    manifest = DatasetManifest()
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "seed":
            manifest.seed = int(parts[1])
            continue
        if len(parts) not in (2, 3):
            raise DataError(f"{path}: malformed manifest line {line!r}")
        mask = path.parent / parts[2] if len(parts) == 3 else None
        manifest.entries.append(ManifestEntry(parts[0], path.parent / parts[1], mask))
    manifest.validate()
    return manifest


DEFAULT_RATIOS = (0.64, 0.16, 0.20)  # val is 1/5 of the train+val pool


def split_manifest(pairs: list[tuple[Path, Path | None]], ratios: tuple[float, float, float],
                   seed: int) -> DatasetManifest:
    """Deterministic shuffled split of (image, mask) pairs into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if not pairs:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n = len(pairs)
    n_train = round(n * ratios[0])
    n_val = round(n * (ratios[0] + ratios[1])) - n_train
    manifest = DatasetManifest(seed=seed)
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        img, msk = pairs[idx]
        manifest.entries.append(ManifestEntry(split, Path(img), None if msk is None else Path(msk)))
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# synthetic phantoms


FG_FRACTION_RANGE = (0.02, 0.4)


def _ellipsoid_mask(shape: tuple[int, int, int], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    q = (((gx - center[0]) / radii[0]) ** 2
         + ((gy - center[1]) / radii[1]) ** 2
         + ((gz - center[2]) / radii[2]) ** 2)
    return q <= 1.0


def generate_synthetic_volume(shape: tuple[int, int, int], seed: int,
                              spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
                              ) -> tuple[Volume, Volume]:
    """One phantom: smooth noisy background plus 1-3 bright ellipsoids.

    The mask labels ellipsoid interiors 1.  Foreground fraction is kept in
    [0.02, 0.4] by resampling the ellipsoids; draws use the seeded PCG64
    generator only, so output is reproducible across platforms.
    """
    rng = np.random.default_rng(seed)
    extent = np.asarray(shape, dtype=np.float64)
    background = gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=max(2.0, min(shape) / 8.0))
    background = 0.12 * background / max(background.std(), 1e-12)
    image = background + rng.normal(0.0, 0.05, shape)

    lo, hi = FG_FRACTION_RANGE
    for _ in range(50):
        mask = np.zeros(shape, dtype=bool)
        count = int(rng.integers(1, 4))
        for _ in range(count):
            center = rng.uniform(0.3, 0.7, size=3) * extent
            radii = rng.uniform(0.14, 0.26, size=3) * extent
            mask |= _ellipsoid_mask(shape, center, radii)
        fraction = mask.mean()
        if lo <= fraction <= hi:
            break
    else:
        # Deterministic fallback: one centered ellipsoid of known fraction.
        mask = _ellipsoid_mask(shape, extent / 2.0, extent * 0.25)

    intensity = rng.uniform(1.1, 1.5)
    image = image + intensity * mask
    vol = Volume(image.astype(np.float32)[..., None], spacing)
    msk = Volume(mask.astype(np.uint8)[..., None], spacing)
    return vol, msk


def generate_synthetic_dataset(count: int, shape: tuple[int, int, int], seed: int,
                               spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
                               ) -> list[tuple[Volume, Volume]]:
    # Per-volume seeds derived arithmetically so any prefix is stable.
    return [generate_synthetic_volume(shape, seed * 100003 + i, spacing) for i in range(count)]


def write_synthetic_dataset(count: int, shape: tuple[int, int, int], seed: int,
                            out_dir: str | Path,
                            ratios: tuple[float, float, float] = DEFAULT_RATIOS,
                            spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Path:
    """Generate, save, and split a phantom dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs: list[tuple[Path, Path | None]] = []
    for i, (vol, msk) in enumerate(generate_synthetic_dataset(count, shape, seed, spacing)):
        img_path = out_dir / f"vol_{i:03d}.avol"
        msk_path = out_dir / f"msk_{i:03d}.avol"
        write_volume(img_path, vol)
        write_volume(msk_path, msk)
        pairs.append((img_path, msk_path))
    manifest = split_manifest(pairs, ratios, seed)
    manifest_path = out_dir / "manifest.txt"
    write_manifest(manifest_path, manifest)
    return manifest_path

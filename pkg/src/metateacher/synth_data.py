"""Procedural live/spoof image corpus with mask-localized planted artifacts.

Live images are a smooth elliptical luminance gradient with a per-image
color cast and low-amplitude value noise. Each spoof image starts from a
fresh live-style base and composites exactly one artifact inside a random
region; the region's 8x8 block-max downsample is the ground-truth cue
mask. Pixels are quantized to 8-bit levels at generation time so the
PPM/PGM round trip is exact.

Generation is deterministic in (config, seed): every sample draws from its
own PCG64 stream keyed by (seed, sample id), so samples are independent of
generation order.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

ATTACK_TYPES = ("grid_moire", "border_band", "patch_occluder", "lowfreq_blur")

# pixel-energy floor for the generator self-check (8-bit quantization safe)
_MIN_INSIDE_ENERGY = 4.0 / 255.0
_ENERGY_FACTOR = 5.0


class DataError(Exception):
    """Dataset generation, validation or I/O failure."""


@dataclass(frozen=True)
class Sample:
    id: int
    image: Tensor               # (3, H, W) in [0, 1]
    label: str                  # live | spoof
    attack_type: str            # none | one of ATTACK_TYPES
    cue_mask: Tensor            # (1, H/8, W/8) with values in {0, 1}

    def __post_init__(self) -> None:
        live = self.label == "live"
        if live != (self.attack_type == "none"):
            raise DataError(f"sample {self.id}: label/attack_type mismatch")
        ones = float(self.cue_mask.data.sum())
        if live and ones != 0:
            raise DataError(f"sample {self.id}: live sample with nonzero cue mask")
        if not live:
            cells = self.cue_mask.size
            # the 75% cap degenerates below 2 cells; a 1-cell spoof mask is all-ones
            if ones < 1 or ones > max(0.75 * cells, 1.0):
                raise DataError(
                    f"sample {self.id}: cue mask has {ones:.0f} of {cells} cells set")


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    generation_config: dict

    def lives(self) -> list[Sample]:
        return [s for s in self.samples if s.label == "live"]

    def spoofs(self, attack: str | None = None) -> list[Sample]:
        return [s for s in self.samples
                if s.label == "spoof" and (attack is None or s.attack_type == attack)]

    def by_id(self, sid: int) -> Sample:
        for s in self.samples:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def subset(self, ids) -> list[Sample]:
        wanted = set(ids)
        return [s for s in self.samples if s.id in wanted]


@dataclass(frozen=True)
class ProtocolSplit:
    name: str
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    held_out_attack: str


# ---------------------------------------------------------------------------
# generation


def _sample_rng(seed: int, sid: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(sid,))))


def _live_base(rng: np.random.Generator, size: int) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = rng.uniform(0.35, 0.65, 2)
    ax, ay = rng.uniform(0.22, 0.42, 2)
    ell = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    lum = 0.25 + 0.6 * np.exp(-ell)
    cast = rng.uniform(0.65, 1.0, 3)
    noise = rng.uniform(-0.035, 0.035, (size, size))
    img = cast[:, None, None] * lum[None] + noise[None]
    return np.clip(img, 0.0, 1.0)


def _rect_region(rng: np.random.Generator, size: int,
                 lo: float, hi: float) -> tuple[slice, slice]:
    h = int(rng.uniform(lo, hi) * size)
    w = int(rng.uniform(lo, hi) * size)
    h, w = max(h, 8), max(w, 8)
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    return slice(top, top + h), slice(left, left + w)


def _plant_grid_moire(rng, img, size):
    rs, cs = _rect_region(rng, size, 0.25, 0.5)
    ys = np.arange(rs.start, rs.stop)[:, None]
    xs = np.arange(cs.start, cs.stop)[None, :]
    p1, p2 = rng.uniform(2.5, 5.5, 2)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    pattern = 0.28 * np.sin(2 * np.pi * xs / p1 + ph1) * np.sin(2 * np.pi * ys / p2 + ph2)
    img[:, rs, cs] = np.clip(img[:, rs, cs] + pattern[None], 0.0, 1.0)
    footprint = np.zeros((size, size), dtype=bool)
    footprint[rs, cs] = True
    return footprint


def _plant_border_band(rng, img, size):
    band = max(4, int(rng.uniform(0.06, 0.12) * size))
    ring = np.zeros((size, size), dtype=bool)
    ring[:band, :] = ring[-band:, :] = True
    ring[:, :band] = ring[:, -band:] = True
    color = np.full(3, 0.08)
    color[rng.integers(0, 3)] = rng.uniform(0.85, 1.0)
    for c in range(3):
        chan = img[c]
        chan[ring] = 0.2 * chan[ring] + 0.8 * color[c]
    return ring


def _plant_patch_occluder(rng, img, size):
    rs, cs = _rect_region(rng, size, 0.2, 0.4)
    color = rng.uniform(0.0, 1.0, 3)
    h, w = rs.stop - rs.start, cs.stop - cs.start
    speckle = rng.uniform(-0.01, 0.01, (h, w))
    img[:, rs, cs] = np.clip(color[:, None, None] + speckle[None], 0.0, 1.0)
    footprint = np.zeros((size, size), dtype=bool)
    footprint[rs, cs] = True
    return footprint


def _box_blur(img: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        padded = np.pad(img[c], pad, mode="edge")
        csum = np.cumsum(np.cumsum(padded, axis=0), axis=1)
        csum = np.pad(csum, ((1, 0), (1, 0)))
        h, w = img[c].shape
        out[c] = (csum[k:k + h, k:k + w] - csum[:h, k:k + w]
                  - csum[k:k + h, :w] + csum[:h, :w]) / (k * k)
    return out


def _plant_lowfreq_blur(rng, img, size):
    rs, cs = _rect_region(rng, size, 0.3, 0.55)
    blurred = _box_blur(img, 9)
    region = blurred[:, rs, cs]
    mu = region.mean(axis=(1, 2), keepdims=True)
    # contrast drop plus a fixed dimming so the edit survives 8-bit quantization
    img[:, rs, cs] = np.clip(mu + 0.45 * (region - mu) - 0.08, 0.0, 1.0)
    footprint = np.zeros((size, size), dtype=bool)
    footprint[rs, cs] = True
    return footprint


_PLANTERS = {
    "grid_moire": _plant_grid_moire,
    "border_band": _plant_border_band,
    "patch_occluder": _plant_patch_occluder,
    "lowfreq_blur": _plant_lowfreq_blur,
}


def _block_max(footprint: np.ndarray) -> np.ndarray:
    h, w = footprint.shape
    return footprint.reshape(h // 8, 8, w // 8, 8).any(axis=(1, 3))


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)


def generate_sample(sid: int, attack: str, size: int, seed: int
                    ) -> tuple[Sample, np.ndarray, np.ndarray]:
    """Generate one sample; also returns the pre-artifact base image and the
    pixel-level artifact footprint (all-zero for live) for verification."""
    rng = _sample_rng(seed, sid)
    base = _live_base(rng, size)
    if attack == "none":
        img = _quantize(base)
        mask = np.zeros((1, size // 8, size // 8), dtype=np.float32)
        sample = Sample(sid, Tensor(img), "live", "none", Tensor(mask))
        return sample, base, np.zeros((size, size), dtype=bool)
    img = base.copy()
    footprint = _PLANTERS[attack](rng, img, size)
    energy = np.abs(img - base).mean(axis=0)
    inside = float(energy[footprint].mean())
    outside = float(energy[~footprint].mean()) if (~footprint).any() else 0.0
    if inside < _MIN_INSIDE_ENERGY or inside < _ENERGY_FACTOR * outside:
        raise DataError(
            f"sample {sid} ({attack}): artifact energy {inside:.4f} inside vs "
            f"{outside:.4f} outside fails the x{_ENERGY_FACTOR:.0f} self-check")
    mask = _block_max(footprint).astype(np.float32)[None]
    sample = Sample(sid, Tensor(_quantize(img)), "spoof", attack, Tensor(mask))
    return sample, base, footprint


def generate_dataset(n_live: int, n_per_attack: int, image_size: int,
                     seed: int) -> Dataset:
    if image_size % 8:
        raise DataError(f"image_size {image_size} not divisible by 8")
    if n_live < 1 or n_per_attack < 1:
        raise DataError("n_live and n_per_attack must be at least 1")
    samples: list[Sample] = []
    sid = 0
    for _ in range(n_live):
        samples.append(generate_sample(sid, "none", image_size, seed)[0])
        sid += 1
    for attack in ATTACK_TYPES:
        for _ in range(n_per_attack):
            samples.append(generate_sample(sid, attack, image_size, seed)[0])
            sid += 1
    config = {"n_live": n_live, "n_per_attack": n_per_attack,
              "image_size": image_size, "seed": seed}
    return Dataset(tuple(samples), config)


# ---------------------------------------------------------------------------
# protocol splits


def leave_one_attack_out(dataset: Dataset) -> list[ProtocolSplit]:
    """One split per attack type: test = that attack's spoofs plus a
    disjoint quarter of the live faces (stride-4 over ids, rotated per
    split); train = everything else."""
    attacks = [a for a in ATTACK_TYPES if dataset.spoofs(a)]
    if len(attacks) < 2:
        raise DataError("leave-one-attack-out needs at least 2 attack types")
    live_ids = sorted(s.id for s in dataset.lives())
    splits = []
    for k, attack in enumerate(attacks):
        test_live = [sid for i, sid in enumerate(live_ids) if i % 4 == k % 4]
        test_ids = sorted(test_live + [s.id for s in dataset.spoofs(attack)])
        test_set = set(test_ids)
        train_ids = sorted(s.id for s in dataset.samples if s.id not in test_set)
        splits.append(ProtocolSplit(f"loao_{attack}", tuple(train_ids),
                                    tuple(test_ids), attack))
    return splits


# ---------------------------------------------------------------------------
# PPM / PGM I/O


def _write_pnm(path: Path, magic: bytes, array_u8: np.ndarray) -> None:
    h, w = array_u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(array_u8.tobytes())


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != magic or parts[2] != b"255":
        raise DataError(f"{path}: malformed {magic.decode()} header")
    try:
        w, h = (int(t) for t in parts[1].split())
    except ValueError:
        raise DataError(f"{path}: malformed dimensions") from None
    channels = 3 if magic == b"P6" else 1
    raw = parts[3]
    if len(raw) != w * h * channels:
        raise DataError(f"{path}: payload is {len(raw)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return arr


def write_ppm(path: Path, image: np.ndarray) -> None:
    """image: (3, H, W) floats in [0,1] at exact 8-bit levels."""
    u8 = np.rint(np.asarray(image) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    _write_pnm(Path(path), b"P6", np.ascontiguousarray(u8))


def read_ppm(path: Path) -> np.ndarray:
    arr = _read_pnm(Path(path), b"P6")
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_pgm(path: Path, mask: np.ndarray) -> None:
    """mask: (1, h, w) floats in {0, 1}."""
    u8 = (np.asarray(mask)[0] * 255.0).astype(np.uint8)
    _write_pnm(Path(path), b"P5", np.ascontiguousarray(u8))


def read_pgm(path: Path) -> np.ndarray:
    arr = _read_pnm(Path(path), b"P5")[:, :, 0]
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DataError(f"{path}: mask contains values other than 0 and 255")
    return (arr.astype(np.float32) / 255.0)[None].copy()


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: Dataset, dirpath) -> None:
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in dataset.samples:
        img_name = f"img_{s.id:05d}.ppm"
        mask_name = f"mask_{s.id:05d}.pgm"
        write_ppm(root / img_name, s.image.data)
        write_pgm(root / mask_name, s.cue_mask.data)
        digest = hashlib.sha256((root / img_name).read_bytes()).hexdigest()
        rows.append((s.id, s.label, s.attack_type, img_name, mask_name, digest))
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "attack_type", "image_file", "mask_file", "sha256"])
        writer.writerows(rows)
    with open(root / "generation.cfg", "w") as fh:
        for key, value in dataset.generation_config.items():
            fh.write(f"{key} = {value}\n")


def load_dataset(dirpath) -> Dataset:
    root = Path(dirpath)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"{manifest}: missing manifest")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label", "attack_type", "image_file", "mask_file", "sha256"]:
            raise DataError(f"{manifest}: unexpected header {header}")
        rows = list(reader)
    n_ppm = len(list(root.glob("*.ppm")))
    n_pgm = len(list(root.glob("*.pgm")))
    if n_ppm != len(rows) or n_pgm != len(rows):
        raise DataError(
            f"{root}: manifest lists {len(rows)} samples but directory holds "
            f"{n_ppm} images and {n_pgm} masks")
    config: dict = {}
    cfg_path = root / "generation.cfg"
    if cfg_path.is_file():
        for line in cfg_path.read_text().splitlines():
            if "=" in line:
                key, value = (t.strip() for t in line.split("=", 1))
                config[key] = int(value) if value.lstrip("-").isdigit() else value
    samples = []
    for row in rows:
        if len(row) != 6:
            raise DataError(f"{manifest}: malformed row {row}")
        sid, label, attack, img_name, mask_name, digest = row
        img_path = root / img_name
        if not img_path.is_file():
            raise DataError(f"{img_path}: listed in manifest but missing")
        blob = img_path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != digest:
            raise DataError(f"{img_path}: checksum mismatch")
        image = read_ppm(img_path)
        mask = read_pgm(root / mask_name)
        samples.append(Sample(int(sid), Tensor(image), label, attack, Tensor(mask)))
    return Dataset(tuple(samples), config)

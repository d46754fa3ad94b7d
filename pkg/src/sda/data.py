"""Synthetic two-domain person images, Market-style folders, PK sampling and augmentation.

Images are float64 arrays ``[C, H, W]`` with values in [-1, 1].
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}


@dataclass
class ReIDSet:
    images: np.ndarray  # [N, C, H, W]
    ids: np.ndarray
    cams: np.ndarray
    domain: str = "source"
    split: str = "train"

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "ReIDSet":
        return ReIDSet(self.images[idx], self.ids[idx], self.cams[idx], self.domain, self.split)

    @property
    def num_ids(self) -> int:
        return len(np.unique(self.ids))


@dataclass
class DomainData:
    train: ReIDSet
    query: ReIDSet | None = None
    gallery: ReIDSet | None = None


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    cams: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------- synthetic generation

@dataclass
class DomainStyle:
    color_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    color_offset: tuple = (0.0, 0.0, 0.0)
    background_mean: tuple = (0.55, 0.55, 0.55)
    background_std: float = 0.08
    noise: float = 0.03
    palette_low: float = 0.05  # clothing colors are drawn uniformly in [low, high]^3
    palette_high: float = 0.95


def default_target_style() -> DomainStyle:
    return DomainStyle(
        color_matrix=((0.75, 0.20, 0.05), (0.10, 0.70, 0.20), (0.05, 0.15, 0.55)),
        color_offset=(0.12, 0.08, 0.02),
        background_mean=(0.35, 0.40, 0.30),
        background_std=0.06,
        noise=0.04,
        palette_low=0.15,
        palette_high=0.75,
    )


@dataclass
class SynthSpec:
    ids_source: int = 16
    ids_target_train: int = 16
    ids_target_test: int = 16
    images_per_id: int = 8
    cameras: int = 3
    height: int = 24
    width: int = 12
    camera_gain: float = 0.15  # per-camera, per-channel illumination spread
    image_gain: float = 0.06  # per-image brightness jitter
    jitter: int = 1  # per-image spatial jitter in pixels
    min_channel_gap: float = 0.03
    source: DomainStyle = field(default_factory=DomainStyle)
    target: DomainStyle = field(default_factory=default_target_style)


def _identity_params(rng: np.random.Generator, n: int, style: DomainStyle) -> list[dict]:
    out = []
    for _ in range(n):
        out.append({
            "torso": rng.uniform(style.palette_low, style.palette_high, 3),
            "legs": rng.uniform(style.palette_low, style.palette_high, 3),
            "accent": rng.uniform(style.palette_low, style.palette_high, 3),
            "stripe": bool(rng.random() < 0.5),
            "half_width": int(rng.integers(3, 5)),
            "skin": 0.6 + 0.15 * rng.random(),
        })
    return out


def _camera_params(rng: np.random.Generator, n: int, spec: SynthSpec) -> list[dict]:
    return [{"gain": 1.0 + spec.camera_gain * rng.uniform(-1, 1, 3),
             "dy": int(rng.integers(-1, 2)), "dx": int(rng.integers(-1, 2))} for _ in range(n)]


def _render(person: dict, cam: dict, style: DomainStyle, spec: SynthSpec,
            rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.empty((3, h, w))
    bg = np.asarray(style.background_mean) + style.background_std * rng.normal(size=3)
    img[:] = bg[:, None, None]
    img += 0.04 * np.linspace(-1, 1, h)[None, :, None]  # floor-to-ceiling shading
    dy = cam["dy"] + int(rng.integers(-spec.jitter, spec.jitter + 1))
    dx = cam["dx"] + int(rng.integers(-spec.jitter, spec.jitter + 1))
    cx = w // 2 + dx
    sy = h / 24.0

    def band(r0, r1, half, color):
        r0, r1 = int(round(r0 * sy)) + dy, int(round(r1 * sy)) + dy
        r0, r1 = max(r0, 0), min(r1, h)
        c0, c1 = max(cx - half, 0), min(cx + half, w)
        if r0 < r1 and c0 < c1:
            img[:, r0:r1, c0:c1] = np.asarray(color)[:, None, None]

    hw = person["half_width"]
    band(2, 6, 2, np.full(3, person["skin"]) * np.array([1.0, 0.85, 0.7]))
    band(6, 14, hw, person["torso"])
    if person["stripe"]:
        band(9, 11, hw, person["accent"])
    band(14, 23, hw - 1, person["legs"])

    gain = cam["gain"] * (1.0 + spec.image_gain * rng.normal())
    img *= gain[:, None, None]
    m = np.asarray(style.color_matrix)
    img = np.einsum("ij,jhw->ihw", m, img) + np.asarray(style.color_offset)[:, None, None]
    img += style.noise * rng.normal(size=img.shape)
    return np.clip(2.0 * img - 1.0, -1.0, 1.0)


def _render_domain(rng, people: list[dict], id_offset: int, cams: list[dict], style: DomainStyle,
                   spec: SynthSpec, domain: str) -> ReIDSet:
    images, ids, camids = [], [], []
    for k, person in enumerate(people):
        start = int(rng.integers(len(cams)))
        for j in range(spec.images_per_id):
            c = (start + j) % len(cams)
            images.append(_render(person, cams[c], style, spec, rng))
            ids.append(id_offset + k)
            camids.append(c)
    return ReIDSet(np.stack(images), np.asarray(ids), np.asarray(camids), domain, "train")


def _split_query(test: ReIDSet, queries_per_id: int = 2) -> tuple[ReIDSet, ReIDSet]:
    """First image of each of the first ``queries_per_id`` cameras per identity becomes a query."""
    q_idx = []
    for pid in np.unique(test.ids):
        seen = set()
        for i in np.flatnonzero(test.ids == pid):
            if test.cams[i] not in seen and len(seen) < queries_per_id:
                seen.add(test.cams[i])
                q_idx.append(i)
    mask = np.zeros(len(test), dtype=bool)
    mask[q_idx] = True
    query, gallery = test.subset(np.flatnonzero(mask)), test.subset(np.flatnonzero(~mask))
    query.split, gallery.split = "query", "gallery"
    return query, gallery


def synth_generate(spec: SynthSpec, seed: int) -> tuple[DomainData, DomainData]:
    """Render a labeled source domain and a target domain with train/query/gallery splits."""
    if spec.cameras < 2:
        raise ValueError("need at least 2 cameras for cross-camera evaluation")
    if spec.images_per_id < 2:
        raise ValueError("need at least 2 images per identity for triplet mining")
    rng = np.random.default_rng(seed)
    cams_s = _camera_params(rng, spec.cameras, spec)
    cams_t = _camera_params(rng, spec.cameras, spec)
    people_s = _identity_params(rng, spec.ids_source, spec.source)
    people_t = _identity_params(rng, spec.ids_target_train + spec.ids_target_test, spec.target)

    source = _render_domain(rng, people_s, 0, cams_s, spec.source, spec, "source")
    off = spec.ids_source
    target_train = _render_domain(rng, people_t[:spec.ids_target_train], off, cams_t,
                                  spec.target, spec, "target")
    off += spec.ids_target_train
    target_test = _render_domain(rng, people_t[spec.ids_target_train:], off, cams_t,
                                 spec.target, spec, "target")
    assert not set(source.ids) & (set(target_train.ids) | set(target_test.ids))
    gap = np.abs(source.images.mean(axis=(0, 2, 3)) - target_train.images.mean(axis=(0, 2, 3)))
    if gap.max() < spec.min_channel_gap:
        raise ValueError(f"domains too similar: channel gap {gap.max():.4f} < {spec.min_channel_gap}")
    query, gallery = _split_query(target_test)
    return DomainData(source), DomainData(target_train, query, gallery)


# ---------------------------------------------------------------- directory I/O

def parse_reid_filename(name: str) -> tuple[int, int] | None:
    m = FILENAME_RE.match(name)
    if m is None or Path(name).suffix.lower() not in IMAGE_SUFFIXES:
        return None
    return int(m.group(1)), int(m.group(2))


def load_reid_dir(path, shape: tuple[int, int] = (24, 12), domain: str = "target",
                  split: str = "train") -> ReIDSet:
    """Read ``{personID}_c{cam}*.jpg|png`` files, resized to ``shape`` = (H, W)."""
    from PIL import Image

    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else []
    if not files:
        raise ValueError(f"no files in {path}")
    images, ids, cams = [], [], []
    for f in files:
        parsed = parse_reid_filename(f.name)
        if parsed is None:
            log.warning("skipping unparseable file %s", f.name)
            continue
        with Image.open(f) as im:
            im = im.convert("RGB").resize((shape[1], shape[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64).transpose(2, 0, 1)
        images.append(arr / 127.5 - 1.0)
        ids.append(parsed[0])
        cams.append(parsed[1])
    if not images:
        raise ValueError(f"no re-ID images found in {path}")
    return ReIDSet(np.stack(images), np.asarray(ids), np.asarray(cams), domain, split)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[..., C, H, W] in [-1, 1] -> [..., H, W, C] uint8."""
    arr = np.clip(np.rint((images + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.moveaxis(arr, -3, -1)


def export_reid_dir(data: ReIDSet, path) -> list[Path]:
    """Write a set as lossless PNGs using the Market naming scheme (cameras 1-based)."""
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (img, pid, cam) in enumerate(zip(to_uint8(data.images), data.ids, data.cams)):
        f = path / f"{int(pid):04d}_c{int(cam) + 1}s1_{i:06d}_00.png"
        Image.fromarray(img).save(f)
        written.append(f)
    return written


def export_domain(data: DomainData, root) -> None:
    root = Path(root)
    for split, sub in SPLIT_DIRS.items():
        part = getattr(data, split)
        if part is not None:
            export_reid_dir(part, root / sub)


def load_domain(root, shape: tuple[int, int] = (24, 12), domain: str = "target") -> DomainData:
    """Load a Market-style root; cameras are shifted back to 0-based."""
    root = Path(root)
    parts = {}
    for split, sub in SPLIT_DIRS.items():
        if (root / sub).is_dir():
            s = load_reid_dir(root / sub, shape, domain, split)
            s.cams = s.cams - 1
            parts[split] = s
    if "train" not in parts:
        raise ValueError(f"{root} has no {SPLIT_DIRS['train']} directory")
    return DomainData(parts["train"], parts.get("query"), parts.get("gallery"))


# ---------------------------------------------------------------- sampling

def pk_sample(labels: np.ndarray, P: int, K: int, rng: np.random.Generator,
              exclude: int | None = -1) -> np.ndarray:
    """Indices of a P x K batch: P distinct labels, K samples each (with replacement if short)."""
    labels = np.asarray(labels)
    valid = labels != exclude if exclude is not None else np.ones(len(labels), dtype=bool)
    pids = np.unique(labels[valid])
    if len(pids) < P:
        raise ValueError(f"need {P} identities for PK sampling, only {len(pids)} available")
    chosen = rng.choice(pids, size=P, replace=False)
    idx = []
    for pid in chosen:
        members = np.flatnonzero((labels == pid) & valid)
        idx.append(rng.choice(members, size=K, replace=len(members) < K))
    return np.concatenate(idx)


def make_batch(data: ReIDSet, labels: np.ndarray, P: int, K: int,
               rng: np.random.Generator) -> LabeledBatch:
    idx = pk_sample(labels, P, K, rng)
    return LabeledBatch(data.images[idx], np.asarray(labels)[idx], data.cams[idx], idx)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_pad: int = 2
    crop_prob: float = 1.0
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, crop_prob=0.0, erase_prob=0.0)


def erase_box(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator,
              attempts: int = 100) -> tuple[int, int, int, int] | None:
    """A random rectangle (top, left, height, width) whose area fraction lies in ``cfg.erase_area``."""
    area = h * w
    lo, hi = cfg.erase_area
    for _ in range(attempts):
        target = rng.uniform(lo, hi) * area
        aspect = np.exp(rng.uniform(np.log(cfg.erase_aspect[0]), np.log(cfg.erase_aspect[1])))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w and lo * area <= eh * ew <= hi * area:
            return int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)), eh, ew
    return None


def augment(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            fill: np.ndarray | None = None) -> np.ndarray:
    """Flip, pad-and-crop, and random erasing; ``fill`` is the per-channel dataset mean."""
    out = images.copy()
    n, c, h, w = out.shape
    fill = np.zeros(c) if fill is None else np.asarray(fill)
    p = cfg.crop_pad
    for i in range(n):
        if rng.random() < cfg.flip_prob:
            out[i] = out[i, :, :, ::-1]
        if p and rng.random() < cfg.crop_prob:
            padded = np.empty((c, h + 2 * p, w + 2 * p))
            padded[:] = fill[:, None, None]
            padded[:, p:p + h, p:p + w] = out[i]
            top, left = rng.integers(0, 2 * p + 1, size=2)
            out[i] = padded[:, top:top + h, left:left + w]
        if rng.random() < cfg.erase_prob:
            box = erase_box(h, w, cfg, rng)
            if box is not None:
                t, l, eh, ew = box
                out[i, :, t:t + eh, l:l + ew] = fill[:, None, None]
    return out

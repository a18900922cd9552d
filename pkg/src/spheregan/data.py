"""Dataset layout, loading, training-pair construction and the synthetic 360° generator.

On-disk layout of one video::

    <video>/frames/000000.png      8-bit RGB equirectangular frame
    <video>/saliency/000000.png    8-bit gray saliency map
    <video>/fixations/000000.csv   "row,col" lines, pixel coordinates

A dataset root holds one directory per video plus ``dataset.json``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import pixel_to_sphere

MANIFEST = "dataset.json"


class DataError(ValueError):
    pass


@dataclass
class VideoSequence:
    id: str
    frames: list = field(default_factory=list)
    saliency: list = field(default_factory=list)
    fixations: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape[1:] if self.frames else None

    def validate(self):
        n = len(self.frames)
        if len(self.saliency) != n or len(self.fixations) != n:
            raise DataError(
                f"{self.id}: {n} frames, {len(self.saliency)} saliency maps, {len(self.fixations)} fixation sets"
            )
        if not n:
            return
        h, w = self.frames[0].shape[1:]
        for i, (f, s, fx) in enumerate(zip(self.frames, self.saliency, self.fixations)):
            if f.shape != (3, h, w) or s.shape != (1, h, w):
                raise DataError(f"{self.id} frame {i}: shapes {f.shape}/{s.shape}, expected 3x{h}x{w}/1x{h}x{w}")
            if (s < 0).any():
                raise DataError(f"{self.id} frame {i}: negative saliency")
            fx = np.asarray(fx).reshape(-1, 2)
            if len(fx) and ((fx < 0).any() or (fx[:, 0] >= h).any() or (fx[:, 1] >= w).any()):
                raise DataError(f"{self.id} frame {i}: fixation outside {h}x{w}")


@dataclass
class TrainingPair:
    frame: np.ndarray
    sal_prev: np.ndarray
    sal_target: np.ndarray
    fixations: np.ndarray
    t: int
    k: int
    video_id: str = ""


def make_pairs(seq: VideoSequence, k: int = 5):
    """One pair per t in [k, len): (frame_t, saliency_{t-k}) -> saliency_t."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return [
        TrainingPair(seq.frames[t], seq.saliency[t - k], seq.saliency[t], seq.fixations[t], t, k, seq.id)
        for t in range(k, len(seq))
    ]


# --------------------------------------------------------------------------
# IO


def _name(i):
    return f"{i:06d}"


def to_uint8(a):
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(a):
    """Round to the 8-bit grid the PNG files store."""
    return (to_uint8(a) / 255.0).astype(np.float32)


def write_map_png(path, sal):
    Image.fromarray(to_uint8(np.asarray(sal).reshape(np.asarray(sal).shape[-2:])), mode="L").save(path)


def read_map_png(path):
    with Image.open(path) as im:
        if im.mode != "L":
            raise DataError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        return (np.asarray(im, dtype=np.float32) / 255.0)[None]


def write_fixations(path, pts):
    pts = np.asarray(pts, dtype=np.int64).reshape(-1, 2)
    with open(path, "w") as f:
        f.write("row,col\n")
        for r, c in pts:
            f.write(f"{r},{c}\n")


def read_fixations(path):
    pts = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.lower().startswith("row"):
                continue
            try:
                r, c = line.split(",")
                pts.append((int(r), int(c)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected 'row,col', got {line!r}") from None
    return np.asarray(pts, dtype=np.int64).reshape(-1, 2)


def save_sequence(seq: VideoSequence, directory):
    d = Path(directory)
    for sub in ("frames", "saliency", "fixations"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for i, (f, s, fx) in enumerate(zip(seq.frames, seq.saliency, seq.fixations)):
        Image.fromarray(to_uint8(np.transpose(f, (1, 2, 0))), mode="RGB").save(d / "frames" / f"{_name(i)}.png")
        write_map_png(d / "saliency" / f"{_name(i)}.png", s)
        write_fixations(d / "fixations" / f"{_name(i)}.csv", fx)


def _stems(folder, suffix):
    if not folder.is_dir():
        return None
    return sorted(p.stem for p in folder.iterdir() if p.suffix == suffix)


def load_sequence(directory, height=None, width=None, video_id=None):
    """Load one video directory; raises :class:`DataError` naming any missing or bad file."""
    d = Path(directory)
    frames_dir, sal_dir, fix_dir = d / "frames", d / "saliency", d / "fixations"
    stems = {
        "frames": _stems(frames_dir, ".png"),
        "saliency": _stems(sal_dir, ".png"),
        "fixations": _stems(fix_dir, ".csv"),
    }
    for sub, names in stems.items():
        if names is None:
            raise DataError(f"missing directory {d / sub}")
    every = sorted(set().union(*stems.values()))
    problems = []
    for sub, ext in (("frames", ".png"), ("saliency", ".png"), ("fixations", ".csv")):
        have = set(stems[sub])
        problems += [str(d / sub / f"{s}{ext}") for s in every if s not in have]
    if problems:
        raise DataError("missing files: " + ", ".join(problems))

    seq = VideoSequence(video_id or d.name)
    for s in every:
        fpath = frames_dir / f"{s}.png"
        try:
            with Image.open(fpath) as im:
                if im.mode != "RGB":
                    raise DataError(f"{fpath}: expected 8-bit RGB, got mode {im.mode}")
                frame = np.transpose(np.asarray(im, dtype=np.float32) / 255.0, (2, 0, 1))
            sal = read_map_png(sal_dir / f"{s}.png")
        except (OSError, SyntaxError) as exc:
            raise DataError(f"cannot decode image for frame {s} in {d}: {exc}") from None
        seq.frames.append(np.ascontiguousarray(frame))
        seq.saliency.append(sal)
        seq.fixations.append(read_fixations(fix_dir / f"{s}.csv"))

    if seq.frames:
        h, w = seq.frames[0].shape[1:]
        bad = [str(frames_dir / f"{s}.png") for s, f in zip(every, seq.frames) if f.shape[1:] != (h, w)]
        bad += [str(sal_dir / f"{s}.png") for s, m in zip(every, seq.saliency) if m.shape[1:] != (h, w)]
        if bad:
            raise DataError("size mismatch in: " + ", ".join(bad))
        if (height is not None and h != height) or (width is not None and w != width):
            raise DataError(f"{d}: frames are {h}x{w}, expected {height}x{width}")
    seq.validate()
    return seq


def load_dataset(root, height=None, width=None):
    """Load every video listed in ``dataset.json`` (or every subdirectory, sorted)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest = root / MANIFEST
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        ids = [v["id"] for v in meta["videos"]]
        height = height or meta.get("height")
        width = width or meta.get("width")
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "frames").is_dir())
    if not ids:
        raise DataError(f"no videos found under {root}")
    return [load_sequence(root / i, height, width, video_id=i) for i in ids]


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    num_videos: int = 4
    frames_per_video: int = 20
    height: int = 64
    seed: int = 0
    fixations_per_frame: int = 15
    sigma_deg: float = 12.0
    target_radius_deg: float = 8.0
    speed_deg: tuple = (3.0, 6.0)


def _unit_vectors(height, width):
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    lat, lon = pixel_to_sphere(rows, cols, height, width)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _random_unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _texture(rng, vecs):
    """Smooth random colour field on the sphere, values in roughly [0.1, 0.6]."""
    img = np.zeros(vecs.shape[:2] + (3,))
    for ch in range(3):
        acc = np.zeros(vecs.shape[:2])
        for _ in range(6):
            d = _random_unit(rng)
            freq = rng.uniform(2.0, 8.0)
            acc += rng.uniform(0.5, 1.0) * np.sin(freq * (vecs @ d) + rng.uniform(0, 2 * math.pi))
        acc = (acc - acc.min()) / (np.ptp(acc) + 1e-12)
        img[..., ch] = 0.1 + 0.5 * acc
    return img


def synth_sequence(cfg: SynthConfig, rng, video_id="video_000"):
    """Render one synthetic video: a bright disk moving along a random great circle."""
    h = cfg.height
    w = 2 * h
    vecs = _unit_vectors(h, w)
    background = _texture(rng, vecs)
    start = _random_unit(rng)
    direction = _random_unit(rng)
    direction -= direction.dot(start) * start
    direction /= np.linalg.norm(direction)
    speed = math.radians(rng.uniform(*cfg.speed_deg))
    color = np.array([1.0, 0.95, 0.3])
    radius = math.radians(cfg.target_radius_deg)
    sigma = math.radians(cfg.sigma_deg)

    seq = VideoSequence(video_id)
    for f in range(cfg.frames_per_video):
        ang = speed * f
        center = math.cos(ang) * start + math.sin(ang) * direction
        dist = np.arccos(np.clip(vecs @ center, -1.0, 1.0))
        frame = np.where((dist < radius)[..., None], color, background)
        sal = np.exp(-0.5 * (dist / sigma) ** 2)
        sal /= sal.max()
        sal_q = quantize(sal)
        p = sal_q.reshape(-1).astype(np.float64)
        idx = rng.choice(p.size, size=cfg.fixations_per_frame, p=p / p.sum())
        seq.frames.append(quantize(np.transpose(frame, (2, 0, 1))))
        seq.saliency.append(sal_q[None])
        seq.fixations.append(np.stack([idx // w, idx % w], axis=1).astype(np.int64))
    return seq


def synth_generate(cfg: SynthConfig, out_dir=None):
    """Generate ``cfg.num_videos`` sequences; optionally write them plus a manifest to ``out_dir``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_videos)
    seqs = [
        synth_sequence(cfg, np.random.default_rng(s), video_id=f"video_{i:03d}")
        for i, s in enumerate(seeds)
    ]
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        for seq in seqs:
            save_sequence(seq, root / seq.id)
        manifest = {
            "videos": [{"id": s.id, "frames": len(s)} for s in seqs],
            "height": cfg.height,
            "width": 2 * cfg.height,
            "seed": cfg.seed,
            "generator": {
                "fixations_per_frame": cfg.fixations_per_frame,
                "sigma_deg": cfg.sigma_deg,
                "target_radius_deg": cfg.target_radius_deg,
                "speed_deg": list(cfg.speed_deg),
            },
        }
        (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return seqs


def list_frame_files(directory, suffix):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix == suffix)

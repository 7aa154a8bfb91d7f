"""Deterministic synthetic multi-object videos with exact ground-truth masks.

Textured shapes (disk / rectangle / triangle) move over a textured background
under closed-form motion, so frame t is a pure function of (spec, t) and
arbitrarily long videos stream without holding the sequence in memory.
Appearance optionally drifts per frame (color shift plus texture scroll) at a
configurable rate.

Dataset layout on disk: ``frames/%06d.ppm`` (binary P6), ``masks/%06d.pgm``
(binary P5, pixel value = object index, 0 = background) and ``meta.json``.
Frame numbering is 1-based so file names match frame indices used elsewhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .numerics import Rng

SHAPES = ("disk", "rectangle", "triangle")
MOTIONS = ("linear", "sinusoidal", "static")

# Base colors: background first, then up to 5 objects (RGB in [0, 1]).
# Regions are well separated in color space so appearance is matchable.
_PALETTE = np.array(
    [
        [0.30, 0.31, 0.34],
        [0.85, 0.22, 0.18],
        [0.20, 0.80, 0.30],
        [0.25, 0.35, 0.90],
        [0.90, 0.80, 0.20],
        [0.80, 0.25, 0.85],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    num_objects: int = 2
    frames: int = 10
    seed: int = 0
    motion: str = "linear"
    drift: float = 0.0
    occlusion: bool = False
    shapes: tuple = SHAPES

    def __post_init__(self):
        if not (1 <= self.num_objects <= 5):
            raise ValueError("num_objects must be in 1..5")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if not (0.0 <= self.drift <= 0.05):
            raise ValueError("drift must be in [0, 0.05]")
        if self.width < 32 or self.height < 32:
            raise ValueError("frame must be at least 32x32")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")


@dataclass
class VideoSequence:
    frames: list
    gt: list
    annotated: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise ValueError("frames and masks must have equal length")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_objects(self) -> int:
        return int(max(int(g.max()) for g in self.gt))


# -- scene construction -------------------------------------------------------


@dataclass(frozen=True)
class _ObjectTrack:
    shape: str
    radius: float
    p0: np.ndarray      # initial center (y, x)
    vel: np.ndarray     # px/frame for linear motion
    amp: np.ndarray     # sinusoidal amplitude
    omega: np.ndarray   # sinusoidal angular speed
    phase: np.ndarray
    lo: np.ndarray      # bounce box (y, x) lower corner
    hi: np.ndarray
    color: np.ndarray
    noise: np.ndarray   # coarse value-noise lattice


def _build_tracks(spec: SceneSpec):
    rng = Rng(spec.seed)
    h, w = spec.height, spec.width
    n = spec.num_objects
    radius = 0.14 * min(h, w)
    margin = radius + 2.0

    centers = []
    if spec.occlusion:
        # Everyone roams the full frame, launched toward the center so paths
        # are guaranteed to cross early.
        for i in range(n):
            ang = 2.0 * np.pi * i / n
            cy = h / 2 + (h / 2 - margin) * 0.8 * np.sin(ang)
            cx = w / 2 + (w / 2 - margin) * 0.8 * np.cos(ang)
            centers.append((cy, cx))
        los = [np.array([margin, margin])] * n
        his = [np.array([h - 1 - margin, w - 1 - margin])] * n
    else:
        # Horizontal strips keep paths disjoint.
        strip = w / n
        if strip < 2 * margin + 2:
            raise ValueError("objects too large to place disjointly")
        los, his = [], []
        for i in range(n):
            x0 = i * strip + margin
            x1 = (i + 1) * strip - margin
            centers.append((h / 2, (x0 + x1) / 2))
            los.append(np.array([margin, x0]))
            his.append(np.array([h - 1 - margin, x1]))

    for cy, cx in centers:
        if not (margin - 1 <= cy <= h - margin and margin - 1 <= cx <= w - margin):
            raise ValueError("objects too large to place disjointly")

    tracks = []
    for i in range(n):
        r = rng.split(100 + i)
        speed = 0.02 * min(h, w) * (0.6 + 0.8 * r.uniform())
        if spec.occlusion:
            cy, cx = centers[i]
            to_center = np.array([h / 2 - cy, w / 2 - cx])
            norm = np.linalg.norm(to_center)
            direction = to_center / norm if norm > 0 else np.array([0.0, 1.0])
        else:
            ang = r.uniform(0.0, 2.0 * np.pi)
            direction = np.array([np.sin(ang), np.cos(ang)])
        span = (his[i] - los[i]) / 2.0
        tracks.append(
            _ObjectTrack(
                shape=spec.shapes[i % len(spec.shapes)],
                radius=radius,
                p0=np.array(centers[i]),
                vel=direction * speed,
                amp=span * (0.5 + 0.4 * r.uniform(size=2)),
                omega=0.05 + 0.1 * r.uniform(size=2),
                phase=r.uniform(0.0, 2.0 * np.pi, size=2),
                lo=los[i],
                hi=his[i],
                color=_PALETTE[i + 1].copy(),
                noise=r.split(1).uniform(size=(12, 12)),
            )
        )
    bg_rng = rng.split(99)
    background = _ObjectTrack(
        shape="disk",
        radius=0.0,
        p0=np.zeros(2),
        vel=np.zeros(2),
        amp=np.zeros(2),
        omega=np.zeros(2),
        phase=np.zeros(2),
        lo=np.zeros(2),
        hi=np.zeros(2),
        color=_PALETTE[0].copy(),
        noise=bg_rng.split(1).uniform(size=(12, 12)),
    )
    return tracks, background


def _bounce(p0: float, v: float, t: float, lo: float, hi: float) -> float:
    """Closed-form reflected linear motion inside [lo, hi]."""
    span = hi - lo
    if span <= 0 or v == 0.0:
        return min(max(p0, lo), hi)
    x = (p0 - lo + v * t) % (2.0 * span)
    if x < 0:
        x += 2.0 * span
    return lo + (x if x <= span else 2.0 * span - x)


def object_center(spec: SceneSpec, track: _ObjectTrack, t: int) -> np.ndarray:
    """Center of an object at 1-based frame t (pure function of t)."""
    dt = float(t - 1)
    if spec.motion == "static":
        return track.p0.copy()
    if spec.motion == "linear":
        return np.array(
            [
                _bounce(track.p0[0], track.vel[0], dt, track.lo[0], track.hi[0]),
                _bounce(track.p0[1], track.vel[1], dt, track.lo[1], track.hi[1]),
            ]
        )
    mid = (track.lo + track.hi) / 2.0
    return mid + track.amp * np.sin(track.omega * dt + track.phase)


def object_bbox(spec: SceneSpec, track: _ObjectTrack, t: int):
    """Conservative bounding box (y0, x0, y1, x1) of an object at frame t."""
    cy, cx = object_center(spec, track, t)
    r = track.radius
    return (cy - r, cx - r, cy + r, cx + r)


def _shape_mask(shape: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "rectangle":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 1.1 * r)
    # Upward triangle: apex at cy - r, base at cy + 0.8 r.
    inside = dy <= 0.8 * r
    inside &= dy >= -r
    half = (dy + r) / 1.8 * 1.1
    return inside & (np.abs(dx) <= half)


def _value_noise(noise: np.ndarray, h: int, w: int, shift_y: float, shift_x: float) -> np.ndarray:
    """Bilinearly interpolated periodic lattice noise in [0, 1]."""
    n = noise.shape[0]
    ys = (np.arange(h) / h * n + shift_y) % n
    xs = (np.arange(w) / w * n + shift_x) % n
    y0 = ys.astype(np.int64) % n
    x0 = xs.astype(np.int64) % n
    fy = (ys - np.floor(ys))[:, None]
    fx = (xs - np.floor(xs))[None, :]
    y1 = (y0 + 1) % n
    x1 = (x0 + 1) % n
    top = noise[np.ix_(y0, x0)] * (1 - fx) + noise[np.ix_(y0, x1)] * fx
    bot = noise[np.ix_(y1, x0)] * (1 - fx) + noise[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _hue_rotation(theta: float) -> np.ndarray:
    """Rodrigues rotation about the gray axis (1,1,1)/sqrt(3)."""
    k = np.full(3, 1.0 / np.sqrt(3.0))
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def _surface(track: _ObjectTrack, spec: SceneSpec, t: int, h: int, w: int,
             obj_index: int) -> np.ndarray:
    """RGB texture of one region at frame t, with appearance drift.

    Drift must change appearance non-isometrically or matching would be
    unaffected (a global color rotation preserves every dot product): each
    object's hue rotates around the gray axis with alternating sign, its
    saturation oscillates toward gray and back, and the texture scrolls.
    The background stays put.
    """
    dt = float(t - 1)
    shift = spec.drift * dt * 4.0
    tex = _value_noise(track.noise, h, w, shift, shift * 0.7)
    gray = np.full(3, 0.5)
    chroma = track.color - gray
    if obj_index > 0 and spec.drift > 0.0:
        # Oscillating hue walk: appearance migrates through distinct modes
        # and revisits them, de-phased per object, with saturation dipping
        # at the extremes.  Rate scales with the drift parameter.
        phase = 2.0 * np.pi * spec.drift * dt / 0.35 + 2.1 * obj_index
        angle = 0.9 * np.sin(phase)
        sat = 1.0 - 0.3 * np.sin(phase) ** 2
        chroma = sat * (_hue_rotation(angle) @ chroma)
    color = np.clip(gray + chroma, 0.05, 0.95)
    rgb = color[None, None, :] * (0.9 + 0.2 * tex[:, :, None])
    return np.clip(rgb, 0.0, 1.0)


def render_frame(spec: SceneSpec, tracks, background, t: int):
    """Frame and exact label mask at 1-based index t."""
    h, w = spec.height, spec.width
    rgb = _surface(background, spec, t, h, w, 0)
    labels = np.zeros((h, w), dtype=np.uint8)
    for i, track in enumerate(tracks, start=1):
        cy, cx = object_center(spec, track, t)
        mask = _shape_mask(track.shape, cy, cx, track.radius, h, w)
        surf = _surface(track, spec, t, h, w, i)
        rgb[mask] = surf[mask]
        labels[mask] = i
    frame = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    return frame, labels


def iter_frames(spec: SceneSpec):
    """Yield (frame, labels) pairs for t = 1..T without storing the video."""
    tracks, background = _build_tracks(spec)
    for t in range(1, spec.frames + 1):
        yield render_frame(spec, tracks, background, t)


def generate(spec: SceneSpec) -> VideoSequence:
    frames, gt = [], []
    for frame, labels in iter_frames(spec):
        frames.append(frame)
        gt.append(labels)
    return VideoSequence(frames=frames, gt=gt, annotated=list(range(1, spec.frames + 1)))


def crossing_frames(spec: SceneSpec) -> list:
    """Frames at which at least two object bounding boxes overlap, from the
    generator's own closed-form geometry."""
    tracks, _ = _build_tracks(spec)
    hits = []
    for t in range(1, spec.frames + 1):
        boxes = [object_bbox(spec, tr, t) for tr in tracks]
        found = False
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                ya0, xa0, ya1, xa1 = boxes[a]
                yb0, xb0, yb1, xb1 = boxes[b]
                if ya0 <= yb1 and yb0 <= ya1 and xa0 <= xb1 and xb0 <= xa1:
                    found = True
        if found:
            hits.append(t)
    return hits


# -- PPM / PGM -----------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM writer expects (H, W, 3) uint8")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM writer expects (H, W) uint8")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        raw = fh.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated header at offset {pos}")
        c = raw[pos : pos + 1]
        if c == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    pos += 1  # single whitespace after maxval
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: non-numeric header fields {tokens[1:]}")
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, found {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    data = raw[pos : pos + need]
    if len(data) != need:
        raise DataError(
            f"{path}: truncated pixel data at offset {pos + len(data)} "
            f"(expected {need} bytes, found {len(data)})"
        )
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


# -- dataset I/O ----------------------------------------------------------------


def frame_name(t: int) -> str:
    return f"{t:06d}"


def save_dataset(video: VideoSequence, out_dir, spec: SceneSpec | None = None) -> None:
    _write_dataset(out_dir, zip(video.frames, video.gt), len(video.frames), video.annotated, spec)


def save_dataset_stream(spec: SceneSpec, out_dir) -> None:
    """Generate and write frame by frame; memory stays O(one frame)."""
    _write_dataset(out_dir, iter_frames(spec), spec.frames, list(range(1, spec.frames + 1)), spec)


def _write_dataset(out_dir, pairs, n_frames, annotated, spec):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    count = 0
    for t, (frame, labels) in enumerate(pairs, start=1):
        write_ppm(out / "frames" / f"{frame_name(t)}.ppm", frame)
        write_pgm(out / "masks" / f"{frame_name(t)}.pgm", labels)
        count += 1
    if count != n_frames:
        raise DataError(f"generator produced {count} frames, expected {n_frames}")
    meta = {
        "format_version": 1,
        "frames": n_frames,
        "annotated": list(annotated),
    }
    if spec is not None:
        meta["spec"] = {
            "width": spec.width,
            "height": spec.height,
            "num_objects": spec.num_objects,
            "frames": spec.frames,
            "seed": spec.seed,
            "motion": spec.motion,
            "drift": spec.drift,
            "occlusion": spec.occlusion,
            "shapes": list(spec.shapes),
        }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(data_dir) -> VideoSequence:
    root = Path(data_dir)
    meta_path = root / "meta.json"
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    frames_dir = root / "frames"
    masks_dir = root / "masks"
    if not frames_dir.is_dir() or not masks_dir.is_dir():
        raise DataError(f"{root}: missing frames/ or masks/ subdirectory")

    frame_files = sorted(frames_dir.glob("*.ppm"))
    mask_files = sorted(masks_dir.glob("*.pgm"))
    if not frame_files:
        raise DataError(f"{frames_dir}: no frames found")
    if len(frame_files) != len(mask_files):
        raise DataError(
            f"{root}: {len(frame_files)} frames but {len(mask_files)} masks"
        )
    names_f = [p.stem for p in frame_files]
    names_m = [p.stem for p in mask_files]
    if names_f != names_m:
        raise DataError(f"{root}: frame/mask file names do not pair up")

    frames = [read_ppm(p) for p in frame_files]
    gt = [read_pgm(p) for p in mask_files]
    annotated = list(range(1, len(frames) + 1))
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{meta_path}: invalid JSON ({exc})")
        if meta.get("frames") != len(frames):
            raise DataError(
                f"{meta_path}: meta says {meta.get('frames')} frames, directory has {len(frames)}"
            )
        annotated = list(meta.get("annotated", annotated))
    return VideoSequence(frames=frames, gt=gt, annotated=annotated)

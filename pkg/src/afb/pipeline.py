"""End-to-end per-video segmentation loop.

Frame 1 plus its annotation seeds one feature bank per object (background is
object 0 with a bank of its own).  Every later frame is segmented by
matching its query features against each bank, decoding per-object cosine
logits at the feature grid, upsampling to pixel resolution, estimating
per-pixel ambiguity, and refining the ambiguous band; the predicted masks
are then encoded object by object and absorbed back into the banks.

The encoder stand-in is deterministic: each cell of a strided patch lattice
gets a 16-number descriptor (mean RGB, RGB std, 8-bin gradient-orientation
histogram weighted by magnitude, normalized position) that two fixed random
projections map to key/value vectors.  Keys are rescaled to unit RMS so dot
products stay in a controlled range.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DataError, InvariantError
from .feature_bank import BankConfig, FeatureBank
from .matcher import QueryFeatures, match
from .numerics import Rng
from .refinement import RefineConfig, Scorer, refine
from .uncertainty import ScoreMaps, uncertainty_map

MEMORY_POLICIES = ("afb", "first", "latest", "first_latest", "first_latest5")

DESCRIPTOR_DIM = 16  # 3 mean RGB + 3 std + 8 orientation bins + 2 position


@dataclass(frozen=True)
class ExtractorConfig:
    stride: int = 4
    patch: int = 8
    d_r: int = 6
    d_k: int = 32
    d_v: int = 32
    proj_seed: int = 0
    coverage_min: float = 0.25

    def __post_init__(self):
        if self.stride < 1 or self.patch < 1:
            raise ValueError("stride and patch must be positive")
        if self.d_k < 1 or self.d_v < 1:
            raise ValueError("key/value dims must be positive")
        if not (0.0 < self.coverage_min <= 1.0):
            raise ValueError("coverage_min must be in (0, 1]")


# Calibrated on held-out synthetic scenes: the decode temperature keeps the
# ambiguity gate wide enough to cover the rim band the coarse grid leaves,
# the window radius reaches confident anchors past that band, and the affine
# scorer turns weak cosine margins into signed refinement votes.
DEFAULT_TAU_D = 3.0
DEFAULT_REFINE_RADIUS = 10
DEFAULT_SCORER = Scorer(kind="trainable-affine", w=4.0, b=-3.2)


def default_refine_config() -> RefineConfig:
    return RefineConfig(radius=DEFAULT_REFINE_RADIUS, scorer=DEFAULT_SCORER)


@dataclass(frozen=True)
class PipelineConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    refine: RefineConfig = field(default_factory=default_refine_config)
    epsilon_h: float = 0.95
    lambda_p: float = 0.9
    epsilon_l: float = 1e-4
    budget: int = 1024
    lambda_u: float = 0.5
    tau_d: float = DEFAULT_TAU_D
    memory_policy: str = "afb"
    absorb_interval: int = 1
    absorb_ground_truth: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.memory_policy not in MEMORY_POLICIES:
            raise ValueError(f"memory_policy must be one of {MEMORY_POLICIES}")
        if self.absorb_interval < 1:
            raise ValueError("absorb_interval must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def bank_config(self) -> BankConfig:
        return BankConfig(
            key_dim=self.extractor.d_k,
            value_dim=self.extractor.d_v,
            epsilon_h=self.epsilon_h,
            lambda_p=self.lambda_p,
            epsilon_l=self.epsilon_l,
            budget=self.budget,
        )


@dataclass
class FrameResult:
    frame: int
    masks: np.ndarray
    labels: np.ndarray
    mean_u: float
    max_u: float
    bank_sizes: list
    merges: int
    appends: int
    evictions: int
    runtime_ms: float


# -- deterministic descriptors -------------------------------------------------


@lru_cache(maxsize=16)
def _projections(seed: int, d_k: int, d_v: int):
    rng = Rng(seed)
    pk = rng.split(11).normal(size=(d_k, DESCRIPTOR_DIM)) / np.sqrt(DESCRIPTOR_DIM)
    pv = rng.split(12).normal(size=(d_v, DESCRIPTOR_DIM)) / np.sqrt(DESCRIPTOR_DIM)
    return pk, pv


def _patch_sums(channels: np.ndarray, patch: int, stride: int):
    """Sliding patch sums of (C, H, W) channels on the stride lattice."""
    c, h, w = channels.shape
    gh = (h - patch) // stride + 1
    gw = (w - patch) // stride + 1
    ii = np.zeros((c, h + 1, w + 1), dtype=np.float64)
    np.cumsum(channels, axis=1, out=ii[:, 1:, 1:])
    np.cumsum(ii[:, 1:, 1:], axis=2, out=ii[:, 1:, 1:])
    y0 = np.arange(gh) * stride
    x0 = np.arange(gw) * stride
    ya = y0[:, None]
    xa = x0[None, :]
    return (
        ii[:, ya + patch, xa + patch]
        - ii[:, ya + patch, xa]
        - ii[:, ya, xa + patch]
        + ii[:, ya, xa]
    )


def _image_planes(frame: np.ndarray):
    """Float image in [0,1], gradient magnitude, and 8 orientation planes."""
    img = frame.astype(np.float64) / 255.0
    lum = img.mean(axis=2)
    gy, gx = np.gradient(lum)
    mag = np.hypot(gy, gx)
    theta = np.arctan2(gy, gx)
    bins = np.clip(((theta + np.pi) / (np.pi / 4.0)).astype(np.int64), 0, 7)
    oriented = np.zeros((8,) + lum.shape, dtype=np.float64)
    for k in range(8):
        oriented[k] = np.where(bins == k, mag, 0.0)
    return img, mag, oriented


def _cell_positions(h: int, w: int, gh: int, gw: int, patch: int, stride: int):
    cy = np.arange(gh) * stride + (patch - 1) / 2.0
    cx = np.arange(gw) * stride + (patch - 1) / 2.0
    py = cy / (h - 1) if h > 1 else np.zeros(gh)
    px = cx / (w - 1) if w > 1 else np.zeros(gw)
    return np.broadcast_to(py[:, None], (gh, gw)), np.broadcast_to(px[None, :], (gh, gw))


def _descriptors_from_sums(sums: np.ndarray, weight: np.ndarray, pos_y, pos_x):
    """Assemble (gh, gw, 16) descriptors from weighted channel sums.

    ``sums`` rows: 3 RGB, 3 RGB^2, 8 oriented magnitudes; ``weight`` is the
    per-cell total weight (pixel count or mask coverage mass).
    """
    safe_w = np.maximum(weight, 1e-12)
    mean = sums[0:3] / safe_w
    var = np.maximum(sums[3:6] / safe_w - mean * mean, 0.0)
    std = np.sqrt(var)
    # Mean edge energy per orientation (not normalized to sum 1): flat
    # regions then read as flat instead of as amplified noise directions.
    hist = sums[6:14] / safe_w * 2.0
    # Channels are centered/scaled so descriptor cosines spread over the
    # whole range instead of crowding near 1 (shared positive offsets would
    # make every pair of cells look mergeable).
    desc = np.concatenate(
        [mean - 0.45, std * 2.0, hist, pos_y[None] - 0.5, pos_x[None] - 0.5], axis=0
    )
    return np.moveaxis(desc, 0, 2)


def _project(desc_flat: np.ndarray, cfg: ExtractorConfig):
    pk, pv = _projections(cfg.proj_seed, cfg.d_k, cfg.d_v)
    keys = desc_flat @ pk.T
    rms = np.sqrt(np.mean(keys * keys, axis=1, keepdims=True))
    keys = keys / np.maximum(rms, 1e-12)
    values = desc_flat @ pv.T
    return keys.astype(np.float32), values.astype(np.float32)


def extract_query(frame: np.ndarray, cfg: ExtractorConfig):
    """Key/value grids on the stride lattice plus per-pixel features.

    Pixel features are [RGB - 0.5, gradient magnitude, centered position * 0.5]
    so cosine comparisons between them are signed, not crowded near 1.
    """
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("frame must be (H, W, 3)")
    h, w = frame.shape[:2]
    if h < cfg.patch or w < cfg.patch:
        raise ValueError("frame smaller than one patch")

    img, mag, oriented = _image_planes(frame)
    channels = np.concatenate([np.moveaxis(img, 2, 0), np.moveaxis(img * img, 2, 0), oriented])
    sums = _patch_sums(channels, cfg.patch, cfg.stride)
    gh, gw = sums.shape[1:]
    pos_y, pos_x = _cell_positions(h, w, gh, gw, cfg.patch, cfg.stride)
    desc = _descriptors_from_sums(sums, np.full((gh, gw), float(cfg.patch * cfg.patch)), pos_y, pos_x)
    keys, values = _project(desc.reshape(-1, DESCRIPTOR_DIM), cfg)

    yy = (np.arange(h) / (h - 1) if h > 1 else np.zeros(h))[:, None]
    xx = (np.arange(w) / (w - 1) if w > 1 else np.zeros(w))[None, :]
    pix = np.empty((h, w, 6), dtype=np.float32)
    pix[:, :, 0:3] = img - 0.5
    pix[:, :, 3] = mag
    pix[:, :, 4] = np.broadcast_to((yy - 0.5) * 0.5, (h, w))
    pix[:, :, 5] = np.broadcast_to((xx - 0.5) * 0.5, (h, w))

    query = QueryFeatures(
        keys=keys.reshape(gh, gw, cfg.d_k),
        values=values.reshape(gh, gw, cfg.d_v),
    )
    return query, pix


def extract_reference(frame: np.ndarray, mask: np.ndarray, cfg: ExtractorConfig):
    """Key/value features of cells sufficiently covered by ``mask``.

    Descriptors are computed over the object's own pixels only, so boundary
    cells carry pure object appearance.  Returns (keys, values) arrays,
    possibly empty when the object is absent.
    """
    if mask.shape != frame.shape[:2]:
        raise ValueError("mask shape must match the frame")
    h, w = frame.shape[:2]
    if h < cfg.patch or w < cfg.patch:
        raise ValueError("frame smaller than one patch")

    m = mask.astype(np.float64)
    img, _, oriented = _image_planes(frame)
    channels = np.concatenate([np.moveaxis(img, 2, 0), np.moveaxis(img * img, 2, 0), oriented])
    sums = _patch_sums(channels * m[None], cfg.patch, cfg.stride)
    wsum = _patch_sums(m[None], cfg.patch, cfg.stride)[0]
    gh, gw = wsum.shape
    coverage = wsum / float(cfg.patch * cfg.patch)
    keep = coverage >= cfg.coverage_min
    if not keep.any():
        return (
            np.empty((0, cfg.d_k), dtype=np.float32),
            np.empty((0, cfg.d_v), dtype=np.float32),
        )
    pos_y, pos_x = _cell_positions(h, w, gh, gw, cfg.patch, cfg.stride)
    desc = _descriptors_from_sums(sums, wsum, pos_y, pos_x)
    keys, values = _project(desc[keep].reshape(-1, DESCRIPTOR_DIM), cfg)
    return keys, values


# -- decoding -------------------------------------------------------------------


@lru_cache(maxsize=8)
def _resample_plan(gh: int, gw: int, h: int, w: int, stride: int, patch: int):
    """Pixel -> grid interpolation indices anchored at patch centers."""
    c0 = (patch - 1) / 2.0
    gy = np.clip((np.arange(h) - c0) / stride, 0.0, gh - 1.0)
    gx = np.clip((np.arange(w) - c0) / stride, 0.0, gw - 1.0)
    y0 = np.minimum(gy.astype(np.int64), gh - 1)
    x0 = np.minimum(gx.astype(np.int64), gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    return y0, y1, fy, x0, x1, fx


def _grid_to_pixels(grid_map: np.ndarray, h: int, w: int, stride: int, patch: int) -> np.ndarray:
    gh, gw = grid_map.shape
    y0, y1, fy, x0, x1, fx = _resample_plan(gh, gw, h, w, stride, patch)
    top = grid_map[np.ix_(y0, x0)] * (1 - fx) + grid_map[np.ix_(y0, x1)] * fx
    bot = grid_map[np.ix_(y1, x0)] * (1 - fx) + grid_map[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def decode(match_results, query: QueryFeatures, cfg, out_hw) -> ScoreMaps:
    """Cosine logits per object at grid resolution, upsampled and softmaxed.

    ``match_results`` is ordered background-first; ``cfg`` needs ``tau_d``
    plus the extractor geometry; ``out_hw`` is the pixel resolution.
    """
    if len(match_results) < 2:
        raise ValueError("decode needs background plus at least one object")
    h, w = out_hw
    vq = query.values.astype(np.float64)
    qnorm = np.linalg.norm(vq, axis=2)
    ext = cfg.extractor
    logits = np.empty((len(match_results), h, w), dtype=np.float64)
    for i, mr in enumerate(match_results):
        vr = mr.retrieved.astype(np.float64)
        dots = np.einsum("hwc,hwc->hw", vq, vr)
        denom = qnorm * np.linalg.norm(vr, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            cos = dots / denom
        cos[~np.isfinite(cos)] = 0.0
        logits[i] = _grid_to_pixels(cfg.tau_d * cos, h, w, ext.stride, ext.patch)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    masks = e / e.sum(axis=0, keepdims=True)
    return ScoreMaps(masks=masks.astype(np.float32), logits=logits.astype(np.float32))


# -- memory policies -------------------------------------------------------------


@dataclass
class _Store:
    """Plain matchable key/value store used by the fixed policies."""

    keys: np.ndarray
    values: np.ndarray

    @property
    def size(self) -> int:
        return self.keys.shape[0]


def pool_features(keys: np.ndarray, values: np.ndarray, max_n: int):
    """Reduce a feature batch to at most ``max_n`` entries by averaging
    contiguous chunks (keys re-scaled to unit RMS afterwards)."""
    n = keys.shape[0]
    if n <= max_n:
        return keys, values
    splits = np.array_split(np.arange(n), max_n)
    pk = np.stack([keys[s].astype(np.float64).mean(axis=0) for s in splits])
    pv = np.stack([values[s].astype(np.float64).mean(axis=0) for s in splits])
    rms = np.sqrt(np.mean(pk * pk, axis=1, keepdims=True))
    pk = pk / np.maximum(rms, 1e-12)
    return pk.astype(np.float32), pv.astype(np.float32)


class MemoryPolicy:
    """Per-video feature memory shared across the L+1 object stores."""

    name = "base"

    def init_object(self, i, keys, values, frame):
        raise NotImplementedError

    def update_object(self, i, keys, values, frame):
        raise NotImplementedError

    def record_usage(self, i, counts):
        pass

    def store(self, i):
        raise NotImplementedError

    def sizes(self):
        raise NotImplementedError

    def totals(self):
        return {"merges": 0, "appends": 0, "evictions": 0}


class AdaptiveBankPolicy(MemoryPolicy):
    """The adaptive feature bank: merge-or-append with LFU eviction."""

    name = "afb"

    def __init__(self, bank_config: BankConfig):
        self.bank_config = bank_config
        self.banks = {}

    def init_object(self, i, keys, values, frame):
        keys, values = pool_features(keys, values, self.bank_config.budget)
        self.banks[i] = FeatureBank(self.bank_config, (keys, values), frame)

    def update_object(self, i, keys, values, frame):
        keys, values = pool_features(keys, values, self.bank_config.budget)
        self.banks[i].absorb((keys, values), frame)

    def record_usage(self, i, counts):
        self.banks[i].record_usage(counts)

    def store(self, i):
        return self.banks[i]

    def sizes(self):
        return [self.banks[i].size for i in sorted(self.banks)]

    def totals(self):
        return {
            "merges": sum(b.stats.merges for b in self.banks.values()),
            "appends": sum(b.stats.appends for b in self.banks.values()),
            "evictions": sum(b.stats.evictions for b in self.banks.values()),
        }


class FixedWindowPolicy(MemoryPolicy):
    """STM-style baselines: keep the first frame's features, the latest
    frame's, both, or first plus a window of the latest ``window`` frames."""

    def __init__(self, keep_first: bool, window: int, name: str):
        self.keep_first = keep_first
        self.window = window
        self.name = name
        self._first = {}
        self._recent = {}
        self._appends = 0

    def init_object(self, i, keys, values, frame):
        self._first[i] = (keys, values)
        self._recent[i] = []
        if not self.keep_first and self.window > 0:
            self._recent[i] = [(keys, values)]
        self._appends += keys.shape[0]

    def update_object(self, i, keys, values, frame):
        if self.window == 0 or keys.shape[0] == 0:
            return  # first-only policy, or the object vanished: keep history
        self._recent[i].append((keys, values))
        if len(self._recent[i]) > self.window:
            self._recent[i].pop(0)
        self._appends += keys.shape[0]

    def store(self, i):
        parts = []
        if self.keep_first:
            parts.append(self._first[i])
        parts.extend(self._recent[i])
        keys = np.concatenate([p[0] for p in parts])
        values = np.concatenate([p[1] for p in parts])
        return _Store(keys=keys, values=values)

    def sizes(self):
        return [self.store(i).size for i in sorted(self._first)]

    def totals(self):
        return {"merges": 0, "appends": self._appends, "evictions": 0}


def make_policy(name: str, bank_config: BankConfig) -> MemoryPolicy:
    if name == "afb":
        return AdaptiveBankPolicy(bank_config)
    if name == "first":
        return FixedWindowPolicy(keep_first=True, window=0, name=name)
    if name == "latest":
        return FixedWindowPolicy(keep_first=False, window=1, name=name)
    if name == "first_latest":
        return FixedWindowPolicy(keep_first=True, window=1, name=name)
    if name == "first_latest5":
        return FixedWindowPolicy(keep_first=True, window=5, name=name)
    raise ValueError(f"unknown memory policy {name!r}")


# -- the per-video loop -----------------------------------------------------------


def segment_video(video, cfg: PipelineConfig, policy: MemoryPolicy | None = None, progress=None):
    """Segment frames 2..T given the frame-1 annotation.

    Returns one :class:`FrameResult` per segmented frame; pass ``progress``
    to receive each result as soon as the frame completes (streaming stats).
    """
    frames = video.frames
    if not frames:
        raise DataError("video has no frames")
    if not video.gt or video.gt[0] is None:
        raise DataError("frame-1 annotation missing")
    gt1 = np.asarray(video.gt[0])
    if gt1.shape != frames[0].shape[:2]:
        raise DataError("annotation shape does not match the frames")

    n_objects = int(gt1.max())
    if n_objects < 1:
        raise DataError("first frame must annotate at least one object")
    present = set(np.unique(gt1).tolist())
    if present != set(range(n_objects + 1)):
        raise DataError(f"first-frame labels must cover 0..{n_objects}, found {sorted(present)}")

    ext = cfg.extractor
    if policy is None:
        policy = make_policy(cfg.memory_policy, cfg.bank_config())

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    run_objects = (lambda fn, n: list(pool.map(fn, range(n)))) if pool else (
        lambda fn, n: [fn(i) for i in range(n)]
    )
    try:
        def init_one(i):
            return extract_reference(frames[0], gt1 == i, ext)

        first_feats = run_objects(init_one, n_objects + 1)
        for i, (keys, values) in enumerate(first_feats):
            if keys.shape[0] == 0:
                raise DataError(f"object {i} yields no first-frame features (too small?)")
            policy.init_object(i, keys, values, frame=1)

        results = []
        h, w = frames[0].shape[:2]
        budget_cap = (n_objects + 1) * cfg.budget
        for t in range(2, len(frames) + 1):
            tic = time.perf_counter()
            frame = frames[t - 1]
            query, pix = extract_query(frame, ext)

            def match_one(i):
                return match(query, policy.store(i), cfg.epsilon_l)

            match_results = run_objects(match_one, n_objects + 1)
            for i, mr in enumerate(match_results):
                policy.record_usage(i, mr.usage_counts)

            maps = decode(match_results, query, cfg, (h, w))
            u = uncertainty_map(maps)
            result = refine(maps, u, pix, cfg.refine)

            before = policy.totals()
            if t % cfg.absorb_interval == 0:
                if cfg.absorb_ground_truth:
                    label_src = np.asarray(video.gt[t - 1])
                else:
                    # Ambiguous pixels are not safe memory: a mislabeled rim
                    # cell absorbed into the wrong bank seeds a feedback
                    # spiral, so anything above the refinement gate is
                    # excluded from reference encoding.
                    label_src = result.labels.copy()
                    label_src[u.u > cfg.refine.u_threshold] = 255

                def ref_one(i):
                    return extract_reference(frame, label_src == i, ext)

                ref_feats = run_objects(ref_one, n_objects + 1)
                for i, (keys, values) in enumerate(ref_feats):
                    policy.update_object(i, keys, values, frame=t)
            after = policy.totals()

            sizes = policy.sizes()
            if isinstance(policy, AdaptiveBankPolicy) and sum(sizes) > budget_cap:
                raise InvariantError(f"stored features {sum(sizes)} exceed cap {budget_cap}")

            fr = FrameResult(
                frame=t,
                masks=result.masks,
                labels=result.labels,
                mean_u=float(u.u.mean()),
                max_u=float(u.u.max()),
                bank_sizes=sizes,
                merges=after["merges"] - before["merges"],
                appends=after["appends"] - before["appends"],
                evictions=after["evictions"] - before["evictions"],
                runtime_ms=(time.perf_counter() - tic) * 1000.0,
            )
            results.append(fr)
            if progress is not None:
                progress(fr)
        return results
    finally:
        if pool is not None:
            pool.shutdown()

"""Deterministic synthetic scenes: box worlds rendered to frame streams.

Depth comes from exact ray/AABB intersection, patch embeddings from per-patch
majority class, segments from per-instance visibility masks. A NoiseModel
injects the failure modes the fusion machinery targets: segmentation
granularity changes (split/merge), patch/instance boundary misalignment
(bleed), and encoder noise. Everything is a pure function of the seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import CameraIntrinsics, Pose, VoxelKey
from .frames import FrameRecord, SegmentProposal
from .formats import (
    StreamHeader,
    write_frame,
    write_gt_volume,
    write_prompts,
    write_stream_header,
)
from .query_eval import GroundTruthVolume, PromptSet

DEFAULT_MAX_RANGE = 10.0     # m; depth beyond this is reported invalid
MIN_SEGMENT_PIXELS = 12      # instances smaller than this emit no mask
MIN_CROP_PX = 24             # crop encoders see at least this box side, so small
                             # masks produce context-dominated embeddings


@dataclass(frozen=True)
class SceneBox:
    lo: np.ndarray       # (3,) m
    hi: np.ndarray       # (3,) m
    class_id: int
    instance_id: int

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if np.any(self.hi <= self.lo):
            raise ValueError("degenerate box")


@dataclass
class SynthScene:
    boxes: List[SceneBox]
    class_names: List[str]
    background_classes: frozenset
    class_embeddings: np.ndarray   # (C, d) float32, pairwise |cos| <= 0.1

    def __post_init__(self):
        if len(self.class_names) != len(self.class_embeddings):
            raise ValueError("one embedding per class required")

    def is_background(self, class_id: int) -> bool:
        return self.class_names[class_id] in self.background_classes

    def bounds(self, margin: float = 2.0) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.min([b.lo for b in self.boxes], axis=0) - margin
        hi = np.max([b.hi for b in self.boxes], axis=0) + margin
        return lo, hi

    def prompt_set(self) -> PromptSet:
        return PromptSet(
            labels=list(self.class_names),
            embeddings=self.class_embeddings.copy(),
            background_labels=frozenset(self.background_classes),
        )


@dataclass(frozen=True)
class NoiseModel:
    patch_bleed: float = 0.0          # P(multi-class patch emits a mixed embedding)
    embed_noise_sigma: float = 0.0    # per-coordinate Gaussian sigma
    seg_split_prob: float = 0.0       # P(visible instance splits into 2 masks)
    seg_merge_prob: float = 0.0       # P(instance merges with its nearest neighbor)
    crop_context_bleed: float = 0.0   # neighbor-class mixing in crop embeddings

    def __post_init__(self):
        for name in ("patch_bleed", "seg_split_prob", "seg_merge_prob", "crop_context_bleed"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.embed_noise_sigma < 0:
            raise ValueError("embed_noise_sigma must be >= 0")

    @classmethod
    def profile(cls, name: str) -> "NoiseModel":
        profiles = {
            "noiseless": cls(),
            "default": cls(
                patch_bleed=0.3,
                embed_noise_sigma=0.2,
                seg_split_prob=0.3,
                seg_merge_prob=0.1,
                crop_context_bleed=0.2,
            ),
            "split-heavy": cls(
                patch_bleed=0.3,
                embed_noise_sigma=0.2,
                seg_split_prob=0.7,
                seg_merge_prob=0.05,
                crop_context_bleed=0.2,
            ),
        }
        if name not in profiles:
            raise ValueError(f"unknown noise profile {name!r}; choose from {sorted(profiles)}")
        return profiles[name]


def make_class_embeddings(
    n_classes: int, dim: int, seed: int, max_abs_cos: float = 0.1
) -> np.ndarray:
    """Seeded random unit vectors, rejection-sampled to pairwise |cos| <= 0.1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    vecs: List[np.ndarray] = []
    while len(vecs) < n_classes:
        batch = rng.normal(size=(256, dim))
        batch /= np.linalg.norm(batch, axis=1, keepdims=True)
        for cand in batch:
            if all(abs(float(cand @ v)) <= max_abs_cos for v in vecs):
                vecs.append(cand)
                if len(vecs) == n_classes:
                    break
    return np.stack(vecs).astype(np.float32)


def default_intrinsics(width: int = 80, height: int = 64) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=0.875 * width, fy=0.875 * width, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from eye toward target (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    if abs(float(forward @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return Pose(rotation, eye)


def orbit_trajectory(
    center=(0.0, 0.0, 0.25),
    radius: float = 1.8,
    height: float = 1.4,
    n_frames: int = 30,
    revolutions: float = 1.0,
) -> List[Pose]:
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n_frames):
        a = 2.0 * math.pi * revolutions * i / n_frames
        eye = np.array([
            center[0] + radius * math.cos(a),
            center[1] + radius * math.sin(a),
            height,
        ])
        poses.append(look_at(eye, center))
    return poses


def orbit_scene(
    n_objects: int = 5,
    seed: int = 0,
    dim: int = 64,
    n_object_classes: Optional[int] = None,
    n_frames: int = 30,
) -> Tuple[SynthScene, List[Pose]]:
    """Desk-scale scene: a floor patch with objects on a ring, orbited once."""
    if n_objects < 1:
        raise ValueError("need at least one object")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B17]))
    n_obj_classes = n_object_classes or min(n_objects, 6)
    class_names = ["floor"] + [f"object_{chr(ord('a') + i)}" for i in range(n_obj_classes)]
    boxes = [SceneBox(
        lo=np.array([-2.5, -2.5, -0.1]), hi=np.array([2.5, 2.5, 0.0]),
        class_id=0, instance_id=0,
    )]
    ring_radius = 0.75
    for i in range(n_objects):
        a = 2.0 * math.pi * i / n_objects + rng.uniform(-0.1, 0.1)
        cx = ring_radius * math.cos(a)
        cy = ring_radius * math.sin(a)
        # Alternate small and large objects; small ones get unreliable crops.
        if i % 2 == 0:
            half = rng.uniform(0.08, 0.11)
            h = rng.uniform(0.16, 0.24)
        else:
            half = rng.uniform(0.17, 0.24)
            h = rng.uniform(0.32, 0.48)
        boxes.append(SceneBox(
            lo=np.array([cx - half, cy - half, 0.0]),
            hi=np.array([cx + half, cy + half, h]),
            class_id=1 + i % n_obj_classes,
            instance_id=i + 1,
        ))
    scene = SynthScene(
        boxes=boxes,
        class_names=class_names,
        background_classes=frozenset({"floor"}),
        class_embeddings=make_class_embeddings(len(class_names), dim, seed),
    )
    return scene, orbit_trajectory(n_frames=n_frames)


def corridor_scene(
    length: float,
    objects_per_meter: float = 0.8,
    seed: int = 0,
    dim: int = 64,
    n_object_classes: int = 5,
    step: float = 0.18,
) -> Tuple[SynthScene, List[Pose]]:
    """Corridor with objects along it and a straight sweep trajectory."""
    if length <= 0:
        raise ValueError("corridor length must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
    class_names = ["floor", "wall"] + [
        f"object_{chr(ord('a') + i)}" for i in range(n_object_classes)
    ]
    boxes = [
        SceneBox(np.array([-0.7, -1.6, -0.1]), np.array([length + 0.7, 1.6, 0.0]),
                 class_id=0, instance_id=0),
        SceneBox(np.array([-0.7, -1.7, 0.0]), np.array([length + 0.7, -1.5, 2.2]),
                 class_id=1, instance_id=1),
        SceneBox(np.array([-0.7, 1.5, 0.0]), np.array([length + 0.7, 1.7, 2.2]),
                 class_id=1, instance_id=2),
        SceneBox(np.array([-0.7, -1.7, 0.0]), np.array([-0.5, 1.7, 2.2]),
                 class_id=1, instance_id=3),
        SceneBox(np.array([length + 0.5, -1.7, 0.0]), np.array([length + 0.7, 1.7, 2.2]),
                 class_id=1, instance_id=4),
    ]
    n_objects = max(1, int(round(length * objects_per_meter)))
    spacing = length / n_objects
    for i in range(n_objects):
        x = (i + 0.5) * spacing + rng.uniform(-0.1, 0.1) * spacing
        y = 0.8 if i % 2 == 0 else -0.8
        if i % 2 == 0:
            half = rng.uniform(0.09, 0.13)
            h = rng.uniform(0.18, 0.28)
        else:
            half = rng.uniform(0.17, 0.25)
            h = rng.uniform(0.32, 0.5)
        boxes.append(SceneBox(
            lo=np.array([x - half, y - half, 0.0]),
            hi=np.array([x + half, y + half, h]),
            class_id=2 + i % n_object_classes,
            instance_id=5 + i,
        ))
    scene = SynthScene(
        boxes=boxes,
        class_names=class_names,
        background_classes=frozenset({"floor", "wall"}),
        class_embeddings=make_class_embeddings(len(class_names), dim, seed),
    )
    # Overshoot the far end so the corridor tail is observed as completely as
    # the middle; the unpainted ramp ahead of the start is then the only edge
    # effect and stays constant across lengths.
    poses = []
    x = 0.5
    while x < length + 1.2:
        poses.append(look_at((x, 0.0, 1.2), (x + 1.8, 0.0, 0.3)))
        x += step
    return scene, poses


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_frame(
    scene: SynthScene,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    max_range: float = DEFAULT_MAX_RANGE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact ray/AABB depth and per-pixel box index (-1 where nothing is hit).

    Depth is the camera-frame z of the nearest hit, which for unnormalized
    pinhole rays equals the ray parameter directly.
    """
    h, w = intrinsics.height, intrinsics.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack(
        [
            (us.reshape(-1) - intrinsics.cx) / intrinsics.fx,
            (vs.reshape(-1) - intrinsics.cy) / intrinsics.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    best_t = np.full(h * w, np.inf)
    best_box = np.full(h * w, -1, dtype=np.int32)
    with np.errstate(divide="ignore", invalid="ignore"):
        for bi, box in enumerate(scene.boxes):
            t_lo = (box.lo - origin) / dirs
            t_hi = (box.hi - origin) / dirs
            t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
            t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
            hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < best_t)
            best_t[hit] = t_near[hit]
            best_box[hit] = bi

    beyond = best_t > max_range
    best_t[beyond] = np.inf
    best_box[beyond] = -1
    depth = np.where(np.isfinite(best_t), best_t, 0.0).astype(np.float32)
    return depth.reshape(h, w), best_box.reshape(h, w)


def _unproject_all(depth: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """Full-resolution pinhole unprojection of every valid pixel (float64)."""
    valid = depth > 0
    vs, us = np.nonzero(valid)
    z = depth[vs, us].astype(np.float64)
    x = (us - intrinsics.cx) * z / intrinsics.fx
    y = (vs - intrinsics.cy) * z / intrinsics.fy
    world = np.stack([x, y, z], axis=1) @ pose.rotation.T + pose.translation
    return world, vs, us


# ---------------------------------------------------------------------------
# Stream generation
# ---------------------------------------------------------------------------

def generate_stream(
    scene: SynthScene,
    trajectory: Sequence[Pose],
    intrinsics: CameraIntrinsics,
    noise: NoiseModel,
    seed: int,
    stream_fp: BinaryIO,
    patch_size: int = 4,
    voxel_size: float = 0.05,
    max_range: float = DEFAULT_MAX_RANGE,
    emit_patch_weights: bool = False,
    crop_padding_frac: float = 0.05,
    min_crop_px: int = MIN_CROP_PX,
) -> Tuple[GroundTruthVolume, PromptSet]:
    """Render the trajectory into a frame stream; return gt volume and prompts.

    The gt volume voxelizes the box surfaces actually observed along the
    trajectory (full-resolution projection of every valid pixel, majority
    class per voxel with object classes taking precedence over background).
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    lo, hi = scene.bounds()
    for pose in trajectory:
        t = pose.translation
        if np.any(t < lo) or np.any(t > hi):
            raise ValueError(f"trajectory position {t} outside scene bounds")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57E9]))
    d = scene.class_embeddings.shape[1]
    header = StreamHeader(
        embedding_dim=d,
        height=intrinsics.height,
        width=intrinsics.width,
        patch_size=patch_size,
        intrinsics=intrinsics,
        has_patch_weights=emit_patch_weights,
    )
    write_stream_header(stream_fp, header)

    box_class = np.array([b.class_id for b in scene.boxes], dtype=np.int32)
    box_instance = np.array([b.instance_id for b in scene.boxes], dtype=np.int32)
    box_is_bg = np.array([scene.is_background(b.class_id) for b in scene.boxes])
    n_classes = len(scene.class_names)

    gt_counts: Dict[VoxelKey, np.ndarray] = {}
    for frame_index, pose in enumerate(trajectory):
        depth, box_idx = render_frame(scene, pose, intrinsics, max_range)
        patch_grid, patch_weights = _make_patch_grid(
            depth, box_idx, box_class, scene.class_embeddings, patch_size, noise, rng
        )
        segments = _make_segments(
            depth, box_idx, box_class, box_instance, box_is_bg,
            scene.class_embeddings, noise, rng,
            crop_padding_frac=crop_padding_frac, min_crop_px=min_crop_px,
        )
        frame = FrameRecord(
            frame_index=frame_index,
            pose=pose,
            depth=depth,
            patch_grid=patch_grid,
            patch_size=patch_size,
            patch_weights=patch_weights if emit_patch_weights else None,
            segments=segments,
        )
        write_frame(stream_fp, header, frame)
        _accumulate_gt(gt_counts, depth, box_idx, box_class, intrinsics, pose,
                       voxel_size, n_classes)

    n_bg = np.array(
        [scene.is_background(c) for c in range(n_classes)], dtype=bool
    )
    gt: GroundTruthVolume = {}
    for key, counts in gt_counts.items():
        fg = counts.copy()
        fg[n_bg] = 0
        gt[key] = int(np.argmax(fg)) if fg.sum() > 0 else int(np.argmax(counts))
    return gt, scene.prompt_set()


def _make_patch_grid(depth, box_idx, box_class, class_embeddings, patch_size, noise, rng):
    h, w = depth.shape
    hp = -(-h // patch_size)
    wp = -(-w // patch_size)
    d = class_embeddings.shape[1]
    n_classes = len(class_embeddings)
    grid = np.zeros((hp, wp, d), dtype=np.float32)
    weights = np.zeros((hp, wp), dtype=np.float32)
    pixel_class = np.where(box_idx >= 0, box_class[box_idx], -1)
    for pi in range(hp):
        for pj in range(wp):
            block = pixel_class[
                pi * patch_size : (pi + 1) * patch_size,
                pj * patch_size : (pj + 1) * patch_size,
            ]
            hits = block[block >= 0]
            weights[pi, pj] = len(hits) / block.size
            if len(hits) == 0:
                continue
            counts = np.bincount(hits, minlength=n_classes)
            present = np.nonzero(counts)[0]
            if (
                len(present) >= 2
                and noise.patch_bleed > 0
                and rng.random() < noise.patch_bleed
            ):
                emb = (counts[present, None] * class_embeddings[present]).sum(0)
                emb = emb / counts[present].sum()
            else:
                emb = class_embeddings[int(np.argmax(counts))].copy()
            if noise.embed_noise_sigma > 0:
                emb = emb + rng.normal(0.0, noise.embed_noise_sigma, d)
            grid[pi, pj] = emb.astype(np.float32)
    return grid, weights


def _make_segments(depth, box_idx, box_class, box_instance, box_is_bg,
                   class_embeddings, noise, rng,
                   crop_padding_frac: float = 0.05,
                   min_crop_px: int = MIN_CROP_PX) -> List[SegmentProposal]:
    pixel_instance = np.where(
        (box_idx >= 0) & ~box_is_bg[np.clip(box_idx, 0, None)], box_instance[box_idx], -1
    )
    pixel_class = np.where(box_idx >= 0, box_class[box_idx], -1)
    inst_ids = [int(i) for i in np.unique(pixel_instance) if i >= 0]
    masks = {i: pixel_instance == i for i in inst_ids}
    visible = [i for i in inst_ids if masks[i].sum() >= MIN_SEGMENT_PIXELS]
    if not visible:
        return []
    centroids = {}
    for i in visible:
        vs, us = np.nonzero(masks[i])
        centroids[i] = (float(vs.mean()), float(us.mean()))

    # Merge pass: each instance may fold into its nearest visible neighbor.
    groups: List[List[int]] = []
    consumed = set()
    for i in visible:
        if i in consumed:
            continue
        partners = [j for j in visible if j != i and j not in consumed]
        if partners and noise.seg_merge_prob > 0 and rng.random() < noise.seg_merge_prob:
            j = min(
                partners,
                key=lambda p: (
                    (centroids[i][0] - centroids[p][0]) ** 2
                    + (centroids[i][1] - centroids[p][1]) ** 2,
                    p,
                ),
            )
            consumed.update((i, j))
            groups.append([i, j])
        else:
            consumed.add(i)
            groups.append([i])

    segments: List[SegmentProposal] = []
    for group in groups:
        mask = np.zeros_like(masks[group[0]])
        for i in group:
            mask |= masks[i]
        sub_masks = [mask]
        if len(group) == 1 and noise.seg_split_prob > 0 and rng.random() < noise.seg_split_prob:
            split = _split_mask(mask, rng)
            if split is not None:
                sub_masks = split
        for m in sub_masks:
            emb = _crop_embedding(
                m, pixel_class, class_embeddings, noise.crop_context_bleed,
                crop_padding_frac, min_crop_px,
            )
            if noise.embed_noise_sigma > 0:
                emb = emb + rng.normal(0.0, noise.embed_noise_sigma, len(emb))
            segments.append(SegmentProposal.from_mask(m, emb.astype(np.float32)))
    return segments


def _crop_embedding(mask, pixel_class, class_embeddings, context_bleed,
                    padding_frac, min_crop_px: int = MIN_CROP_PX) -> np.ndarray:
    """Embedding an image-level encoder would produce for the padded crop.

    The crop's mask pixels contribute their class at full weight; the other
    pixels inside the padded bounding box leak in at weight context_bleed.
    The box is grown to the encoder's minimum input size, so crops of small
    masks are dominated by their surroundings. With zero bleed this is
    exactly the (single) mask class embedding.
    """
    vs, us = np.nonzero(mask)
    h, w = mask.shape
    span_v = vs.max() - vs.min() + 1
    span_u = us.max() - us.min() + 1
    pad_v = max(int(math.ceil(span_v * padding_frac)), (min_crop_px - span_v + 1) // 2)
    pad_u = max(int(math.ceil(span_u * padding_frac)), (min_crop_px - span_u + 1) // 2)
    lo_v = max(0, vs.min() - pad_v)
    hi_v = min(h, vs.max() + 1 + pad_v)
    lo_u = max(0, us.min() - pad_u)
    hi_u = min(w, us.max() + 1 + pad_u)
    crop_cls = pixel_class[lo_v:hi_v, lo_u:hi_u]
    crop_mask = mask[lo_v:hi_v, lo_u:hi_u]
    n_classes = len(class_embeddings)
    own = np.bincount(crop_cls[crop_mask & (crop_cls >= 0)], minlength=n_classes)
    ctx = np.bincount(crop_cls[~crop_mask & (crop_cls >= 0)], minlength=n_classes)
    weights = own.astype(np.float64) + context_bleed * ctx.astype(np.float64)
    total = weights.sum()
    if total <= 0:
        return class_embeddings[int(np.argmax(own))].astype(np.float64)
    return (weights[:, None] * class_embeddings.astype(np.float64)).sum(0) / total


def _split_mask(mask: np.ndarray, rng) -> Optional[List[np.ndarray]]:
    """Divide a mask in two by a random image-space chord.

    The line passes through a random mask pixel at a random angle, so cuts
    range from balanced halves to thin slivers (mimicking part-level
    over-segmentation).
    """
    vs, us = np.nonzero(mask)
    for _ in range(10):
        anchor = rng.integers(len(vs))
        a = rng.uniform(0.0, 2.0 * math.pi)
        side = (vs - vs[anchor]) * math.cos(a) + (us - us[anchor]) * math.sin(a) >= 0.0
        if 0 < side.sum() < len(side):
            m1 = np.zeros_like(mask)
            m2 = np.zeros_like(mask)
            m1[vs[side], us[side]] = True
            m2[vs[~side], us[~side]] = True
            return [m1, m2]
    return None


def _accumulate_gt(gt_counts, depth, box_idx, box_class, intrinsics, pose,
                   voxel_size, n_classes):
    world, vs, us = _unproject_all(depth, intrinsics, pose)
    if len(world) == 0:
        return
    classes = box_class[box_idx[vs, us]]
    keys = np.floor(world / voxel_size).astype(np.int64)
    rows = np.concatenate([keys, classes[:, None]], axis=1)
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    for row, c in zip(uniq, counts):
        key = (int(row[0]), int(row[1]), int(row[2]))
        acc = gt_counts.get(key)
        if acc is None:
            acc = np.zeros(n_classes, dtype=np.int64)
            gt_counts[key] = acc
        acc[int(row[3])] += int(c)


def write_scene_outputs(
    scene: SynthScene,
    trajectory: Sequence[Pose],
    intrinsics: CameraIntrinsics,
    noise: NoiseModel,
    seed: int,
    stream_path,
    gt_path=None,
    prompts_path=None,
    **kwargs,
) -> Tuple[GroundTruthVolume, PromptSet]:
    """generate_stream + sidecar gt/prompt files."""
    voxel_size = kwargs.get("voxel_size", 0.05)
    with open(stream_path, "wb") as fp:
        gt, prompts = generate_stream(
            scene, trajectory, intrinsics, noise, seed, fp, **kwargs
        )
    if gt_path is not None:
        with open(gt_path, "wb") as fp:
            write_gt_volume(fp, gt, voxel_size)
    if prompts_path is not None:
        with open(prompts_path, "wb") as fp:
            write_prompts(fp, prompts)
    return gt, prompts

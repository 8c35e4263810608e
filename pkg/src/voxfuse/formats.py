"""Binary file formats: frame stream, prompt sets, gt volumes, map snapshots.

Everything is little-endian with an 8-byte magic per format. Snapshots
round-trip bit-exactly: sections are written in canonical (sorted) order and
floats are stored at their in-memory width (f32 embeddings, f64 weights).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .core import CameraIntrinsics, ConfigError, MapConfig, Pose, StreamFormatError, VoxelKey
from .dense_layer import DenseLayer, DenseVoxel
from .frames import FrameRecord, SegmentProposal
from .fusion import FusedDenseVoxel
from .instance_layer import Hypothesis, InstanceLayer, InstanceRecord
from .query_eval import GroundTruthVolume, PromptSet

STREAM_MAGIC = b"FUS3DSTR"
PROMPT_MAGIC = b"FUS3DPRM"
GT_MAGIC = b"FUS3DGT "
SNAPSHOT_MAGIC = b"FUS3DSNP"
STREAM_VERSION = 1
SNAPSHOT_VERSION = 1
FLAG_PATCH_WEIGHTS = 1 << 0


class _Reader:
    """Tracks the byte offset so parse errors can point at the failure."""

    def __init__(self, fp: BinaryIO):
        self.fp = fp
        self.offset = 0

    def read(self, n: int) -> bytes:
        data = self.fp.read(n)
        if len(data) != n:
            raise StreamFormatError(
                f"unexpected end of data (wanted {n} bytes, got {len(data)})",
                self.offset,
            )
        self.offset += n
        return data

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        raw = self.read(int(np.dtype(dtype).itemsize) * count)
        return np.frombuffer(raw, dtype=dtype).copy()

    def peek_end(self) -> bool:
        b = self.fp.read(1)
        if not b:
            return True
        self.fp = _Prepend(b, self.fp)
        return False


class _Prepend:
    def __init__(self, head: bytes, fp: BinaryIO):
        self.head = head
        self.fp = fp

    def read(self, n: int) -> bytes:
        if self.head:
            take, self.head = self.head[:n], self.head[n:]
            return take + self.fp.read(n - len(take))
        return self.fp.read(n)


def _pack(fp: BinaryIO, fmt: str, *values) -> None:
    fp.write(struct.pack("<" + fmt, *values))


# ---------------------------------------------------------------------------
# Frame stream
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamHeader:
    embedding_dim: int
    height: int
    width: int
    patch_size: int
    intrinsics: CameraIntrinsics
    has_patch_weights: bool
    version: int = STREAM_VERSION

    @property
    def patch_grid_shape(self) -> Tuple[int, int]:
        return (-(-self.height // self.patch_size), -(-self.width // self.patch_size))


def write_stream_header(fp: BinaryIO, header: StreamHeader) -> None:
    fp.write(STREAM_MAGIC)
    flags = FLAG_PATCH_WEIGHTS if header.has_patch_weights else 0
    _pack(
        fp,
        "IIIII",
        header.version,
        header.embedding_dim,
        header.height,
        header.width,
        header.patch_size,
    )
    k = header.intrinsics
    _pack(fp, "ffff", k.fx, k.fy, k.cx, k.cy)
    _pack(fp, "I", flags)


def write_frame(fp: BinaryIO, header: StreamHeader, frame: FrameRecord) -> None:
    _pack(fp, "Q", frame.frame_index)
    pose34 = np.hstack([frame.pose.rotation, frame.pose.translation[:, None]])
    fp.write(pose34.astype("<f8").tobytes())
    fp.write(frame.depth.astype("<f4").tobytes())
    fp.write(frame.patch_grid.astype("<f4").tobytes())
    if header.has_patch_weights:
        if frame.patch_weights is None:
            raise ValueError("stream declares patch weights but frame has none")
        fp.write(frame.patch_weights.astype("<f4").tobytes())
    _pack(fp, "I", len(frame.segments))
    for seg in frame.segments:
        runs = rle_encode(seg.mask)
        _pack(fp, "I", len(runs))
        fp.write(runs.astype("<u4").tobytes())
        fp.write(seg.crop_embedding.astype("<f4").tobytes())


def read_stream_header(reader: _Reader) -> StreamHeader:
    magic = reader.read(8)
    if magic != STREAM_MAGIC:
        raise StreamFormatError(f"bad stream magic {magic!r}", 0)
    version, d, h, w, patch_size = reader.unpack("IIIII")
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version}", 8)
    fx, fy, cx, cy = reader.unpack("ffff")
    (flags,) = reader.unpack("I")
    return StreamHeader(
        embedding_dim=d,
        height=h,
        width=w,
        patch_size=patch_size,
        intrinsics=CameraIntrinsics(fx, fy, cx, cy, width=w, height=h),
        has_patch_weights=bool(flags & FLAG_PATCH_WEIGHTS),
        version=version,
    )


def read_frames(reader: _Reader, header: StreamHeader) -> Iterator[FrameRecord]:
    h, w, d = header.height, header.width, header.embedding_dim
    hp, wp = header.patch_grid_shape
    while not reader.peek_end():
        (frame_index,) = reader.unpack("Q")
        pose34 = reader.array("<f8", 12).reshape(3, 4)
        try:
            pose = Pose(pose34[:, :3], pose34[:, 3])
        except ValueError as e:
            raise StreamFormatError(f"invalid pose: {e}", reader.offset) from e
        depth = reader.array("<f4", h * w).reshape(h, w)
        patch_grid = reader.array("<f4", hp * wp * d).reshape(hp, wp, d)
        weights = None
        if header.has_patch_weights:
            weights = reader.array("<f4", hp * wp).reshape(hp, wp)
        (n_segments,) = reader.unpack("I")
        segments: List[SegmentProposal] = []
        for _ in range(n_segments):
            (n_runs,) = reader.unpack("I")
            runs = reader.array("<u4", n_runs)
            mask = rle_decode(runs, h, w, offset=reader.offset)
            crop = reader.array("<f4", d)
            segments.append(SegmentProposal.from_mask(mask, crop))
        yield FrameRecord(
            frame_index=int(frame_index),
            pose=pose,
            depth=depth,
            patch_grid=patch_grid,
            patch_size=header.patch_size,
            patch_weights=weights,
            segments=segments,
        )


def open_stream(fp: BinaryIO) -> Tuple[StreamHeader, Iterator[FrameRecord]]:
    reader = _Reader(fp)
    header = read_stream_header(reader)
    return header, read_frames(reader, header)


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Row-major alternating run lengths, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if len(flat) == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, height: int, width: int, offset: Optional[int] = None) -> np.ndarray:
    total = int(np.sum(runs, dtype=np.int64))
    if total != height * width:
        raise StreamFormatError(
            f"RLE runs cover {total} pixels, expected {height * width}", offset
        )
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        run = int(run)
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# Prompt sets
# ---------------------------------------------------------------------------

def write_prompts(fp: BinaryIO, prompts: PromptSet) -> None:
    fp.write(PROMPT_MAGIC)
    _pack(fp, "II", prompts.dim, len(prompts.labels))
    for name, emb in zip(prompts.labels, prompts.embeddings):
        raw = name.encode("utf-8")
        _pack(fp, "I", len(raw))
        fp.write(raw)
        _pack(fp, "B", 1 if name in prompts.background_labels else 0)
        fp.write(np.asarray(emb, dtype="<f4").tobytes())


def read_prompts(fp: BinaryIO) -> PromptSet:
    reader = _Reader(fp)
    magic = reader.read(8)
    if magic != PROMPT_MAGIC:
        raise StreamFormatError(f"bad prompt magic {magic!r}", 0)
    d, count = reader.unpack("II")
    labels, embs, background = [], [], set()
    for _ in range(count):
        (n,) = reader.unpack("I")
        name = reader.read(n).decode("utf-8")
        (bg,) = reader.unpack("B")
        emb = reader.array("<f4", d)
        labels.append(name)
        embs.append(emb)
        if bg:
            background.add(name)
    embeddings = np.stack(embs) if embs else np.zeros((0, d), dtype=np.float32)
    return PromptSet(labels, embeddings, frozenset(background))


# ---------------------------------------------------------------------------
# Ground-truth volumes (also used for predicted-class exports)
# ---------------------------------------------------------------------------

def write_gt_volume(fp: BinaryIO, volume: GroundTruthVolume, voxel_size: float) -> None:
    fp.write(GT_MAGIC)
    _pack(fp, "fQ", voxel_size, len(volume))
    for key in sorted(volume):
        _pack(fp, "iiiH", key[0], key[1], key[2], volume[key])


def read_gt_volume(fp: BinaryIO) -> Tuple[GroundTruthVolume, float]:
    reader = _Reader(fp)
    magic = reader.read(8)
    if magic != GT_MAGIC:
        raise StreamFormatError(f"bad gt magic {magic!r}", 0)
    voxel_size, count = reader.unpack("fQ")
    volume: GroundTruthVolume = {}
    for _ in range(count):
        ix, iy, iz, cls = reader.unpack("iiiH")
        volume[(ix, iy, iz)] = cls
    return volume, float(voxel_size)


# ---------------------------------------------------------------------------
# Map snapshots
# ---------------------------------------------------------------------------

@dataclass
class MapSnapshot:
    config: MapConfig
    embedding_dim: int
    dense: DenseLayer
    instance: InstanceLayer
    fused_dense: Optional[Dict[VoxelKey, FusedDenseVoxel]] = None


def write_snapshot(fp: BinaryIO, snap: MapSnapshot) -> None:
    fp.write(SNAPSHOT_MAGIC)
    _pack(fp, "I", SNAPSHOT_VERSION)
    cfg = snap.config.to_text().encode("utf-8")
    _pack(fp, "I", len(cfg))
    fp.write(cfg)
    _pack(fp, "I", snap.embedding_dim)

    dense = snap.dense
    _pack(fp, "Q", len(dense.voxels))
    for key in sorted(dense.voxels):
        vox = dense.voxels[key]
        _pack(fp, "qqqd", key[0], key[1], key[2], vox.weight)
        fp.write(vox.embedding.astype("<f4").tobytes())

    inst = snap.instance
    _pack(fp, "Q", len(inst.voxels))
    for key in sorted(inst.voxels):
        hyps = inst.voxels[key]
        _pack(fp, "qqqB", key[0], key[1], key[2], len(hyps))
        for h in hyps:
            _pack(fp, "Qd", h.instance_id, h.count)

    _pack(fp, "Q", inst.next_instance_id)
    _pack(fp, "Q", len(inst.instances))
    for iid in sorted(inst.instances):
        rec = inst.instances[iid]
        _pack(fp, "Qd", iid, rec.weight)
        fp.write(rec.embedding.astype("<f4").tobytes())
        if rec.fused_embedding is None:
            _pack(fp, "B", 0)
        else:
            _pack(fp, "B", 1)
            fp.write(rec.fused_embedding.astype("<f4").tobytes())
        _pack(fp, "d", rec.evidence_score)

    if snap.fused_dense is None:
        _pack(fp, "B", 0)
    else:
        _pack(fp, "B", 1)
        _pack(fp, "Q", len(snap.fused_dense))
        for key in sorted(snap.fused_dense):
            _pack(fp, "qqq", key[0], key[1], key[2])
            fp.write(snap.fused_dense[key].embedding.astype("<f4").tobytes())


def read_snapshot(fp: BinaryIO) -> MapSnapshot:
    reader = _Reader(fp)
    magic = reader.read(8)
    if magic != SNAPSHOT_MAGIC:
        raise StreamFormatError(f"bad snapshot magic {magic!r}", 0)
    (version,) = reader.unpack("I")
    if version != SNAPSHOT_VERSION:
        raise StreamFormatError(f"unsupported snapshot version {version}", 8)
    (cfg_len,) = reader.unpack("I")
    try:
        config = MapConfig.from_text(reader.read(cfg_len).decode("utf-8"))
    except ConfigError as e:
        raise StreamFormatError(f"bad embedded config: {e}", reader.offset) from e
    (d,) = reader.unpack("I")

    dense = DenseLayer(voxel_size=config.voxel_size)
    (n_dense,) = reader.unpack("Q")
    for _ in range(n_dense):
        ix, iy, iz, weight = reader.unpack("qqqd")
        emb = reader.array("<f4", d)
        dense.voxels[(ix, iy, iz)] = DenseVoxel(embedding=emb, weight=weight)

    inst = InstanceLayer(voxel_size=config.voxel_size, max_hypotheses=config.max_hypotheses)
    (n_ivox,) = reader.unpack("Q")
    for _ in range(n_ivox):
        ix, iy, iz, n_hyp = reader.unpack("qqqB")
        hyps = []
        for _ in range(n_hyp):
            iid, count = reader.unpack("Qd")
            hyps.append(Hypothesis(int(iid), float(count)))
        inst.voxels[(ix, iy, iz)] = hyps

    (inst.next_instance_id,) = reader.unpack("Q")
    (n_inst,) = reader.unpack("Q")
    for _ in range(n_inst):
        iid, weight = reader.unpack("Qd")
        emb = reader.array("<f4", d)
        (has_fused,) = reader.unpack("B")
        fused = reader.array("<f4", d) if has_fused else None
        (evidence,) = reader.unpack("d")
        inst.instances[int(iid)] = InstanceRecord(
            instance_id=int(iid),
            embedding=emb,
            weight=float(weight),
            fused_embedding=fused,
            evidence_score=float(evidence),
        )
    for key, hyps in inst.voxels.items():
        for h in hyps:
            inst.instances[h.instance_id].voxel_set.add(key)

    (has_fused_dense,) = reader.unpack("B")
    fused_dense = None
    if has_fused_dense:
        fused_dense = {}
        (n_fused,) = reader.unpack("Q")
        for _ in range(n_fused):
            ix, iy, iz = reader.unpack("qqq")
            emb = reader.array("<f4", d)
            fused_dense[(ix, iy, iz)] = FusedDenseVoxel((ix, iy, iz), emb)

    return MapSnapshot(
        config=config, embedding_dim=d, dense=dense, instance=inst, fused_dense=fused_dense
    )

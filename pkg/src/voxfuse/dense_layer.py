"""Dense semantic layer: per-voxel running-mean patch embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .core import VoxelKey, points_to_voxels


@dataclass
class DenseVoxel:
    """Aggregated patch evidence for one grid cell.

    embedding is the weighted running mean of every contributing patch
    embedding; weight is the accumulated point count (or saliency mass).
    """

    embedding: np.ndarray  # (d,) float32
    weight: float          # float64 accumulator


class DenseUpdateSummary(NamedTuple):
    voxels_touched: int
    points_integrated: int


@dataclass
class DenseLayer:
    voxel_size: float
    voxels: Dict[VoxelKey, DenseVoxel] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.voxels)

    def integrate(
        self,
        points: np.ndarray,       # (N, 3) world
        embeddings: np.ndarray,   # (N, d) float32, one per point
        weights: Optional[np.ndarray] = None,  # (N,) > 0; None = unit counts
        observation_log: Optional[List] = None,
    ) -> DenseUpdateSummary:
        """Fold one frame's projected points into the running means.

        Per touched voxel with incoming weighted sum S and weight n:
        weight += n and embedding <- (w_old * f_old + S) / (w_old + n).
        Embedding arithmetic stays in float32; weights accumulate in float64.
        """
        points = np.asarray(points, dtype=np.float64)
        n_points = len(points)
        if n_points == 0:
            return DenseUpdateSummary(0, 0)
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.shape[0] != n_points:
            raise ValueError("points/embeddings length mismatch")
        if not np.all(np.isfinite(emb)):
            raise ValueError("non-finite embedding in dense update; frame rejected")
        if weights is None:
            weights = np.ones(n_points, dtype=np.float64)
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if np.any(weights <= 0):
                raise ValueError("dense update weights must be positive")

        keys = points_to_voxels(points, self.voxel_size)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        n_voxels = len(uniq)
        sums = np.zeros((n_voxels, emb.shape[1]), dtype=np.float32)
        np.add.at(sums, inverse, emb * weights[:, None].astype(np.float32))
        mass = np.zeros(n_voxels, dtype=np.float64)
        np.add.at(mass, inverse, weights)

        for i in range(n_voxels):
            key = (int(uniq[i, 0]), int(uniq[i, 1]), int(uniq[i, 2]))
            vox = self.voxels.get(key)
            n_i = float(mass[i])
            if vox is None:
                self.voxels[key] = DenseVoxel(
                    embedding=sums[i] / np.float32(n_i), weight=n_i
                )
            else:
                w_new = vox.weight + n_i
                vox.embedding = (
                    np.float32(vox.weight) * vox.embedding + sums[i]
                ) / np.float32(w_new)
                vox.weight = w_new

        if observation_log is not None:
            for j in range(n_points):
                key = (int(keys[j, 0]), int(keys[j, 1]), int(keys[j, 2]))
                observation_log.append((key, emb[j].copy(), float(weights[j])))
        return DenseUpdateSummary(n_voxels, n_points)

    def embedding_at(self, key: VoxelKey) -> Optional[Tuple[np.ndarray, float]]:
        vox = self.voxels.get(key)
        if vox is None:
            return None
        return vox.embedding, vox.weight

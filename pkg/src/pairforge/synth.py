"""Deterministic synthetic scenes for desk-scale verification.

Cameras sit on a lattice with axis-aligned square ground footprints;
3D points are scattered uniformly and a point's track is exactly the set
of cameras whose footprint contains it. Pairwise overlap counts are
therefore known in closed form and returned alongside the artifacts, so
every downstream computation can be checked against the generator.

Feature maps sample a per-scene smooth latent field, which makes
descriptor similarity increase with geometric overlap and leaves head
training something real to improve.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .annotate import CovisibilityTable
from .recon import (DescriptorSet, FeatureMap, ImageRecord, MatchSet, Point3D,
                    Reconstruction)
from .retrieval import DEFAULT_INLIER_THRESHOLD, canonical_name_pair

INLIER_RATE = 0.8
INLIER_JITTER = 0.1


@dataclass(frozen=True)
class SynthConfig:
    scenes: int = 3
    grid: tuple[int, int] = (4, 4)
    overlap_fraction: float = 0.4
    points_per_cell: int = 40
    descriptor_dim: int = 16
    noise_sigma: float = 0.05
    rng_seed: int = 0
    image_size: tuple[int, int] = (640, 480)
    map_size: tuple[int, int] = (4, 4)
    # latent-field scales: scene identity offset, positional response, and
    # per-image distractor noise on the non-signal dimensions
    scene_offset_scale: float = 1.0
    field_scale: float = 1.5
    distractor_scale: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must be in (0, 1), "
                             f"got {self.overlap_fraction}")
        for name in ("scenes", "points_per_cell", "descriptor_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grid[0] <= 0 or self.grid[1] <= 0:
            raise ValueError(f"grid must be positive, got {self.grid}")


@dataclass
class SynthResult:
    recon: Reconstruction
    matches: MatchSet
    feature_maps: dict  # image name -> FeatureMap
    ground_truth: set   # canonical name pairs with inliers > threshold
    overlap_table: CovisibilityTable  # exact common-point counts


def generate(cfg):
    rng = np.random.Generator(np.random.Philox(key=cfg.rng_seed))
    recon = Reconstruction()
    matches = MatchSet()
    feature_maps = {}
    overlap_table = CovisibilityTable()

    rows, cols = cfg.grid
    side = 1.0
    step = side * (1.0 - cfg.overlap_fraction)
    width_px, height_px = cfg.image_size
    signal_dims = max(2, cfg.descriptor_dim // 2)

    next_image = 0
    next_point = 0
    for scene in range(cfg.scenes):
        recon.scenes[scene] = f"scene{scene:02d}"
        centers = [(c * step, r * step) for r in range(rows) for c in range(cols)]
        image_ids = []
        for idx, (cx, cy) in enumerate(centers):
            r, c = divmod(idx, cols)
            recon.images[next_image] = ImageRecord(
                id=next_image, scene=scene, name=f"s{scene:02d}_r{r}_c{c}",
                width_px=width_px, height_px=height_px)
            image_ids.append(next_image)
            next_image += 1

        lo = np.array([min(cx for cx, _ in centers) - side / 2,
                       min(cy for _, cy in centers) - side / 2])
        hi = np.array([max(cx for cx, _ in centers) + side / 2,
                       max(cy for _, cy in centers) + side / 2])
        n_points = rows * cols * cfg.points_per_cell
        positions = rng.uniform(lo, hi, size=(n_points, 2))
        heights = rng.uniform(0.0, 0.1, size=n_points)

        inside = np.zeros((len(centers), n_points), dtype=bool)
        for cam, (cx, cy) in enumerate(centers):
            inside[cam] = ((np.abs(positions[:, 0] - cx) <= side / 2)
                           & (np.abs(positions[:, 1] - cy) <= side / 2))

        kp_counters = {i: 0 for i in image_ids}
        point_ids = np.full(n_points, -1, dtype=np.int64)
        for p in range(n_points):
            cams = np.flatnonzero(inside[:, p])
            if len(cams) < 2:
                continue
            track = []
            for cam in cams:
                image_id = image_ids[cam]
                track.append((image_id, kp_counters[image_id]))
                kp_counters[image_id] += 1
            recon.points[next_point] = Point3D(
                id=next_point,
                position=(float(positions[p, 0]), float(positions[p, 1]),
                          float(heights[p])),
                track=tuple(track))
            point_ids[p] = next_point
            next_point += 1

        for a, b in combinations(range(len(centers)), 2):
            common = np.flatnonzero(inside[a] & inside[b])
            gs = len(common)
            if gs == 0:
                continue
            pair = (image_ids[a], image_ids[b])
            overlap_table[pair] = gs
            jitter = 1.0 + INLIER_JITTER * rng.uniform(-1.0, 1.0)
            n_inlier = max(0, int(round(gs * INLIER_RATE * jitter)))
            if n_inlier < 1:
                continue
            picked = rng.choice(common, size=n_inlier, replace=False)
            corr = np.empty((n_inlier, 4))
            corr[:, 0:2] = _project(positions[picked], centers[a], side,
                                    width_px, height_px)
            corr[:, 2:4] = _project(positions[picked], centers[b], side,
                                    width_px, height_px)
            matches.add(pair[0], pair[1], corr)

        _scene_feature_maps(rng, cfg, recon, image_ids, centers, side, lo, hi,
                            signal_dims, feature_maps)

    ground_truth = {
        canonical_name_pair(recon.images[i].name, recon.images[j].name)
        for (i, j), pm in matches.items() if pm.n_inlier > DEFAULT_INLIER_THRESHOLD}
    return SynthResult(recon=recon.validate(), matches=matches,
                       feature_maps=feature_maps, ground_truth=ground_truth,
                       overlap_table=overlap_table)


def _project(points, center, side, width_px, height_px):
    """World positions inside a footprint to pixel coordinates."""
    cx, cy = center
    px = (points[:, 0] - (cx - side / 2)) / side * width_px
    py = (points[:, 1] - (cy - side / 2)) / side * height_px
    return np.stack([px, py], axis=1)


def _scene_feature_maps(rng, cfg, recon, image_ids, centers, side, lo, hi,
                        signal_dims, feature_maps):
    """Latent field: scene offset + linear position response on the signal
    dimensions, high-variance distractor noise on the rest."""
    d = cfg.descriptor_dim
    h, w = cfg.map_size
    offset = np.zeros(d)
    offset[:signal_dims] = rng.normal(0.0, cfg.scene_offset_scale, size=signal_dims)
    response = np.zeros((d, 2))
    response[:signal_dims] = rng.normal(0.0, cfg.field_scale, size=(signal_dims, 2))
    span = np.maximum(hi - lo, 1e-9)

    for image_id, (cx, cy) in zip(image_ids, centers):
        gx = (np.arange(w) + 0.5) / w * side + (cx - side / 2)
        gy = (np.arange(h) + 0.5) / h * side + (cy - side / 2)
        cell_y, cell_x = np.meshgrid(gy, gx, indexing="ij")
        pos = np.stack([(cell_x - lo[0]) / span[0],
                        (cell_y - lo[1]) / span[1]], axis=-1)  # (H, W, 2)
        values = offset[:, None, None] + np.einsum("dk,hwk->dhw", response, pos)
        if signal_dims < d:
            # image-level confounder, constant across the map so pooling
            # cannot average it away
            values[signal_dims:] += rng.normal(
                0.0, cfg.distractor_scale, size=(d - signal_dims,))[:, None, None]
        values = values + rng.normal(0.0, cfg.noise_sigma, size=(d, h, w))
        feature_maps[recon.images[image_id].name] = FeatureMap(values=values)


def base_descriptors(feature_maps):
    """Spatially averaged map per image: the raw per-image vector a
    projection head trains on."""
    names = sorted(feature_maps)
    vectors = np.stack([feature_maps[n].values.mean(axis=(1, 2)) for n in names])
    return DescriptorSet(names=names, vectors=vectors)

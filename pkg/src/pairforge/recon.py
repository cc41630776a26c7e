"""Domain types for sparse reconstructions plus parsers/writers for the
four on-disk formats: reconstruction text, matches text, feature-map
binary (FMAP) and descriptor binary (DVEC).

All numeric payloads are float32 on disk and float64 in memory. Image
pairs are canonicalized as (min_id, max_id) everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FMAP_MAGIC = b"FMAP"
DVEC_MAGIC = b"DVEC"
FORMAT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file. Carries the 1-based line (and column when
    meaningful) of the first violation."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column


def canonical_pair(a, b):
    """Unordered pair key: (min, max)."""
    if a == b:
        raise ValueError(f"self-pair ({a}, {a}) is not a valid image pair")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    scene: int
    name: str
    width_px: int
    height_px: int

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError(f"image {self.id}: non-positive dimensions "
                             f"{self.width_px}x{self.height_px}")

    @property
    def area(self):
        """Planar image area in pixel^2."""
        return float(self.width_px) * float(self.height_px)


@dataclass(frozen=True)
class Point3D:
    id: int
    position: tuple[float, float, float]
    track: tuple[tuple[int, int], ...]  # (image_id, keypoint_index)

    def __post_init__(self):
        if len(self.track) < 2:
            raise ValueError(f"point {self.id}: track length {len(self.track)} < 2")
        image_ids = [i for i, _ in self.track]
        if len(set(image_ids)) != len(image_ids):
            raise ValueError(f"point {self.id}: repeated image in track")


@dataclass
class Reconstruction:
    """A set of registered images and reconstructed 3D points.

    Immutable by convention after construction; safe to share read-only.
    """

    scenes: dict[int, str] = field(default_factory=dict)
    images: dict[int, ImageRecord] = field(default_factory=dict)
    points: dict[int, Point3D] = field(default_factory=dict)

    def validate(self):
        names = set()
        for img in self.images.values():
            if img.scene not in self.scenes:
                raise ValueError(f"image {img.id} references unknown scene {img.scene}")
            if img.name in names:
                raise ValueError(f"duplicate image name {img.name!r}")
            names.add(img.name)
        for pt in self.points.values():
            for image_id, _ in pt.track:
                if image_id not in self.images:
                    raise ValueError(f"point {pt.id} track references unknown image {image_id}")
        return self

    def image_by_name(self, name):
        for img in self.images.values():
            if img.name == name:
                return img
        raise KeyError(name)


@dataclass(frozen=True)
class PairMatches:
    """Verified correspondences for one canonical image pair."""

    n_inlier: int
    correspondences: np.ndarray  # (n_inlier, 4) float64: xi, yi, xj, yj

    def __post_init__(self):
        if self.correspondences.shape != (self.n_inlier, 4):
            raise ValueError(f"correspondence count {self.correspondences.shape[0]} "
                             f"!= declared inliers {self.n_inlier}")


class MatchSet(dict):
    """Mapping canonical (id_i, id_j) -> PairMatches."""

    def add(self, id_i, id_j, correspondences):
        key = canonical_pair(id_i, id_j)
        corr = np.asarray(correspondences, dtype=np.float64).reshape(-1, 4)
        if key in self:
            raise ValueError(f"duplicate pair {key}")
        if id_i > id_j:
            corr = corr[:, [2, 3, 0, 1]]
        self[key] = PairMatches(n_inlier=corr.shape[0], correspondences=corr)


@dataclass(frozen=True)
class FeatureMap:
    """Dense activation grid of shape (D, H, W), channel-major."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be 3-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")

    @property
    def dims(self):
        return self.values.shape


@dataclass
class DescriptorSet:
    """Ordered global descriptors keyed by image name."""

    names: list[str]
    vectors: np.ndarray  # (count, dim) float64

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            self.vectors = self.vectors.reshape(len(self.names), -1)
        if self.vectors.shape[0] != len(self.names):
            raise ValueError(f"{len(self.names)} names but {self.vectors.shape[0]} vectors")
        if self.vectors.size and not np.all(np.isfinite(self.vectors)):
            raise ValueError("descriptor set contains non-finite values")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def vector(self, name):
        return self.vectors[self.names.index(name)]


# ---------------------------------------------------------------------------
# reconstruction text format


def parse_reconstruction(text):
    """Parse the line-oriented reconstruction format.

    Lines: ``SCENE <id> <name>``, ``IMAGE <id> <scene> <name> <w> <h>``,
    ``POINT3D <id> <x> <y> <z> TRACK <image>:<kp> ...``. '#' starts a
    comment. Raises ParseError with the first offending line.
    """
    recon = Reconstruction()
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind = fields[0]
        try:
            if kind == "SCENE":
                if len(fields) != 3:
                    raise ParseError(f"SCENE expects 2 fields, got {len(fields) - 1}", lineno)
                scene_id = _parse_id(fields[1], lineno, "scene id")
                if scene_id in recon.scenes:
                    raise ParseError(f"duplicate scene id {scene_id}", lineno)
                recon.scenes[scene_id] = fields[2]
            elif kind == "IMAGE":
                if len(fields) != 6:
                    raise ParseError(f"IMAGE expects 5 fields, got {len(fields) - 1}", lineno)
                image_id = _parse_id(fields[1], lineno, "image id")
                scene_id = _parse_id(fields[2], lineno, "scene id")
                if image_id in recon.images:
                    raise ParseError(f"duplicate image id {image_id}", lineno)
                if scene_id not in recon.scenes:
                    raise ParseError(f"image {image_id} references unknown scene {scene_id}",
                                     lineno)
                if fields[3] in names:
                    raise ParseError(f"duplicate image name {fields[3]!r}", lineno)
                names.add(fields[3])
                recon.images[image_id] = ImageRecord(
                    id=image_id, scene=scene_id, name=fields[3],
                    width_px=int(fields[4]), height_px=int(fields[5]))
            elif kind == "POINT3D":
                _parse_point_line(fields, lineno, recon)
            else:
                raise ParseError(f"unknown record {kind!r}", lineno, column=1)
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
    return recon


def _parse_id(token, lineno, what):
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"invalid {what} {token!r}", lineno) from None
    if value < 0:
        raise ParseError(f"negative {what} {value}", lineno)
    return value


def _parse_point_line(fields, lineno, recon):
    if len(fields) < 5 or "TRACK" not in fields:
        raise ParseError("POINT3D expects <id> <x> <y> <z> TRACK ...", lineno)
    tpos = fields.index("TRACK")
    if tpos != 5:
        raise ParseError("POINT3D expects exactly 4 fields before TRACK", lineno)
    point_id = _parse_id(fields[1], lineno, "point id")
    if point_id in recon.points:
        raise ParseError(f"duplicate point id {point_id}", lineno)
    position = tuple(float(v) for v in fields[2:5])
    track = []
    for obs in fields[tpos + 1:]:
        img_token, _, kp_token = obs.partition(":")
        if not kp_token:
            raise ParseError(f"track entry {obs!r} is not <image_id>:<kp_idx>", lineno)
        image_id = _parse_id(img_token, lineno, "image id")
        if image_id not in recon.images:
            raise ParseError(f"track of point {point_id} references unknown image {image_id}",
                             lineno)
        track.append((image_id, int(kp_token)))
    recon.points[point_id] = Point3D(id=point_id, position=position, track=tuple(track))


def write_reconstruction(recon):
    """Serialize to the reconstruction text format, deterministically."""
    lines = [f"# reconstruction: {len(recon.images)} images, {len(recon.points)} points"]
    for scene_id in sorted(recon.scenes):
        lines.append(f"SCENE {scene_id} {recon.scenes[scene_id]}")
    for image_id in sorted(recon.images):
        img = recon.images[image_id]
        lines.append(f"IMAGE {img.id} {img.scene} {img.name} {img.width_px} {img.height_px}")
    for point_id in sorted(recon.points):
        pt = recon.points[point_id]
        track = " ".join(f"{i}:{k}" for i, k in pt.track)
        x, y, z = (repr(v) for v in pt.position)
        lines.append(f"POINT3D {pt.id} {x} {y} {z} TRACK {track}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# matches text format


def parse_matches(text):
    matches = MatchSet()
    lines = text.splitlines()
    lineno = 0
    while lineno < len(lines):
        line = lines[lineno].split("#", 1)[0].strip()
        lineno += 1
        if not line:
            continue
        fields = line.split()
        if fields[0] != "PAIR" or len(fields) != 4:
            raise ParseError("expected `PAIR <id_i> <id_j> <n_inliers>`", lineno)
        id_i = _parse_id(fields[1], lineno, "image id")
        id_j = _parse_id(fields[2], lineno, "image id")
        n = _parse_id(fields[3], lineno, "inlier count")
        rows = []
        for _ in range(n):
            if lineno >= len(lines):
                raise ParseError(f"pair ({id_i}, {id_j}): expected {n} correspondence "
                                 f"lines, file ended after {len(rows)}", lineno)
            row = lines[lineno].split("#", 1)[0].split()
            lineno += 1
            if len(row) != 4:
                raise ParseError(f"correspondence expects 4 coordinates, got {len(row)}", lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(f"invalid coordinate in {row!r}", lineno) from None
        try:
            matches.add(id_i, id_j, np.array(rows, dtype=np.float64).reshape(n, 4))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
    return matches


def write_matches(matches):
    lines = []
    for (id_i, id_j) in sorted(matches):
        pm = matches[(id_i, id_j)]
        lines.append(f"PAIR {id_i} {id_j} {pm.n_inlier}")
        for xi, yi, xj, yj in pm.correspondences:
            lines.append(f"{repr(xi)} {repr(yi)} {repr(xj)} {repr(yj)}")
    return "\n".join(lines) + ("\n" if lines else "")


def validate_matches(matches, recon):
    """Check every matched pair against the reconstruction: known images,
    coordinates inside the respective image bounds."""
    for (id_i, id_j), pm in matches.items():
        for image_id in (id_i, id_j):
            if image_id not in recon.images:
                raise ValueError(f"matched pair ({id_i}, {id_j}) references "
                                 f"unknown image {image_id}")
        img_i, img_j = recon.images[id_i], recon.images[id_j]
        c = pm.correspondences
        if c.size == 0:
            continue
        in_i = (c[:, 0] >= 0) & (c[:, 0] <= img_i.width_px) & \
               (c[:, 1] >= 0) & (c[:, 1] <= img_i.height_px)
        in_j = (c[:, 2] >= 0) & (c[:, 2] <= img_j.width_px) & \
               (c[:, 3] >= 0) & (c[:, 3] <= img_j.height_px)
        if not (in_i.all() and in_j.all()):
            raise ValueError(f"pair ({id_i}, {id_j}): correspondence outside image bounds")
    return matches


# ---------------------------------------------------------------------------
# feature-map binary format (FMAP)


def write_feature_map(fmap):
    d, h, w = fmap.dims
    header = FMAP_MAGIC + struct.pack("<IIII", FORMAT_VERSION, d, h, w)
    payload = np.ascontiguousarray(fmap.values, dtype="<f4").tobytes()
    return header + payload


def parse_feature_map(data):
    if len(data) < 20:
        raise ParseError(f"truncated header: {len(data)} bytes")
    if data[:4] != FMAP_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {FMAP_MAGIC!r}")
    version, d, h, w = struct.unpack("<IIII", data[4:20])
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported feature-map version {version}")
    expected = 20 + 4 * d * h * w
    if len(data) != expected:
        raise ParseError(f"payload size mismatch: file has {len(data)} bytes, "
                         f"header {d}x{h}x{w} implies {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=20).astype(np.float64)
    return FeatureMap(values=values.reshape(d, h, w))


# ---------------------------------------------------------------------------
# descriptor binary format (DVEC) + names sidecar


def write_descriptors(dset):
    header = DVEC_MAGIC + struct.pack("<III", FORMAT_VERSION, len(dset), dset.dim)
    payload = np.ascontiguousarray(dset.vectors, dtype="<f4").tobytes()
    names = "\n".join(dset.names) + ("\n" if dset.names else "")
    return header + payload, names


def parse_descriptors(data, names_text):
    if len(data) < 16:
        raise ParseError(f"truncated header: {len(data)} bytes")
    if data[:4] != DVEC_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {DVEC_MAGIC!r}")
    version, count, dim = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported descriptor version {version}")
    expected = 16 + 4 * count * dim
    if len(data) != expected:
        raise ParseError(f"payload size mismatch: file has {len(data)} bytes, "
                         f"header count={count} dim={dim} implies {expected}")
    names = names_text.splitlines()
    if len(names) != count:
        raise ParseError(f"sidecar has {len(names)} names, descriptor file has {count}")
    vectors = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    return DescriptorSet(names=list(names), vectors=vectors.reshape(count, dim))


def descriptors_by_id(dset, recon):
    """Join a DescriptorSet with a reconstruction: image id -> vector."""
    index = {name: i for i, name in enumerate(dset.names)}
    out = {}
    for img in recon.images.values():
        if img.name not in index:
            raise KeyError(f"image {img.id} ({img.name!r}) has no descriptor")
        out[img.id] = dset.vectors[index[img.name]]
    return out

import numpy as np
import pytest

from pairforge.recon import ImageRecord, Point3D, Reconstruction


def central_diff(fn, x0, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp.flat[i] += h
        xm = x0.copy()
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def grad_rel_error(analytic, numeric, floor=1e-6):
    """Norm-relative disagreement with an absolute floor, so a pair of
    (near-)zero gradients compares as agreeing."""
    analytic = np.ravel(np.asarray(analytic, dtype=np.float64))
    numeric = np.ravel(np.asarray(numeric, dtype=np.float64))
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return np.linalg.norm(analytic - numeric) / denom


def make_recon(image_points, scenes=None, width=640, height=480):
    """Tiny reconstruction from {image_id: iterable of point ids}.

    Track keypoint indices count up per image in point-id order. Images
    default to a single scene 0.
    """
    scenes = scenes or {}
    recon = Reconstruction()
    all_scenes = {scenes.get(i, 0) for i in image_points}
    for s in sorted(all_scenes):
        recon.scenes[s] = f"scene{s}"
    for image_id in sorted(image_points):
        recon.images[image_id] = ImageRecord(
            id=image_id, scene=scenes.get(image_id, 0), name=f"img{image_id:03d}",
            width_px=width, height_px=height)
    tracks = {}
    for image_id, pts in image_points.items():
        for p in pts:
            tracks.setdefault(p, []).append(image_id)
    counters = {i: 0 for i in image_points}
    for p in sorted(tracks):
        members = sorted(tracks[p])
        if len(members) < 2:
            continue
        track = []
        for image_id in members:
            track.append((image_id, counters[image_id]))
            counters[image_id] += 1
        recon.points[p] = Point3D(id=p, position=(float(p), 0.0, 0.0),
                                  track=tuple(track))
    return recon.validate()


@pytest.fixture
def rng():
    return np.random.default_rng(0)

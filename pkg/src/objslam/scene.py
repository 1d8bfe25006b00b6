"""Synthetic tabletop world: wireframe objects, a ground-truth camera
trajectory, occlusion scheduling, edge-map rendering, and noisy 2D-3D
correspondence generation.

Everything here is deterministic given (scenario, seed): every random
draw comes from a named stream keyed on the scenario seed plus stable
indices (frame, object index, occlusion window index), so renders are
pure functions and runs replay bit-identically.

Edge maps are point sets on the integer pixel lattice, not raster
images. Segments are rasterized by stepping the major axis at integer
coordinates and rounding only the minor one, which keeps every
noiseless pixel within 0.5 px of the exact projected segment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    between,
    compose,
    inverse,
    project_points,
    rotation_axis_angle,
    so3_exp,
)

DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480
)

# Named RNG stream codes; each consumer owns one so streams never alias.
STREAM_EDGES = 0
STREAM_CORRESPONDENCES = 1
STREAM_OCCLUSION = 2
STREAM_VO = 3
STREAM_TRACKER = 4
STREAM_RECOGNIZER = 5


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, stream code, indices...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


@dataclass(frozen=True)
class WireframeModel:
    """Object geometry: 3D edge segments plus identifiable 3D landmark points.

    segments: (S, 2, 3) array of segment endpoints in the object frame.
    landmark_ids / landmark_points: (P,) int ids and (P, 3) coordinates.
    """

    label: str
    segments: np.ndarray
    landmark_ids: np.ndarray
    landmark_points: np.ndarray

    def __post_init__(self):
        segs = np.asarray(self.segments, dtype=float).reshape(-1, 2, 3)
        ids = np.asarray(self.landmark_ids, dtype=int).reshape(-1)
        pts = np.asarray(self.landmark_points, dtype=float).reshape(-1, 3)
        if segs.shape[0] < 3:
            raise ValueError("model needs at least 3 segments")
        if not (np.all(np.isfinite(segs)) and np.all(np.isfinite(pts))):
            raise ValueError("model coordinates must be finite")
        if pts.shape[0] < 4 or ids.shape[0] != pts.shape[0]:
            raise ValueError("model needs at least 4 landmark points with ids")
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("landmark ids must be unique")
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 3:
            raise ValueError("landmark points must be non-coplanar")
        for arr in (segs, ids, pts):
            arr.flags.writeable = False
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "landmark_ids", ids)
        object.__setattr__(self, "landmark_points", pts)

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.segments[:, 1] - self.segments[:, 0], axis=-1)


def box_model(label: str, sx: float, sy: float, sz: float) -> WireframeModel:
    """Axis-aligned box centered at the object origin.

    Landmarks are the 8 corners, 12 edge midpoints, and 6 face centers
    (26 points), enough to keep simulated feature tracking alive.
    """
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    corners = np.array(
        [[sx_ * hx, sy_ * hy, sz_ * hz] for sx_ in (-1, 1) for sy_ in (-1, 1) for sz_ in (-1, 1)]
    )
    # corner index pairs of the 12 box edges (gray-code neighbors)
    edge_idx = [
        (0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 3),
        (2, 6), (3, 7), (4, 5), (4, 6), (5, 7), (6, 7),
    ]
    segments = np.array([[corners[i], corners[j]] for i, j in edge_idx])
    midpoints = segments.mean(axis=1)
    faces = np.array(
        [
            [hx, 0, 0], [-hx, 0, 0],
            [0, hy, 0], [0, -hy, 0],
            [0, 0, hz], [0, 0, -hz],
        ]
    )
    pts = np.vstack([corners, midpoints, faces])
    return WireframeModel(label, segments, np.arange(len(pts)), pts)


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor corruption knobs for the simulated measurements."""

    edge_pixel_sigma: float = 0.6
    clutter_edge_density: float = 6.0
    correspondence_outlier_ratio: float = 0.1
    correspondence_pixel_sigma: float = 1.0
    vo_translation_drift: float = 0.01
    vo_rotation_sigma: float = 0.002
    vo_translation_sigma: float = 0.002

    def __post_init__(self):
        vals = [
            self.edge_pixel_sigma, self.clutter_edge_density,
            self.correspondence_outlier_ratio, self.correspondence_pixel_sigma,
            self.vo_translation_drift, self.vo_rotation_sigma, self.vo_translation_sigma,
        ]
        if any(v < 0 for v in vals):
            raise ValueError("noise parameters must be non-negative")
        if self.correspondence_outlier_ratio > 1:
            raise ValueError("outlier ratio must be <= 1")


@dataclass(frozen=True)
class Occlusion:
    """Half-open-free window [start, end] (inclusive) hiding a fraction of one object."""

    label: str
    start: int
    end: int
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("occlusion fraction must lie in [0, 1]")
        if self.end < self.start or self.start < 0:
            raise ValueError("bad occlusion window")

    def active(self, frame: int) -> bool:
        return self.start <= frame <= self.end


@dataclass(frozen=True)
class Scenario:
    """Immutable world description; all rendering derives from it."""

    trajectory: list
    objects: list
    occlusions: list
    intrinsics: CameraIntrinsics
    seed: int
    noise: NoiseConfig
    frame_period: float = 1.0 / 30.0
    name: str = "custom"

    def __post_init__(self):
        if len(self.trajectory) < 2:
            raise ValueError("trajectory needs at least 2 frames")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.frame_period <= 0:
            raise ValueError("frame period must be positive")
        labels = [m.label for m, _ in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("object labels must be unique")
        for occ in self.occlusions:
            if occ.label not in labels:
                raise ValueError(f"occlusion references unknown object {occ.label!r}")
            if occ.end >= len(self.trajectory):
                raise ValueError("occlusion window exceeds trajectory")
        # windows for one label must not overlap: the hidden subset is
        # drawn per window and overlap would make it ambiguous
        per_label = {}
        for occ in self.occlusions:
            for other in per_label.get(occ.label, []):
                if occ.start <= other.end and other.start <= occ.end:
                    raise ValueError("overlapping occlusion windows for one object")
            per_label.setdefault(occ.label, []).append(occ)

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def object_index(self, label: str) -> int:
        for i, (model, _) in enumerate(self.objects):
            if model.label == label:
                return i
        raise KeyError(label)

    def object_entry(self, label: str):
        model, pose = self.objects[self.object_index(label)]
        return model, pose

    def active_occlusion(self, label: str, frame: int):
        """(window index, Occlusion) if one is active, else None."""
        for i, occ in enumerate(self.occlusions):
            if occ.label == label and occ.active(frame):
                return i, occ
        return None

    @cached_property
    def _occlusion_draws(self):
        """Per-window hidden geometry, fixed for the window's whole duration:
        a start parameter per segment for the hidden contiguous run, and the
        hidden landmark index subset."""
        draws = []
        for w_idx, occ in enumerate(self.occlusions):
            model, _ = self.object_entry(occ.label)
            rng = stream_rng(self.seed, STREAM_OCCLUSION, w_idx)
            starts = rng.uniform(0.0, 1.0 - occ.fraction, size=len(model.segments))
            n_hidden = math.ceil(occ.fraction * len(model.landmark_points))
            hidden = rng.choice(len(model.landmark_points), size=n_hidden, replace=False)
            draws.append((starts, np.sort(hidden)))
        return draws


@dataclass(frozen=True)
class EdgeMap:
    """Edge evidence for one frame: integer pixel set with orientations."""

    frame: int
    pixels: np.ndarray
    orientations: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.int32).reshape(-1, 2)
        ori = np.asarray(self.orientations, dtype=float).reshape(-1)
        if ori.shape[0] != px.shape[0]:
            raise ValueError("one orientation per pixel required")
        if px.shape[0]:
            if px[:, 0].min() < 0 or px[:, 0].max() >= self.width:
                raise ValueError("edge pixel out of image bounds")
            if px[:, 1].min() < 0 or px[:, 1].max() >= self.height:
                raise ValueError("edge pixel out of image bounds")
        px.flags.writeable = False
        ori.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "orientations", ori)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @cached_property
    def occupancy(self) -> np.ndarray:
        """(height, width) boolean lookup image for corridor searches."""
        occ = np.zeros((self.height, self.width), dtype=bool)
        if len(self):
            occ[self.pixels[:, 1], self.pixels[:, 0]] = True
        occ.flags.writeable = False
        return occ


@dataclass(frozen=True)
class Correspondences:
    """2D-3D matches for one object at one frame (possibly with outliers)."""

    ids: np.ndarray
    pixels: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=int).reshape(-1)
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not (len(ids) == len(px) == len(pts)):
            raise ValueError("mismatched correspondence arrays")
        for arr in (ids, px, pts):
            arr.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        for i in range(len(self.ids)):
            yield self.ids[i], self.pixels[i], self.points[i]

    def subset(self, index) -> "Correspondences":
        return Correspondences(self.ids[index], self.pixels[index], self.points[index])


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z toward target, image-v roughly down."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("camera position coincides with target")
    fwd = fwd / norm
    right = np.cross(fwd, np.asarray(up, dtype=float))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return Pose(rot, position)


def _raster_segment(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer pixels along the 2D segment a->b, stepping the major axis.

    Only the minor coordinate is rounded, bounding the perpendicular
    error by 0.5 px.
    """
    d = b - a
    adx, ady = abs(d[0]), abs(d[1])
    if adx < 1e-12 and ady < 1e-12:
        return np.round(a[None, :]).astype(np.int64)
    if adx >= ady:
        x0, x1 = (a[0], b[0]) if a[0] <= b[0] else (b[0], a[0])
        xs = np.arange(math.ceil(x0 - 1e-9), math.floor(x1 + 1e-9) + 1, dtype=np.int64)
        if xs.size == 0:
            return np.empty((0, 2), dtype=np.int64)
        ys = a[1] + (xs - a[0]) * (d[1] / d[0])
        return np.stack([xs, np.round(ys).astype(np.int64)], axis=1)
    y0, y1 = (a[1], b[1]) if a[1] <= b[1] else (b[1], a[1])
    ys = np.arange(math.ceil(y0 - 1e-9), math.floor(y1 + 1e-9) + 1, dtype=np.int64)
    if ys.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    xs = a[0] + (ys - a[1]) * (d[0] / d[1])
    return np.stack([np.round(xs).astype(np.int64), ys], axis=1)


def _project_segment_runs(p0_c, p1_c, runs, intr):
    """Rasterize the visible parameter runs of one camera-frame segment.

    Returns (pixels int array, orientation radians) lists; clips each run
    against the z > 1e-3 half space before projecting.
    """
    out_px = []
    out_or = []
    z0, z1 = p0_c[2], p1_c[2]
    for (t0, t1) in runs:
        if t1 - t0 < 1e-9:
            continue
        a0, a1 = t0, t1
        # clip z(t) = z0 + t (z1 - z0) > 1e-3
        dz = z1 - z0
        if abs(dz) > 1e-12:
            t_cross = (1e-3 - z0) / dz
            if dz > 0:
                a0 = max(a0, t_cross)
            else:
                a1 = min(a1, t_cross)
        elif z0 <= 1e-3:
            continue
        if a1 - a0 < 1e-9:
            continue
        q0 = p0_c + a0 * (p1_c - p0_c)
        q1 = p0_c + a1 * (p1_c - p0_c)
        uv, ok = project_points(intr, np.stack([q0, q1]))
        if not ok.all():
            continue
        px = _raster_segment(uv[0], uv[1])
        if px.shape[0] == 0:
            continue
        ang = math.atan2(uv[1][1] - uv[0][1], uv[1][0] - uv[0][0]) % math.pi
        out_px.append(px)
        out_or.append(np.full(px.shape[0], ang))
    return out_px, out_or


def render_edge_map(scn: Scenario, frame: int) -> EdgeMap:
    """Edge evidence at one frame: projected object wireframes minus the
    occluded runs, perturbed by edge_pixel_sigma, plus clutter segments.

    Pure in (scenario, frame): repeated calls return identical maps.
    """
    if not 0 <= frame < scn.n_frames:
        raise IndexError("frame outside trajectory")
    intr = scn.intrinsics
    rng = stream_rng(scn.seed, STREAM_EDGES, frame)
    pix_parts = []
    ori_parts = []
    for model, t_wo in scn.objects:
        t_co = compose(inverse(scn.trajectory[frame]), t_wo)
        ends_c = t_co.apply(model.segments.reshape(-1, 3)).reshape(-1, 2, 3)
        occ = scn.active_occlusion(model.label, frame)
        starts, frac = None, 0.0
        if occ is not None:
            w_idx, window = occ
            starts = scn._occlusion_draws[w_idx][0]
            frac = window.fraction
        for s_idx in range(len(model.segments)):
            if frac == 0.0:
                runs = [(0.0, 1.0)]
            elif frac >= 1.0:
                continue
            else:
                h0 = starts[s_idx]
                runs = [(0.0, h0), (h0 + frac, 1.0)]
            px, orient = _project_segment_runs(ends_c[s_idx, 0], ends_c[s_idx, 1], runs, intr)
            pix_parts.extend(px)
            ori_parts.extend(orient)
    # clutter: short random segments spread over the image
    n_clutter = int(round(scn.noise.clutter_edge_density))
    for _ in range(n_clutter):
        center = rng.uniform([0.0, 0.0], [intr.width, intr.height])
        ang = rng.uniform(0.0, math.pi)
        half = rng.uniform(15.0, 60.0)
        d = np.array([math.cos(ang), math.sin(ang)]) * half
        px = _raster_segment(center - d, center + d)
        if px.shape[0]:
            pix_parts.append(px)
            ori_parts.append(np.full(px.shape[0], ang % math.pi))
    if pix_parts:
        pixels = np.concatenate(pix_parts).astype(float)
        orients = np.concatenate(ori_parts)
    else:
        pixels = np.empty((0, 2))
        orients = np.empty(0)
    if scn.noise.edge_pixel_sigma > 0 and len(pixels):
        pixels = pixels + rng.normal(0.0, scn.noise.edge_pixel_sigma, size=pixels.shape)
    pixels = np.round(pixels).astype(np.int64)
    if len(pixels):
        keep = (
            (pixels[:, 0] >= 0) & (pixels[:, 0] < intr.width)
            & (pixels[:, 1] >= 0) & (pixels[:, 1] < intr.height)
        )
        pixels, orients = pixels[keep], orients[keep]
        flat = pixels[:, 1] * intr.width + pixels[:, 0]
        _, first = np.unique(flat, return_index=True)
        first.sort()
        pixels, orients = pixels[first], orients[first]
    return EdgeMap(frame, pixels, orients, intr.width, intr.height)


def visible_landmarks(scn: Scenario, frame: int, label: str, apply_occlusion: bool = True):
    """Landmark visibility bookkeeping shared by correspondences and the
    simulated feature tracker: ids, true pixels, and object-frame points of
    the landmarks in front of the camera and inside the image."""
    model, t_wo = scn.object_entry(label)
    t_co = compose(inverse(scn.trajectory[frame]), t_wo)
    pts_c = t_co.apply(model.landmark_points)
    uv, in_front = project_points(scn.intrinsics, pts_c)
    ok = in_front.copy()
    if ok.any():
        with np.errstate(invalid="ignore"):
            inside = (
                (uv[:, 0] >= 0) & (uv[:, 0] < scn.intrinsics.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < scn.intrinsics.height)
            )
        ok &= np.where(np.isnan(uv[:, 0]), False, inside)
    if apply_occlusion:
        occ = scn.active_occlusion(label, frame)
        if occ is not None:
            w_idx, _ = occ
            hidden = scn._occlusion_draws[w_idx][1]
            ok[hidden] = False
    idx = np.nonzero(ok)[0]
    return model.landmark_ids[idx], uv[idx], model.landmark_points[idx]


def generate_correspondences(scn: Scenario, frame: int, label: str) -> Correspondences:
    """Simulated feature matches: visible landmarks projected through
    ground truth with pixel noise, a seeded fraction replaced by wrong
    uniform image points (outliers), occluded landmarks dropped."""
    obj_idx = scn.object_index(label)
    rng = stream_rng(scn.seed, STREAM_CORRESPONDENCES, frame, obj_idx)
    ids, uv, pts = visible_landmarks(scn, frame, label)
    n = len(ids)
    if n == 0:
        return Correspondences(np.empty(0, int), np.empty((0, 2)), np.empty((0, 3)))
    noise = scn.noise
    if noise.correspondence_pixel_sigma > 0:
        uv = uv + rng.normal(0.0, noise.correspondence_pixel_sigma, size=uv.shape)
    else:
        uv = uv.copy()
    n_out = int(round(noise.correspondence_outlier_ratio * n))
    if n_out > 0:
        out_idx = rng.choice(n, size=n_out, replace=False)
        uv[out_idx] = rng.uniform(
            [0.0, 0.0], [scn.intrinsics.width, scn.intrinsics.height], size=(n_out, 2)
        )
    return Correspondences(ids, uv, pts)


def ground_truth_relative(scn: Scenario, k: int) -> Pose:
    """Camera motion between frames k-1 and k, expressed in frame k-1:
    composing trajectory[k-1] with it reproduces trajectory[k]."""
    if k < 1 or k >= scn.n_frames:
        raise IndexError("relative pose needs 1 <= k < n_frames")
    return between(scn.trajectory[k - 1], scn.trajectory[k])


def camera_speeds(scn: Scenario) -> np.ndarray:
    """Finite-difference camera speeds (m/s), length n_frames - 1."""
    pos = np.stack([p.translation for p in scn.trajectory])
    return np.linalg.norm(np.diff(pos, axis=0), axis=1) / scn.frame_period


# ---------------------------------------------------------------------------
# Built-in scenarios


def _smooth01(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _orbit_trajectory(
    n_frames: int,
    *,
    target,
    radius0: float,
    radius1: float | None = None,
    ramp: tuple[int, int] | None = None,
    height: float,
    theta0: float,
    omega: float,
    gaze_offset: np.ndarray | None = None,
    gaze_window: tuple[int, int, int, int] | None = None,
    period: float = 1.0 / 30.0,
) -> list:
    """Smooth orbit around `target`; optional radius ramp and a gaze-offset
    bump (ramp in, hold, ramp out) that slews the look-at point sideways."""
    t = np.arange(n_frames) * period
    theta = theta0 + omega * t
    radius = np.full(n_frames, radius0)
    if radius1 is not None and ramp is not None:
        u = _smooth01((np.arange(n_frames) - ramp[0]) / max(ramp[1] - ramp[0], 1))
        radius = radius0 + (radius1 - radius0) * u
    target = np.asarray(target, dtype=float)
    offsets = np.zeros((n_frames, 3))
    if gaze_offset is not None and gaze_window is not None:
        a, b, c, d = gaze_window  # ramp-in a..b, hold b..c, ramp-out c..d
        idx = np.arange(n_frames)
        w = _smooth01((idx - a) / max(b - a, 1)) - _smooth01((idx - c) / max(d - c, 1))
        offsets = w[:, None] * np.asarray(gaze_offset, dtype=float)[None, :]
    poses = []
    for k in range(n_frames):
        pos = target + np.array(
            [radius[k] * math.cos(theta[k]), radius[k] * math.sin(theta[k]), height]
        )
        poses.append(look_at_pose(pos, target + offsets[k]))
    return poses


def _plain_scenario(name: str, model: WireframeModel, radius: float, seed: int) -> Scenario:
    target = np.array([0.0, 0.0, 0.05])
    traj = _orbit_trajectory(
        300, target=target, radius0=radius, height=0.50, theta0=0.3, omega=0.22
    )
    return Scenario(
        trajectory=traj,
        objects=[(model, Pose(np.eye(3), [0.0, 0.0, 0.05]))],
        occlusions=[],
        intrinsics=DEFAULT_INTRINSICS,
        seed=seed,
        noise=NoiseConfig(),
        name=name,
    )


def _occluded_scenario(name: str, model: WireframeModel, radius: float, seed: int) -> Scenario:
    # Full occlusion over frames 115..195 while the camera closes from
    # `radius` to about half of it and the gaze slews sideways. A tracker
    # frozen at the pre-window object pose ends up > 0.5 m wrong and stays
    # wrong for the tail, while the camera keeps moving (odometry alive).
    target = np.array([0.0, 0.0, 0.05])
    traj = _orbit_trajectory(
        300,
        target=target,
        radius0=radius,
        radius1=0.45 * radius,
        ramp=(115, 195),
        height=0.50,
        theta0=0.3,
        omega=0.22,
        gaze_offset=np.array([0.26, 0.16, 0.0]),
        gaze_window=(110, 130, 185, 205),
    )
    return Scenario(
        trajectory=traj,
        objects=[(model, Pose(np.eye(3), [0.0, 0.0, 0.05]))],
        occlusions=[Occlusion(model.label, 115, 195, 1.0)],
        intrinsics=DEFAULT_INTRINSICS,
        seed=seed,
        noise=NoiseConfig(),
        name=name,
    )


def builtin_scenarios() -> list:
    """The six standard scenarios: three objects, plain and occluded."""
    # sizes and orbit radii keep the apparent object above ~100 px so the
    # edge tracker has enough structure to avoid alias poses at 1 px noise
    small = box_model("small-box", 0.18, 0.22, 0.14)
    large = box_model("large-box", 0.30, 0.38, 0.24)
    carton = box_model("tall-carton", 0.10, 0.10, 0.30)
    return [
        _plain_scenario("small-box", small, 0.80, seed=11),
        _plain_scenario("large-box", large, 1.25, seed=12),
        _plain_scenario("tall-carton", carton, 0.85, seed=13),
        _occluded_scenario("occluded-small-box", small, 0.90, seed=21),
        _occluded_scenario("occluded-large-box", large, 1.40, seed=22),
        _occluded_scenario("occluded-tall-carton", carton, 0.95, seed=23),
    ]


def builtin_scenario(name: str, seed: int | None = None) -> Scenario:
    """Look up a built-in by name; optionally override its seed."""
    for scn in builtin_scenarios():
        if scn.name == name:
            if seed is not None and seed != scn.seed:
                return replace_seed(scn, seed)
            return scn
    known = ", ".join(s.name for s in builtin_scenarios())
    raise KeyError(f"unknown scenario {name!r} (built-ins: {known})")


def replace_seed(scn: Scenario, seed: int) -> Scenario:
    return Scenario(
        trajectory=scn.trajectory,
        objects=scn.objects,
        occlusions=scn.occlusions,
        intrinsics=scn.intrinsics,
        seed=seed,
        noise=scn.noise,
        frame_period=scn.frame_period,
        name=scn.name,
    )


# ---------------------------------------------------------------------------
# Serialization: structured text (JSON), poses as 7-number records
# [tx, ty, tz, ax, ay, az, angle] with a unit axis and radians angle.


def pose_to_record(p: Pose) -> list:
    axis, angle = rotation_axis_angle(p.rotation)
    return [*[float(v) for v in p.translation], *[float(v) for v in axis], float(angle)]


def pose_from_record(rec) -> Pose:
    rec = [float(v) for v in rec]
    if len(rec) != 7:
        raise ValueError("pose record needs 7 numbers")
    axis = np.array(rec[3:6])
    return Pose(so3_exp(axis * rec[6]), np.array(rec[:3]))


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "name": scn.name,
        "seed": scn.seed,
        "frame_period": scn.frame_period,
        "intrinsics": {
            "fx": scn.intrinsics.fx, "fy": scn.intrinsics.fy,
            "cx": scn.intrinsics.cx, "cy": scn.intrinsics.cy,
            "width": scn.intrinsics.width, "height": scn.intrinsics.height,
        },
        "noise": {
            "edge_pixel_sigma": scn.noise.edge_pixel_sigma,
            "clutter_edge_density": scn.noise.clutter_edge_density,
            "correspondence_outlier_ratio": scn.noise.correspondence_outlier_ratio,
            "correspondence_pixel_sigma": scn.noise.correspondence_pixel_sigma,
            "vo_translation_drift": scn.noise.vo_translation_drift,
            "vo_rotation_sigma": scn.noise.vo_rotation_sigma,
            "vo_translation_sigma": scn.noise.vo_translation_sigma,
        },
        "trajectory": [pose_to_record(p) for p in scn.trajectory],
        "objects": [
            {
                "label": model.label,
                "pose": pose_to_record(pose),
                "segments": model.segments.tolist(),
                "landmark_ids": model.landmark_ids.tolist(),
                "landmark_points": model.landmark_points.tolist(),
            }
            for model, pose in scn.objects
        ],
        "occlusions": [
            {"label": o.label, "start": o.start, "end": o.end, "fraction": o.fraction}
            for o in scn.occlusions
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    intr = d["intrinsics"]
    return Scenario(
        trajectory=[pose_from_record(r) for r in d["trajectory"]],
        objects=[
            (
                WireframeModel(
                    o["label"], np.array(o["segments"]),
                    np.array(o["landmark_ids"]), np.array(o["landmark_points"]),
                ),
                pose_from_record(o["pose"]),
            )
            for o in d["objects"]
        ],
        occlusions=[
            Occlusion(o["label"], o["start"], o["end"], o["fraction"])
            for o in d["occlusions"]
        ],
        intrinsics=CameraIntrinsics(
            fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
            width=intr["width"], height=intr["height"],
        ),
        seed=d["seed"],
        noise=NoiseConfig(**d["noise"]),
        frame_period=d["frame_period"],
        name=d.get("name", "custom"),
    )


def write_scenario(scn: Scenario, path) -> None:
    with open(path, "w") as f:
        json.dump(scenario_to_dict(scn), f, indent=1)
        f.write("\n")


def read_scenario(path) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(json.load(f))

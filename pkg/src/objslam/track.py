"""Edge-based 6-DOF object tracking with a particle filter on SE(3).

Each particle is a camera-frame object pose hypothesis. Per frame the
filter diffuses particles, refines each with a few iterations of
Huber-weighted Gauss-Newton on edge residuals, reweights by residual
magnitude and edge coverage, resamples when degenerate, and reports a
weighted tangent-space mean with a scatter covariance and a health
ratio (valid matched points / visible points).

Edge residuals come from a 1-D search along each sample's projected
edge normal: the nearest edge pixel within +-max_edge_error along the
normal, inside a corridor of half-width 1.5 px around the search line.
The search probes the integer lattice, so candidates hugging the
corridor rim can be missed by up to a pixel; the in-corridor filter
itself is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    se3_exp,
    se3_log,
)
from .recognize import PnPResult
from .scene import EdgeMap, WireframeModel

CORRIDOR_HALF_WIDTH = 1.5
_MIN_REFINE_POINTS = 12
_COV_FLOOR = np.diag([1e-3 ** 2] * 3 + [np.deg2rad(0.1) ** 2] * 3)


@dataclass(frozen=True)
class TrackerConfig:
    """diffusion_sigma is a (translation m, rotation rad) pair applied per
    frame; zero is allowed so a filter can be run as pure local refinement."""

    n_particles: int = 20
    sampling_step: float = 0.01
    max_edge_error: float = 32.0
    health_threshold: float = 0.5
    diffusion_sigma: tuple = (0.005, np.deg2rad(0.5))
    likelihood_sigma: float = 2.0
    irls_iterations: int = 2
    huber_scale: float = 5.0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        for v in (self.sampling_step, self.max_edge_error, self.likelihood_sigma,
                  self.huber_scale, self.irls_iterations):
            if v <= 0:
                raise ValueError("tracker scales must be positive")
        if not 0.0 < self.health_threshold <= 1.0:
            raise ValueError("health threshold must lie in (0, 1]")
        if len(self.diffusion_sigma) != 2 or min(self.diffusion_sigma) < 0:
            raise ValueError("diffusion_sigma is a non-negative (trans, rot) pair")


@dataclass(frozen=True)
class ParticleSet:
    """Snapshot view of the filter state."""

    particles: list
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.particles) < 1 or len(self.particles) != len(w):
            raise ValueError("particles and weights must match, N >= 1")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.particles)


@dataclass(frozen=True)
class TrackerOutput:
    pose: Pose
    covariance: np.ndarray
    health: float
    valid_points: int
    visible_points: int


@dataclass(frozen=True)
class SampledPoints:
    """Projected model edge samples: image points, unit edge normals,
    and per-sample visibility (in front of the camera and in bounds)."""

    points: np.ndarray
    normals: np.ndarray
    visible: np.ndarray

    def __len__(self) -> int:
        return len(self.visible)


def _model_samples(model: WireframeModel, step: float):
    """Object-frame sample points and unit segment directions at arc-length
    spacing `step`, including both endpoints when the length divides evenly."""
    pts = []
    dirs = []
    for seg in model.segments:
        a, b = seg[0], seg[1]
        length = float(np.linalg.norm(b - a))
        if length < 1e-12:
            continue
        n = int(np.floor(length / step + 1e-9)) + 1
        t = np.arange(n) * (step / length)
        pts.append(a + t[:, None] * (b - a))
        dirs.append(np.tile((b - a) / length, (n, 1)))
    return np.concatenate(pts), np.concatenate(dirs)


def _project_samples(intr, rot, trans, pts_o, dirs_o):
    """Batched sample projection. rot (..., 3, 3), trans (..., 3);
    returns uv (..., M, 2), normals (..., M, 2), visible (..., M)."""
    pts_c = np.einsum("...ij,mj->...mi", rot, pts_o) + trans[..., None, :]
    dir_c = np.einsum("...ij,mj->...mi", rot, dirs_o)
    z = pts_c[..., 2]
    in_front = z > 1e-6
    zs = np.where(in_front, z, 1.0)
    u = intr.fx * pts_c[..., 0] / zs + intr.cx
    v = intr.fy * pts_c[..., 1] / zs + intr.cy
    uv = np.stack([u, v], axis=-1)
    # image-plane direction of the projected segment at the sample:
    # d/ds of the projection along the 3D edge direction
    gu = intr.fx * (dir_c[..., 0] * zs - pts_c[..., 0] * dir_c[..., 2]) / zs ** 2
    gv = intr.fy * (dir_c[..., 1] * zs - pts_c[..., 1] * dir_c[..., 2]) / zs ** 2
    gnorm = np.hypot(gu, gv)
    ok_dir = gnorm > 1e-9
    gs = np.where(ok_dir, gnorm, 1.0)
    tang = np.stack([gu / gs, gv / gs], axis=-1)
    normals = np.stack([-tang[..., 1], tang[..., 0]], axis=-1)
    inside = (
        (uv[..., 0] >= 0) & (uv[..., 0] < intr.width)
        & (uv[..., 1] >= 0) & (uv[..., 1] < intr.height)
    )
    # samples whose projected direction degenerates have no search line
    visible = in_front & inside & ok_dir
    return uv, normals, visible, pts_c


def sample_model_points(
    model: WireframeModel, pose: Pose, intr: CameraIntrinsics, step: float
) -> SampledPoints:
    """Walk the model edges at arc-length intervals of `step`, project each
    sample, and attach the in-image normal of the projected edge."""
    if step <= 0:
        raise ValueError("sampling step must be positive")
    pts_o, dirs_o = _model_samples(model, step)
    uv, normals, visible, _ = _project_samples(
        intr, pose.rotation[None], pose.translation[None], pts_o, dirs_o
    )
    return SampledPoints(uv[0], normals[0], visible[0])


_SEARCH_RINGS = (2, 8)


def _ordered_offsets(lo, hi):
    """Normal-direction probe distances (lo, hi] interleaved by magnitude,
    each crossed with tangential offsets {0, -1, +1}; includes 0 when lo < 0."""
    s_list = [0.0] if lo < 0 else []
    for a in range(max(lo, 0) + 1, hi + 1):
        s_list.extend([-float(a), float(a)])
    s = np.repeat(np.asarray(s_list), 3)
    o = np.tile(np.array([0.0, -1.0, 1.0]), len(s_list))
    return s, o


def _corridor_search(points, normals, visible, occupancy, max_err):
    """Nearest edge pixel along each sample normal.

    points/normals (..., 2); returns (signed residual, found) with the
    residual measured along the normal to the chosen edge pixel. Probes
    round(p + s*n + o*t) for tangential o in {-1,0,1} walking |s| outward
    in rings, keeping candidates with |tangential offset| <= 1.5 px and
    |normal offset| <= max_err; the first candidate in the outward walk is
    taken, which matches the nearest-|residual| pixel up to rounding.
    """
    shape = points.shape[:-1]
    px = np.ascontiguousarray(points[..., 0].reshape(-1))
    py = np.ascontiguousarray(points[..., 1].reshape(-1))
    nx = np.ascontiguousarray(normals[..., 0].reshape(-1))
    ny = np.ascontiguousarray(normals[..., 1].reshape(-1))
    res = np.zeros(px.shape[0])
    found = np.zeros(px.shape[0], dtype=bool)
    height, width = occupancy.shape
    occ_flat = occupancy.reshape(-1)
    limit = int(np.ceil(max_err))
    rings = [r for r in _SEARCH_RINGS if r < limit] + [limit]
    active = np.nonzero(visible.reshape(-1))[0]
    prev = -1
    for ring in rings:
        if active.size == 0:
            break
        s_off, o_off = _ordered_offsets(prev, ring)
        prev = ring
        apx, apy = px[active], py[active]
        anx, any_ = nx[active], ny[active]
        # tangent is the normal rotated by -90 degrees: (ny, -nx)
        qx = np.rint(apx[:, None] + s_off * anx[:, None] + o_off * any_[:, None])
        qy = np.rint(apy[:, None] + s_off * any_[:, None] - o_off * anx[:, None])
        inb = (qx >= 0) & (qx < width) & (qy >= 0) & (qy < height)
        # occupancy is sparse, so gather it first and run the corridor
        # arithmetic only on probes that actually landed on an edge pixel
        qxi = qx.astype(np.intp).clip(0, width - 1)
        qyi = qy.astype(np.intp).clip(0, height - 1)
        hit = inb & occ_flat[qyi * width + qxi]
        hr, hc = np.nonzero(hit)
        dx = qx[hr, hc] - apx[hr]
        dy = qy[hr, hc] - apy[hr]
        dn = dx * anx[hr] + dy * any_[hr]
        dt = dx * any_[hr] - dy * anx[hr]
        ok = (np.abs(dt) <= CORRIDOR_HALF_WIDTH) & (np.abs(dn) <= max_err)
        hr, dn = hr[ok], dn[ok]
        # nonzero walks row-major, so the first surviving candidate per
        # row is the first ok column in the outward offset order
        rows, first = np.unique(hr, return_index=True)
        hit_rows = active[rows]
        res[hit_rows] = dn[first]
        found[hit_rows] = True
        keep = np.ones(active.size, dtype=bool)
        keep[rows] = False
        active = active[keep]
    return res.reshape(shape), found.reshape(shape)


def edge_residuals(samples: SampledPoints, edges: EdgeMap, max_err: float):
    """Signed 1-D edge residual and validity flag per sample.

    A sample is valid iff a corridor match exists within max_err along
    its normal; non-visible samples are always invalid.
    """
    res, found = _corridor_search(
        samples.points, samples.normals, samples.visible, edges.occupancy, max_err
    )
    return res, found & samples.visible


def _huber_rho(r, k):
    a = np.abs(r)
    return np.where(a <= k, 0.5 * r * r, k * (a - 0.5 * k))


def _huber_weight(r, k):
    a = np.abs(r)
    return np.where(a <= k, 1.0, k / np.maximum(a, 1e-12))


class EdgeTracker:
    """Stateful per-object tracker; one instance per tracked object."""

    def __init__(
        self,
        model: WireframeModel,
        intrinsics: CameraIntrinsics,
        config: TrackerConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.model = model
        self.intr = intrinsics
        self.cfg = config or TrackerConfig()
        self.rng = rng or np.random.default_rng(0)
        self._pts_o, self._dirs_o = _model_samples(model, self.cfg.sampling_step)
        self._rot = None
        self._tra = None
        self._weights = None
        self._last_cov = _COV_FLOOR.copy()
        self._last_pose = Pose.identity()
        self.events: list = []

    # -- state management ---------------------------------------------------

    @property
    def initialized(self) -> bool:
        return self._rot is not None

    @property
    def particles(self) -> ParticleSet:
        if not self.initialized:
            raise RuntimeError("tracker not initialized")
        poses = [Pose(self._rot[i], self._tra[i]) for i in range(len(self._tra))]
        return ParticleSet(poses, self._weights.copy())

    def _spawn(self, pose: Pose, trans_sigma: float, rot_sigma: float):
        n = self.cfg.n_particles
        xi = np.zeros((n, 6))
        xi[:, :3] = self.rng.normal(0.0, max(trans_sigma, 0.0), size=(n, 3))
        xi[:, 3:] = self.rng.normal(0.0, max(rot_sigma, 0.0), size=(n, 3))
        drot, dtra = se3_exp(xi)
        self._rot = pose.rotation @ drot
        self._tra = np.einsum("ij,nj->ni", pose.rotation, dtra) + pose.translation
        self._weights = np.full(n, 1.0 / n)
        self._last_pose = pose

    def initialize(self, pose: Pose):
        self.reset(pose)

    def reset(self, pose: Pose):
        """External pose hint: collapse all particles onto it with small
        jitter (half the per-frame diffusion) and uniform weights."""
        self._spawn(pose, self.cfg.diffusion_sigma[0] / 2.0,
                    self.cfg.diffusion_sigma[1] / 2.0)

    def reinitialize(self, recog: PnPResult | None) -> bool:
        """Recognition-based restart; a failed recognition (None) leaves
        the particle set untouched and reports False."""
        if recog is None:
            return False
        self.reset(recog.pose)
        self.events.append("reinitialized")
        return True

    # -- main loop ----------------------------------------------------------

    def _search_particles(self, occupancy):
        uv, normals, visible, _ = _project_samples(
            self.intr, self._rot, self._tra, self._pts_o, self._dirs_o
        )
        res, found = _corridor_search(
            uv, normals, visible, occupancy, self.cfg.max_edge_error
        )
        return uv, normals, visible, found & visible, res

    def _cost(self, res, valid, visible):
        k = self.cfg.huber_scale
        rho = _huber_rho(np.where(valid, res, 0.0), k)
        rho = np.where(valid, rho, 0.0)
        miss = visible.sum(axis=-1) - valid.sum(axis=-1)
        return rho.sum(axis=-1) + miss * _huber_rho(self.cfg.max_edge_error, k)

    def step(self, edges: EdgeMap) -> TrackerOutput:
        """One filter update against the frame's edge map."""
        if not self.initialized:
            raise RuntimeError("tracker not initialized")
        cfg = self.cfg
        n = cfg.n_particles
        occ = edges.occupancy
        # (a) diffusion
        xi = np.zeros((n, 6))
        xi[:, :3] = self.rng.normal(0.0, cfg.diffusion_sigma[0], size=(n, 3))
        xi[:, 3:] = self.rng.normal(0.0, cfg.diffusion_sigma[1], size=(n, 3))
        drot, dtra = se3_exp(xi)
        self._tra = np.einsum("nij,nj->ni", self._rot, dtra) + self._tra
        self._rot = self._rot @ drot
        # re-orthonormalize lazily: accumulated products drift slowly
        self._renormalize_rotations()

        uv, normals, visible, valid, res = self._search_particles(occ)
        cost = self._cost(res, valid, visible)
        lam = np.full(n, 1e-3)
        # (b) per-particle robust refinement
        for _ in range(cfg.irls_iterations):
            refine = valid.sum(axis=1) >= _MIN_REFINE_POINTS
            if not refine.any():
                break
            delta = self._irls_step(uv, normals, valid, res, lam, refine)
            if not np.any(np.abs(delta) > 1e-14):
                break
            drot, dtra = se3_exp(delta)
            cand_rot = self._rot @ drot
            cand_tra = np.einsum("nij,nj->ni", self._rot, dtra) + self._tra
            saved = (self._rot, self._tra)
            self._rot, self._tra = cand_rot, cand_tra
            uv2, normals2, visible2, valid2, res2 = self._search_particles(occ)
            cost2 = self._cost(res2, valid2, visible2)
            accept = refine & (cost2 <= cost)
            # per accepted particle the Huber cost must not increase
            assert np.all(cost2[accept] <= cost[accept])
            keep = accept[:, None, None]
            self._rot = np.where(keep, cand_rot, saved[0])
            self._tra = np.where(accept[:, None], cand_tra, saved[1])
            uv = np.where(accept[:, None, None], uv2, uv)
            normals = np.where(accept[:, None, None], normals2, normals)
            visible = np.where(accept[:, None], visible2, visible)
            valid = np.where(accept[:, None], valid2, valid)
            res = np.where(accept[:, None], res2, res)
            cost = np.where(accept, cost2, cost)
            lam = np.where(accept, np.maximum(lam * 0.3, 1e-6),
                           np.where(refine, lam * 10.0, lam))

        # (c) weights: residual likelihood times edge coverage
        n_valid = valid.sum(axis=1)
        n_vis = visible.sum(axis=1)
        mean_abs = np.where(n_valid > 0, np.abs(np.where(valid, res, 0.0)).sum(axis=1)
                            / np.maximum(n_valid, 1), cfg.max_edge_error)
        ratio = np.where(n_vis > 0, n_valid / np.maximum(n_vis, 1), 0.0)
        w = np.exp(-mean_abs ** 2 / (2.0 * cfg.likelihood_sigma ** 2)) * ratio
        total = w.sum()
        if total <= 0.0 or not np.isfinite(total):
            w = np.full(n, 1.0 / n)
        else:
            w = w / total
        self._weights = w
        # (d) systematic resampling on effective-sample-size collapse
        ess = 1.0 / float(w @ w)
        if ess < n / 2.0:
            self._resample()
        # (e) weighted tangent mean, scatter covariance, health at the mean
        mean = self._mean_pose()
        cov = self._scatter_covariance(mean)
        m_uv, m_nrm, m_vis, _ = _project_samples(
            self.intr, mean.rotation[None], mean.translation[None],
            self._pts_o, self._dirs_o,
        )
        m_res, m_found = _corridor_search(
            m_uv, m_nrm, m_vis, occ, cfg.max_edge_error
        )
        visible_pts = int(m_vis.sum())
        valid_pts = int((m_found & m_vis).sum())
        health = valid_pts / max(visible_pts, 1)
        if visible_pts == 0:
            cov = cov * 100.0
        self._last_pose = mean
        self._last_cov = cov
        return TrackerOutput(mean, cov, health, valid_pts, visible_pts)

    # -- internals ----------------------------------------------------------

    def _renormalize_rotations(self):
        err = self._rot @ np.swapaxes(self._rot, -1, -2) - np.eye(3)
        if np.max(np.abs(err)) > 1e-11:
            u, _, vt = np.linalg.svd(self._rot)
            det = np.linalg.det(u @ vt)
            fix = np.stack([np.ones_like(det), np.ones_like(det), det], axis=-1)
            self._rot = (u * fix[:, None, :]) @ vt

    def _irls_step(self, uv, normals, valid, res, lam, refine):
        cfg = self.cfg
        pts_c = np.einsum("nij,mj->nmi", self._rot, self._pts_o) + self._tra[:, None, :]
        z = np.maximum(pts_c[..., 2], 1e-6)
        # nd = n^T dpi, the image normal pulled back through the projection
        nd = np.empty(pts_c.shape)
        nd[..., 0] = normals[..., 0] * self.intr.fx / z
        nd[..., 1] = normals[..., 1] * self.intr.fy / z
        nd[..., 2] = -(nd[..., 0] * pts_c[..., 0] + nd[..., 1] * pts_c[..., 1]) / z
        # jac is d(projected point . normal)/d(twist); the residual is
        # measured from the projected point to the edge, so dr/dxi = -jac
        # and the Gauss-Newton step -(J'WJ)^-1 J'Wr becomes +(H)^-1 g.
        # Translation block: v = nd R; rotation block: v (-hat(X)) = X x v.
        jac = np.empty(pts_c.shape[:2] + (6,))
        v = np.einsum("nmb,nbc->nmc", nd, self._rot)
        jac[..., :3] = v
        jac[..., 3:] = np.cross(self._pts_o[None], v)
        wts = _huber_weight(res, cfg.huber_scale) * valid
        h = np.einsum("nmi,nmj,nm->nij", jac, jac, wts)
        g = np.einsum("nmi,nm->ni", jac, wts * res)
        h = h + lam[:, None, None] * np.eye(6)[None]
        delta = np.zeros((len(lam), 6))
        try:
            delta[refine] = np.linalg.solve(h[refine], g[refine, :, None])[..., 0]
        except np.linalg.LinAlgError:
            for i in np.nonzero(refine)[0]:
                try:
                    delta[i] = np.linalg.solve(h[i], g[i])
                except np.linalg.LinAlgError:
                    pass
        return delta

    def _resample(self):
        n = self.cfg.n_particles
        positions = (np.arange(n) + self.rng.uniform()) / n
        idx = np.searchsorted(np.cumsum(self._weights), positions)
        idx = np.clip(idx, 0, n - 1)
        self._rot = self._rot[idx].copy()
        self._tra = self._tra[idx].copy()
        self._weights = np.full(n, 1.0 / n)

    def _relative_twists(self, ref: Pose):
        """Tangent vectors of particles around ref, excluding the (rare)
        particles whose relative rotation approaches the log-map boundary."""
        rel_rot = np.einsum("ji,njk->nik", ref.rotation, self._rot)
        rel_tra = np.einsum("ji,nj->ni", ref.rotation, self._tra - ref.translation)
        trace = rel_rot[:, 0, 0] + rel_rot[:, 1, 1] + rel_rot[:, 2, 2]
        ok = np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0)) < 3.0
        xi = np.zeros((len(trace), 6))
        if ok.any():
            xi[ok] = se3_log(rel_rot[ok], rel_tra[ok])
        return xi, ok

    def _mean_pose(self) -> Pose:
        best = int(np.argmax(self._weights))
        ref = Pose(self._rot[best], self._tra[best])
        xi, ok = self._relative_twists(ref)
        w = self._weights * ok
        total = w.sum()
        if total <= 0:
            return ref
        mean_xi = (w / total) @ xi
        drot, dtra = se3_exp(mean_xi)
        return Pose(ref.rotation @ drot, ref.rotation @ dtra + ref.translation)

    def _scatter_covariance(self, mean: Pose) -> np.ndarray:
        xi, ok = self._relative_twists(mean)
        w = self._weights * ok
        total = w.sum()
        if total <= 0:
            return self._last_cov.copy()
        w = w / total
        cov = np.einsum("n,ni,nj->ij", w, xi, xi)
        cov = (cov + cov.T) / 2.0 + _COV_FLOOR
        return cov

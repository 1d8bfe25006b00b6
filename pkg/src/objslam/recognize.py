"""Global object pose estimation from 2D-3D correspondences.

A damped Gauss-Newton loop minimizes squared reprojection error; RANSAC
wraps it with minimal 4-point subsets scored by inlier count. The coarse
initializer needs no dedicated minimal solver: depth from the projected
spread ratio, rotation from Kabsch alignment of back-projected points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    exp_map,
    so3_hat,
)
from .scene import Correspondences

# Covariance floor keeps downstream gates non-singular in noiseless tests:
# (1 mm)^2 on translation, (0.1 deg)^2 on rotation.
_COV_FLOOR = np.diag([1e-3 ** 2] * 3 + [np.deg2rad(0.1) ** 2] * 3)


class RecognitionFailure(Exception):
    """No usable pose estimate (degenerate geometry, divergence, too few points)."""


@dataclass(frozen=True)
class PnPResult:
    """Estimated camera-frame object pose with its uncertainty."""

    pose: Pose
    inlier_ids: frozenset
    covariance: np.ndarray
    rmse: float


def reprojection_errors(corrs: Correspondences, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Per-correspondence pixel distance under `pose`; inf behind the camera."""
    pts_c = pose.apply(corrs.points)
    z = pts_c[:, 2]
    ok = z > 1e-6
    safe_z = np.where(ok, z, 1.0)
    u = intr.fx * pts_c[:, 0] / safe_z + intr.cx
    v = intr.fy * pts_c[:, 1] / safe_z + intr.cy
    d = np.hypot(u - corrs.pixels[:, 0], v - corrs.pixels[:, 1])
    return np.where(ok, d, np.inf)


def _residuals_and_jacobian(corrs, intr, pose):
    """Stacked 2n residual vector and (2n, 6) Jacobian at `pose`.

    Residual ordering matches right perturbation pose * exp(xi); returns
    None when any point falls behind the camera.
    """
    pts_c = pose.apply(corrs.points)
    z = pts_c[:, 2]
    if np.any(z <= 1e-6):
        return None
    x, y = pts_c[:, 0], pts_c[:, 1]
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    res = np.stack([u - corrs.pixels[:, 0], v - corrs.pixels[:, 1]], axis=1)
    n = len(corrs)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = intr.fx / z
    dpi[:, 0, 2] = -intr.fx * x / z ** 2
    dpi[:, 1, 1] = intr.fy / z
    dpi[:, 1, 2] = -intr.fy * y / z ** 2
    dpt = np.zeros((n, 3, 6))
    dpt[:, :, :3] = pose.rotation
    dpt[:, :, 3:] = -pose.rotation @ so3_hat(corrs.points)
    jac = dpi @ dpt
    return res.reshape(-1), jac.reshape(-1, 6)


def pnp_refine(
    corrs: Correspondences,
    intr: CameraIntrinsics,
    init: Pose,
    max_iterations: int = 50,
    step_tol: float = 1e-10,
) -> PnPResult:
    """Locally minimize total squared reprojection error from `init`.

    Levenberg-style damping: a step that raises the cost is retried with
    a larger damping factor; running out of damping range means divergence.
    Raises RecognitionFailure on < 4 points, points behind the camera at
    init, rank-deficient geometry, or divergence.
    """
    if len(corrs) < 4:
        raise RecognitionFailure("need at least 4 correspondences")
    pose = init
    rj = _residuals_and_jacobian(corrs, intr, pose)
    if rj is None:
        raise RecognitionFailure("initial pose places points behind the camera")
    res, jac = rj
    cost = float(res @ res)
    lam = 1e-6
    for _ in range(max_iterations):
        h = jac.T @ jac
        g = jac.T @ res
        stepped = False
        delta = np.zeros(6)
        while lam <= 1e8:
            try:
                delta = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                raise RecognitionFailure("singular normal matrix")
            candidate = compose(pose, exp_map(delta))
            rj_new = _residuals_and_jacobian(corrs, intr, candidate)
            if rj_new is not None:
                new_cost = float(rj_new[0] @ rj_new[0])
                if new_cost <= cost * (1.0 + 1e-12):
                    pose, (res, jac), cost = candidate, rj_new, new_cost
                    lam = max(lam * 0.3, 1e-9)
                    stepped = True
                    break
            lam *= 10.0
        if not stepped:
            # heavily damped steps are ~ -g / lam: if even those are tiny
            # we are at a stationary point, not diverging
            if np.linalg.norm(delta) < 1e-7:
                break
            raise RecognitionFailure("diverged: no acceptable step at max damping")
        if np.linalg.norm(delta) < step_tol:
            break
    h = jac.T @ jac
    if np.linalg.cond(h) > 1e12:
        raise RecognitionFailure("degenerate correspondence geometry")
    dof = max(len(res) - 6, 1)
    sigma2 = cost / dof
    cov = sigma2 * np.linalg.inv(h) + _COV_FLOOR
    cov = (cov + cov.T) / 2.0
    rmse = float(np.sqrt(cost / len(corrs)))
    return PnPResult(pose, frozenset(corrs.ids.tolist()), cov, rmse)


def coarse_pose(corrs: Correspondences, intr: CameraIntrinsics) -> Pose:
    """Closed-form starting guess: depth from the ratio of 3D to projected
    point spread, rotation from Kabsch alignment against back-projections
    at that depth."""
    u = corrs.pixels
    x = corrs.points
    f = (intr.fx + intr.fy) / 2.0
    su = np.sqrt(np.mean(np.sum((u - u.mean(axis=0)) ** 2, axis=1)))
    sx = np.sqrt(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))
    if su < 1e-9 or sx < 1e-12:
        raise RecognitionFailure("zero spread in correspondences")
    z0 = f * sx / su
    back = np.stack(
        [
            (u[:, 0] - intr.cx) / intr.fx * z0,
            (u[:, 1] - intr.cy) / intr.fy * z0,
            np.full(len(corrs), z0),
        ],
        axis=1,
    )
    xc = x - x.mean(axis=0)
    bc = back - back.mean(axis=0)
    h = xc.T @ bc
    uu, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ uu.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ uu.T
    t = back.mean(axis=0) - rot @ x.mean(axis=0)
    return Pose(rot, t)


def ransac_pnp(
    corrs: Correspondences,
    intr: CameraIntrinsics,
    iterations: int = 200,
    inlier_px: float = 3.0,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> PnPResult:
    """Robust pose from correspondences with outliers.

    Minimal 4-point hypotheses from coarse_pose + a short refinement,
    scored by inliers within inlier_px (inclusive); the best consensus set
    is refined fully and inliers reclassified under the refined pose.
    Deterministic for a given seed/rng. Raises RecognitionFailure when no
    hypothesis reaches 4 inliers.
    """
    if len(corrs) < 4:
        raise RecognitionFailure("need at least 4 correspondences")
    if rng is None:
        rng = np.random.default_rng(seed)
    n = len(corrs)
    best_mask = None
    best_count = 0
    best_rmse = np.inf
    # adaptive stop: enough draws for a 99.9% chance of one all-inlier
    # minimal sample at the best inlier ratio seen so far
    required = iterations
    it = 0
    while it < required:
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        subset = corrs.subset(idx)
        try:
            init = coarse_pose(subset, intr)
            hyp = pnp_refine(subset, intr, init, max_iterations=15)
        except RecognitionFailure:
            continue
        d = reprojection_errors(corrs, intr, hyp.pose)
        mask = d <= inlier_px
        count = int(mask.sum())
        if count < 4:
            continue
        rmse = float(np.sqrt(np.mean(d[mask] ** 2)))
        if count > best_count or (count == best_count and rmse < best_rmse):
            best_mask, best_count, best_rmse = mask, count, rmse
            w4 = (count / n) ** 4
            if w4 >= 1.0 - 1e-12:
                required = it
            else:
                required = min(iterations, math.ceil(math.log(1e-3) / math.log(1.0 - w4)))
    if best_mask is None:
        raise RecognitionFailure("no hypothesis reached 4 inliers")
    # refine on the consensus set, then reclassify under the refined pose;
    # repeat once if the inlier set changed
    mask = best_mask
    result = None
    for _ in range(3):
        subset = corrs.subset(mask)
        init = result.pose if result is not None else coarse_pose(subset, intr)
        result = pnp_refine(subset, intr, init)
        d = reprojection_errors(corrs, intr, result.pose)
        new_mask = d <= inlier_px
        if int(new_mask.sum()) < 4:
            raise RecognitionFailure("refined pose lost consensus")
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    inl = corrs.subset(mask)
    rmse = float(np.sqrt(np.mean(reprojection_errors(inl, intr, result.pose) ** 2)))
    return PnPResult(result.pose, frozenset(inl.ids.tolist()), result.covariance, rmse)

"""Simulated monocular visual odometry.

Real monocular VO estimates relative camera motion up to an unknown
global scale and accumulates drift with distance traveled. This module
reproduces exactly those failure characteristics from ground truth so
the fusion layers downstream face realistic inputs: a hidden true scale
divides all translations until metric initialization, per-frame noise
perturbs each relative pose, and a multiplicative drift term grows with
the distance already covered.

Metric scale comes from two object observations: the inter-keyframe
camera motion implied by a pair of camera-frame object poses is metric,
so its translation norm against the unscaled odometry norm yields the
scale multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    between,
    compose,
    diagonal_covariance,
    inverse,
    so3_exp,
    validate_covariance,
)
from .scene import STREAM_VO, Scenario, stream_rng, visible_landmarks

MIN_TRACKED_LANDMARKS = 20
MIN_DISPARITY_PX = 10.0
KEYFRAME_BASELINE_M = 0.05
MAX_KEYFRAMES = 100
DEGENERATE_BASELINE_M = 1e-3

# odometry factor noise: 5 cm, 5 degrees per axis
ODOMETRY_COVARIANCE = diagonal_covariance(0.05, np.deg2rad(5.0))


@dataclass(frozen=True)
class OdometryMeasurement:
    """Relative camera motion landing on frame k.

    `relative` is the pose of frame k expressed in frame k_from
    coordinates: composing the k_from camera pose with it reproduces the
    k camera pose. k_from is k-1 except when tracking dropouts forced
    the measurement to span a gap.
    """

    k: int
    k_from: int
    relative: Pose
    covariance: np.ndarray
    scaled: bool

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("measurements start at frame 1")
        if not 0 <= self.k_from < self.k:
            raise ValueError("k_from must precede k")
        validate_covariance(self.covariance)


@dataclass
class VoState:
    """Mutable per-run odometry state.

    true_scale is the simulation's hidden monocular scale; estimators
    must not read it. scale is the estimated multiplier applied to
    unscaled translations once initialized.
    """

    true_scale: float
    scale: float = 1.0
    initialized: bool = False
    keyframes: list = field(default_factory=list)
    accumulated_translation: float = 0.0
    distance_traveled: float = 0.0
    last_frame: int = 0

    @classmethod
    def for_scenario(cls, scn: Scenario) -> "VoState":
        rng = stream_rng(scn.seed, STREAM_VO)
        return cls(true_scale=float(rng.uniform(0.5, 2.0)))

    def set_scale(self, scale: float):
        if scale <= 0:
            raise ValueError("metric scale must be positive")
        self.scale = float(scale)
        self.initialized = True


def tracked_landmark_count(scn: Scenario, frame: int) -> int:
    """Features the simulated tracker can hold at this frame: all scene
    landmarks in the frustum. Object occlusion windows are ignored here;
    they stand for an occluder crossing the object, not a whole-image
    feature loss, and VO in the modeled system tracks the full scene."""
    total = 0
    for model, _ in scn.objects:
        ids, _, _ = visible_landmarks(scn, frame, model.label, apply_occlusion=False)
        total += len(ids)
    return total


def vo_step(scn: Scenario, k: int, state: VoState):
    """One odometry update; returns an OdometryMeasurement or None on a
    simulated tracking failure (too few visible landmarks).

    The relative pose spans from the last emitted frame, so a dropout is
    bridged by the next successful measurement instead of being lost.
    """
    if k < 1:
        raise ValueError("odometry needs a previous frame")
    if tracked_landmark_count(scn, k) < MIN_TRACKED_LANDMARKS:
        return None
    k_from = state.last_frame
    gt = between(scn.trajectory[k_from], scn.trajectory[k])
    step_len = float(np.linalg.norm(gt.translation))
    noise = scn.noise
    rng = stream_rng(scn.seed, STREAM_VO, k)
    t = gt.translation + rng.normal(0.0, noise.vo_translation_sigma, size=3)
    rot = gt.rotation @ so3_exp(rng.normal(0.0, noise.vo_rotation_sigma, size=3))
    # drift at the midpoint distance makes the accumulated error over a
    # path of length D exactly rate * D^2 / 2
    drift = 1.0 + noise.vo_translation_drift * (
        state.distance_traveled + 0.5 * step_len
    )
    t = t * (drift / state.true_scale)
    scaled = state.initialized
    if scaled:
        t = t * state.scale
    state.distance_traveled += step_len
    state.accumulated_translation += float(np.linalg.norm(t))
    state.last_frame = k
    return OdometryMeasurement(k, k_from, Pose(rot, t), ODOMETRY_COVARIANCE, scaled)


def initialize_scale(obs1, obs2, vo_accumulated: Pose):
    """Metric scale from two object observations bracketing an unscaled
    odometry chain; None when the baseline is degenerate (< 1 mm on
    either side), e.g. pure rotation between the keyframes.

    obs1/obs2 are (frame, PnPResult) pairs for the same object. The
    camera motion between the two frames is the metric anchor:
    T^{c2,c1} = T_2^{c,o} * inv(T_1^{c,o}).
    """
    (_, pnp1), (_, pnp2) = obs1, obs2
    metric = compose(pnp2.pose, inverse(pnp1.pose))
    metric_norm = float(np.linalg.norm(metric.translation))
    unscaled_norm = float(np.linalg.norm(vo_accumulated.translation))
    if metric_norm < DEGENERATE_BASELINE_M or unscaled_norm < DEGENERATE_BASELINE_M:
        return None
    return metric_norm / unscaled_norm


def keyframe_policy(state: VoState, k: int, disparity=None, baseline=None) -> bool:
    """Decide whether frame k becomes a keyframe and record it if so.

    The first keyframe is unconditional (the reference view). The second
    requires mean feature disparity >= 10 px, giving the scale
    initializer a usable baseline. Afterwards a keyframe is added per
    5 cm of estimated travel. The list caps at 100, oldest evicted.
    """
    if not state.keyframes:
        take = True
    elif len(state.keyframes) == 1:
        take = disparity is not None and disparity >= MIN_DISPARITY_PX
    else:
        take = baseline is not None and baseline >= KEYFRAME_BASELINE_M
    if not take:
        return False
    state.keyframes.append(k)
    if len(state.keyframes) > MAX_KEYFRAMES:
        state.keyframes.pop(0)
    state.accumulated_translation = 0.0
    return True


def mean_disparity(scn: Scenario, k_ref: int, k: int):
    """Mean pixel displacement of the landmarks visible in both frames;
    None when no landmark is shared. Occlusion ignored as in
    tracked_landmark_count."""
    disps = []
    for model, _ in scn.objects:
        ids_a, uv_a, _ = visible_landmarks(scn, k_ref, model.label, apply_occlusion=False)
        ids_b, uv_b, _ = visible_landmarks(scn, k, model.label, apply_occlusion=False)
        common, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
        if len(common):
            disps.append(np.linalg.norm(uv_a[ia] - uv_b[ib], axis=1))
    if not disps:
        return None
    return float(np.concatenate(disps).mean())

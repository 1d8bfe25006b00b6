"""Closed-loop run orchestration.

One synchronous loop per frame: render the edge evidence, step each
object tracker, step the simulated odometry, feed both into the pose
graph, optimize, and route the mapper's feedback actions back into the
trackers. Three modes cover the ablation axis:

  tracker-only   trackers run open loop; no odometry, no graph.
  no-feedback    odometry and gated object factors build the map, but
                 no action ever reaches a tracker.
  full           the complete loop including reset / reinitialize
                 feedback.

The world gauge is the camera frame at frame 0 (the graph anchor), so
estimated camera poses are comparable to the scenario's ground-truth
trajectory only after rigid alignment. Camera-frame object poses need
no alignment at all, which is why the per-frame error metric lives in
the camera frame.

Monocular scale: odometry measurements arrive unscaled until two
recognition keyframes with enough metric baseline pin the scale. The
unscaled prefix is buffered and enters the graph retroactively, scaled,
in the frame where initialization succeeds; records emitted before that
carry no camera estimate.

Record tables are flat delimited text, one row per frame per object;
see RECORD_COLUMNS and write_records for the exact format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, between, compose, inverse
from .graph import (
    FEEDBACK_THRESHOLD,
    GATE_ALPHA,
    FeedbackState,
    ObjectMeasurement,
    PoseGraph,
    process_measurement,
)
from .recognize import RecognitionFailure, ransac_pnp
from .scene import (
    STREAM_RECOGNIZER,
    STREAM_TRACKER,
    Scenario,
    generate_correspondences,
    pose_from_record,
    pose_to_record,
    render_edge_map,
    stream_rng,
)
from .track import EdgeTracker, TrackerConfig
from .vo import (
    OdometryMeasurement,
    VoState,
    initialize_scale,
    keyframe_policy,
    mean_disparity,
    vo_step,
)

MODES = ("full", "no-feedback", "tracker-only")

# metric baseline the two scale-init keyframes must span before the
# scale ratio is trusted; below this, recognition noise dominates
MIN_INIT_BASELINE_M = 0.05


@dataclass(frozen=True)
class RunConfig:
    """Everything one run depends on. Defaults mirror the evaluation
    setup; scenario is the only required field."""

    scenario: Scenario
    mode: str = "full"
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    alpha: float = GATE_ALPHA
    threshold: int = FEEDBACK_THRESHOLD
    max_iterations: int = 100
    cost_tolerance: float = 1e-9
    step_tolerance: float = 1e-10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")


@dataclass(frozen=True)
class FrameRecord:
    """One object in one frame.

    Poses are 6-DOF; camera poses live in the run's world gauge (camera
    frame 0 for estimates, the scenario frame for ground truth), object
    poses in the camera frame of that frame. camera_est is None before
    scale initialization, on odometry dropouts, and always in
    tracker-only mode; object_est is None only while a tracker has no
    state (bootstrap recognition failed).

    gate is the admission decision for the measurement: "accept" (became
    a factor), "reject" (gate failure or unhealthy), or "skip" (mapper
    never saw it). action is the feedback emitted for this object this
    frame: "none", "reset", or "reinitialize".
    """

    frame: int
    label: str
    camera_gt: Pose
    camera_est: Pose | None
    object_gt: Pose
    object_est: Pose | None
    health: float
    gate: str
    action: str


def _recognize(scn: Scenario, frame: int, label: str):
    """Global recognition attempt; None when it fails."""
    corrs = generate_correspondences(scn, frame, label)
    rng = stream_rng(scn.seed, STREAM_RECOGNIZER, frame, scn.object_index(label))
    try:
        return ransac_pnp(corrs, scn.intrinsics, rng=rng)
    except RecognitionFailure:
        return None


def _rescaled(m: OdometryMeasurement, scale: float) -> OdometryMeasurement:
    rel = Pose(m.relative.rotation, m.relative.translation * scale)
    return OdometryMeasurement(m.k, m.k_from, rel, m.covariance, True)


def _try_scale_init(keyframe_obs, unscaled_at):
    """Scale from the first and latest keyframe recognitions; None until
    the pair spans MIN_INIT_BASELINE_M of metric baseline."""
    (f0, r0), (f1, r1) = keyframe_obs[0], keyframe_obs[-1]
    if f1 == f0:
        return None
    metric = compose(r1.pose, inverse(r0.pose))
    if float(np.linalg.norm(metric.translation)) < MIN_INIT_BASELINE_M:
        return None
    rel = between(unscaled_at[f0], unscaled_at[f1])
    return initialize_scale((f0, r0), (f1, r1), rel)


def run(cfg: RunConfig) -> list:
    """Execute one run and return its FrameRecord list.

    Per frame: render edges, step every tracker, step odometry, ingest
    the odometry and object measurements into the graph, optimize, apply
    feedback actions, record. Runtime losses (failed recognition,
    odometry dropout, rejected measurements) are recorded, never raised.
    """
    scn = cfg.scenario
    use_mapper = cfg.mode != "tracker-only"
    closed_loop = cfg.mode == "full"
    labels = [model.label for model, _ in scn.objects]
    object_world = {model.label: pose for model, pose in scn.objects}

    trackers = {}
    for idx, (model, _) in enumerate(scn.objects):
        trackers[model.label] = EdgeTracker(
            model, scn.intrinsics, cfg.tracker,
            rng=stream_rng(scn.seed, STREAM_TRACKER, idx),
        )

    recog_cache: dict = {}

    def recognize(frame, label):
        key = (frame, label)
        if key not in recog_cache:
            recog_cache[key] = _recognize(scn, frame, label)
        return recog_cache[key]

    graph = feedback = vo = None
    vo_buffer = []  # unscaled odometry awaiting the metric scale
    unscaled_at = {0: Pose.identity()}  # frame -> cumulative unscaled camera pose
    keyframe_obs = []  # (frame, recognition) pairs anchoring the scale
    if use_mapper:
        graph = PoseGraph()
        graph.set_anchor(Pose.identity())  # world gauge: camera frame 0
        vo = VoState.for_scenario(scn)
        if closed_loop:
            feedback = FeedbackState(threshold=cfg.threshold, alpha=cfg.alpha)

    records = []
    for k in range(scn.n_frames):
        edges = render_edge_map(scn, k)
        n_factors_before = len(graph.factors) if use_mapper else 0

        outputs = {}
        for label in labels:
            tracker = trackers[label]
            if not tracker.initialized:
                recog = recognize(k, label)
                if recog is not None:
                    tracker.initialize(recog.pose)
            outputs[label] = tracker.step(edges) if tracker.initialized else None

        if use_mapper:
            if k == 0:
                keyframe_policy(vo, 0)
                recog = recognize(0, labels[0])
                if recog is not None:
                    keyframe_obs.append((0, recog))
            else:
                meas = vo_step(scn, k, vo)
                if meas is not None and meas.scaled:
                    graph.add_odometry(meas)
                elif meas is not None:
                    vo_buffer.append(meas)
                    unscaled_at[k] = compose(unscaled_at[meas.k_from], meas.relative)
                    last_kf = vo.keyframes[-1] if vo.keyframes else 0
                    disp = mean_disparity(scn, last_kf, k)
                    took = keyframe_policy(
                        vo, k, disparity=disp, baseline=vo.accumulated_translation
                    )
                    if took:
                        recog = recognize(k, labels[0])
                        if recog is not None:
                            keyframe_obs.append((k, recog))
                            if len(keyframe_obs) >= 2:
                                scale = _try_scale_init(keyframe_obs, unscaled_at)
                                if scale is not None:
                                    vo.set_scale(scale)
                                    for m in vo_buffer:
                                        graph.add_odometry(_rescaled(m, scale))
                                    vo_buffer.clear()

        gates = {label: "skip" for label in labels}
        fb_actions = {}
        if use_mapper and k in graph.poses:
            for label in labels:
                out = outputs[label]
                if out is None:
                    continue
                meas = ObjectMeasurement(
                    k, label, out.pose, out.covariance,
                    float(np.clip(out.health, 0.0, 1.0)),
                )
                healthy = out.health >= cfg.tracker.health_threshold
                if closed_loop:
                    action = process_measurement(graph, feedback, meas, healthy)
                    fb_actions[label] = action
                    gates[label] = "accept" if action.kind == "none" else "reject"
                elif not healthy:
                    gates[label] = "reject"
                elif label not in graph.landmarks:
                    graph.add_object_factor(meas)
                    gates[label] = "accept"
                elif graph.gate(k, meas, cfg.alpha).accepted:
                    graph.add_object_factor(meas)
                    gates[label] = "accept"
                else:
                    gates[label] = "reject"

        if use_mapper and len(graph.factors) > n_factors_before:
            graph.optimize(
                max_iterations=cfg.max_iterations,
                cost_tolerance=cfg.cost_tolerance,
                step_tolerance=cfg.step_tolerance,
            )

        if closed_loop:
            for label, action in fb_actions.items():
                if action.kind == "reset":
                    trackers[label].reset(action.predicted_pose)
                elif action.kind == "reinitialize":
                    trackers[label].reinitialize(recognize(k, label))

        camera_est = graph.poses.get(k) if use_mapper else None
        camera_gt = scn.trajectory[k]
        for label in labels:
            out = outputs[label]
            records.append(FrameRecord(
                frame=k,
                label=label,
                camera_gt=camera_gt,
                camera_est=camera_est,
                object_gt=between(camera_gt, object_world[label]),
                object_est=out.pose if out is not None else None,
                health=float(out.health) if out is not None else 0.0,
                gate=gates[label],
                action=fb_actions[label].kind if label in fb_actions else "none",
            ))
    return records


# -- record tables ------------------------------------------------------------------
#
# Flat whitespace-delimited text. First line is the header (prefixed
# with '#'), then one row per frame per object in emission order. Poses
# are 7 numbers: tx ty tz, unit rotation axis, angle (radians). Missing
# poses are seven nan. Floats use 6 significant digits; identical runs
# produce byte-identical tables.

_POSE_FIELDS = ("tx", "ty", "tz", "ax", "ay", "az", "angle")

RECORD_COLUMNS = (
    "frame",
    "label",
    *(f"camgt_{f}" for f in _POSE_FIELDS),
    *(f"camest_{f}" for f in _POSE_FIELDS),
    *(f"objgt_{f}" for f in _POSE_FIELDS),
    *(f"objest_{f}" for f in _POSE_FIELDS),
    "health",
    "gate",
    "action",
)


def _pose_cells(p: Pose | None) -> list:
    if p is None:
        return ["nan"] * 7
    return [f"{v:.6g}" for v in pose_to_record(p)]


def _cells_pose(cells) -> Pose | None:
    vals = [float(c) for c in cells]
    if any(np.isnan(v) for v in vals):
        return None
    return pose_from_record(vals)


def record_to_row(rec: FrameRecord) -> str:
    cells = [str(rec.frame), rec.label]
    for p in (rec.camera_gt, rec.camera_est, rec.object_gt, rec.object_est):
        cells.extend(_pose_cells(p))
    cells.append(f"{rec.health:.6g}")
    cells.extend((rec.gate, rec.action))
    return " ".join(cells)


def row_to_record(row: str) -> FrameRecord:
    cells = row.split()
    if len(cells) != len(RECORD_COLUMNS):
        raise ValueError(
            f"record row has {len(cells)} fields, expected {len(RECORD_COLUMNS)}"
        )
    return FrameRecord(
        frame=int(cells[0]),
        label=cells[1],
        camera_gt=_cells_pose(cells[2:9]),
        camera_est=_cells_pose(cells[9:16]),
        object_gt=_cells_pose(cells[16:23]),
        object_est=_cells_pose(cells[23:30]),
        health=float(cells[30]),
        gate=cells[31],
        action=cells[32],
    )


def write_records(records, path) -> None:
    for rec in records:
        if any(ch.isspace() for ch in rec.label):
            raise ValueError(f"label {rec.label!r} breaks the delimited format")
    lines = ["# " + " ".join(RECORD_COLUMNS)]
    lines.extend(record_to_row(rec) for rec in records)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_records(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            records.append(row_to_record(line))
    if not records:
        raise ValueError(f"no records in {path}")
    return records

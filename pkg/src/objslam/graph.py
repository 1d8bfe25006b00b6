"""Pose-graph backend fusing odometry and object observations.

Camera poses enter as camera-to-world transforms keyed by frame index,
object landmarks as object-to-world transforms keyed by label.  Odometry
and object observations both become between-factors with one shared
residual,

    r = log( inverse(measurement) o (inverse(value_a) o value_b) )

whitened by the factor noise, so the object factor predicts the object
pose in the camera frame and the odometry factor predicts the relative
camera motion.  All tangent vectors are ordered [translation, rotation]
and perturbations compose on the right: value o exp(delta).

The optimizer is a damped Gauss-Newton loop warm-started from the current
estimates on every call, which makes repeated per-frame calls behave
incrementally: a converged graph re-converges in one cheap iteration.

Data association is a per-component sigma gate on the between-residual of
a measurement against the landmark estimate.  Rejections feed a
per-object counter that first asks the tracker to reset onto the
predicted pose and, once the counter exhausts its threshold, to
reinitialize from recognition.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse import coo_matrix, identity as sparse_identity
from scipy.sparse.linalg import splu

from .geometry import (
    Pose,
    between,
    compose,
    diagonal_covariance,
    se3_adjoint,
    se3_exp,
    se3_left_jacobian_inverse,
    se3_log,
    symmetrize,
    validate_covariance,
)
from .vo import OdometryMeasurement

# Factor noise defaults: object factors 15 cm / 30 deg, anchor prior 1e-6.
OBJECT_FACTOR_NOISE = diagonal_covariance(0.15, np.deg2rad(30.0))
ANCHOR_NOISE = diagonal_covariance(1e-6, 1e-6)

GATE_ALPHA = 2.0
FEEDBACK_THRESHOLD = 500

_FACTOR_KINDS = ("prior", "odometry", "object")


@dataclass(frozen=True)
class ObjectMeasurement:
    """Tracked object pose in the camera frame at frame k, with uncertainty."""

    k: int
    label: str
    pose: Pose
    covariance: np.ndarray
    health: float

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("frame index must be >= 0")
        if not self.label or any(ch.isspace() for ch in self.label):
            raise ValueError("label must be non-empty without whitespace")
        if not 0.0 <= self.health <= 1.0:
            raise ValueError("health must lie in [0, 1]")
        cov = validate_covariance(self.covariance).copy()
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class Factor:
    """One term of the graph cost; noise must be invertible."""

    kind: str
    variables: tuple
    measurement: Pose
    noise: np.ndarray

    def __post_init__(self):
        if self.kind not in _FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if len(self.variables) != (1 if self.kind == "prior" else 2):
            raise ValueError("factor arity does not match its kind")
        noise = validate_covariance(self.noise).copy()
        try:
            np.linalg.cholesky(noise)
        except np.linalg.LinAlgError:
            raise ValueError("factor noise must be positive definite") from None
        noise.flags.writeable = False
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "variables", tuple(self.variables))


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    residual: np.ndarray  # between-residual in the landmark tangent (6,)
    sigma: np.ndarray  # per-component gate scale before the alpha multiplier


@dataclass(frozen=True)
class FeedbackAction:
    """What the tracker should do next for one object."""

    kind: str  # "none" | "reset" | "reinitialize"
    label: str
    predicted_pose: Pose | None = None


@dataclass
class FeedbackState:
    """Per-object rejection counters and modes for the feedback loop."""

    threshold: int = FEEDBACK_THRESHOLD
    alpha: float = GATE_ALPHA
    use_mahalanobis: bool = False
    counters: dict = field(default_factory=dict)
    modes: dict = field(default_factory=dict)

    def __post_init__(self):
        # threshold 0 means: never reset, reinitialize on the first failure
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def counter(self, label: str) -> int:
        return self.counters.get(label, 0)

    def mode(self, label: str) -> str:
        return self.modes.get(label, "tracking")


@dataclass(frozen=True)
class OptimizeReport:
    iterations: int  # accepted steps
    initial_cost: float
    final_cost: float
    converged: bool
    reason: str  # "cost" | "step" | "max-iterations" | "stalled" | "diverged" | "empty"


def _whitener(noise: np.ndarray) -> np.ndarray:
    lower = np.linalg.cholesky(noise)
    return solve_triangular(lower, np.eye(6), lower=True)


@dataclass
class _Structure:
    """Factor topology flattened to index arrays for batched linearization."""

    n_factors: int
    order: list
    index: dict
    prior_idx: np.ndarray
    prior_rot: np.ndarray
    prior_trans: np.ndarray
    prior_white: np.ndarray
    rel_ia: np.ndarray
    rel_ib: np.ndarray
    rel_rot: np.ndarray
    rel_trans: np.ndarray
    rel_white: np.ndarray
    eye: object  # sparse identity sized to the state dimension


@dataclass
class _Linearization:
    version: int
    index: dict
    lu: object


class PoseGraph:
    """Single-writer pose graph over camera poses and object landmarks."""

    def __init__(self):
        self.poses: dict[int, Pose] = {}
        self.landmarks: dict[str, Pose] = {}
        self.factors: list[Factor] = []
        self._whiteners: list[np.ndarray] = []
        self._version = 0
        self._structure: _Structure | None = None
        self._linearization: _Linearization | None = None

    # -- construction ------------------------------------------------------------

    def set_anchor(self, pose: Pose | None = None, *, k: int = 0,
                   noise: np.ndarray | None = None) -> None:
        """Create the first pose and pin it with a prior factor."""
        if self.poses:
            raise ValueError("anchor must be the first pose in the graph")
        pose = Pose.identity() if pose is None else pose
        self.poses[k] = pose
        self._add_factor("prior", (("pose", k),), pose,
                         ANCHOR_NOISE if noise is None else noise)

    def add_odometry(self, meas: OdometryMeasurement) -> None:
        """Create pose k by composing pose k_from with the measured relative."""
        if meas.k_from not in self.poses:
            raise KeyError(f"pose {meas.k_from} missing; odometry must chain")
        if meas.k in self.poses:
            raise ValueError(f"pose {meas.k} already exists")
        self.poses[meas.k] = compose(self.poses[meas.k_from], meas.relative)
        self._add_factor(
            "odometry",
            (("pose", meas.k_from), ("pose", meas.k)),
            meas.relative,
            meas.covariance,
        )

    def add_object_factor(self, meas: ObjectMeasurement,
                          noise: np.ndarray | None = None) -> None:
        """Attach an accepted object observation; first sight creates the landmark."""
        if meas.k not in self.poses:
            raise KeyError(f"pose {meas.k} missing; commit odometry first")
        if meas.label not in self.landmarks:
            self.landmarks[meas.label] = compose(self.poses[meas.k], meas.pose)
        self._add_factor(
            "object",
            (("pose", meas.k), ("object", meas.label)),
            meas.pose,
            OBJECT_FACTOR_NOISE if noise is None else noise,
        )

    def _add_factor(self, kind, variables, measurement, noise):
        factor = Factor(kind, variables, measurement, noise)
        self.factors.append(factor)
        self._whiteners.append(_whitener(factor.noise))
        self._version += 1

    # -- queries -----------------------------------------------------------------

    def predict_object_pose(self, k: int, label: str) -> Pose:
        """Expected camera-frame object pose from the current estimates."""
        return between(self.poses[k], self.landmarks[label])

    def gate(self, k: int, meas: ObjectMeasurement, alpha: float = GATE_ALPHA,
             *, mahalanobis: bool = False) -> GateResult:
        """Covariance test of a measurement against its landmark estimate.

        The residual lives in the right tangent of the world-frame landmark.
        A right perturbation of the camera-frame measurement is carried
        unchanged into that tangent (the camera pose cancels in the frame
        chain), so the measurement covariance enters the gate as-is and adds
        to the landmark marginal.
        """
        landmark = self.landmarks[meas.label]
        world_meas = compose(self.poses[k], meas.pose)
        total = symmetrize(self.marginal_covariance(meas.label) + meas.covariance)
        sigma = np.sqrt(np.diag(total))
        try:
            rel = between(landmark, world_meas)
            residual = se3_log(rel.rotation, rel.translation)
        except ValueError:
            # Rotation residual at the edge of the log domain: hopeless outlier.
            return GateResult(False, np.full(6, np.inf), sigma)
        if mahalanobis:
            d2 = float(residual @ np.linalg.solve(total, residual))
            accepted = d2 <= alpha * alpha * 6.0
        else:
            accepted = bool(np.all(np.abs(residual) <= alpha * sigma))
        return GateResult(accepted, residual, sigma)

    def marginal_covariance(self, variable) -> np.ndarray:
        """Tangent-space covariance block of one variable at the current
        linearization (pose variables by frame index, landmarks by label)."""
        key = ("pose", int(variable)) if isinstance(variable, (int, np.integer)) \
            else ("object", str(variable))
        lin = self._ensure_linearization()
        if key not in lin.index:
            raise KeyError(f"unknown variable {key}")
        slot = 6 * lin.index[key]
        rhs = np.zeros((len(lin.index) * 6, 6))
        rhs[slot:slot + 6] = np.eye(6)
        block = lin.lu.solve(rhs)[slot:slot + 6]
        if not np.all(np.isfinite(block)):
            raise RuntimeError("information matrix is numerically singular")
        return symmetrize(block)

    # -- linearization machinery ---------------------------------------------------

    def _variable_order(self):
        order = [("pose", k) for k in sorted(self.poses)]
        order += [("object", lbl) for lbl in sorted(self.landmarks)]
        return order, {key: i for i, key in enumerate(order)}

    def _ensure_structure(self) -> _Structure:
        st = self._structure
        if st is not None and st.n_factors == len(self.factors):
            return st
        order, index = self._variable_order()
        p_idx, p_rot, p_trans, p_w = [], [], [], []
        r_ia, r_ib, r_rot, r_trans, r_w = [], [], [], [], []
        for factor, white in zip(self.factors, self._whiteners):
            if factor.kind == "prior":
                p_idx.append(index[factor.variables[0]])
                p_rot.append(factor.measurement.rotation)
                p_trans.append(factor.measurement.translation)
                p_w.append(white)
            else:
                r_ia.append(index[factor.variables[0]])
                r_ib.append(index[factor.variables[1]])
                r_rot.append(factor.measurement.rotation)
                r_trans.append(factor.measurement.translation)
                r_w.append(white)

        def stack(items, shape):
            return np.asarray(items, dtype=float).reshape((len(items),) + shape)

        st = _Structure(
            n_factors=len(self.factors),
            order=order,
            index=index,
            prior_idx=np.asarray(p_idx, dtype=int),
            prior_rot=stack(p_rot, (3, 3)),
            prior_trans=stack(p_trans, (3,)),
            prior_white=stack(p_w, (6, 6)),
            rel_ia=np.asarray(r_ia, dtype=int),
            rel_ib=np.asarray(r_ib, dtype=int),
            rel_rot=stack(r_rot, (3, 3)),
            rel_trans=stack(r_trans, (3,)),
            rel_white=stack(r_w, (6, 6)),
            eye=sparse_identity(6 * len(order), format="csc"),
        )
        self._structure = st
        return st

    def _gather(self, st: _Structure):
        rot = np.empty((len(st.order), 3, 3))
        trans = np.empty((len(st.order), 3))
        for i, (kind, key) in enumerate(st.order):
            value = self.poses[key] if kind == "pose" else self.landmarks[key]
            rot[i] = value.rotation
            trans[i] = value.translation
        return rot, trans

    @staticmethod
    def _residuals(st: _Structure, rot, trans):
        """Whitened residuals of all factors; raises ValueError near the
        rotation-log domain edge."""
        out = []
        if len(st.prior_idx):
            rv = np.swapaxes(st.prior_rot, -1, -2) @ rot[st.prior_idx]
            tv = np.einsum("fji,fj->fi", st.prior_rot,
                           trans[st.prior_idx] - st.prior_trans)
            r = se3_log(rv, tv)
            out.append((np.einsum("fij,fj->fi", st.prior_white, r), r, None, None))
        if len(st.rel_ia):
            ra, ta = rot[st.rel_ia], trans[st.rel_ia]
            rb, tb = rot[st.rel_ib], trans[st.rel_ib]
            rel_rot = np.swapaxes(ra, -1, -2) @ rb
            rel_trans = np.einsum("fji,fj->fi", ra, tb - ta)
            rv = np.swapaxes(st.rel_rot, -1, -2) @ rel_rot
            tv = np.einsum("fji,fj->fi", st.rel_rot, rel_trans - st.rel_trans)
            r = se3_log(rv, tv)
            out.append((np.einsum("fij,fj->fi", st.rel_white, r), r,
                        rel_rot, rel_trans))
        return out

    def _cost(self, st: _Structure, rot, trans) -> float:
        try:
            parts = self._residuals(st, rot, trans)
        except ValueError:
            return np.inf
        return float(sum(np.sum(wr * wr) for wr, _, _, _ in parts))

    def _assemble(self, st: _Structure, rot, trans):
        """Sparse normal equations (H, g) and the cost at (rot, trans)."""
        n = 6 * len(st.order)
        g = np.zeros((len(st.order), 6))
        rows, cols, data = [], [], []
        row6 = np.repeat(np.arange(6), 6)
        col6 = np.tile(np.arange(6), 6)
        cost = 0.0

        def push(idx_r, idx_c, blocks):
            rows.append((idx_r * 6)[:, None] + row6[None, :])
            cols.append((idx_c * 6)[:, None] + col6[None, :])
            data.append(blocks.reshape(len(blocks), 36))

        parts = self._residuals(st, rot, trans)
        for wr, r, rel_rot, rel_trans in parts:
            cost += float(np.sum(wr * wr))
            jri = se3_left_jacobian_inverse(-r)
            if rel_rot is None:  # prior factors: single variable, J = Jr^-1(r)
                wj = st.prior_white @ jri
                np.add.at(g, st.prior_idx, np.einsum("fki,fk->fi", wj, wr))
                push(st.prior_idx, st.prior_idx, np.einsum("fki,fkj->fij", wj, wj))
            else:
                inv_rot = np.swapaxes(rel_rot, -1, -2)
                inv_trans = -np.einsum("fji,fj->fi", rel_rot, rel_trans)
                ja = -(jri @ se3_adjoint(inv_rot, inv_trans))
                wja = st.rel_white @ ja
                wjb = st.rel_white @ jri
                np.add.at(g, st.rel_ia, np.einsum("fki,fk->fi", wja, wr))
                np.add.at(g, st.rel_ib, np.einsum("fki,fk->fi", wjb, wr))
                push(st.rel_ia, st.rel_ia, np.einsum("fki,fkj->fij", wja, wja))
                push(st.rel_ib, st.rel_ib, np.einsum("fki,fkj->fij", wjb, wjb))
                hab = np.einsum("fki,fkj->fij", wja, wjb)
                push(st.rel_ia, st.rel_ib, hab)
                push(st.rel_ib, st.rel_ia, np.swapaxes(hab, -1, -2))
        h = coo_matrix(
            (np.concatenate([d.ravel() for d in data]),
             (np.concatenate([r.ravel() for r in rows]),
              np.concatenate([c.ravel() for c in cols]))),
            shape=(n, n),
        ).tocsc()
        return h, g.ravel(), cost

    def _ensure_linearization(self) -> _Linearization:
        lin = self._linearization
        if lin is not None and lin.version == self._version:
            return lin
        st = self._ensure_structure()
        rot, trans = self._gather(st)
        h, _, _ = self._assemble(st, rot, trans)
        try:
            lu = splu(h)
        except RuntimeError as exc:
            raise RuntimeError(
                "information matrix is singular; the graph needs an anchor prior"
            ) from exc
        lin = _Linearization(self._version, st.index, lu)
        self._linearization = lin
        return lin

    # -- optimization ------------------------------------------------------------

    def optimize(self, *, max_iterations: int = 100, cost_tolerance: float = 1e-9,
                 step_tolerance: float = 1e-10) -> OptimizeReport:
        """Damped Gauss-Newton from the current estimates.

        Cost never increases across accepted steps.  A non-finite initial
        cost reports divergence and leaves the estimates untouched.
        """
        if not self.poses and not self.landmarks:
            return OptimizeReport(0, 0.0, 0.0, True, "empty")
        st = self._ensure_structure()
        rot, trans = self._gather(st)
        cost = self._cost(st, rot, trans)
        initial_cost = cost
        if not np.isfinite(cost):
            return OptimizeReport(0, initial_cost, initial_cost, False, "diverged")

        lam = 1e-6
        iterations = 0
        converged = False
        reason = "max-iterations"
        for _ in range(max_iterations):
            h, g, _ = self._assemble(st, rot, trans)
            improved = False
            for _ in range(30):
                try:
                    delta = splu(h + lam * st.eye).solve(-g)
                except RuntimeError:
                    lam *= 10.0
                    continue
                if not np.all(np.isfinite(delta)):
                    lam *= 10.0
                    continue
                if np.linalg.norm(delta) < step_tolerance:
                    converged, reason = True, "step"
                    break
                step_rot, step_trans = se3_exp(delta.reshape(-1, 6))
                cand_rot = rot @ step_rot
                cand_trans = np.einsum("vij,vj->vi", rot, step_trans) + trans
                cand_cost = self._cost(st, cand_rot, cand_trans)
                if cand_cost <= cost:
                    assert cand_cost <= cost  # accepted steps never increase cost
                    rel_drop = (cost - cand_cost) / max(cost, 1e-300)
                    rot, trans, cost = cand_rot, cand_trans, cand_cost
                    lam = max(lam * 0.3, 1e-12)
                    iterations += 1
                    improved = True
                    if rel_drop < cost_tolerance:
                        converged, reason = True, "cost"
                    break
                lam *= 10.0
            if converged:
                break
            if not improved:
                reason = "stalled"
                break

        if iterations:
            for i, (kind, key) in enumerate(st.order):
                value = Pose(rot[i], trans[i])
                if kind == "pose":
                    self.poses[key] = value
                else:
                    self.landmarks[key] = value
            self._version += 1
        return OptimizeReport(iterations, initial_cost, cost, converged, reason)


# -- feedback state machine ------------------------------------------------------


def process_measurement(graph: PoseGraph, feedback: FeedbackState,
                        meas: ObjectMeasurement, healthy: bool) -> FeedbackAction:
    """Gate one tracked observation and drive the per-object feedback.

    Healthy gated-in measurements become object factors and clear the
    counter.  Failures below the rejection threshold ask the tracker to
    reset onto the graph's predicted pose; at the threshold the tracker is
    sent back to recognition.  An unseen label needs a healthy measurement
    to bootstrap; an unhealthy one can only reinitialize since there is no
    map pose to predict from.
    """
    label = meas.label
    known = label in graph.landmarks
    if healthy and known:
        accepted = graph.gate(meas.k, meas, feedback.alpha,
                              mahalanobis=feedback.use_mahalanobis).accepted
    else:
        accepted = bool(healthy)  # first sight of a label bootstraps the landmark
    if accepted:
        graph.add_object_factor(meas)
        feedback.counters[label] = 0
        feedback.modes[label] = "tracking"
        return FeedbackAction("none", label)
    if known and feedback.counter(label) < feedback.threshold:
        feedback.counters[label] = feedback.counter(label) + 1
        feedback.modes[label] = "resetting"
        return FeedbackAction("reset", label, graph.predict_object_pose(meas.k, label))
    feedback.modes[label] = "reinitializing"
    return FeedbackAction("reinitialize", label)


# -- snapshot serialization --------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=float).ravel())


def _var_token(key) -> str:
    return f"{key[0]}:{key[1]}"


def export_snapshot(graph: PoseGraph) -> str:
    """Serialize the graph as line-oriented text.

    Schema (whitespace separated, floats in round-trip repr):
      pose <frame> <9 rotation entries row-major> <3 translation>
      object <label> <9 rotation> <3 translation>
      factor <kind> <var> [<var>] <9 rotation> <3 translation> <36 noise>
      marginal <label> <36 covariance entries>
    Variable references are pose:<frame> or object:<label>.  Marginal lines
    are derived data recomputed on import; they are omitted when the graph
    has no invertible linearization yet.
    """
    lines = ["# pose-graph snapshot v1"]
    for k in sorted(graph.poses):
        p = graph.poses[k]
        lines.append(f"pose {k} {_fmt(p.rotation)} {_fmt(p.translation)}")
    for label in sorted(graph.landmarks):
        p = graph.landmarks[label]
        lines.append(f"object {label} {_fmt(p.rotation)} {_fmt(p.translation)}")
    for f in graph.factors:
        refs = " ".join(_var_token(v) for v in f.variables)
        lines.append(
            f"factor {f.kind} {refs} {_fmt(f.measurement.rotation)} "
            f"{_fmt(f.measurement.translation)} {_fmt(f.noise)}"
        )
    for label in sorted(graph.landmarks):
        try:
            marg = graph.marginal_covariance(label)
        except RuntimeError:
            continue
        lines.append(f"marginal {label} {_fmt(marg)}")
    return "\n".join(lines) + "\n"


def _parse_var(token: str):
    kind, _, name = token.partition(":")
    if kind == "pose":
        return ("pose", int(name))
    if kind == "object":
        return ("object", name)
    raise ValueError(f"bad variable reference {token!r}")


def import_snapshot(text: str) -> PoseGraph:
    """Rebuild a graph from :func:`export_snapshot` text; marginal lines are
    ignored (they are recomputed from the imported state on demand)."""
    graph = PoseGraph()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag in ("pose", "object"):
            vals = np.asarray(tokens[2:], dtype=float)
            if vals.size != 12:
                raise ValueError(f"malformed {tag} line")
            pose = Pose(vals[:9].reshape(3, 3), vals[9:])
            if tag == "pose":
                graph.poses[int(tokens[1])] = pose
            else:
                graph.landmarks[tokens[1]] = pose
        elif tag == "factor":
            kind = tokens[1]
            n_vars = 1 if kind == "prior" else 2
            variables = tuple(_parse_var(t) for t in tokens[2:2 + n_vars])
            vals = np.asarray(tokens[2 + n_vars:], dtype=float)
            if vals.size != 12 + 36:
                raise ValueError("malformed factor line")
            measurement = Pose(vals[:9].reshape(3, 3), vals[9:12])
            noise = vals[12:].reshape(6, 6)
            graph._add_factor(kind, variables, measurement, noise)
        elif tag == "marginal":
            continue
        else:
            raise ValueError(f"unknown snapshot line tag {tag!r}")
    for f in graph.factors:
        for kind, key in f.variables:
            store = graph.poses if kind == "pose" else graph.landmarks
            if key not in store:
                raise ValueError(f"factor references missing variable {kind}:{key}")
    graph._version += 1
    return graph

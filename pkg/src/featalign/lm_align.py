"""Levenberg-Marquardt direct alignment over feature pyramids.

The solver minimizes the Huber-aggregated feature-metric energy

    E(xi) = sum_p  rho_gamma( || F_tgt(warp(p, d_p, xi)) - F_ref(p) || )

over the 6-DOF relative pose, with left-compositional updates
``xi <- exp(delta) * xi``. Levels run coarse to fine; the damping factor
follows the classic schedule: halve on an accepted step, quadruple on a
rejected one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .feature_maps import FeatureMap, FeaturePyramid, gather_stencil
from .geometry import (
    CameraIntrinsics,
    SE3Pose,
    boxplus,
    pose_twist_jacobian,
    warp_points,
)

LAMBDA_SUCCESS_MULT = 0.5
LAMBDA_FAILURE_MULT = 4.0


class AlignmentError(ValueError):
    """Base class for alignment failures."""


class InsufficientOverlapError(AlignmentError):
    """Raised when fewer valid points remain than the configured minimum."""


class DegenerateSystemError(AlignmentError):
    """Raised when the damped normal equations are singular or ill-conditioned."""


class PointFileError(ValueError):
    """Raised for malformed sparse point files."""


@dataclass(frozen=True)
class SparsePointSet:
    """Sparse anchor points in full-resolution pixel coordinates, with depths."""

    uv: np.ndarray  # (n, 2) float64, level-4 pixel coordinates
    depths: np.ndarray  # (n,) float64, reference-frame depths
    warning: str | None = None

    def __post_init__(self) -> None:
        uv = np.ascontiguousarray(np.asarray(self.uv, dtype=np.float64).reshape(-1, 2))
        d = np.ascontiguousarray(np.asarray(self.depths, dtype=np.float64).reshape(-1))
        if uv.shape[0] != d.shape[0]:
            raise AlignmentError("point and depth counts differ")
        if np.any(d <= 0.0):
            raise AlignmentError("point depths must be positive")
        uv.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "depths", d)

    def __len__(self) -> int:
        return self.uv.shape[0]

    def at_level(self, level: int) -> np.ndarray:
        """Point coordinates rescaled to a pyramid level (level 4 = native)."""
        return self.uv * 2.0 ** (level - 4)


def save_points_text(path: str, points: SparsePointSet) -> None:
    """One 'u v depth' line per point, full float64 precision."""
    with open(path, "w", encoding="ascii") as fh:
        for (u, v), d in zip(points.uv, points.depths):
            fh.write(f"{u:.17g} {v:.17g} {d:.17g}\n")


def load_points_text(path: str) -> SparsePointSet:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise PointFileError(f"line {lineno}: expected 'u v depth', got {len(fields)} fields")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise PointFileError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise PointFileError("point file holds no points")
    arr = np.asarray(rows, dtype=np.float64)
    return SparsePointSet(uv=arr[:, :2], depths=arr[:, 2])


@dataclass(frozen=True)
class LMConfig:
    """Solver settings; defaults are tuned for normalized feature channels."""

    lambda_init: float = 0.1
    lambda_max: float = 1e8
    damping: str = "marquardt"  # or "levenberg"
    huber_gamma: float = 0.3
    max_iters_per_level: int = 50
    step_norm_eps: float = 1e-7
    min_valid_points: int = 8
    cond_max: float = 1e12
    margin: float = 2.0
    levels: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self) -> None:
        if self.damping not in ("levenberg", "marquardt"):
            raise AlignmentError(f"unknown damping mode {self.damping!r}")
        if self.lambda_init < 0.0:
            raise AlignmentError("lambda_init must be non-negative")
        if self.huber_gamma <= 0.0:
            raise AlignmentError("huber_gamma must be positive")
        if not self.levels or any(l not in (1, 2, 3, 4) for l in self.levels):
            raise AlignmentError(f"levels must be drawn from 1..4, got {self.levels}")
        if list(self.levels) != sorted(self.levels):
            raise AlignmentError("levels must be ascending (coarse to fine)")

    @staticmethod
    def from_mapping(data: dict) -> "LMConfig":
        kwargs = {}
        casts = {
            "lambda_init": float,
            "lambda_max": float,
            "damping": str,
            "huber_gamma": float,
            "max_iters_per_level": int,
            "step_norm_eps": float,
            "min_valid_points": int,
            "cond_max": float,
            "margin": float,
        }
        for key, value in data.items():
            if key == "levels":
                kwargs["levels"] = tuple(int(x) for x in str(value).replace(",", " ").split())
            elif key in casts:
                kwargs[key] = casts[key](value)
            else:
                raise AlignmentError(f"unknown solver config key {key!r}")
        return LMConfig(**kwargs)


def huber_energy(norms: np.ndarray, gamma: float) -> float:
    """Sum of Huber penalties over per-point residual norms."""
    s = np.asarray(norms, dtype=np.float64)
    quad = s <= gamma
    return float(np.sum(np.where(quad, 0.5 * s * s, gamma * (s - 0.5 * gamma))))


def huber_weights(norms: np.ndarray, gamma: float) -> np.ndarray:
    """IRLS weights: 1 inside the quadratic zone, gamma/s outside."""
    s = np.asarray(norms, dtype=np.float64)
    safe = np.maximum(s, 1e-300)
    return np.where(s <= gamma, 1.0, gamma / safe)


@dataclass
class ResidualEval:
    """Residuals of one level at one pose. Invalid points hold zero rows."""

    residuals: np.ndarray  # (n, D)
    valid: np.ndarray  # (n,) bool
    norms: np.ndarray  # (n,) per-point residual norms, 0 where invalid
    energy: float
    warped: np.ndarray  # (n, 2) target pixels, meaningful where valid
    transformed: np.ndarray  # (n, 3) target-frame points, meaningful where valid

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def compute_residuals(
    ref: FeatureMap,
    tgt: FeatureMap,
    uv: np.ndarray,
    depths: np.ndarray,
    pose: SE3Pose,
    intrinsics: CameraIntrinsics,
    huber_gamma: float = 0.3,
    margin: float = 2.0,
) -> ResidualEval:
    """Feature residuals F_tgt(warped) - F_ref(p) for one pyramid level.

    ``uv`` must already be in this level's pixel coordinates. Points whose
    warp leaves the margins, falls behind the camera, or whose own
    coordinates cannot be sampled in the reference are marked invalid and
    contribute nothing.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    n = uv.shape[0]
    d = tgt.channels

    in_ref = (
        (uv[:, 0] >= 1.0)
        & (uv[:, 0] <= ref.width - 2.0)
        & (uv[:, 1] >= 1.0)
        & (uv[:, 1] <= ref.height - 2.0)
    )
    warped, valid, transformed = warp_points(uv, depths, pose, intrinsics, margin=margin)
    valid &= in_ref

    residuals = np.zeros((n, d))
    norms = np.zeros(n)
    if np.any(valid):
        ref_vals = gather_stencil(ref, uv[valid]).values()
        tgt_vals = gather_stencil(tgt, warped[valid]).values()
        res = tgt_vals - ref_vals
        residuals[valid] = res
        norms[valid] = np.linalg.norm(res, axis=1)
    energy = huber_energy(norms[valid], huber_gamma) if np.any(valid) else 0.0
    return ResidualEval(
        residuals=residuals,
        valid=valid,
        norms=norms,
        energy=energy,
        warped=warped,
        transformed=transformed,
    )


def compute_jacobian(
    tgt: FeatureMap,
    uv: np.ndarray,
    depths: np.ndarray,
    pose: SE3Pose,
    intrinsics: CameraIntrinsics,
    margin: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """d(residual)/d(twist) at delta = 0, shape (n, D, 2) @ (2, 6) -> (n, D, 6).

    Rows of invalid points are zero. The reference term has no pose
    dependence, so the Jacobian is the target feature gradient chained with
    the projection and the left-update point motion.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    n = uv.shape[0]
    warped, valid, transformed = warp_points(uv, depths, pose, intrinsics, margin=margin)
    jac = np.zeros((n, tgt.channels, 6))
    if np.any(valid):
        grads = gather_stencil(tgt, warped[valid]).gradients()  # (m, D, 2)
        twist = pose_twist_jacobian(transformed[valid], intrinsics)  # (m, 2, 6)
        jac[valid] = grads @ twist
    return jac, valid


def build_normal_equations(
    jac: np.ndarray, residuals: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted Gauss-Newton system: H = J'WJ, b = -J'Wr.

    ``weights`` is one scalar per point, applied to all of the point's
    channels. Reductions are plain fixed-order sums, so results are
    reproducible bit-for-bit for identical inputs.
    """
    j = np.asarray(jac, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    h = np.einsum("ncx,n,ncy->xy", j, w, j)
    b = -np.einsum("ncx,n,nc->x", j, w, r)
    return h, b


def damp(h: np.ndarray, lam: float, mode: str) -> np.ndarray:
    """Apply damping: lam * I (levenberg) or lam * diag(H) (marquardt).

    Marquardt diagonal entries are floored at 1e-12 so a dead parameter
    direction still receives some damping.
    """
    if mode == "levenberg":
        return h + lam * np.eye(6)
    if mode == "marquardt":
        return h + lam * np.diag(np.maximum(np.diag(h), 1e-12))
    raise AlignmentError(f"unknown damping mode {mode!r}")


def solve_step(h_damped: np.ndarray, b: np.ndarray, cond_max: float = 1e12) -> np.ndarray:
    """Solve the damped system, refusing ill-conditioned ones."""
    eigs = np.linalg.eigvalsh(h_damped)
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > cond_max:
        raise DegenerateSystemError(
            f"damped Hessian condition {eigs[-1]:.3e}/{eigs[0]:.3e} exceeds {cond_max:.1e}"
        )
    return np.linalg.solve(h_damped, b)


@dataclass
class IterationRecord:
    """One solver iteration for trace inspection and tests."""

    index: int
    lam_before: float
    lam_after: float
    accepted: bool
    energy: float
    candidate_energy: float | None
    step_norm: float | None
    n_valid: int
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "lambda_before": self.lam_before,
            "lambda_after": self.lam_after,
            "accepted": self.accepted,
            "energy": self.energy,
            "candidate_energy": self.candidate_energy,
            "step_norm": self.step_norm,
            "n_valid": self.n_valid,
            "note": self.note,
        }


@dataclass
class LevelStats:
    """Outcome of one pyramid level."""

    level: int
    n_points: int
    n_valid_final: int = 0
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    initial_energy: float = math.nan
    final_energy: float = math.nan
    termination: str = ""
    skipped_reason: str | None = None
    trace: list[IterationRecord] = field(default_factory=list)

    def to_dict(self, include_trace: bool = False) -> dict:
        out = {
            "level": self.level,
            "n_points": self.n_points,
            "n_valid_final": self.n_valid_final,
            "iterations": self.iterations,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "initial_energy": self.initial_energy,
            "final_energy": self.final_energy,
            "termination": self.termination,
            "skipped_reason": self.skipped_reason,
        }
        if include_trace:
            out["trace"] = [rec.to_dict() for rec in self.trace]
        return out


@dataclass
class AlignmentResult:
    """Final pose plus per-level solver statistics."""

    pose: SE3Pose
    levels: list[LevelStats]
    converged: bool
    failure_reason: str | None = None

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.levels)

    @property
    def final_energy(self) -> float:
        for stats in reversed(self.levels):
            if stats.skipped_reason is None:
                return stats.final_energy
        return math.nan

    def to_dict(self, include_trace: bool = False) -> dict:
        return {
            "pose": [float(x) for x in self.pose.matrix34().reshape(-1)],
            "converged": self.converged,
            "failure_reason": self.failure_reason,
            "total_iterations": self.total_iterations,
            "final_energy": self.final_energy,
            "levels": [s.to_dict(include_trace) for s in self.levels],
        }


def align_level(
    ref: FeatureMap,
    tgt: FeatureMap,
    uv: np.ndarray,
    depths: np.ndarray,
    init_pose: SE3Pose,
    intrinsics: CameraIntrinsics,
    config: LMConfig,
    level: int = 4,
) -> tuple[SE3Pose, LevelStats]:
    """Run damped Gauss-Newton iterations on a single pyramid level.

    ``uv`` must be in this level's coordinates. The system is rebuilt only
    after an accepted step; rejected steps reuse it with a larger damping
    factor, which is equivalent to rebuilding at the unchanged pose.
    """
    n = np.asarray(uv).reshape(-1, 2).shape[0]
    stats = LevelStats(level=level, n_points=n)
    pose = init_pose
    lam = config.lambda_init

    current = compute_residuals(
        ref, tgt, uv, depths, pose, intrinsics, config.huber_gamma, config.margin
    )
    if current.n_valid < config.min_valid_points:
        stats.skipped_reason = (
            f"insufficient overlap: {current.n_valid} valid points "
            f"(minimum {config.min_valid_points})"
        )
        stats.n_valid_final = current.n_valid
        return pose, stats

    stats.initial_energy = current.energy
    system_fresh = False
    h = b = None

    for it in range(config.max_iters_per_level):
        if lam > config.lambda_max:
            stats.termination = "lambda_cap"
            break
        if not system_fresh:
            jac, jac_valid = compute_jacobian(tgt, uv, depths, pose, intrinsics, config.margin)
            weights = huber_weights(current.norms, config.huber_gamma) * (
                current.valid & jac_valid
            )
            h, b = build_normal_equations(jac, current.residuals, weights)
            system_fresh = True

        stats.iterations += 1
        rec = IterationRecord(
            index=it,
            lam_before=lam,
            lam_after=lam,
            accepted=False,
            energy=current.energy,
            candidate_energy=None,
            step_norm=None,
            n_valid=current.n_valid,
        )
        stats.trace.append(rec)

        try:
            delta = solve_step(damp(h, lam, config.damping), b, config.cond_max)
        except DegenerateSystemError as exc:
            lam *= LAMBDA_FAILURE_MULT
            stats.rejected += 1
            rec.lam_after = lam
            rec.note = f"degenerate: {exc}"
            continue

        step_norm = float(np.linalg.norm(delta))
        rec.step_norm = step_norm
        if step_norm < config.step_norm_eps:
            stats.termination = "step_norm"
            rec.note = "step below threshold"
            break

        candidate = boxplus(delta, pose)
        cand_eval = compute_residuals(
            ref, tgt, uv, depths, candidate, intrinsics, config.huber_gamma, config.margin
        )
        rec.candidate_energy = cand_eval.energy

        if cand_eval.n_valid >= config.min_valid_points and cand_eval.energy < current.energy:
            pose = candidate
            current = cand_eval
            lam *= LAMBDA_SUCCESS_MULT
            stats.accepted += 1
            rec.accepted = True
            system_fresh = False
        else:
            lam *= LAMBDA_FAILURE_MULT
            stats.rejected += 1
            if cand_eval.n_valid < config.min_valid_points:
                rec.note = "candidate lost overlap"
        rec.lam_after = lam
    else:
        stats.termination = "max_iters"

    stats.final_energy = current.energy
    stats.n_valid_final = current.n_valid
    return pose, stats


def align_coarse_to_fine(
    ref_pyramid: FeaturePyramid,
    tgt_pyramid: FeaturePyramid,
    points: SparsePointSet,
    intrinsics: CameraIntrinsics,
    config: LMConfig | None = None,
    init_pose: SE3Pose | None = None,
) -> AlignmentResult:
    """Align over the configured levels, coarse to fine.

    Points and intrinsics are given at full resolution and rescaled per
    level. The damping factor restarts from ``lambda_init`` on every level.
    A level without enough valid points is skipped (recorded with a reason)
    and the pose passes through unchanged.
    """
    if config is None:
        config = LMConfig()
    pose = SE3Pose.identity() if init_pose is None else init_pose
    all_stats: list[LevelStats] = []

    for level in config.levels:
        ref = ref_pyramid.level(level)
        tgt = tgt_pyramid.level(level)
        uv = points.at_level(level)
        k_level = intrinsics.at_level(level)
        pose, stats = align_level(
            ref, tgt, uv, points.depths, pose, k_level, config, level
        )
        all_stats.append(stats)

    attempted = [s for s in all_stats if s.skipped_reason is None]
    if not attempted:
        return AlignmentResult(
            pose=pose,
            levels=all_stats,
            converged=False,
            failure_reason="insufficient overlap at every level",
        )
    last = all_stats[-1]
    if last.skipped_reason is not None:
        return AlignmentResult(
            pose=pose,
            levels=all_stats,
            converged=False,
            failure_reason=f"finest level skipped: {last.skipped_reason}",
        )
    return AlignmentResult(pose=pose, levels=all_stats, converged=True)

"""Correspondence-level losses that shape feature maps for alignment.

Four terms, all driven by sampled feature vectors and the 2x2 per-point
normal equations of the alignment update:

  match:    corresponding features should agree (squared distance).
  negative: random non-correspondences should stay a margin apart (hinge).
  gd step:  from a ring around the true match, one heavily damped update
            step should move measurably closer to it (hinge on progress).
  gn step:  within a pixel of the true match, an almost-undamped step
            should land on it, with the local curvature acting as the
            precision of a Gaussian (negative log-density form).

Every term consumes bilinear interpolation stencils, so the training
gradient can be computed by central finite differences over individual
stored cell values without re-evaluating untouched samples.

Sign convention: the per-point right-hand side is b = -J^T r and update
steps are p + (H + damping)^{-1} b, i.e. steps descend the local quadratic
model. See the decision record for why this is spelled out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .feature_maps import (
    FeatureMap,
    SAMPLE_MARGIN,
    Stencil,
    bilinear_sample_many,
    gather_stencil,
    stencil_weights,
)

LOG_TWO_PI = math.log(2.0 * math.pi)
DET_FLOOR = 1e-12
FD_STEP = 1e-4


class LossError(Exception):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0          # squared-feature-distance hinge for negatives
    lambda_f: float = 2.0        # damping of the ring-sample update step
    gd_margin: float = 0.1       # required squared-distance progress slack
    epsilon: float = 1e-6        # damping of the near-sample update step
    gd_radius: float = 5.0       # ring radius around the true match, pixels
    gn_radius: float = 1.0       # near-sample disk radius, pixels
    w_match: float = 1.0
    w_negative: float = 1.0
    w_gd: float = 1.0
    w_gn: float = 1.0

    def __post_init__(self):
        for name in ("margin", "lambda_f", "gd_margin", "epsilon", "gd_radius", "gn_radius"):
            if getattr(self, name) <= 0:
                raise LossError(f"{name} must be positive")
        if not self.epsilon < self.lambda_f / 1000.0:
            raise LossError("epsilon must be well below lambda_f (by 1000x)")
        for name in ("w_match", "w_negative", "w_gd", "w_gn"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")

    @classmethod
    def from_mapping(cls, mapping, base: "LossConfig | None" = None) -> "LossConfig":
        """Override fields of ``base`` (default: class defaults) from strings."""
        kwargs = {
            f: getattr(base, f) for f in cls.__dataclass_fields__
        } if base is not None else {}
        for key, raw in mapping.items():
            if key not in cls.__dataclass_fields__:
                raise LossError(f"unknown loss config key: {key!r}")
            kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class CorrespondenceBatch:
    """Sampled evaluation points for one reference/target map pair.

    Per row: a reference pixel, its true target correspondence, one global
    negative, one ring sample at the basin rim, and one near sample within
    a pixel of the truth.
    """

    ref_uv: np.ndarray
    gt_uv: np.ndarray
    neg_uv: np.ndarray
    ring_uv: np.ndarray
    near_uv: np.ndarray
    seed: int = 0

    def __post_init__(self):
        n = self.ref_uv.shape[0]
        for name in ("ref_uv", "gt_uv", "neg_uv", "ring_uv", "near_uv"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, 2):
                raise LossError(f"{name} must be ({n}, 2), got {arr.shape}")
            object.__setattr__(self, name, arr)
        if n == 0:
            raise LossError("batch needs at least one correspondence")

    def __len__(self) -> int:
        return self.ref_uv.shape[0]


@dataclass(frozen=True)
class PointGNSystem:
    """2x2 normal equations of one sampled target point."""

    residual: np.ndarray  # (D,)
    jacobian: np.ndarray  # (D, 2) spatial gradient of the target features
    hessian: np.ndarray   # (2, 2) J^T J
    rhs: np.ndarray       # (2,)  -J^T r

    def step(self, damping: float) -> np.ndarray:
        """Damped update step (H + damping*I)^{-1} rhs."""
        return np.linalg.solve(self.hessian + damping * np.eye(2), self.rhs)


# ---------------------------------------------------------------------------
# Stencil-level term arithmetic (shared by scalar ops, batches, and FD).
# ---------------------------------------------------------------------------


def _interp(corners, fu, fv):
    return np.einsum("nc,ncd->nd", stencil_weights(fu, fv), corners)


def _sq_dist_terms(corners, fu, fv, f_ref):
    diff = _interp(corners, fu, fv) - f_ref
    return np.einsum("nd,nd->n", diff, diff)


def _gn_pieces(corners, fu, fv, f_ref):
    """Residual, 2x2 Hessian and rhs for every row, from raw stencils."""
    vals = _interp(corners, fu, fv)
    fu_ = fu[:, None]
    fv_ = fv[:, None]
    du = (1.0 - fv_) * (corners[:, 1] - corners[:, 0]) + fv_ * (corners[:, 3] - corners[:, 2])
    dv = (1.0 - fu_) * (corners[:, 2] - corners[:, 0]) + fu_ * (corners[:, 3] - corners[:, 1])
    jac = np.stack([du, dv], axis=2)            # (n, D, 2)
    res = vals - f_ref                          # (n, D)
    hess = np.einsum("ndi,ndj->nij", jac, jac)  # (n, 2, 2)
    rhs = -np.einsum("ndi,nd->ni", jac, res)    # (n, 2)
    return res, jac, hess, rhs


def _solve_2x2(hess, damping, rhs):
    a = hess[:, 0, 0] + damping
    b = hess[:, 0, 1]
    c = hess[:, 1, 0]
    d = hess[:, 1, 1] + damping
    det = a * d - b * c
    out = np.empty_like(rhs)
    out[:, 0] = (d * rhs[:, 0] - b * rhs[:, 1]) / det
    out[:, 1] = (-c * rhs[:, 0] + a * rhs[:, 1]) / det
    return out


def _gd_terms(corners, fu, fv, f_ref, ring_uv, gt_uv, config):
    _, _, hess, rhs = _gn_pieces(corners, fu, fv, f_ref)
    after = ring_uv + _solve_2x2(hess, config.lambda_f, rhs)
    gain = np.einsum("ni,ni->n", after - gt_uv, after - gt_uv)
    before = np.einsum("ni,ni->n", ring_uv - gt_uv, ring_uv - gt_uv)
    return np.maximum(gain - before + config.gd_margin, 0.0)


def _gn_terms(corners, fu, fv, f_ref, near_uv, gt_uv, config):
    _, _, hess, rhs = _gn_pieces(corners, fu, fv, f_ref)
    after = near_uv + _solve_2x2(hess, config.epsilon, rhs)
    diff = after - gt_uv
    quad = 0.5 * np.einsum("ni,nij,nj->n", diff, hess, diff)
    det = hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] * hess[:, 1, 0]
    return quad + LOG_TWO_PI - 0.5 * np.log(np.maximum(det, DET_FLOOR))


# ---------------------------------------------------------------------------
# Scalar operations.
# ---------------------------------------------------------------------------


def match_loss(ref_map: FeatureMap, tgt_map: FeatureMap, p, gt) -> float:
    """Squared feature distance between a point and its true correspondence."""
    f_ref, _ = bilinear_sample_many(ref_map, np.asarray(p, dtype=np.float64)[None, :])
    st = gather_stencil(tgt_map, np.asarray(gt, dtype=np.float64)[None, :])
    return float(_sq_dist_terms(st.corners, st.fu, st.fv, f_ref)[0])


def negative_hinge_loss(ref_map, tgt_map, p, neg, margin: float = 1.0) -> float:
    """Hinge keeping non-corresponding features at least ``margin`` apart."""
    d2 = match_loss(ref_map, tgt_map, p, neg)
    return max(margin - d2, 0.0)


def point_gn_system(ref_map, tgt_map, p, q) -> PointGNSystem:
    f_ref, _ = bilinear_sample_many(ref_map, np.asarray(p, dtype=np.float64)[None, :])
    st = gather_stencil(tgt_map, np.asarray(q, dtype=np.float64)[None, :])
    res, jac, hess, rhs = _gn_pieces(st.corners, st.fu, st.fv, f_ref)
    return PointGNSystem(
        residual=res[0], jacobian=jac[0], hessian=hess[0], rhs=rhs[0]
    )


def gd_step_loss(ref_map, tgt_map, p, ring, gt, config: LossConfig) -> float:
    """Hinge on the progress of one heavily damped step from the ring."""
    f_ref, _ = bilinear_sample_many(ref_map, np.asarray(p, dtype=np.float64)[None, :])
    st = gather_stencil(tgt_map, np.asarray(ring, dtype=np.float64)[None, :])
    ring_arr = np.asarray(ring, dtype=np.float64)[None, :]
    gt_arr = np.asarray(gt, dtype=np.float64)[None, :]
    return float(_gd_terms(st.corners, st.fu, st.fv, f_ref, ring_arr, gt_arr, config)[0])


def gn_step_loss(ref_map, tgt_map, p, near, gt, config: LossConfig) -> float:
    """Gaussian negative log-density of the near-sample update step."""
    f_ref, _ = bilinear_sample_many(ref_map, np.asarray(p, dtype=np.float64)[None, :])
    st = gather_stencil(tgt_map, np.asarray(near, dtype=np.float64)[None, :])
    near_arr = np.asarray(near, dtype=np.float64)[None, :]
    gt_arr = np.asarray(gt, dtype=np.float64)[None, :]
    return float(_gn_terms(st.corners, st.fu, st.fv, f_ref, near_arr, gt_arr, config)[0])


# ---------------------------------------------------------------------------
# Batch sampling and evaluation.
# ---------------------------------------------------------------------------


def sample_batch(rng, gt_correspondences, image_dims, config: LossConfig) -> CorrespondenceBatch:
    """Draw the negative/ring/near companions for each correspondence.

    ``gt_correspondences`` is (n, 4): reference u, v and target u, v per
    row. Rows whose points sit too close to the interpolation margins are
    dropped. Ring samples are rejection-sampled to honour both the radius
    band (0.8..1.2 of gd_radius) and the margins.
    """
    h, w = image_dims
    corr = np.asarray(gt_correspondences, dtype=np.float64).reshape(-1, 4)
    if corr.shape[0] < 1:
        raise LossError("need at least one ground-truth correspondence")
    r_hi = 1.2 * config.gd_radius
    if min(h, w) < 2 * (r_hi + SAMPLE_MARGIN) + 2:
        raise LossError(f"image {w}x{h} too small for ring radius {config.gd_radius}")

    lo = SAMPLE_MARGIN
    hi_u = w - 1 - SAMPLE_MARGIN
    hi_v = h - 1 - SAMPLE_MARGIN
    pad = config.gn_radius
    keep = (
        (corr[:, 0] >= lo) & (corr[:, 0] <= hi_u)
        & (corr[:, 1] >= lo) & (corr[:, 1] <= hi_v)
        & (corr[:, 2] >= lo + pad) & (corr[:, 2] <= hi_u - pad)
        & (corr[:, 3] >= lo + pad) & (corr[:, 3] <= hi_v - pad)
    )
    corr = corr[keep]
    n = corr.shape[0]
    if n == 0:
        raise LossError("no correspondence clears the sampling margins")

    seed = int(rng.integers(0, 2**31 - 1))
    local = np.random.default_rng(seed)

    neg = np.stack(
        [local.uniform(lo, hi_u, size=n), local.uniform(lo, hi_v, size=n)], axis=1
    )

    gt = corr[:, 2:4]
    ring = np.empty((n, 2))
    pending = np.arange(n)
    for _ in range(500):
        m = len(pending)
        radius = config.gd_radius * local.uniform(0.8, 1.2, size=m)
        angle = local.uniform(0.0, 2.0 * np.pi, size=m)
        cand = gt[pending] + np.stack(
            [radius * np.cos(angle), radius * np.sin(angle)], axis=1
        )
        ok = (
            (cand[:, 0] >= lo) & (cand[:, 0] <= hi_u)
            & (cand[:, 1] >= lo) & (cand[:, 1] <= hi_v)
        )
        ring[pending[ok]] = cand[ok]
        pending = pending[~ok]
        if len(pending) == 0:
            break
    else:
        raise LossError("could not place ring samples inside the margins")

    rad = config.gn_radius * np.sqrt(local.uniform(0.0, 1.0, size=n))
    ang = local.uniform(0.0, 2.0 * np.pi, size=n)
    near = gt + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)

    return CorrespondenceBatch(
        ref_uv=corr[:, 0:2], gt_uv=gt, neg_uv=neg, ring_uv=ring, near_uv=near, seed=seed
    )


def batch_terms(ref_map: FeatureMap, tgt_map: FeatureMap, batch, config) -> dict:
    """All four loss terms for every batch row, vectorized. Returns arrays."""
    f_ref, _ = bilinear_sample_many(ref_map, batch.ref_uv)
    st_gt = gather_stencil(tgt_map, batch.gt_uv)
    st_neg = gather_stencil(tgt_map, batch.neg_uv)
    st_ring = gather_stencil(tgt_map, batch.ring_uv)
    st_near = gather_stencil(tgt_map, batch.near_uv)
    return {
        "match": _sq_dist_terms(st_gt.corners, st_gt.fu, st_gt.fv, f_ref),
        "negative": np.maximum(
            config.margin - _sq_dist_terms(st_neg.corners, st_neg.fu, st_neg.fv, f_ref),
            0.0,
        ),
        "gd": _gd_terms(
            st_ring.corners, st_ring.fu, st_ring.fv, f_ref,
            batch.ring_uv, batch.gt_uv, config,
        ),
        "gn": _gn_terms(
            st_near.corners, st_near.fu, st_near.fv, f_ref,
            batch.near_uv, batch.gt_uv, config,
        ),
    }


_TERM_WEIGHTS = {
    "match": "w_match",
    "negative": "w_negative",
    "gd": "w_gd",
    "gn": "w_gn",
}


def total_loss(ref_map, tgt_map, batch, config) -> tuple[float, dict]:
    """Weighted sum of the four per-term means, with the breakdown."""
    terms = batch_terms(ref_map, tgt_map, batch, config)
    breakdown = {name: float(values.mean()) for name, values in terms.items()}
    total = sum(
        getattr(config, attr) * breakdown[name] for name, attr in _TERM_WEIGHTS.items()
    )
    breakdown["total"] = float(total)
    return float(total), breakdown


# ---------------------------------------------------------------------------
# Finite-difference training gradient.
# ---------------------------------------------------------------------------


def _touched_cells(st: Stencil):
    """(n, 4) flat cell ids of a stencil's corners, given map width."""
    iu = np.stack([st.iu0, st.iu0 + 1, st.iu0, st.iu0 + 1], axis=1)
    iv = np.stack([st.iv0, st.iv0, st.iv0 + 1, st.iv0 + 1], axis=1)
    return iv, iu


def loss_gradient_fd(
    ref_map: FeatureMap,
    params: np.ndarray,
    batch: CorrespondenceBatch,
    config: LossConfig,
    entries=None,
    step: float = FD_STEP,
    method: str = "fast",
) -> np.ndarray:
    """Central-difference gradient of total_loss w.r.t. target map cells.

    ``params`` is the float64 master copy of the learnable target map; the
    loss itself is always evaluated through the float32 FeatureMap cast,
    and both FD branches apply the bump before that cast so they measure
    the same perturbation.

    The fast method re-evaluates, per bumped cell, only the loss terms
    whose interpolation stencil contains that cell; terms elsewhere cancel
    in the central difference. The brute method rebuilds the full map for
    every entry and is the test oracle.
    """
    params = np.asarray(params, dtype=np.float64)
    h, w, d = params.shape
    grad = np.zeros_like(params)

    if method == "brute":
        if entries is None:
            raise LossError("brute differences need an explicit entry list")
        if len(entries) > 10_000:
            raise LossError("entry budget is 10000 per call")
        for (v, u, c) in entries:
            bumped = params.copy()
            bumped[v, u, c] = params[v, u, c] + step
            up, _ = total_loss(ref_map, FeatureMap(bumped), batch, config)
            bumped[v, u, c] = params[v, u, c] - step
            down, _ = total_loss(ref_map, FeatureMap(bumped), batch, config)
            grad[v, u, c] = (up - down) / (2.0 * step)
        return grad
    if method != "fast":
        raise LossError(f"unknown method {method!r}")

    tgt_map = FeatureMap(params)
    n = len(batch)
    f_ref, _ = bilinear_sample_many(ref_map, batch.ref_uv)

    term_eval = {
        "match": lambda st, corners: _sq_dist_terms(corners, st.fu, st.fv, f_ref),
        "negative": lambda st, corners: np.maximum(
            config.margin - _sq_dist_terms(corners, st.fu, st.fv, f_ref), 0.0
        ),
        "gd": lambda st, corners: _gd_terms(
            corners, st.fu, st.fv, f_ref, batch.ring_uv, batch.gt_uv, config
        ),
        "gn": lambda st, corners: _gn_terms(
            corners, st.fu, st.fv, f_ref, batch.near_uv, batch.gt_uv, config
        ),
    }
    points = {
        "match": batch.gt_uv,
        "negative": batch.neg_uv,
        "gd": batch.ring_uv,
        "gn": batch.near_uv,
    }

    if entries is not None:
        wanted = np.zeros((h, w, d), dtype=bool)
        for (v, u, c) in entries:
            wanted[v, u, c] = True

    for name, uv in points.items():
        weight = getattr(config, _TERM_WEIGHTS[name])
        if weight == 0.0:
            continue
        st = gather_stencil(tgt_map, uv)
        evaluate = term_eval[name]
        iv_all, iu_all = _touched_cells(st)
        for corner in range(4):
            iv = iv_all[:, corner]
            iu = iu_all[:, corner]
            for c in range(d):
                rows = np.arange(n)
                if entries is not None:
                    rows = rows[wanted[iv, iu, c]]
                    if len(rows) == 0:
                        continue
                base = params[iv[rows], iu[rows], c]
                corners_up = st.corners.copy()
                corners_up[rows, corner, c] = np.float32(base + step)
                corners_dn = st.corners.copy()
                corners_dn[rows, corner, c] = np.float32(base - step)
                up = evaluate(st, corners_up)[rows]
                down = evaluate(st, corners_dn)[rows]
                contrib = weight * (up - down) / (2.0 * step * n)
                np.add.at(grad[:, :, c], (iv[rows], iu[rows]), contrib)

    if entries is not None:
        grad[~wanted] = 0.0
    return grad

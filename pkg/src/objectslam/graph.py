"""Factor-graph MAP estimation.

Batch Levenberg-Marquardt on the manifold (right-perturbation retract),
warm-started from the current estimates. Linearization is vectorized per
factor type; the normal equations are solved with a sparse LU (MMD ordering,
the pose chain plus landmark arrow stays near-banded).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError
from .factors import (
    BetweenFactor,
    MixtureObservationFactor,
    ObservationFactor,
    PriorFactor,
    WeightedObservationFactor,
    between_jacobians,
    observation_jacobians,
    observation_residuals,
    pose_residuals,
    relative_pose,
)
from .geometry import Pose3, quat_mul, quat_normalize, quat_rotate, se3_exp, se3_jr_inv

_SPLU_OPTS = {"permc_spec": "MMD_AT_PLUS_A"}


@dataclass
class Values:
    poses: dict
    landmarks: dict


@dataclass
class LMConfig:
    max_iterations: int = 100
    rel_decrease_tol: float = 1e-9
    gradient_tol: float = 1e-8
    init_lambda: float = 1e-6
    lambda_scale: float = 10.0
    max_lambda: float = 1e10


@dataclass
class OptimizeReport:
    initial_error: float
    final_error: float
    iterations: int
    converged: bool
    gradient_norm: float


class FactorGraph:
    """Pose and landmark variables plus the factor list, with current estimates."""

    def __init__(self):
        self.poses: dict[int, Pose3] = {}
        self.landmarks: dict[int, np.ndarray] = {}
        self.factors: list = []
        self.weights_version = 0
        self._batch_cache = None
        self._marginal_lu = None  # (lu, batch) reusable after an accepted LM step
        self._uf_parent: dict = {}
        self._uf_anchored: set = set()
        self._num_priors = 0

    # -- construction -------------------------------------------------------

    def add_pose(self, key: int, pose: Pose3) -> None:
        if key in self.poses:
            raise ValueError(f"pose {key} already exists")
        self.poses[key] = pose
        self._marginal_lu = None

    def add_landmark(self, key: int, point: np.ndarray) -> None:
        if key in self.landmarks:
            raise ValueError(f"landmark {key} already exists")
        self.landmarks[key] = np.asarray(point, dtype=float).reshape(3).copy()
        self._marginal_lu = None

    def add_factor(self, factor) -> None:
        keys = factor.keys()
        for kind, key in keys:
            store = self.poses if kind == "x" else self.landmarks
            if key not in store:
                raise ValueError(f"factor references missing variable {kind}{key}")
        self.factors.append(factor)
        for other in keys[1:]:
            self._uf_union(keys[0], other)
        if isinstance(factor, PriorFactor):
            self._num_priors += 1
            self._uf_anchored.add(self._uf_find(keys[0]))

    def _uf_find(self, a):
        parent = self._uf_parent
        root = a
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(a, a) != a:
            parent[a], a = root, parent[a]
        return root

    def _uf_union(self, a, b) -> None:
        ra, rb = self._uf_find(a), self._uf_find(b)
        if ra == rb:
            return
        self._uf_parent[ra] = rb
        if ra in self._uf_anchored:
            self._uf_anchored.discard(ra)
            self._uf_anchored.add(rb)

    def values(self) -> Values:
        return Values(self.poses, self.landmarks)

    def error(self) -> float:
        values = self.values()
        return float(sum(f.error(values) for f in self.factors))

    def bump_weights_version(self) -> None:
        self.weights_version += 1

    def summary(self) -> dict:
        counts: dict[str, int] = {}
        for f in self.factors:
            counts[type(f).__name__] = counts.get(type(f).__name__, 0) + 1
        return {
            "num_poses": len(self.poses),
            "num_landmarks": len(self.landmarks),
            "factor_counts": counts,
            "total_error": self.error(),
        }

    # -- optimization -------------------------------------------------------

    def optimize(self, config: LMConfig | None = None) -> OptimizeReport:
        config = config or LMConfig()
        self._validate_gauge()
        batch = self._batched()
        state = batch.gather(self)
        err, r, jac = batch.linearize(state)
        grad = jac.T @ r
        gnorm = float(np.linalg.norm(grad))
        initial = err
        lam = config.init_lambda
        iterations = 0
        converged = gnorm < config.gradient_tol

        while not converged and iterations < config.max_iterations:
            jtj = (jac.T @ jac).tocsc()
            diag = np.maximum(jtj.diagonal(), 1e-12)
            stepped = False
            while lam <= config.max_lambda:
                lu = self._factorize(jtj + sp.diags(lam * diag))
                delta = lu.solve(-grad)
                candidate = batch.retract(state, delta)
                cand_err = batch.error_only(candidate)
                if cand_err <= err and np.isfinite(cand_err):
                    rel = (err - cand_err) / max(err, 1e-300)
                    state = candidate
                    err = cand_err
                    iterations += 1
                    stepped = True
                    self._marginal_lu = (lu, batch)
                    lam = max(lam * 0.1, 1e-12)
                    _, r, jac = batch.linearize(state)
                    grad = jac.T @ r
                    gnorm = float(np.linalg.norm(grad))
                    if gnorm < config.gradient_tol or rel < config.rel_decrease_tol:
                        converged = True
                    break
                lam *= config.lambda_scale
            if not stepped:
                break

        batch.scatter(self, state)
        return OptimizeReport(initial, err, iterations, converged, gnorm)

    @staticmethod
    def _factorize(matrix):
        try:
            return spla.splu(matrix.tocsc(), **_SPLU_OPTS)
        except RuntimeError as exc:
            raise NumericalError(f"sparse factorization failed: {exc}") from exc

    def _validate_gauge(self) -> None:
        """Require a prior and full connectivity to an anchored component."""
        if self._num_priors == 0:
            raise NumericalError("graph has no prior: gauge freedom")
        anchored = {self._uf_find(root) for root in self._uf_anchored}
        for key in self.poses:
            if self._uf_find(("x", key)) not in anchored:
                raise NumericalError(f"pose {key} is not connected to a prior")
        for key in self.landmarks:
            if self._uf_find(("l", key)) not in anchored:
                raise NumericalError(f"landmark {key} is not connected to a prior")

    def _batched(self) -> "_BatchedFactors":
        signature = (len(self.factors), self.weights_version)
        if self._batch_cache is None or self._batch_cache.signature != signature:
            self._batch_cache = _BatchedFactors(self, signature)
        return self._batch_cache

    # -- covariance recovery -------------------------------------------------

    def _information_factorization(self):
        batch = self._batched()
        state = batch.gather(self)
        _, _, jac = batch.linearize(state)
        return self._factorize((jac.T @ jac).tocsc()), batch

    def joint_marginal(self, pose_key: int, landmark_key: int) -> np.ndarray:
        """Exact 9x9 joint (pose, landmark) covariance from the GN information."""
        return self.joint_marginals(pose_key, [landmark_key])[landmark_key]

    def joint_marginals(self, pose_key: int, landmark_keys) -> dict[int, np.ndarray]:
        """Joint 9x9 covariances of (pose, landmark) for several landmarks at once."""
        if pose_key not in self.poses:
            raise ValueError(f"pose {pose_key} not in graph")
        for k in landmark_keys:
            if k not in self.landmarks:
                raise ValueError(f"landmark {k} not in graph")
        lu, batch = self._information_factorization()
        return _joint_blocks(lu, batch, pose_key, landmark_keys)

    def pose_marginal(self, pose_key: int) -> np.ndarray:
        if pose_key not in self.poses:
            raise ValueError(f"pose {pose_key} not in graph")
        lu, batch = self._information_factorization()
        cols = batch.pose_columns(pose_key)
        rhs = np.zeros((batch.num_cols, 6))
        rhs[cols, np.arange(6)] = 1.0
        sol = lu.solve(rhs)
        block = sol[cols, :]
        return 0.5 * (block + block.T)

    def fast_joint_marginals(self, pose_key: int, landmark_keys) -> dict[int, np.ndarray]:
        """Like joint_marginals but reusing the last accepted LM factorization.

        The reused system is damped by the final trust-region lambda and is one
        linearization behind the final state: adequate for association gating,
        not for reporting. Falls back to the exact path when unavailable.
        """
        if self._marginal_lu is None:
            return self.joint_marginals(pose_key, landmark_keys)
        lu, batch = self._marginal_lu
        return _joint_blocks(lu, batch, pose_key, landmark_keys)


def _joint_blocks(lu, batch, pose_key, landmark_keys) -> dict[int, np.ndarray]:
    pose_cols = batch.pose_columns(pose_key)
    lm_cols = [batch.landmark_columns(k) for k in landmark_keys]
    cols = np.concatenate([pose_cols] + lm_cols) if lm_cols else pose_cols
    rhs = np.zeros((batch.num_cols, len(cols)))
    rhs[cols, np.arange(len(cols))] = 1.0
    sol = lu.solve(rhs)
    out = {}
    for i, key in enumerate(landmark_keys):
        idx = np.concatenate([pose_cols, lm_cols[i]])
        sel = np.concatenate([np.arange(6), 6 + 3 * i + np.arange(3)])
        block = sol[np.ix_(idx, sel)]
        out[key] = 0.5 * (block + block.T)
    return out


class _BatchedFactors:
    """Struct-of-arrays view of the factor list for vectorized linearization."""

    def __init__(self, graph: FactorGraph, signature):
        self.signature = signature
        self.pose_ids = sorted(graph.poses)
        self.lm_ids = sorted(graph.landmarks)
        self.pose_slot = {k: i for i, k in enumerate(self.pose_ids)}
        self.lm_slot = {k: i for i, k in enumerate(self.lm_ids)}
        self.num_poses = len(self.pose_ids)
        self.num_lms = len(self.lm_ids)
        self.num_cols = 6 * self.num_poses + 3 * self.num_lms

        priors, betweens, observations, mixtures = [], [], [], []
        for f in graph.factors:
            if isinstance(f, PriorFactor):
                priors.append(f)
            elif isinstance(f, BetweenFactor):
                betweens.append(f)
            elif isinstance(f, MixtureObservationFactor):
                mixtures.append(f)
            elif isinstance(f, ObservationFactor):  # includes weighted
                observations.append(f)
            else:
                raise TypeError(f"unsupported factor type {type(f).__name__}")

        self.pr_slot = np.array([self.pose_slot[f.pose_key] for f in priors], dtype=int)
        self.pr_q = np.array([f.mean.rotation for f in priors]).reshape(-1, 4)
        self.pr_t = np.array([f.mean.translation for f in priors]).reshape(-1, 3)
        self.pr_w = np.array([f.sqrt_info for f in priors]).reshape(-1, 6, 6)

        self.bt_i = np.array([self.pose_slot[f.key_i] for f in betweens], dtype=int)
        self.bt_j = np.array([self.pose_slot[f.key_j] for f in betweens], dtype=int)
        self.bt_q = np.array([f.relative.rotation for f in betweens]).reshape(-1, 4)
        self.bt_t = np.array([f.relative.translation for f in betweens]).reshape(-1, 3)
        self.bt_w = np.array([f.sqrt_info for f in betweens]).reshape(-1, 6, 6)

        self.ob_p = np.array([self.pose_slot[f.pose_key] for f in observations], dtype=int)
        self.ob_l = np.array([self.lm_slot[f.landmark_key] for f in observations], dtype=int)
        self.ob_z = np.array([f.point for f in observations]).reshape(-1, 3)
        self.ob_w = np.array([f.sqrt_info for f in observations]).reshape(-1, 3, 3)
        self.ob_s = np.sqrt(np.array(
            [getattr(f, "weight", 1.0) for f in observations], dtype=float))

        comp_p, comp_l, comp_z, comp_w, comp_nlw, sizes = [], [], [], [], [], []
        for f in mixtures:
            for idx, key in enumerate(f.landmark_keys):
                comp_p.append(self.pose_slot[f.pose_key])
                comp_l.append(self.lm_slot[key])
                comp_z.append(f.point)
                comp_w.append(f.sqrt_info)
                comp_nlw.append(f.neg_log_weights[idx])
            sizes.append(len(f.landmark_keys))
        self.mx_p = np.array(comp_p, dtype=int)
        self.mx_l = np.array(comp_l, dtype=int)
        self.mx_z = np.array(comp_z, dtype=float).reshape(-1, 3)
        self.mx_w = np.array(comp_w, dtype=float).reshape(-1, 3, 3)
        self.mx_nlw = np.array(comp_nlw, dtype=float)
        self.mx_sizes = np.array(sizes, dtype=int)
        self.mx_offsets = np.concatenate([[0], np.cumsum(self.mx_sizes)])[:-1].astype(int)
        self.num_mixtures = len(sizes)

        self.num_rows = (6 * len(self.pr_slot) + 6 * len(self.bt_i)
                         + 3 * len(self.ob_p) + 3 * self.num_mixtures)

    def pose_columns(self, pose_key) -> np.ndarray:
        return 6 * self.pose_slot[pose_key] + np.arange(6)

    def landmark_columns(self, lm_key) -> np.ndarray:
        return 6 * self.num_poses + 3 * self.lm_slot[lm_key] + np.arange(3)

    # -- state handling ------------------------------------------------------

    def gather(self, graph: FactorGraph):
        q = np.array([graph.poses[k].rotation for k in self.pose_ids]).reshape(-1, 4)
        t = np.array([graph.poses[k].translation for k in self.pose_ids]).reshape(-1, 3)
        lms = (np.array([graph.landmarks[k] for k in self.lm_ids]).reshape(-1, 3)
               if self.lm_ids else np.zeros((0, 3)))
        return q, t, lms

    def scatter(self, graph: FactorGraph, state) -> None:
        q, t, lms = state
        for i, k in enumerate(self.pose_ids):
            graph.poses[k] = Pose3._trusted(q[i], t[i])  # retract normalized q
        for i, k in enumerate(self.lm_ids):
            graph.landmarks[k] = lms[i].copy()

    def retract(self, state, delta: np.ndarray):
        q, t, lms = state
        pose_delta = delta[:6 * self.num_poses].reshape(-1, 6)
        lm_delta = delta[6 * self.num_poses:].reshape(-1, 3)
        dq, dt = se3_exp(pose_delta)
        new_q = quat_normalize(quat_mul(q, dq))
        new_t = t + quat_rotate(q, dt)
        return new_q, new_t, lms + lm_delta

    # -- residuals -----------------------------------------------------------

    def _prior_residuals(self, state):
        q, t, _ = state
        r = pose_residuals(self.pr_q, self.pr_t, q[self.pr_slot], t[self.pr_slot])
        return np.einsum("nij,nj->ni", self.pr_w, r), r

    def _between_residuals(self, state):
        q, t, _ = state
        q_ij, t_ij = relative_pose(q[self.bt_i], t[self.bt_i], q[self.bt_j], t[self.bt_j])
        r = pose_residuals(self.bt_q, self.bt_t, q_ij, t_ij)
        return np.einsum("nij,nj->ni", self.bt_w, r), r, q_ij, t_ij

    def _observation_residuals(self, state):
        q, t, lms = state
        r, h = observation_residuals(q[self.ob_p], t[self.ob_p], lms[self.ob_l], self.ob_z)
        rw = np.einsum("nij,nj->ni", self.ob_w, r) * self.ob_s[:, None]
        return rw, h

    def _mixture_components(self, state):
        q, t, lms = state
        r, h = observation_residuals(q[self.mx_p], t[self.mx_p], lms[self.mx_l], self.mx_z)
        rw = np.einsum("nij,nj->ni", self.mx_w, r)
        costs = 0.5 * np.sum(rw * rw, axis=1) + self.mx_nlw
        return rw, h, costs

    def _mixture_active(self, costs):
        if self.num_mixtures == 0:
            return np.zeros(0, dtype=int), 0.0
        gmin = np.minimum.reduceat(costs, self.mx_offsets)
        expanded = np.repeat(gmin, self.mx_sizes)
        candidates = np.flatnonzero(costs == expanded)
        group = np.repeat(np.arange(self.num_mixtures), self.mx_sizes)[candidates]
        _, first = np.unique(group, return_index=True)
        active = candidates[first]
        return active, float(gmin.sum())

    def error_only(self, state) -> float:
        total = 0.0
        if len(self.pr_slot):
            rw, _ = self._prior_residuals(state)
            total += 0.5 * float(np.sum(rw * rw))
        if len(self.bt_i):
            rw, _, _, _ = self._between_residuals(state)
            total += 0.5 * float(np.sum(rw * rw))
        if len(self.ob_p):
            rw, _ = self._observation_residuals(state)
            total += 0.5 * float(np.sum(rw * rw))
        if self.num_mixtures:
            _, _, costs = self._mixture_components(state)
            _, mix_total = self._mixture_active(costs)
            total += mix_total
        return total

    def linearize(self, state):
        """Total error, stacked whitened residual, and the sparse Jacobian."""
        rows_parts, cols_parts, data_parts, res_parts = [], [], [], []
        total = 0.0
        row_base = 0
        q, t, lms = state

        if len(self.pr_slot):
            rw, r = self._prior_residuals(state)
            total += 0.5 * float(np.sum(rw * rw))
            jac = self.pr_w @ se3_jr_inv(r)
            row_base = self._append_blocks(
                rows_parts, cols_parts, data_parts, row_base,
                [(jac, 6 * self.pr_slot, 6)])
            res_parts.append(rw.ravel())

        if len(self.bt_i):
            rw, r, q_ij, t_ij = self._between_residuals(state)
            total += 0.5 * float(np.sum(rw * rw))
            j_i, j_j = between_jacobians(r, q_ij, t_ij)
            row_base = self._append_blocks(
                rows_parts, cols_parts, data_parts, row_base,
                [(self.bt_w @ j_i, 6 * self.bt_i, 6), (self.bt_w @ j_j, 6 * self.bt_j, 6)])
            res_parts.append(rw.ravel())

        if len(self.ob_p):
            rw, h = self._observation_residuals(state)
            total += 0.5 * float(np.sum(rw * rw))
            j_pose, j_lm = observation_jacobians(q[self.ob_p], h)
            scale = self.ob_s[:, None, None]
            row_base = self._append_blocks(
                rows_parts, cols_parts, data_parts, row_base,
                [(scale * (self.ob_w @ j_pose), 6 * self.ob_p, 6),
                 (scale * (self.ob_w @ j_lm), 6 * self.num_poses + 3 * self.ob_l, 3)])
            res_parts.append(rw.ravel())

        if self.num_mixtures:
            rw, h, costs = self._mixture_components(state)
            active, mix_total = self._mixture_active(costs)
            total += mix_total
            qa = q[self.mx_p[active]]
            j_pose, j_lm = observation_jacobians(qa, h[active])
            w = self.mx_w[active]
            row_base = self._append_blocks(
                rows_parts, cols_parts, data_parts, row_base,
                [(w @ j_pose, 6 * self.mx_p[active], 6),
                 (w @ j_lm, 6 * self.num_poses + 3 * self.mx_l[active], 3)])
            res_parts.append(rw[active].ravel())

        residual = np.concatenate(res_parts) if res_parts else np.zeros(0)
        jac = sp.coo_matrix(
            (np.concatenate(data_parts) if data_parts else np.zeros(0),
             (np.concatenate(rows_parts) if rows_parts else np.zeros(0, dtype=int),
              np.concatenate(cols_parts) if cols_parts else np.zeros(0, dtype=int))),
            shape=(row_base, self.num_cols)).tocsr()
        return total, residual, jac

    @staticmethod
    def _append_blocks(rows_parts, cols_parts, data_parts, row_base, blocks):
        """Append (n, d, w) Jacobian blocks; all blocks in one call share rows."""
        height = blocks[0][0].shape[1]
        n = blocks[0][0].shape[0]
        rows = row_base + (np.arange(n)[:, None, None] * height
                           + np.arange(height)[None, :, None])
        for jac, col_base, width in blocks:
            cols = col_base[:, None, None] + np.arange(width)[None, None, :]
            rows_b = np.broadcast_to(rows, jac.shape)
            cols_b = np.broadcast_to(cols, jac.shape)
            rows_parts.append(rows_b.ravel())
            cols_parts.append(cols_b.ravel())
            data_parts.append(jac.ravel())
        return row_base + n * height


def em_reweight(graph: FactorGraph, iterations: int = 1,
                lm_config: LMConfig | None = None) -> OptimizeReport | None:
    """Alternate E (recompute association weights) and M (optimize) steps.

    Weights of each weighted-observation group are set proportional to the
    marginal measurement likelihood at the current estimates, using the
    innovation covariance frozen at insertion time (falls back to the
    measurement covariance when absent).
    """
    weighted = [f for f in graph.factors if isinstance(f, WeightedObservationFactor)]
    if not weighted:
        return graph.optimize(lm_config)
    # stable-sort by group so each group is one contiguous segment
    weighted.sort(key=lambda f: f.group_id if f.group_id is not None else id(f))
    group_keys = [f.group_id if f.group_id is not None else id(f) for f in weighted]
    offsets = [0] + [i for i in range(1, len(weighted))
                     if group_keys[i] != group_keys[i - 1]] + [len(weighted)]
    offsets = np.array(offsets)

    z = np.array([f.point for f in weighted])
    covs = np.array([f.innovation_cov if f.innovation_cov is not None else f.gamma
                     for f in weighted])
    chol = np.linalg.cholesky(covs)
    log_norm = -np.log(np.einsum("mkk->mk", chol)).sum(axis=1)
    pose_keys = [f.pose_key for f in weighted]
    lm_keys = [f.landmark_key for f in weighted]

    report = None
    for _ in range(iterations):
        q = np.array([graph.poses[k].rotation for k in pose_keys])
        t = np.array([graph.poses[k].translation for k in pose_keys])
        lms = np.array([graph.landmarks[k] for k in lm_keys])
        r, _ = observation_residuals(q, t, lms, z)
        y = np.linalg.solve(chol, r[..., None])[..., 0]
        logs = -0.5 * np.einsum("mk,mk->m", y, y) + log_norm
        for a, b in zip(offsets[:-1], offsets[1:]):
            w = np.exp(logs[a:b] - logs[a:b].max())
            w = np.maximum(w / w.sum(), 1e-12)
            w /= w.sum()
            for f, wi in zip(weighted[a:b], w):
                f.weight = float(wi)
        graph.bump_weights_version()
        report = graph.optimize(lm_config)
    return report

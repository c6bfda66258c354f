"""
Per-bone 2D Gaussian mixture skinning fields over the UV chart.

Each bone j carries a UV anchor zeta_j and K components (pi_k, mu_k, Sigma_k);
its unnormalized weight at vertex v is sum_k pi_k N(F(v) | mu_k + zeta_j, Sigma_k).
pi is kept as softmax logits and Sigma as a Cholesky factor with log diagonal,
so any parameter value realizes a valid mixture.
"""

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np
import torch
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from loguru import logger

from consts import COVERAGE_EPS, DEFAULT_SIGMA
from errors import AsmError, UncoveredVertexError
from file_utils import PathLike, read_json
from mesh_core import Mesh, as_tensor, to_numpy
from skeleton_rig import Skeleton, bone_uv_projection

_LOG_2PI = math.log(2.0 * math.pi)


class GmmBoneParams(NamedTuple):
    """One bone's mixture: zeta (2,), log_pi (K,), mu (K, 2), chol (K, 3) as (log l11, l21, log l22)."""

    zeta: torch.Tensor
    log_pi: torch.Tensor
    mu: torch.Tensor
    chol: torch.Tensor


@dataclass
class GmmParams:
    """Mixtures of all bones stacked along the first axis."""

    zeta: torch.Tensor
    log_pi: torch.Tensor
    mu: torch.Tensor
    chol: torch.Tensor

    @property
    def bone_count(self) -> int:
        return self.zeta.shape[0]

    @property
    def K(self) -> int:
        return self.log_pi.shape[1]

    def bone(self, j: int) -> GmmBoneParams:
        return GmmBoneParams(self.zeta[j], self.log_pi[j], self.mu[j], self.chol[j])

    @classmethod
    def from_bones(cls, bones) -> "GmmParams":
        bones = list(bones)
        return cls(*(torch.stack([as_tensor(getattr(b, name)) for b in bones]) for name in GmmBoneParams._fields))

    def clone(self) -> "GmmParams":
        return GmmParams(self.zeta.clone(), self.log_pi.clone(), self.mu.clone(), self.chol.clone())

    def pi(self) -> torch.Tensor:
        return torch.softmax(self.log_pi, dim=-1)

    def sigma(self) -> torch.Tensor:
        return realize_sigma(self.chol)


class WeightField(NamedTuple):
    weights: torch.Tensor


def realize_sigma(chol) -> torch.Tensor:
    """Sigma = L L^T with L = [[exp(a), 0], [b, exp(c)]]."""
    chol = as_tensor(chol)
    l11, l21, l22 = torch.exp(chol[..., 0]), chol[..., 1], torch.exp(chol[..., 2])
    top = torch.stack([l11 * l11, l11 * l21], dim=-1)
    bottom = torch.stack([l11 * l21, l21 * l21 + l22 * l22], dim=-1)
    return torch.stack([top, bottom], dim=-2)


def chol_from_sigma(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    l11 = np.sqrt(sigma[..., 0, 0])
    l21 = sigma[..., 1, 0] / l11
    l22 = np.sqrt(np.maximum(sigma[..., 1, 1] - l21 * l21, 1e-300))
    return np.stack([np.log(l11), l21, np.log(l22)], axis=-1)


def gaussian2d(u, mean, sigma) -> torch.Tensor:
    """Bivariate normal density, batched over leading axes."""
    u, mean, sigma = as_tensor(u), as_tensor(mean), as_tensor(sigma)
    det = sigma[..., 0, 0] * sigma[..., 1, 1] - sigma[..., 0, 1] * sigma[..., 1, 0]
    if bool(((det <= 0) | (sigma[..., 0, 0] <= 0)).any()):
        raise AsmError("gaussian2d: covariance is not positive definite")
    d = u - mean
    quad = (
        sigma[..., 1, 1] * d[..., 0] ** 2
        - (sigma[..., 0, 1] + sigma[..., 1, 0]) * d[..., 0] * d[..., 1]
        + sigma[..., 0, 0] * d[..., 1] ** 2
    ) / det
    return torch.exp(-0.5 * quad) / (2.0 * math.pi * torch.sqrt(det))


def log_component_density(uv, zeta, mu, chol) -> torch.Tensor:
    """
    log N(uv | mu + zeta, L L^T) through the triangular solve of L.

    Args:
        uv: (V, 2) evaluation points.
        zeta: (J, 2), mu: (J, K, 2), chol: (J, K, 3).

    Returns:
        (V, J, K) log densities.
    """
    uv = as_tensor(uv)
    d = uv[:, None, None, :] - zeta[None, :, None, :] - mu[None]
    log_l11, l21, log_l22 = chol[..., 0], chol[..., 1], chol[..., 2]
    y1 = d[..., 0] / torch.exp(log_l11)
    y2 = (d[..., 1] - l21 * y1) / torch.exp(log_l22)
    return -0.5 * (y1 * y1 + y2 * y2) - _LOG_2PI - log_l11 - log_l22


def log_unnormalized_weights(mesh: Mesh, params: GmmParams) -> torch.Tensor:
    """(V, J) log of sum_k pi_k N(F(v) | mu_k + zeta_j, Sigma_k)."""
    log_pi = torch.log_softmax(params.log_pi, dim=-1)
    log_n = log_component_density(mesh.uv, params.zeta, params.mu, params.chol)
    return torch.logsumexp(log_pi[None] + log_n, dim=-1)


def unnormalized_weights(mesh: Mesh, params: GmmParams) -> torch.Tensor:
    return torch.exp(log_unnormalized_weights(mesh, params))


def bone_weight(mesh: Mesh, params: GmmBoneParams, i: int) -> torch.Tensor:
    single = GmmParams(*(as_tensor(x)[None] for x in params))
    uv = mesh.uv[i : i + 1]
    log_pi = torch.log_softmax(single.log_pi, dim=-1)
    log_n = log_component_density(uv, single.zeta, single.mu, single.chol)
    return torch.exp(torch.logsumexp(log_pi[None] + log_n, dim=-1))[0, 0]


def normalized_weights(mesh: Mesh, params: GmmParams, eps: float = COVERAGE_EPS) -> WeightField:
    """
    W^g(v, j) = W(v, j) / sum_i W(v, i), evaluated in log space.

    Raises:
        UncoveredVertexError: the total density at some vertex is below eps.
    """
    log_w = log_unnormalized_weights(mesh, params)
    log_total = torch.logsumexp(log_w, dim=1)
    uncovered = np.flatnonzero(to_numpy(log_total) < math.log(eps))
    if len(uncovered):
        vertex = int(uncovered[0])
        raise UncoveredVertexError(vertex, math.exp(float(log_total[vertex])))
    return WeightField(torch.softmax(log_w, dim=1))


def _isotropic_sigma(zeta: np.ndarray) -> float:
    if len(zeta) < 2:
        return DEFAULT_SIGMA
    d = np.linalg.norm(zeta[:, None] - zeta[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    median = float(np.median(d.min(1)))
    return 0.5 * median if median > 0 else DEFAULT_SIGMA


def init_isotropic(mesh: Mesh, skeleton: Skeleton, K: int) -> GmmParams:
    """
    zeta_j at the proxy vertex UV, K identical components centred on zeta_j with
    sigma = half the median nearest-neighbour distance between bone anchors.
    """
    if K < 1:
        raise AsmError(f"mixture size K must be at least 1, got {K}")
    zeta = bone_uv_projection(mesh, skeleton)
    sigma = _isotropic_sigma(zeta)
    J = skeleton.bone_count
    chol = np.zeros((J, K, 3))
    chol[..., 0] = chol[..., 2] = math.log(sigma)
    logger.debug(f"Isotropic GMM init: J={J}, K={K}, sigma={sigma:.4f}")
    return GmmParams(torch.as_tensor(zeta), torch.zeros(J, K, dtype=torch.float64), torch.zeros(J, K, 2, dtype=torch.float64), torch.as_tensor(chol))


def init_random(mesh: Mesh, skeleton: Skeleton, K: int, rng: np.random.Generator) -> GmmParams:
    """Random mixtures around the proxy anchors (the ablation baseline); coverage is not guaranteed."""
    zeta = bone_uv_projection(mesh, skeleton)
    J = skeleton.bone_count
    log_sigma = rng.uniform(math.log(0.01), math.log(0.1), size=(J, K, 2))
    chol = np.stack([log_sigma[..., 0], rng.normal(0.0, 0.02, size=(J, K)), log_sigma[..., 1]], axis=-1)
    return GmmParams(
        torch.as_tensor(zeta),
        torch.as_tensor(rng.normal(0.0, 1.0, size=(J, K))),
        torch.as_tensor(rng.normal(0.0, 0.05, size=(J, K, 2))),
        torch.as_tensor(chol),
    )


class GmmFit(NamedTuple):
    params: GmmBoneParams
    score: float
    converged: bool
    iterations: int
    log_likelihood: float


def _log_normal_np(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """(N, K) log densities of points x under K full-covariance Gaussians."""
    return np.stack([multivariate_normal.logpdf(x, mean=m, cov=c, allow_singular=True) for m, c in zip(mean, cov)], axis=1)


def fit_gmm_to_weightmap(
    mesh: Mesh,
    target,
    K: int,
    max_iters: int = 200,
    tol: float = 1e-10,
    zeta: Optional[np.ndarray] = None,
    reg: float = 1e-10,
) -> GmmFit:
    """
    Weighted expectation-maximization over the vertex UVs, each vertex weighted
    by its target value. Components start spread along the principal axis of
    the weighted point cloud, so the fit is deterministic.

    Returns:
        GmmFit with the best parameters seen, the cosine similarity between the
        fitted and target fields, and whether the likelihood converged.
    """
    target = to_numpy(target).reshape(-1)
    if target.shape[0] != mesh.vertex_count:
        raise AsmError(f"weight map has {target.shape[0]} values for {mesh.vertex_count} vertices")
    if np.any(target < 0) or not np.any(target > 0):
        raise AsmError("weight map must be non-negative and not all zero")

    x = mesh.uv
    w = target / target.sum()
    mean0 = w @ x
    centred = x - mean0
    cov0 = (w[:, None] * centred).T @ centred + reg * np.eye(2)
    evals, evecs = np.linalg.eigh(cov0)
    spread = np.sqrt(max(evals[-1], 0.0)) * evecs[:, -1]
    offsets = np.linspace(-1.0, 1.0, K) if K > 1 else np.zeros(1)
    means = mean0 + offsets[:, None] * spread
    covs = np.repeat((cov0 / K + reg * np.eye(2))[None], K, axis=0)
    weights = np.full(K, 1.0 / K)

    best = (-np.inf, weights, means, covs)
    previous = -np.inf
    converged = False
    iteration = 0
    for iteration in range(1, max_iters + 1):
        log_joint = np.log(np.maximum(weights, 1e-300))[None] + _log_normal_np(x, means, covs)
        log_mix = logsumexp(log_joint, axis=1)
        likelihood = float(w @ log_mix)
        if likelihood > best[0]:
            best = (likelihood, weights, means, covs)
        if abs(likelihood - previous) <= tol * max(1.0, abs(likelihood)):
            converged = True
            break
        previous = likelihood

        resp = np.exp(log_joint - log_mix[:, None]) * w[:, None]
        mass = np.maximum(resp.sum(0), 1e-300)
        weights = mass / mass.sum()
        means = (resp.T @ x) / mass[:, None]
        d = x[:, None, :] - means[None]
        covs = np.einsum("nk,nki,nkj->kij", resp, d, d) / mass[:, None, None] + reg * np.eye(2)

    if not converged:
        logger.warning(f"GMM fit did not converge within {max_iters} iterations; keeping the best parameters")
    likelihood, weights, means, covs = best
    anchor = mean0 if zeta is None else np.asarray(zeta, dtype=np.float64)
    params = GmmBoneParams(
        torch.as_tensor(anchor.copy()),
        torch.as_tensor(np.log(np.maximum(weights, 1e-300))),
        torch.as_tensor(means - anchor),
        torch.as_tensor(chol_from_sigma(covs)),
    )
    fitted = np.exp(logsumexp(np.log(np.maximum(weights, 1e-300))[None] + _log_normal_np(x, means, covs), 1))
    score = float(fitted @ target / (np.linalg.norm(fitted) * np.linalg.norm(target)))
    logger.info(f"GMM fit: K={K}, iterations={iteration}, converged={converged}, cosine={score:.4f}")
    return GmmFit(params, score, converged, iteration, likelihood)


def load_weight_map(path: PathLike, mesh: Mesh, skeleton: Skeleton) -> Dict[int, np.ndarray]:
    """Reads `{bone_name: [per-vertex weight, ...]}` and checks names and lengths."""
    raw = read_json(path)
    result = {}
    for name, values in raw.items():
        if name not in skeleton.names:
            raise AsmError(f"{path}: unknown bone '{name}' in weight map")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (mesh.vertex_count,):
            raise AsmError(f"{path}: bone '{name}' has {values.size} weights for {mesh.vertex_count} vertices")
        result[skeleton.index(name)] = values
    logger.info(f"Loaded weight map for {len(result)} bones from {path}")
    return result


def init_from_weight_map(mesh: Mesh, skeleton: Skeleton, weight_map: Dict[int, np.ndarray], K: int) -> GmmParams:
    """Fits every mapped bone's mixture to its painted weights; the rest keep the isotropic start."""
    params = init_isotropic(mesh, skeleton, K)
    bones = [params.bone(j) for j in range(skeleton.bone_count)]
    for j, target in sorted(weight_map.items()):
        fit = fit_gmm_to_weightmap(mesh, target, K, zeta=to_numpy(params.zeta[j]))
        bones[j] = fit.params
    return GmmParams.from_bones(bones)


def bake_weight_texture(mesh: Mesh, values, resolution: int) -> np.ndarray:
    """
    Interpolates a per-vertex field into a resolution x resolution UV texture;
    texel (r, c) samples ((c + 0.5) / R, (r + 0.5) / R). Texels off the chart are 0.
    """
    values = to_numpy(values)
    centers = (np.arange(resolution) + 0.5) / resolution
    cu, cv = np.meshgrid(centers, centers)
    points = np.stack([cu.ravel(), cv.ravel()], axis=1)
    faces, bary = mesh.uv_grid.locate(points)
    texture = np.zeros(len(points))
    hit = faces >= 0
    corners = values[mesh.faces[faces[hit]]]
    texture[hit] = (bary[hit] * corners).sum(1)
    return texture.reshape(resolution, resolution)

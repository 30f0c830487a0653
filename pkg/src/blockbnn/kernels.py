"""Kernels realized by random-feature maps, their limits, and diagnostics.

The empirical kernel of a random-feature map is the inner product of its
features; as the feature count r grows it concentrates around a fixed
expectation kernel (the arc-cosine kernel for ReLU features). This module
provides the closed forms, a quadrature route for the bounded activations,
concentration-rate experiments, and the numerical check that the random
feature and inducing-point posterior parameterizations agree.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import ACTIVATIONS, as_matrix, inverse_sqrt_spd, sqrt_spd
from .rngs import stream

KERNEL_KINDS = ("arccos1", "rbf", "linear", "empirical_rf")


def arc_cosine_closed_form(a, b) -> float:
    """First-order arc-cosine kernel: E[relu(a.w) relu(b.w)] for w ~ N(0, I).

    Equals |a||b| (sin t + (pi - t) cos t) / (2 pi) with t the angle between
    a and b. The 1/(2 pi) constant is pinned by a Monte Carlo oracle in the
    test suite (t = 0 on unit vectors gives exactly 1/2, t = pi/2 gives
    1/(2 pi)).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("arc-cosine kernel is undefined for zero-norm inputs")
    ct = np.clip(a @ b / (na * nb), -1.0, 1.0)
    theta = np.arccos(ct)
    return float(na * nb / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * np.cos(theta)))


def arc_cosine_gram(xa, xb) -> np.ndarray:
    """Vectorized arc-cosine kernel between the rows of two matrices."""
    xa, xb = as_matrix(xa), as_matrix(xb)
    na = np.linalg.norm(xa, axis=1)
    nb = np.linalg.norm(xb, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("arc-cosine kernel is undefined for zero-norm inputs")
    ct = np.clip((xa @ xb.T) / np.outer(na, nb), -1.0, 1.0)
    theta = np.arccos(ct)
    return np.outer(na, nb) / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * np.cos(theta))


def rbf_gram_np(xa, xb, lengthscale: float) -> np.ndarray:
    xa, xb = as_matrix(xa), as_matrix(xb)
    sq = ((xa ** 2).sum(axis=1, keepdims=True)
          + (xb ** 2).sum(axis=1, keepdims=True).T
          - 2.0 * xa @ xb.T)
    return np.exp(-0.5 * np.maximum(sq, 0.0) / float(lengthscale) ** 2)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """A positive-definite kernel usable by inducing-point feature maps.

    `empirical_rf` wraps a concrete random-feature block, so its Gram matrix
    is exactly the inner product of that block's features.
    """

    kind: str = "rbf"
    lengthscale: float | None = 1.0
    block: object = None  # RandomFeatureBlock for kind == "empirical_rf"

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; known: {KERNEL_KINDS}")
        if self.kind == "empirical_rf" and self.block is None:
            raise ValueError("empirical_rf kernel needs a random-feature block")

    def gram(self, xa, xb) -> np.ndarray:
        if self.kind == "rbf":
            return rbf_gram_np(xa, xb, self.lengthscale)
        if self.kind == "linear":
            return as_matrix(xa) @ as_matrix(xb).T
        if self.kind == "arccos1":
            return arc_cosine_gram(xa, xb)
        fa = self.block.feature_matrix(as_matrix(xa))
        fb = self.block.feature_matrix(as_matrix(xb))
        return fa @ fb.T


def empirical_kernel(block, a, b) -> float:
    """(1/r) sum_i sigma_K(a.w_i) sigma_K(b.w_i) for the block's fixed w_i."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != block.in_width or b.size != block.in_width:
        raise ValueError(
            f"empirical_kernel: inputs of dim {a.size}/{b.size} do not match "
            f"block input width {block.in_width}")
    fn = ACTIVATIONS[block.activation][0]
    za = block.weight @ a
    zb = block.weight @ b
    if block.offset is not None:
        za = za + block.offset
        zb = zb + block.offset
    return float(np.mean(fn(za) * fn(zb)))


# ---------------------------------------------------------------------------
# Expectation kernel: closed form where available, else 2-D Gauss-Hermite
# quadrature on the bivariate projection (a.w, b.w).
# ---------------------------------------------------------------------------

def _pair_chol(a, b, scale: float) -> np.ndarray:
    """Cholesky factor of Cov[(a.w, b.w)] for w ~ scale * N(0, I), degeneracy-safe."""
    g00 = float(a @ a) * scale ** 2
    g11 = float(b @ b) * scale ** 2
    g01 = float(a @ b) * scale ** 2
    l00 = np.sqrt(g00)
    l10 = g01 / l00
    l11 = np.sqrt(max(g11 - l10 ** 2, 0.0))
    return np.array([[l00, 0.0], [l10, l11]])


def expected_kernel(activation: str, a, b, scale: float = 1.0,
                    quad_points: int = 160) -> float:
    """E_w[sigma_K(a.w) sigma_K(b.w)] for w ~ scale * N(0, I).

    ReLU and identity have closed forms; the bounded activations are
    integrated with tensorized Gauss-Hermite quadrature, which only needs
    the 2-D projection of w onto span(a, b).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if activation == "relu":
        return scale ** 2 * arc_cosine_closed_form(a, b)
    if activation == "identity":
        return float(scale ** 2 * (a @ b))
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    fn = ACTIVATIONS[activation][0]
    chol = _pair_chol(a, b, scale)
    nodes, weights = np.polynomial.hermite_e.hermegauss(quad_points)
    z1, z2 = np.meshgrid(nodes, nodes, indexing="ij")
    u1 = chol[0, 0] * z1
    u2 = chol[1, 0] * z1 + chol[1, 1] * z2
    ww = np.outer(weights, weights) / (2.0 * np.pi)
    return float((fn(u1) * fn(u2) * ww).sum())


# ---------------------------------------------------------------------------
# Concentration experiment: sup |empirical - expectation| over sampled pairs
# as the feature count grows; the log-log slope should sit near -1/2.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationRow:
    r: int
    seed: int
    sup_error: float


COLLINEARITY_LIMIT = 1.0 - 1e-6


def sample_noncollinear_pairs(dim: int, n_pairs: int, rng: np.random.Generator,
                              limit: float = COLLINEARITY_LIMIT) -> np.ndarray:
    """Pairs of points in the unit ball with |cos(angle)| below the limit."""
    pairs = np.empty((n_pairs, 2, dim))
    got = 0
    while got < n_pairs:
        x = rng.standard_normal((2, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        x *= rng.uniform(0.2, 1.0, size=(2, 1)) ** (1.0 / dim)
        cos = abs(float(x[0] @ x[1]) /
                  (np.linalg.norm(x[0]) * np.linalg.norm(x[1])))
        if cos <= limit:
            pairs[got] = x
            got += 1
    return pairs


def concentration_experiment(activation: str, dim: int, r_grid, n_pairs: int = 50,
                             seeds=range(5), scale: float = 1.0,
                             pair_seed: int = 2024) -> list[ConcentrationRow]:
    """Measure sup-over-pairs |K_hat - K| for each feature count and seed.

    The same non-collinear pairs are reused across the whole grid so the
    decay in r is the only moving part. Deterministic given its arguments.
    """
    r_grid = sorted(int(r) for r in r_grid)
    if any(r < 1 for r in r_grid):
        raise ValueError("feature counts must be positive")
    pairs = sample_noncollinear_pairs(dim, n_pairs, stream(pair_seed, "pairs"))
    expected = np.array([expected_kernel(activation, a, b, scale=scale)
                         for a, b in pairs])
    fn = ACTIVATIONS[activation][0]
    rows = []
    r_max = r_grid[-1]
    flat = pairs.reshape(-1, dim)  # 2 n_pairs rows
    for seed in seeds:
        w = scale * stream(pair_seed, "w", int(seed)).standard_normal((r_max, dim))
        feats = fn(flat @ w.T)  # (2 n_pairs, r_max)
        fa, fb = feats[0::2], feats[1::2]
        prod = fa * fb
        csum = np.cumsum(prod, axis=1)
        for r in r_grid:
            emp = csum[:, r - 1] / r
            rows.append(ConcentrationRow(r=r, seed=int(seed),
                                         sup_error=float(np.abs(emp - expected).max())))
    return rows


def fit_log_slope(rows: list[ConcentrationRow]) -> float:
    """Least-squares slope of log(mean sup_error) against log r."""
    by_r: dict[int, list[float]] = {}
    for row in rows:
        by_r.setdefault(row.r, []).append(row.sup_error)
    rs = np.array(sorted(by_r))
    errs = np.array([np.mean(by_r[r]) for r in rs])
    slope, _ = np.polyfit(np.log(rs), np.log(errs), 1)
    return float(slope)


def write_concentration_csv(rows: list[ConcentrationRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["r", "seed", "sup_error"])
        for row in rows:
            writer.writerow([row.r, row.seed, repr(row.sup_error)])


# ---------------------------------------------------------------------------
# Posterior-parameterization equivalence: the inducing-point predictive
# (computed from Gram matrices and inducing-output moments m, S) must match
# the feature-space form once m, S are re-expressed through the feature
# matrix at the inducing points.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceRow:
    case: str
    max_abs_discrepancy: float


def inducing_posterior(kff: np.ndarray, kzz: np.ndarray, kzf: np.ndarray,
                       m: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean/covariance of the inducing-point variational family."""
    alpha = np.linalg.solve(kzz, kzf)  # (r, n)
    mean = alpha.T @ m
    cov = kff - alpha.T @ (kzz - s) @ alpha
    return mean, cov


def rf_equivalence_case(block, inputs: np.ndarray, z: np.ndarray,
                        mu_new: np.ndarray, sigma_new: np.ndarray) -> float:
    """Thm-style identity for the random-feature kernel, m = Phi(Z) mu."""
    phi_f = block.feature_matrix(as_matrix(inputs))
    phi_z = block.feature_matrix(as_matrix(z))
    m = phi_z @ mu_new
    s = phi_z @ sigma_new @ phi_z.T
    mean_ip, cov_ip = inducing_posterior(phi_f @ phi_f.T, phi_z @ phi_z.T,
                                         phi_z @ phi_f.T, m, s)
    mean_rf = phi_f @ mu_new
    cov_rf = phi_f @ sigma_new @ phi_f.T
    return max(float(np.abs(mean_ip - mean_rf).max()),
               float(np.abs(cov_ip - cov_rf).max()))


def ipb_equivalence_case(kernel: KernelSpec, inputs: np.ndarray, z: np.ndarray,
                         mu_new: np.ndarray, sigma_new: np.ndarray,
                         include_offset: bool = True) -> float:
    """Same identity for an arbitrary kernel via the inducing-point block map.

    The block map K(x, Z) K(Z, Z)^{-1/2} only spans a rank-r basis, so the
    predictive covariance carries a training-independent offset
    K(F, F) - K(F, Z) K(Z, Z)^{-1} K(Z, F); with `include_offset` it is added
    to the feature-space form before comparing.
    """
    inputs, z = as_matrix(inputs), as_matrix(z)
    kff = kernel.gram(inputs, inputs)
    kzz = kernel.gram(z, z)
    kzf = kernel.gram(z, inputs)
    root = sqrt_spd(kzz)
    m = root @ mu_new
    s = root @ sigma_new @ root
    mean_ip, cov_ip = inducing_posterior(kff, kzz, kzf, m, s)

    ip_feats = kzf.T @ inverse_sqrt_spd(kzz)
    mean_blk = ip_feats @ mu_new
    cov_blk = ip_feats @ sigma_new @ ip_feats.T
    if include_offset:
        cov_blk = cov_blk + (kff - kzf.T @ np.linalg.solve(kzz, kzf))
    return max(float(np.abs(mean_ip - mean_blk).max()),
               float(np.abs(cov_ip - cov_blk).max()))


def random_spd(r: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((r, r))
    return a @ a.T + 0.5 * np.eye(r)


MAX_FEATURE_COND = 1e8


def equivalence_check(block, inputs: np.ndarray, r: int, seed: int = 0,
                      kernel: KernelSpec | None = None,
                      max_resample: int = 10) -> list[EquivalenceRow]:
    """Run both equivalence cases on one random instance.

    Inducing inputs are redrawn (up to `max_resample` times) whenever the
    feature matrix at the inducing points is too ill-conditioned to invert.
    """
    inputs = as_matrix(inputs)
    n, d = inputs.shape
    rng = stream(seed, "equiv")
    mu_new = rng.standard_normal((r, 1))
    sigma_new = random_spd(r, rng)

    z = None
    for _ in range(max_resample):
        cand = rng.standard_normal((r, d))
        phi_z = block.feature_matrix(cand)
        if np.linalg.cond(phi_z) <= MAX_FEATURE_COND:
            z = cand
            break
    if z is None:
        raise np.linalg.LinAlgError(
            f"could not draw inducing points with cond(Phi(Z)) <= {MAX_FEATURE_COND:g} "
            f"in {max_resample} attempts")

    rows = [EquivalenceRow("random_feature",
                           rf_equivalence_case(block, inputs, z, mu_new, sigma_new))]
    if kernel is not None:
        rows.append(EquivalenceRow(
            f"inducing_block_{kernel.kind}",
            ipb_equivalence_case(kernel, inputs, z, mu_new, sigma_new)))
    return rows


def write_equivalence_csv(rows: list[EquivalenceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["case", "max_abs_discrepancy"])
        for row in rows:
            writer.writerow([row.case, repr(row.max_abs_discrepancy)])

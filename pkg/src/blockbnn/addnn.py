"""Post-training ANOVA analysis of additive networks.

For an additive model f = sum_j g_j, the interaction of a feature subset T
is the alternating product of identity and empirical-expectation operators

    I_T(x_T) = prod_{i in T} (I_{x_i} - E^n_{x_i}) prod_{j not in T} E^n_{x_j} f,

where E^n_{x_j} averages over the n observed values of coordinate j
independently of the others. Only sub-networks whose first-layer support
(input cluster) contains T contribute, and each contribution marginalizes
only over that cluster's remaining coordinates, which keeps the enumeration
polynomial instead of 2^p. Strengths are empirical l2 norms of I_T over
training points, with spread taken across posterior weight draws.
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import blocks as bl
from . import vi
from .autodiff import value_of
from .kernels import KernelSpec
from .rngs import stream


VARIANTS = ("mcdropout", "rf", "dkl", "drf")


def addnn_policy(variant: str = "mcdropout", lasso_lam: float = 100.0,
                 keep_prob: float = 0.9, rb_features: int = 24,
                 ipb_points: int = 16) -> bl.FeaturePolicy:
    """Per-layer recipes for the additive model's four uncertainty variants.

    Layer 1 is always the selection layer: a plain function block with a
    point-mass posterior under the group-lasso prior, one group per input
    feature. The output node is a point-mass weighted sum. The variants
    differ in the branch-internal layers: dropout mixtures, one or two
    random-feature stages with Gaussian posteriors, or a deterministic
    hidden layer feeding an RBF inducing-point stage.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; known: {VARIANTS}")
    selection = bl.BlockRecipe(posterior="pointmass", prior="group_lasso",
                               lasso_lam=lasso_lam)
    out = bl.BlockRecipe(posterior="pointmass", prior="normal")
    if variant == "mcdropout":
        hidden = tail = bl.BlockRecipe(posterior="mixture", keep_prob=keep_prob)
    elif variant == "rf":
        hidden = tail = bl.BlockRecipe(
            features=(bl.FeatureSpec("rb", rb_features, activation="relu"),),
            posterior="gaussian")
    elif variant == "drf":
        hidden = tail = bl.BlockRecipe(
            features=(bl.FeatureSpec("rb", rb_features, activation="relu"),
                      bl.FeatureSpec("rb", rb_features, activation="relu")),
            posterior="gaussian")
    else:  # dkl
        hidden = bl.BlockRecipe(posterior="pointmass", prior="normal")
        tail = bl.BlockRecipe(
            features=(bl.FeatureSpec("ipb", ipb_points,
                                     kernel=KernelSpec(kind="rbf", lengthscale=None)),),
            posterior="gaussian")
    return bl.FeaturePolicy(out, overrides={1: selection, 2: hidden, 3: tail})


def build_addnn(input_dim: int, k: int = 10, variant: str = "mcdropout",
                hidden: tuple[int, int] = (3, 10), lasso_lam: float = 100.0,
                keep_prob: float = 0.9, rb_features: int = 24,
                ipb_points: int = 16, activation: str = "relu", seed: int = 0,
                groups=None, inputs: np.ndarray | None = None,
                bias_mode: str = "trainable-in-fb") -> bl.BayesNet:
    """Additive network of k sub-networks ready for variational training.

    Function blocks carry a trainable bias column by default (the bias-free
    form cannot represent level shifts or interior extrema under ReLU); the
    bias weight is excluded from the first layer's sparsity groups.
    """
    from .skeleton import additive
    sk = additive(input_dim=input_dim, k=k, groups=groups, hidden=hidden,
                  activation=activation)
    policy = addnn_policy(variant, lasso_lam=lasso_lam, keep_prob=keep_prob,
                          rb_features=rb_features, ipb_points=ipb_points)
    return bl.build_network(sk, policy, seed=seed, inputs=inputs,
                            bias_mode=bias_mode)


class ClusterRestriction(ValueError):
    """Raised when a subset escapes every cluster and force is not set."""


class BudgetExceeded(ValueError):
    """Raised when the candidate-subset count would exceed the cap."""


@dataclass(frozen=True)
class InputCluster:
    """Post-training support of one sub-network's first layer."""

    subnet: int
    features: tuple[int, ...]


@dataclass(frozen=True)
class InteractionEntry:
    subset: tuple[int, ...]
    strength: float
    strength_std: float


@dataclass(frozen=True, eq=False)
class HeatmapGrid:
    features: tuple[int, int]
    x_values: np.ndarray
    y_values: np.ndarray
    mean: np.ndarray
    std: np.ndarray


@dataclass(eq=False)
class InteractionReport:
    entries: list[InteractionEntry]
    heatmaps: dict[tuple[int, int], HeatmapGrid]


# ---------------------------------------------------------------------------
# Cluster extraction.
# ---------------------------------------------------------------------------

def first_layer_group_norms(model: vi.TrainedModel) -> list[np.ndarray]:
    """Per-branch l2 norms of each input feature's first-layer weight group."""
    k = bl.additive_branch_count(model.net)
    norms = []
    for j in range(k):
        unit = model.net.units[0][j]
        mu = model.state.params[f"{unit.fb.group}.mu"]
        rows = mu[:len(unit.inputs)]  # bias row, if any, is not a feature group
        norms.append(np.sqrt((rows ** 2).sum(axis=1)))
    return norms


def extract_clusters(model: vi.TrainedModel,
                     threshold: float | None = None) -> list[InputCluster]:
    """Feature i joins branch j's cluster iff its weight-group norm passes
    the threshold (default: 1% of the largest group norm in the model)."""
    norms = first_layer_group_norms(model)
    if threshold is None:
        top = max((float(n.max()) for n in norms if n.size), default=0.0)
        threshold = 0.01 * top
    clusters = []
    for j, n in enumerate(norms):
        feats = tuple(int(model.net.units[0][j].inputs[i])
                      for i in range(n.size) if n[i] > threshold)
        if feats:
            clusters.append(InputCluster(subnet=j, features=feats))
    return clusters


def pruned_weight_draw(model: vi.TrainedModel, clusters: list[InputCluster],
                       rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Posterior weight draw with sub-threshold first-layer groups zeroed,
    so each branch depends exactly on its cluster."""
    weights = {gid: np.array(value_of(w))
               for gid, w in vi.sample_weights(model.state, rng).items()}
    keep = {c.subnet: set(c.features) for c in clusters}
    k = bl.additive_branch_count(model.net)
    for j in range(k):
        unit = model.net.units[0][j]
        w = weights[unit.fb.group]
        for row, feat in enumerate(unit.inputs):
            if feat not in keep.get(j, ()):
                w[row, :] = 0.0
    return weights


# ---------------------------------------------------------------------------
# Component evaluation on one branch.
# ---------------------------------------------------------------------------

_CHUNK_ROWS = 1 << 21


def _branch_fn(model: vi.TrainedModel, weights: dict, branch: int):
    net = model.net
    p = net.skeleton.input_dim

    y_scale = model.y_scale  # branch outputs live on the training scale

    def fn(x_full: np.ndarray) -> np.ndarray:
        outs = []
        for lo in range(0, x_full.shape[0], _CHUNK_ROWS):
            block = x_full[lo:lo + _CHUNK_ROWS]
            outs.append(value_of(bl.branch_forward(net, block, weights, branch))[:, 0])
        raw = np.concatenate(outs) if len(outs) > 1 else outs[0]
        return y_scale * raw

    fn.input_dim = p
    return fn


def _marginal(fn, p: int, fixed: dict[int, np.ndarray],
              columns: list[tuple[int, np.ndarray]]) -> np.ndarray:
    """Average fn over the rows described by `columns` (one shared length),
    with `fixed` coordinates broadcast across them. One value per fixed row."""
    q = len(next(iter(fixed.values()))) if fixed else 1
    if not columns:
        x = np.zeros((q, p))
        for j, col in fixed.items():
            x[:, j] = col
        return fn(x)
    m_total = columns[0][1].size
    x = np.zeros((q * m_total, p))
    for j, col in fixed.items():
        x[:, j] = np.repeat(col, m_total)
    for j, vals in columns:
        x[:, j] = np.tile(vals, q)
    return fn(x).reshape(q, m_total).mean(axis=1)


def _product_columns(marg: dict[int, np.ndarray]) -> list[tuple[int, np.ndarray]]:
    axes = sorted(marg)
    mesh = np.meshgrid(*[marg[j] for j in axes], indexing="ij")
    return [(j, m.ravel()) for j, m in zip(axes, mesh)]


def _cluster_components(fn, cluster: tuple[int, ...], subsets,
                        eval_cols: dict[int, np.ndarray],
                        marg_vals: dict[int, np.ndarray], q: int,
                        grid_budget: int | None = None,
                        joint_vals: dict[int, np.ndarray] | None = None) -> dict:
    """All requested I_T contributions of one branch, sharing marginals.

    Expands prod_{i in T} (I - E) into the alternating sum over A subseteq T
    of marginals m_A, each of which fixes the coordinates in A at the
    evaluation points and averages the rest of the cluster empirically.
    The average uses the exact product grid whenever its cell count fits in
    `grid_budget` (always, when the budget is None); otherwise it falls back
    to the caller's joint Monte Carlo table over the same product measure.
    """
    p = fn.input_dim
    needed = set()
    for t in subsets:
        for size in range(len(t) + 1):
            needed.update(combinations(t, size))
    cache = {}
    for a in sorted(needed, key=len):
        fixed = {j: eval_cols[j] for j in a}
        marg = {j: marg_vals[j] for j in cluster if j not in a}
        cells = 1
        for j in marg:
            cells *= marg[j].size
        if grid_budget is None or cells <= grid_budget or not marg:
            columns = _product_columns(marg) if marg else []
        else:
            columns = [(j, joint_vals[j]) for j in sorted(marg)]
        cache[a] = _marginal(fn, p, fixed, columns)
    out = {}
    for t in subsets:
        total = np.zeros(q)
        for size in range(len(t) + 1):
            sign = (-1.0) ** (len(t) - size)
            for a in combinations(t, size):
                total = total + sign * cache[a]
        out[t] = total
    return out


def anova_component(model: vi.TrainedModel, subset, eval_points, data,
                    weights: dict | None = None,
                    clusters: list[InputCluster] | None = None,
                    force: bool = False, baseline: np.ndarray | None = None,
                    rng_seed: int = 0) -> np.ndarray:
    """I_T evaluated at the given points, exact per the empirical ANOVA.

    Marginalization uses all n training values per coordinate (or the single
    `baseline` sample when one is given, which yields the global-attribution
    view). `weights` defaults to one posterior draw; they are pruned to the
    clusters so the decomposition matches the evaluated model exactly.
    """
    t = tuple(sorted(set(int(i) for i in subset)))
    if clusters is None:
        clusters = extract_clusters(model)
    contributing = [c for c in clusters if set(t) <= set(c.features)]
    if t and not contributing and not force:
        raise ClusterRestriction(
            f"subset {t} is contained in no input cluster; pass force=True to "
            "evaluate it anyway (the component is exactly zero for this model)")
    if weights is None:
        weights = pruned_weight_draw(model, clusters, stream(rng_seed, "anova"))
    eval_points = np.asarray(eval_points, dtype=np.float64)
    if eval_points.ndim == 1:
        eval_points = eval_points.reshape(1, -1)
    q = eval_points.shape[0]
    eval_cols = {j: eval_points[:, j] for j in t}
    out = np.zeros(q)
    for c in contributing:
        if baseline is None:
            marg = {j: data.x[:, j] for j in c.features}
        else:
            base = np.asarray(baseline, dtype=np.float64).ravel()
            marg = {j: base[[j]] for j in c.features}
        fn = _branch_fn(model, weights, c.subnet)
        comp = _cluster_components(fn, c.features, [t], eval_cols, marg, q)[t]
        out = out + comp
    return out


# ---------------------------------------------------------------------------
# Candidate enumeration and ranked strengths.
# ---------------------------------------------------------------------------

def enumeration_budget(clusters: list[InputCluster], cap: int = 100_000) -> int:
    """Distinct nonempty candidate subsets across clusters.

    Refuses to enumerate when the bound sum_j 2^{|T_j|} exceeds the cap;
    a larger group-lasso strength shrinks the clusters.
    """
    bound = sum(2 ** len(c.features) for c in clusters)
    if bound > cap:
        raise BudgetExceeded(
            f"candidate bound {bound} exceeds cap {cap}; increase the "
            "group-lasso strength to obtain smaller input clusters")
    seen = set()
    for c in clusters:
        for size in range(1, len(c.features) + 1):
            seen.update(combinations(c.features, size))
    return len(seen)


def candidate_subsets(clusters: list[InputCluster], cap: int = 100_000,
                      max_order: int | None = None) -> list[tuple[int, ...]]:
    """Distinct nonempty cluster subsets, optionally capped at |T| <= max_order."""
    if max_order is None:
        enumeration_budget(clusters, cap)
    else:
        bound = sum(sum(_comb(len(c.features), s)
                        for s in range(1, max_order + 1)) for c in clusters)
        if bound > cap:
            raise BudgetExceeded(
                f"candidate bound {bound} exceeds cap {cap}; increase the "
                "group-lasso strength to obtain smaller input clusters")
    seen = set()
    for c in clusters:
        top = len(c.features) if max_order is None else min(max_order, len(c.features))
        for size in range(1, top + 1):
            seen.update(combinations(c.features, size))
    return sorted(seen, key=lambda t: (len(t), t))


def _comb(n: int, k: int) -> int:
    from math import comb
    return comb(n, k)


def _is_stochastic(state: vi.VariationalState) -> bool:
    return any(p.family != "pointmass" for p in state.posteriors.values())


def interaction_strengths(model: vi.TrainedModel, data,
                          clusters: list[InputCluster] | None = None,
                          mc_draws: int = 50, top_k: int | None = None,
                          max_order: int | None = 2, seed: int = 0,
                          eval_cap: int = 384, grid_cells: int = 1 << 18,
                          marg_mc: int = 384, heatmap_grid: int = 50,
                          heatmap_pairs: bool = True,
                          budget_cap: int = 100_000) -> InteractionReport:
    """Ranked interaction strengths with posterior uncertainty.

    Strength of T is the empirical l2 norm of I_T over (capped) training
    points, averaged over posterior draws; the std is taken across draws.
    Multi-coordinate marginals use the exact empirical product grid while it
    fits in `grid_cells`, and otherwise `marg_mc` joint Monte Carlo draws
    from the same product measure (re-drawn per posterior draw, so the
    averaged strengths concentrate). Pairs get a quantile-grid heatmap of
    the component's posterior mean and std.
    """
    if clusters is None:
        clusters = extract_clusters(model)
    cands = candidate_subsets(clusters, budget_cap, max_order=max_order)
    if not cands:
        return InteractionReport(entries=[], heatmaps={})
    n = data.x.shape[0]
    eval_idx = np.arange(min(n, eval_cap))
    eval_x = data.x[eval_idx]
    draws = mc_draws if _is_stochastic(model.state) else 1

    by_cluster: list[tuple[InputCluster, list[tuple[int, ...]], dict, dict]] = []
    for c in clusters:
        subs = [t for t in cands if set(t) <= set(c.features)]
        marg = {j: data.x[:, j] for j in c.features}
        eval_cols = {j: eval_x[:, j] for j in c.features}
        by_cluster.append((c, subs, marg, eval_cols))

    strength_draws = {t: np.zeros(draws) for t in cands}
    pair_entries = [t for t in cands if len(t) == 2] if heatmap_pairs else []
    heat_axes = {}
    heat_draws = {}
    for t in pair_entries:
        qs = (np.arange(heatmap_grid) + 0.5) / heatmap_grid
        xv = np.quantile(data.x[:, t[0]], qs)
        yv = np.quantile(data.x[:, t[1]], qs)
        heat_axes[t] = (xv, yv)
        heat_draws[t] = np.zeros((draws, heatmap_grid, heatmap_grid))

    for d in range(draws):
        weights = pruned_weight_draw(model, clusters,
                                     stream(seed, "interactions", d))
        totals = {t: np.zeros(len(eval_idx)) for t in cands}
        for c, subs, marg, eval_cols in by_cluster:
            if not subs:
                continue
            joint_rng = stream(seed, "marg", d, c.subnet)
            joint_vals = {j: data.x[joint_rng.integers(0, n, marg_mc), j]
                          for j in c.features}
            fn = _branch_fn(model, weights, c.subnet)
            comps = _cluster_components(fn, c.features, subs, eval_cols, marg,
                                        len(eval_idx), grid_budget=grid_cells,
                                        joint_vals=joint_vals)
            for t, vals in comps.items():
                totals[t] += vals
            for t in pair_entries:
                if not set(t) <= set(c.features):
                    continue
                xv, yv = heat_axes[t]
                gx, gy = np.meshgrid(xv, yv, indexing="ij")
                grid_cols = {t[0]: gx.ravel(), t[1]: gy.ravel()}
                comp = _cluster_components(fn, c.features, [t], grid_cols, marg,
                                           heatmap_grid * heatmap_grid,
                                           grid_budget=grid_cells,
                                           joint_vals=joint_vals)[t]
                heat_draws[t][d] += comp.reshape(heatmap_grid, heatmap_grid)
        for t in cands:
            strength_draws[t][d] = np.sqrt(np.mean(totals[t] ** 2))

    entries = [InteractionEntry(subset=t,
                                strength=float(strength_draws[t].mean()),
                                strength_std=float(strength_draws[t].std()))
               for t in cands]
    entries.sort(key=lambda e: (-e.strength, e.subset))
    if top_k is not None:
        entries = entries[:top_k]
    kept = {e.subset for e in entries}
    heatmaps = {t: HeatmapGrid(features=t, x_values=heat_axes[t][0],
                               y_values=heat_axes[t][1],
                               mean=heat_draws[t].mean(axis=0),
                               std=heat_draws[t].std(axis=0))
                for t in pair_entries if t in kept}
    return InteractionReport(entries=entries, heatmaps=heatmaps)


# ---------------------------------------------------------------------------
# CSV emission.
# ---------------------------------------------------------------------------

def write_report_csv(report: InteractionReport, path,
                     feature_names: tuple[str, ...] | None = None) -> None:
    def label(t):
        if feature_names is None:
            return "&".join(str(i + 1) for i in t)
        return "&".join(feature_names[i] for i in t)

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["subset", "strength", "std"])
        for e in report.entries:
            writer.writerow([label(e.subset), repr(e.strength), repr(e.strength_std)])


def write_heatmap_csv(grid: HeatmapGrid, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["x1_quantile", "x2_quantile", "mean", "std"])
        for a in range(grid.x_values.size):
            for b in range(grid.y_values.size):
                writer.writerow([repr(float(grid.x_values[a])),
                                 repr(float(grid.y_values[b])),
                                 repr(float(grid.mean[a, b])),
                                 repr(float(grid.std[a, b]))])

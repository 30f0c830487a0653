"""Building blocks and the skeleton-to-network expansion.

Three block types assemble a Bayesian network from a skeleton, bottom up:

* function block (FB): a bias-free linear map whose weight columns carry the
  Bayesian prior/posterior; the only trainable parameters.
* random feature block (RB): a fixed random linear map followed by an
  activation and 1/sqrt(r) scaling; a Monte Carlo kernel basis.
* inducing point block (IPB): the deterministic map
  x -> K(x, Z) K(Z, Z)^{-1/2}, a rank-r basis for an arbitrary kernel.

Each skeleton node expands into an optional chain of feature blocks (zero,
one, or several) followed by exactly one function block whose output width
is the node's replication width.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, as_matrix, inverse_sqrt_spd, value_of
from .kernels import KernelSpec
from .rngs import stream
from .skeleton import Skeleton

BIAS_MODES = ("none", "random-in-rb", "trainable-in-fb")
POSTERIOR_FAMILIES = ("gaussian", "pointmass", "mixture")
PRIOR_KINDS = ("normal", "group_lasso")


class BuildError(ValueError):
    """Raised when a recipe cannot be realized on the given skeleton."""


@dataclass(frozen=True)
class FeatureSpec:
    """One entry of a node's feature stage."""

    kind: str = "rb"                 # "rb" | "ipb"
    count: int = 16                  # output width r
    activation: str = "relu"         # sigma_K, rb only
    scale: float | None = None       # rb weight scale rho; default 1/sqrt(fan_in)
    kernel: KernelSpec | None = None  # ipb only

    def __post_init__(self):
        if self.kind not in ("rb", "ipb"):
            raise BuildError(f"unknown feature block kind {self.kind!r}")
        if self.count < 1:
            raise BuildError("feature block width must be >= 1")
        if self.kind == "ipb" and self.kernel is None:
            raise BuildError("inducing-point block needs a kernel spec")


@dataclass(frozen=True)
class BlockRecipe:
    """Feature stage plus posterior/prior choices for one node's FB group."""

    features: tuple[FeatureSpec, ...] = ()
    posterior: str = "gaussian"
    keep_prob: float = 0.9
    full_cov: bool = False
    prior: str = "normal"
    lasso_lam: float = 0.0

    def __post_init__(self):
        if self.posterior not in POSTERIOR_FAMILIES:
            raise BuildError(f"unknown posterior family {self.posterior!r}")
        if self.prior not in PRIOR_KINDS:
            raise BuildError(f"unknown prior {self.prior!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise BuildError("keep_prob must be in (0, 1]")
        if self.prior == "group_lasso" and self.lasso_lam < 0.0:
            raise BuildError("group-lasso strength must be nonnegative")


class FeaturePolicy:
    """Assigns a recipe to every skeleton node: exact > layer-wide > default."""

    def __init__(self, default: BlockRecipe | None = None,
                 overrides: dict | None = None):
        self.default = default if default is not None else BlockRecipe()
        self.overrides = dict(overrides or {})

    def recipe(self, layer: int, node: int) -> BlockRecipe:
        if (layer, node) in self.overrides:
            return self.overrides[(layer, node)]
        if layer in self.overrides:
            return self.overrides[layer]
        return self.default


@dataclass(frozen=True)
class FunctionBlock:
    group: str
    in_width: int   # feature width consumed (including the bias column if any)
    out_width: int
    bias: bool = False


@dataclass(frozen=True, eq=False)
class RandomFeatureBlock:
    in_width: int
    feature_count: int
    activation: str
    scale: float
    weight: np.ndarray               # (feature_count, in_width), rho-scaled, fixed
    offset: np.ndarray | None = None  # (feature_count,) random bias when enabled

    def feature_matrix(self, x):
        """phi(x) rows: sigma_K(x . w_j + b_j) / sqrt(r). Works traced or eager."""
        if value_of(x).shape[1] != self.in_width:
            raise ShapeMismatch("random feature block", value_of(x).shape,
                                self.weight.T.shape)
        z = ad.matmul(x, self.weight.T)
        if self.offset is not None:
            z = ad.add(z, self.offset.reshape(1, -1))
        return ad.scale(ad.elementwise(z, self.activation),
                        1.0 / np.sqrt(self.feature_count))


@dataclass(frozen=True, eq=False)
class InducingPointBlock:
    kernel: KernelSpec
    points: np.ndarray    # (r, d) inducing inputs Z, fixed after build
    inv_sqrt: np.ndarray  # cached symmetric K(Z, Z)^{-1/2}

    @property
    def feature_count(self) -> int:
        return self.points.shape[0]

    @property
    def in_width(self) -> int:
        return self.points.shape[1]

    def feature_matrix(self, x):
        """Rows K(x_i, Z) K(Z, Z)^{-1/2}; differentiable for rbf/linear/empirical_rf."""
        if value_of(x).shape[1] != self.in_width:
            raise ShapeMismatch("inducing point block", value_of(x).shape,
                                self.points.shape)
        kind = self.kernel.kind
        if not isinstance(x, ad.Var):
            return self.kernel.gram(x, self.points) @ self.inv_sqrt
        if kind == "rbf":
            gram = ad.rbf_gram(x, self.points, self.kernel.lengthscale)
            return ad.matmul(gram, self.inv_sqrt)
        if kind == "linear":
            return ad.matmul(x, self.points.T @ self.inv_sqrt)
        if kind == "empirical_rf":
            phi_z = self.kernel.block.feature_matrix(self.points)
            return ad.matmul(self.kernel.block.feature_matrix(x),
                             phi_z.T @ self.inv_sqrt)
        raise NotImplementedError(
            f"no gradient rule for inducing features of kernel {kind!r}")


def make_random_feature_block(in_width: int, count: int, activation: str,
                              scale: float | None, rng: np.random.Generator,
                              with_offset: bool = False) -> RandomFeatureBlock:
    rho = (1.0 / np.sqrt(in_width)) if scale is None else float(scale)
    weight = rho * rng.standard_normal((count, in_width))
    offset = rho * rng.standard_normal(count) if with_offset else None
    return RandomFeatureBlock(in_width=in_width, feature_count=count,
                              activation=activation, scale=rho,
                              weight=weight, offset=offset)


def make_inducing_point_block(kernel: KernelSpec, points: np.ndarray,
                              jitter: float = 1e-10) -> InducingPointBlock:
    points = as_matrix(points)
    if kernel.kind == "rbf" and kernel.lengthscale is None:
        kernel = KernelSpec(kind="rbf", lengthscale=_median_lengthscale(points))
    inv_sqrt = inverse_sqrt_spd(kernel.gram(points, points), jitter)
    return InducingPointBlock(kernel=kernel, points=points, inv_sqrt=inv_sqrt)


def ipb_features(block: InducingPointBlock, x) -> np.ndarray:
    """Feature rows K(x_i, Z) K(Z, Z)^{-1/2} as a plain matrix."""
    return np.asarray(block.feature_matrix(as_matrix(x)))


def _median_lengthscale(points: np.ndarray, cap: int = 256) -> float:
    sub = points[:cap]
    diff = sub[:, None, :] - sub[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    med = float(np.median(dist[np.triu_indices(len(sub), k=1)])) if len(sub) > 1 else 1.0
    return max(med, 1e-3)


@dataclass(frozen=True, eq=False)
class NodeUnit:
    """One expanded skeleton node: its feature stage and function block."""

    layer: int
    index: int
    inputs: tuple[int, ...]
    activation: str          # this node's label, applied when the next layer reads it
    feature_blocks: tuple
    fb: FunctionBlock
    recipe: BlockRecipe


@dataclass(frozen=True, eq=False)
class BayesNet:
    """Expanded network: per-layer node units plus the build provenance."""

    skeleton: Skeleton
    units: tuple[tuple[NodeUnit, ...], ...]
    seed: int
    bias_mode: str = "none"

    @property
    def groups(self) -> dict[str, FunctionBlock]:
        return {u.fb.group: u.fb for layer in self.units for u in layer}

    def unit_by_group(self, group: str) -> NodeUnit:
        for layer in self.units:
            for u in layer:
                if u.fb.group == group:
                    return u
        raise KeyError(group)


def build_network(skeleton: Skeleton, policy: FeaturePolicy, seed: int = 0,
                  inputs: np.ndarray | None = None,
                  bias_mode: str = "none") -> BayesNet:
    """Expand a skeleton bottom-up into a concrete network.

    Random-feature weights are drawn once from seed-indexed streams, so a
    rebuild with the same arguments is bit-identical. Inducing points are
    taken as a random subset of `inputs` propagated through the partially
    built lower layers under a prior draw of the FB weights, and stay fixed
    afterwards.
    """
    if bias_mode not in BIAS_MODES:
        raise BuildError(f"unknown bias mode {bias_mode!r}; known: {BIAS_MODES}")
    return _assemble(skeleton, policy, seed, inputs, bias_mode, tensors=None)


def _assemble(skeleton: Skeleton, policy: FeaturePolicy, seed: int,
              inputs: np.ndarray | None, bias_mode: str,
              tensors: dict | None) -> BayesNet:
    needs_prop = inputs is not None and tensors is None
    prop: list[np.ndarray] | None = None
    prop_acts: list[str] = ["identity"] * skeleton.input_dim
    if needs_prop:
        x = as_matrix(inputs)
        if x.shape[1] != skeleton.input_dim:
            raise BuildError(f"inputs have {x.shape[1]} columns, "
                             f"skeleton expects {skeleton.input_dim}")
        prop = [x[:, [j]] for j in range(skeleton.input_dim)]

    layers: list[tuple[NodeUnit, ...]] = []
    prev_widths = [1] * skeleton.input_dim
    for li, layer in enumerate(skeleton.layers, start=1):
        units = []
        new_prop: list[np.ndarray] = []
        for ni, node in enumerate(layer):
            recipe = policy.recipe(li, ni)
            in_width = sum(prev_widths[j] for j in node.inputs)
            z = None
            if prop is not None:
                parts = [ad.elementwise(prop[j], prop_acts[j]) for j in node.inputs]
                z = parts[0] if len(parts) == 1 else np.hstack(parts)
            feature_blocks = []
            width = in_width
            for pos, spec in enumerate(recipe.features):
                key = f"l{li}.n{ni}.f{pos}"
                if spec.kind == "rb":
                    if tensors is not None:
                        blk = RandomFeatureBlock(
                            in_width=width, feature_count=spec.count,
                            activation=spec.activation,
                            scale=spec.scale if spec.scale is not None else 1.0 / np.sqrt(width),
                            weight=tensors[key + ".weight"],
                            offset=tensors.get(key + ".offset"))
                    else:
                        blk = make_random_feature_block(
                            width, spec.count, spec.activation, spec.scale,
                            stream(seed, "rb", li, ni, pos),
                            with_offset=(bias_mode == "random-in-rb"))
                elif tensors is not None:
                    ell = float(tensors[key + ".lengthscale"][0])
                    kernel = KernelSpec(kind=spec.kernel.kind,
                                        lengthscale=None if np.isnan(ell) else ell)
                    blk = InducingPointBlock(kernel=kernel,
                                             points=tensors[key + ".points"],
                                             inv_sqrt=tensors[key + ".inv_sqrt"])
                else:
                    if z is None:
                        raise BuildError(
                            f"layer {li} node {ni}: inducing-point block requested "
                            "but no inputs were provided to draw inducing points from")
                    if z.shape[0] < spec.count:
                        raise BuildError(
                            f"layer {li} node {ni}: {spec.count} inducing points "
                            f"requested but only {z.shape[0]} inputs available")
                    idx = stream(seed, "ipb", li, ni, pos).choice(
                        z.shape[0], size=spec.count, replace=False)
                    blk = make_inducing_point_block(spec.kernel, z[np.sort(idx)])
                feature_blocks.append(blk)
                if z is not None:
                    z = np.asarray(blk.feature_matrix(z))
                width = spec.count
            bias = bias_mode == "trainable-in-fb"
            fb = FunctionBlock(group=f"l{li}n{ni}", in_width=width + int(bias),
                               out_width=node.width, bias=bias)
            units.append(NodeUnit(layer=li, index=ni, inputs=node.inputs,
                                  activation=node.activation,
                                  feature_blocks=tuple(feature_blocks),
                                  fb=fb, recipe=recipe))
            if prop is not None:
                if bias:
                    z = np.hstack([z, np.ones((z.shape[0], 1))])
                v_prior = stream(seed, "prior", li, ni).standard_normal(
                    (fb.in_width, fb.out_width))
                new_prop.append(z @ v_prior)
        layers.append(tuple(units))
        prev_widths = [node.width for node in layer]
        if prop is not None:
            prop = new_prop
            prop_acts = [node.activation for node in layer]
    return BayesNet(skeleton=skeleton, units=tuple(layers), seed=seed,
                    bias_mode=bias_mode)


def forward(net: BayesNet, x, weights: dict):
    """Evaluate the network on sampled FB weights.

    Returns the per-layer, per-node output list; entries are matrices (or
    traced variables when any argument is traced). Deterministic given
    (x, weights) and the net's fixed random tensors.
    """
    per_layer = []
    prev = None
    for li, layer_units in enumerate(net.units, start=1):
        outs = []
        for unit in layer_units:
            if li == 1:
                z = ad.select_cols(x, unit.inputs)
            else:
                prev_units = net.units[li - 2]
                parts = [ad.elementwise(prev[j], prev_units[j].activation)
                         for j in unit.inputs]
                z = parts[0] if len(parts) == 1 else ad.concat_cols(parts)
            for blk in unit.feature_blocks:
                z = blk.feature_matrix(z)
            if unit.fb.bias:
                ones = np.ones((value_of(z).shape[0], 1))
                z = ad.concat_cols([z, ones])
            w = weights[unit.fb.group]
            got = value_of(w).shape
            want = (unit.fb.in_width, unit.fb.out_width)
            if got != want:
                raise ShapeMismatch(f"forward: weights for group {unit.fb.group}",
                                    got, want)
            outs.append(ad.matmul(z, w))
        per_layer.append(outs)
        prev = outs
    return per_layer


def network_output(net: BayesNet, x, weights: dict):
    """Final-layer output matrix (n x output_count)."""
    last = forward(net, x, weights)[-1]
    return last[0] if len(last) == 1 else ad.concat_cols(last)


# ---------------------------------------------------------------------------
# Additive structure helpers: a valid additive net is a set of disjoint
# branch chains joined by a single bias-free output FB, so the output is a
# weighted sum of branch functions.
# ---------------------------------------------------------------------------

def additive_branch_count(net: BayesNet) -> int:
    """Number of branches; raises BuildError for non-additive nets."""
    sk = net.skeleton
    if sk.depth < 2 or len(sk.layers[-1]) != 1:
        raise BuildError("not an additive network: need a single output node")
    k = len(sk.layers[0])
    for li in range(1, sk.depth - 1):
        layer = sk.layers[li]
        if len(layer) != k or any(node.inputs != (ni,) for ni, node in enumerate(layer)):
            raise BuildError("not an additive network: branches must be disjoint chains")
    if sk.layers[-1][0].inputs != tuple(range(k)):
        raise BuildError("not an additive network: output must read every branch")
    out_unit = net.units[-1][0]
    if out_unit.feature_blocks:
        raise BuildError("not an additive network: output node must be a plain sum "
                         "(no feature blocks)")
    return k


def branch_forward(net: BayesNet, x, weights: dict, branch: int):
    """One branch's contribution to the output (its summand, n x out_width)."""
    k = additive_branch_count(net)
    if not 0 <= branch < k:
        raise IndexError(f"branch {branch} out of range for {k} branches")
    z = ad.select_cols(x, net.units[0][branch].inputs)
    for li in range(net.skeleton.depth - 1):
        unit = net.units[li][branch]
        if li > 0:
            z = ad.elementwise(z, net.units[li - 1][branch].activation)
        for blk in unit.feature_blocks:
            z = blk.feature_matrix(z)
        if unit.fb.bias:
            ones = np.ones((value_of(z).shape[0], 1))
            z = ad.concat_cols([z, ones])
        z = ad.matmul(z, weights[unit.fb.group])
    tail_unit = net.units[-2][branch]
    z = ad.elementwise(z, tail_unit.activation)
    out_unit = net.units[-1][0]
    row0 = sum(net.units[-2][j].fb.out_width for j in range(branch))
    rows = list(range(row0, row0 + tail_unit.fb.out_width))
    w = weights[out_unit.fb.group]
    w_rows = ad.select_cols(ad.transpose(w), rows) if isinstance(w, ad.Var) \
        else value_of(w)[rows, :].T
    return ad.matmul(z, ad.transpose(w_rows))


def first_layer_groups(net: BayesNet) -> list[str]:
    """FB group ids of layer 1, in branch order."""
    return [u.fb.group for u in net.units[0]]


# ---------------------------------------------------------------------------
# Serialization: structural config plus a tensor blob, with checksums so a
# reload can prove it reproduced the same fixed random maps.
# ---------------------------------------------------------------------------

def _checksum(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _kernel_to_dict(kernel: KernelSpec) -> dict:
    if kernel.kind == "empirical_rf":
        raise NotImplementedError(
            "inducing blocks over empirical random-feature kernels are not serializable")
    return {"kind": kernel.kind, "lengthscale": kernel.lengthscale}


def _kernel_from_dict(cfg: dict) -> KernelSpec:
    return KernelSpec(kind=cfg["kind"], lengthscale=cfg["lengthscale"])


def _recipe_to_dict(recipe: BlockRecipe) -> dict:
    return {
        "features": [{
            "kind": s.kind, "count": s.count, "activation": s.activation,
            "scale": s.scale,
            "kernel": _kernel_to_dict(s.kernel) if s.kernel is not None else None,
        } for s in recipe.features],
        "posterior": recipe.posterior,
        "keep_prob": recipe.keep_prob,
        "full_cov": recipe.full_cov,
        "prior": recipe.prior,
        "lasso_lam": recipe.lasso_lam,
    }


def _recipe_from_dict(cfg: dict) -> BlockRecipe:
    feats = tuple(FeatureSpec(
        kind=s["kind"], count=s["count"], activation=s["activation"],
        scale=s["scale"],
        kernel=_kernel_from_dict(s["kernel"]) if s["kernel"] is not None else None)
        for s in cfg["features"])
    return BlockRecipe(features=feats, posterior=cfg["posterior"],
                       keep_prob=cfg["keep_prob"], full_cov=cfg["full_cov"],
                       prior=cfg["prior"], lasso_lam=cfg["lasso_lam"])


def net_tensors(net: BayesNet) -> dict[str, np.ndarray]:
    out = {}
    for layer in net.units:
        for u in layer:
            for pos, blk in enumerate(u.feature_blocks):
                key = f"l{u.layer}.n{u.index}.f{pos}"
                if isinstance(blk, RandomFeatureBlock):
                    out[key + ".weight"] = blk.weight
                    if blk.offset is not None:
                        out[key + ".offset"] = blk.offset
                else:
                    out[key + ".points"] = blk.points
                    out[key + ".inv_sqrt"] = blk.inv_sqrt
                    ell = blk.kernel.lengthscale
                    out[key + ".lengthscale"] = np.array(
                        [np.nan if ell is None else float(ell)])
    return out


def net_config(net: BayesNet) -> dict:
    return {
        "skeleton": net.skeleton.to_config(),
        "seed": net.seed,
        "bias_mode": net.bias_mode,
        "recipes": [[_recipe_to_dict(u.recipe) for u in layer] for layer in net.units],
        "groups": {u.fb.group: [u.fb.in_width, u.fb.out_width]
                   for layer in net.units for u in layer},
        "checksums": {key: _checksum(arr) for key, arr in net_tensors(net).items()},
    }


def rebuild_network(config: dict, tensors: dict[str, np.ndarray]) -> BayesNet:
    """Reconstruct a network from its config and tensor blob, verifying checksums."""
    from .skeleton import parse_skeleton
    sk = parse_skeleton(config["skeleton"])
    overrides = {}
    for li, layer in enumerate(config["recipes"], start=1):
        for ni, rec in enumerate(layer):
            overrides[(li, ni)] = _recipe_from_dict(rec)
    policy = FeaturePolicy(overrides=overrides)
    net = _assemble(sk, policy, int(config["seed"]), inputs=None,
                    bias_mode=config["bias_mode"], tensors=tensors)
    found = {key: _checksum(arr) for key, arr in net_tensors(net).items()}
    if found != config["checksums"]:
        bad = {k for k in set(found) | set(config["checksums"])
               if found.get(k) != config["checksums"].get(k)}
        raise ValueError(f"tensor checksums do not match for: {sorted(bad)}")
    return net

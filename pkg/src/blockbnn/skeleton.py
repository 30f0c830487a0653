"""Computation skeletons: compact layered graphs that expand into networks.

A skeleton is an adjacency-list description of a multi-layer graph. Layer 0
holds the raw input features and carries no activation; every later node is
labelled with an activation and a replication width, and lists the previous
layer's nodes it consumes. Edges only connect adjacent layers, so the graph
is acyclic by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .autodiff import ACTIVATIONS

ACTIVATION_KINDS = frozenset(ACTIVATIONS)

DEFAULT_WIDTH = 2


class SkeletonError(ValueError):
    """Raised for malformed skeleton configurations."""


@dataclass(frozen=True)
class SkeletonNode:
    """One non-input node: activation label, replication width, fan-in."""

    activation: str
    width: int = DEFAULT_WIDTH
    inputs: tuple[int, ...] = ()


@dataclass(frozen=True)
class Skeleton:
    """Layered multigraph with `input_dim` bottom nodes and L node layers."""

    input_dim: int
    layers: tuple[tuple[SkeletonNode, ...], ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise SkeletonError("input_dim must be >= 1")
        if not self.layers:
            raise SkeletonError("skeleton needs at least one non-input layer")
        prev_count = self.input_dim
        for li, layer in enumerate(self.layers, start=1):
            if not layer:
                raise SkeletonError(f"layer {li} is empty")
            for ni, node in enumerate(layer):
                if node.activation not in ACTIVATION_KINDS:
                    raise SkeletonError(
                        f"layer {li} node {ni}: unknown activation {node.activation!r}")
                if node.width < 1:
                    raise SkeletonError(f"layer {li} node {ni}: width must be >= 1")
                if not node.inputs:
                    raise SkeletonError(f"layer {li} node {ni}: no incoming edges")
                if tuple(sorted(set(node.inputs))) != node.inputs:
                    raise SkeletonError(
                        f"layer {li} node {ni}: inputs must be sorted and unique")
                for j in node.inputs:
                    if not 0 <= j < prev_count:
                        raise SkeletonError(
                            f"layer {li} node {ni}: edge from nonexistent node {j} "
                            f"in layer {li - 1} (has {prev_count} nodes)")
            # every node of the previous layer must feed something (no dangling)
            used = {j for node in layer for j in node.inputs}
            missing = set(range(prev_count)) - used
            if missing:
                raise SkeletonError(
                    f"layer {li - 1}: dangling nodes {sorted(missing)} have no outgoing edge")
            prev_count = len(layer)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def output_count(self) -> int:
        return sum(node.width for node in self.layers[-1])

    def node(self, layer: int, index: int) -> SkeletonNode:
        return self.layers[layer - 1][index]

    def to_config(self) -> dict:
        """Serialize to the documented adjacency-list mapping."""
        return {
            "layers": [self.input_dim] + [len(layer) for layer in self.layers],
            "edges": [[li, j, ni]
                      for li, layer in enumerate(self.layers, start=1)
                      for ni, node in enumerate(layer)
                      for j in node.inputs],
            "activations": [[node.activation for node in layer] for layer in self.layers],
            "widths": [[node.width for node in layer] for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_config(), indent=2, sort_keys=True)


def parse_skeleton(text) -> Skeleton:
    """Parse a skeleton from JSON text or an equivalent mapping.

    The grammar (see docs/skeleton_format.md) has four fields:
    `layers` (node counts, input layer first), `edges` (triples
    [layer, source_node, target_node]), `activations` and `widths`
    (one list per non-input layer).
    """
    if isinstance(text, (str, bytes)):
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SkeletonError(f"invalid skeleton config: {exc}") from exc
    else:
        cfg = text
    if not isinstance(cfg, dict):
        raise SkeletonError("skeleton config must be a mapping")
    for field in ("layers", "edges", "activations", "widths"):
        if field not in cfg:
            raise SkeletonError(f"missing field {field!r}")

    counts = list(cfg["layers"])
    if len(counts) < 2:
        raise SkeletonError("field 'layers': need the input layer plus at least one more")
    if any(not isinstance(c, int) or c < 1 for c in counts):
        raise SkeletonError("field 'layers': counts must be positive integers")
    n_layers = len(counts) - 1

    acts = cfg["activations"]
    widths = cfg["widths"]
    if len(acts) != n_layers or len(widths) != n_layers:
        raise SkeletonError(
            "fields 'activations'/'widths': need one list per non-input layer")
    for li in range(n_layers):
        if len(acts[li]) != counts[li + 1] or len(widths[li]) != counts[li + 1]:
            raise SkeletonError(
                f"fields 'activations'/'widths': layer {li + 1} expects {counts[li + 1]} entries")

    in_sets: list[list[set[int]]] = [[set() for _ in range(counts[li + 1])]
                                     for li in range(n_layers)]
    for edge in cfg["edges"]:
        try:
            li, src, dst = (int(v) for v in edge)
        except (TypeError, ValueError) as exc:
            raise SkeletonError(f"field 'edges': malformed entry {edge!r}") from exc
        if not 1 <= li <= n_layers:
            raise SkeletonError(f"field 'edges': entry {edge!r} names layer {li}, "
                                f"but layers run 1..{n_layers} (edges join adjacent layers)")
        if not 0 <= src < counts[li - 1]:
            raise SkeletonError(f"field 'edges': entry {edge!r} has no source node")
        if not 0 <= dst < counts[li]:
            raise SkeletonError(f"field 'edges': entry {edge!r} has no target node")
        in_sets[li - 1][dst].add(src)

    layers = tuple(
        tuple(SkeletonNode(activation=acts[li][ni],
                           width=int(widths[li][ni]),
                           inputs=tuple(sorted(in_sets[li][ni])))
              for ni in range(counts[li + 1]))
        for li in range(n_layers))
    return Skeleton(input_dim=counts[0], layers=layers)


def load_skeleton(path) -> Skeleton:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_skeleton(handle.read())


def save_skeleton(sk: Skeleton, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(sk.to_json() + "\n")


# ---------------------------------------------------------------------------
# Presets matching the standard shapes: plain chains, multi-task graphs with
# a shared bottom layer, and additive graphs made of disjoint branches.
# ---------------------------------------------------------------------------

def chain(depth: int, input_dim: int, width: int = DEFAULT_WIDTH,
          activation: str = "relu") -> Skeleton:
    """Single chain of `depth` nodes; the last node is the width-1 output."""
    if depth < 1:
        raise SkeletonError("chain depth must be >= 1")
    layers = []
    for li in range(depth):
        w = 1 if li == depth - 1 else width
        act = "identity" if li == depth - 1 else activation
        fan_in = tuple(range(input_dim)) if li == 0 else (0,)
        layers.append((SkeletonNode(activation=act, width=w, inputs=fan_in),))
    return Skeleton(input_dim=input_dim, layers=tuple(layers))


def multitask(input_dim: int, shared: int, tasks: int, width: int = DEFAULT_WIDTH,
              activation: str = "relu") -> Skeleton:
    """Shared bottom nodes feeding one top node per task."""
    if shared < 1 or tasks < 1:
        raise SkeletonError("multitask needs shared >= 1 and tasks >= 1")
    bottom = tuple(SkeletonNode(activation=activation, width=width,
                                inputs=tuple(range(input_dim)))
                   for _ in range(shared))
    top = tuple(SkeletonNode(activation="identity", width=1,
                             inputs=tuple(range(shared)))
                for _ in range(tasks))
    return Skeleton(input_dim=input_dim, layers=(bottom, top))


def additive(input_dim: int, k: int, groups: list[tuple[int, ...]] | None = None,
             hidden: tuple[int, int] = (3, 8), activation: str = "relu") -> Skeleton:
    """`k` disjoint branches summed by a single output node.

    Each branch is a three-node chain (two hidden nodes of the given widths,
    then a width-1 branch output with identity activation), so the expanded
    network is a sum of small sub-networks. `groups[j]` restricts branch j's
    fan-in to a feature subset; by default every branch sees every feature.
    """
    if k < 1:
        raise SkeletonError("additive preset needs k >= 1 branches")
    if groups is None:
        groups = [tuple(range(input_dim)) for _ in range(k)]
    if len(groups) != k:
        raise SkeletonError(f"expected {k} feature groups, got {len(groups)}")
    norm_groups = []
    for j, group in enumerate(groups):
        g = tuple(sorted(set(int(i) for i in group)))
        if not g:
            raise SkeletonError(f"branch {j}: empty feature group")
        if g[0] < 0 or g[-1] >= input_dim:
            raise SkeletonError(f"branch {j}: feature index out of range")
        norm_groups.append(g)
    covered = set().union(*norm_groups)
    if covered != set(range(input_dim)):
        raise SkeletonError(
            f"features {sorted(set(range(input_dim)) - covered)} belong to no branch")

    h1 = tuple(SkeletonNode(activation=activation, width=hidden[0], inputs=norm_groups[j])
               for j in range(k))
    h2 = tuple(SkeletonNode(activation=activation, width=hidden[1], inputs=(j,))
               for j in range(k))
    tails = tuple(SkeletonNode(activation="identity", width=1, inputs=(j,))
                  for j in range(k))
    out = (SkeletonNode(activation="identity", width=1, inputs=tuple(range(k))),)
    return Skeleton(input_dim=input_dim, layers=(h1, h2, tails, out))


def branch_count(sk: Skeleton) -> int:
    """Number of connected components between layer 0 and the pre-output layer."""
    parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        parent[find(a)] = find(b)

    for li, layer in enumerate(sk.layers[:-1], start=1):
        for ni, node in enumerate(layer):
            for j in node.inputs:
                union((li, ni), (li - 1, j))
    roots = {find((len(sk.layers) - 1, ni)) for ni in range(len(sk.layers[-2]))} \
        if sk.depth > 1 else {find((0, j)) for j in range(sk.input_dim)}
    return len(roots)

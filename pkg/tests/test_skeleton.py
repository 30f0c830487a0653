import json

import pytest
from hypothesis import given, settings, strategies as st

from blockbnn import skeleton as sk


def chain_config():
    # 4 inputs -> 1 node -> 1 output node (the two-layer fully connected shape)
    return {
        "layers": [4, 1, 1],
        "edges": [[1, j, 0] for j in range(4)] + [[2, 0, 0]],
        "activations": [["relu"], ["identity"]],
        "widths": [[2], [1]],
    }


def test_parse_chain_shape():
    s = sk.parse_skeleton(json.dumps(chain_config()))
    assert s.input_dim == 4
    assert s.depth == 2
    assert s.layers[0][0].inputs == (0, 1, 2, 3)
    assert s.layers[1][0].inputs == (0,)
    assert s.output_count == 1


def test_parse_single_layer_minimal():
    cfg = {"layers": [3, 1], "edges": [[1, j, 0] for j in range(3)],
           "activations": [["identity"]], "widths": [[1]]}
    s = sk.parse_skeleton(cfg)
    assert s.depth == 1 and s.output_count == 1


def test_parse_additive_two_branches():
    cfg = {
        "layers": [4, 2, 2, 1],
        "edges": ([[1, 0, 0], [1, 1, 0], [1, 2, 1], [1, 3, 1]]
                  + [[2, 0, 0], [2, 1, 1]] + [[3, 0, 0], [3, 1, 0]]),
        "activations": [["relu", "relu"], ["relu", "relu"], ["identity"]],
        "widths": [[2, 2], [2, 2], [1]],
    }
    s = sk.parse_skeleton(cfg)
    assert sk.branch_count(s) == 2


@pytest.mark.parametrize("mutate,message", [
    (lambda c: c.pop("edges"), "missing field"),
    (lambda c: c["edges"].append([1, 9, 0]), "no source node"),
    (lambda c: c["edges"].append([5, 0, 0]), "adjacent"),
    (lambda c: c.update(layers=[4, 0, 1]), "positive"),
    (lambda c: c.update(activations=[["bogus"], ["identity"]]), "activation"),
])
def test_parse_rejections(mutate, message):
    cfg = chain_config()
    mutate(cfg)
    with pytest.raises(sk.SkeletonError) as err:
        sk.parse_skeleton(cfg)
    assert message in str(err.value)


def test_parse_rejects_dangling_node():
    cfg = chain_config()
    cfg["edges"] = [e for e in cfg["edges"] if e != [1, 3, 0]]
    with pytest.raises(sk.SkeletonError) as err:
        sk.parse_skeleton(cfg)
    assert "dangling" in str(err.value)


def test_parse_rejects_isolated_target():
    cfg = chain_config()
    cfg["layers"] = [4, 2, 1]
    cfg["activations"] = [["relu", "relu"], ["identity"]]
    cfg["widths"] = [[2, 2], [1]]
    # second node of layer 1 has no incoming edge
    cfg["edges"] = [[1, j, 0] for j in range(4)] + [[2, 0, 0], [2, 1, 0]]
    with pytest.raises(sk.SkeletonError) as err:
        sk.parse_skeleton(cfg)
    assert "no incoming" in str(err.value)


def test_invalid_json_reports_position():
    with pytest.raises(sk.SkeletonError) as err:
        sk.parse_skeleton("{not json")
    assert "line" in str(err.value)


@st.composite
def skeletons(draw):
    input_dim = draw(st.integers(1, 4))
    n_layers = draw(st.integers(1, 3))
    prev = input_dim
    layers = []
    for li in range(n_layers):
        count = draw(st.integers(1, 3))
        nodes = []
        taken = [draw(st.integers(0, count - 1)) for _ in range(prev)]
        for ni in range(count):
            base = {j for j, t in enumerate(taken) if t == ni}
            extra = draw(st.sets(st.integers(0, prev - 1), max_size=prev))
            inputs = tuple(sorted(base | extra)) or (0,)
            nodes.append(sk.SkeletonNode(
                activation=draw(st.sampled_from(sorted(sk.ACTIVATION_KINDS))),
                width=draw(st.integers(1, 3)),
                inputs=inputs))
        # ensure no dangling: every prev node used
        used = set()
        for n in nodes:
            used.update(n.inputs)
        missing = set(range(prev)) - used
        if missing:
            first = nodes[0]
            nodes[0] = sk.SkeletonNode(first.activation, first.width,
                                       tuple(sorted(set(first.inputs) | missing)))
        layers.append(tuple(nodes))
        prev = count
    return sk.Skeleton(input_dim=input_dim, layers=tuple(layers))


@settings(max_examples=50, deadline=None)
@given(skeletons())
def test_roundtrip_identity(s):
    assert sk.parse_skeleton(s.to_json()) == s


class TestPresets:
    def test_chain_two_layers(self):
        s = sk.chain(2, input_dim=4, width=2)
        assert s.depth == 2
        assert s.layers[0][0].inputs == (0, 1, 2, 3)
        assert s.output_count == 1

    def test_multitask_shape(self):
        s = sk.multitask(input_dim=4, shared=1, tasks=3)
        assert len(s.layers[0]) == 1
        assert len(s.layers[1]) == 3
        assert all(node.inputs == (0,) for node in s.layers[1])
        assert s.output_count == 3

    def test_additive_default_full_input(self):
        s = sk.additive(input_dim=10, k=10)
        assert len(s.layers[0]) == 10
        assert all(node.inputs == tuple(range(10)) for node in s.layers[0])
        assert s.output_count == 1

    def test_additive_component_count(self):
        s = sk.additive(input_dim=6, k=3, groups=[(0, 1), (2, 3), (4, 5)])
        assert sk.branch_count(s) == 3

    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=4, k=0),
        dict(input_dim=4, k=2, groups=[(0, 1), ()]),
        dict(input_dim=4, k=1, groups=[(0, 9)]),
        dict(input_dim=4, k=1, groups=[(0, 1)]),  # features 2, 3 uncovered
    ])
    def test_additive_rejections(self, kwargs):
        with pytest.raises(sk.SkeletonError):
            sk.additive(**kwargs)

    def test_chain_rejects_zero_depth(self):
        with pytest.raises(sk.SkeletonError):
            sk.chain(0, input_dim=3)

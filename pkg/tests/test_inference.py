import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fogguard.inference import (
    NULL,
    RANDOM_GUESS,
    accuracy,
    add_inputs,
    distributed_forward,
    failed_nodes,
    forward_all,
    is_null,
    node_forward,
    pad_to,
)
from fogguard.nn import DenseLayer, ShapeError
from fogguard.topology import DnnSpec, PartitionMap, PhysicalNode, build_distributed, build_health

from helpers import monolithic_chain_forward, random_chain, random_inputs


def test_add_examples():
    np.testing.assert_array_equal(add_inputs([np.array([1, 2]), np.array([3, 4])]), [4, 6])
    np.testing.assert_array_equal(add_inputs([np.array([1, 2]), NULL]), [1, 2])
    np.testing.assert_array_equal(add_inputs([np.array([1, 2, 3]), np.array([4, 5])]), [5, 7, 3])
    assert add_inputs([NULL, NULL, NULL]) is NULL


def test_add_needs_operands_and_does_not_alias():
    with pytest.raises(ValueError):
        add_inputs([])
    a = np.array([1.0, 2.0])
    out = add_inputs([a, NULL])
    out += 1
    np.testing.assert_array_equal(a, [1.0, 2.0])


def test_null_is_a_singleton_that_survives_pickling():
    assert pickle.loads(pickle.dumps(NULL)) is NULL
    assert repr(NULL) == "NULL"
    assert is_null(NULL) and not is_null(np.zeros(0))


def test_pad_to():
    np.testing.assert_array_equal(pad_to(np.array([[1, 2]]), 4), [[1, 2, 0, 0]])
    with pytest.raises(ShapeError):
        pad_to(np.zeros(3), 2)


def identity_chain(n_nodes=3, dim=4):
    spec = DnnSpec(dim, (dim,) * (n_nodes - 1), dim)
    ids = [f"n{i}" for i in range(n_nodes - 1)] + ["cloud"]
    nodes = [PhysicalNode("iot", "iot", parents=(ids[0],))]
    for i, nid in enumerate(ids):
        nodes.append(PhysicalNode(nid, "cloud" if nid == "cloud" else "fog", (i + 1,),
                                  parents=() if nid == "cloud" else (ids[i + 1],)))
    dnn = build_distributed(spec, nodes, PartitionMap.from_nodes(nodes), "none")
    eye = [DenseLayer(np.eye(dim), np.zeros(dim), "identity") for _ in ids]
    return dnn.with_weights(eye)


def test_null_in_null_out_and_identity_chain_passes_input():
    dnn = identity_chain()
    assert node_forward(dnn, "n0", NULL) is NULL
    x = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(distributed_forward(dnn, x).logits, x)


def test_node_forward_rejects_oversized_input():
    dnn = identity_chain()
    with pytest.raises(ShapeError):
        node_forward(dnn, "n0", np.zeros(5))


def test_two_node_split_matches_unsplit_network():
    spec = DnnSpec(3, (5, 4, 6), 2)
    nodes = [
        PhysicalNode("iot", "iot", parents=("v2",)),
        PhysicalNode("v2", "edge", (1, 2), parents=("v1",)),
        PhysicalNode("v1", "cloud", (3, 4)),
    ]
    dnn = build_distributed(spec, nodes, PartitionMap.from_nodes(nodes), "none").init_weights(3, np.float64)
    x = np.random.default_rng(0).standard_normal(3)
    h = x
    for layer in dnn.all_layers():
        h = layer.weights @ h + layer.bias
        h = np.maximum(h, 0) if layer.activation == "relu" else h
    assert np.max(np.abs(distributed_forward(dnn, x).logits - h)) < 1e-6


def test_all_alive_matches_loop_oracle_on_random_chains():
    rng = np.random.default_rng(11)
    for i in range(20):
        dnn = random_chain(rng, "skip_one" if i % 2 else "none").init_weights(i, np.float64)
        x = random_inputs(rng, dnn)
        np.testing.assert_allclose(distributed_forward(dnn, x).logits, monolithic_chain_forward(dnn, x), atol=1e-12)


def test_vanilla_health_with_edge_failed_guesses():
    dnn = build_health("none").init_weights(0)
    x = np.ones(23, dtype=np.float32)
    out = distributed_forward(dnn, x, (1, 1, 0))  # fallible order f1, f2, e1
    assert out.random_guess and out.predicted == RANDOM_GUESS


def test_deepfogguard_health_with_edge_failed_routes_around():
    dnn = build_health("skip_one").init_weights(0)
    x = np.ones((5, 23), dtype=np.float32)
    out = distributed_forward(dnn, x, (1, 1, 0))
    assert not out.random_guess
    assert out.predicted.shape == (5,)
    # f2 then sees only the IoT skip, zero-padded to 250
    states = forward_all(dnn, x, (1, 1, 0))
    assert states["e1"] is NULL
    expected_f2 = node_forward(dnn, "f2", np.pad(x, ((0, 0), (0, 250 - 23))))
    np.testing.assert_array_equal(states["f2"], expected_f2)


def test_failed_nodes_validation():
    dnn = build_health("skip_one")
    assert failed_nodes(dnn, None) == set()
    assert failed_nodes(dnn, (0, 1, 0)) == {"f1", "e1"}
    with pytest.raises(ValueError):
        failed_nodes(dnn, (1, 1))
    with pytest.raises(ValueError):
        failed_nodes(dnn, (1, 2, 1))


def test_accuracy_guess_modes():
    dnn = build_health("none").init_weights(0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((600, 23)).astype(np.float32)
    y = rng.integers(0, 12, 600)
    assert accuracy(dnn, x, y, (0, 0, 0)) == pytest.approx(1 / 12, abs=0)
    sampled = accuracy(dnn, x, y, (0, 0, 0), guess_mode="sampled", seed=4)
    assert sampled == accuracy(dnn, x, y, (0, 0, 0), guess_mode="sampled", seed=4)
    assert abs(sampled - 1 / 12) < 0.05
    alive = accuracy(dnn, x, y)
    preds = np.argmax(distributed_forward(dnn, x).logits, axis=1)
    assert alive == pytest.approx(np.mean(preds == y))
    with pytest.raises(ValueError):
        accuracy(dnn, x, y, guess_mode="coin")
    with pytest.raises(ValueError):
        accuracy(dnn, x[:0], y[:0])


def test_inputs_validation():
    dnn = build_health("none").init_weights(0)
    with pytest.raises(ShapeError):
        distributed_forward(dnn, np.zeros(22))


def test_accuracy_matches_per_combination_rerun():
    """Each failure combination against a re-run that zeroes node outputs by hand."""
    dnn = build_health("skip_one").init_weights(1, np.float64)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 23))
    y = rng.integers(0, 12, 200)
    layers = dnn.layers

    def slab(nid, h):
        for layer in layers[nid]:
            h = h @ layer.weights.T + layer.bias
            h = np.maximum(h, 0) if layer.activation == "relu" else h
        return h

    def pad(h, n=250):
        return np.hstack([h, np.zeros((h.shape[0], n - h.shape[1]))])

    for f1 in (0, 1):
        for f2 in (0, 1):
            for e1 in (0, 1):
                e1_out = slab("e1", x) if e1 else None
                f2_in = [v for v in (e1_out, pad(x)) if v is not None]
                f2_out = slab("f2", sum(f2_in)) if f2 else None
                f1_in = [v for v in (f2_out, e1_out) if v is not None]
                f1_out = slab("f1", sum(f1_in)) if f1 and f1_in else None
                c_in = [v for v in (f1_out, f2_out) if v is not None]
                if c_in:
                    expected = float(np.mean(np.argmax(slab("cloud", sum(c_in)), axis=1) == y))
                else:
                    expected = 1 / 12
                assert accuracy(dnn, x, y, (f1, f2, e1)) == pytest.approx(expected, abs=1e-12)


vectors = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=n, max_size=n).map(np.array)
)
operand = st.one_of(st.just(NULL), vectors)


def same(a, b):
    if is_null(a) or is_null(b):
        return is_null(a) and is_null(b)
    return a.shape == b.shape and np.allclose(a, b, rtol=1e-12, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(operand, min_size=1, max_size=6), st.randoms())
def test_add_is_commutative(ops, rnd):
    shuffled = list(ops)
    rnd.shuffle(shuffled)
    assert same(add_inputs(ops), add_inputs(shuffled))


@settings(max_examples=200, deadline=None)
@given(operand, operand, operand)
def test_add_is_associative(a, b, c):
    assert same(add_inputs([add_inputs([a, b]), c]), add_inputs([a, add_inputs([b, c])]))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_null_is_identity_and_absorbs_only_when_alone(v):
    assert same(add_inputs([v, NULL]), v)
    assert add_inputs([NULL]) is NULL


@settings(max_examples=200, deadline=None)
@given(vectors, vectors)
def test_add_pads_short_operands_with_zeros_at_the_tail(a, b):
    out = add_inputs([a, b])
    n = max(len(a), len(b))
    assert len(out) == n
    for i in range(n):
        expect = (a[i] if i < len(a) else 0.0) + (b[i] if i < len(b) else 0.0)
        assert out[i] == pytest.approx(expect)

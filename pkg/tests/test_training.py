import numpy as np
import pytest

from fogguard.bundle import load_bundle, save_bundle
from fogguard.data import Dataset, split_indices, synth_activity
from fogguard.inference import distributed_forward
from fogguard.nn import LossSpec, OptimizerSpec, batch_loss_and_grad, grad_check, numeric_gradient
from fogguard.topology import DnnSpec, PartitionMap, PhysicalNode, build_distributed, build_health
from fogguard.training import (
    GraphNetwork,
    TrainConfig,
    TrainingDiverged,
    graph_backward,
    graph_forward,
    select_best,
    train,
)

from helpers import random_chain, random_inputs, random_tree


def test_select_best():
    assert select_best([0.5, 0.9, 0.7]) == 2
    assert select_best([0.4, 0.4, 0.4]) == 1
    assert select_best([0.1, 0.2, 0.3, 0.4]) == 4
    assert select_best([{"val_accuracy": 0.2}, {"val_accuracy": 0.6}]) == 2
    with pytest.raises(ValueError):
        select_best([])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_graph_forward_matches_inference_module():
    rng = np.random.default_rng(0)
    for _ in range(10):
        dnn = random_tree(rng).init_weights(1, np.float64)
        x = random_inputs(rng, dnn, batch=4)
        logits, _ = graph_forward(dnn, x)
        np.testing.assert_allclose(logits, distributed_forward(dnn, x).logits, atol=1e-12)


def test_drop_skips_reproduces_vanilla():
    dfg = build_health("skip_one").init_weights(0, np.float64)
    van = dfg.without_skips()
    x = np.random.default_rng(1).standard_normal((3, 23))
    np.testing.assert_allclose(graph_forward(dfg, x, drop_skips=True)[0], graph_forward(van, x)[0], atol=1e-12)


def test_backprop_matches_finite_differences_on_small_graphs():
    rng = np.random.default_rng(4)
    for i in range(6):
        make = random_tree if i % 2 else random_chain
        dnn = make(rng).init_weights(i, np.float64)
        x = random_inputs(rng, dnn, batch=3)
        y = rng.integers(0, dnn.spec.output_dim, 3)
        assert grad_check(GraphNetwork(dnn), x, y) < 1e-4


def test_padded_slots_receive_no_gradient():
    """A 2-wide skip into a 3-wide expansion: only its own slots pass gradient back."""
    spec = DnnSpec(2, (2, 3), 2)
    nodes = [
        PhysicalNode("iot", "iot", parents=("a",)),
        PhysicalNode("a", "edge", (1,), parents=("b",)),
        PhysicalNode("b", "fog", (2,), parents=("cloud",)),
        PhysicalNode("cloud", "cloud", (3,)),
    ]
    dnn = build_distributed(
        spec, nodes, PartitionMap.from_nodes(nodes), "none", extra_hyperconnections=[("a", "cloud")]
    ).init_weights(0, np.float64)
    assert dnn.expansion_widths["cloud"] == 3
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2))
    y = np.array([0, 1])
    logits, cache = graph_forward(dnn, x)
    _, g = batch_loss_and_grad(LossSpec(), logits, y)
    grads = graph_backward(dnn, cache, g)
    net = GraphNetwork(dnn)
    for p, ga in zip(dnn.parameters(), grads):
        np.testing.assert_allclose(ga, numeric_gradient(lambda: net.loss(x, y), p), atol=1e-8)


def test_xor_on_two_nodes_reaches_full_train_accuracy():
    base = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float32)
    x = np.tile(base, (8, 1))
    y = np.tile(np.array([0, 1, 1, 0]), 8)
    ds = Dataset(x, y, 2, {"train": np.arange(32), "val": np.arange(32), "test": np.arange(32)}, "xor")
    spec = DnnSpec(2, (8, 8), 2)
    nodes = [
        PhysicalNode("iot", "iot", parents=("edge",)),
        PhysicalNode("edge", "edge", (1,), parents=("cloud",)),
        PhysicalNode("cloud", "cloud", (2, 3)),
    ]
    dnn = build_distributed(spec, nodes, PartitionMap.from_nodes(nodes), "none")
    cfg = TrainConfig(OptimizerSpec(learning_rate=0.01, batch_size=8), epochs=500, seed=0)
    model = train(dnn, ds, cfg)
    pred = np.argmax(distributed_forward(model.dnn, x).logits, axis=1)
    assert np.mean(pred == y) == 1.0
    assert model.best_epoch <= 500


def test_training_is_deterministic_and_keeps_best_epoch():
    ds = synth_activity(n=1500, seed=2)
    cfg = TrainConfig(OptimizerSpec(batch_size=256), epochs=3, seed=5)
    a = train(build_health("skip_one"), ds, cfg)
    b = train(build_health("skip_one"), ds, cfg)
    for x, y in zip(a.dnn.parameters(), b.dnn.parameters()):
        np.testing.assert_array_equal(x, y)
    assert a.history == b.history
    assert len(a.history) == 3
    assert a.val_accuracy == max(h["val_accuracy"] for h in a.history)
    xv, yv = ds.split_inputs("val")
    pred = np.argmax(distributed_forward(a.dnn, xv).logits, axis=1)
    assert np.mean(pred == yv) == pytest.approx(a.val_accuracy)


def test_divergence_is_reported():
    ds = synth_activity(n=400)
    ds.features[ds.splits["train"][0], 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(build_health("none"), ds, TrainConfig(OptimizerSpec(batch_size=64), epochs=1))


def test_weighted_training_runs():
    ds = synth_activity(n=600)
    loss = LossSpec("weighted_cross_entropy", np.linspace(0.5, 1.5, 12))
    model = train(build_health("none"), ds, TrainConfig(OptimizerSpec(batch_size=128), epochs=1, loss=loss))
    assert np.isfinite(model.history[0]["train_loss"])


def test_bundle_round_trip(tmp_path):
    dnn = build_health("skip_one").init_weights(3)
    save_bundle(tmp_path / "m", dnn, {"preset": "health", "fog_layers": [2, 3]}, "skip_one", seed=3)
    back, manifest = load_bundle(tmp_path / "m")
    assert manifest["seed"] == 3
    assert manifest["skip_hyperconnections"] == [[h.src, h.dst] for h in dnn.skip_connections]
    for x, y in zip(dnn.parameters(), back.parameters()):
        np.testing.assert_array_equal(x, y)
    (tmp_path / "m" / "model.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_bundle(tmp_path / "m")


def test_same_split_seed_gives_same_splits_across_variants():
    a, b = synth_activity(n=300, split_seed=4), synth_activity(n=300, split_seed=4)
    for k in a.splits:
        np.testing.assert_array_equal(a.splits[k], b.splits[k])
    np.testing.assert_array_equal(split_indices(300, 4)["test"], a.splits["test"])


def test_reference_optimizers():
    from fogguard.config import load_config, training_config
    from fogguard.training import REFERENCE_OPTIMIZERS

    health, camera = REFERENCE_OPTIMIZERS["health"], REFERENCE_OPTIMIZERS["camera"]
    assert (health.kind, health.batch_size, health.learning_rate) == ("adam", 1024, 0.001)
    assert (camera.kind, camera.batch_size, camera.learning_rate) == ("adam", 64, 0.1)
    shipped = training_config(load_config("health"), 0).optimizer
    assert (shipped.batch_size, shipped.learning_rate) == (1024, 0.001)
    assert training_config(load_config("camera"), 0, np.ones(3)).optimizer.batch_size == 64

"""Mixture-of-experts routing: weight tables, gates, gradient sparsity."""

import numpy as np
import pytest

from m3ad.errors import ContractError, ShapeError
from m3ad.moe import (MMoELayer, Routing, class_only_weights, expert_groups,
                      fixed_routing, label_guided_weights, task_routing)
from m3ad.numerics import Tensor


def test_expert_groups_partition():
    assert expert_groups(8, 2) == ((2, 3), (4, 5), (6, 7))
    assert expert_groups(11, 2) == ((2, 3, 4), (5, 6, 7), (8, 9, 10))
    assert expert_groups(5, 2) == ((2,), (3,), (4,))


def test_label_guided_weight_table():
    w = label_guided_weights(np.array([0, 1, 2]), 8, 2, 0.3, np.float64)
    expected = np.array([
        [0.15, 0.15, 0.35, 0.35, 0.0, 0.0, 0.0, 0.0],
        [0.15, 0.15, 0.0, 0.0, 0.35, 0.35, 0.0, 0.0],
        [0.15, 0.15, 0.0, 0.0, 0.0, 0.0, 0.35, 0.35],
    ])
    np.testing.assert_allclose(w, expected, atol=1e-12)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_label_guided_weights_contracts():
    with pytest.raises(ContractError):
        label_guided_weights(np.array([3]), 8, 2, 0.3, np.float64)
    with pytest.raises(ShapeError):
        label_guided_weights(np.array([[0]]), 8, 2, 0.3, np.float64)


def test_class_only_weight_table():
    np.testing.assert_array_equal(
        class_only_weights(1, 8, 2, np.float64),
        [0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0])
    np.testing.assert_array_equal(
        class_only_weights(0, 5, 2, np.float64),
        [0.0, 0.0, 1.0, 0.0, 0.0])
    with pytest.raises(ContractError):
        class_only_weights(3, 8, 2, np.float64)


def test_routing_constructors():
    r = task_routing("diagnosis")
    assert r.kind == "task" and r.task == "diagnosis"
    with pytest.raises(ContractError):
        task_routing("segmentation")
    f = fixed_routing(np.ones(8) / 8)
    assert f.kind == "fixed" and f.weights.shape == (8,)


def _layer(seed=5, dim=8):
    return MMoELayer(np.random.default_rng(seed), dim, 8, 2, 2, 1.0, np.float64)


def test_gate_weights_on_simplex(rng):
    layer = _layer()
    for _ in range(100):
        x = Tensor(rng.standard_normal((3, 6, 8)) * 3.0)
        for task in ("diagnosis", "change"):
            w = layer.gate_weights(x, task).data
            assert (w >= 0).all()
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_gate_temperature_scales_logits(rng):
    hot = MMoELayer(np.random.default_rng(5), 8, 8, 2, 2, 2.0, np.float64)
    ref = _layer(5)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    w_hot = hot.gate_weights(x, "diagnosis").data
    fla = ref.feature_summary(x)
    logits = ref.gate_diagnosis(fla).data
    manual = np.exp(logits / 2.0)
    manual /= manual.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w_hot, manual, atol=1e-10)


def test_task_gates_are_independent(rng):
    layer = _layer()
    x = Tensor(rng.standard_normal((2, 4, 8)))
    before = layer(x, task_routing("change")).data.copy()
    before_diag = layer(x, task_routing("diagnosis")).data.copy()
    layer.gate_diagnosis.weight.data += 0.5
    np.testing.assert_array_equal(layer(x, task_routing("change")).data, before)
    assert np.abs(layer(x, task_routing("diagnosis")).data - before_diag).max() > 1e-9


def test_shared_feature_attention_affects_both_tasks(rng):
    layer = _layer()
    x = Tensor(rng.standard_normal((2, 4, 8)))
    before = {t: layer(x, task_routing(t)).data.copy() for t in ("diagnosis", "change")}
    layer.feature_attn.weight.data += 0.5
    for task in ("diagnosis", "change"):
        assert np.abs(layer(x, task_routing(task)).data - before[task]).max() > 1e-9


def test_task_routing_records_to_sink(rng):
    layer = _layer()
    sink = []
    routing = Routing(kind="task", task="diagnosis", sink=sink)
    layer(Tensor(rng.standard_normal((3, 4, 8))), routing)
    assert len(sink) == 1 and sink[0].shape == (3, 8)
    np.testing.assert_allclose(sink[0].sum(axis=1), 1.0, atol=1e-6)


def test_fixed_one_hot_selects_single_expert(rng):
    layer = _layer()
    x = Tensor(rng.standard_normal((2, 4, 8)))
    w = np.zeros(8)
    w[3] = 1.0
    out = layer(x, fixed_routing(w))
    np.testing.assert_allclose(out.data, layer.experts[3](x).data, atol=1e-12)


def test_fixed_routing_zero_columns_get_no_gradient(rng):
    layer = _layer()
    x = Tensor(rng.standard_normal((2, 4, 8)))
    w = label_guided_weights(np.array([0, 0]), 8, 2, 0.3, np.float64)
    out = layer(x, fixed_routing(w))
    out.sum().backward()
    for e in (0, 1, 2, 3):  # shared pair + class-0 pair carry weight
        assert layer.experts[e].fc1.weight.grad is not None
    for e in (4, 5, 6, 7):  # other classes' experts stay out of the graph
        for p in layer.experts[e].parameters():
            assert p.grad is None
    for p in layer.gate_parameters().values():
        assert p.grad is None


def test_fixed_routing_weight_contracts(rng):
    layer = _layer()
    x = Tensor(rng.standard_normal((2, 4, 8)))
    # 1-D weights broadcast over the batch
    out = layer(x, fixed_routing(np.ones(8) / 8))
    assert out.shape == (2, 4, 8)
    with pytest.raises(ShapeError):
        layer(x, fixed_routing(np.ones((3, 8)) / 8))
    with pytest.raises(ContractError):
        layer(x, fixed_routing(np.zeros(8)))
    with pytest.raises(ContractError):
        layer(x, Routing(kind="mystery"))
    with pytest.raises(ShapeError):
        layer(Tensor(rng.standard_normal((2, 8))), fixed_routing(np.ones(8) / 8))


def test_fixed_routing_matches_explicit_sum(rng):
    layer = _layer()
    x = Tensor(rng.standard_normal((2, 4, 8)))
    w = np.array([[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                  [0.0, 0.25, 0.75, 0.0, 0.0, 0.0, 0.0, 0.0]])
    out = layer(x, fixed_routing(w)).data
    expected = np.zeros_like(out)
    for e in range(8):
        expert_out = layer.experts[e](x).data
        expected += w[:, e][:, None, None] * expert_out
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gate_parameters_cover_gate_path_only():
    layer = _layer()
    names = set(layer.gate_parameters())
    assert names == {"feature_attn.weight", "feature_attn.bias",
                     "gate_diagnosis.weight", "gate_change.weight"}

import numpy as np
import pytest

from xnode import autodiff as ad
from xnode.autodiff import Tensor
from xnode.backbones import Linear
from xnode.data import generate_synthetic
from xnode.graph import build_knn_graph
from xnode.context import LabelSet, build_all_contexts
from xnode.model import (CONTEXT_DIM, TrainConfig, TrainingError, XNodeModel, alignment_target,
                         explanation_vectors, joint_loss, predict, train)

from .support import ce_only_reference, model_gradient_errors, small_config, tiny_problem


def zero_linear(layer: Linear):
    layer.W.data[:] = 0
    layer.b.data[:] = 0


def test_reasoner_with_zero_weights_outputs_half():
    m = XNodeModel(small_config("gcn"), 5, 3)
    zero_linear(m.reasoner1)
    zero_linear(m.reasoner2)
    np.testing.assert_array_equal(m.reason(Tensor(np.ones((4, CONTEXT_DIM)))).data, 0.5)


def test_reasoner_hand_computation():
    m = XNodeModel(small_config("gcn", reasoner_hidden=2), 5, 3)
    W1 = np.zeros((CONTEXT_DIM, 2))
    W1[0, 0], W1[1, 1] = 1.0, -1.0
    m.reasoner1.W.data, m.reasoner1.b.data = W1, np.array([[0.0, 0.5]])
    m.reasoner2.W.data = np.full((2, CONTEXT_DIM), 2.0)
    m.reasoner2.b.data = np.full((1, CONTEXT_DIM), -1.0)
    c = np.zeros((1, CONTEXT_DIM))
    c[0, :2] = [0.5, 2.0]
    # hidden = relu([0.5, -1.5]) = [0.5, 0]; pre = 2*0.5 - 1 = 0
    np.testing.assert_allclose(m.reason(Tensor(c)).data, 0.5)
    with pytest.raises(ad.ShapeError):
        m.reason(Tensor(np.zeros((1, 3))))


def test_classifier_reads_concatenation():
    m = XNodeModel(small_config("gcn"), 5, 3)
    H, E = Tensor(np.ones((2, 6))), Tensor(np.zeros((2, CONTEXT_DIM)))
    z = np.concatenate([H.data, E.data], axis=1)
    fc1, fc2 = m.classifier.fc1, m.classifier.fc2
    ref = np.maximum(z @ fc1.W.data + fc1.b.data, 0) @ fc2.W.data + fc2.b.data
    np.testing.assert_allclose(m.classify(H, E).data, ref)
    assert m.decode(E).shape == (2, 6)


def test_joint_loss_values():
    logits = Tensor(np.zeros((2, 4)))
    E = Tensor(np.full((2, CONTEXT_DIM), 0.5))
    target = np.zeros((2, CONTEXT_DIM))
    H = Tensor(np.ones((2, 3)))
    total, parts = joint_loss(logits, [0, 1], E, target, Tensor(np.zeros((2, 3))), H, 0.1, 0.2)
    assert parts["ce"] == pytest.approx(np.log(4))
    assert parts["align"] == pytest.approx(CONTEXT_DIM * 0.25)
    assert parts["recon"] == pytest.approx(3.0)
    assert total.item() == pytest.approx(np.log(4) + 0.1 * 1.75 + 0.2 * 3.0)
    with pytest.raises(ValueError):
        joint_loss(logits, [0, 1], E, target, H, H, -0.1, 0.0)
    ce_only, parts = joint_loss(logits, [0, 1], None, None, None, None, 0.5, 0.5)
    assert ce_only.item() == parts["total"] == parts["ce"]


def test_detached_reconstruction_blocks_backbone_gradient():
    H = Tensor(np.ones((2, 3)), requires_grad=True)
    H_hat = Tensor(np.zeros((2, 3)), requires_grad=True)
    E = Tensor(np.zeros((2, CONTEXT_DIM)), requires_grad=True)
    logits = Tensor(np.zeros((2, 2)))
    joint_loss(logits, [0, 1], E, np.zeros((2, CONTEXT_DIM)), H_hat, H, 0.0, 1.0)[0].backward()
    assert H.grad is None
    np.testing.assert_allclose(H_hat.grad, -1.0)


def test_alignment_target_modes():
    C = np.array([[0.0, 2.0]])
    np.testing.assert_allclose(alignment_target(C), [[0.5, 1 / (1 + np.exp(-2))]])
    np.testing.assert_array_equal(alignment_target(C, "raw"), C)


@pytest.mark.parametrize("kind", ["gcn", "gat", "gin"])
@pytest.mark.parametrize("detach", [False, True])
def test_full_model_gradients(kind, detach):
    errors = model_gradient_errors(kind, detach)
    assert max(errors.values()) <= 1e-4, errors


def test_training_is_deterministic():
    X, y, g, C, mask = tiny_problem(1)
    cfg = small_config("gcn", epochs=15)
    (m1, r1), (m2, r2) = (train(g, X, C, y, (mask, ~mask), cfg) for _ in range(2))
    assert [e.total for e in r1.epochs] == [e.total for e in r2.epochs]
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])


def test_logged_total_decomposes():
    X, y, g, C, mask = tiny_problem(2)
    cfg = small_config("gat", epochs=20, alpha=0.3, beta=0.7)
    _, report = train(g, X, C, y, (mask, ~mask), cfg)
    for e in report.epochs:
        assert abs(e.total - (e.ce + 0.3 * e.align + 0.7 * e.recon)) <= 1e-9


def test_zero_weights_match_cross_entropy_only_training():
    X, y, g, C, mask = tiny_problem(3)
    cfg = small_config("gcn", epochs=25, alpha=0.0, beta=0.0)
    model, report = train(g, X, C, y, (mask, np.zeros_like(mask)), cfg)
    ref_model, ces = ce_only_reference(cfg, X, y, g, C, mask)
    assert [e.ce for e in report.epochs] == ces
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, ref_model.state_dict()[k])


def test_sgd_decreases_cross_entropy_early():
    X, y, g, C, mask = tiny_problem(4)
    cfg = small_config("gcn", epochs=10, optimizer="sgd", lr=0.05, alpha=0.0, beta=0.0)
    _, report = train(g, X, C, y, (mask, ~mask), cfg)
    ces = [e.ce for e in report.epochs]
    assert all(b < a for a, b in zip(ces, ces[1:])), ces


def test_baseline_and_layerwise_variants_train():
    X, y, g, C, mask = tiny_problem(5)
    for cfg in (small_config("gin", epochs=5, use_reasoner=False),
                small_config("gcn", epochs=5, inject_mode="layerwise", layers=3)):
        model, report = train(g, X, C, y, (mask, ~mask), cfg)
        _, probs = predict(model, g, X, C)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert len(report.epochs) == 5


def test_training_rejects_bad_inputs():
    X, y, g, C, mask = tiny_problem(6)
    with pytest.raises(ValueError):
        train(g, X, C, y, (mask, mask), small_config("gcn", epochs=2))
    X_huge = X * 1e300
    with pytest.raises(TrainingError), np.errstate(all="ignore"):
        train(g, X_huge, C, y, (mask, ~mask), small_config("gcn", epochs=2))
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(d_e=4)


def test_save_and_load_reproduce_predictions(tmp_path):
    X, y, g, C, mask = tiny_problem(7)
    model, _ = train(g, X, C, y, (mask, ~mask), small_config("gat", epochs=5))
    model.save(tmp_path / "m.ckpt", extra={"method": "GAT + Reasoner"})
    back, meta = XNodeModel.load(tmp_path / "m.ckpt")
    assert meta["method"] == "GAT + Reasoner"
    np.testing.assert_array_equal(predict(back, g, X, C)[1], predict(model, g, X, C)[1])
    E = explanation_vectors(back, C)
    assert E.shape == (12, CONTEXT_DIM) and ((E > 0) & (E < 1)).all()


def test_synthetic_benchmark_is_learnable():
    b = generate_synthetic(seed=42)
    g = build_knn_graph(b.X, 5)
    C, _ = build_all_contexts(g, LabelSet(b.labels, b.train_mask), b.X)
    _, report = train(g, b.X, C, b.labels, (b.train_mask, b.val_mask), TrainConfig(seed=42))
    assert report.best_val_acc >= 0.95

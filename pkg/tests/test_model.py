import numpy as np
import pytest

from graphter import autodiff as ad
from graphter.autodiff import Tensor
from graphter.autodiff.checkpoint import CheckpointError
from graphter.graph import knn_graph
from graphter.model import (
    ARCHITECTURES,
    ClassifierHead,
    EdgeConvLayer,
    GraphTerModel,
    SegmentationHead,
    end_to_end_gradcheck,
    transformation_loss,
)


def edge_oracle(x, nbrs, layer, act):
    """Explicit per-edge messages followed by an elementwise max (no batchnorm)."""
    th, ph, b = layer.theta.data, layer.phi.data, layer.bias.data
    out = np.empty((x.shape[0], th.shape[1]))
    for i in range(x.shape[0]):
        msgs = []
        for j in nbrs[i]:
            m = (x[j] - x[i]) @ th + x[i] @ ph + b
            msgs.append(act(m))
        out[i] = np.max(msgs, axis=0)
    return out


def relu(v):
    return np.maximum(v, 0.0)


def leaky(v):
    return np.where(v > 0, v, 0.2 * v)


def test_edgeconv_collapses_to_relu():
    rng = np.random.default_rng(0)
    layer = EdgeConvLayer(3, 3, rng, np.float64, "relu", bn=False)
    layer.theta.data[:] = 0
    layer.phi.data = np.eye(3)
    layer.bias.data[:] = 0
    x = rng.standard_normal((8, 3))
    out = layer(Tensor(x), knn_graph(x, 3).neighbors).data
    np.testing.assert_array_equal(out, relu(x))


def test_edgeconv_single_neighbour():
    rng = np.random.default_rng(1)
    layer = EdgeConvLayer(3, 5, rng, np.float64, "leaky_relu", bn=False)
    x = rng.standard_normal((6, 3))
    nbrs = knn_graph(x, 1).neighbors
    out = layer(Tensor(x), nbrs).data
    j = nbrs[:, 0]
    expect = leaky((x[j] - x) @ layer.theta.data + x @ layer.phi.data + layer.bias.data)
    np.testing.assert_allclose(out, expect, atol=1e-12)


@pytest.mark.parametrize("act_name,act", [("relu", relu), ("leaky_relu", leaky)])
def test_edgeconv_matches_per_edge_oracle(act_name, act):
    rng = np.random.default_rng(2)
    layer = EdgeConvLayer(3, 4, rng, np.float64, act_name, bn=False)
    x = rng.standard_normal((6, 3))
    nbrs = knn_graph(x, 2).neighbors
    np.testing.assert_allclose(layer(Tensor(x), nbrs).data, edge_oracle(x, nbrs, layer, act), atol=1e-12)


def test_edgeconv_width_mismatch():
    layer = EdgeConvLayer(3, 4, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        layer(Tensor(np.zeros((5, 2), np.float32)), np.zeros((5, 2), dtype=np.int64))


def _cloud(n=32, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3))


def test_encode_deterministic_and_width():
    model = GraphTerModel("translation", "desk", seed=0).eval()
    pts = _cloud()
    nbrs = knn_graph(pts, 10).neighbors
    a = model.encode(pts, nbrs).features.data
    b = model.encode(pts, nbrs).features.data
    assert a.tobytes() == b.tobytes()
    arch = ARCHITECTURES["desk"]
    assert a.shape == (32, sum(arch.encoder_widths[: arch.shortcut_count])) == (32, 256)


def test_encode_permutation_equivariant():
    model = GraphTerModel("translation", "desk", seed=1).eval()
    pts = _cloud(seed=1)
    perm = np.random.default_rng(5).permutation(32)
    a = model.encode(pts, knn_graph(pts, 10).neighbors).features.data
    b = model.encode(pts[perm], knn_graph(pts[perm], 10).neighbors).features.data
    np.testing.assert_allclose(a[perm], b, atol=1e-5)


@pytest.mark.parametrize("kind,p", [("translation", 3), ("rotation", 3), ("shearing", 6)])
def test_decoder_output_shape(kind, p):
    model = GraphTerModel(kind, "desk", seed=0)
    pts = _cloud(16)
    nbrs = knn_graph(pts, 4).neighbors
    pred = model.forward(pts, pts + 0.01, nbrs, nbrs)
    assert pred.shape == (16, p)
    assert model.decoder.in_width == 2 * model.arch.representation_width


def test_decoder_not_symmetric_in_views():
    model = GraphTerModel("translation", "desk", seed=0).eval()
    pts = _cloud(16)
    nbrs = knn_graph(pts, 4).neighbors
    fo = model.encode(pts, nbrs).representation
    ft = model.encode(pts * 1.1, nbrs).representation
    a = model.decode_transform(fo, ft, nbrs).data
    b = model.decode_transform(ft, fo, nbrs).data
    assert not np.allclose(a, b)


def test_decoder_width_mismatch():
    model = GraphTerModel("translation", "desk")
    with pytest.raises(ad.ShapeError):
        model.decode_transform(Tensor(np.zeros((4, 5), np.float32)), Tensor(np.zeros((4, 5), np.float32)),
                               np.zeros((4, 2), dtype=np.int64))


def test_loss_unit_cases():
    t = np.array([[0.1], [0.0]])
    assert float(transformation_loss(Tensor(t), t, [True, True]).data) == 0.0
    loss = float(transformation_loss(Tensor(np.array([[0.3], [9.0]])), t, [True, False]).data)
    assert loss == (0.3 - 0.1) ** 2
    assert abs(loss - 0.04) < 1e-15
    other = float(transformation_loss(Tensor(np.array([[0.3], [-5.0]])), t, [True, False]).data)
    assert other == loss
    with pytest.raises(ValueError, match="empty"):
        transformation_loss(Tensor(t), t, [False, False])


def test_end_to_end_gradient():
    errors = end_to_end_gradcheck(seed=0)
    assert len(errors) == len(GraphTerModel("translation", "tiny").named_parameters())
    assert max(errors.values()) < 1e-3


def test_siamese_weights_shared():
    model = GraphTerModel("translation", "desk", seed=0).eval()
    pts, moved = _cloud(16), _cloud(16) + 0.05
    n1, n2 = knn_graph(pts, 4).neighbors, knn_graph(moved, 4).neighbors
    a1, b1 = model.encode(pts, n1).features.data, model.encode(moved, n2).features.data
    model.encoder.layers[0].phi.data += 0.1
    a2, b2 = model.encode(pts, n1).features.data, model.encode(moved, n2).features.data
    assert not np.array_equal(a1, a2) and not np.array_equal(b1, b2)


def test_zero_decoder_gives_zero_loss():
    model = GraphTerModel("translation", "desk", seed=0)
    model.decoder.out.weight.data[:] = 0
    model.decoder.out.bias.data[:] = 0
    pts = _cloud(16)
    nbrs = knn_graph(pts, 4).neighbors
    pred = model.forward(pts, pts, nbrs, nbrs)
    mask = np.zeros(16, bool)
    mask[:4] = True
    assert float(transformation_loss(pred, np.zeros((16, 3)), mask).data) == 0.0


def test_classifier_head_contracts():
    rng = np.random.default_rng(0)
    head = ClassifierHead(16, 4, rng)
    feats = rng.standard_normal((3 * 10, 16)).astype(np.float32)
    out = head(Tensor(feats), (3, 10), training=False).data
    assert out.shape == (3, 4)
    perm = np.concatenate([rng.permutation(10) + 10 * i for i in range(3)])
    np.testing.assert_allclose(head(Tensor(feats[perm]), (3, 10)).data, out, atol=1e-5)
    again = head(Tensor(feats), (3, 10), training=False).data
    assert again.tobytes() == out.tobytes()
    with pytest.raises(ad.ShapeError):
        head(Tensor(np.zeros((10, 8), np.float32)), (1, 10))


def test_linear_classifier_head():
    head = ClassifierHead(16, 4, np.random.default_rng(0), linear=True)
    assert len(head.named_parameters()) == 2
    assert head(Tensor(np.ones((5, 16), np.float32)), (1, 5)).shape == (1, 4)


def test_segment_head_contracts():
    rng = np.random.default_rng(1)
    head = SegmentationHead(8, 5, rng)
    feats = rng.standard_normal((2 * 12, 8)).astype(np.float32)
    g = head.global_features(Tensor(feats), (2, 12)).data
    assert np.all(g[:12] == g[0]) and np.all(g[12:] == g[12])
    out = head(Tensor(feats), (2, 12)).data
    assert out.shape == (24, 5)
    perm = rng.permutation(12)
    out_p = head(Tensor(feats[:12][perm]), (1, 12)).data
    np.testing.assert_allclose(out_p, out[:12][perm], atol=1e-5)


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    model = GraphTerModel("rotation", "tiny", seed=3, k=4)
    path = tmp_path / "m.gter"
    model.save(path)
    back, extra = GraphTerModel.load(path)
    assert extra == {}
    assert back.kind == "rotation" and back.k == 4
    for name, arr in model.state_arrays().items():
        assert back.state_arrays()[name].tobytes() == arr.tobytes()
    with pytest.raises(CheckpointError, match="mismatch"):
        GraphTerModel.load(path, expected=ARCHITECTURES["desk"])

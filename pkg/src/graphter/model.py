"""EdgeConv encoder/decoder for transformation regression, plus downstream heads."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .autodiff import checkpoint as ckpt
from .graph import knn_graph
from .transforms import PARAM_COUNT, check_kind

LEAKY_SLOPE = 0.2
DROPOUT_RATE = 0.5


def init_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def _widths(text) -> tuple:
    if isinstance(text, str):
        return tuple(int(w) for w in text.split(",") if w.strip())
    return tuple(int(w) for w in text)


@dataclass(frozen=True)
class Architecture:
    encoder_widths: tuple = (64, 64, 128)
    shortcut_count: int = 3
    decoder_widths: tuple = (128, 64)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", _widths(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", _widths(self.decoder_widths))
        if not 1 <= self.shortcut_count <= len(self.encoder_widths):
            raise ValueError(f"shortcut_count must be in [1, {len(self.encoder_widths)}]")

    @property
    def feature_width(self) -> int:
        """Width of the concatenated shortcut features used by downstream heads."""
        return sum(self.encoder_widths[: self.shortcut_count])

    @property
    def representation_width(self) -> int:
        """Width of each view's encoding as fed to the decoder."""
        if len(self.encoder_widths) > self.shortcut_count:
            return self.encoder_widths[-1]
        return self.feature_width

    def to_meta(self) -> dict:
        return {
            "encoder_widths": ",".join(map(str, self.encoder_widths)),
            "shortcut_count": str(self.shortcut_count),
            "decoder_widths": ",".join(map(str, self.decoder_widths)),
            "in_channels": str(self.in_channels),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Architecture":
        return cls(meta["encoder_widths"], int(meta["shortcut_count"]), meta["decoder_widths"],
                   int(meta.get("in_channels", 3)))


ARCHITECTURES = {
    "desk": Architecture((64, 64, 128), 3, (128, 64)),
    # widths of layers 6-8 are our choice; five shortcut layers give 1024-d features
    "full": Architecture((64, 64, 128, 256, 512, 512, 512, 1024), 5, (512, 256, 128)),
    "tiny": Architecture((8, 8), 2, (8,)),
}


def get_architecture(name: str) -> Architecture:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; expected one of {sorted(ARCHITECTURES)}") from None


class Dense:
    """Node-wise fully connected layer with optional batchnorm and activation."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32, bn: bool = False,
                 activation: Optional[str] = None):
        self.weight = init_uniform(rng, in_dim, (in_dim, out_dim), dtype)
        self.bias = init_uniform(rng, in_dim, (out_dim,), dtype)
        self.bn = BatchNormState.create(out_dim, dtype) if bn else None
        self.activation = activation
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"dense: input width {x.shape[-1]} != layer width {self.in_dim}")
        out = ad.linear(x, self.weight, self.bias)
        if self.bn is not None:
            out = ad.batchnorm(out, self.bn.gamma, self.bn.beta, self.bn, training)
        return _activate(out, self.activation)

    def named_parameters(self, prefix: str) -> dict:
        params = {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
        if self.bn is not None:
            params[f"{prefix}.bn.gamma"] = self.bn.gamma
            params[f"{prefix}.bn.beta"] = self.bn.beta
        return params

    def named_buffers(self, prefix: str) -> dict:
        if self.bn is None:
            return {}
        return {f"{prefix}.bn.running_mean": self.bn.running_mean, f"{prefix}.bn.running_var": self.bn.running_var}


def _activate(x: Tensor, activation: Optional[str]) -> Tensor:
    if activation is None:
        return x
    if activation == "relu":
        return ad.relu(x)
    if activation == "leaky_relu":
        return ad.leaky_relu(x, LEAKY_SLOPE)
    raise ValueError(f"unknown activation {activation!r}")


class EdgeConvLayer:
    """out_i = max_{j in N(i)} act(bn(theta (x_j - x_i) + phi x_i + bias))."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32, activation: str = "leaky_relu",
                 bn: bool = True):
        self.theta = init_uniform(rng, in_dim, (in_dim, out_dim), dtype)
        self.phi = init_uniform(rng, in_dim, (in_dim, out_dim), dtype)
        self.bias = init_uniform(rng, in_dim, (out_dim,), dtype)
        self.bn = BatchNormState.create(out_dim, dtype) if bn else None
        self.activation = activation
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor, neighbors: np.ndarray, training: bool = True) -> Tensor:
        m, c = x.shape
        if c != self.in_dim:
            raise ad.ShapeError(f"edgeconv: feature width {c} != layer input width {self.in_dim}")
        if neighbors.shape[0] != m:
            raise ad.ShapeError(f"edgeconv: graph has {neighbors.shape[0]} rows for {m} nodes")
        k = neighbors.shape[1]
        # theta (x_j - x_i) + phi x_i = (theta x)_j + ((phi - theta) x)_i
        tx = ad.matmul(x, self.theta)
        center = ad.add(ad.subtract(ad.matmul(x, self.phi), tx), self.bias)
        msg = ad.add(ad.reshape(ad.gather_rows(tx, neighbors.reshape(-1)), (m, k, self.out_dim)),
                     ad.reshape(center, (m, 1, self.out_dim)))
        if self.bn is not None:
            msg = ad.batchnorm(msg, self.bn.gamma, self.bn.beta, self.bn, training)
        msg = _activate(msg, self.activation)
        return ad.max_over_axis(msg, 1)[0]

    def named_parameters(self, prefix: str) -> dict:
        params = {f"{prefix}.theta": self.theta, f"{prefix}.phi": self.phi, f"{prefix}.bias": self.bias}
        if self.bn is not None:
            params[f"{prefix}.bn.gamma"] = self.bn.gamma
            params[f"{prefix}.bn.beta"] = self.bn.beta
        return params

    def named_buffers(self, prefix: str) -> dict:
        if self.bn is None:
            return {}
        return {f"{prefix}.bn.running_mean": self.bn.running_mean, f"{prefix}.bn.running_var": self.bn.running_var}


def _dynamic_neighbors(features: np.ndarray, batch_shape: tuple, k: int) -> np.ndarray:
    b, n = batch_shape
    feats = features.reshape(b, n, -1)
    return np.concatenate([knn_graph(feats[i], k).neighbors + i * n for i in range(b)], axis=0)


@dataclass
class Encoding:
    features: Tensor        # concatenated shortcut outputs (downstream features)
    representation: Tensor  # what the decoder consumes


class Encoder:
    def __init__(self, arch: Architecture, rng, dtype=np.float32):
        self.arch = arch
        widths = (arch.in_channels,) + arch.encoder_widths
        self.layers = [
            EdgeConvLayer(widths[i], widths[i + 1], rng, dtype, "relu" if i == 0 else "leaky_relu")
            for i in range(len(arch.encoder_widths))
        ]

    def __call__(self, x: Tensor, neighbors: np.ndarray, training: bool = True,
                 dynamic_k: Optional[int] = None, batch_shape: Optional[tuple] = None) -> Encoding:
        outs = []
        h = x
        for i, layer in enumerate(self.layers):
            nbrs = neighbors
            if dynamic_k is not None and i > 0:
                nbrs = _dynamic_neighbors(h.data, batch_shape, dynamic_k)
            h = layer(h, nbrs, training)
            outs.append(h)
        shortcuts = outs[: self.arch.shortcut_count]
        feats = shortcuts[0] if len(shortcuts) == 1 else ad.concat(shortcuts, axis=1)
        rep = outs[-1] if len(outs) > self.arch.shortcut_count else feats
        return Encoding(feats, rep)

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"encoder.{i}"))
        return out

    def named_buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(f"encoder.{i}"))
        return out


class Decoder:
    def __init__(self, arch: Architecture, num_params: int, rng, dtype=np.float32):
        widths = (2 * arch.representation_width,) + arch.decoder_widths
        self.layers = [EdgeConvLayer(widths[i], widths[i + 1], rng, dtype) for i in range(len(arch.decoder_widths))]
        # regression targets are signed reals: no activation, no batchnorm
        self.out = Dense(widths[-1], num_params, rng, dtype)
        self.in_width = widths[0]

    def __call__(self, x: Tensor, neighbors: np.ndarray, training: bool = True) -> Tensor:
        h = x
        for layer in self.layers:
            h = layer(h, neighbors, training)
        return self.out(h, training)

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"decoder.{i}"))
        out.update(self.out.named_parameters("decoder.out"))
        return out

    def named_buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(f"decoder.{i}"))
        return out


class GraphTerModel:
    """Siamese EdgeConv encoder plus a transformation decoder for one transformation kind."""

    def __init__(self, kind: str = "translation", arch: Architecture | str = "desk", seed: int = 0,
                 dtype=np.float32, k: int = 10, dynamic_graph: bool = False):
        self.kind = check_kind(kind)
        self.arch = get_architecture(arch) if isinstance(arch, str) else arch
        self.num_params = PARAM_COUNT[kind]
        self.dtype = np.dtype(dtype)
        self.k = k
        self.dynamic_graph = dynamic_graph
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.arch, rng, dtype)
        self.decoder = Decoder(self.arch, self.num_params, rng, dtype)
        self.training = True

    def train(self, mode: bool = True) -> "GraphTerModel":
        self.training = mode
        return self

    def eval(self) -> "GraphTerModel":
        return self.train(False)

    @property
    def feature_width(self) -> int:
        return self.arch.feature_width

    def encode(self, coords, neighbors: np.ndarray, batch_shape: Optional[tuple] = None) -> Encoding:
        x = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, dtype=self.dtype))
        if batch_shape is None:
            batch_shape = (1, x.shape[0])
        dyn = self.k if self.dynamic_graph else None
        return self.encoder(x, neighbors, self.training, dyn, batch_shape)

    def decode_transform(self, feat_orig: Tensor, feat_trans: Tensor, neighbors: np.ndarray) -> Tensor:
        """Predict per-node transformation parameters from both views' encodings.

        The decoder's EdgeConvs run on the original view's graph.
        """
        width = self.arch.representation_width
        if feat_orig.shape[1] != width or feat_trans.shape[1] != width:
            raise ad.ShapeError(f"decode_transform: feature widths {feat_orig.shape[1]} and "
                                f"{feat_trans.shape[1]} must both be {width}")
        joint = ad.concat([feat_orig, feat_trans], axis=1)
        return self.decoder(joint, neighbors, self.training)

    def forward(self, coords_orig, coords_trans, nbrs_orig: np.ndarray, nbrs_trans: np.ndarray,
                batch_shape: Optional[tuple] = None) -> Tensor:
        enc_o = self.encode(coords_orig, nbrs_orig, batch_shape)
        enc_t = self.encode(coords_trans, nbrs_trans, batch_shape)
        return self.decode_transform(enc_o.representation, enc_t.representation, nbrs_orig)

    def named_parameters(self) -> dict:
        out = self.encoder.named_parameters()
        out.update(self.decoder.named_parameters())
        return out

    def named_buffers(self) -> dict:
        out = self.encoder.named_buffers()
        out.update(self.decoder.named_buffers())
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def meta(self) -> dict:
        meta = self.arch.to_meta()
        meta.update(kind=self.kind, k=str(self.k), dynamic_graph=str(self.dynamic_graph).lower())
        return meta

    def state_arrays(self) -> dict:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        arrays.update(self.named_buffers())
        return arrays

    def load_arrays(self, arrays: dict) -> None:
        load_into(self.named_parameters(), self.named_buffers(), arrays)

    def save(self, path, extra: Optional[dict] = None) -> None:
        arrays = self.state_arrays()
        if extra:
            arrays.update(extra)
        ckpt.save(path, arrays, self.meta())

    @classmethod
    def load(cls, path, expected: Optional[Architecture] = None) -> tuple["GraphTerModel", dict]:
        """Rebuild a model from a checkpoint; returns the model and any non-model arrays."""
        arrays, meta = ckpt.load(path)
        try:
            arch = Architecture.from_meta(meta)
            kind = meta["kind"]
        except KeyError as exc:
            raise ckpt.CheckpointError(f"checkpoint header missing {exc.args[0]!r}") from None
        if expected is not None and arch != expected:
            raise ckpt.CheckpointError(f"architecture mismatch: checkpoint {arch}, expected {expected}")
        model = cls(kind, arch, k=int(meta.get("k", 10)), dynamic_graph=meta.get("dynamic_graph") == "true")
        own = set(model.state_arrays())
        model.load_arrays({n: a for n, a in arrays.items() if n in own})
        return model, {n: a for n, a in arrays.items() if n not in own}


def load_into(params: dict, buffers: dict, arrays: dict) -> None:
    missing = [n for n in list(params) + list(buffers) if n not in arrays]
    if missing:
        raise ckpt.CheckpointError(f"checkpoint missing arrays: {', '.join(missing[:5])}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ckpt.CheckpointError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].astype(p.dtype).copy()
    for name, buf in buffers.items():
        if arrays[name].shape != buf.shape:
            raise ckpt.CheckpointError(f"shape mismatch for {name}: {arrays[name].shape} vs {buf.shape}")
        buf[...] = arrays[name]


def checksum(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def transformation_loss(pred: Tensor, target, loss_mask: np.ndarray) -> Tensor:
    """Mean squared error over the masked nodes and all parameter components."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ad.ShapeError(f"transformation_loss: pred {pred.shape} vs target {target.shape}")
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if loss_mask.shape != (pred.shape[0],):
        raise ad.ShapeError(f"transformation_loss: mask shape {loss_mask.shape} for {pred.shape[0]} nodes")
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("transformation_loss: empty loss mask")
    diff = ad.subtract(pred, target)
    sq = ad.multiply(diff, diff)
    weighted = ad.multiply(sq, loss_mask.astype(pred.dtype)[:, None])
    total = ad.sum_over_axis(weighted)
    return ad.multiply(total, np.asarray(1.0 / (count * pred.shape[1]), dtype=pred.dtype))


def end_to_end_gradcheck(seed: int = 0, num_nodes: int = 6, k: int = 2, kind: str = "translation",
                         step: float = 1e-6, floor: float = 1e-6) -> dict:
    """Finite-difference check of the full pretext loss w.r.t. every model weight (64-bit).

    Returns the norm-wise relative error per parameter name. Pre-batchnorm biases have
    an exact zero gradient, hence the ``floor`` on the denominator.
    """
    from .autodiff.gradcheck import numeric_gradient, relative_error
    from .data import PointCloud
    from .transforms import apply_transform, sample_subset, sample_transform, target_params

    rng = np.random.default_rng(seed)
    model = GraphTerModel(kind, "tiny", seed=seed, dtype=np.float64, k=k)
    cloud = PointCloud(rng.uniform(-1.0, 1.0, (num_nodes, 3)))
    mask = sample_subset(cloud, "global", 0.5, rng)
    t = sample_transform(kind, "aniso", mask, rng)
    moved = apply_transform(cloud, t)
    nbrs_o = knn_graph(cloud.coords, k).neighbors
    nbrs_t = knn_graph(moved.coords, k).neighbors
    target, loss_mask = target_params(t, num_nodes)

    def loss_value():
        with ad.no_grad():
            pred = model.forward(cloud.coords, moved.coords, nbrs_o, nbrs_t)
            return float(transformation_loss(pred, target, loss_mask).data)

    params = model.named_parameters()
    with ad.Tape():
        pred = model.forward(cloud.coords, moved.coords, nbrs_o, nbrs_t)
        ad.backward(transformation_loss(pred, target, loss_mask))
    errors = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        original = p.data
        p.data = original.copy()
        numeric = numeric_gradient(loss_value, p.data, step)
        p.data = original
        errors[name] = relative_error(analytic, numeric, floor)
    return errors


# --- downstream heads ---------------------------------------------------------

class ClassifierHead:
    """Node-wise FC layers, max+mean pooling, then FC layers to class scores.

    With ``linear=True`` the head is a single linear map on the pooled encoder features.
    """

    def __init__(self, in_dim: int, num_classes: int, rng, dtype=np.float32, linear: bool = False,
                 node_widths: Sequence[int] = (128, 128, 256), fc_widths: Sequence[int] = (256, 128),
                 dropout: float = DROPOUT_RATE):
        self.in_dim, self.num_classes, self.linear = in_dim, num_classes, linear
        self.dropout = dropout
        if linear:
            self.node_layers = []
            self.fc = [Dense(2 * in_dim, num_classes, rng, dtype)]
        else:
            dims = (in_dim,) + tuple(node_widths)
            self.node_layers = [Dense(dims[i], dims[i + 1], rng, dtype, bn=True, activation="leaky_relu")
                                for i in range(len(node_widths))]
            fdims = (2 * dims[-1],) + tuple(fc_widths) + (num_classes,)
            self.fc = [Dense(fdims[i], fdims[i + 1], rng, dtype,
                             activation="leaky_relu" if i < len(fdims) - 2 else None)
                       for i in range(len(fdims) - 1)]

    def __call__(self, features: Tensor, batch_shape: tuple, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if features.shape[1] != self.in_dim:
            raise ad.ShapeError(f"classify_head: feature width {features.shape[1]} != {self.in_dim}")
        h = features
        for layer in self.node_layers:
            h = layer(h, training)
        b, n = batch_shape
        h3 = ad.reshape(h, (b, n, h.shape[1]))
        pooled = ad.concat([ad.max_over_axis(h3, 1)[0], ad.mean_over_axis(h3, 1)], axis=1)
        out = pooled
        for i, layer in enumerate(self.fc):
            if i > 0:
                # dropout feeds the last two FC layers
                out = ad.dropout(out, self.dropout, rng, training)
            out = layer(out, training)
        return out

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.node_layers):
            out.update(layer.named_parameters(f"head.node.{i}"))
        for i, layer in enumerate(self.fc):
            out.update(layer.named_parameters(f"head.fc.{i}"))
        return out

    def named_buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.node_layers):
            out.update(layer.named_buffers(f"head.node.{i}"))
        for i, layer in enumerate(self.fc):
            out.update(layer.named_buffers(f"head.fc.{i}"))
        return out


class SegmentationHead:
    """Node features joined with the globally max-pooled feature, then four node-wise FC layers."""

    def __init__(self, in_dim: int, num_parts: int, rng, dtype=np.float32, widths: Sequence[int] = (256, 256, 128)):
        self.in_dim, self.num_parts = in_dim, num_parts
        dims = (2 * in_dim,) + tuple(widths) + (num_parts,)
        self.layers = [
            Dense(dims[i], dims[i + 1], rng, dtype, bn=i < len(dims) - 2,
                  activation="leaky_relu" if i < len(dims) - 2 else None)
            for i in range(len(dims) - 1)
        ]

    def global_features(self, features: Tensor, batch_shape: tuple) -> Tensor:
        b, n = batch_shape
        f = features.shape[1]
        g = ad.max_over_axis(ad.reshape(features, (b, n, f)), 1)[0]
        return ad.reshape(ad.broadcast_to(ad.reshape(g, (b, 1, f)), (b, n, f)), (b * n, f))

    def __call__(self, features: Tensor, batch_shape: tuple, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        """Per-node log-probabilities over parts."""
        if features.shape[1] != self.in_dim:
            raise ad.ShapeError(f"segment_head: feature width {features.shape[1]} != {self.in_dim}")
        h = ad.concat([features, self.global_features(features, batch_shape)], axis=1)
        for layer in self.layers:
            h = layer(h, training)
        return ad.log_softmax(h, axis=1)

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"head.{i}"))
        return out

    def named_buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(f"head.{i}"))
        return out

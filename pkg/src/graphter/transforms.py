"""Node subset sampling and node-wise translation / rotation / shearing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import PointCloud
from .graph import nearest_to

KINDS = ("translation", "rotation", "shearing")
STRATEGIES = ("iso", "aniso")
MODES = ("global", "local")
PARAM_COUNT = {"translation": 3, "rotation": 3, "shearing": 6}
PARAM_NAMES = {
    "translation": ("dx", "dy", "dz"),
    "rotation": ("alpha", "beta", "gamma"),
    "shearing": ("s_xy", "s_xz", "s_yx", "s_yz", "s_zx", "s_zy"),
}
TRANSLATION_RANGE = 0.2
SHEAR_RANGE = 0.2
ROTATION_RANGE = math.radians(5.0)

_STRATEGY_ALIASES = {"iso": "iso", "isotropic": "iso", "aniso": "aniso", "anisotropic": "aniso"}


def canonical_strategy(strategy: str) -> str:
    try:
        return _STRATEGY_ALIASES[strategy.lower()]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}; expected iso or aniso") from None


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown transformation kind {kind!r}; expected one of {KINDS}")
    return kind


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}; expected global or local")
    return mode


def param_range(kind: str) -> float:
    return ROTATION_RANGE if check_kind(kind) == "rotation" else TRANSLATION_RANGE


@dataclass(frozen=True)
class SampleMask:
    indices: np.ndarray
    mode: str
    rate: float
    num_nodes: int

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.num_nodes, dtype=bool)
        m[self.indices] = True
        return m


@dataclass(frozen=True)
class NodeTransform:
    kind: str
    params: np.ndarray  # |selected| x P, row i belongs to mask.indices[i]
    strategy: str
    mask: SampleMask


def sample_count(num_nodes: int, rate: float) -> int:
    # the epsilon absorbs float noise such as 0.29 * 100 = 28.999...
    return max(1, int(math.floor(rate * num_nodes + 1e-9)))


def sample_subset(cloud: PointCloud, mode: str, rate: float, rng: np.random.Generator,
                  seed_index: int | None = None) -> SampleMask:
    """Pick ``floor(rate * N)`` nodes, either uniformly or as a seed node plus its nearest neighbours.

    The seed counts toward the budget in local mode.
    """
    check_mode(mode)
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"sample_subset: rate must be in (0, 1], got {rate}")
    n = cloud.num_points
    if n < 1:
        raise ValueError("sample_subset: empty cloud")
    count = sample_count(n, rate)
    if mode == "global":
        idx = np.sort(rng.choice(n, size=count, replace=False))
    else:
        seed = int(rng.integers(n)) if seed_index is None else int(seed_index)
        idx = nearest_to(cloud.coords, seed, count)
    return SampleMask(np.asarray(idx, dtype=np.int64), mode, float(rate), n)


def sample_transform(kind: str, strategy: str, mask: SampleMask, rng: np.random.Generator) -> NodeTransform:
    check_kind(kind)
    strategy = canonical_strategy(strategy)
    if mask.indices.size == 0 or mask.indices.max() >= mask.num_nodes:
        raise ValueError("sample_transform: invalid mask")
    p, lim = PARAM_COUNT[kind], param_range(kind)
    m = mask.indices.size
    if strategy == "iso":
        params = np.repeat(rng.uniform(-lim, lim, (1, p)), m, axis=0)
    else:
        params = rng.uniform(-lim, lim, (m, p))
    return NodeTransform(kind, params, strategy, mask)


def rotation_matrices(angles: np.ndarray) -> np.ndarray:
    """Rz(gamma) @ Ry(beta) @ Rx(alpha) for each row (alpha, beta, gamma)."""
    a, b, g = angles[:, 0], angles[:, 1], angles[:, 2]
    ca, sa, cb, sb, cg, sg = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(g), np.sin(g)
    R = np.empty((angles.shape[0], 3, 3))
    R[:, 0, 0] = cg * cb
    R[:, 0, 1] = cg * sb * sa - sg * ca
    R[:, 0, 2] = cg * sb * ca + sg * sa
    R[:, 1, 0] = sg * cb
    R[:, 1, 1] = sg * sb * sa + cg * ca
    R[:, 1, 2] = sg * sb * ca - cg * sa
    R[:, 2, 0] = -sb
    R[:, 2, 1] = cb * sa
    R[:, 2, 2] = cb * ca
    return R


def shear_matrices(params: np.ndarray) -> np.ndarray:
    """Unit-diagonal matrices with off-diagonals (s_xy, s_xz, s_yx, s_yz, s_zx, s_zy)."""
    M = np.broadcast_to(np.eye(3), (params.shape[0], 3, 3)).copy()
    M[:, 0, 1], M[:, 0, 2] = params[:, 0], params[:, 1]
    M[:, 1, 0], M[:, 1, 2] = params[:, 2], params[:, 3]
    M[:, 2, 0], M[:, 2, 1] = params[:, 4], params[:, 5]
    return M


def transform_matrices(t: NodeTransform) -> np.ndarray | None:
    if t.kind == "rotation":
        return rotation_matrices(t.params)
    if t.kind == "shearing":
        return shear_matrices(t.params)
    return None


def apply_transform(cloud: PointCloud, t: NodeTransform) -> PointCloud:
    """Return a new cloud with each selected node moved by its own parameter row."""
    if cloud.coords.shape[1] != 3:
        raise ValueError(f"apply_transform: expected 3-d coordinates, got {cloud.coords.shape[1]}")
    idx = t.mask.indices
    if idx.size and idx.max() >= cloud.num_points:
        raise ValueError("apply_transform: mask index out of range for cloud")
    if t.params.shape != (idx.size, PARAM_COUNT[t.kind]):
        raise ValueError(f"apply_transform: params shape {t.params.shape} does not match "
                         f"{idx.size} selected nodes x {PARAM_COUNT[t.kind]} parameters")
    out = cloud.coords.copy()
    sel = out[idx]
    if t.kind == "translation":
        out[idx] = sel + t.params
    else:
        out[idx] = np.einsum("nij,nj->ni", transform_matrices(t), sel)
    return cloud.with_coords(out)


def target_params(t: NodeTransform, num_nodes: int, dtype=np.float64) -> tuple[Tensor, np.ndarray]:
    """Per-node regression targets (zeros off the mask) and the boolean loss mask."""
    targets = np.zeros((num_nodes, PARAM_COUNT[t.kind]), dtype=dtype)
    targets[t.mask.indices] = t.params
    mask = np.zeros(num_nodes, dtype=bool)
    mask[t.mask.indices] = True
    return Tensor(targets), mask

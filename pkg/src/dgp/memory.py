"""Per-layer basis pools and the orthogonal weight-update rule.

After each task two matrices are collected per constrained layer from a
seeded memory draw: the layer inputs (stabilizing outputs) and the chained
column-sum gradient rows (stabilizing input gradients).  Each matrix is
residualized against the existing pool, decomposed, and its leading right
singular vectors join the pool.  During later tasks every shared-layer
weight gradient is projected onto the orthogonal complement of its pool, so
updates cannot disturb what the pool spans.  Conv layers are handled in
flattened-kernel space: both matrices are unrolled into receptive-field
patches, which makes their bases constrain kernel updates directly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .convops import im2col
from .errors import ConfigError
from .linalg import OrthonormalBasis, orthonormalize_append, project_out, rank_select, svd
from .network import Gradients, Network

PROVENANCE_TAGS = ("activation", "gradient", "compressed")

# residual directions this small relative to the dominant one are noise
_NOISE_GUARD = 1e-10
_COMPRESS_HEADROOM = 1

_SCHEDULE_RE = re.compile(
    r"^\s*([0-9]*\.?[0-9]+)\s*\+\s*([0-9]*\.?[0-9]+)\s*\*\s*(?:t|task|task_id)\s*$"
)


def _check_alpha(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 < value <= 1.0:
        raise ValueError(f"{name} must lie in (0, 1], got {value}")
    return value


@dataclass(frozen=True)
class MemoryConfig:
    """Thresholds and mode for the pool machinery.

    ``alpha1`` may be a scalar, a per-layer sequence, or a schedule string
    like ``"0.97 + 0.003*t"`` evaluated at the task index.  ``mode`` picks
    which passes run: ``dgp`` (both), ``gpm`` (activations only), ``none``
    (pool stays empty).
    """

    alpha1: object = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    memory_size: int = 300
    mode: str = "dgp"

    def __post_init__(self):
        if self.mode not in ("dgp", "gpm", "none"):
            raise ValueError(f"unknown memory mode {self.mode!r}")
        if self.memory_size < 1:
            raise ValueError(f"memory_size must be >= 1, got {self.memory_size}")
        _check_alpha(self.alpha2, "alpha2")
        _check_alpha(self.alpha3, "alpha3")
        if isinstance(self.alpha1, str):
            if _SCHEDULE_RE.match(self.alpha1) is None:
                raise ValueError(
                    f"alpha1 schedule {self.alpha1!r} is not of the form 'a + b*t'"
                )
        elif np.iterable(self.alpha1):
            object.__setattr__(
                self, "alpha1", tuple(_check_alpha(a, "alpha1") for a in self.alpha1)
            )
        else:
            _check_alpha(self.alpha1, "alpha1")


def resolve_alpha1(alpha1, layer_pos: int, task: int) -> float:
    """Per-layer activation threshold for one task.

    ``layer_pos`` is the zero-based position among the constrained layers.
    """
    if isinstance(alpha1, str):
        m = _SCHEDULE_RE.match(alpha1)
        if m is None:
            raise ValueError(f"bad alpha1 schedule {alpha1!r}")
        return _check_alpha(float(m.group(1)) + float(m.group(2)) * task, "alpha1")
    if isinstance(alpha1, (tuple, list)):
        if layer_pos >= len(alpha1):
            raise ConfigError(
                f"alpha1 lists {len(alpha1)} values but layer position "
                f"{layer_pos} was requested"
            )
        return _check_alpha(alpha1[layer_pos], "alpha1")
    return _check_alpha(alpha1, "alpha1")


@dataclass
class LayerPool:
    """Orthonormal columns spanning one layer's protected subspace."""

    dim: int
    vectors: np.ndarray
    provenance: list = field(default_factory=list)
    origin: list = field(default_factory=list)

    @classmethod
    def empty(cls, dim: int) -> "LayerPool":
        return cls(dim=dim, vectors=np.zeros((dim, 0)))

    @property
    def count(self) -> int:
        return self.vectors.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.count == 0


class BasisPool:
    """One LayerPool per constrained layer, keyed by 1-based layer index."""

    def __init__(self, dims: dict):
        self.layers = {int(l): LayerPool.empty(d) for l, d in sorted(dims.items())}

    @classmethod
    def for_network(cls, spec) -> "BasisPool":
        dims = {}
        for pos, layer_index in enumerate(spec.shared_layer_indices()):
            dims[layer_index] = spec.shared[pos].weight_shape[0]
        return cls(dims)

    def layer(self, layer_index: int) -> LayerPool:
        try:
            return self.layers[layer_index]
        except KeyError:
            raise ConfigError(
                f"layer {layer_index} has no pool; pooled layers: "
                f"{sorted(self.layers)}"
            ) from None

    def counts(self) -> dict:
        return {l: p.count for l, p in self.layers.items()}

    @property
    def is_empty(self) -> bool:
        return all(p.is_empty for p in self.layers.values())


def orthonormality_residual(pool: BasisPool) -> float:
    """Largest per-layer ``max |B^T B - I|``; the pool invariant keeps this tiny."""
    worst = 0.0
    for p in pool.layers.values():
        if p.count:
            gram = p.vectors.T @ p.vectors
            worst = max(worst, np.abs(gram - np.eye(p.count)).max())
    return worst


def draw_memory_samples(x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement, capped at the data size."""
    x = np.asarray(x, dtype=np.float64)
    take = min(int(size), x.shape[0])
    idx = rng.choice(x.shape[0], size=take, replace=False)
    return x[idx]


def _patch_rows(rows: np.ndarray, layer) -> np.ndarray:
    """Unroll flattened feature rows into receptive-field patches."""
    n = rows.shape[0]
    cols = im2col(
        rows.reshape((n,) + layer.in_shape), layer.kernel, layer.stride, layer.padding
    )
    return cols.reshape(-1, cols.shape[2])


def sample_activation_matrix(net: Network, task: int, samples) -> dict:
    """Layer inputs of the constrained layers over the memory draw.

    Linear layers give one row per sample; conv layers one row per sliding
    patch, already in flattened-kernel coordinates.
    """
    trace = net.forward(task, samples)
    out = {}
    for pos, layer_index in enumerate(net.spec.shared_layer_indices()):
        layer = net.spec.shared[pos]
        rows = trace.inputs[layer_index - 1]
        out[layer_index] = _patch_rows(rows, layer) if layer.kind == "conv" else rows.copy()
    return out


def sample_gradient_matrix(net: Network, task: int, samples) -> dict:
    """Column-sum gradient rows at the constrained layers over the draw.

    Same patch unrolling as the activation matrices, so both basis families
    live in the space that multiplies the weights.
    """
    trace = net.forward(task, samples)
    v = net.weak_vectors(trace)
    out = {}
    for pos, layer_index in enumerate(net.spec.shared_layer_indices()):
        layer = net.spec.shared[pos]
        rows = v[layer_index - 1]
        out[layer_index] = _patch_rows(rows, layer) if layer.kind == "conv" else rows.copy()
    return out


def extend_pool(pool: BasisPool, matrices: dict, alpha, provenance: str, task: int) -> BasisPool:
    """Grow each layer's pool from its sample matrix.

    Rows of ``matrices[l]`` are samples (or patches) in the layer's basis
    space.  The part of the row space already covered by the pool is
    removed, the residual is decomposed, and its leading right singular
    vectors (chosen by ``alpha``, per-layer when ``alpha`` is a mapping)
    are appended.  Degenerate residuals add nothing.
    """
    if provenance not in PROVENANCE_TAGS:
        raise ValueError(f"unknown provenance {provenance!r}")
    for layer_index, m in matrices.items():
        p = pool.layer(layer_index)
        m = np.asarray(m, dtype=np.float64)
        if m.shape[1] != p.dim:
            raise ConfigError(
                f"layer {layer_index} matrix has {m.shape[1]} columns, pool "
                f"dimension is {p.dim}"
            )
        a = alpha[layer_index] if isinstance(alpha, dict) else alpha
        basis = OrthonormalBasis(p.dim, p.vectors)
        residual = project_out(m.T, basis).T
        scale = max(1.0, float(np.linalg.norm(m)))
        if np.linalg.norm(residual) <= _NOISE_GUARD * scale:
            continue
        fact = svd(residual)
        k = rank_select(fact.sigma, a)
        keep = fact.sigma[:k] >= _NOISE_GUARD * fact.sigma[0]
        candidates = fact.vt[:k][keep].T
        before = p.count
        p.vectors = orthonormalize_append(basis, candidates).vectors
        added = p.count - before
        p.provenance.extend([provenance] * added)
        p.origin.extend([task] * added)
    return pool


def project_weight_gradients(grads: Gradients, pool: BasisPool) -> Gradients:
    """Remove the pool-spanned part of every constrained layer's gradient.

    Gradient rows are input features (flattened kernels for conv), matching
    the pool space; other parameters pass through untouched.
    """
    shared = list(grads.shared)
    for layer_index, p in pool.layers.items():
        s = layer_index - 2
        if not 0 <= s < len(shared):
            raise ConfigError(
                f"pool layer {layer_index} does not map to a shared layer"
            )
        g = shared[s]
        if g.shape[0] != p.dim:
            raise ConfigError(
                f"layer {layer_index} gradient has {g.shape[0]} rows, pool "
                f"dimension is {p.dim}"
            )
        if p.count:
            shared[s] = project_out(g, OrthonormalBasis(p.dim, p.vectors))
    return Gradients(
        first=grads.first,
        shared=shared,
        head=grads.head,
        bn=grads.bn,
        bn_trainable=grads.bn_trainable,
    )


def compress_pool(
    pool: BasisPool,
    alpha3: float,
    only_when_full: bool = True,
    headroom: int = _COMPRESS_HEADROOM,
) -> BasisPool:
    """Shrink near-full layer pools to their leading singular directions.

    With ``only_when_full`` (the end-of-task behavior) a layer is compressed
    once its count reaches the ambient dimension minus ``headroom``; pass
    ``False`` to recompress every non-empty layer.  Kept vectors carry the
    ``compressed`` tag and no single task of origin.
    """
    _check_alpha(alpha3, "alpha3")
    for p in pool.layers.values():
        if p.is_empty:
            continue
        if only_when_full and p.count < p.dim - headroom:
            continue
        fact = svd(p.vectors)
        k = rank_select(fact.sigma, alpha3)
        keep = fact.sigma[:k] >= _NOISE_GUARD * fact.sigma[0]
        p.vectors = np.ascontiguousarray(fact.u[:, :k][:, keep])
        p.provenance = ["compressed"] * p.vectors.shape[1]
        p.origin = [-1] * p.vectors.shape[1]
    return pool


def end_of_task_update(
    pool: BasisPool,
    net: Network,
    task: int,
    data: np.ndarray,
    cfg: MemoryConfig,
    rng: np.random.Generator,
) -> tuple:
    """Post-task pool growth: activation pass, then (dgp only) gradient pass.

    Draws ``cfg.memory_size`` training inputs under ``rng`` and returns
    ``(pool, memory_samples)`` so callers can reuse the exact draw; the
    draw happens in every mode, keeping downstream randomness aligned
    across ablations.  The gradient matrices are residualized against the
    pool as it stands after the activation pass.
    """
    samples = draw_memory_samples(data, cfg.memory_size, rng)
    if cfg.mode == "none":
        return pool, samples
    positions = {l: pos for pos, l in enumerate(net.spec.shared_layer_indices())}
    acts = sample_activation_matrix(net, task, samples)
    alpha1 = {
        l: resolve_alpha1(cfg.alpha1, positions[l], task) for l in acts
    }
    extend_pool(pool, acts, alpha1, "activation", task)
    if cfg.mode == "dgp":
        grads_m = sample_gradient_matrix(net, task, samples)
        extend_pool(pool, grads_m, cfg.alpha2, "gradient", task)
    compress_pool(pool, cfg.alpha3, only_when_full=True)
    return pool, samples

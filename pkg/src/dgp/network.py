"""From-scratch feedforward network with task-private first layers and heads.

The architecture is a stack of bias-free blocks: one first layer and one
linear head owned by each task, with the shared trunk in between.  Only the
shared trunk is ever constrained by subspace projection; it is also the only
place batch normalization is allowed, and BN runs in tracked-statistics mode
(normalization always uses the running mean/variance, never batch stats, so
its Jacobian stays a diagonal scale).  Running stats and the affine params
are learned during the first task and freeze when a second task registers.

Besides forward/backward, this module exposes the linearized per-layer input
Jacobians and the cheap "column sum" gradient propagation: a row of ones
pushed through the first block's Jacobian and chained forward tracks the sum
over input pixels of every downstream partial derivative.  Those rows are
what the memory pools constrain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convops import (
    avgpool2,
    avgpool2_backward,
    col2im,
    conv_output_size,
    im2col,
)

# full_input_jacobian materializes an (inputs x classes) matrix per sample.
_FULL_JACOBIAN_CAP = 2**20


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one block.  Use the ``linear``/``conv`` constructors."""

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_shape: tuple = ()
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    has_bn: bool = False
    pool: str = "none"
    activation: str = "relu"

    @classmethod
    def linear(cls, in_features: int, out_features: int, activation: str = "relu"):
        return cls(
            kind="linear",
            in_features=int(in_features),
            out_features=int(out_features),
            activation=activation,
        )

    @classmethod
    def conv(
        cls,
        in_shape: tuple,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        has_bn: bool = False,
        pool: str = "none",
        activation: str = "relu",
    ):
        spec = cls(
            kind="conv",
            in_shape=tuple(int(v) for v in in_shape),
            out_channels=int(out_channels),
            kernel=int(kernel),
            stride=int(stride),
            padding=int(padding),
            has_bn=has_bn,
            pool=pool,
            activation=activation,
        )
        spec.prepool_shape()  # validate geometry eagerly
        return spec

    def __post_init__(self):
        if self.kind not in ("linear", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pool not in ("none", "avg2"):
            raise ValueError(f"unknown pool {self.pool!r}")
        if self.kind == "linear" and (self.has_bn or self.pool != "none"):
            raise ValueError("batch norm / pooling are conv-only features")

    def prepool_shape(self) -> tuple:
        c, h, w = self.in_shape
        oh = conv_output_size(h, self.kernel, self.stride, self.padding)
        ow = conv_output_size(w, self.kernel, self.stride, self.padding)
        if self.pool == "avg2" and (oh % 2 or ow % 2):
            raise ValueError(
                f"avg2 pooling needs even pre-pool dims, got {oh}x{ow}"
            )
        return (self.out_channels, oh, ow)

    def out_shape(self) -> tuple:
        c, oh, ow = self.prepool_shape()
        if self.pool == "avg2":
            return (c, oh // 2, ow // 2)
        return (c, oh, ow)

    @property
    def n_in(self) -> int:
        if self.kind == "linear":
            return self.in_features
        c, h, w = self.in_shape
        return c * h * w

    @property
    def n_out(self) -> int:
        if self.kind == "linear":
            return self.out_features
        c, h, w = self.out_shape()
        return c * h * w

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "linear":
            return (self.in_features, self.out_features)
        c = self.in_shape[0]
        return (c * self.kernel * self.kernel, self.out_channels)


@dataclass
class BatchNormState:
    """Per-channel tracked statistics and affine parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    frozen: bool = False

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            mean=np.zeros(channels),
            var=np.ones(channels),
        )

    def scale(self) -> np.ndarray:
        return self.gamma / np.sqrt(self.var + self.eps)


@dataclass(frozen=True)
class NetworkSpec:
    """First-layer template, shared trunk, head input width.

    First-layer and head weights are task-private; the trunk is shared and
    is what projection constrains.
    """

    first: LayerSpec
    shared: tuple
    head_in: int = 0

    def __post_init__(self):
        chain = [self.first, *self.shared]
        for left, right in zip(chain, chain[1:]):
            if left.n_out != right.n_in:
                raise ValueError(
                    f"layer width mismatch: {left.n_out} feeds {right.n_in}"
                )
        if self.first.has_bn:
            raise ValueError("batch norm is restricted to shared layers")
        object.__setattr__(self, "shared", tuple(self.shared))
        derived = chain[-1].n_out
        if self.head_in == 0:
            object.__setattr__(self, "head_in", derived)
        elif self.head_in != derived:
            raise ValueError(
                f"head_in {self.head_in} does not match trunk output {derived}"
            )

    @property
    def n_inputs(self) -> int:
        return self.first.n_in

    @property
    def n_layers(self) -> int:
        """Total block count including first layer and head."""
        return len(self.shared) + 2

    def shared_layer_indices(self) -> list:
        """1-based overall indices of the projection-constrained layers."""
        return [i + 2 for i in range(len(self.shared))]


@dataclass
class _Block:
    spec: LayerSpec | None  # None marks the head
    w: np.ndarray
    bn: BatchNormState | None
    layer_index: int  # 1-based overall position


@dataclass
class _Cache:
    mask: np.ndarray | None = None  # {0,1} float at pre-pool dims, None if no relu
    cols: np.ndarray | None = None  # im2col of the block input (conv)
    x_hat: np.ndarray | None = None  # normalized pre-affine activations (conv+bn)
    bn_scale: np.ndarray | None = None


@dataclass
class ForwardTrace:
    """Everything backward passes and Jacobians need from one forward pass."""

    task: int
    inputs: list  # inputs[i] = rows fed to block i; len == number of blocks
    logits: np.ndarray
    blocks: list
    caches: list

    @property
    def n_samples(self) -> int:
        return self.inputs[0].shape[0]


@dataclass
class Gradients:
    """Weight gradients for one task's view of the network.

    ``bn`` entries line up with the shared layers; frozen parameters still
    get their gradients reported here, with ``bn_trainable`` saying whether
    the training loop may apply them.
    """

    first: np.ndarray
    shared: list
    head: np.ndarray
    bn: list = field(default_factory=list)
    bn_trainable: bool = True

    def add(self, other: "Gradients") -> "Gradients":
        bn = []
        for a, b in zip(self.bn, other.bn):
            if a is None and b is None:
                bn.append(None)
            elif a is None:
                bn.append(b)
            elif b is None:
                bn.append(a)
            else:
                bn.append((a[0] + b[0], a[1] + b[1]))
        return Gradients(
            first=self.first + other.first,
            shared=[a + b for a, b in zip(self.shared, other.shared)],
            head=self.head + other.head,
            bn=bn,
            bn_trainable=self.bn_trainable,
        )

    def scale(self, s: float) -> "Gradients":
        return Gradients(
            first=self.first * s,
            shared=[g * s for g in self.shared],
            head=self.head * s,
            bn=[None if g is None else (g[0] * s, g[1] * s) for g in self.bn],
            bn_trainable=self.bn_trainable,
        )


def glorot_init(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """Mutable weight container plus the forward/backward machinery."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.shared_weights = [glorot_init(l.weight_shape, rng) for l in spec.shared]
        self.bn_states = [
            BatchNormState.fresh(l.out_channels) if l.has_bn else None
            for l in spec.shared
        ]
        self.first_weights: dict[int, np.ndarray] = {}
        self.head_weights: dict[int, np.ndarray] = {}
        self.head_classes: dict[int, int] = {}
        self.task_order: list[int] = []

    # -- task management ---------------------------------------------------

    def register_task(self, task: int, num_classes: int, rng: np.random.Generator):
        if task in self.first_weights:
            raise ValueError(f"task {task} already registered")
        self.first_weights[task] = glorot_init(self.spec.first.weight_shape, rng)
        self.head_weights[task] = glorot_init((self.spec.head_in, num_classes), rng)
        self.head_classes[task] = num_classes
        self.task_order.append(task)
        if len(self.task_order) == 2:
            self.freeze_bn()

    def freeze_bn(self):
        for state in self.bn_states:
            if state is not None:
                state.frozen = True

    @property
    def bn_frozen(self) -> bool:
        return any(s is not None and s.frozen for s in self.bn_states)

    def _check_task(self, task: int):
        if task not in self.first_weights:
            known = sorted(self.first_weights)
            raise ValueError(f"unknown task {task}; registered tasks: {known}")

    def blocks_for(self, task: int) -> list:
        self._check_task(task)
        blocks = [_Block(self.spec.first, self.first_weights[task], None, 1)]
        for i, layer in enumerate(self.spec.shared):
            blocks.append(_Block(layer, self.shared_weights[i], self.bn_states[i], i + 2))
        blocks.append(_Block(None, self.head_weights[task], None, self.spec.n_layers))
        return blocks

    # -- forward -----------------------------------------------------------

    def forward(self, task: int, x, update_bn: bool = False) -> ForwardTrace:
        """Run a batch of flattened samples through task ``task``'s view.

        ``update_bn`` lets the running BN statistics absorb the batch (used
        during training while they are unfrozen); normalization always uses
        the tracked values, so evaluation and Jacobians see a fixed map.
        """
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.n_inputs:
            raise ValueError(
                f"input must be (n, {self.spec.n_inputs}), got {x.shape}"
            )
        blocks = self.blocks_for(task)
        inputs, caches = [], []
        cur = x
        for blk in blocks:
            inputs.append(cur)
            cur, cache = _block_forward(blk, cur, update_bn)
            caches.append(cache)
        return ForwardTrace(task=task, inputs=inputs, logits=cur, blocks=blocks, caches=caches)

    # -- backward ----------------------------------------------------------

    def backward_weights(self, trace: ForwardTrace, dlogits) -> Gradients:
        """Weight gradients of any scalar loss given its logit cotangent."""
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != trace.logits.shape:
            raise ValueError(
                f"dlogits shape {dlogits.shape} != logits shape {trace.logits.shape}"
            )
        n_shared = len(self.spec.shared)
        shared_grads = [None] * n_shared
        bn_grads = [None] * n_shared
        d = dlogits
        first_grad = head_grad = None
        for i in reversed(range(len(trace.blocks))):
            blk = trace.blocks[i]
            cache = trace.caches[i]
            x_in = trace.inputs[i]
            d_pre, dgamma, dbeta = _pullback_to_pre(blk, cache, d)
            dw = _weight_grad(blk, cache, x_in, d_pre, cols=cache.cols)
            d = _pre_to_input(blk, d_pre)
            if blk.spec is None:
                head_grad = dw
            elif blk.layer_index == 1:
                first_grad = dw
            else:
                s = blk.layer_index - 2
                shared_grads[s] = dw
                if dgamma is not None:
                    bn_grads[s] = (dgamma, dbeta)
        return Gradients(
            first=first_grad,
            shared=shared_grads,
            head=head_grad,
            bn=bn_grads,
            bn_trainable=not self.bn_frozen,
        )

    def input_gradient_chain(self, trace: ForwardTrace, dlogits) -> list:
        """Pull a per-sample logit cotangent back to every block input.

        Returns ``g`` with ``g[i]`` the cotangent at the input of block ``i``
        and ``g[B]`` the supplied logit rows; ``g[0]`` is the gradient with
        respect to the network input.
        """
        n_blocks = len(trace.blocks)
        g = [None] * (n_blocks + 1)
        g[n_blocks] = np.asarray(dlogits, dtype=np.float64)
        for i in reversed(range(n_blocks)):
            blk = trace.blocks[i]
            d_pre, _, _ = _pullback_to_pre(blk, trace.caches[i], g[i + 1], want_bn=False)
            g[i] = _pre_to_input(blk, d_pre)
        return g

    def igr_direct_terms(self, trace: ForwardTrace, u1_rows, gchain) -> tuple:
        """Double-backprop terms from the weights' appearance in the gradient chain.

        ``gchain`` is the per-sample input-gradient chain (see
        :meth:`input_gradient_chain`); ``u1_rows`` is the derivative of the
        regularizer with respect to the per-sample input gradients.  Pushing
        ``u`` forward through the linearized blocks and pairing it with the
        pulled-back chain yields, for every weight matrix, the gradient
        contribution that does not flow through the logits; the remaining
        contribution is a standard backward pass from the returned top-level
        rows after the loss module applies its output-curvature correction.

        Returns (direct Gradients, u_top rows).
        """
        n_blocks = len(trace.blocks)
        n_shared = len(self.spec.shared)
        u = np.asarray(u1_rows, dtype=np.float64)
        shared_grads = [None] * n_shared
        bn_grads = [None] * n_shared
        first_grad = head_grad = None
        for i in range(n_blocks):
            blk = trace.blocks[i]
            cache = trace.caches[i]
            d_pre_g, _, _ = _pullback_to_pre(blk, cache, gchain[i + 1], want_bn=False)
            dw = _weight_grad(blk, cache, u, d_pre_g)
            if blk.spec is None:
                head_grad = dw
            elif blk.layer_index == 1:
                first_grad = dw
            else:
                s = blk.layer_index - 2
                shared_grads[s] = dw
                if blk.spec.has_bn:
                    bn_grads[s] = (
                        _bn_gamma_direct(blk, cache, u, gchain[i + 1]),
                        np.zeros_like(blk.bn.beta),
                    )
            u = _jac_apply(blk, cache, u)
        direct = Gradients(
            first=first_grad,
            shared=shared_grads,
            head=head_grad,
            bn=bn_grads,
            bn_trainable=not self.bn_frozen,
        )
        return direct, u

    # -- linearized maps ---------------------------------------------------

    def weak_gradient_seed(self, trace: ForwardTrace) -> np.ndarray:
        """Rows of ones pushed through the first block's Jacobian.

        The result's entry j is the sum over input pixels of the partial
        derivatives of the first block's j-th output, one row per sample.
        """
        n = trace.n_samples
        ones = np.ones((n, self.spec.n_inputs))
        return _jac_apply(trace.blocks[0], trace.caches[0], ones)

    def weak_vectors(self, trace: ForwardTrace) -> list:
        """Chained column-sum rows at every block input.

        ``v[i]`` (i >= 1) is the propagated row at the input of block ``i``;
        ``v[B]`` is the output-level row of length num_classes.  ``v[0]`` is
        None (the seed starts after the first block).
        """
        n_blocks = len(trace.blocks)
        v = [None] * (n_blocks + 1)
        v[1] = self.weak_gradient_seed(trace)
        for i in range(1, n_blocks):
            v[i + 1] = _jac_apply(trace.blocks[i], trace.caches[i], v[i])
        return v

    def full_input_jacobian(self, task: int, x_single) -> np.ndarray:
        """Exact d(logits)/d(input) for one sample, shape (n_inputs, classes).

        Materialized by pushing the identity through every block Jacobian;
        capped to small networks and meant as the reference for the cheap
        column-sum route.
        """
        x_single = np.asarray(x_single, dtype=np.float64).reshape(1, -1)
        trace = self.forward(task, x_single)
        n_in = self.spec.n_inputs
        n_out = trace.logits.shape[1]
        if n_in * n_out > _FULL_JACOBIAN_CAP:
            raise ValueError(
                f"full Jacobian {n_in}x{n_out} exceeds cap {_FULL_JACOBIAN_CAP}"
            )
        rows = np.eye(n_in)
        for blk, cache in zip(trace.blocks, trace.caches):
            rows = _jac_apply(blk, cache, rows, sample=0)
        return rows

    def apply_update(self, task: int, grads: Gradients, lr: float):
        """One SGD step on the weights owned by ``task`` plus the trunk."""
        self._check_task(task)
        self.first_weights[task] -= lr * grads.first
        for i, g in enumerate(grads.shared):
            self.shared_weights[i] -= lr * g
        self.head_weights[task] -= lr * grads.head
        if grads.bn_trainable:
            for state, g in zip(self.bn_states, grads.bn):
                if state is not None and g is not None and not state.frozen:
                    state.gamma -= lr * g[0]
                    state.beta -= lr * g[1]


class LayerJacobian:
    """Linearized input-to-output map of one block at a traced batch.

    ``apply`` pushes rows forward (v -> v J), ``apply_transpose`` pulls rows
    back.  Rows line up with the traced samples unless ``sample`` pins one
    sample's linearization for the whole batch of rows.
    """

    def __init__(self, block: _Block, cache: _Cache):
        self.block = block
        self.cache = cache

    def apply(self, v, sample: int | None = None) -> np.ndarray:
        return _jac_apply(self.block, self.cache, np.asarray(v, dtype=np.float64), sample)

    def apply_transpose(self, v, sample: int | None = None) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        d_pre, _, _ = _pullback_to_pre(self.block, self.cache, v, want_bn=False, sample=sample)
        return _pre_to_input(self.block, d_pre)


def layer_input_jacobian(trace: ForwardTrace, layer_index: int) -> LayerJacobian:
    """Jacobian of block ``layer_index`` (1-based) at the traced activations."""
    if not 1 <= layer_index <= len(trace.blocks):
        raise ValueError(
            f"layer_index {layer_index} out of range 1..{len(trace.blocks)}"
        )
    return LayerJacobian(trace.blocks[layer_index - 1], trace.caches[layer_index - 1])


def propagate_weak_gradient(v, jac: LayerJacobian, sample: int | None = None) -> np.ndarray:
    """Push column-sum rows through the next block: v' = v J."""
    return jac.apply(v, sample=sample)


# -- block-level primitives ------------------------------------------------


def _block_forward(blk: _Block, x_rows: np.ndarray, update_bn: bool):
    if blk.spec is None:  # head: plain linear, no activation
        return x_rows @ blk.w, _Cache()
    spec = blk.spec
    if spec.kind == "linear":
        z = x_rows @ blk.w
        if spec.activation == "relu":
            mask = (z > 0.0).astype(np.float64)
            return z * mask, _Cache(mask=mask)
        return z, _Cache()

    n = x_rows.shape[0]
    c, h, w = spec.in_shape
    x4 = x_rows.reshape(n, c, h, w)
    cols = im2col(x4, spec.kernel, spec.stride, spec.padding)
    co, oh, ow = spec.prepool_shape()
    z = (cols @ blk.w).transpose(0, 2, 1).reshape(n, co, oh, ow)
    cache = _Cache(cols=cols)
    if spec.has_bn:
        state = blk.bn
        if update_bn and not state.frozen:
            bmean = z.mean(axis=(0, 2, 3))
            bvar = z.var(axis=(0, 2, 3))
            state.mean += state.momentum * (bmean - state.mean)
            state.var += state.momentum * (bvar - state.var)
        scale = state.scale()
        x_hat = (z - state.mean[None, :, None, None]) / np.sqrt(
            state.var + state.eps
        )[None, :, None, None]
        z = x_hat * state.gamma[None, :, None, None] + state.beta[None, :, None, None]
        cache.x_hat = x_hat
        cache.bn_scale = scale
    if spec.activation == "relu":
        mask = (z > 0.0).astype(np.float64)
        z = z * mask
        cache.mask = mask
    if spec.pool == "avg2":
        z = avgpool2(z)
    return z.reshape(n, -1), cache


def _pullback_to_pre(blk, cache, d_out, want_bn: bool = True, sample: int | None = None):
    """Cotangent at the block output -> cotangent at the raw linear/conv output.

    Returns (d_pre, dgamma, dbeta); the BN affine gradients are only filled
    on the standard backward pass (``want_bn``).
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if blk.spec is None:
        return d_out, None, None
    spec = blk.spec
    if spec.kind == "linear":
        if cache.mask is not None:
            mask = cache.mask if sample is None else cache.mask[sample]
            return d_out * mask, None, None
        return d_out, None, None

    n = d_out.shape[0]
    co, oh, ow = spec.prepool_shape()
    if spec.pool == "avg2":
        d4 = avgpool2_backward(d_out.reshape(n, co, oh // 2, ow // 2))
    else:
        d4 = d_out.reshape(n, co, oh, ow)
    if cache.mask is not None:
        mask = cache.mask if sample is None else cache.mask[sample][None]
        d4 = d4 * mask
    dgamma = dbeta = None
    if spec.has_bn:
        if want_bn:
            dgamma = np.einsum("nchw,nchw->c", d4, cache.x_hat)
            dbeta = d4.sum(axis=(0, 2, 3))
        d4 = d4 * cache.bn_scale[None, :, None, None]
    d_pre = d4.reshape(n, co, oh * ow).transpose(0, 2, 1)
    return d_pre, dgamma, dbeta


def _weight_grad(blk, cache, x_in_rows, d_pre, cols=None):
    """Contract block input with the pre-level cotangent into weight shape.

    Also computes the double-backprop "direct" term when fed the forward
    propagated regularizer rows in place of the input.  ``cols`` lets the
    standard backward pass reuse the im2col cached by forward.
    """
    if blk.spec is None or blk.spec.kind == "linear":
        return x_in_rows.T @ d_pre
    spec = blk.spec
    if cols is None:
        n = x_in_rows.shape[0]
        cols = im2col(
            x_in_rows.reshape((n,) + spec.in_shape), spec.kernel, spec.stride, spec.padding
        )
    return np.einsum("npk,npo->ko", cols, d_pre)


def _bn_gamma_direct(blk, cache, u_rows, g_out):
    """Gamma's double-backprop term from its appearance in the block Jacobian.

    The Jacobian scales feature f by gamma_c / sqrt(var_c + eps); pairing the
    forward-pushed ``u`` (at the raw conv output) with the pulled-back chain
    (before the scale) gives the sensitivity.  Beta never enters a Jacobian,
    so it has no such term.
    """
    spec = blk.spec
    n = u_rows.shape[0]
    cols_u = im2col(
        u_rows.reshape((n,) + spec.in_shape), spec.kernel, spec.stride, spec.padding
    )
    co, oh, ow = spec.prepool_shape()
    u_pre = (cols_u @ blk.w).transpose(0, 2, 1).reshape(n, co, oh, ow)
    if spec.pool == "avg2":
        gp = avgpool2_backward(np.asarray(g_out).reshape(n, co, oh // 2, ow // 2))
    else:
        gp = np.asarray(g_out).reshape(n, co, oh, ow)
    if cache.mask is not None:
        gp = gp * cache.mask
    prod = np.einsum("nchw,nchw->c", u_pre, gp)
    return prod / np.sqrt(blk.bn.var + blk.bn.eps)


def _pre_to_input(blk, d_pre):
    if blk.spec is None or blk.spec.kind == "linear":
        return d_pre @ blk.w.T
    spec = blk.spec
    n = d_pre.shape[0]
    dcols = d_pre @ blk.w.T
    x4 = col2im(dcols, spec.in_shape, spec.kernel, spec.stride, spec.padding)
    return x4.reshape(n, -1)


def _jac_apply(blk, cache, v_rows, sample: int | None = None):
    """Push rows through the block's linearization (masks from the trace)."""
    v_rows = np.asarray(v_rows, dtype=np.float64)
    if blk.spec is None:
        return v_rows @ blk.w
    spec = blk.spec
    if spec.kind == "linear":
        z = v_rows @ blk.w
        if cache.mask is not None:
            mask = cache.mask if sample is None else cache.mask[sample]
            z = z * mask
        return z
    n = v_rows.shape[0]
    cols = im2col(
        v_rows.reshape((n,) + spec.in_shape), spec.kernel, spec.stride, spec.padding
    )
    co, oh, ow = spec.prepool_shape()
    z = (cols @ blk.w).transpose(0, 2, 1).reshape(n, co, oh, ow)
    if spec.has_bn:
        z = z * cache.bn_scale[None, :, None, None]
    if cache.mask is not None:
        mask = cache.mask if sample is None else cache.mask[sample][None]
        z = z * mask
    if spec.pool == "avg2":
        z = avgpool2(z)
    return z.reshape(n, -1)

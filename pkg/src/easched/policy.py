"""Policy network with hand-rolled forward/backward passes.

Architecture: one valid (no padding) convolution layer with square filters
and equal stride in both axes, rectifier, then a dense softmax head over the
schedule/hold actions.  Everything is double precision numpy; gradients of
log pi are derived analytically (no autodiff), and the optimizer is a plain
Adam ascent step.

The gradient entry points come in two forms: grad_log_prob for one
(image, action) pair, and accumulate_policy_gradient which fuses the weighted
sum over a whole batch of steps into a few matrix products.  Both produce
parameter-shaped structures and agree to rounding error; the batched form
exists because training touches tens of thousands of steps per iteration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointFormatError, NumericError, UsageError

CHECKPOINT_MAGIC = b"DEAS"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class PolicyLayout:
    """Shapes of the network, fixed by the cluster geometry."""

    height: int = 30
    width: int = 224
    filters: int = 8
    kernel: int = 3
    stride: int = 2
    actions: int = 21

    def validate(self) -> None:
        if min(self.height, self.width, self.filters, self.kernel,
               self.stride, self.actions) < 1:
            raise UsageError("all layout fields must be >= 1")
        if self.height < self.kernel or self.width < self.kernel:
            raise UsageError("image smaller than the convolution kernel")

    @property
    def conv_h(self) -> int:
        return (self.height - self.kernel) // self.stride + 1

    @property
    def conv_w(self) -> int:
        return (self.width - self.kernel) // self.stride + 1

    @property
    def num_patches(self) -> int:
        return self.conv_h * self.conv_w

    @property
    def flat_size(self) -> int:
        return self.filters * self.num_patches

    @classmethod
    def for_cluster(cls, cluster) -> "PolicyLayout":
        return cls(height=cluster.image_height, width=cluster.image_width,
                   actions=cluster.num_actions)


class PolicyParams:
    """The four parameter blocks; also reused as the gradient container."""

    __slots__ = ("layout", "conv_w", "conv_b", "fc_w", "fc_b")

    def __init__(self, layout: PolicyLayout, conv_w, conv_b, fc_w, fc_b):
        self.layout = layout
        self.conv_w = conv_w
        self.conv_b = conv_b
        self.fc_w = fc_w
        self.fc_b = fc_b

    def blocks(self) -> tuple[np.ndarray, ...]:
        return (self.conv_w, self.conv_b, self.fc_w, self.fc_b)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.layout, *(b.copy() for b in self.blocks()))

    def all_finite(self) -> bool:
        return all(np.isfinite(b).all() for b in self.blocks())

    def add_scaled(self, other: "PolicyParams", factor: float) -> None:
        for mine, theirs in zip(self.blocks(), other.blocks()):
            mine += factor * theirs

    def scale(self, factor: float) -> None:
        for b in self.blocks():
            b *= factor


def zero_params(layout: PolicyLayout) -> PolicyParams:
    layout.validate()
    k, f, a = layout.kernel, layout.filters, layout.actions
    return PolicyParams(
        layout,
        np.zeros((f, k, k)), np.zeros(f),
        np.zeros((a, layout.flat_size)), np.zeros(a),
    )


def init_params(layout: PolicyLayout, seed: int) -> PolicyParams:
    """Scaled-normal conv weights (rectifier fan-in), uniform dense weights
    by combined fan, zero biases.  Draw order is fixed: conv then dense."""
    layout.validate()
    rng = np.random.default_rng(seed)
    k, f, a = layout.kernel, layout.filters, layout.actions
    conv_std = np.sqrt(2.0 / (k * k))
    conv_w = rng.normal(0.0, conv_std, size=(f, k, k))
    bound = np.sqrt(6.0 / (layout.flat_size + a))
    fc_w = rng.uniform(-bound, bound, size=(a, layout.flat_size))
    return PolicyParams(layout, conv_w, np.zeros(f), fc_w, np.zeros(a))


def _patch_matrix(imgs: np.ndarray, layout: PolicyLayout) -> np.ndarray:
    """(B, H, W) float image stack -> (B, patches, kernel*kernel)."""
    k, s = layout.kernel, layout.stride
    win = sliding_window_view(imgs, (k, k), axis=(-2, -1))[:, ::s, ::s]
    return win.reshape(imgs.shape[0], layout.num_patches, k * k)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_parts(params: PolicyParams, imgs: np.ndarray):
    """Shared forward: returns (patches, preact, hidden_flat, probs).

    hidden_flat is ordered filter-major: (filter, patch_row, patch_col)
    raveled per sample, matching the checkpoint and gradient layouts.
    """
    lay = params.layout
    patches = _patch_matrix(imgs, lay)
    b = patches.shape[0]
    z = patches.reshape(b * lay.num_patches, -1) @ params.conv_w.reshape(lay.filters, -1).T
    z += params.conv_b
    z = z.reshape(b, lay.num_patches, lay.filters)
    hidden = np.maximum(z, 0.0)
    hflat = hidden.transpose(0, 2, 1).reshape(b, lay.flat_size)
    logits = hflat @ params.fc_w.T + params.fc_b
    return patches, z, hflat, _softmax_rows(logits)


def _as_image_batch(img: np.ndarray, layout: PolicyLayout) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.shape[-2:] != (layout.height, layout.width):
        raise UsageError(
            f"image shape {np.asarray(img).shape} does not match layout "
            f"({layout.height}, {layout.width})")
    return np.ascontiguousarray(arr)


def forward(params: PolicyParams, img: np.ndarray) -> np.ndarray:
    """Action distribution for one state image."""
    imgs = _as_image_batch(img, params.layout)
    if imgs.shape[0] != 1:
        raise UsageError("forward takes a single image; use forward_batch")
    return _forward_parts(params, imgs)[3][0]


def forward_batch(params: PolicyParams, imgs: np.ndarray) -> np.ndarray:
    """Action distributions for a stack of state images, one per row."""
    return _forward_parts(params, _as_image_batch(imgs, params.layout))[3]


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an action index from the distribution by inverse CDF."""
    idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    return min(idx, len(probs) - 1)


def greedy_action(probs: np.ndarray) -> int:
    """Most probable action; exact ties resolve to the lowest index."""
    return int(np.argmax(probs))


def grad_log_prob(params: PolicyParams, img: np.ndarray, action: int) -> PolicyParams:
    """Exact gradient of log pi(action | img) with respect to every block."""
    if not 0 <= action < params.layout.actions:
        raise UsageError(f"action {action} out of range")
    grads = zero_params(params.layout)
    imgs = _as_image_batch(img, params.layout)
    _accumulate(params, grads, imgs,
                np.array([action]), np.array([1.0]), probs=None)
    return grads


def accumulate_policy_gradient(
    params: PolicyParams,
    grads: PolicyParams,
    imgs: np.ndarray,
    actions: np.ndarray,
    coeffs: np.ndarray,
    probs: np.ndarray | None = None,
    chunk: int = 128,
) -> None:
    """Add sum_t coeffs[t] * grad log pi(actions[t] | imgs[t]) into grads.

    Stored rollout distributions can be passed as probs to skip recomputing
    the dense head; the convolution is always recomputed (activations are
    never stored).  Chunking bounds the transient patch matrices; boundaries
    are a pure function of the batch length, keeping accumulation order, and
    therefore the floating-point result, reproducible.
    """
    imgs = _as_image_batch(imgs, params.layout)
    n = imgs.shape[0]
    if not (len(actions) == len(coeffs) == n):
        raise UsageError("imgs, actions and coeffs must have equal length")
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        _accumulate(params, grads, imgs[lo:hi], actions[lo:hi], coeffs[lo:hi],
                    probs[lo:hi] if probs is not None else None)


def _accumulate(params, grads, imgs, actions, coeffs, probs):
    lay = params.layout
    b = imgs.shape[0]
    if probs is None:
        patches, z, hflat, probs = _forward_parts(params, imgs)
    else:
        patches = _patch_matrix(imgs, lay)
        zf = patches.reshape(b * lay.num_patches, -1) @ params.conv_w.reshape(lay.filters, -1).T
        zf += params.conv_b
        z = zf.reshape(b, lay.num_patches, lay.filters)
        hflat = np.maximum(z, 0.0).transpose(0, 2, 1).reshape(b, lay.flat_size)
    # d log pi / d logits = onehot(a) - pi, scaled per step
    dlogits = -probs * coeffs[:, None]
    dlogits[np.arange(b), actions] += coeffs
    _backprop_logits(params, grads, patches, z, hflat, dlogits)


def accumulate_logit_gradient(
    params: PolicyParams,
    grads: PolicyParams,
    imgs: np.ndarray,
    dlogits: np.ndarray,
    chunk: int = 128,
) -> None:
    """Add sum_t J_t^T dlogits[t] into grads for arbitrary per-step logit
    sensitivities (the policy-gradient accumulator is the onehot-minus-probs
    special case).  Used for auxiliary objectives such as entropy terms."""
    imgs = _as_image_batch(imgs, params.layout)
    n = imgs.shape[0]
    if len(dlogits) != n:
        raise UsageError("imgs and dlogits must have equal length")
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        patches, z, hflat, _ = _forward_parts(params, imgs[lo:hi])
        _backprop_logits(params, grads, patches, z, hflat, dlogits[lo:hi])


def _backprop_logits(params, grads, patches, z, hflat, dlogits):
    lay = params.layout
    b = dlogits.shape[0]
    grads.fc_b += dlogits.sum(axis=0)
    grads.fc_w += dlogits.T @ hflat
    dh = dlogits @ params.fc_w
    dz = dh.reshape(b, lay.filters, lay.num_patches).transpose(0, 2, 1) * (z > 0.0)
    grads.conv_b += dz.sum(axis=(0, 1))
    flat_dz = dz.reshape(b * lay.num_patches, lay.filters)
    flat_patches = patches.reshape(b * lay.num_patches, -1)
    grads.conv_w += (flat_dz.T @ flat_patches).reshape(params.conv_w.shape)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: PolicyParams
    second_moment: PolicyParams
    step_count: int = 0


def adam_init(layout: PolicyLayout) -> AdamState:
    return AdamState(zero_params(layout), zero_params(layout), 0)


def adam_update(params: PolicyParams, state: AdamState, grads: PolicyParams,
                lr: float) -> tuple[PolicyParams, AdamState]:
    """One ascent step (grads point toward higher objective). In place."""
    if not grads.all_finite():
        raise NumericError("non-finite policy gradient")
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for p, m, v, g in zip(params.blocks(), state.first_moment.blocks(),
                          state.second_moment.blocks(), grads.blocks()):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p += lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
    return params, state


# -- checkpoints -------------------------------------------------------------
#
# Binary layout, all little-endian:
#   magic "DEAS" | u32 version | u32 x6: height width kernel stride filters
#   actions | u8 adam flag | f64 arrays conv_w conv_b fc_w fc_b
#   [| u64 step | f64 first moments (same 4 arrays) | f64 second moments]

_HEADER = struct.Struct("<4sI6IB")


def save_checkpoint(path, params: PolicyParams, adam: AdamState | None = None) -> None:
    lay = params.layout
    pieces = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                           lay.height, lay.width, lay.kernel, lay.stride,
                           lay.filters, lay.actions, 1 if adam else 0)]
    pieces += [np.ascontiguousarray(b, dtype="<f8").tobytes() for b in params.blocks()]
    if adam is not None:
        pieces.append(struct.pack("<Q", adam.step_count))
        for holder in (adam.first_moment, adam.second_moment):
            pieces += [np.ascontiguousarray(b, dtype="<f8").tobytes() for b in holder.blocks()]
    with open(path, "wb") as fh:
        fh.write(b"".join(pieces))


def _read_blocks(buf: memoryview, offset: int, layout: PolicyLayout):
    shapes = [(layout.filters, layout.kernel, layout.kernel), (layout.filters,),
              (layout.actions, layout.flat_size), (layout.actions,)]
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(buf):
            raise CheckpointFormatError("checkpoint truncated")
        arrays.append(np.frombuffer(buf, dtype="<f8", count=count,
                                    offset=offset).reshape(shape).astype(np.float64))
        offset += nbytes
    return arrays, offset


def load_checkpoint(path, expected_layout: PolicyLayout | None = None
                    ) -> tuple[PolicyParams, AdamState | None]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointFormatError("checkpoint too short for its header")
    magic, version, h, w, k, s, f, a, has_adam = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    layout = PolicyLayout(height=h, width=w, filters=f, kernel=k, stride=s, actions=a)
    layout.validate()
    if expected_layout is not None and layout != expected_layout:
        raise CheckpointFormatError(
            f"checkpoint layout {layout} does not match expected {expected_layout}")
    buf = memoryview(raw)
    blocks, offset = _read_blocks(buf, _HEADER.size, layout)
    params = PolicyParams(layout, *blocks)
    adam = None
    if has_adam:
        if offset + 8 > len(buf):
            raise CheckpointFormatError("checkpoint truncated")
        (step,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        m_blocks, offset = _read_blocks(buf, offset, layout)
        v_blocks, offset = _read_blocks(buf, offset, layout)
        adam = AdamState(PolicyParams(layout, *m_blocks),
                         PolicyParams(layout, *v_blocks), step)
    if offset != len(buf):
        raise CheckpointFormatError("checkpoint has trailing bytes")
    return params, adam

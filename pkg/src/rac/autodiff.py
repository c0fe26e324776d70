"""Minimal reverse-mode gradient core: affine layers, embedding pooling,
unit normalization, two optimizers, a finite-difference checker, and the
model checkpoint format.

Only the operators the two-branch classifier needs are implemented; each
forward has a hand-derived backward validated against central differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

CHECKPOINT_MAGIC = b"RACMDL1\n"


@dataclass(eq=False)
class ParamTensor:
    """A named trainable array with its gradient accumulator.

    With debug=True, accumulating into a gradient that an optimizer already
    consumed (without an intervening zero_grad) raises, catching silent
    cross-step accumulation bugs.
    """

    values: np.ndarray
    name: str
    debug: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self._consumed = False

    def zero_grad(self):
        self.grad[...] = 0.0
        self._consumed = False

    def accumulate(self, g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.values.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match parameter "
                f"{self.name!r} shape {self.values.shape}"
            )
        if self.debug and self._consumed:
            raise ValidationError(
                f"gradient of {self.name!r} accumulated across optimizer steps; "
                "call zero_grad between steps"
            )
        self.grad += g

    def mark_consumed(self):
        self._consumed = True


@dataclass
class OptimState:
    """AdamW accumulators and hyperparameters (decoupled weight decay)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def validate_against(self, params: list[ParamTensor]):
        for p in params:
            if p.name in self.m and self.m[p.name].shape != p.values.shape:
                raise ValidationError(f"optimizer moment for {p.name!r} has stale shape")
        if self.step < 0:
            raise ValidationError("optimizer step count must be non-negative")


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x W + b for x (N, D), W (D, L), b (L,)."""
    x, W, b = (np.asarray(a, dtype=np.float64) for a in (x, W, b))
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ValidationError("affine expects x (N,D), W (D,L), b (L,)")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValidationError(
            f"affine shapes disagree: x {x.shape}, W {W.shape}, b {b.shape}"
        )
    return x @ W + b


def affine_backward(x: np.ndarray, W: np.ndarray, upstream: np.ndarray):
    """Gradients (d x, d W, d b) of y = x W + b under upstream (N, L)."""
    x, W, upstream = (np.asarray(a, dtype=np.float64) for a in (x, W, upstream))
    if upstream.shape != (x.shape[0], W.shape[1]):
        raise ValidationError("upstream shape does not match affine output")
    return upstream @ W.T, x.T @ upstream, upstream.sum(axis=0)


def embed_pool_forward(
    token_ids: np.ndarray, table: np.ndarray, mode: str = "mean", padding_id: int = 0
) -> np.ndarray:
    """Pool embedding rows of each id sequence; padded positions excluded.

    mean divides by the true (non-padding) token count; an all-padding row
    pools to the zero vector.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    table = np.asarray(table, dtype=np.float64)
    if mode not in ("mean", "sum"):
        raise ValidationError(f"unknown pooling mode {mode!r}")
    if token_ids.ndim != 2:
        raise ValidationError("token_ids must be (N, S)")
    if token_ids.min() < 0 or token_ids.max() >= table.shape[0]:
        raise ValidationError("token id out of table range")
    mask = (token_ids != padding_id).astype(np.float64)  # (N, S)
    gathered = table[token_ids] * mask[:, :, None]
    pooled = gathered.sum(axis=1)
    if mode == "mean":
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        pooled = pooled / counts
    return pooled


def embed_pool_backward(
    token_ids: np.ndarray,
    vocab_size: int,
    upstream: np.ndarray,
    mode: str = "mean",
    padding_id: int = 0,
) -> np.ndarray:
    """Scatter upstream (N, d) back into a (V, d) gradient table.

    Duplicate ids accumulate; padded positions (including the padding row
    itself) receive zero gradient.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if mode not in ("mean", "sum"):
        raise ValidationError(f"unknown pooling mode {mode!r}")
    n, s = token_ids.shape
    if upstream.shape[0] != n:
        raise ValidationError("upstream batch size does not match token_ids")
    mask = (token_ids != padding_id).astype(np.float64)
    if mode == "mean":
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        per_pos = (upstream / counts)[:, None, :] * mask[:, :, None]  # (N, S, d)
    else:
        per_pos = upstream[:, None, :] * mask[:, :, None]
    grad = np.zeros((vocab_size, upstream.shape[1]), dtype=np.float64)
    np.add.at(grad, token_ids.ravel(), per_pos.reshape(n * s, -1))
    grad[padding_id] = 0.0
    return grad


def normalize_forward(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """x / max(||x||_2, eps) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    return x / norm


def normalize_grad(x: np.ndarray, upstream: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Gradient of x/||x||: ((I - u u^T)/||x||) upstream, u = x/||x||.

    Batched over leading axes; the floor eps follows the caller's policy
    for (pathological) zero-norm rows.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValidationError("normalize_grad needs upstream shaped like x")
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    u = x / norm
    radial = (u * upstream).sum(axis=-1, keepdims=True)
    return (upstream - u * radial) / norm


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def sgd_step(params: list[ParamTensor], lr: float):
    """Plain gradient descent: p -= lr * grad."""
    for p in params:
        p.values -= lr * p.grad
        p.mark_consumed()


def adamw_step(params: list[ParamTensor], state: OptimState):
    """One AdamW step with decoupled weight decay.

    Decay acts directly on the weights (never through the moments); moments
    are bias-corrected by the shared step count.
    """
    state.validate_against(params)
    state.step += 1
    t = state.step
    for p in params:
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.values)
            state.v[p.name] = np.zeros_like(p.values)
        m, v = state.m[p.name], state.v[p.name]
        g = p.grad
        p.values -= state.lr * state.weight_decay * p.values
        m[...] = state.beta1 * m + (1 - state.beta1) * g
        v[...] = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.mark_consumed()


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    fn,
    arrays: list[np.ndarray],
    n_coords: int = 20,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between fn's analytic gradients and central
    differences over a random coordinate subset of each input array.

    fn(arrays) must return (loss, grads) with grads aligned to arrays.
    Reports the error; never raises on a mismatch.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    _, grads = fn(arrays)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for ai, a in enumerate(arrays):
        flat_size = a.size
        k = min(n_coords, flat_size)
        coords = rng.choice(flat_size, size=k, replace=False)
        for flat in coords:
            idx = np.unravel_index(int(flat), a.shape)
            orig = a[idx]
            a[idx] = orig + step
            lp, _ = fn(arrays)
            a[idx] = orig - step
            lm, _ = fn(arrays)
            a[idx] = orig
            numeric = (lp - lm) / (2 * step)
            analytic = grads[ai][idx]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
# magic "RACMDL1\n"; uint64 param count; per param: uint64 name length,
# utf-8 name, uint64 ndim, ndim uint64 dims, little-endian float32 values.
# One trailing uint8 flags optimizer state: hyperparameters as 5 little-
# endian float64s, uint64 step, then m and v tables in parameter order.


def _write_array(fh, a: np.ndarray):
    fh.write(struct.pack("<Q", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("checkpoint truncated")
    return data


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<Q", _read_exact(fh, 8))
    if ndim > 4:
        raise FormatError(f"implausible checkpoint array rank {ndim}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(fh, 4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def save_checkpoint(path: str, params: list[ParamTensor], optim: OptimState | None = None):
    """Write parameters (and optionally optimizer state) as little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name)))
            fh.write(name)
            _write_array(fh, p.values)
        if optim is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(
                struct.pack(
                    "<5d", optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay
                )
            )
            fh.write(struct.pack("<Q", optim.step))
            for p in params:
                _write_array(fh, optim.m.get(p.name, np.zeros_like(p.values)))
                _write_array(fh, optim.v.get(p.name, np.zeros_like(p.values)))


def load_checkpoint(path: str) -> tuple[list[ParamTensor], OptimState | None]:
    """Read a checkpoint back; values come out float64 (from stored f32)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a model checkpoint (bad magic)")
        (n_params,) = struct.unpack("<Q", _read_exact(fh, 8))
        if n_params > 10_000:
            raise FormatError(f"implausible parameter count {n_params}")
        params = []
        for _ in range(n_params):
            (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
            if name_len > 4096:
                raise FormatError("implausible parameter name length")
            name = _read_exact(fh, name_len).decode("utf-8")
            params.append(ParamTensor(_read_array(fh), name))
        (has_optim,) = struct.unpack("<B", _read_exact(fh, 1))
        optim = None
        if has_optim:
            lr, b1, b2, eps, wd = struct.unpack("<5d", _read_exact(fh, 40))
            (step,) = struct.unpack("<Q", _read_exact(fh, 8))
            optim = OptimState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=step)
            for p in params:
                optim.m[p.name] = _read_array(fh)
                optim.v[p.name] = _read_array(fh)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return params, optim

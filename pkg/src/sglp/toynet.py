"""A miniature deterministic MLP used to exercise the full pruning pipeline.

Architecture: an affine input adapter (input_dim -> w), a stack of L hidden
units of uniform width w (each ``relu(x W + b)``, optionally with a residual
skip ``x + relu(x W + b)``), and an affine classification head. Uniform
width keeps any subset of hidden units wiring-compatible, so physical layer
removal is always well-defined.

Everything is plain numpy in float64 with hand-written reverse-mode
gradients. All randomness flows through a counter-based Philox generator
keyed by explicit 64-bit seeds, so every operation is a pure function of
(inputs, seed) and runs bit-reproducibly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Iterator

import numpy as np

from .errors import DataError, FormatError
from .io import ActivationSet, _read_exact

NETWORK_MAGIC = b"SGLPNET1"

_HEADER = struct.Struct("<IIIIBQ")


def generator(seed: int) -> np.random.Generator:
    """The package-wide RNG: counter-based Philox keyed by a 64-bit seed."""
    if not 0 <= int(seed) < 2**64:
        raise DataError(f"seed must be a 64-bit non-negative integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(*components: int) -> int:
    """Mix integer components into one 64-bit seed, deterministically."""
    state = np.random.SeedSequence([int(c) for c in components]).generate_state(1, np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_width: int
    hidden_layers: int
    classes: int
    residual: bool = True
    seed: int = 0

    def validate(self, min_hidden_layers: int = 2) -> None:
        # fresh builds need >= 2 prunable units for analysis; a pruned
        # checkpoint may legitimately carry fewer
        if self.input_dim < 1:
            raise DataError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.hidden_width < 1:
            raise DataError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.hidden_layers < min_hidden_layers:
            raise DataError(f"hidden_layers must be >= {min_hidden_layers}, got {self.hidden_layers}")
        if self.classes < 2:
            raise DataError(f"classes must be >= 2, got {self.classes}")
        if not 0 <= int(self.seed) < 2**64:
            raise DataError(f"seed must be a 64-bit non-negative integer, got {self.seed}")

    @property
    def param_count(self) -> int:
        w = self.hidden_width
        return (
            w * (self.input_dim + 1)
            + self.hidden_layers * w * (w + 1)
            + self.classes * (w + 1)
        )


@dataclass
class Network:
    spec: NetworkSpec
    adapter_w: np.ndarray
    adapter_b: np.ndarray
    unit_ws: list[np.ndarray]
    unit_bs: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def hidden_layers(self) -> int:
        return len(self.unit_ws)

    @property
    def param_count(self) -> int:
        return sum(int(t.size) for t in self.parameters())

    def parameters(self) -> Iterator[np.ndarray]:
        """Parameter tensors in declaration order."""
        yield self.adapter_w
        yield self.adapter_b
        for w, b in zip(self.unit_ws, self.unit_bs):
            yield w
            yield b
        yield self.head_w
        yield self.head_b

    def copy(self) -> "Network":
        return Network(
            spec=self.spec,
            adapter_w=self.adapter_w.copy(),
            adapter_b=self.adapter_b.copy(),
            unit_ws=[w.copy() for w in self.unit_ws],
            unit_bs=[b.copy() for b in self.unit_bs],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )


@dataclass
class GradientSet:
    """Gradients of the loss, shape-congruent with a Network's parameters."""

    adapter_w: np.ndarray
    adapter_b: np.ndarray
    unit_ws: list[np.ndarray]
    unit_bs: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray

    def tensors(self) -> Iterator[np.ndarray]:
        yield self.adapter_w
        yield self.adapter_b
        for w, b in zip(self.unit_ws, self.unit_bs):
            yield w
            yield b
        yield self.head_w
        yield self.head_b


def _affine_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    bias = rng.uniform(-bound, bound, size=(fan_out,))
    return weight, bias


def build_network(spec: NetworkSpec) -> Network:
    """Fresh network with fan-in-scaled uniform parameters drawn from spec.seed."""
    spec.validate()
    rng = generator(spec.seed)
    w = spec.hidden_width
    adapter_w, adapter_b = _affine_init(rng, spec.input_dim, w)
    unit_ws, unit_bs = [], []
    for _ in range(spec.hidden_layers):
        uw, ub = _affine_init(rng, w, w)
        unit_ws.append(uw)
        unit_bs.append(ub)
    head_w, head_b = _affine_init(rng, w, spec.classes)
    return Network(spec, adapter_w, adapter_b, unit_ws, unit_bs, head_w, head_b)


def _check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise DataError(
            f"batch shape {x.shape} incompatible with input_dim {net.spec.input_dim}"
        )
    if not np.isfinite(x).all():
        raise DataError("batch contains non-finite values")
    return x


def _run_forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Returns (logits, per-unit pre-activations, per-unit post outputs incl. adapter at [0])."""
    hidden = [x @ net.adapter_w + net.adapter_b]
    pre_acts = []
    for uw, ub in zip(net.unit_ws, net.unit_bs):
        p = hidden[-1] @ uw + ub
        r = np.maximum(p, 0.0)
        pre_acts.append(p)
        hidden.append(hidden[-1] + r if net.spec.residual else r)
    logits = hidden[-1] @ net.head_w + net.head_b
    return logits, pre_acts, hidden


def forward(
    net: Network, batch: np.ndarray, capture: bool = False
) -> tuple[np.ndarray, ActivationSet | None]:
    """Run the network; optionally capture each hidden unit's output.

    Captured activations are the post-nonlinearity unit outputs (including
    the skip path when residual), one (n, w) layer per hidden unit.
    """
    x = _check_batch(net, batch)
    logits, _, hidden = _run_forward(net, x)
    if not capture:
        return logits, None
    names = [f"unit_{i + 1:02d}" for i in range(net.hidden_layers)]
    activations = ActivationSet.from_matrices(names, hidden[1:])
    return logits, activations


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise DataError(f"labels must be 1-D, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise DataError(f"labels outside [0, {classes})")
    return y


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy with log-sum-exp stabilization."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DataError(f"logits must be 2-D, got shape {z.shape}")
    y = _check_labels(labels, z.shape[1])
    if y.shape[0] != z.shape[0]:
        raise DataError(f"{z.shape[0]} logits rows vs {y.shape[0]} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(z.shape[0]), y]
    return float(np.mean(log_norm - picked))


def backward(net: Network, batch: np.ndarray, labels: np.ndarray) -> GradientSet:
    """Exact reverse-mode gradients of the mean cross-entropy loss."""
    x = _check_batch(net, batch)
    y = _check_labels(labels, net.spec.classes)
    if y.shape[0] != x.shape[0]:
        raise DataError(f"{x.shape[0]} batch rows vs {y.shape[0]} labels")
    n = x.shape[0]
    logits, pre_acts, hidden = _run_forward(net, x)

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    d_logits = probs.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n

    head_w_grad = hidden[-1].T @ d_logits
    head_b_grad = d_logits.sum(axis=0)
    d_hidden = d_logits @ net.head_w.T

    unit_w_grads: list[np.ndarray] = [np.empty(0)] * net.hidden_layers
    unit_b_grads: list[np.ndarray] = [np.empty(0)] * net.hidden_layers
    for i in range(net.hidden_layers - 1, -1, -1):
        d_relu = d_hidden * (pre_acts[i] > 0.0)
        unit_w_grads[i] = hidden[i].T @ d_relu
        unit_b_grads[i] = d_relu.sum(axis=0)
        d_prev = d_relu @ net.unit_ws[i].T
        d_hidden = d_hidden + d_prev if net.spec.residual else d_prev

    adapter_w_grad = x.T @ d_hidden
    adapter_b_grad = d_hidden.sum(axis=0)
    return GradientSet(
        adapter_w_grad, adapter_b_grad, unit_w_grads, unit_b_grads, head_w_grad, head_b_grad
    )


def grad_norm(gradients: GradientSet) -> float:
    """Euclidean norm of all gradients concatenated into one flat vector."""
    total = 0.0
    for tensor in gradients.tensors():
        if not np.isfinite(tensor).all():
            raise DataError("gradient set contains non-finite values")
        total += float(np.sum(tensor * tensor))
    return float(np.sqrt(total))


def hybrid_init(
    pretrained: Network,
    kept: frozenset[int] | set[int] | tuple[int, ...] | list[int],
    scope: str = "literal",
    segment_range: tuple[int, int] | None = None,
    seed: int = 0,
) -> Network:
    """Copy pretrained parameters into kept units and re-draw the rest.

    ``literal`` re-draws every hidden unit outside ``kept``; ``local``
    re-draws only non-kept units inside the inclusive index range
    ``segment_range``. The adapter and head always copy the pretrained
    parameters. Unit indices are 0-based.
    """
    kept_set = frozenset(int(i) for i in kept)
    n_units = pretrained.hidden_layers
    if not kept_set:
        raise DataError("kept unit set must not be empty")
    if not kept_set <= set(range(n_units)):
        raise DataError(f"kept units {sorted(kept_set)} outside 0..{n_units - 1}")
    if scope == "literal":
        targets = [i for i in range(n_units) if i not in kept_set]
    elif scope == "local":
        if segment_range is None:
            raise DataError("local scope requires a segment_range")
        lo, hi = segment_range
        if not 0 <= lo <= hi < n_units:
            raise DataError(f"segment_range {segment_range} outside 0..{n_units - 1}")
        targets = [i for i in range(lo, hi + 1) if i not in kept_set]
    else:
        raise DataError(f"unknown scope {scope!r} (expected 'literal' or 'local')")
    result = pretrained.copy()
    rng = generator(seed)
    width = pretrained.spec.hidden_width
    for i in targets:
        uw, ub = _affine_init(rng, width, width)
        result.unit_ws[i] = uw
        result.unit_bs[i] = ub
    return result


def prune(net: Network, kept: tuple[int, ...] | list[int]) -> Network:
    """Physically remove all hidden units not listed in ``kept`` (0-based, ordered)."""
    kept_t = tuple(int(i) for i in kept)
    if not kept_t:
        raise DataError("kept unit list must not be empty")
    if any(b <= a for a, b in zip(kept_t, kept_t[1:])):
        raise DataError("kept unit indices must be strictly increasing")
    if kept_t[0] < 0 or kept_t[-1] >= net.hidden_layers:
        raise DataError(f"kept units {kept_t} outside 0..{net.hidden_layers - 1}")
    new_spec = replace(net.spec, hidden_layers=len(kept_t))
    return Network(
        spec=new_spec,
        adapter_w=net.adapter_w.copy(),
        adapter_b=net.adapter_b.copy(),
        unit_ws=[net.unit_ws[i].copy() for i in kept_t],
        unit_bs=[net.unit_bs[i].copy() for i in kept_t],
        head_w=net.head_w.copy(),
        head_b=net.head_b.copy(),
    )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def accuracy(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward(net, batch)
    y = _check_labels(labels, net.spec.classes)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train(
    net: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int = 0,
) -> tuple[Network, list[EpochStats]]:
    """Plain mini-batch SGD on mean cross-entropy; returns a trained copy.

    Shuffling comes from the seeded generator, so identical inputs give a
    bit-identical result. Raises on divergence to a non-finite loss, naming
    the epoch.
    """
    x = _check_batch(net, batch)
    y = _check_labels(labels, net.spec.classes)
    if y.shape[0] != x.shape[0]:
        raise DataError(f"{x.shape[0]} batch rows vs {y.shape[0]} labels")
    if epochs < 0:
        raise DataError(f"epochs must be >= 0, got {epochs}")
    if lr < 0:
        raise DataError(f"learning rate must be >= 0, got {lr}")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = generator(seed)
    work = net.copy()
    history: list[EpochStats] = []
    count = x.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            idx = order[start : start + batch_size]
            grads = backward(work, x[idx], y[idx])
            for param, grad in zip(work.parameters(), grads.tensors()):
                param -= lr * grad
        logits, _ = forward(work, x)
        epoch_loss = loss(logits, y)
        if not np.isfinite(epoch_loss):
            raise DataError(f"training diverged to a non-finite loss at epoch {epoch}")
        epoch_acc = float(np.mean(np.argmax(logits, axis=1) == y))
        history.append(EpochStats(epoch, epoch_loss, epoch_acc))
    return work, history


def make_blobs(
    n_per_class: int, classes: int, dim: int, spread: float, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clusters at seeded random centers, shuffled; exact class balance."""
    if n_per_class < 1 or classes < 1 or dim < 1:
        raise DataError("n_per_class, classes and dim must all be >= 1")
    if spread < 0:
        raise DataError(f"spread must be >= 0, got {spread}")
    rng = generator(seed)
    centers = rng.uniform(-4.0, 4.0, size=(classes, dim))
    xs, ys = [], []
    for c in range(classes):
        xs.append(centers[c] + spread * rng.standard_normal((n_per_class, dim)))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


def save_network(net: Network, destination: BinaryIO) -> int:
    """Binary checkpoint: magic, spec header, parameter tensors as binary64 LE."""
    net.spec.validate()
    if net.hidden_layers != net.spec.hidden_layers:
        raise DataError("network unit count disagrees with its spec")
    written = destination.write(NETWORK_MAGIC)
    written += destination.write(
        _HEADER.pack(
            net.spec.input_dim,
            net.spec.hidden_width,
            net.spec.hidden_layers,
            net.spec.classes,
            1 if net.spec.residual else 0,
            int(net.spec.seed),
        )
    )
    for tensor in net.parameters():
        data = np.ascontiguousarray(tensor, dtype="<f8").tobytes()
        written += destination.write(data)
    return written


def save_network_file(net: Network, path) -> int:
    import io as _io

    from .io import atomic_write_bytes

    buffer = _io.BytesIO()
    count = save_network(net, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    return count


def load_network_file(path) -> Network:
    with open(path, "rb") as handle:
        return load_network(handle)


def load_network(source: BinaryIO) -> Network:
    magic = source.read(len(NETWORK_MAGIC))
    if magic != NETWORK_MAGIC:
        raise FormatError("unrecognized format: bad magic bytes")
    fields = _HEADER.unpack(_read_exact(source, _HEADER.size, "network header"))
    input_dim, width, layers, classes, residual, seed = fields
    spec = NetworkSpec(input_dim, width, layers, classes, bool(residual), seed)
    spec.validate()

    def read_tensor(shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = _read_exact(source, 8 * count, what)
        tensor = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if not np.isfinite(tensor).all():
            raise FormatError(f"corrupt data: non-finite values in {what}")
        return tensor

    adapter_w = read_tensor((input_dim, width), "adapter weights")
    adapter_b = read_tensor((width,), "adapter bias")
    unit_ws, unit_bs = [], []
    for i in range(layers):
        unit_ws.append(read_tensor((width, width), f"unit {i} weights"))
        unit_bs.append(read_tensor((width,), f"unit {i} bias"))
    head_w = read_tensor((width, classes), "head weights")
    head_b = read_tensor((classes,), "head bias")
    return Network(spec, adapter_w, adapter_b, unit_ws, unit_bs, head_w, head_b)

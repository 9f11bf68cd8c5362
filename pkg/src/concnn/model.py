"""The per-branch CNN: construction, inference, training, serialization.

One branch classifies patches of a single image role (PPL, XPL or CI). Its
architecture is five feature-extraction blocks, each 3x3 convolution →
2x2 max-pool → ReLU, followed by three mapping blocks: two fully-connected
layers with sigmoid activations and a final fully-connected layer with
softmax. The three branches of the full classifier share this shape and are
trained independently on their own role.

Models persist as a versioned binary: magic ``CCNN``, u16 format version,
role tag, config block, per-layer shape table, then little-endian float32
payloads in declared layer order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .preprocess import ROLE_CI, ROLE_PPL, ROLE_XPL
from .tensor_core import (
    LayerCache,
    Tensor,
    conv2d,
    conv2d_backward,
    fully_connected,
    fully_connected_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    sgd_step,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_cross_entropy_batch,
)

BRANCH_ROLES = (ROLE_PPL, ROLE_XPL, ROLE_CI)

FORMAT_MAGIC = b"CCNN"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when model bytes cannot be decoded."""


@dataclass(frozen=True)
class BranchConfig:
    """Architecture hyperparameters shared by the three branches."""

    patch_size: int = 224
    channel_widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    fc_widths: tuple[int, ...] = (256, 128)
    num_classes: int = 13
    conv_padding: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))
        object.__setattr__(self, "fc_widths", tuple(self.fc_widths))
        if len(self.channel_widths) != 5 or any(w < 1 for w in self.channel_widths):
            raise ValueError(f"channel_widths must be 5 positive ints, got {self.channel_widths}")
        if len(self.fc_widths) != 2 or any(w < 1 for w in self.fc_widths):
            raise ValueError(f"fc_widths must be 2 positive ints, got {self.fc_widths}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.conv_padding not in (0, 1):
            raise ValueError(f"conv_padding must be 0 or 1, got {self.conv_padding}")
        if self.conv_padding == 1 and self.patch_size % 32:
            raise ValueError(
                f"patch_size must be divisible by 32 with conv_padding 1, got {self.patch_size}"
            )
        self.spatial_sizes()  # raises if any block would pool an odd map

    def spatial_sizes(self) -> list[int]:
        """Spatial extent entering each feature block, plus the final map size.

        With padding 1 each convolution preserves size and each pool halves
        it, so the list is patch_size / 2^i; with padding 0 the convolution
        shrinks the map by 2 first.
        """
        sizes = [self.patch_size]
        s = self.patch_size
        for i in range(5):
            after_conv = s + 2 * self.conv_padding - 2
            if after_conv < 2 or after_conv % 2:
                raise ValueError(
                    f"feature block {i + 1} would pool a {after_conv}x{after_conv} map; "
                    f"patch size {self.patch_size} is unusable at padding {self.conv_padding}"
                )
            s = after_conv // 2
            sizes.append(s)
        return sizes

    @property
    def feature_size(self) -> int:
        """Flattened length entering the first mapping block."""
        final = self.spatial_sizes()[-1]
        return self.channel_widths[-1] * final * final


def _layer_shapes(config: BranchConfig) -> list[tuple[int, ...]]:
    """Parameter shapes in declared layer order (kernel/bias per layer)."""
    shapes: list[tuple[int, ...]] = []
    c_in = 3
    for width in config.channel_widths:
        shapes.append((width, c_in, 3, 3))
        shapes.append((width,))
        c_in = width
    n_in = config.feature_size
    for width in (*config.fc_widths, config.num_classes):
        shapes.append((width, n_in))
        shapes.append((width,))
        n_in = width
    return shapes


@dataclass
class BranchModel:
    """One trained (or trainable) branch: role tag, config, parameters."""

    role: str
    config: BranchConfig
    conv_kernels: list[Tensor] = field(repr=False, default_factory=list)
    conv_biases: list[Tensor] = field(repr=False, default_factory=list)
    fc_weights: list[Tensor] = field(repr=False, default_factory=list)
    fc_biases: list[Tensor] = field(repr=False, default_factory=list)

    def __post_init__(self) -> None:
        if self.role not in BRANCH_ROLES:
            raise ValueError(f"branch role must be one of {BRANCH_ROLES}, got {self.role!r}")
        expected = _layer_shapes(self.config)
        actual = [p.shape for p in self.parameters()]
        if actual != expected:
            raise ValueError(f"layer shapes {actual} do not match config {expected}")
        dtypes = {p.dtype for p in self.parameters()}
        if not dtypes <= {np.dtype(np.float32), np.dtype(np.float64)}:
            raise ValueError(f"parameters must be float32 or float64, got {dtypes}")
        if len(dtypes) != 1:
            raise ValueError("parameters must share one dtype")

    def parameters(self) -> list[Tensor]:
        """All 16 parameter tensors in declared layer order."""
        out: list[Tensor] = []
        for k, b in zip(self.conv_kernels, self.conv_biases):
            out += [k, b]
        for w, b in zip(self.fc_weights, self.fc_biases):
            out += [w, b]
        return out

    @property
    def dtype(self) -> np.dtype:
        return self.conv_kernels[0].dtype


def build_branch(
    config: BranchConfig, role: str, seed: int, dtype: type = np.float32
) -> BranchModel:
    """Freshly initialized branch: He-scaled weights, zero biases.

    Weight draws follow declared layer order from a generator seeded with
    ``seed``, so construction is reproducible.
    """
    rng = np.random.default_rng(seed)
    conv_kernels, conv_biases, fc_weights, fc_biases = [], [], [], []
    c_in = 3
    for width in config.channel_widths:
        fan_in = c_in * 9
        conv_kernels.append(
            (rng.standard_normal((width, c_in, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        )
        conv_biases.append(np.zeros(width, dtype=dtype))
        c_in = width
    n_in = config.feature_size
    for width in (*config.fc_widths, config.num_classes):
        fc_weights.append((rng.standard_normal((width, n_in)) * np.sqrt(2.0 / n_in)).astype(dtype))
        fc_biases.append(np.zeros(width, dtype=dtype))
        n_in = width
    return BranchModel(role, config, conv_kernels, conv_biases, fc_weights, fc_biases)


def _forward_logits(model: BranchModel, x: Tensor) -> tuple[Tensor, list[LayerCache]]:
    """Batched forward pass up to the final logits; caches for backprop."""
    caches: list[LayerCache] = []
    for kernels, bias in zip(model.conv_kernels, model.conv_biases):
        x, c = conv2d(x, kernels, bias, padding=model.config.conv_padding)
        caches.append(c)
        x, c = maxpool2(x)
        caches.append(c)
        x, c = relu(x)
        caches.append(c)
    x = x.reshape(x.shape[0], -1)
    for i in range(2):
        x, c = fully_connected(x, model.fc_weights[i], model.fc_biases[i])
        caches.append(c)
        x, c = sigmoid(x)
        caches.append(c)
    logits, c = fully_connected(x, model.fc_weights[2], model.fc_biases[2])
    caches.append(c)
    return logits, caches


def _backward_params(
    model: BranchModel, grad_logits: Tensor, caches: list[LayerCache]
) -> list[Tensor]:
    """Gradients for every parameter, ordered like ``model.parameters()``."""
    it = reversed(caches)
    g, gw3, gb3 = fully_connected_backward(grad_logits, next(it))
    g = sigmoid_backward(g, next(it))
    g, gw2, gb2 = fully_connected_backward(g, next(it))
    g = sigmoid_backward(g, next(it))
    g, gw1, gb1 = fully_connected_backward(g, next(it))

    final = model.config.spatial_sizes()[-1]
    g = g.reshape(g.shape[0], model.config.channel_widths[-1], final, final)
    conv_grads: list[tuple[Tensor, Tensor]] = []
    for depth in range(5):
        g = relu_backward(g, next(it))
        g = maxpool2_backward(g, next(it))
        # The first conv layer's input gradient has no consumer; skip it.
        g, gk, gb = conv2d_backward(g, next(it), need_input_grad=depth < 4)
        conv_grads.append((gk, gb))
    conv_grads.reverse()

    grads: list[Tensor] = []
    for gk, gb in conv_grads:
        grads += [gk, gb]
    grads += [gw1, gb1, gw2, gb2, gw3, gb3]
    return grads


def _check_batch(model: BranchModel, patches: Tensor) -> Tensor:
    p = model.config.patch_size
    if patches.ndim != 4 or patches.shape[1:] != (3, p, p):
        raise ValueError(f"expected patches of shape (n, 3, {p}, {p}), got {patches.shape}")
    if patches.size and (patches.min() < -1e-9 or patches.max() > 1.0 + 1e-9):
        raise ValueError("patch values must lie in [0, 1]; normalize before classifying")
    return patches.astype(model.dtype, copy=False)


def batch_forward(model: BranchModel, patches: Tensor) -> Tensor:
    """Class distributions for a batch of normalized (3,P,P) patches.

    Distributions are float64 regardless of parameter dtype so they sum to
    1 to full precision; downstream fusion arithmetic relies on that.
    """
    x = _check_batch(model, patches)
    logits, _ = _forward_logits(model, x)
    return softmax(logits.astype(np.float64))


def branch_forward(model: BranchModel, patch: Tensor) -> Tensor:
    """Class distribution for one normalized (3,P,P) patch."""
    if patch.ndim != 3:
        raise ValueError(f"expected a (3, P, P) patch, got shape {patch.shape}")
    return batch_forward(model, patch[None])[0]


def loss_and_gradients(
    model: BranchModel, patches: Tensor, labels: Tensor
) -> tuple[float, list[Tensor]]:
    """Mean cross-entropy on a batch and its gradient for every parameter."""
    x = _check_batch(model, patches)
    logits, caches = _forward_logits(model, x)
    loss, grad_logits = softmax_cross_entropy_batch(logits, labels)
    return loss, _backward_params(model, grad_logits, caches)


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD hyperparameters."""

    learning_rate: float = 0.01
    batch_size: int = 32
    max_iterations: int = 20000
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class TrainLog:
    """Loss per iteration and running training accuracy per epoch."""

    losses: list[float] = field(default_factory=list)
    epoch_accuracies: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.losses)


def train_branch(
    model: BranchModel, samples: list[tuple[Tensor, int]], train_cfg: TrainConfig
) -> TrainLog:
    """Mini-batch SGD over (patch, class) samples until max_iterations.

    Samples are reshuffled each epoch from a generator seeded with the
    train config's seed, so runs are reproducible. Raises if the corpus is
    empty, a label is out of range, or the loss stops being finite.
    """
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    patches = np.stack([patch for patch, _ in samples])
    labels = np.array([label for _, label in samples], dtype=np.intp)
    if labels.min() < 0 or labels.max() >= model.config.num_classes:
        raise ValueError(
            f"labels must lie in [0, {model.config.num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    patches = _check_batch(model, patches)

    rng = np.random.default_rng(train_cfg.seed)
    params = model.parameters()
    velocities = None
    if train_cfg.momentum:
        velocities = [np.zeros_like(p) for p in params]
    log = TrainLog()
    iteration = 0
    count = patches.shape[0]
    while iteration < train_cfg.max_iterations:
        order = rng.permutation(count)
        correct = 0
        seen = 0
        for start in range(0, count, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            x, y = patches[batch], labels[batch]
            logits, caches = _forward_logits(model, x)
            loss, grad_logits = softmax_cross_entropy_batch(logits, y)
            if not np.isfinite(loss):
                raise ArithmeticError(
                    f"training diverged: loss became {loss} at iteration {iteration + 1}; "
                    f"lower the learning rate (currently {train_cfg.learning_rate})"
                )
            log.losses.append(loss)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(batch)
            sgd_step(
                params,
                _backward_params(model, grad_logits, caches),
                train_cfg.learning_rate,
                train_cfg.momentum,
                velocities,
            )
            iteration += 1
            if iteration >= train_cfg.max_iterations:
                break
        log.epoch_accuracies.append(correct / seen)
    return log


# ---------------------------------------------------------------------------
# Versioned binary model format.
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelFormatError("truncated model data")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ModelFormatError("truncated model data")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out


def save_model(model: BranchModel) -> bytes:
    """Serialize a branch; parameters are stored as little-endian float32."""
    role = model.role.encode("ascii")
    parts = [
        FORMAT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<B", len(role)),
        role,
        struct.pack("<I", model.config.patch_size),
        struct.pack("<B", len(model.config.channel_widths)),
        struct.pack(f"<{len(model.config.channel_widths)}I", *model.config.channel_widths),
        struct.pack("<B", len(model.config.fc_widths)),
        struct.pack(f"<{len(model.config.fc_widths)}I", *model.config.fc_widths),
        struct.pack("<I", model.config.num_classes),
        struct.pack("<B", model.config.conv_padding),
    ]
    params = model.parameters()
    parts.append(struct.pack("<H", len(params)))
    for p in params:
        parts.append(struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
    for p in params:
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def load_model(data: bytes) -> BranchModel:
    """Decode bytes written by save_model; raises ModelFormatError on damage."""
    r = _Reader(data)
    if r.take_bytes(4) != FORMAT_MAGIC:
        raise ModelFormatError("not a model file: bad magic")
    (version,) = r.take("<H")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    (role_len,) = r.take("<B")
    role = r.take_bytes(role_len).decode("ascii", errors="replace")
    (patch_size,) = r.take("<I")
    (n_conv,) = r.take("<B")
    channel_widths = r.take(f"<{n_conv}I")
    (n_fc,) = r.take("<B")
    fc_widths = r.take(f"<{n_fc}I")
    (num_classes,) = r.take("<I")
    (conv_padding,) = r.take("<B")
    try:
        config = BranchConfig(patch_size, channel_widths, fc_widths, num_classes, conv_padding)
    except ValueError as exc:
        raise ModelFormatError(f"invalid config block: {exc}") from None

    expected = _layer_shapes(config)
    (n_layers,) = r.take("<H")
    if n_layers != len(expected):
        raise ModelFormatError(f"shape table lists {n_layers} layers, expected {len(expected)}")
    shapes = []
    for _ in range(n_layers):
        (ndim,) = r.take("<B")
        shapes.append(tuple(r.take(f"<{ndim}I")))
    if shapes != expected:
        raise ModelFormatError("shape table does not match config")
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.take_bytes(4 * n)
        tensors.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} bytes of trailing data")
    if role not in BRANCH_ROLES:
        raise ModelFormatError(f"unknown branch role {role!r}")
    return BranchModel(
        role,
        config,
        conv_kernels=tensors[0:10:2],
        conv_biases=tensors[1:10:2],
        fc_weights=tensors[10::2],
        fc_biases=tensors[11::2],
    )

"""
Convolutional policy/value network with exact reverse-mode gradients in numpy.

Topology (fixed): conv 8x8/4 -> conv 4x4/2 -> conv 3x3/1 -> fc -> {policy head
(6 means), value head (1)}, ReLU everywhere except the heads, plus a learned
state-independent log-std vector. Inputs are channel-first (N, 2C, h_o, w_o).

Checkpoint layout (little-endian):
    b"BGCK" | u16 version | u16 tensor count
    u32 in_channels, input_h, input_w, filters1, filters2, filters3, fc_units | f64 init_log_std
    per tensor: u8 name length | name (ascii) | u8 ndim | u32 dims...
    then every tensor's float64 data in table order
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from canvas import Action, Observation
from errors import CheckpointError, ShapeMismatchError, TopologyMismatchError

logger = logging.getLogger(__name__)

ACTION_DIM = 6
CONV_GEOMETRY = ((8, 4), (4, 2), (3, 1))
CHECKPOINT_MAGIC = b"BGCK"
CHECKPOINT_VERSION = 2
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
               "fc_w", "fc_b", "pi_w", "pi_b", "v_w", "v_b", "log_std")
TRUNK_AND_POLICY = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
                    "fc_w", "fc_b", "pi_w", "pi_b")


class NetworkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Literal["desk", "full"] = "desk"
    in_channels: int = Field(default=2, ge=1)
    input_h: int = Field(default=84, ge=1)
    input_w: int = Field(default=84, ge=1)
    filters: Tuple[int, int, int] = (16, 16, 16)
    fc_units: int = Field(default=128, ge=1)
    init_log_std: float = -0.5

    @classmethod
    def for_preset(cls, preset: str, in_channels: int, input_h: int, input_w: int,
                   init_log_std: float = -0.5) -> "NetworkSpec":
        if preset == "full":
            return cls(preset="full", in_channels=in_channels, input_h=input_h, input_w=input_w,
                       filters=(64, 64, 64), fc_units=512, init_log_std=init_log_std)
        return cls(preset="desk", in_channels=in_channels, input_h=input_h, input_w=input_w,
                   filters=(16, 16, 16), fc_units=128, init_log_std=init_log_std)


def layer_shapes(spec: NetworkSpec) -> List[Tuple[int, int, int]]:
    """(channels, height, width) after each conv layer."""
    shapes = []
    channels, height, width = spec.in_channels, spec.input_h, spec.input_w
    for filters, (kernel, stride) in zip(spec.filters, CONV_GEOMETRY):
        height = (height - kernel) // stride + 1
        width = (width - kernel) // stride + 1
        if height < 1 or width < 1:
            raise TopologyMismatchError(
                f"input {spec.input_h}x{spec.input_w} is too small for the conv stack")
        channels = filters
        shapes.append((channels, height, width))
    return shapes


class ActionDistribution(BaseModel):
    """Diagonal Gaussian over pre-squash actions; `mean` is the squashed location."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    loc: np.ndarray
    log_std: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def mean(self) -> np.ndarray:
        return expit(self.loc)

    def log_prob(self, raw: np.ndarray) -> np.ndarray:
        return gaussian_log_prob(raw, self.loc, self.log_std)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * np.log(2.0 * np.pi * np.e)))


class SampledAction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    action: Action
    raw: np.ndarray
    log_prob: float
    squashed_log_prob: float


class PolicyParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    spec: NetworkSpec
    arrays: Dict[str, np.ndarray]

    def copy(self) -> "PolicyParams":
        return PolicyParams(spec=self.spec.model_copy(),
                            arrays={name: value.copy() for name, value in self.arrays.items()})

    def param_count(self) -> int:
        return int(sum(value.size for value in self.arrays.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.arrays.values())


def gaussian_log_prob(raw: np.ndarray, loc: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (raw - loc) * np.exp(-log_std)
    return np.sum(-0.5 * z ** 2 - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def squash_log_jacobian(raw: np.ndarray) -> np.ndarray:
    """sum log(sigmoid(z) * (1 - sigmoid(z)))."""
    return np.sum(-np.logaddexp(0.0, -raw) - np.logaddexp(0.0, raw), axis=-1)


def to_action(squashed: np.ndarray, pen_up_width: float = 0.0) -> Action:
    """Build an Action from a squashed vector; widths below pen_up_width snap to a pen-up."""
    values = np.clip(np.asarray(squashed, dtype=np.float64), 0.0, 1.0)
    if values[2] < pen_up_width:
        values = values.copy()
        values[2] = 0.0
    return Action.from_vector(values)


def _orthogonal(shape: Tuple[int, ...], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape[0], int(np.prod(shape[1:]))
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols].reshape(shape)


def init_value_head(spec: NetworkSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {"v_w": _orthogonal((1, spec.fc_units), 1.0, rng), "v_b": np.zeros(1)}


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> PolicyParams:
    shapes = layer_shapes(spec)
    gain = np.sqrt(2.0)
    arrays: Dict[str, np.ndarray] = {}
    in_channels = spec.in_channels
    for index, ((filters, _, _), (kernel, _)) in enumerate(zip(shapes, CONV_GEOMETRY), start=1):
        arrays[f"conv{index}_w"] = _orthogonal((filters, in_channels, kernel, kernel), gain, rng)
        arrays[f"conv{index}_b"] = np.zeros(filters)
        in_channels = filters
    flat = int(np.prod(shapes[-1]))
    arrays["fc_w"] = _orthogonal((spec.fc_units, flat), gain, rng)
    arrays["fc_b"] = np.zeros(spec.fc_units)
    arrays["pi_w"] = _orthogonal((ACTION_DIM, spec.fc_units), 0.01, rng)
    arrays["pi_b"] = np.zeros(ACTION_DIM)
    arrays.update(init_value_head(spec, rng))
    arrays["log_std"] = np.full(ACTION_DIM, spec.init_log_std)
    return PolicyParams(spec=spec, arrays=arrays)


def zeros_like_params(params: PolicyParams) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.arrays.items()}


def _conv_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    windows = _conv_windows(x, weight.shape[2], stride)
    return np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True) + bias[None, :, None, None]


def _conv_backward(x: np.ndarray, weight: np.ndarray, stride: int, grad_out: np.ndarray,
                   need_input_grad: bool = True):
    kernel = weight.shape[2]
    windows = _conv_windows(x, kernel, stride)
    grad_w = np.einsum("nchwij,nohw->ocij", windows, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_w, grad_b
    grad_x = np.zeros_like(x)
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]
    for i in range(kernel):
        for j in range(kernel):
            grad_x[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                np.einsum("nohw,oc->nchw", grad_out, weight[:, :, i, j], optimize=True)
    return grad_x, grad_w, grad_b


def _as_batch(params: PolicyParams, inputs) -> np.ndarray:
    if isinstance(inputs, Observation):
        inputs = inputs.stacked()
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    spec = params.spec
    expected = (spec.in_channels, spec.input_h, spec.input_w)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatchError(f"network expects (N, {expected}), got {x.shape}")
    return x


def forward_batch(params: PolicyParams, inputs) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Returns (loc (N,6), value (N,), cache) for a batch of stacked observations."""
    x = _as_batch(params, inputs)
    p = params.arrays
    cache = {"x": x}
    activation = x
    for index, (_, stride) in enumerate(CONV_GEOMETRY, start=1):
        pre = _conv_forward(activation, p[f"conv{index}_w"], p[f"conv{index}_b"], stride)
        activation = np.maximum(pre, 0.0)
        cache[f"a{index}"] = activation
    flat = activation.reshape(activation.shape[0], -1)
    hidden = np.maximum(flat @ p["fc_w"].T + p["fc_b"], 0.0)
    cache["flat"] = flat
    cache["hidden"] = hidden
    loc = hidden @ p["pi_w"].T + p["pi_b"]
    value = (hidden @ p["v_w"].T + p["v_b"])[:, 0]
    return loc, value, cache


def forward(params: PolicyParams, obs) -> Tuple[ActionDistribution, float]:
    loc, value, _ = forward_batch(params, obs)
    return ActionDistribution(loc=loc[0], log_std=params.arrays["log_std"].copy()), float(value[0])


def backward(params: PolicyParams, cache: dict, grad_loc: np.ndarray, grad_value: np.ndarray,
             grad_log_std: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Gradients of a scalar objective given its gradients w.r.t. loc (N,6), value (N,) and log_std."""
    p = params.arrays
    grads: Dict[str, np.ndarray] = {}
    grad_loc = np.asarray(grad_loc, dtype=np.float64).reshape(-1, ACTION_DIM)
    grad_value = np.asarray(grad_value, dtype=np.float64).reshape(-1, 1)
    hidden = cache["hidden"]

    grads["pi_w"] = grad_loc.T @ hidden
    grads["pi_b"] = grad_loc.sum(axis=0)
    grads["v_w"] = grad_value.T @ hidden
    grads["v_b"] = grad_value.sum(axis=0)
    grad_hidden = (grad_loc @ p["pi_w"] + grad_value @ p["v_w"]) * (hidden > 0.0)

    grads["fc_w"] = grad_hidden.T @ cache["flat"]
    grads["fc_b"] = grad_hidden.sum(axis=0)
    grad_act = (grad_hidden @ p["fc_w"]).reshape(cache["a3"].shape)

    for index in (3, 2, 1):
        _, stride = CONV_GEOMETRY[index - 1]
        grad_pre = grad_act * (cache[f"a{index}"] > 0.0)
        layer_input = cache["x"] if index == 1 else cache[f"a{index - 1}"]
        grad_act, grads[f"conv{index}_w"], grads[f"conv{index}_b"] = _conv_backward(
            layer_input, p[f"conv{index}_w"], stride, grad_pre, need_input_grad=index > 1)

    grads["log_std"] = np.zeros(ACTION_DIM) if grad_log_std is None else np.asarray(grad_log_std, dtype=np.float64)
    return grads


def sample_action(dist: ActionDistribution, rng: np.random.Generator,
                  pen_up_width: float = 0.0) -> SampledAction:
    raw = dist.loc + dist.scale * rng.standard_normal(ACTION_DIM)
    log_prob = float(dist.log_prob(raw))
    return SampledAction(action=to_action(expit(raw), pen_up_width), raw=raw, log_prob=log_prob,
                         squashed_log_prob=log_prob - float(squash_log_jacobian(raw)))


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class AdamOptimizer:
    def __init__(self, learning_rate: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, max_grad_norm: Optional[float] = 0.5):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.steps = 0
        self.first: Dict[str, np.ndarray] = {}
        self.second: Dict[str, np.ndarray] = {}

    def step(self, params: PolicyParams, grads: Dict[str, np.ndarray],
             frozen: Tuple[str, ...] = ()) -> PolicyParams:
        if self.max_grad_norm is not None:
            norm = global_norm(grads)
            if norm > self.max_grad_norm:
                grads = {name: g * (self.max_grad_norm / norm) for name, g in grads.items()}
        self.steps += 1
        updated = params.copy()
        for name, grad in grads.items():
            if name in frozen:
                continue
            m = self.first.get(name, np.zeros_like(grad))
            v = self.second.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first[name], self.second[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** self.steps)
            v_hat = v / (1.0 - self.beta2 ** self.steps)
            updated.arrays[name] = params.arrays[name] - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def check_topology(params: PolicyParams, spec: NetworkSpec) -> None:
    expected = init_params(spec, np.random.default_rng(0)).arrays
    for name in PARAM_ORDER:
        if name not in params.arrays or params.arrays[name].shape != expected[name].shape:
            raise TopologyMismatchError(f"parameter {name} does not match network spec {spec.preset}",
                                        details={"name": name})


def save_checkpoint(path: str | Path, params: PolicyParams) -> None:
    spec = params.spec
    header = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(PARAM_ORDER)),
              struct.pack("<7Id", spec.in_channels, spec.input_h, spec.input_w, *spec.filters,
                          spec.fc_units, spec.init_log_std)]
    for name in PARAM_ORDER:
        shape = params.arrays[name].shape
        encoded = name.encode("ascii")
        header.append(struct.pack("<B", len(encoded)) + encoded)
        header.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
    body = [params.arrays[name].astype("<f8").tobytes() for name in PARAM_ORDER]
    Path(path).write_bytes(b"".join(header + body))
    logger.info(f"Saved checkpoint {path} ({params.param_count()} parameters)")


def load_checkpoint(path: str | Path) -> PolicyParams:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a brushgym checkpoint")
    try:
        version, count = struct.unpack_from("<HH", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 8
        in_channels, input_h, input_w, f1, f2, f3, fc_units, init_log_std = struct.unpack_from("<7Id", data, offset)
        offset += struct.calcsize("<7Id")
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<B", data, offset)
            name = data[offset + 1:offset + 1 + name_len].decode("ascii")
            offset += 1 + name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            shape = struct.unpack_from(f"<{ndim}I", data, offset + 1)
            offset += 1 + 4 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            size = int(np.prod(shape))
            values = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            arrays[name] = values.astype(np.float64).reshape(shape)
            offset += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}")
    preset = "full" if (f1, f2, f3, fc_units) == (64, 64, 64, 512) else "desk"
    spec = NetworkSpec(preset=preset, in_channels=in_channels, input_h=input_h, input_w=input_w,
                       filters=(f1, f2, f3), fc_units=fc_units, init_log_std=float(init_log_std))
    params = PolicyParams(spec=spec, arrays=arrays)
    check_topology(params, spec)
    return params

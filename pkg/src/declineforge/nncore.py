"""Numerical core for the model zoo.

Thin layer over torch: float64 functional ops with shape checking, the
modules built from them, a parameter store driving Adam, a finite-difference
gradient checker and a versioned checkpoint format.
"""

import contextlib
import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .errors import ArgumentError, ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
FD_STEP = 1e-5
TRANSFORMER_INIT_STD = 0.02

CHECKPOINT_MAGIC = b"DFCKPT"
CHECKPOINT_VERSION = 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(200, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(4, ge=1)
    dropout_rate: float = Field(0.0, ge=0, lt=1)
    seed: int = 0


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch seed without disturbing the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
        yield


# Functional ops


def linear_forward(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError("linear_forward", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise ShapeError("linear_forward", W.shape, b.shape)
    return x @ W + b


def conv3d_forward(
    x: torch.Tensor,
    kernels: torch.Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Cross-correlation over (N, C, D, H, W) with kernels (C_out, C_in, k, k, k)."""
    if stride < 1:
        raise ArgumentError(f"conv3d stride must be >= 1, got {stride}")
    if x.dim() != 5 or kernels.dim() != 5 or x.shape[1] != kernels.shape[1]:
        raise ShapeError("conv3d_forward", x.shape, kernels.shape)
    padded = [s + 2 * padding for s in x.shape[2:]]
    if any(k > p for k, p in zip(kernels.shape[2:], padded)):
        raise ShapeError("conv3d_forward", x.shape, kernels.shape)
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise ShapeError("conv3d_forward", kernels.shape, bias.shape)
    return F.conv3d(x, kernels, bias, stride=stride, padding=padding)


class AttentionParams(NamedTuple):
    w_q: torch.Tensor
    b_q: torch.Tensor
    w_k: torch.Tensor
    b_k: torch.Tensor
    w_v: torch.Tensor
    b_v: torch.Tensor
    w_o: torch.Tensor
    b_o: torch.Tensor


def multi_head_attention(
    x: torch.Tensor,
    heads: int,
    params: AttentionParams,
    return_weights: bool = False,
) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """Scaled dot-product attention over tokens ``x`` of shape (..., n, d)."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"embed dim {d} is not divisible by heads={heads}")
    dh = d // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-3, -2)

    q = split(linear_forward(x, params.w_q, params.b_q))
    k = split(linear_forward(x, params.w_k, params.b_k))
    v = split(linear_forward(x, params.w_v, params.b_v))
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    mixed = (weights @ v).transpose(-3, -2).reshape(x.shape)
    out = linear_forward(mixed, params.w_o, params.b_o)
    return (out, weights) if return_weights else out


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gain.shape)
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def softmax_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood; d/dlogits is (softmax - onehot) / n."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    return F.mse_loss(pred, target)


# Modules


def _uniform_fan_in(shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.empty(shape, dtype=DTYPE).uniform_(-bound, bound)


class Linear(nn.Module):
    """Dense layer with ``weight`` stored (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(_uniform_fan_in((d_in, d_out), d_in))
        self.bias = nn.Parameter(_uniform_fan_in((d_out,), d_in))

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


class Conv3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = c_in * kernel ** 3
        self.weight = nn.Parameter(_uniform_fan_in((c_out, c_in, kernel, kernel, kernel), fan_in))
        self.bias = nn.Parameter(_uniform_fan_in((c_out,), fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv3d_forward(x, self.weight, self.stride, self.padding, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigError(f"embed dim {d} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.out = Linear(d, d)

    def params(self) -> AttentionParams:
        return AttentionParams(
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.out.weight, self.out.bias,
        )

    def forward(self, x, return_weights: bool = False):
        return multi_head_attention(x, self.heads, self.params(), return_weights)


class Mlp(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(F.gelu(self.fc1(x)))))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d: int, heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, int(round(d * mlp_ratio)), dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.mlp(self.norm2(x))


def init_transformer_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) weights and zero biases for every dense layer."""
    for sub in module.modules():
        if isinstance(sub, Linear):
            with torch.no_grad():
                nn.init.trunc_normal_(sub.weight, std=TRANSFORMER_INIT_STD, a=-2 * TRANSFORMER_INIT_STD, b=2 * TRANSFORMER_INIT_STD)
                sub.bias.zero_()


# Parameters and optimisation


class ParamStore:
    """Named parameters with Adam state; iteration is ordered by name.

    ``group_lrs`` maps a name prefix to its own learning rate; parameters
    matching no prefix use ``lr``.
    """

    def __init__(
        self,
        params: Union[nn.Module, Mapping[str, torch.Tensor]],
        lr: float,
        group_lrs: Optional[Mapping[str, float]] = None,
        betas: Tuple[float, float] = ADAM_BETAS,
        eps: float = ADAM_EPS,
    ):
        named = params.named_parameters() if isinstance(params, nn.Module) else params.items()
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict(
            (name, p) for name, p in sorted(named, key=lambda kv: kv[0]) if p.requires_grad
        )
        self.group_lrs = dict(group_lrs or {})
        groups: Dict[str, List[torch.Tensor]] = OrderedDict()
        for name, p in self.params.items():
            groups.setdefault(self.group_of(name), []).append(p)
        param_groups = [
            {"params": ps, "lr": self.group_lrs.get(g, lr), "name": g} for g, ps in groups.items()
        ]
        self.optimizer = torch.optim.Adam(param_groups, lr=lr, betas=betas, eps=eps)
        # completed update steps; the next step uses t = steps + 1 for bias correction
        self.steps = 0

    def group_of(self, name: str) -> str:
        for prefix in sorted(self.group_lrs, key=len, reverse=True):
            if name == prefix or name.startswith(prefix + "."):
                return prefix
        return "default"

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=False)

    def learning_rates(self) -> Dict[str, float]:
        return {g["name"]: g["lr"] for g in self.optimizer.param_groups}


def adam_step(
    store: ParamStore,
    lr: Optional[float] = None,
    beta1: Optional[float] = None,
    beta2: Optional[float] = None,
    eps: Optional[float] = None,
    t: Optional[int] = None,
) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    Hyperparameters left as ``None`` come from the store: per-group learning
    rates, the betas and eps it was built with. A value passed here replaces
    the store's setting for every group from this step on. ``t`` is the 1-based
    step used for bias correction; the store counts it, so a given ``t`` must
    equal ``store.steps + 1``.
    """
    if t is not None and t != store.steps + 1:
        raise ArgumentError(f"adam_step: store is at step {store.steps}, cannot apply t={t}")
    for name, p in store:
        if p.grad is not None and p.grad.shape != p.shape:
            raise ShapeError("adam_step", p.shape, p.grad.shape)
    for group in store.optimizer.param_groups:
        if lr is not None:
            group["lr"] = lr
        b1, b2 = group["betas"]
        group["betas"] = (b1 if beta1 is None else beta1, b2 if beta2 is None else beta2)
        if eps is not None:
            group["eps"] = eps
    store.optimizer.step()
    store.steps += 1


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    module: Optional[nn.Module] = None,
    tolerance: float = 1e-5,
    step: float = FD_STEP,
) -> GradCheckReport:
    """Compare autograd gradients against central differences.

    Covers every tensor in ``inputs`` and every parameter of ``module``.
    Relative error per entry is |a - n| / max(1, |a|, |n|). Stochastic layers
    are switched off for the duration of the check.
    """
    inputs = [t.detach().to(DTYPE).requires_grad_(True) for t in inputs]
    targets = list(inputs)
    if module is not None:
        targets += [p for _, p in sorted(module.named_parameters()) if p.requires_grad]
    was_training = module.training if module is not None else False
    if module is not None:
        module.eval()
    try:
        out = fn(*inputs)
        if out.numel() != 1:
            raise ArgumentError(f"grad_check needs a scalar output, got shape {tuple(out.shape)}")
        analytic = torch.autograd.grad(out, targets, allow_unused=True)
        worst, checked = 0.0, 0
        with torch.no_grad():
            for tensor, grad in zip(targets, analytic):
                grad = torch.zeros_like(tensor) if grad is None else grad
                flat, gflat = tensor.view(-1), grad.reshape(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + step
                    plus = fn(*inputs).item()
                    flat[i] = orig - step
                    minus = fn(*inputs).item()
                    flat[i] = orig
                    numeric = (plus - minus) / (2 * step)
                    a = gflat[i].item()
                    worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
                    checked += 1
    finally:
        if module is not None:
            module.train(was_training)
    logger.debug("grad_check: %d entries, max relative error %.3g", checked, worst)
    return GradCheckReport(max_relative_error=worst, tolerance=tolerance, checked=checked)


# Checkpoints


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(module: Union[nn.Module, Mapping[str, torch.Tensor]], path) -> None:
    """Binary header + name-sorted float64 blobs, plus a JSON manifest of shapes."""
    path = Path(path)
    state = module.state_dict() if isinstance(module, nn.Module) else module
    entries = sorted(state.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(entries)))
        for name, tensor in entries:
            blob = tensor.detach().cpu().to(DTYPE).contiguous().numpy().astype("<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<HB", len(encoded), blob.ndim))
            fh.write(encoded)
            fh.write(struct.pack(f"<{blob.ndim}I", *blob.shape))
            fh.write(blob.tobytes())
    manifest = {
        "format": CHECKPOINT_MAGIC.decode(),
        "version": CHECKPOINT_VERSION,
        "params": {name: list(tensor.shape) for name, tensor in entries},
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2))
    logger.info("wrote checkpoint %s (%d tensors)", path, len(entries))


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<HI", raw, offset)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        offset += 6
        state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", raw, offset)
            offset += 3
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            state[name] = torch.from_numpy(values.astype(np.float64).reshape(shape))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint ({exc})") from exc
    manifest_file = _manifest_path(path)
    if manifest_file.exists():
        shapes = json.loads(manifest_file.read_text()).get("params", {})
        for name, tensor in state.items():
            if list(tensor.shape) != shapes.get(name):
                raise DataError(f"{path}: tensor '{name}' disagrees with the shape manifest")
    return state

"""Differentiable building blocks shared by every network in the package.

Everything runs in float64 on the CPU. Reverse-mode gradients come from
``torch.autograd``; ``grad_check`` compares them against central finite
differences computed here, independently of autograd.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import torch
from torch import nn
import torch.nn.functional as F

DTYPE = torch.float64
STD_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)

ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
    "softplus": F.softplus,
}


class ConfigError(ValueError):
    """Raised for shape or configuration mistakes."""


class DomainError(ValueError):
    """Raised when a numeric argument is outside its valid domain."""


class UsageError(RuntimeError):
    """Raised when an API is called in the wrong order or state."""


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


Grads = Dict[str, torch.Tensor]


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian stored as mean and per-dimension std.

    Both tensors share a shape ``(..., c)``; the last axis is the event axis.
    """

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ConfigError(f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, shape: Sequence[int]) -> "DiagGaussian":
        return cls(torch.zeros(*shape, dtype=DTYPE), torch.ones(*shape, dtype=DTYPE))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())

    def expand_samples(self, k: int) -> "DiagGaussian":
        """Insert a sample axis of size ``k`` before the event axis."""
        return DiagGaussian(self.mean.unsqueeze(-2).expand(*self.mean.shape[:-1], k, self.dim),
                            self.std.unsqueeze(-2).expand(*self.std.shape[:-1], k, self.dim))


def _check_std(g: DiagGaussian):
    if not bool((g.std > 0).all()):
        raise DomainError("standard deviation must be strictly positive")


def gaussian_log_prob(x: torch.Tensor, g: DiagGaussian) -> torch.Tensor:
    """Log density of ``x`` under ``g``, summed over the last axis."""
    x = as_tensor(x)
    if x.shape[-1] != g.dim:
        raise DomainError(f"x has {x.shape[-1]} dims, distribution has {g.dim}")
    _check_std(g)
    u = (x - g.mean) / g.std
    return (-0.5 * LOG_2PI - torch.log(g.std) - 0.5 * u * u).sum(-1)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis.

    Written as 0.5 * (tr(Sp^-1 Sq) + (mp - mq)^T Sp^-1 (mp - mq) - c + log|Sp|/|Sq|)
    with the covariances taken as squared stds.
    """
    if q.dim != p.dim:
        raise DomainError(f"dimension mismatch {q.dim} vs {p.dim}")
    _check_std(q)
    _check_std(p)
    var_q = q.std * q.std
    var_p = p.std * p.std
    diff = p.mean - q.mean
    trace = (var_q / var_p).sum(-1)
    quad = (diff * diff / var_p).sum(-1)
    logdet = 2.0 * (torch.log(p.std) - torch.log(q.std)).sum(-1)
    return 0.5 * (trace + quad - q.dim + logdet)


def reparam_sample(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    noise = as_tensor(noise)
    if noise.shape[-1] != g.dim:
        raise DomainError(f"noise has {noise.shape[-1]} dims, distribution has {g.dim}")
    return g.mean + g.std * noise


def logsumexp(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.logsumexp(x, dim=dim)


# ---------------------------------------------------------------------------
# layers


def init_dense(layer: nn.Linear) -> nn.Linear:
    """Scaled-uniform (Glorot) weights, zero bias."""
    bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound)
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


def dense(n_in: int, n_out: int) -> nn.Linear:
    return init_dense(nn.Linear(n_in, n_out, dtype=DTYPE))


class MLP(nn.Module):
    """Plain stack of dense layers.

    ``sizes`` lists every width including input and output, ``activations``
    has one tag per layer (``len(sizes) - 1`` entries).
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str]):
        super().__init__()
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least an input and an output size")
        if len(activations) != len(sizes) - 1:
            raise ConfigError(f"{len(sizes) - 1} layers but {len(activations)} activation tags")
        for i, tag in enumerate(activations):
            if tag not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {tag!r}")
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.layers = nn.ModuleList(dense(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, x)


def mlp_forward(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    x = as_tensor(x)
    for i, (layer, tag) in enumerate(zip(mlp.layers, mlp.activations)):
        if x.shape[-1] != layer.in_features:
            raise ConfigError(f"layer {i}: expected input width {layer.in_features}, got {x.shape[-1]}")
        x = ACTIVATIONS[tag](layer(x))
    return x


class ResidualBlock(nn.Module):
    """``x + W2 [act(W1 [x, c]), c]`` where ``c`` is an optional conditioning vector.

    The conditioning input is how actions (and skip features) are fed into
    every dense layer of the VDM bodies.
    """

    def __init__(self, width: int, cond_dim: int = 0, activation: str = "tanh"):
        super().__init__()
        self.width = width
        self.cond_dim = cond_dim
        self.act = ACTIVATIONS[activation]
        self.inner1 = dense(width + cond_dim, width)
        self.inner2 = dense(width + cond_dim, width)

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        return residual_block(self, x, cond)


def _cat(x: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
    return x if cond is None else torch.cat([x, cond], dim=-1)


def residual_block(block: ResidualBlock, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != block.width:
        raise ConfigError(f"residual block width {block.width} but input width {x.shape[-1]}")
    if (cond is None and block.cond_dim) or (cond is not None and cond.shape[-1] != block.cond_dim):
        raise ConfigError(f"residual block expects conditioning width {block.cond_dim}")
    h = block.act(block.inner1(_cat(x, cond)))
    return x + block.inner2(_cat(h, cond))


class GaussianHead(nn.Module):
    """Dense layer emitting a DiagGaussian; std = softplus(raw) + STD_FLOOR."""

    def __init__(self, n_in: int, dim: int):
        super().__init__()
        self.dim = dim
        self.out = dense(n_in, 2 * dim)

    def forward(self, h: torch.Tensor) -> DiagGaussian:
        raw = self.out(h)
        mean, pre_std = raw[..., : self.dim], raw[..., self.dim:]
        return DiagGaussian(mean, F.softplus(pre_std) + STD_FLOOR)


# ---------------------------------------------------------------------------
# gradients and optimisation


def named_params(module: nn.Module) -> Dict[str, nn.Parameter]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


def backward(loss: torch.Tensor, module: nn.Module) -> Grads:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. the module's parameters.

    The recorded graph is released afterwards; a second call on the same
    loss raises ``UsageError``. Parameters the loss does not touch get zeros.
    """
    if loss.dim() != 0:
        raise UsageError("backward needs a scalar loss")
    if getattr(loss, "_vdmx_consumed", False):
        raise UsageError("graph already consumed by a previous backward call")
    params = named_params(module)
    names = list(params)
    try:
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    except RuntimeError as exc:
        raise UsageError(str(exc)) from exc
    loss._vdmx_consumed = True
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


class Adam:
    """Adam over a module's parameters with named non-finite checks.

    Wraps ``torch.optim.Adam``; ``step_count`` counts applied steps, including
    steps with all-zero gradients.
    """

    def __init__(self, module: nn.Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.params = named_params(module)
        self.opt = torch.optim.Adam(self.params.values(), lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float):
        for group in self.opt.param_groups:
            group["lr"] = value

    def step(self, grads: Grads):
        adam_step(self, grads)

    def state_dict(self) -> dict:
        return {"opt": self.opt.state_dict(), "step_count": self.step_count}

    def load_state_dict(self, state: dict):
        self.opt.load_state_dict(state["opt"])
        self.step_count = state["step_count"]


def adam_step(opt: Adam, grads: Grads, lr: float | None = None) -> Adam:
    for name, g in grads.items():
        if name not in opt.params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != opt.params[name].shape:
            raise ConfigError(f"gradient shape mismatch for {name!r}")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(name)
    if lr is not None:
        opt.lr = lr
    for name, p in opt.params.items():
        g = grads.get(name)
        p.grad = torch.zeros_like(p) if g is None else g.detach().clone()
    opt.opt.step()
    for p in opt.params.values():
        p.grad = None
    opt.step_count += 1
    return opt


def grad_check(fn: Callable[[], torch.Tensor], module: nn.Module, h: float = 1e-5,
               atol: float = 1e-8, max_entries: int | None = None,
               generator: torch.Generator | None = None) -> Tuple[float, str]:
    """Worst relative error between ``backward`` and central differences.

    ``fn`` must be deterministic (fixed noise). The per-entry error is
    ``|a - n| / max(|a|, |n|, atol)``. ``max_entries`` caps the number of
    checked entries per parameter tensor (a random subset) for big modules.
    Returns ``(worst_error, "param[index]")``.
    """
    analytic = backward(fn(), module)
    worst, where = 0.0, ""
    params = named_params(module)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=generator)[:max_entries].tolist()
            else:
                idx = range(n)
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = fn().item()
                flat[i] = orig - h
                f_minus = fn().item()
                flat[i] = orig
                num = (f_plus - f_minus) / (2.0 * h)
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), atol)
                if err > worst:
                    worst, where = err, f"{name}[{i}]"
    return worst, where


@contextlib.contextmanager
def seeded_init(seed: int | None):
    """Parameter initialisation inside the block depends only on ``seed``.

    The global torch RNG is restored afterwards. ``None`` is a no-op.
    """
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def snapshot(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def concat(parts: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([p for p in parts if p is not None], dim=-1)

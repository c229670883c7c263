"""Numerical substrate: masked reductions, layer norm, Adam and the
finite-difference gradient oracle.

Dense arrays and reverse-mode gradients come from torch. Everything the
model needs on top of that (masking conventions, the optimizer, the
verification oracle) lives here so every other module shares one set of
primitives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
from torch import Tensor, nn

LAYER_NORM_EPS = 1e-6


class EmptySupport(ValueError):
    """Raised when a masked normalization has nothing to normalize over."""


class NonFiniteValue(ArithmeticError):
    pass


def masked_softmax(logits: Tensor, mask: Tensor, dim: int = -1, strict: bool = False) -> Tensor:
    """Softmax over ``dim`` restricted to positions where ``mask`` is set.

    Masked positions come out as exact zeros. A slice with an empty mask
    yields all zeros, or raises :class:`EmptySupport` when ``strict``.
    """
    mask = mask.bool()
    if mask.shape != logits.shape:
        mask = mask.expand_as(logits)
    support = mask.any(dim=dim, keepdim=True)
    if strict and not bool(support.all()):
        raise EmptySupport("mask is empty along the softmax axis")
    # the shift only stabilizes exp(); softmax is invariant to it
    shift = torch.where(mask, logits, torch.full_like(logits, -math.inf)).amax(dim=dim, keepdim=True)
    shift = torch.where(support, shift, torch.zeros_like(shift)).detach()
    shifted = torch.where(mask, logits - shift, torch.zeros_like(logits))
    weights = torch.exp(shifted) * mask.to(logits.dtype)
    total = weights.sum(dim=dim, keepdim=True)
    total = torch.where(support, total, torch.ones_like(total))
    return weights / total


def masked_max(x: Tensor, mask: Tensor, dim: int) -> Tensor:
    """Max over ``dim`` ignoring masked entries; empty slices give 0.

    ``mask`` broadcasts against ``x``.
    """
    mask = mask.bool().expand_as(x)
    filled = torch.where(mask, x, torch.full_like(x, -math.inf))
    out = filled.amax(dim=dim)
    support = mask.any(dim=dim)
    return torch.where(support, out, torch.zeros_like(out))


def masked_mean(x: Tensor, mask: Tensor, dim: int) -> Tensor:
    mask = mask.to(x.dtype).expand_as(x)
    total = (x * mask).sum(dim=dim)
    count = mask.sum(dim=dim)
    return total / count.clamp_min(1.0)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit (population) variance."""
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"gain/bias width {gain.shape[-1]}/{bias.shape[-1]} does not match input width {x.shape[-1]}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return gain * centered / torch.sqrt(var + eps) + bias


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


@dataclass
class AdamState:
    first_moment: Tensor
    second_moment: Tensor
    step: int = 0


@dataclass
class ParameterStore:
    """Named trainable tensors plus per-parameter Adam state."""

    params: dict[str, Tensor] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        store = cls()
        for name, param in module.named_parameters():
            if param.requires_grad:
                store.register(name, param)
        return store

    def register(self, name: str, tensor: Tensor) -> None:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        if any(tensor is t for t in self.params.values()):
            raise ValueError(f"tensor for {name!r} is already registered under another name")
        self.params[name] = tensor

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state_dict(self) -> dict:
        return {
            name: {"m": s.first_moment.clone(), "v": s.second_moment.clone(), "step": s.step}
            for name, s in self.state.items()
        }

    def load_state_dict(self, saved: Mapping) -> None:
        self.state = {
            name: AdamState(entry["m"].clone(), entry["v"].clone(), int(entry["step"]))
            for name, entry in saved.items()
        }


def adam_step(store: ParameterStore, grads: Mapping[str, Tensor], hyper: AdamHyper) -> ParameterStore:
    """Apply one bias-corrected Adam update in place and return ``store``."""
    missing = [name for name in store.params if name not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    b1, b2 = hyper.beta1, hyper.beta2
    with torch.no_grad():
        for name, param in store.params.items():
            grad = grads[name]
            if grad is None:
                grad = torch.zeros_like(param)
            st = store.state.get(name)
            if st is None:
                st = store.state[name] = AdamState(torch.zeros_like(param), torch.zeros_like(param))
            st.step += 1
            st.first_moment.mul_(b1).add_(grad, alpha=1.0 - b1)
            st.second_moment.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
            m_hat = st.first_moment / (1.0 - b1 ** st.step)
            v_hat = st.second_moment / (1.0 - b2 ** st.step)
            param.sub_(hyper.learning_rate * m_hat / (torch.sqrt(v_hat) + hyper.epsilon))
    return store


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_entries: int
    n_retried: int = 0      # entries that needed a smaller step


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, ParameterStore):
        return dict(params.params)
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): t for i, t in enumerate(params)}


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradient_check_report(
    scalar_fn: Callable[[], Tensor],
    params: ParameterStore | Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-4,
    retry_eps: Sequence[float] = (),
    retry_above: float = 1e-3,
) -> GradCheckReport:
    """Compare autograd against central differences for every entry of every tensor.

    ``scalar_fn`` is called with no arguments and must read the tensors in
    ``params`` (they are perturbed in place and restored).

    An entry whose error at ``eps`` exceeds ``retry_above`` is re-measured
    with each step in ``retry_eps`` and keeps the smallest error. A max-pool
    or ReLU switching inside ``[x - eps, x + eps]`` spoils one step size but
    not all of them, while a wrong analytic gradient disagrees at every step.
    """
    named = _as_named(params)
    tensors = list(named.values())
    value = scalar_fn()
    if not torch.isfinite(value).all():
        raise NonFiniteValue(f"scalar function returned {value}")
    analytic = torch.autograd.grad(value, tensors, allow_unused=True)

    per_tensor: dict[str, float] = {}
    n_entries = n_retried = 0
    with torch.no_grad():
        for (name, tensor), grad in zip(named.items(), analytic):
            if grad is None:
                grad = torch.zeros_like(tensor)
            flat = tensor.view(-1)
            gflat = grad.reshape(-1)
            worst = 0.0
            for idx in range(flat.numel()):
                orig = flat[idx].item()

                def central(step: float) -> float:
                    flat[idx] = orig + step
                    plus = scalar_fn().item()
                    flat[idx] = orig - step
                    minus = scalar_fn().item()
                    flat[idx] = orig
                    if not (math.isfinite(plus) and math.isfinite(minus)):
                        raise NonFiniteValue(f"non-finite value while perturbing {name}[{idx}]")
                    return (plus - minus) / (2.0 * step)

                err = relative_error(gflat[idx].item(), central(eps))
                if err > retry_above and retry_eps:
                    n_retried += 1
                    for step in retry_eps:
                        err = min(err, relative_error(gflat[idx].item(), central(step)))
                        if err <= retry_above:
                            break
                worst = max(worst, err)
            per_tensor[name] = worst
            n_entries += flat.numel()
    return GradCheckReport(max(per_tensor.values(), default=0.0), per_tensor, n_entries, n_retried)


def gradient_check(
    scalar_fn: Callable[[], Tensor],
    params: ParameterStore | Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return gradient_check_report(scalar_fn, params, eps).max_rel_error


def jitter_parameters(module: nn.Module, scale: float = 0.1, seed: int = 0) -> None:
    """Move every parameter off its structured initial value.

    Layer-norm gains of exactly one and zero biases make all normalized rows
    share the same norm, which puts max-pooled similarities on exact ties;
    finite differences are meaningless at such kinks.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.add_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * scale)

"""
State-space core for the report engine.

Continuous (A, B, C) systems are discretized with the zero-order hold, the
selective variant derives (delta, B, C) from each input token, and the
resulting affine recurrence h_t = a_t * h_{t-1} + b_t is evaluated either
strictly left-to-right or with a work-efficient up-sweep/down-sweep scan.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import DiagnosticError, InvalidParameterError, PreconditionError

logger = logging.getLogger(__name__)

# Below this magnitude of delta*A the ZOH input factor uses its Taylor series.
SERIES_THRESHOLD = 1e-4

SCAN_MODES = ("sequential", "parallel")

# Gradient norms below this are treated as zero by gradient_check.
GRADIENT_FLOOR = 1e-8


def _require_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise InvalidParameterError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class ContinuousSSM:
    """A continuous system h' = A h + B x, y = C h.

    A is an n-vector when ``diagonal`` is set, otherwise an n x n matrix.
    """

    A: torch.Tensor
    B: torch.Tensor
    C: torch.Tensor
    diagonal: bool = False

    def __post_init__(self):
        for name in ("A", "B", "C"):
            _require_finite(name, getattr(self, name))
        A = self.A
        if self.diagonal and A.ndim == 2:
            off_diagonal = A - torch.diag_embed(torch.diagonal(A))
            if torch.any(off_diagonal != 0):
                raise InvalidParameterError("diagonal A has non-zero off-diagonal entries")
            object.__setattr__(self, "A", torch.diagonal(A).clone())
        elif self.diagonal and A.ndim != 1:
            raise InvalidParameterError(f"diagonal A must be a vector, got shape {tuple(A.shape)}")
        elif not self.diagonal and (A.ndim != 2 or A.shape[0] != A.shape[1]):
            raise InvalidParameterError(f"A must be square, got shape {tuple(A.shape)}")

        n = self.A.shape[0]
        if self.B.ndim != 2 or self.B.shape[0] != n:
            raise InvalidParameterError(f"B must be {n} x p, got {tuple(self.B.shape)}")
        if self.C.ndim != 2 or self.C.shape[1] != n:
            raise InvalidParameterError(f"C must be q x {n}, got {tuple(self.C.shape)}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class DiscreteStep:
    """One timestep of the discretized system (A_bar, B_bar) for step size delta."""

    A_bar: torch.Tensor  # (n,) when diagonal, (n, n) otherwise
    B_bar: torch.Tensor  # (n, p)
    delta: float

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1


@dataclass
class ScanState:
    h: torch.Tensor
    t: int = 0


@dataclass(frozen=True)
class SelectionWeights:
    """Affine maps from an input token x_t (width p) to (delta_t, B_t, C_t)."""

    w_delta: torch.Tensor  # (d, p)
    b_delta: torch.Tensor  # (d,)
    w_b: torch.Tensor  # (n, p)
    b_b: torch.Tensor  # (n,)
    w_c: torch.Tensor  # (n, p)
    b_c: torch.Tensor  # (n,)


def zoh_input_factor(dA: torch.Tensor) -> torch.Tensor:
    """Elementwise (exp(z) - 1) / z, switching to its series near z = 0."""
    small = dA.abs() < SERIES_THRESHOLD
    safe = torch.where(small, torch.ones_like(dA), dA)
    exact = torch.expm1(safe) / safe
    series = 1 + dA / 2 + dA * dA / 6 + dA * dA * dA / 24
    return torch.where(small, series, exact)


def discretize_zoh(ssm: ContinuousSSM, delta: Union[float, torch.Tensor]) -> DiscreteStep:
    """Zero-order-hold discretization of a continuous system for step ``delta``."""
    delta_value = float(delta)
    if not math.isfinite(delta_value) or delta_value <= 0:
        raise InvalidParameterError(f"delta must be a positive finite number, got {delta_value}")

    dA = delta_value * ssm.A
    if ssm.diagonal:
        A_bar = torch.exp(dA)
        B_bar = (delta_value * zoh_input_factor(dA)).unsqueeze(-1) * ssm.B
        return DiscreteStep(A_bar=A_bar, B_bar=B_bar, delta=delta_value)

    eye = torch.eye(ssm.n, dtype=dA.dtype, device=dA.device)
    A_bar = torch.linalg.matrix_exp(dA)
    if torch.linalg.matrix_norm(dA, ord=2) < SERIES_THRESHOLD:
        dA2 = dA @ dA
        factor = eye + dA / 2 + dA2 / 6 + dA2 @ dA / 24
    else:
        factor = torch.linalg.solve(dA, A_bar - eye)
    B_bar = factor @ (delta_value * ssm.B)
    return DiscreteStep(A_bar=A_bar, B_bar=B_bar, delta=delta_value)


def _stack_steps(steps: Sequence[DiscreteStep]) -> Tuple[torch.Tensor, torch.Tensor]:
    if len(steps) == 0:
        raise InvalidParameterError("at least one step is required")
    first = steps[0]
    for t, step in enumerate(steps):
        if step.A_bar.shape != first.A_bar.shape or step.B_bar.shape != first.B_bar.shape:
            raise InvalidParameterError(f"step {t} has dimensions inconsistent with step 0")
    a = torch.stack([s.A_bar for s in steps])
    b_bar = torch.stack([s.B_bar for s in steps])
    return a, b_bar


def _prepare_scan(steps, c, x, h0):
    a, b_bar = _stack_steps(steps)
    length, n, p = b_bar.shape
    if x.ndim == 1 and p == 1:
        x = x.unsqueeze(-1)
    if x.ndim != 2 or x.shape[0] != length or x.shape[1] != p:
        raise InvalidParameterError(f"x must be {length} x {p}, got {tuple(x.shape)}")
    if c.ndim == 1:
        c = c.unsqueeze(0)
    if c.shape[-1] != n or c.ndim not in (2, 3) or (c.ndim == 3 and c.shape[0] != length):
        raise InvalidParameterError(f"c must be q x {n} or {length} x q x {n}, got {tuple(c.shape)}")
    if h0 is None:
        h0 = torch.zeros(n, dtype=b_bar.dtype, device=b_bar.device)
    elif h0.shape != (n,):
        raise InvalidParameterError(f"h0 must have shape ({n},), got {tuple(h0.shape)}")
    u = torch.einsum("lnp,lp->ln", b_bar, x)
    return a, u, c, h0


def _read_out(c: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    if c.ndim == 2:
        return h @ c.transpose(0, 1)
    return torch.einsum("lqn,ln->lq", c, h)


def affine_scan_sequential(
    a: torch.Tensor, b: torch.Tensor, h0: Optional[torch.Tensor] = None, dim: int = 0
) -> torch.Tensor:
    """Elementwise h_t = a_t * h_{t-1} + b_t along ``dim``, left to right."""
    a = a.movedim(dim, 0)
    b = b.movedim(dim, 0)
    h = torch.zeros_like(b[0]) if h0 is None else h0
    states = []
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        states.append(h)
    return torch.stack(states).movedim(0, dim)


def advance(state: ScanState, A_bar: torch.Tensor, u: torch.Tensor) -> ScanState:
    """One recurrence step; ``u`` is the already-applied input term B_bar x_t."""
    h = A_bar * state.h + u if A_bar.ndim == 1 else A_bar @ state.h + u
    return ScanState(h=h, t=state.t + 1)


def _compose(earlier, later):
    # Applying `earlier` then `later`: h -> a2 (a1 h + b1) + b2.
    a1, b1 = earlier
    a2, b2 = later
    return a2 * a1, a2 * b1 + b2


def affine_scan_parallel(
    a: torch.Tensor, b: torch.Tensor, h0: Optional[torch.Tensor] = None, dim: int = 0
) -> torch.Tensor:
    """Same recurrence as :func:`affine_scan_sequential` via an up-sweep/down-sweep scan.

    The up-sweep reduces neighbouring pairs level by level; the down-sweep
    pushes exclusive prefixes back down the tree. Total work is linear in the
    sequence length and the evaluation order is fixed for a given length.
    """
    a = a.movedim(dim, 0)
    b = b.movedim(dim, 0)
    length = a.shape[0]
    size = 1 << max(0, (length - 1).bit_length())
    if size != length:
        pad_shape = (size - length,) + tuple(a.shape[1:])
        a = torch.cat([a, torch.ones(pad_shape, dtype=a.dtype, device=a.device)])
        b = torch.cat([b, torch.zeros(pad_shape, dtype=b.dtype, device=b.device)])

    levels = [(a, b)]
    while levels[-1][0].shape[0] > 1:
        la, lb = levels[-1]
        levels.append(_compose((la[0::2], lb[0::2]), (la[1::2], lb[1::2])))

    ea = torch.ones_like(levels[-1][0])
    eb = torch.zeros_like(levels[-1][1])
    for la, lb in reversed(levels[:-1]):
        ra, rb = _compose((ea, eb), (la[0::2], lb[0::2]))
        ea = torch.stack((ea, ra), dim=1).flatten(0, 1)
        eb = torch.stack((eb, rb), dim=1).flatten(0, 1)

    ia, ib = _compose((ea, eb), (a, b))
    h = ib if h0 is None else ia * h0 + ib
    return h[:length].movedim(0, dim)


_SCAN_IMPLS = {"sequential": affine_scan_sequential, "parallel": affine_scan_parallel}


def scan_sequential(
    steps: Sequence[DiscreteStep],
    c: torch.Tensor,
    x: torch.Tensor,
    h0: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Reference evaluation of h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = C h_t.

    Dense A_bar is supported here only; ``c`` may be q x n or per-step L x q x n.
    """
    a, u, c, h0 = _prepare_scan(steps, c, x, h0)
    state = ScanState(h=h0)
    states = []
    for t in range(a.shape[0]):
        state = advance(state, a[t], u[t])
        states.append(state.h)
    return _read_out(c, torch.stack(states))


def scan_parallel(
    steps: Sequence[DiscreteStep],
    c: torch.Tensor,
    x: torch.Tensor,
    h0: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Prefix-scan evaluation of the same recurrence; requires diagonal A_bar."""
    a, u, c, h0 = _prepare_scan(steps, c, x, h0)
    if a.ndim != 2:
        raise InvalidParameterError("the parallel scan requires diagonal A_bar")
    return _read_out(c, affine_scan_parallel(a, u, h0))


def geometric_state_bound(a: torch.Tensor, b: torch.Tensor, h0: Optional[torch.Tensor] = None) -> float:
    """Upper bound on max_t |h_t| for |a_t| <= rho < 1 and |b_t| <= beta."""
    rho = float(a.abs().max())
    if rho >= 1.0:
        return math.inf
    beta = float(b.abs().max())
    start = 0.0 if h0 is None else float(h0.abs().max())
    return start + beta / (1.0 - rho)


def selective_parameters(
    x_t: torch.Tensor, weights: SelectionWeights
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Input-dependent (delta_t, B_t, C_t) for tokens of shape (..., p)."""
    delta = F.softplus(F.linear(x_t, weights.w_delta, weights.b_delta))
    B = F.linear(x_t, weights.w_b, weights.b_b)
    C = F.linear(x_t, weights.w_c, weights.b_c)
    return delta, B, C


def selective_scan(
    u: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: Optional[torch.Tensor] = None,
    h0: Optional[torch.Tensor] = None,
    mode: str = "parallel",
) -> torch.Tensor:
    """Time-varying diagonal SSM over a batch.

    Args:
        u: inputs (batch, L, d)
        delta: step sizes (batch, L, d)
        A: diagonal state matrix per channel (d, n), real and negative
        B, C: per-token input/output vectors (batch, L, n)
        D: optional skip (d,)
        h0: optional initial state (batch, d, n)
        mode: "sequential" or "parallel"

    Returns:
        outputs (batch, L, d)
    """
    if mode not in _SCAN_IMPLS:
        raise InvalidParameterError(f"unknown scan mode '{mode}', expected one of {SCAN_MODES}")
    dA = delta.unsqueeze(-1) * A
    a = torch.exp(dA)
    b = zoh_input_factor(dA) * (delta * u).unsqueeze(-1) * B.unsqueeze(2)
    h = _SCAN_IMPLS[mode](a, b, h0, dim=1)
    y = (h * C.unsqueeze(2)).sum(-1)
    if D is not None:
        y = y + u * D
    return y


class SelectiveSSM(nn.Module):
    """Selective scan with learned selection maps, diagonal A = -exp(A_log) and skip D."""

    def __init__(
        self,
        d_inner: int,
        d_state: int,
        scan_mode: str = "parallel",
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        super().__init__()
        if scan_mode not in SCAN_MODES:
            raise InvalidParameterError(f"unknown scan mode '{scan_mode}'")
        self.d_inner = d_inner
        self.d_state = d_state
        self.scan_mode = scan_mode

        self.delta_proj = nn.Linear(d_inner, d_inner)
        self.b_proj = nn.Linear(d_inner, d_state)
        self.c_proj = nn.Linear(d_inner, d_state)

        # Initial step sizes log-uniform in [dt_min, dt_max]; bias is softplus^-1(dt).
        dt = torch.exp(torch.rand(d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.delta_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(d_inner))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def selection_weights(self) -> SelectionWeights:
        return SelectionWeights(
            w_delta=self.delta_proj.weight,
            b_delta=self.delta_proj.bias,
            w_b=self.b_proj.weight,
            b_b=self.b_proj.bias,
            w_c=self.c_proj.weight,
            b_c=self.c_proj.bias,
        )

    def forward(self, u: torch.Tensor, h0: Optional[torch.Tensor] = None) -> torch.Tensor:
        delta, B, C = selective_parameters(u, self.selection_weights())
        return selective_scan(u, delta, self.A, B, C, self.D, h0=h0, mode=self.scan_mode)


def named_parameter_point(module: nn.Module) -> Dict[str, torch.Tensor]:
    """Detached copies of a module's parameters, keyed by their dotted path."""
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def gradient_check(
    loss_fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    point: Dict[str, torch.Tensor],
    epsilon: float = 1e-5,
    max_checks_per_param: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare autograd gradients with central finite differences.

    ``loss_fn`` maps a dict of parameter tensors to a scalar loss. Each
    parameter group is scored by ||g_analytic - g_numeric|| / max(||g_analytic||,
    ||g_numeric||) over the checked entries; the worst group is returned.
    Use float64 points for meaningful results.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise PreconditionError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")

    params = {name: value.detach().clone().requires_grad_(True) for name, value in point.items()}
    loss = loss_fn(params)
    if loss.numel() != 1 or not torch.isfinite(loss).all():
        raise DiagnosticError(f"loss must be a finite scalar, got {loss}")
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for (name, value), grad in zip(params.items(), grads):
            if grad is None:
                grad = torch.zeros_like(value)
            flat = value.view(-1)
            indices = np.arange(flat.numel())
            if max_checks_per_param is not None and flat.numel() > max_checks_per_param:
                indices = np.sort(rng.choice(flat.numel(), size=max_checks_per_param, replace=False))

            numeric = torch.empty(len(indices), dtype=torch.float64)
            for k, i in enumerate(indices):
                original = flat[i].item()
                flat[i] = original + epsilon
                plus = loss_fn(params)
                flat[i] = original - epsilon
                minus = loss_fn(params)
                flat[i] = original
                if not (torch.isfinite(plus) and torch.isfinite(minus)):
                    raise DiagnosticError(f"non-finite loss while perturbing {name}[{i}]")
                numeric[k] = (plus.item() - minus.item()) / (2 * epsilon)

            analytic = grad.reshape(-1)[torch.as_tensor(indices)].to(torch.float64)
            scale = max(analytic.norm().item(), numeric.norm().item(), GRADIENT_FLOOR)
            error = (analytic - numeric).norm().item() / scale
            logger.debug(f"gradient check {name}: {len(indices)} entries, relative error {error:.3e}")
            worst = max(worst, error)
    return worst

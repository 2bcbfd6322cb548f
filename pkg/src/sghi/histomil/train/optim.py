"""Adam-family optimizers and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from logging import Logger, getLogger
from typing import TYPE_CHECKING, Any

import torch
from torch.optim import Optimizer
from typing_extensions import override

from ..model import NumericError
from ..utils import ensure_greater_or_equal, ensure_in_range, type_fqn

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence

# =============================================================================
# FUNCTIONAL UPDATE
# =============================================================================


@dataclass(slots=True)
class AdamState:
    """First/second moment estimates and the step count of a parameter list."""

    exp_avg: list[torch.Tensor]
    exp_avg_sq: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> AdamState:
        return cls(
            exp_avg=[torch.zeros_like(_p) for _p in params],
            exp_avg_sq=[torch.zeros_like(_p) for _p in params],
        )


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decoupled: bool = True,
) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place.

    With ``decoupled`` the decay ``theta <- theta * (1 - lr * wd)`` is applied
    apart from the adaptive step (AdamW); otherwise ``wd * theta`` is added
    to the gradient (classic Adam with L2).

    :raises NumericError: If any gradient is not finite. Nothing is updated
        in that case.
    """
    if any(not bool(torch.isfinite(_g).all()) for _g in grads):
        _err_msg = "Non-finite gradient; optimizer step skipped."
        raise NumericError(message=_err_msg)
    beta1, beta2 = betas
    state.step += 1
    bias_correction1 = 1.0 - beta1**state.step
    bias_correction2 = 1.0 - beta2**state.step
    for _param, _grad, _m, _v in zip(
        params,
        grads,
        state.exp_avg,
        state.exp_avg_sq,
        strict=True,
    ):
        if decoupled:
            _param.mul_(1.0 - lr * weight_decay)
        elif weight_decay:
            _grad = _grad.add(_param, alpha=weight_decay)  # noqa: PLW2901
        _m.mul_(beta1).add_(_grad, alpha=1.0 - beta1)
        _v.mul_(beta2).addcmul_(_grad, _grad, value=1.0 - beta2)
        denom = (_v / bias_correction2).sqrt_().add_(eps)
        _param.addcdiv_(_m, denom, value=-lr / bias_correction1)
    return state


# =============================================================================
# OPTIMIZER
# =============================================================================


class AdamW(Optimizer):
    """A ``torch.optim.Optimizer`` around :func:`adamw_step`.

    Steps with non-finite gradients are skipped and counted in
    :attr:`skipped_steps` instead of raising.
    """

    def __init__(
        self,
        params: Iterable[torch.Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
        decoupled: bool = True,
    ) -> None:
        ensure_greater_or_equal(lr, 0.0, "'lr' MUST be >= 0.")
        ensure_greater_or_equal(
            weight_decay,
            0.0,
            "'weight_decay' MUST be >= 0.",
        )
        defaults = {
            "lr": lr,
            "betas": betas,
            "eps": eps,
            "weight_decay": weight_decay,
            "decoupled": decoupled,
        }
        super().__init__(params, defaults)
        self.skipped_steps: int = 0
        self._logger: Logger = getLogger(type_fqn(self.__class__))

    @override
    def step(
        self,
        closure: Callable[[], Any] | None = None,
    ) -> Any:  # noqa: ANN401
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            params = [_p for _p in group["params"] if _p.grad is not None]
            if not params:
                continue
            for _p in params:
                if not self.state[_p]:
                    self.state[_p].update(
                        exp_avg=torch.zeros_like(_p),
                        exp_avg_sq=torch.zeros_like(_p),
                        step=0,
                    )
            state = AdamState(
                exp_avg=[self.state[_p]["exp_avg"] for _p in params],
                exp_avg_sq=[self.state[_p]["exp_avg_sq"] for _p in params],
                step=int(self.state[params[0]]["step"]),
            )
            try:
                adamw_step(
                    params,
                    [_p.grad for _p in params],
                    state,
                    lr=group["lr"],
                    weight_decay=group["weight_decay"],
                    betas=group["betas"],
                    eps=group["eps"],
                    decoupled=group["decoupled"],
                )
            except NumericError:
                self.skipped_steps += 1
                self._logger.warning(
                    "Skipped an optimizer step with non-finite gradients "
                    "(%d skipped so far).",
                    self.skipped_steps,
                )
                return loss
            for _p in params:
                self.state[_p]["step"] = state.step
        return loss


def make_optimizer(
    name: str,
    params: Iterable[torch.Tensor],
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamW:
    """``"adamw"`` decouples weight decay; ``"adam"`` folds it into the
    gradient.
    """
    return AdamW(
        params,
        lr=lr,
        betas=betas,
        eps=eps,
        weight_decay=weight_decay,
        decoupled=name == "adamw",
    )


# =============================================================================
# SCHEDULES
# =============================================================================


def _cosine(start: float, end: float, fraction: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * fraction))


def one_cycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    warmup_frac: float = 0.25,
    div_factor: float = 25.0,
    final_div_factor: float = 1e4,
) -> float:
    """Fit-one-cycle learning rate at ``step``.

    A cosine ramp from ``max_lr / div_factor`` up to ``max_lr`` over the first
    ``warmup_frac`` of the cycle, then a cosine decay to
    ``max_lr / final_div_factor``.
    """
    ensure_greater_or_equal(total_steps, 1, "'total_steps' MUST be >= 1.")
    ensure_in_range(
        step,
        0,
        total_steps,
        "'step' MUST be in [0, total_steps].",
    )
    ensure_in_range(warmup_frac, 0.0, 1.0, "'warmup_frac' MUST be in [0, 1].")
    warmup_steps = warmup_frac * total_steps
    if step <= warmup_steps:
        if warmup_steps == 0:
            return max_lr
        return _cosine(max_lr / div_factor, max_lr, step / warmup_steps)
    fraction = (step - warmup_steps) / (total_steps - warmup_steps)
    return _cosine(max_lr, max_lr / final_div_factor, fraction)


__all__ = [
    "AdamState",
    "AdamW",
    "adamw_step",
    "make_optimizer",
    "one_cycle_lr",
]

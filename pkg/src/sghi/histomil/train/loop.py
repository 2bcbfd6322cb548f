"""Training configuration and the batch-size-one training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING, Any, Final, Literal

import numpy as np
import torch

from ..metrics import ScoredSet, UndefinedMetricError, auroc
from ..model import (
    Checkpoint,
    MILAggregator,
    ModelConfig,
    NumericError,
    bag_tensor,
    bce_loss,
    build_model,
    label_tensor,
)
from ..utils import (
    ensure_greater_or_equal,
    ensure_greater_than,
    ensure_not_none_nor_empty,
    ensure_one_of,
    seeded_rng,
)
from .optim import make_optimizer, one_cycle_lr

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import NDArray

    from ..features import EmbeddingBag

# =============================================================================
# CONSTANTS
# =============================================================================

DTYPES: Final[dict[str, torch.dtype]] = {
    "float32": torch.float32,
    "float64": torch.float64,
}

_SHUFFLE_STREAM: Final[int] = 21

_logger = logging.getLogger(__name__)


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Optimization settings. ``max_lr`` only applies to the ``one_cycle``
    schedule and defaults to ``lr``.
    """

    optimizer: Literal["adamw", "adam"] = "adamw"
    lr: float = 2e-5
    weight_decay: float = 2e-5
    epochs: int = 8
    eval_interval: int = 500
    schedule: Literal["constant", "one_cycle"] = "constant"
    max_lr: float | None = None
    warmup_frac: float = 0.25
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    dtype: Literal["float32", "float64"] = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        ensure_one_of(self.optimizer, ("adamw", "adam"))
        ensure_one_of(self.schedule, ("constant", "one_cycle"))
        ensure_one_of(self.dtype, tuple(DTYPES))
        ensure_greater_than(self.lr, 0.0, "'lr' MUST be > 0.")
        ensure_greater_or_equal(
            self.weight_decay,
            0.0,
            "'weight_decay' MUST be >= 0.",
        )
        ensure_greater_or_equal(self.epochs, 1, "'epochs' MUST be >= 1.")
        ensure_greater_or_equal(
            self.eval_interval,
            1,
            "'eval_interval' MUST be >= 1.",
        )
        if self.grad_clip is not None:
            ensure_greater_than(
                self.grad_clip,
                0.0,
                "'grad_clip' MUST be > 0.",
            )
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return one_cycle_lr(
            step,
            total_steps,
            self.max_lr if self.max_lr is not None else self.lr,
            self.warmup_frac,
        )

    def as_dict(self) -> dict[str, Any]:
        raw = asdict(self)
        raw["betas"] = list(self.betas)
        return raw

    def replace(self, **changes: Any) -> TrainConfig:  # noqa: ANN401
        values = {_f.name: getattr(self, _f.name) for _f in fields(self)}
        return TrainConfig(**{**values, **changes})

    @classmethod
    def from_mapping(
        cls,
        values: Mapping[str, Any] | None,
        base: TrainConfig | None = None,
    ) -> TrainConfig:
        """Overlay a (possibly partial) mapping on ``base`` (defaults when
        ``None``). A nested ``model`` mapping overlays the base model config.

        :raises ValueError: On unknown keys.
        """
        _base = base or cls()
        raw = dict(values or {})
        known = {_f.name for _f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            _err_msg = (
                f"Unknown train setting(s): {', '.join(sorted(unknown))}."
            )
            raise ValueError(_err_msg)
        if "model" in raw and not isinstance(raw["model"], ModelConfig):
            raw["model"] = ModelConfig.from_mapping(
                {**_base.model.as_dict(), **dict(raw["model"])},
            )
        if "betas" in raw:
            raw["betas"] = tuple(raw["betas"])
        return _base.replace(**raw)


PRESETS: Final[dict[str, TrainConfig]] = {
    "transformer": TrainConfig(),
    "attention_mil": TrainConfig(
        optimizer="adam",
        lr=1e-4,
        weight_decay=1e-2,
        epochs=32,
        schedule="one_cycle",
        max_lr=1e-4,
        warmup_frac=0.25,
        model=ModelConfig(architecture="attention_mil"),
    ),
    "mean_pool": TrainConfig(
        optimizer="adam",
        lr=1e-4,
        weight_decay=1e-2,
        epochs=32,
        schedule="one_cycle",
        max_lr=1e-4,
        warmup_frac=0.25,
        model=ModelConfig(architecture="mean_pool"),
    ),
}


def preset(name: str) -> TrainConfig:
    """Return the named training preset (``transformer``, ``attention_mil``
    or ``mean_pool``).
    """
    return PRESETS[ensure_one_of(name, tuple(PRESETS))]


@dataclass(frozen=True, slots=True, eq=False)
class LabelledBag:
    """A patient bag with one ``0``/``1``/``None`` label per trained target."""

    bag: EmbeddingBag
    labels: tuple[int | None, ...]


@dataclass(slots=True)
class TrainingLog:
    """Per-step losses and per-evaluation validation AUROCs of a run."""

    losses: list[float] = field(default_factory=list)
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    skipped_steps: int = 0
    aborted: bool = False


# =============================================================================
# EVALUATION
# =============================================================================


@torch.no_grad()
def predict_logits(
    model: MILAggregator,
    bags: Sequence[EmbeddingBag],
) -> NDArray[np.float64]:
    """Return the ``len(bags) x t`` logits of ``model`` in eval mode."""
    was_training = model.training
    model.eval()
    try:
        return np.stack(
            [
                model(bag_tensor(_bag, model.dtype)).logits.double().numpy()
                for _bag in bags
            ],
        )
    finally:
        model.train(was_training)


def mean_auroc(
    logits: NDArray[np.float64],
    labels: Sequence[Sequence[int | None]],
) -> float:
    """Mean AUROC over the targets whose labelled rows hold both classes.

    :raises UndefinedMetricError: If no target can be scored.
    """
    values: list[float] = []
    for _target in range(logits.shape[1]):
        rows = [_i for _i, _l in enumerate(labels) if _l[_target] is not None]
        try:
            values.append(
                auroc(
                    ScoredSet.of(
                        logits[rows, _target],
                        [labels[_i][_target] for _i in rows],
                    ),
                ),
            )
        except UndefinedMetricError:
            continue
    if not values:
        _err_msg = "No target has both classes among the labelled bags."
        raise UndefinedMetricError(message=_err_msg)
    return float(np.mean(values))


# =============================================================================
# TRAINING LOOP
# =============================================================================


def train_loop(
    train: Sequence[LabelledBag],
    val: Sequence[LabelledBag],
    cfg: TrainConfig,
    targets: Sequence[str] = (),
    log: TrainingLog | None = None,
) -> Checkpoint:
    """Train a fresh model one bag per step and return the checkpoint with
    the highest validation AUROC.

    Bags are reshuffled every epoch from a generator seeded by ``cfg.seed``.
    Validation runs every ``cfg.eval_interval`` steps and once after the last
    step; ties keep the earlier checkpoint. A non-finite forward pass aborts
    training and the best checkpoint so far (or the initial parameters) is
    returned.

    :raises UndefinedMetricError: If no target has both classes in ``val``.
    """
    ensure_not_none_nor_empty(train, "'train' MUST not be empty.")
    ensure_not_none_nor_empty(val, "'val' MUST not be empty.")
    _log = log if log is not None else TrainingLog()
    val_labels = [_b.labels for _b in val]
    # all-tied logits still score 0.5, so this only fails for unscorable labels
    mean_auroc(np.zeros((len(val), cfg.model.num_targets)), val_labels)

    dtype = cfg.torch_dtype
    total_steps = cfg.epochs * len(train)
    shuffle_rng = seeded_rng(cfg.seed, _SHUFFLE_STREAM)
    snapshot_meta = {
        "seed": cfg.seed,
        "targets": tuple(targets),
        "train_config": cfg.as_dict(),
    }

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = build_model(cfg.model, seed=cfg.seed, dtype=dtype)
        initial_state = copy.deepcopy(model.state_dict())
        optimizer = make_optimizer(
            cfg.optimizer,
            model.parameters(),
            lr=cfg.lr_at(0, total_steps),
            weight_decay=cfg.weight_decay,
            betas=cfg.betas,
            eps=cfg.eps,
        )
        inputs = [bag_tensor(_b.bag, dtype) for _b in train]
        labels = [label_tensor(_b.labels, dtype) for _b in train]
        val_bags = [_b.bag for _b in val]

        best: Checkpoint | None = None

        def evaluate(iteration: int) -> None:
            nonlocal best
            score = mean_auroc(predict_logits(model, val_bags), val_labels)
            _log.evaluations.append((iteration, score))
            recent = _log.losses[-cfg.eval_interval :]
            _logger.info(
                "Iteration %d: mean train loss=%.4f, validation AUROC=%.4f.",
                iteration,
                float(np.mean(recent)) if recent else float("nan"),
                score,
            )
            if best is None or score > best.val_auroc:
                best = Checkpoint.of_model(
                    model,
                    iteration,
                    score,
                    **snapshot_meta,
                )

        model.train()
        step = 0
        try:
            for _epoch in range(cfg.epochs):
                for _index in shuffle_rng.permutation(len(train)).tolist():
                    for _group in optimizer.param_groups:
                        _group["lr"] = cfg.lr_at(step, total_steps)
                    optimizer.zero_grad(set_to_none=True)
                    logits = model(inputs[_index]).logits
                    loss = bce_loss(logits, labels[_index])
                    if not bool(torch.isfinite(loss)):
                        raise NumericError(message="Non-finite training loss.")
                    loss.backward()
                    if cfg.grad_clip is not None:
                        torch.nn.utils.clip_grad_norm_(
                            model.parameters(),
                            cfg.grad_clip,
                        )
                    optimizer.step()
                    step += 1
                    _log.losses.append(float(loss.detach()))
                    if step % cfg.eval_interval == 0:
                        evaluate(step)
            if step % cfg.eval_interval != 0:
                evaluate(step)
        except NumericError:
            _log.aborted = True
            _logger.exception("Training aborted at iteration %d.", step)
            if best is None:
                model.load_state_dict(initial_state)
                evaluate(0)
        finally:
            _log.skipped_steps = optimizer.skipped_steps

    assert best is not None  # noqa: S101
    return best


__all__ = [
    "DTYPES",
    "LabelledBag",
    "PRESETS",
    "TrainConfig",
    "TrainingLog",
    "mean_auroc",
    "predict_logits",
    "preset",
    "train_loop",
]

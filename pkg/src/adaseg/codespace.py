"""Task codes and their resolution into concrete per-layer normalization vectors.

A task is identified entirely by which sides of the generator (encoder /
decoder) receive learned scale/shift vectors and which degenerate to plain
instance normalization.  This module owns the task table, the hyperparameter
record, and the expansion of 16-dim style codes into per-layer (f, g) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from types import MappingProxyType
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import torch

from .errors import ConfigError, DomainMismatchError, NumericError

if TYPE_CHECKING:
    from .networks import CodeGenerator, ModelBundle


class Domain(Enum):
    """The three data groups: labeled images, shifted unlabeled images, masks."""

    INTRA = "intra"
    INTER = "inter"
    MASK = "mask"

    @property
    def index(self) -> int:
        return _DOMAIN_ORDER.index(self)


_DOMAIN_ORDER = (Domain.INTRA, Domain.INTER, Domain.MASK)
NUM_DOMAINS = 3

STYLE_DIM = 16
LATENT_DIM = 4


class CodeMode(Enum):
    FIXED01 = "fixed01"
    LEARNABLE = "learnable"


class TaskName(Enum):
    SEG = "seg"
    SEG_DUMMY = "seg_dummy"
    DA_X = "da_x"
    DA_Y = "da_y"
    SELF = "self"


@dataclass(frozen=True)
class TaskCode:
    """One row of the task table: which domains and which code modes."""

    name: TaskName
    source: Domain
    target: Domain
    encoder_mode: CodeMode
    decoder_mode: CodeMode


def build_code_table() -> list[TaskCode]:
    """The five task rows, in stable order."""
    return [
        TaskCode(TaskName.SEG, Domain.INTRA, Domain.MASK, CodeMode.FIXED01, CodeMode.FIXED01),
        TaskCode(TaskName.SEG_DUMMY, Domain.INTRA, Domain.MASK, CodeMode.FIXED01, CodeMode.LEARNABLE),
        TaskCode(TaskName.DA_X, Domain.INTER, Domain.INTRA, CodeMode.FIXED01, CodeMode.LEARNABLE),
        TaskCode(TaskName.DA_Y, Domain.INTRA, Domain.INTER, CodeMode.FIXED01, CodeMode.LEARNABLE),
        TaskCode(TaskName.SELF, Domain.INTER, Domain.MASK, CodeMode.LEARNABLE, CodeMode.FIXED01),
    ]


def get_task(name: TaskName | str) -> TaskCode:
    if isinstance(name, str):
        name = TaskName(name)
    for row in build_code_table():
        if row.name is name:
            return row
    raise ConfigError(f"unknown task {name!r}")


@dataclass(frozen=True)
class StyleCode:
    """A 16-dim code tied to the domain head that produced it."""

    values: torch.Tensor
    domain: Domain

    def __post_init__(self):
        if self.values.shape[-1] != STYLE_DIM:
            raise ConfigError(
                f"style code must have {STYLE_DIM} entries, got {self.values.shape[-1]}"
            )


@dataclass(frozen=True)
class AdaInCodePair:
    """Concrete per-layer (scale f, shift g) vectors for both generator sides.

    ``encoder_layers`` / ``decoder_layers`` hold one (f, g) tuple per
    normalization layer, in consumption order.  A fixed01 side is all
    (ones, zeros).  ``style`` records the 16-dim code a learnable side was
    expanded from, when there is one.
    """

    encoder_layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]
    decoder_layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]
    style: Optional[StyleCode] = None

    def detached(self) -> "AdaInCodePair":
        det = lambda side: tuple((f.detach().clone(), g.detach().clone()) for f, g in side)
        style = None
        if self.style is not None:
            style = StyleCode(self.style.values.detach().clone(), self.style.domain)
        return AdaInCodePair(det(self.encoder_layers), det(self.decoder_layers), style)


def fixed01_side(widths: Sequence[int], dtype=torch.float32) -> tuple:
    """(ones, zeros) per layer: the code that reduces AdaIN to instance norm."""
    return tuple(
        (torch.ones(w, dtype=dtype), torch.zeros(w, dtype=dtype)) for w in widths
    )


@dataclass
class HyperParams:
    """Loss weights, optimization constants and ablation switches.

    Defaults are the reference operating point; all weights must be >= 0.
    """

    lambda_cycle: float = 2.0
    lambda_style: float = 1.0
    lambda_div: float = 1.0
    lambda_seg: float = 5.0
    lambda_inter: float = 10.0
    lambda_intra: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 1
    iters_joint: int = 20000
    iters_self: int = 5000
    eps_adain: float = 1e-5
    seed: int = 0
    # ablation switches, one per loss term
    use_seg: bool = True
    use_style_seg: bool = True
    use_adv: bool = True
    use_cycle: bool = True
    use_style_da: bool = True
    use_div: bool = True
    use_self_inter: bool = True
    use_self_intra: bool = True
    # adversarial form: non-saturating + R1 by default, exact minimax when set
    paper_literal_adv: bool = False
    r1_gamma: float = 1.0
    # linearly decay the diversity weight to zero across the joint phase
    div_decay: bool = True
    # schedule knobs
    lr_milestones: tuple[float, float] = (0.6, 0.9)
    eval_interval: int = 100
    checkpoint_interval: int = 500
    early_stop_patience: int = 0  # 0 disables hard stopping; best ckpt is kept anyway
    teacher_refresh: int = 0  # 0 = frozen for the whole self phase
    mix_supervised: bool = False  # keep drawing seg/da tasks during the self phase
    prebuild_samples: int = 1000
    grad_clip: float = 0.0  # global-norm clip, 0 disables

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_style", "lambda_div", "lambda_seg",
                     "lambda_inter", "lambda_intra"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.eps_adain <= 0:
            raise ConfigError("eps_adain must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def term_active(self, term: str) -> bool:
        flag = _TERM_FLAGS.get(term)
        return True if flag is None else getattr(self, flag)


_TERM_FLAGS = {
    "seg": "use_seg",
    "style_seg": "use_style_seg",
    "adv_g": "use_adv",
    "adv_d": "use_adv",
    "cycle": "use_cycle",
    "style_da": "use_style_da",
    "div": "use_div",
    "self_inter": "use_self_inter",
    "self_intra": "use_self_intra",
}


def hyperparams_from_mapping(values: Mapping[str, object]) -> HyperParams:
    known = {f.name for f in fields(HyperParams)}
    kwargs = {k: v for k, v in values.items() if k in known}
    return HyperParams(**kwargs)  # type: ignore[arg-type]


def resolve_code(
    task: TaskCode,
    fe: "CodeGenerator",
    fd: "CodeGenerator",
    latent: Optional[torch.Tensor] = None,
    reference_code: Optional[StyleCode] = None,
) -> AdaInCodePair:
    """Turn a task row into concrete per-layer (f, g) vectors.

    Fixed01 sides get (ones, zeros) at every layer.  A learnable side takes
    exactly one of ``latent`` (routed through the matching code generator's
    head for the task's target domain) or ``reference_code`` (a 16-dim code
    from the style encoder), then expands it through that code generator's
    per-layer affine projections.
    """
    learnable_sides = [m for m in (task.encoder_mode, task.decoder_mode)
                       if m is CodeMode.LEARNABLE]
    if learnable_sides:
        if (latent is None) == (reference_code is None):
            raise ValueError(
                f"task {task.name.value!r} has a learnable side: supply exactly one "
                "of latent or reference_code"
            )
    elif latent is not None or reference_code is not None:
        raise ValueError(f"task {task.name.value!r} is fixed01 on both sides; "
                         "latent/reference_code must not be supplied")

    if reference_code is not None and reference_code.domain is not task.target:
        raise DomainMismatchError(
            f"reference code domain {reference_code.domain.value} does not match "
            f"task target {task.target.value}"
        )

    style: Optional[StyleCode] = None

    def side(mode: CodeMode, gen: "CodeGenerator"):
        nonlocal style
        if mode is CodeMode.FIXED01:
            return fixed01_side(gen.layer_widths, dtype=gen.dtype)
        if reference_code is not None:
            code = reference_code.values
        else:
            code = gen(latent, task.target)
        style = StyleCode(code, task.target)
        return gen.expand(code)

    enc = side(task.encoder_mode, fe)
    dec = side(task.decoder_mode, fd)
    return AdaInCodePair(enc, dec, style)


class PrebuiltCodes(Mapping[str, AdaInCodePair]):
    """Frozen task-name -> code map used at inference; immutable once built."""

    def __init__(self, entries: Mapping[str, AdaInCodePair]):
        self._entries = MappingProxyType(dict(entries))

    def __getitem__(self, key: str) -> AdaInCodePair:
        if key not in self._entries:
            raise ConfigError(f"no prebuilt code for task {key!r}; "
                              f"available: {sorted(self._entries)}")
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)


PREBUILT_TASKS = (TaskName.SEG, TaskName.DA_X, TaskName.DA_Y, TaskName.SELF)


def prebuild_inference_codes(
    model: "ModelBundle", n_samples: int, seed: int
) -> PrebuiltCodes:
    """Freeze one code per inference task.

    Learnable sides are the mean of code-generator outputs over ``n_samples``
    standard-normal latents (averaged at the 16-dim level; the per-layer
    expansion is affine, so this equals the mean of the expanded codes).
    Fixed01 sides are exact ones/zeros.  Latents are drawn task by task, in
    table order, from a generator seeded with ``seed``.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    for name, module in model.named_modules():
        for p in module.parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"invalid checkpoint: non-finite parameters in {name}")

    rng = torch.Generator().manual_seed(seed)
    entries: dict[str, AdaInCodePair] = {}
    with torch.no_grad():
        for task_name in PREBUILT_TASKS:
            task = get_task(task_name)
            if CodeMode.LEARNABLE in (task.encoder_mode, task.decoder_mode):
                z = torch.randn(n_samples, LATENT_DIM, generator=rng,
                                dtype=model.code_dec.dtype)
                gen = model.code_enc if task.encoder_mode is CodeMode.LEARNABLE else model.code_dec
                mean_code = gen(z, task.target).mean(dim=0)
                pair = resolve_code(task, model.code_enc, model.code_dec,
                                    reference_code=StyleCode(mean_code, task.target))
            else:
                pair = resolve_code(task, model.code_enc, model.code_dec)
            entries[task_name.value] = pair.detached()
    return PrebuiltCodes(entries)

"""The optimization schedule: task sampling, alternating updates, the joint
and self-supervised phases, learning-rate milestones, validation-based best
checkpointing, and resume.

A single torch.Generator drives every random draw (task choice, sample
indices, latents, code routes), so runs are reproducible from one seed and
resumable from a checkpoint that stores the generator state.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .codespace import LATENT_DIM, Domain, HyperParams, PrebuiltCodes, \
    AdaInCodePair, hyperparams_from_mapping, prebuild_inference_codes
from .data import DataRegistry
from .errors import CheckpointError, ConfigError, DataError
from .losses import (
    ROUTE_LATENT,
    ROUTE_REFERENCE,
    LossBundle,
    TeacherContext,
    da_losses,
    make_teacher,
    seg_losses,
    self_losses,
)
from .networks import ModelBundle, NetConfig, build_models
from .pipeline import BinaryMask, dice, segment_direct, segment_via_adaptation

CHECKPOINT_FORMAT_VERSION = 1
JOINT_TASKS = ("seg", "da_x", "da_y")
ADAM_BETAS = (0.0, 0.99)

# which optimizers step for each task's generator-side update
_GEN_SIDE = {
    "seg": ("generator", "code_dec", "style_enc"),
    "da_x": ("generator", "code_enc", "code_dec", "style_enc"),
    "da_y": ("generator", "code_enc", "code_dec", "style_enc"),
    "self": ("generator", "code_enc"),
}


@dataclass
class TaskSample:
    """One drawn training example: task, batches, latents and the code route."""

    task: str
    source: torch.Tensor
    masks: Optional[torch.Tensor] = None
    intra: Optional[torch.Tensor] = None
    inter: Optional[torch.Tensor] = None
    target_refs: Optional[tuple] = None
    latents: Optional[tuple] = None
    route: str = ROUTE_LATENT
    variant: str = ""


@dataclass
class ModelState:
    """Mutable training state: parameter stores, optimizers, counters."""

    models: ModelBundle
    optimizers: dict[str, torch.optim.Adam]
    rng: torch.Generator
    hp: HyperParams
    iteration: int = 0
    lr: float = 0.0
    phase: str = "joint"
    best_score: float = float("-inf")
    best_iteration: int = -1

    def set_lr(self, lr: float):
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr
        self.lr = lr


def init_state(net_cfg: NetConfig, hp: HyperParams) -> ModelState:
    models = build_models(net_cfg, hp.seed)
    opts = {name: torch.optim.Adam(m.parameters(), lr=hp.learning_rate,
                                   betas=ADAM_BETAS)
            for name, m in models.named_modules()}
    rng = torch.Generator().manual_seed(hp.seed)
    state = ModelState(models, opts, rng, hp, lr=hp.learning_rate)
    return state


def _stack(items: Sequence[torch.Tensor], idx: Sequence[int]) -> torch.Tensor:
    return torch.stack([items[i] for i in idx])


def _draw_idx(rng: torch.Generator, n: int, k: int) -> list[int]:
    return torch.randint(0, n, (k,), generator=rng).tolist()


def sample_task(rng: torch.Generator, phase: str, registry: DataRegistry,
                hp: HyperParams,
                joint_tasks: Sequence[str] = JOINT_TASKS) -> TaskSample:
    """Draw the next training example.

    The joint phase picks uniformly among the configured supervised and
    adaptation tasks; the self phase picks uniformly between the inter- and
    intra-anchored consistency variants (both terms are still computed each
    step, paired per iteration).
    """
    if len(registry.intra_train) == 0 or len(registry.inter_train) == 0:
        raise ConfigError("training datasets must be nonempty")
    n = hp.batch_size

    if phase == "joint":
        tasks = tuple(joint_tasks)
    elif phase == "self":
        tasks = ("seg", "da_x", "da_y", "self") if hp.mix_supervised else ("self",)
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    task = tasks[int(torch.randint(0, len(tasks), (), generator=rng))]

    if task == "seg":
        idx = _draw_idx(rng, len(registry.intra_train), n)
        latents = (torch.randn(n, LATENT_DIM, generator=rng),)
        route = ROUTE_LATENT if torch.rand((), generator=rng) < 0.5 else ROUTE_REFERENCE
        return TaskSample("seg", _stack(registry.intra_train.images, idx),
                          masks=_stack(registry.intra_train.masks, idx),
                          latents=latents, route=route)

    if task in ("da_x", "da_y"):
        src_set = registry.inter_train if task == "da_x" else registry.intra_train
        ref_set = registry.intra_train if task == "da_x" else registry.inter_train
        idx = _draw_idx(rng, len(src_set), n)
        ref_idx = _draw_idx(rng, len(ref_set), 2 * n)
        latents = (torch.randn(n, LATENT_DIM, generator=rng), torch.randn(n, LATENT_DIM, generator=rng))
        route = ROUTE_LATENT if torch.rand((), generator=rng) < 0.5 else ROUTE_REFERENCE
        refs = (_stack(ref_set.images, ref_idx[:n]), _stack(ref_set.images, ref_idx[n:]))
        return TaskSample(task, _stack(src_set.images, idx), target_refs=refs,
                          latents=latents, route=route)

    # self: one paired (inter, intra) draw; the variant tags which equation
    # anchors this iteration
    variant = "self_inter" if int(torch.randint(0, 2, (), generator=rng)) == 0 \
        else "self_intra"
    inter_idx = _draw_idx(rng, len(registry.inter_train), n)
    intra_idx = _draw_idx(rng, len(registry.intra_train), n)
    latents = (torch.randn(n, LATENT_DIM, generator=rng),)
    inter = _stack(registry.inter_train.images, inter_idx)
    intra = _stack(registry.intra_train.images, intra_idx)
    source = inter if variant == "self_inter" else intra
    return TaskSample("self", source, intra=intra, inter=inter, latents=latents,
                      variant=variant)


def _zero_all(state: ModelState):
    for _, m in state.models.named_modules():
        m.zero_grad(set_to_none=True)


def _step(state: ModelState, names: Sequence[str]):
    if state.hp.grad_clip > 0:
        params = [p for name in names
                  for p in dict(state.models.named_modules())[name].parameters()]
        torch.nn.utils.clip_grad_norm_(params, state.hp.grad_clip)
    for name in names:
        state.optimizers[name].step()


def _div_scale(hp: HyperParams, iteration: int) -> float:
    if not hp.div_decay or hp.iters_joint <= 0:
        return 1.0
    return max(0.0, 1.0 - iteration / hp.iters_joint)


def train_step(state: ModelState, sample: TaskSample, hp: HyperParams,
               teacher: Optional[TeacherContext] = None
               ) -> tuple[ModelState, LossBundle]:
    """Run one optimization step for the sampled task.

    Adaptation tasks update the discriminator on its adversarial loss first,
    then the generator side on the full objective against the updated
    discriminator.  A non-finite loss aborts the update: parameters and
    optimizer state stay untouched (the iteration counter still advances so
    the schedule keeps moving).
    """
    model = state.models

    if sample.task == "seg":
        bundle = seg_losses(model, sample.source, sample.masks, hp, state.rng,
                            latent=sample.latents[0], route=sample.route)
        if bundle.finite() and bundle.total_g.requires_grad:
            _zero_all(state)
            bundle.total_g.backward()
            _step(state, _GEN_SIDE["seg"])
        state.iteration += 1
        return state, bundle

    if sample.task in ("da_x", "da_y"):
        source_dom = Domain.INTER if sample.task == "da_x" else Domain.INTRA
        target_dom = Domain.INTRA if sample.task == "da_x" else Domain.INTER
        bundle = da_losses(model, sample.source, source_dom, target_dom, hp,
                           state.rng, latents=sample.latents,
                           target_refs=sample.target_refs, route=sample.route,
                           div_scale=_div_scale(hp, state.iteration))
        if bundle.finite():
            # gradients for both sides come from the same graph; the fooling
            # term leaks grads into the discriminator, so its grads are reset
            # before the adversarial backward, and the discriminator steps
            # first
            _zero_all(state)
            if bundle.total_g.requires_grad:
                bundle.total_g.backward()
            if bundle.total_d is not None:
                model.discriminator.zero_grad(set_to_none=True)
                bundle.total_d.backward()
                _step(state, ("discriminator",))
            if bundle.total_g.requires_grad:
                _step(state, _GEN_SIDE[sample.task])
        state.iteration += 1
        return state, bundle

    if sample.task == "self":
        if teacher is None:
            raise ConfigError("self-phase steps need a teacher snapshot")
        bundle = self_losses(model, teacher, sample.intra, sample.inter, hp,
                             state.rng, latent=sample.latents[0])
        if bundle.finite() and bundle.total_g.requires_grad:
            _zero_all(state)
            bundle.total_g.backward()
            _step(state, _GEN_SIDE["self"])
        state.iteration += 1
        return state, bundle

    raise ConfigError(f"unknown task {sample.task!r}")


# ---------------------------------------------------------------------------
# checkpoints


def _pair_to_blob(pair: AdaInCodePair) -> dict:
    return {
        "encoder": [(f, g) for f, g in pair.encoder_layers],
        "decoder": [(f, g) for f, g in pair.decoder_layers],
    }


def _pair_from_blob(blob: dict) -> AdaInCodePair:
    return AdaInCodePair(
        tuple((f, g) for f, g in blob["encoder"]),
        tuple((f, g) for f, g in blob["decoder"]),
    )


def save_checkpoint(path: Path, state: ModelState, net_cfg: NetConfig,
                    teacher: Optional[TeacherContext] = None,
                    prebuilt: Optional[PrebuiltCodes] = None):
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "net_config": asdict(net_cfg),
        "hyperparams": asdict(state.hp),
        "models": {name: m.state_dict() for name, m in state.models.named_modules()},
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "iteration": state.iteration,
        "lr": state.lr,
        "phase": state.phase,
        "best": {"score": state.best_score, "iteration": state.best_iteration},
        "rng_state": state.rng.get_state(),
        "teacher": None,
        "prebuilt": None,
    }
    if teacher is not None:
        blob["teacher"] = {
            "generator": teacher.generator.state_dict(),
            "code_da_x": _pair_to_blob(teacher.code_da_x),
            "code_seg": _pair_to_blob(teacher.code_seg),
        }
    if prebuilt is not None:
        blob["prebuilt"] = {name: _pair_to_blob(pair) for name, pair in prebuilt.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


@dataclass
class LoadedCheckpoint:
    state: ModelState
    net_cfg: NetConfig
    teacher: Optional[TeacherContext]
    prebuilt: Optional[PrebuiltCodes]


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises various unpickling errors
        raise DataError(f"corrupted checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise CheckpointError(f"{path} is not a recognized checkpoint archive")
    if blob["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {blob['format_version']} is not "
            f"supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    net_cfg = NetConfig(**blob["net_config"])
    hp = hyperparams_from_mapping(blob["hyperparams"])
    # tuples arrive as lists through asdict/torch round trips
    if isinstance(hp.lr_milestones, list):
        hp.lr_milestones = tuple(hp.lr_milestones)
    state = init_state(net_cfg, hp)
    for name, m in state.models.named_modules():
        m.load_state_dict(blob["models"][name])
    for name, opt in state.optimizers.items():
        opt.load_state_dict(blob["optimizers"][name])
    state.iteration = blob["iteration"]
    state.phase = blob["phase"]
    state.best_score = blob["best"]["score"]
    state.best_iteration = blob["best"]["iteration"]
    state.rng.set_state(blob["rng_state"])
    state.set_lr(blob["lr"])

    teacher = None
    if blob.get("teacher") is not None:
        gen = build_models(net_cfg, hp.seed).generator
        gen.load_state_dict(blob["teacher"]["generator"])
        gen.requires_grad_(False)
        gen.eval()
        teacher = TeacherContext(gen, _pair_from_blob(blob["teacher"]["code_da_x"]),
                                 _pair_from_blob(blob["teacher"]["code_seg"]))
    prebuilt = None
    if blob.get("prebuilt") is not None:
        prebuilt = PrebuiltCodes({name: _pair_from_blob(b)
                                  for name, b in blob["prebuilt"].items()})
    return LoadedCheckpoint(state, net_cfg, teacher, prebuilt)


# ---------------------------------------------------------------------------
# schedule


def _phase_of(it: int, hp: HyperParams) -> str:
    return "joint" if it < hp.iters_joint else "self"


def scheduled_lr(hp: HyperParams, it: int) -> float:
    """Base rate with a factor-10 drop at each milestone of the current phase."""
    if it < hp.iters_joint:
        start, length = 0, hp.iters_joint
    else:
        start, length = hp.iters_joint, hp.iters_self
    p = it - start
    drops = sum(p >= int(frac * length) for frac in hp.lr_milestones)
    return hp.learning_rate * (0.1 ** drops)


def validate(state: ModelState, registry: DataRegistry, phase: str,
             prebuild_seed: int = 1) -> float:
    """Mean Dice on held-out unlabeled-domain images.

    Joint phase scores the two-pass adapt-then-segment path, self phase the
    direct path with the self code; raw argmax masks, no post-processing.
    """
    if len(registry.inter_val) == 0:
        return float("nan")
    codes = prebuild_inference_codes(state.models, 200, prebuild_seed)
    gen = state.models.generator
    scores = []
    for img, mask in zip(registry.inter_val.images, registry.inter_val.masks):
        if phase == "joint":
            pred = segment_via_adaptation(gen, codes, img)
        else:
            pred = segment_direct(gen, codes, img, code_choice="self")
        gt = BinaryMask(mask[1].numpy() > 0.5)
        scores.append(dice(pred, gt))
    return float(sum(scores) / len(scores))


@dataclass
class RunResult:
    final_path: Path
    best_path: Optional[Path]
    summary: dict
    loss_trace: list = field(default_factory=list)


def run_schedule(hp: HyperParams, net_cfg: NetConfig, registry: DataRegistry,
                 out_dir: Path, joint_tasks: Sequence[str] = JOINT_TASKS,
                 resume: bool = False, stop_after: Optional[int] = None) -> RunResult:
    """Run the joint phase then the self phase, checkpointing along the way.

    Emits iteration-named periodic checkpoints, ``checkpoint_best.pt`` on
    validation improvement, ``checkpoint_final.pt`` (with prebuilt inference
    codes) at the end, a JSONL loss trace, and ``run_summary.json``.
    ``stop_after`` interrupts the run at that iteration (a crash stand-in);
    ``resume`` picks up from the newest periodic checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "checkpoint_best.pt"
    final_path = out_dir / "checkpoint_final.pt"

    def periodic_path(iteration: int) -> Path:
        return out_dir / f"checkpoint_{iteration:06d}.pt"

    teacher: Optional[TeacherContext] = None
    periodic = sorted(out_dir.glob("checkpoint_[0-9]*.pt"))
    if resume and periodic:
        loaded = load_checkpoint(periodic[-1])
        state, teacher = loaded.state, loaded.teacher
        if asdict(loaded.net_cfg) != asdict(net_cfg):
            raise ConfigError("resume requested with a different network config")
    else:
        state = init_state(net_cfg, hp)

    total = hp.iters_joint + hp.iters_self
    t0 = time.monotonic()
    trace: list[dict] = []
    evals_since_best = 0
    stop = False

    interrupted = False
    log_path = out_dir / "loss_trace.jsonl"
    with open(log_path, "a") as log:
        it = state.iteration
        while it < total and not stop:
            if stop_after is not None and it >= stop_after:
                save_checkpoint(periodic_path(it), state, net_cfg, teacher=teacher)
                interrupted = True
                break
            phase = _phase_of(it, hp)
            if phase == "self":
                refresh = hp.teacher_refresh
                at_entry = it == hp.iters_joint
                due = refresh > 0 and (it - hp.iters_joint) % refresh == 0
                if teacher is None or at_entry or due:
                    teacher = make_teacher(state.models, hp.prebuild_samples,
                                           seed=hp.seed + 9999)
                state.phase = "self"

            lr = scheduled_lr(hp, it)
            if lr != state.lr:
                state.set_lr(lr)

            sample = sample_task(state.rng, phase, registry, hp, joint_tasks)
            state, bundle = train_step(state, sample, hp, teacher)
            it = state.iteration

            entry = {"iteration": it, "task": sample.task, "lr": lr,
                     **bundle.to_floats()}
            if not bundle.finite():
                entry["event"] = "non_finite"
            trace.append(entry)
            log.write(json.dumps(entry) + "\n")

            if hp.eval_interval > 0 and it % hp.eval_interval == 0:
                score = validate(state, registry, phase)
                if score == score and score > state.best_score:
                    state.best_score = score
                    state.best_iteration = it
                    evals_since_best = 0
                    save_checkpoint(best_path, state, net_cfg, teacher=teacher)
                else:
                    evals_since_best += 1
                    if hp.early_stop_patience > 0 and \
                            evals_since_best >= hp.early_stop_patience:
                        stop = True
                log.write(json.dumps({"iteration": it, "event": "eval",
                                      "dice": score}) + "\n")
            if hp.checkpoint_interval > 0 and it % hp.checkpoint_interval == 0:
                save_checkpoint(periodic_path(it), state, net_cfg, teacher=teacher)

    if interrupted:
        return RunResult(periodic_path(state.iteration),
                         best_path if best_path.exists() else None,
                         {"iterations": state.iteration, "interrupted": True}, trace)

    final_score = validate(state, registry, state.phase)
    prebuilt = prebuild_inference_codes(state.models, hp.prebuild_samples,
                                        seed=hp.seed + 4242)
    save_checkpoint(final_path, state, net_cfg, teacher=teacher, prebuilt=prebuilt)
    if not best_path.exists():
        save_checkpoint(best_path, state, net_cfg, teacher=teacher, prebuilt=prebuilt)

    summary = {
        "iterations": state.iteration,
        "final_val_dice": final_score,
        "best_val_dice": state.best_score if state.best_iteration >= 0 else final_score,
        "best_iteration": state.best_iteration,
        "wall_time_s": time.monotonic() - t0,
        "stopped_early": stop,
    }
    (out_dir / "run_summary.json").write_text(json.dumps(summary, indent=2))
    return RunResult(final_path, best_path if best_path.exists() else None,
                     summary, trace)

"""All loss terms: supervised segmentation, bidirectional adaptation, and
teacher-student self-consistency.  Every term can be switched off for
ablations; deactivated terms contribute exactly nothing to the totals.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .codespace import (
    AdaInCodePair,
    Domain,
    HyperParams,
    StyleCode,
    TaskName,
    get_task,
    prebuild_inference_codes,
    resolve_code,
)
from .errors import DomainMismatchError, ShapeError
from .networks import ModelBundle

TERM_NAMES = ("seg", "style_seg", "adv_g", "adv_d", "cycle", "style_da", "div",
              "self_inter", "self_intra")

ROUTE_LATENT = "latent"
ROUTE_REFERENCE = "reference"


@dataclass
class LossBundle:
    """Named scalar terms plus the weighted generator/discriminator totals.

    ``values`` holds 0-dim tensors (still attached to the graph); ``active``
    lists the terms that entered a total.  Totals are the lambda-weighted sums
    of the active terms, with diversity entering the generator total with a
    minus sign.
    """

    task: str
    values: dict[str, torch.Tensor] = field(default_factory=dict)
    active: frozenset = frozenset()
    total_g: Optional[torch.Tensor] = None
    total_d: Optional[torch.Tensor] = None

    def to_floats(self) -> dict[str, float]:
        out = {name: float(self.values[name].detach()) if name in self.values else 0.0
               for name in TERM_NAMES}
        out["total_g"] = float(self.total_g.detach()) if self.total_g is not None else 0.0
        out["total_d"] = float(self.total_d.detach()) if self.total_d is not None else 0.0
        return out

    def finite(self) -> bool:
        tensors = list(self.values.values())
        tensors += [t for t in (self.total_g, self.total_d) if t is not None]
        return all(torch.isfinite(t).all() for t in tensors)

    def merged(self, other: "LossBundle") -> "LossBundle":
        values = {**self.values, **other.values}
        return LossBundle(self.task, values, self.active | other.active,
                          other.total_g if other.total_g is not None else self.total_g,
                          other.total_d if other.total_d is not None else self.total_d)


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 3 else t


def pixel_cross_entropy(logits: torch.Tensor, target_onehot: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged cross entropy between softmax(logits) and a one-hot map."""
    if logits.shape != target_onehot.shape:
        raise ShapeError(
            f"logits {tuple(logits.shape)} and mask {tuple(target_onehot.shape)} disagree"
        )
    log_p = F.log_softmax(logits, dim=-3)
    return -(target_onehot * log_p).sum(dim=-3).mean()


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def _flip(rng: torch.Generator) -> bool:
    return bool(torch.rand((), generator=rng) < 0.5)


def _latent(rng: torch.Generator, n: int, model: ModelBundle) -> torch.Tensor:
    return torch.randn(n, model.config.latent_dim, generator=rng,
                       dtype=model.code_dec.dtype)


def seg_losses(model: ModelBundle, x: torch.Tensor, z_mask: torch.Tensor,
               hp: HyperParams, rng: torch.Generator,
               latent: Optional[torch.Tensor] = None,
               route: Optional[str] = None) -> LossBundle:
    """Supervised segmentation loss plus the dummy-code style loss.

    ``x`` is a labeled image batch, ``z_mask`` its one-hot mask.  The dummy
    code comes either from the decoder code generator on a latent or from the
    style encoder applied to the mask, alternating 50/50 unless ``route`` is
    pinned.
    """
    x, z_mask = _as_batch(x), _as_batch(z_mask)
    if x.shape[-2:] != z_mask.shape[-2:] or x.shape[0] != z_mask.shape[0]:
        raise ShapeError(
            f"image {tuple(x.shape)} and mask {tuple(z_mask.shape)} disagree"
        )
    if route is None:
        route = ROUTE_LATENT if _flip(rng) else ROUTE_REFERENCE
    if latent is None:
        latent = _latent(rng, x.shape[0], model)

    task = get_task(TaskName.SEG)
    codes = resolve_code(task, model.code_enc, model.code_dec)
    logits = model.generator(x, codes, Domain.MASK)

    values: dict[str, torch.Tensor] = {}
    active = set()
    total_g = logits.new_zeros(())

    if hp.term_active("seg"):
        values["seg"] = pixel_cross_entropy(logits, z_mask)
        active.add("seg")
        total_g = total_g + hp.lambda_seg * values["seg"]
    if hp.term_active("style_seg"):
        if route == ROUTE_LATENT:
            dummy = model.code_dec(latent, Domain.MASK)
        else:
            dummy = model.style_enc(z_mask.to(logits.dtype), Domain.MASK)
        recovered = model.style_enc(F.softmax(logits, dim=-3), Domain.MASK)
        values["style_seg"] = _l1(dummy, recovered)
        active.add("style_seg")
        total_g = total_g + hp.lambda_style * values["style_seg"]

    return LossBundle("seg", values, frozenset(active), total_g=total_g)


def _da_code(model: ModelBundle, task, target_dom: Domain, latent: torch.Tensor,
             route: str, ref: Optional[torch.Tensor]) -> AdaInCodePair:
    if route == ROUTE_REFERENCE and ref is not None:
        code = model.style_enc(_as_batch(ref), target_dom)
        return resolve_code(task, model.code_enc, model.code_dec,
                            reference_code=StyleCode(code, target_dom))
    return resolve_code(task, model.code_enc, model.code_dec, latent=latent)


def _cat_pairs(a: AdaInCodePair, b: AdaInCodePair) -> AdaInCodePair:
    """Stack two code pairs along the batch axis; shared fixed01 (C,) vectors
    broadcast unchanged."""
    def side(sa, sb):
        out = []
        for (fa, ga), (fb, gb) in zip(sa, sb):
            if fa.dim() == 1 and fb.dim() == 1:
                out.append((fa, ga))
            else:
                out.append((torch.cat([torch.atleast_2d(fa), torch.atleast_2d(fb)]),
                            torch.cat([torch.atleast_2d(ga), torch.atleast_2d(gb)])))
        return tuple(out)
    return AdaInCodePair(side(a.encoder_layers, b.encoder_layers),
                         side(a.decoder_layers, b.decoder_layers))


def da_losses(model: ModelBundle, source_img: torch.Tensor, source_dom: Domain,
              target_dom: Domain, hp: HyperParams, rng: torch.Generator,
              latents: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
              target_refs: Optional[tuple] = None,
              route: Optional[str] = None,
              div_scale: float = 1.0) -> LossBundle:
    """Adversarial, cycle, code-cycle and diversity terms for one direction.

    All terms come from one consistent graph: the fake enters the
    discriminator loss detached, so ``total_d`` trains only the discriminator
    while ``total_g`` carries the generator-side objective.  When the
    diversity term is on, both fakes run as one batched generator forward.
    """
    for dom in (source_dom, target_dom):
        if dom not in (Domain.INTRA, Domain.INTER):
            raise DomainMismatchError(f"adaptation runs between image domains, got {dom}")
    if source_dom is target_dom:
        raise DomainMismatchError("source and target domains must differ")

    source_img = _as_batch(source_img)
    n = source_img.shape[0]
    if route is None:
        if target_refs:
            route = ROUTE_LATENT if _flip(rng) else ROUTE_REFERENCE
        else:
            route = ROUTE_LATENT
    if latents is None:
        latents = (_latent(rng, n, model), _latent(rng, n, model))

    fwd_task = get_task(TaskName.DA_X if target_dom is Domain.INTRA else TaskName.DA_Y)
    back_task = get_task(TaskName.DA_X if source_dom is Domain.INTRA else TaskName.DA_Y)
    ref0 = target_refs[0] if target_refs else None
    ref1 = target_refs[1] if target_refs and len(target_refs) > 1 else None

    values: dict[str, torch.Tensor] = {}
    active = set()
    total_d = None

    pair1 = _da_code(model, fwd_task, target_dom, latents[0], route, ref0)
    fake2 = None
    if hp.term_active("div"):
        pair2 = _da_code(model, fwd_task, target_dom, latents[1], route, ref1)
        both = model.generator(torch.cat([source_img, source_img]),
                               _cat_pairs(pair1, pair2), target_dom)
        fake, fake2 = both[:n], both[n:]
    else:
        fake = model.generator(source_img, pair1, target_dom)

    if hp.term_active("adv_d"):
        real = source_img.detach().clone().requires_grad_(True)
        logit_real = model.discriminator(real, source_dom)
        adv_d = F.softplus(-logit_real).mean()
        adv_d = adv_d + F.softplus(model.discriminator(fake.detach(), target_dom)).mean()
        if not hp.paper_literal_adv and hp.r1_gamma > 0:
            (grad,) = torch.autograd.grad(logit_real.sum(), real, create_graph=True)
            r1 = grad.pow(2).flatten(start_dim=1).sum(dim=1).mean()
            adv_d = adv_d + 0.5 * hp.r1_gamma * r1
        values["adv_d"] = adv_d
        active.add("adv_d")
        total_d = adv_d

    total_g = source_img.new_zeros(())
    if hp.term_active("adv_g"):
        fake_logit = model.discriminator(fake, target_dom)
        if hp.paper_literal_adv:
            values["adv_g"] = -F.softplus(fake_logit).mean()
        else:
            values["adv_g"] = F.softplus(-fake_logit).mean()
        active.add("adv_g")
        total_g = total_g + values["adv_g"]
    if hp.term_active("cycle"):
        back_code = model.style_enc(source_img, source_dom)
        back_pair = resolve_code(back_task, model.code_enc, model.code_dec,
                                 reference_code=StyleCode(back_code, source_dom))
        rec = model.generator(fake, back_pair, source_dom)
        values["cycle"] = _l1(source_img, rec)
        active.add("cycle")
        total_g = total_g + hp.lambda_cycle * values["cycle"]
    if hp.term_active("style_da"):
        values["style_da"] = _l1(pair1.style.values,
                                 model.style_enc(fake, target_dom))
        active.add("style_da")
        total_g = total_g + hp.lambda_style * values["style_da"]
    if hp.term_active("div"):
        values["div"] = _l1(fake, fake2)
        active.add("div")
        total_g = total_g - hp.lambda_div * div_scale * values["div"]

    task_name = "da_x" if target_dom is Domain.INTRA else "da_y"
    return LossBundle(task_name, values, frozenset(active), total_g, total_d)


@dataclass
class TeacherContext:
    """Frozen generator snapshot plus the detached codes of its two-pass path."""

    generator: torch.nn.Module
    code_da_x: AdaInCodePair
    code_seg: AdaInCodePair

    def segment_composite(self, y: torch.Tensor) -> torch.Tensor:
        """Adapt to the labeled domain, then segment; softmax probabilities."""
        with torch.no_grad():
            adapted = self.generator(y, self.code_da_x, Domain.INTRA)
            logits = self.generator(adapted, self.code_seg, Domain.MASK)
            return F.softmax(logits, dim=-3)

    def segment_direct(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            logits = self.generator(x, self.code_seg, Domain.MASK)
            return F.softmax(logits, dim=-3)


def make_teacher(model: ModelBundle, n_prebuild: int, seed: int) -> TeacherContext:
    """Snapshot the generator and prebuild the codes its two-pass path needs."""
    gen = copy.deepcopy(model.generator)
    gen.requires_grad_(False)
    gen.eval()
    codes = prebuild_inference_codes(model, n_prebuild, seed)
    return TeacherContext(gen, codes["da_x"], codes["seg"])


def teacher_hash(teacher: TeacherContext) -> str:
    """Digest of every teacher parameter and code vector."""
    h = hashlib.sha256()
    for p in teacher.generator.parameters():
        h.update(p.detach().numpy().tobytes())
    for side in (teacher.code_da_x, teacher.code_seg):
        for layers in (side.encoder_layers, side.decoder_layers):
            for f, g in layers:
                h.update(f.numpy().tobytes())
                h.update(g.numpy().tobytes())
    return h.hexdigest()


def self_losses(model: ModelBundle, teacher: TeacherContext, x_intra: torch.Tensor,
                y_inter: torch.Tensor, hp: HyperParams, rng: torch.Generator,
                latent: Optional[torch.Tensor] = None) -> LossBundle:
    """Inter- and intra-domain self-consistency against the frozen teacher.

    Gradients reach only the generator and the encoder code generator; the
    teacher path is evaluated without gradients.
    """
    x_intra, y_inter = _as_batch(x_intra), _as_batch(y_inter)
    n = y_inter.shape[0]
    if latent is None:
        latent = _latent(rng, n, model)

    task = get_task(TaskName.SELF)
    pair = resolve_code(task, model.code_enc, model.code_dec, latent=latent)

    values: dict[str, torch.Tensor] = {}
    active = set()
    total_g = x_intra.new_zeros(())

    both_on = hp.term_active("self_inter") and hp.term_active("self_intra")
    if both_on and x_intra.shape == y_inter.shape:
        # one batched student pass over the paired draw
        stacked = model.generator(torch.cat([y_inter, x_intra]),
                                  _cat_pairs(pair, pair), Domain.MASK)
        probs = F.softmax(stacked, dim=-3)
        student_inter, student_intra = probs[:n], probs[n:]
    else:
        student_inter = student_intra = None

    if hp.term_active("self_inter"):
        target = teacher.segment_composite(y_inter)
        if student_inter is None:
            student_inter = F.softmax(model.generator(y_inter, pair, Domain.MASK),
                                      dim=-3)
        values["self_inter"] = _l1(target, student_inter)
        active.add("self_inter")
        total_g = total_g + hp.lambda_inter * values["self_inter"]
    if hp.term_active("self_intra"):
        target = teacher.segment_direct(x_intra)
        if student_intra is None:
            student_intra = F.softmax(model.generator(x_intra, pair, Domain.MASK),
                                      dim=-3)
        values["self_intra"] = _l1(student_intra, target)
        active.add("self_intra")
        total_g = total_g + hp.lambda_intra * values["self_intra"]

    return LossBundle("self", values, frozenset(active), total_g=total_g)

"""Inference paths, mask post-processing, metrics and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .codespace import AdaInCodePair, Domain
from .errors import ConfigError, ShapeError, UndefinedMetricError
from .networks import Generator

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class BinaryMask:
    """A strictly binary H x W prediction with provenance metadata."""

    mask: np.ndarray
    provenance: str = "direct"
    postprocessed: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.mask.shape}")


def _argmax_mask(logits: torch.Tensor) -> np.ndarray:
    probs = F.softmax(logits, dim=-3)
    return (probs[..., 1, :, :] > probs[..., 0, :, :]).squeeze().cpu().numpy()


def _lookup(codes: Mapping[str, AdaInCodePair], key: str) -> AdaInCodePair:
    try:
        return codes[key]
    except KeyError:
        raise ConfigError(f"no prebuilt code entry for {key!r}") from None


def segment_direct(generator: Generator, codes: Mapping[str, AdaInCodePair],
                   image: torch.Tensor, code_choice: str = "self") -> BinaryMask:
    """Single-pass segmentation through the mask head with a prebuilt code."""
    if code_choice not in ("self", "seg"):
        raise ConfigError(f"code_choice must be 'self' or 'seg', got {code_choice!r}")
    pair = _lookup(codes, code_choice)
    with torch.no_grad():
        logits = generator(image, pair, Domain.MASK)
    return BinaryMask(_argmax_mask(logits), provenance="direct")


def segment_via_adaptation(generator: Generator, codes: Mapping[str, AdaInCodePair],
                           image: torch.Tensor, return_adapted: bool = False):
    """Adapt to the labeled domain first, then segment with the supervised code."""
    with torch.no_grad():
        adapted = generator(image, _lookup(codes, "da_x"), Domain.INTRA)
        logits = generator(adapted, _lookup(codes, "seg"), Domain.MASK)
    mask = BinaryMask(_argmax_mask(logits), provenance="via_adaptation")
    if return_adapted:
        return mask, adapted
    return mask


def postprocess(mask: BinaryMask) -> BinaryMask:
    """Keep the two largest 4-connected components and fill their holes.

    With fewer than two components everything is kept.  Idempotent; an empty
    mask passes through empty.
    """
    m = mask.mask
    labels, n = ndimage.label(m, structure=FOUR_CONN)
    if n == 0:
        return BinaryMask(np.zeros_like(m), mask.provenance, postprocessed=True)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    # ties broken toward the first-labeled (row-major earliest) component
    keep = sorted(range(1, n + 1), key=lambda lab: (-areas[lab], lab))[:2]
    out = np.zeros_like(m)
    for lab in keep:
        comp = labels == lab
        out |= ndimage.binary_fill_holes(comp, structure=FOUR_CONN)
    return BinaryMask(out, mask.provenance, postprocessed=True)


def _counts(pred: BinaryMask, gt: BinaryMask) -> tuple[int, int, int]:
    p, g = pred.mask, gt.mask
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes disagree: {p.shape} vs {g.shape}")
    return int((p & g).sum()), int(p.sum()), int(g.sum())


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    """2|P n G| / (|P| + |G|); defined as 1.0 when both masks are empty."""
    inter, np_, ng = _counts(pred, gt)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def tpr(pred: BinaryMask, abnormal_gt: BinaryMask) -> float:
    """Fraction of the annotated abnormality region covered by the prediction."""
    inter, _, ng = _counts(pred, abnormal_gt)
    if ng == 0:
        raise UndefinedMetricError("true positive ratio is undefined for an "
                                   "empty abnormality label")
    return inter / ng


def lung_intensity_stats(image: torch.Tensor, mask: BinaryMask) -> tuple[float, tuple[float, float, float]]:
    """Mean and quartiles of the image values inside the mask."""
    m = mask.mask
    if not m.any():
        raise UndefinedMetricError("intensity statistics are undefined for an empty mask")
    vals = image.squeeze(0).cpu().numpy()[m]
    q25, q50, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
    return float(vals.mean()), (float(q25), float(q50), float(q75))


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    id: str
    domain: str
    shift: str
    dice: Optional[float] = None
    tpr: Optional[float] = None
    intensity_mean: Optional[float] = None
    intensity_q25: Optional[float] = None
    intensity_q50: Optional[float] = None
    intensity_q75: Optional[float] = None


ROW_FIELDS = ("id", "domain", "shift", "dice", "tpr", "intensity_mean",
              "intensity_q25", "intensity_q50", "intensity_q75")


def aggregate_rows(rows: Sequence[ReportRow]) -> dict:
    """Mean and population std of each metric per domain x shift group."""
    groups: dict[str, dict] = {}
    for key in sorted({f"{r.domain}/{r.shift}" for r in rows}):
        dom, shift = key.split("/")
        members = [r for r in rows if r.domain == dom and r.shift == shift]
        entry: dict = {"n": len(members)}
        for metric in ("dice", "tpr", "intensity_mean"):
            vals = [getattr(r, metric) for r in members if getattr(r, metric) is not None]
            if vals:
                entry[f"{metric}_mean"] = float(np.mean(vals))
                entry[f"{metric}_std"] = float(np.std(vals))
        groups[key] = entry
    return groups


def write_rows(rows: Sequence[ReportRow], path: Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROW_FIELDS)
        for r in rows:
            writer.writerow([
                r.id, r.domain, r.shift,
                *(("" if v is None else repr(v))
                  for v in (r.dice, r.tpr, r.intensity_mean, r.intensity_q25,
                            r.intensity_q50, r.intensity_q75)),
            ])


def read_rows(path: Path) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ReportRow(
                id=rec["id"], domain=rec["domain"], shift=rec["shift"],
                **{k: (float(rec[k]) if rec[k] else None)
                   for k in ROW_FIELDS[3:]},
            ))
    return rows


def _plot_reports(rows: Sequence[ReportRow], out_dir: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "adaseg"

    groups = aggregate_rows(rows)
    keys = [k for k in groups if "dice_mean" in groups[k]]
    if keys:
        fig, ax = plt.subplots(figsize=(max(4, len(keys)), 3))
        ax.bar(range(len(keys)), [groups[k]["dice_mean"] for k in keys],
               yerr=[groups[k]["dice_std"] for k in keys], capsize=3)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=30, ha="right")
        ax.set_ylabel("Dice")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(out_dir / "dice_by_group.svg", metadata={"Date": None})
        plt.close(fig)

    shifts = sorted({r.shift for r in rows if r.intensity_mean is not None})
    series = [[r.intensity_mean for r in rows
               if r.shift == s and r.intensity_mean is not None] for s in shifts]
    if any(series):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.boxplot(series, tick_labels=shifts)
        ax.set_ylabel("lung region intensity")
        fig.tight_layout()
        fig.savefig(out_dir / "intensity_by_shift.svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(rows: Sequence[ReportRow], out_dir: Path) -> dict:
    """Write the per-sample table, aggregate summary and plots; returns the
    aggregates."""
    if not rows:
        raise ConfigError("cannot emit a report from zero rows")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory not writable: {out_dir}") from e

    write_rows(rows, out_dir / "per_sample.csv")
    groups = aggregate_rows(rows)
    (out_dir / "summary.json").write_text(json.dumps(groups, indent=2, sort_keys=True))
    _plot_reports(rows, out_dir)
    return groups

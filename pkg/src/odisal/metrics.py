"""Saliency evaluation metrics and the three-scenario comparison.

KL and CC treat both maps as probability distributions (optionally
latitude-weighted so equirectangular oversampling near the poles does not
dominate); NSS and AUC score the raw prediction at discrete fixation
locations.  Fixations may be synthesized from a continuous ground truth
as its top-percentile pixels, flagged in the report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllZero,
    ConstantInput,
    EmptyFixations,
    OutOfRange,
    ShapeMismatch,
)

KL_EPS = 1e-7
METRIC_NAMES = ("kl", "cc", "nss", "auc")


@dataclass(frozen=True)
class MetricReport:
    """One row of metric values; aggregates reuse the same shape."""

    kl: float
    cc: float
    nss: float
    auc: float
    fixations_synthesized: bool = False

    def values(self):
        return (self.kl, self.cc, self.nss, self.auc)


def row_latitudes(h: int) -> np.ndarray:
    """Latitude at each row's pixel center, top row first."""
    ys = np.arange(h) + 0.5
    return np.pi * (1.0 - ys / h) - np.pi / 2.0


def to_distribution(m: np.ndarray, latitude_weighted: bool = True) -> np.ndarray:
    """p_i = w_i m_i / sum(w m), w = cos(latitude) or 1."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2D map, got shape {m.shape}")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError("saliency map must be finite and non-negative")
    if latitude_weighted:
        w = np.cos(row_latitudes(m.shape[0]))[:, None]
        m = m * w
    total = m.sum()
    if total <= 0:
        raise AllZero("cannot normalize an all-zero map")
    return m / total


def kl_divergence(pred: np.ndarray, gt: np.ndarray, eps: float = KL_EPS) -> float:
    """KL(gt || pred) = sum gt * ln(gt / (pred + eps) + eps).

    Zero gt entries contribute exactly 0 (their factor multiplies a
    finite log).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return float(np.sum(gt * np.log(gt / (pred + eps) + eps)))


def pearson_cc(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred - pred.mean()
    g = gt - gt.mean()
    sp = math.sqrt(float(np.sum(p * p)))
    sg = math.sqrt(float(np.sum(g * g)))
    if sp == 0 or sg == 0:
        raise ConstantInput("correlation undefined for a constant map")
    return float(np.sum(p * g) / (sp * sg))


def _check_fixations(shape, fixations):
    if len(fixations) == 0:
        raise EmptyFixations("need at least one fixation")
    h, w = shape
    fx = np.asarray(fixations, dtype=np.int64)
    if fx.ndim != 2 or fx.shape[1] != 2:
        raise ShapeMismatch("fixations must be (n, 2) pixel locations (x, y)")
    if np.any(fx[:, 0] < 0) or np.any(fx[:, 0] >= w) or np.any(fx[:, 1] < 0) or np.any(
        fx[:, 1] >= h
    ):
        raise OutOfRange("fixation outside the raster")
    return fx


def nss(pred: np.ndarray, fixations) -> float:
    """Mean z-score of the prediction at fixations; constant maps give 0."""
    pred = np.asarray(pred, dtype=np.float64)
    fx = _check_fixations(pred.shape, fixations)
    std = pred.std()
    if std == 0:
        return 0.0
    z = (pred - pred.mean()) / std
    return float(z[fx[:, 1], fx[:, 0]].mean())


def auc_judd(pred: np.ndarray, fixations) -> float:
    """ROC area with thresholds swept over the fixation values.

    Each threshold sits an epsilon below a unique fixation value, so a
    pixel ties with the threshold value count as above it (comparison >=).
    The sentinels 0 and max+eps pin the curve ends at (1,1) and (0,0).
    """
    pred = np.asarray(pred, dtype=np.float64)
    fx = _check_fixations(pred.shape, fixations)
    fix_vals = pred[fx[:, 1], fx[:, 0]]
    mask = np.zeros(pred.shape, dtype=bool)
    mask[fx[:, 1], fx[:, 0]] = True
    other_vals = pred[~mask]
    if other_vals.size == 0:
        return 1.0
    thresholds = np.concatenate(
        [[0.0], np.unique(fix_vals), [pred.max() + 1e-8]]
    )
    tpr = [float(np.mean(fix_vals >= t)) for t in thresholds]
    fpr = [float(np.mean(other_vals >= t)) for t in thresholds]
    order = np.lexsort((tpr, fpr))
    fpr = np.asarray(fpr)[order]
    tpr = np.asarray(tpr)[order]
    return float(np.trapezoid(tpr, fpr))


def fixations_from_map(gt: np.ndarray, top_fraction: float = 0.01):
    """Synthesize fixations as the top-fraction pixels of a continuous map."""
    gt = np.asarray(gt, dtype=np.float64)
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    k = max(1, round(top_fraction * gt.size))
    flat_order = np.lexsort((np.arange(gt.size), -gt.reshape(-1)))
    picked = flat_order[:k]
    ys, xs = np.unravel_index(picked, gt.shape)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def evaluate(
    pred: np.ndarray,
    gt: np.ndarray,
    fixations=None,
    latitude_weighted: bool = True,
    eps: float = KL_EPS,
    top_fraction: float = 0.01,
) -> MetricReport:
    """All four metrics for one image.

    KL and CC run on the latitude-weighted distributions of both inputs;
    NSS and AUC use the raw prediction at the fixations, synthesizing them
    from the ground truth when none are given.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = to_distribution(pred, latitude_weighted)
    g = to_distribution(gt, latitude_weighted)
    synthesized = fixations is None
    if synthesized:
        fixations = fixations_from_map(gt, top_fraction)
    return MetricReport(
        kl=kl_divergence(p, g, eps),
        cc=pearson_cc(p, g),
        nss=nss(pred, fixations),
        auc=auc_judd(pred, fixations),
        fixations_synthesized=synthesized,
    )


def aggregate(reports):
    """Population mean and std over reports, as two MetricReport rows."""
    if not reports:
        raise ValueError("no reports to aggregate")
    table = np.array([r.values() for r in reports], dtype=np.float64)
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    synth = any(r.fixations_synthesized for r in reports)
    return (
        MetricReport(*map(float, mean), fixations_synthesized=synth),
        MetricReport(*map(float, std), fixations_synthesized=synth),
    )


def report_csv(ids, reports, path) -> None:
    """Per-image rows plus trailing mean and std rows; %.17g round-trips."""
    mean, std = aggregate(reports)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("image_id,kl,cc,nss,auc\n")
        for sid, rep in zip(ids, reports):
            fh.write("%s,%s\n" % (sid, ",".join("%.17g" % v for v in rep.values())))
        fh.write("mean,%s\n" % ",".join("%.17g" % v for v in mean.values()))
        fh.write("std,%s\n" % ",".join("%.17g" % v for v in std.values()))


def report_text(ids, reports) -> str:
    """Aligned table with mean/std footer."""
    mean, std = aggregate(reports)
    width = max([len("image_id")] + [len(str(s)) for s in ids] + [4])
    lines = [
        "%-*s %10s %10s %10s %10s" % (width, "image_id", "kl", "cc", "nss", "auc")
    ]
    for sid, rep in zip(ids, reports):
        lines.append(
            "%-*s %10.4f %10.4f %10.4f %10.4f" % (width, sid, *rep.values())
        )
    lines.append("%-*s %10.4f %10.4f %10.4f %10.4f" % (width, "mean", *mean.values()))
    lines.append("%-*s %10.4f %10.4f %10.4f %10.4f" % (width, "std", *std.values()))
    if any(r.fixations_synthesized for r in reports):
        lines.append("(fixations synthesized from ground truth)")
    return "\n".join(lines)


SCENARIO_NAMES = (
    "whole_odi_base",
    "six_patches_base",
    "six_patches_refined",
)


def ablation_report(
    odi: np.ndarray,
    gt: np.ndarray,
    fixations,
    net,
    *,
    fov: float = np.pi / 2,
    patch_w: int = 256,
    patch_h: int = 256,
    blur_kernel: int = 64,
    down_w: int = 800,
    down_h: int = 400,
    latitude_weighted: bool = True,
):
    """The three-scenario comparison for one ODI.

    Row 1 pushes the downscaled whole image through the base stack alone;
    row 2 recombines six base-stack patches; row 3 is the full pipeline
    with coordinate channels.  Returns [(name, MetricReport, map), ...].
    """
    from .model import predict_downscaled, predict_equirect

    rows = []
    maps = [
        predict_downscaled(net, odi, down_w, down_h),
        predict_equirect(
            net, odi, fov=fov, patch_w=patch_w, patch_h=patch_h,
            blur_kernel=blur_kernel, use_refine=False,
        ),
        predict_equirect(
            net, odi, fov=fov, patch_w=patch_w, patch_h=patch_h,
            blur_kernel=blur_kernel, use_refine=True,
        ),
    ]
    for name, sal in zip(SCENARIO_NAMES, maps):
        rows.append(
            (name, evaluate(sal, gt, fixations, latitude_weighted), sal)
        )
    return rows

"""Shape-sensitivity experiments on synthetic nerves."""
import csv
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import InferenceConfig, refine_case
from .synth import PROBABILITY_LEVELS, SyntheticSpec, generate_nerve

# Threshold used to build clouds from synthetic maps.  A q = 0.1 nerve blurred
# with sigma = 1 stays strictly below 0.1 everywhere, so the clinical default
# would leave the lowest sweep level with an empty cloud.
SYNTH_THETA = 0.05
FP_SPANS = tuple(range(1, 22, 2))


def _fmt(v):
    return "undefined" if v is None else f"{v:.6f}"


@dataclass
class SweepRow:
    kind: str
    q: float
    dice: float
    hd95_mm: float
    vs: float
    input_dice: float
    input_hd95_mm: float
    input_vs: float


def experiment_probability_sweep(model, seed=0, config=None, kinds=("straight", "branching"),
                                 levels=PROBABILITY_LEVELS, base=None, keep=None):
    """Refine straight and branching nerves at every probability level.

    ``keep``, if a dict, receives each refined volume under ``(kind, q)``.
    """
    config = config or InferenceConfig(subcloud_size=model.spec.input_size, theta=SYNTH_THETA, seed=seed)
    base = base or SyntheticSpec()
    rows = []
    for kind in kinds:
        for q in levels:
            vol, gt = generate_nerve(replace(base, kind=kind, q=q))
            rep = refine_case(vol, gt, model, config)
            if keep is not None:
                keep[(kind, q)] = rep.inference.segmentation
            rows.append(SweepRow(kind, q, rep.dice, rep.hd95_mm, rep.vs,
                                 rep.input.dice, rep.input.hd95_mm, rep.input.vs))
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "q", "dice", "hd95_mm", "vs", "input_dice", "input_hd95_mm", "input_vs"])
        for r in rows:
            w.writerow([r.kind, f"{r.q:g}", _fmt(r.dice), _fmt(r.hd95_mm), _fmt(r.vs),
                        _fmt(r.input_dice), _fmt(r.input_hd95_mm), _fmt(r.input_vs)])


@dataclass
class HeatMap:
    spans: tuple
    levels: tuple
    hd: np.ndarray  # [len(spans), len(levels)] mm, NaN when undefined
    hd95: np.ndarray
    baseline_hd: float
    baseline_hd95: float

    def removed(self, tol):
        """Cells whose HD matches the no-false-positive baseline within ``tol`` mm."""
        return np.abs(self.hd - self.baseline_hd) <= tol

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["span", "fp_q", "hd_mm", "hd95_mm", "baseline_hd_mm", "baseline_hd95_mm"])
            for i, s in enumerate(self.spans):
                for j, q in enumerate(self.levels):
                    w.writerow([s, f"{q:g}", f"{self.hd[i, j]:.6f}", f"{self.hd95[i, j]:.6f}",
                                f"{self.baseline_hd:.6f}", f"{self.baseline_hd95:.6f}"])

    def write_matrix(self, path, which="hd"):
        """gnuplot ``matrix nonuniform`` layout: first row q levels, first column spans."""
        grid = self.hd if which == "hd" else self.hd95
        with open(path, "w") as fh:
            fh.write(f"{len(self.levels)} " + " ".join(f"{q:g}" for q in self.levels) + "\n")
            for i, s in enumerate(self.spans):
                fh.write(f"{s} " + " ".join(f"{v:.6f}" for v in grid[i]) + "\n")

    def ascii(self):
        shades = " .:-=+*#%@"
        top = np.nanmax(self.hd) if np.isfinite(self.hd).any() else 1.0
        lines = ["HD in mm (HD95 in parentheses) after refinement; rows: false-positive span, cols: q_fp",
                 f"baseline without false positive: {self.baseline_hd:.1f} ({self.baseline_hd95:.1f})",
                 "span | " + " | ".join(f"q={q:<12g}" for q in self.levels)]
        for i, s in enumerate(self.spans):
            cells = []
            for j in range(len(self.levels)):
                h, h95 = self.hd[i, j], self.hd95[i, j]
                k = 0 if not np.isfinite(h) or top <= 0 else int(round((len(shades) - 1) * h / top))
                cells.append(f"{shades[k]} {h:5.1f} ({h95:5.1f})")
            lines.append(f"{s:4d} | " + " | ".join(cells))
        return "\n".join(lines) + "\n"


def experiment_false_positive(model, seed=0, config=None, spans=FP_SPANS, levels=PROBABILITY_LEVELS,
                              nerve_q=0.5, kind="branching", base=None, keep=None):
    """HD/HD95 after refinement for a tubular false positive of each span and probability.

    ``keep``, if a dict, receives each refined volume under ``(span, q_fp)``;
    the baseline without a false positive is stored under ``(0, None)``.
    """
    config = config or InferenceConfig(subcloud_size=model.spec.input_size, theta=SYNTH_THETA, seed=seed)
    base = replace(base or SyntheticSpec(), kind=kind, q=nerve_q)
    vol, gt = generate_nerve(base)
    ref = refine_case(vol, gt, model, config)
    if keep is not None:
        keep[(0, None)] = ref.inference.segmentation
    hd = np.full((len(spans), len(levels)), np.nan)
    hd95 = np.full_like(hd, np.nan)
    for i, s in enumerate(spans):
        for j, q in enumerate(levels):
            vol, gt = generate_nerve(replace(base, fp_span=s, fp_q=q))
            rep = refine_case(vol, gt, model, config)
            if keep is not None:
                keep[(s, q)] = rep.inference.segmentation
            hd[i, j] = np.nan if rep.hd_mm is None else rep.hd_mm
            hd95[i, j] = np.nan if rep.hd95_mm is None else rep.hd95_mm
    nan = float("nan")
    return HeatMap(tuple(spans), tuple(levels), hd, hd95,
                   nan if ref.hd_mm is None else ref.hd_mm, nan if ref.hd95_mm is None else ref.hd95_mm)

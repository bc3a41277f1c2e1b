"""Max-softmax threshold rejection and the three open-set accuracies.

An utterance is rejected when its maximum class probability falls strictly
below the threshold (a probability exactly at the threshold is accepted).
Reports carry raw counts; accuracies are derived, and rendering rounds to one
decimal place.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

REJECTED = None


@dataclass(frozen=True)
class Decision:
    """Outcome of thresholded classification: accepted class index or rejection."""

    label: int | None
    max_prob: float

    @property
    def rejected(self) -> bool:
        return self.label is None


@dataclass(frozen=True)
class EvalReport:
    """Counts and accuracies at one threshold."""

    threshold: float
    n_in: int
    n_out: int
    correct_in: int
    correct_reject: int

    @property
    def in_set_acc(self) -> float:
        return 100.0 * self.correct_in / self.n_in

    @property
    def out_of_set_acc(self) -> float:
        return 100.0 * self.correct_reject / self.n_out

    @property
    def overall_acc(self) -> float:
        return 100.0 * (self.correct_in + self.correct_reject) / (self.n_in + self.n_out)


def classify_open(probs: np.ndarray, threshold: float) -> Decision:
    """Accept argmax when max(probs) >= threshold, otherwise reject.

    Ties break toward the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError(f"probs must be a non-empty vector, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)) or abs(float(probs.sum()) - 1.0) > 1e-4:
        raise ValueError("probs must be finite and sum to 1 within 1e-4")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    max_prob = float(probs.max())
    if max_prob < threshold:
        return Decision(REJECTED, max_prob)
    return Decision(int(np.argmax(probs)), max_prob)


def evaluate(decisions: Sequence[Decision], references: Sequence[int | None],
             threshold: float) -> EvalReport:
    """Count correct in-set identifications and correct out-of-set rejections.

    ``references[i]`` is the true class index, or None for out-of-set input.
    """
    if len(decisions) != len(references):
        raise ValueError("decisions and references differ in length")
    n_in = n_out = correct_in = correct_reject = 0
    for decision, ref in zip(decisions, references):
        if ref is None:
            n_out += 1
            if decision.rejected:
                correct_reject += 1
        else:
            n_in += 1
            if decision.label == ref:
                correct_in += 1
    if n_in == 0:
        raise ValueError("no in-set references present")
    if n_out == 0:
        raise ValueError("no out-of-set references present")
    return EvalReport(threshold, n_in, n_out, correct_in, correct_reject)


def threshold_sweep(probs: np.ndarray, references: Sequence[int | None],
                    thresholds: Sequence[float]) -> list[EvalReport]:
    """One EvalReport per threshold over a cached (N, K) probability matrix."""
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    probs = np.asarray(probs, dtype=np.float64)
    decisions_raw = [classify_open(row, 0.0) for row in probs]
    reports = []
    for tau in thresholds:
        decisions = [
            d if d.max_prob >= tau else Decision(REJECTED, d.max_prob)
            for d in decisions_raw
        ]
        reports.append(evaluate(decisions, references, tau))
    return reports


# --- Report rendering ---------------------------------------------------------


def format_threshold(tau: float) -> str:
    """Up to 4 decimals, trailing zeros trimmed, at least 2 decimals kept."""
    text = f"{tau:.4f}".rstrip("0")
    digits = len(text.partition(".")[2])
    if digits < 2:
        text += "0" * (2 - digits)
    return text


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    lines = ["threshold,overall,in_set,out_of_set"]
    for r in reports:
        lines.append(
            f"{format_threshold(r.threshold)},{r.overall_acc:.1f},{r.in_set_acc:.1f},{r.out_of_set_acc:.1f}"
        )
    return "".join(line + "\n" for line in lines)


_SVG_SERIES = (
    ("overall", "#1f77b4", lambda r: r.overall_acc),
    ("in_set", "#2ca02c", lambda r: r.in_set_acc),
    ("out_of_set", "#d62728", lambda r: r.out_of_set_acc),
)

_SVG_W, _SVG_H = 800, 500
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 30, 40, 60


def reports_to_svg(reports: Sequence[EvalReport]) -> str:
    """Deterministic SVG 1.1 plot of the three accuracies vs threshold."""
    taus = [r.threshold for r in reports]
    lo, hi = min(taus), max(taus)
    span = hi - lo if hi > lo else 1.0
    plot_w = _SVG_W - _MARGIN_L - _MARGIN_R
    plot_h = _SVG_H - _MARGIN_T - _MARGIN_B

    def sx(tau):
        return _MARGIN_L + plot_w * (tau - lo) / span

    def sy(acc):
        return _MARGIN_T + plot_h * (1.0 - acc / 100.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    for i in range(6):  # y ticks every 20%
        acc = 20.0 * i
        y = sy(acc)
        parts.append(f'<line x1="{_MARGIN_L - 5}" y1="{y:.2f}" x2="{_MARGIN_L}" y2="{y:.2f}" stroke="#333333"/>')
        parts.append(
            f'<text x="{_MARGIN_L - 10}" y="{y + 4:.2f}" text-anchor="end" font-size="12" '
            f'font-family="sans-serif">{acc:.0f}</text>'
        )
    for i in range(5):  # x ticks at 5 evenly spaced thresholds
        tau = lo + span * i / 4.0
        x = sx(tau)
        y0 = _MARGIN_T + plot_h
        parts.append(f'<line x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 5}" stroke="#333333"/>')
        parts.append(
            f'<text x="{x:.2f}" y="{y0 + 20}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif">{format_threshold(tau)}</text>'
        )
    parts.append(
        f'<text x="{_MARGIN_L + plot_w / 2:.0f}" y="{_SVG_H - 15}" text-anchor="middle" '
        'font-size="14" font-family="sans-serif">threshold</text>'
    )
    parts.append(
        f'<text x="20" y="{_MARGIN_T + plot_h / 2:.0f}" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif" transform="rotate(-90 20 {_MARGIN_T + plot_h / 2:.0f})">accuracy (%)</text>'
    )
    for si, (name, color, getter) in enumerate(_SVG_SERIES):
        points = " ".join(f"{sx(r.threshold):.2f},{sy(getter(r)):.2f}" for r in reports)
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in reports:
            parts.append(
                f'<circle cx="{sx(r.threshold):.2f}" cy="{sy(getter(r)):.2f}" r="3" fill="{color}"/>'
            )
        ly = _MARGIN_T + 16 + 18 * si
        lx = _MARGIN_L + 12
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{lx + 30}" y="{ly}" font-size="12" font-family="sans-serif">{name}</text>'
        )
    parts.append("</svg>")
    return "".join(part + "\n" for part in parts)


def render_reports(reports: Sequence[EvalReport], out_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.svg``; returns both paths."""
    if not reports:
        raise ValueError("no reports to render")
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = Path(str(prefix) + ".csv")
    svg_path = Path(str(prefix) + ".svg")
    csv_path.write_text(reports_to_csv(reports), encoding="utf-8", newline="\n")
    svg_path.write_text(reports_to_svg(reports), encoding="utf-8", newline="\n")
    return csv_path, svg_path

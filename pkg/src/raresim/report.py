"""CSV and binary artifacts, comparison tables and the naive-MC sample-size rule.

Reals are written with 17 significant digits so a value read back is the
same double. Column orders are fixed; ``docs/cli.md`` lists them.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .ce import CEHistory, EstimateReport
from .expfam import BetaBlock, Family, ParamPoint

ESTIMATE_COLUMNS = ("gamma_test", "p_hat", "std_err", "rare_count", "n", "ess")
COMPARE_COLUMNS = ("gamma_test", "rare_ratio", "variance_ratio")
HISTORY_COLUMNS = ("k", "status", "gamma_k", "rho_quantile", "rare_count", "n",
                   "level_mass", "w_max", "w_min", "ess")

THETA_MAGIC = b"RSTHTv01"
_KIND_BETA = 1
_KIND_GAUSS = 2


class ReportError(ValueError):
    pass


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_estimates(path, reports):
    _write_rows(path, ESTIMATE_COLUMNS, [
        [fmt(r.gamma_test), fmt(r.p_hat), fmt(r.std_err), fmt(r.rare_count), fmt(r.n), fmt(r.ess)]
        for r in reports
    ])


def read_estimates(path, method="unknown"):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None
    if not rows or tuple(rows[0][:5]) != ESTIMATE_COLUMNS[:5]:
        raise ReportError(f"{path}: not an estimate table")
    has_ess = len(rows[0]) > 5
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        try:
            g, p, se, rc, n = row[:5]
            ess = float(row[5]) if has_ess else float(n)
            out.append(EstimateReport(float(p), float(se), int(n), float(g), int(rc), method, ess))
        except (ValueError, IndexError):
            raise ReportError(f"{path}: line {lineno}: malformed row") from None
    return out


@dataclass(frozen=True)
class Comparison:
    gamma_test: float
    rare_ratio: float
    variance_ratio: float


def _ratio(num, den):
    if den == 0:
        return 1.0 if num == 0 else math.inf
    return num / den


def compare_report(ce_reports, naive_reports):
    """Per threshold: rare-event count ratio (CE / naive) and variance ratio (naive / CE).

    ``0/0`` counts as 1: neither method saw anything, so neither is ahead.
    """
    if len(ce_reports) != len(naive_reports):
        raise ReportError("threshold grids differ in length")
    out = []
    for c, nv in zip(ce_reports, naive_reports):
        if c.gamma_test != nv.gamma_test:
            raise ReportError(f"threshold grids differ: {c.gamma_test!r} vs {nv.gamma_test!r}")
        if c.n != nv.n:
            raise ReportError(f"sample counts differ at {c.gamma_test!r}: {c.n} vs {nv.n}")
        out.append(Comparison(
            c.gamma_test,
            _ratio(c.rare_count, nv.rare_count),
            _ratio(nv.std_err ** 2, c.std_err ** 2),
        ))
    return out


def write_comparison(path, rows):
    _write_rows(path, COMPARE_COLUMNS,
                [[fmt(r.gamma_test), fmt(r.rare_ratio), fmt(r.variance_ratio)] for r in rows])


def render_table(header, rows):
    """Fixed-width plain-text table."""
    cells = [list(map(str, header))] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def comparison_text(rows):
    return render_table(COMPARE_COLUMNS, [
        [f"{r.gamma_test:g}", f"{r.rare_ratio:.3g}", f"{r.variance_ratio:.3g}"] for r in rows
    ])


def estimates_text(reports):
    return render_table(("gamma_test", "estimate", "rare_count", "n"), [
        [f"{r.gamma_test:g}", f"({r.p_hat:.3g} +- {r.std_err:.2g})", r.rare_count, r.n] for r in reports
    ])


def write_history(path, history: CEHistory):
    """One row per iteration (the iterate it sampled from) plus a final row for ``theta_K``."""
    family = history.family
    pnames = family.param_names()
    snames = ["D." + s for s in family.stat_names()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*HISTORY_COLUMNS, *pnames, *snames])
    for r in history.records:
        w.writerow([
            r.k, r.status, fmt(r.gamma_k), fmt(r.rho_quantile), r.rare_count, r.n,
            fmt(r.level_mass), fmt(r.w_max), fmt(r.w_min), fmt(r.ess),
            *(fmt(v) for v in r.theta.flat()), *(fmt(v) for v in r.d_vector),
        ])
    blank = [""] * (len(HISTORY_COLUMNS) - 2)
    w.writerow([len(history.records), "final", *blank,
                *(fmt(v) for v in history.thetas[-1].flat()), *([""] * len(snames))])
    Path(path).write_text(buf.getvalue())


def required_sample_size(p, eps) -> int:
    """Naive-MC samples for relative accuracy ``eps`` at probability ``p``: ``ceil(1/(p eps^2))``.

    Exact rational arithmetic on the decimal inputs, so ``(1e-5, 0.1)`` gives
    exactly 10**7.
    """
    p, eps = Fraction(str(p)), Fraction(str(eps))
    if not (0 < p <= 1 and eps > 0):
        raise ValueError("need 0 < p <= 1 and eps > 0")
    return math.ceil(1 / (p * eps * eps))


def write_theta(path, family: Family, theta: ParamPoint):
    family.check(theta)
    out = bytearray(THETA_MAGIC + struct.pack("<I", len(family.blocks)))
    for blk, p in zip(family.blocks, theta.values):
        vals = np.ascontiguousarray(p, dtype="<f8").ravel()
        kind = _KIND_BETA if isinstance(blk, BetaBlock) else _KIND_GAUSS
        out += struct.pack("<BI", kind, vals.size) + vals.tobytes()
    Path(path).write_bytes(bytes(out))


def read_theta(path, family: Family) -> ParamPoint:
    """Read a parameter file and check it against ``family`` block by block."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ReportError(f"cannot read parameter file {path}: {exc}") from None
    if data[:8] != THETA_MAGIC or len(data) < 12:
        raise ReportError(f"{path}: not a parameter file")
    (nblocks,) = struct.unpack_from("<I", data, 8)
    if nblocks != len(family.blocks):
        raise ReportError(f"{path}: {nblocks} blocks, the scenario family has {len(family.blocks)}")
    off, values = 12, []
    for i, blk in enumerate(family.blocks):
        if off + 5 > len(data):
            raise ReportError(f"{path}: truncated")
        kind, count = struct.unpack_from("<BI", data, off)
        off += 5
        want_kind = _KIND_BETA if isinstance(blk, BetaBlock) else _KIND_GAUSS
        want = 2 * blk.dim if isinstance(blk, BetaBlock) else blk.dim
        if kind != want_kind or count != want:
            raise ReportError(f"{path}: block {i} ({blk.name}) does not match the scenario family")
        if off + 8 * count > len(data):
            raise ReportError(f"{path}: truncated")
        v = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        values.append(v.reshape(2, blk.dim) if isinstance(blk, BetaBlock) else v)
    if off != len(data):
        raise ReportError(f"{path}: trailing bytes")
    theta = ParamPoint(tuple(values))
    try:
        family.check(theta)
    except ValueError as exc:
        raise ReportError(f"{path}: {exc}") from None
    return theta

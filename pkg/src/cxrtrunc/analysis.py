"""Cross-model analyses over a study table: rank correlation, pretraining
boost, parameter efficiency and report emission."""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import InputError, SchemaError, UndefinedCorrelationError

STUDY_COLUMNS = (
    "name", "family", "variant", "pretrained", "k", "param_count",
    "imagenet_top1", "avg_auc", "auc_ci_lo", "auc_ci_hi",
)
EXACT_MAX_N = 9


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: float
    n: int
    x_name: str = "x"
    y_name: str = "y"
    method: str = "t-approximation"


@dataclass(frozen=True)
class ModelRecord:
    name: str
    family: str
    variant: str
    pretrained: bool
    param_count: int
    avg_auc: float
    auc_ci: tuple[float, float]
    k: int = 0
    imagenet_top1: float | None = None

    def row(self) -> dict:
        return {
            "name": self.name, "family": self.family, "variant": self.variant,
            "pretrained": "true" if self.pretrained else "false", "k": self.k,
            "param_count": self.param_count,
            "imagenet_top1": "" if self.imagenet_top1 is None else repr(self.imagenet_top1),
            "avg_auc": repr(self.avg_auc), "auc_ci_lo": repr(self.auc_ci[0]), "auc_ci_hi": repr(self.auc_ci[1]),
        }


# -- study tables ------------------------------------------------------------------


def check_unique(records: Sequence[ModelRecord]) -> None:
    seen = set()
    for r in records:
        key = (r.name, r.pretrained)
        if key in seen:
            raise InputError(f"duplicate study row for {r.name} (pretrained={r.pretrained})")
        seen.add(key)


def _parse_bool(raw: str, line: int) -> bool:
    v = raw.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise SchemaError(f"line {line}: pretrained must be true or false, got {raw!r}")


def load_study_table(path: str | Path) -> list[ModelRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in STUDY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        records = []
        for row in reader:
            line = reader.line_num
            try:
                top1 = row["imagenet_top1"].strip()
                records.append(ModelRecord(
                    name=row["name"], family=row["family"], variant=row["variant"],
                    pretrained=_parse_bool(row["pretrained"], line),
                    param_count=int(float(row["param_count"])),
                    avg_auc=float(row["avg_auc"]),
                    auc_ci=(float(row["auc_ci_lo"]), float(row["auc_ci_hi"])),
                    k=int(row["k"]),
                    imagenet_top1=float(top1) if top1 else None,
                ))
            except (TypeError, ValueError, AttributeError) as exc:
                raise SchemaError(f"{path}: line {line}: {exc}") from None
    check_unique(records)
    return records


def save_study_table(records: Sequence[ModelRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, STUDY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    return path


def published_table() -> list[ModelRecord]:
    """The 16 ImageNet-pretrained reference models (param counts, AUCs, CIs)."""
    with resources.as_file(resources.files("cxrtrunc") / "data" / "published_models.csv") as p:
        return load_study_table(p)


# -- statistics --------------------------------------------------------------------


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    return float(np.clip(np.sum(da * db) / math.sqrt(np.sum(da * da) * np.sum(db * db)), -1.0, 1.0))


def spearman(x: Sequence[float], y: Sequence[float], exact: bool = False,
             x_name: str = "x", y_name: str = "y") -> CorrelationResult:
    """Spearman rank correlation with ties given their average rank.

    The two-sided p-value uses the t approximation with ``n - 2`` degrees of
    freedom. ``exact=True`` (only for ``n <= 9``) enumerates all permutations
    of the ``y`` ranks instead.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("x and y must be 1-d and of equal length")
    n = x.size
    if n < 3:
        raise InputError("spearman needs at least 3 pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InputError("x and y must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("rank correlation is undefined for a constant input")
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    rho = _pearson(rx, ry)
    if exact:
        if n > EXACT_MAX_N:
            raise InputError(f"exact permutation p-values are limited to n <= {EXACT_MAX_N}")
        perms = np.array(list(itertools.permutations(ry)))
        dx = rx - rx.mean()
        dp = perms - perms.mean(axis=1, keepdims=True)
        null = (dp @ dx) / np.sqrt(np.sum(dx * dx) * np.sum(dp * dp, axis=1))
        p = float(np.mean(np.abs(null) >= abs(rho) - 1e-12))
        return CorrelationResult(rho, min(p, 1.0), n, x_name, y_name, "exact-permutation")
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))
    return CorrelationResult(rho, p, n, x_name, y_name)


def times_smaller(base_params: float, truncated_params: float) -> float:
    """Base parameter count divided by truncated parameter count."""
    if base_params <= 0 or truncated_params <= 0:
        raise InputError("parameter counts must be positive")
    return base_params / truncated_params


def format_times_smaller(ratio: float) -> str:
    return f"{ratio:.1f}x"


def auc_change_pct(truncated_auc: float, base_auc: float) -> float:
    if base_auc <= 0:
        raise InputError("base AUC must be positive")
    return 100.0 * (truncated_auc - base_auc) / base_auc


@dataclass
class BoostSummary:
    boosts: dict
    mean_boost: float | None
    correlation: CorrelationResult | None
    excluded: list
    param_count: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["correlation"] = None if self.correlation is None else asdict(self.correlation)
        return d


def pretraining_boost(records: Sequence[ModelRecord]) -> BoostSummary:
    """``auc_pretrained - auc_scratch`` for every model present both ways."""
    check_unique(records)
    pre = {r.name: r for r in records if r.pretrained}
    scratch = {r.name: r for r in records if not r.pretrained}
    names = sorted(set(pre) | set(scratch))
    excluded = [n for n in names if n not in pre or n not in scratch]
    if excluded:
        warnings.warn(f"pretraining boost skips unpaired model(s): {', '.join(excluded)}")
    paired = [n for n in names if n not in excluded]
    boosts = {n: pre[n].avg_auc - scratch[n].avg_auc for n in paired}
    params = {n: pre[n].param_count for n in paired}
    mean = float(np.mean(list(boosts.values()))) if boosts else None
    corr = None
    if len(paired) >= 3:
        try:
            corr = spearman([params[n] for n in paired], [boosts[n] for n in paired],
                            x_name="param_count", y_name="pretraining_boost")
        except UndefinedCorrelationError as exc:
            warnings.warn(str(exc))
    return BoostSummary(boosts, mean, corr, excluded, params)


def _boost_halfwidth(records: Sequence[ModelRecord], name: str) -> float:
    # display-only: half-widths of the two CIs combined in quadrature
    hw = [(r.auc_ci[1] - r.auc_ci[0]) / 2 for r in records if r.name == name]
    return float(math.sqrt(sum(h * h for h in hw)))


def correlations(records: Sequence[ModelRecord]) -> dict:
    """Spearman rho/p for AUC against size and ImageNet top-1, per pretraining arm."""
    out = {}
    for pretrained in (True, False):
        arm = [r for r in records if r.pretrained == pretrained]
        tag = "pretrained" if pretrained else "scratch"
        pairs = {
            f"auc_vs_params_{tag}": [(r.param_count, r.avg_auc) for r in arm],
            f"auc_vs_top1_{tag}": [(r.imagenet_top1, r.avg_auc) for r in arm if r.imagenet_top1 is not None],
        }
        for key, xy in pairs.items():
            if len(xy) < 3:
                continue
            x, y = zip(*xy)
            try:
                out[key] = asdict(spearman(x, y))
            except UndefinedCorrelationError as exc:
                out[key] = {"error": str(exc)}
    return out


# -- report --------------------------------------------------------------------------


def _write_points(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _scatter(path: Path, points: list[tuple], xlabel: str, ylabel: str, title: str, errors: bool = False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5), dpi=100)
    for pretrained, marker in ((True, "o"), (False, "s")):
        pts = [p for p in points if p[3] == pretrained]
        if not pts:
            continue
        xs = [p[1] for p in pts]
        ys = [p[2] for p in pts]
        label = "pretrained" if pretrained else "scratch"
        if errors:
            ax.errorbar(xs, ys, yerr=[p[4] for p in pts], fmt=marker, capsize=3, label=label)
        else:
            ax.scatter(xs, ys, marker=marker, label=label)
        for name, x, y, *_ in pts:
            ax.annotate(name, (x, y), fontsize=6, xytext=(3, 3), textcoords="offset points")
    if not points:
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
    elif errors is False:
        ax.legend(fontsize=7)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(records: Sequence[ModelRecord], out_dir: str | Path) -> dict[str, Path]:
    """Write study/boost CSVs, three scatter plots with coordinate sidecars,
    and a JSON summary of the correlations. Returns ``{label: path}``."""
    if not records:
        raise InputError("study table is empty")
    check_unique(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"study_table": save_study_table(records, out_dir / "study_table.csv")}

    boost = pretraining_boost(records) if any(not r.pretrained for r in records) else BoostSummary(
        {}, None, None, [], {})
    paths["boost_table"] = out_dir / "pretraining_boost.csv"
    _write_points(paths["boost_table"], ["name", "param_count", "boost"],
                  [(n, boost.param_count[n], repr(b)) for n, b in boost.boosts.items()])

    header = ["name", "x", "y", "pretrained"]
    top1 = [(r.name, r.imagenet_top1, r.avg_auc, r.pretrained) for r in records if r.imagenet_top1 is not None]
    size = [(r.name, math.log10(r.param_count), r.avg_auc, r.pretrained) for r in records]
    boost_pts = [(n, math.log10(boost.param_count[n]), b, True, _boost_halfwidth(records, n))
                 for n, b in boost.boosts.items()]
    plots = {
        "auc_vs_top1": (top1, "ImageNet top-1 accuracy (%)", "Average AUC", "AUC vs ImageNet top-1", False),
        "auc_vs_log10_params": (size, "log10(number of parameters)", "Average AUC", "AUC vs model size", False),
        "boost_vs_log10_params": (boost_pts, "log10(number of parameters)", "Pretraining boost (AUC)",
                                  "Pretraining boost vs model size", True),
    }
    for stem, (pts, xl, yl, title, err) in plots.items():
        png = out_dir / f"{stem}.png"
        _scatter(png, pts, xl, yl, title, errors=err)
        sidecar = out_dir / f"{stem}.points.csv"
        _write_points(sidecar, header + (["yerr"] if err else []),
                      [(p[0], repr(p[1]), repr(p[2]), str(p[3]).lower(), *(repr(e) for e in p[4:])) for p in pts])
        paths[stem] = png
        paths[f"{stem}_points"] = sidecar

    summary = {"n_models": len(records), "correlations": correlations(records), "pretraining_boost": boost.to_dict()}
    paths["summary"] = out_dir / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    return paths

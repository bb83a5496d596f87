"""Collect stage metrics of a run directory into Markdown + CSV tables and figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .data.io import atomic_write_text


class EmptyReport(ValueError):
    pass


def _md_table(header: list[str], rows: list[list]) -> str:
    fmt = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)  # noqa: E731
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(v) for v in r) + " |" for r in rows]
    return "\n".join(lines)


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _equivalence(m: dict) -> tuple[list[str], list[list]]:
    header = ["method", "kind", "ssim", "psnr_db", "perceptual", "halo_l1", "mse", "latent_mse"]
    rows = []
    order = ("ground_truth", "heuristic_area", "heuristic_bilinear", "heuristic_nearest", "alpha_clamped", "oracle", "decformer")
    names = sorted(m["methods"], key=lambda n: order.index(n) if n in order else len(order))
    for name in names:
        rep = m["methods"][name]
        rows.append([name, "all", rep["ssim"], rep["psnr_db"], rep["perceptual"], rep["halo_l1"], rep["mse"], rep["latent_mse"]])
        for kind, vals in rep.get("per_kind", {}).items():
            rows.append([name, kind, *(vals[k] for k in header[2:])])
    return header, rows


def _ablation(m: dict) -> tuple[list[str], list[list]]:
    from .autoencoder.erf import bootstrap_ci

    header = ["ablation", "halo_l1", "halo_l1_ci", "perceptual", "perceptual_ci", "mse"]
    rows = []
    for r in m["rows"]:
        lo, hi = bootstrap_ci(r["halo_l1"], seed=0)
        plo, phi = bootstrap_ci(r["perceptual"], seed=0)
        mean = lambda v: sum(v) / len(v)  # noqa: E731
        rows.append([r["name"], mean(r["halo_l1"]), f"[{lo:.4g}, {hi:.4g}]", mean(r["perceptual"]), f"[{plo:.4g}, {phi:.4g}]", mean(r["mse"])])
    return header, rows


def _inpaint(m: dict) -> tuple[list[str], list[list]]:
    header = ["variant", "ssim", "psnr_db", "perceptual", "seam_halo_l1", "context_l1"]
    return header, [[name, *(v[k] for k in header[1:])] for name, v in m["rows"].items()]


def _color(m: dict) -> tuple[list[str], list[list]]:
    header = ["method", "perceptual", "psnr_db", "ssim"]
    return header, [[name, *(v[k][0] for k in header[1:])] for name, v in m["summary"].items()]


def _erf(m: dict) -> tuple[list[str], list[list]]:
    header = ["part", "analytic_r0", "analytic_influence", "r50", "r90", "r90_ci95"]
    rows = []
    for part in ("encoder", "decoder"):
        s = m[part]
        rows.append([part, s["analytic_r0"], s["analytic_influence"], s["r50"], s["r90"], "[{:.4g}, {:.4g}]".format(*s["r90_ci95"])])
    return header, rows


TABLES = {
    "eval-equivalence": ("Latent compositing equivalence", _equivalence),
    "ablate": ("Compositor ablations", _ablation),
    "eval-inpaint": ("Inpainting", _inpaint),
    "eval-color": ("Colour operator", _color),
    "erf": ("Effective receptive field", _erf),
}


def emit_report(run_dir: str | Path, out: str | Path | None = None) -> Path:
    """Write ``report.md`` plus one CSV per table; returns the Markdown path.

    Raises :class:`EmptyReport` when the run holds no stage manifests.
    """
    run = Path(run_dir)
    manifests = sorted((run / "manifests").glob("*.json")) if (run / "manifests").is_dir() else []
    if not manifests:
        raise EmptyReport(f"no stage manifests under {run}; run at least one stage first")
    out = Path(out) if out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    stages = {p.stem: json.loads(p.read_text()) for p in manifests}
    parts = ["# Run report", "", f"Run directory: `{run}`", ""]
    parts += [_md_table(["stage", "stage_hash", "config_hash", "seed", "wall_clock_s"], [[s, m.get("stage_hash", ""), m["config_hash"], m["seed"], m.get("wall_clock_s", "")] for s, m in stages.items()]), ""]
    rf = run / "tables" / "rf_tables.txt"
    if rf.exists():
        parts += ["## Analytic receptive fields", "", "```", rf.read_text().rstrip(), "```", ""]
    for stage, (title, fn) in TABLES.items():
        path = run / "metrics" / f"{stage}.json"
        if stage not in stages or not path.exists():
            continue
        header, rows = fn(json.loads(path.read_text()))
        atomic_write_text(out / f"{stage}.csv", _csv(header, rows))
        parts += [f"## {title}", "", _md_table(header, rows), ""]
    plots = sorted((run / "plots").glob("*.png")) if (run / "plots").is_dir() else []
    if plots:
        parts += ["## Figures", ""] + [f"![{p.stem}](../plots/{p.name})" if out == run / "report" else f"![{p.stem}]({p.resolve()})" for p in plots] + [""]
    md = out / "report.md"
    atomic_write_text(md, "\n".join(parts))
    return md

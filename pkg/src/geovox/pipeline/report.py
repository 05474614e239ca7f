"""Comparison tables, mid-slice grayscale images and loss-curve series."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import N_CATEGORIES
from ..geostory import FACIES
from . import io

ROW_ORDER = ("depthwise", "polygonal", "fm-plain", "fm-attn", "ddpm-attn", "ddpm-plain")
ROW_LABELS = {
    "depthwise": "Depth-wise majority",
    "polygonal": "Polygonal nearest",
    "fm-plain": "Flow matching",
    "fm-attn": "Attention flow matching",
    "ddpm-attn": "DDPM",
    "ddpm-plain": "DDPM (plain skips)",
}


def _pct(v) -> str:
    return "   n/a" if v is None or not np.isfinite(v) else f"{100 * v:6.2f}"


def ordered_names(names) -> list[str]:
    names = list(names)
    known = [n for n in ROW_ORDER if n in names]
    return known + sorted(n for n in names if n not in ROW_ORDER)


def table1(metrics: dict[str, dict]) -> str:
    """Acc incl/excl air and mIoU per method; only methods with metrics appear."""
    head = f"{'Method':<26} {'Acc(incl air)%':>14} {'Acc(excl air)%':>14} {'mIoU(excl air)%':>15}"
    lines = [head, "-" * len(head)]
    for n in ordered_names(metrics):
        p = metrics[n]["pooled"]
        lines.append(f"{ROW_LABELS.get(n, n):<26} {_pct(p['acc_incl_air']):>14} {_pct(p['acc_excl_air']):>14} "
                     f"{_pct(p['miou_excl_air']):>15}")
    return "\n".join(lines) + "\n"


def table2(metrics: dict[str, dict]) -> str:
    """Per-category proportion, then accuracy (recall) and IoU for each method."""
    names = ordered_names(metrics)
    head = f"{'Category':<28} {'Prop%':>6}" + "".join(f" {n[:12] + ' Acc':>17} {n[:12] + ' IoU':>17}" for n in names)
    lines = [head, "-" * len(head)]
    first = metrics[names[0]]["pooled"]["per_category"] if names else {}
    for k in range(1, N_CATEGORIES + 1):
        row = f"{k} {FACIES[k]:<26} {_pct(first.get(str(k), {}).get('proportion')):>6}"
        for n in names:
            pc = metrics[n]["pooled"]["per_category"][str(k)]
            row += f" {_pct(pc['recall']):>17} {_pct(pc['iou']):>17}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def gray_levels(vol: np.ndarray) -> np.ndarray:
    """One gray level per category, spread evenly over 0..255."""
    return np.round((vol.astype(np.float64) - 1) * 255.0 / (N_CATEGORIES - 1)).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def mid_slices(vol: np.ndarray) -> dict[str, np.ndarray]:
    """Axis-aligned mid-slices as images (rows top to bottom, z increasing upward in sections)."""
    nx, ny, nz = vol.shape
    g = gray_levels(vol)
    return {
        "xy": g[:, :, nz // 2].T[::-1],
        "xz": g[:, ny // 2, :].T[::-1],
        "yz": g[nx // 2, :, :].T[::-1],
    }


def write_slices(vol: np.ndarray, out_dir: Path, prefix: str) -> list[Path]:
    paths = []
    for axis, img in mid_slices(vol).items():
        p = out_dir / f"{prefix}_{axis}.pgm"
        io.atomic_write(p, pgm_bytes(img))
        paths.append(p)
    return paths


def loss_series(history_path: Path) -> str:
    rows = io.read_json(history_path)
    lines = ["epoch,train_loss,val_loss"]
    for h in rows:
        lines.append(f"{h['epoch']},{h['train_loss']!r},{h.get('val_loss', float('nan'))!r}")
    return "\n".join(lines) + "\n"


def build_report(run_dir, split: str = "ood") -> dict[str, Path]:
    run_dir = Path(run_dir)
    out = run_dir / "report"
    files: dict[str, Path] = {}
    metrics = {}
    mdir = run_dir / "metrics"
    if mdir.is_dir():
        for p in sorted(mdir.glob(f"*_{split}.json")):
            d = io.read_json(p)
            metrics[d["name"]] = d
    t1 = table1(metrics)
    io.atomic_write(out / "table1.txt", t1.encode())
    files["table1"] = out / "table1.txt"
    if metrics:
        io.atomic_write(out / "table2.txt", table2(metrics).encode())
        files["table2"] = out / "table2.txt"
    man_path = run_dir / "manifest.json"
    if man_path.is_file():
        manifest = io.Manifest.load(man_path)
        cases = manifest.split(split)
        if cases:
            case = cases[0]
            write_slices(io.read_volume(manifest.path(case, "truth"), io.CATEGORICAL), out / "slices", "truth")
            for name in ordered_names(metrics):
                p = run_dir / "preds" / name / f"{case.case_id}.gvl"
                if p.is_file():
                    write_slices(io.read_volume(p, io.CATEGORICAL), out / "slices", name)
            files["slices"] = out / "slices"
    models = run_dir / "models"
    if models.is_dir():
        for h in sorted(models.glob("*/history.json")):
            p = out / f"loss_{h.parent.name}.csv"
            io.atomic_write(p, loss_series(h).encode())
            files[f"loss_{h.parent.name}"] = p
    return files

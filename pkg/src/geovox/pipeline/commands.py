"""Run-directory operations behind each CLI subcommand."""
from __future__ import annotations

import csv
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .. import AIR
from .. import evalbase as E
from .. import genflow as F
from .. import geophys as P
from .. import geostory as G
from .. import sparsity as S
from ..errors import ConfigError, DataError, ShapeError, UsageError
from ..netmodel import UNet, UNetConfig
from . import io
from .config import RunConfig

OUTPUT_ROOT_ENV = "GEOVOX_OUTPUT_ROOT"
BASELINES = ("depthwise", "polygonal")


def resolve_path(path) -> Path:
    """Relative paths are placed under $GEOVOX_OUTPUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise UsageError(f"{run_dir} is locked by another command (remove {lock} if stale)") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def case_seeds(base: int, index: int, n: int = 3) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([base, index]).generate_state(n)]


def load_config(run_dir: Path) -> RunConfig:
    return RunConfig.from_dict(io.read_json(run_dir / "config.json"))


def load_manifest(run_dir: Path) -> io.Manifest:
    return io.Manifest.load(run_dir / "manifest.json")


# -- dataset -------------------------------------------------------------------

def generate_case(cfg: RunConfig, split: str, index: int) -> dict:
    """Story, truth volume, sparse condition and (optionally) noisy field maps for one case."""
    story_seed, hole_seed, noise_seed = case_seeds(cfg.generation_seed, index)
    story = G.sample_story(story_seed, cfg.story_ranges(split), cfg.grid)
    vol = G.realize(story)
    cond = S.sample_sparse(vol, cfg.n_holes, hole_seed)
    out = {"seed": story_seed, "story": story, "truth": vol, "condition": cond}
    if cfg.geophysics:
        out.update(field_maps(vol, cfg.voxel_size, cfg.receivers, noise_seed))
    return out


def field_maps(vol: np.ndarray, voxel_size: float, n_receivers: int, seed: int) -> dict[str, P.FieldMap]:
    rho, chi = P.map_properties(vol, P.PropertyTable())
    rec = P.draped_receivers(vol, voxel_size, n=n_receivers)
    active = vol != AIR
    g = P.forward_gravity(rho, voxel_size, rec, active=active)
    m = P.forward_magnetics(chi, P.InducingField(), voxel_size, rec, active=active)
    return {"gravity": P.add_noise(g, seed), "magnetics": P.add_noise(m, seed + 1)}


def gen_dataset(cfg: RunConfig, run_dir) -> io.Manifest:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        io.write_json(run_dir / "config.json", cfg.to_dict())
        counts = cfg.split_counts()
        splits = ["train"] * counts["train"] + ["val"] * counts["val"] + ["ood"] * counts["ood"]
        cases = []
        for i, split in enumerate(splits):
            case = generate_case(cfg, split, i)
            cid = f"case_{i:04d}"
            rel = Path("data") / cid
            files = {"truth": str(rel / "truth.gvl"), "condition": str(rel / "condition.gvl")}
            io.write_volume(run_dir / files["truth"], case["truth"], io.CATEGORICAL)
            io.write_volume(run_dir / files["condition"], case["condition"].labels, io.CONDITION)
            for kind in ("gravity", "magnetics"):
                if kind in case:
                    files[kind] = str(rel / f"{kind}.gvl")
                    io.write_volume(run_dir / files[kind], case[kind].to_array().astype(np.float32), io.FIELDMAP)
            io.write_json(run_dir / rel / "story.json", case["story"].to_dict())
            cases.append(io.CaseEntry(cid, split, case["seed"], files,
                                      [list(b) for b in case["condition"].borehole_columns]))
        manifest = io.Manifest(cases, cfg.grid, run_dir)
        manifest.save(run_dir / "manifest.json")
    return manifest


def load_case(manifest: io.Manifest, case: io.CaseEntry) -> tuple[np.ndarray, S.ConditionVolume]:
    vol = io.read_volume(manifest.path(case, "truth"), io.CATEGORICAL)
    lab = io.read_volume(manifest.path(case, "condition"), io.CONDITION)
    if vol.shape != lab.shape:
        raise ShapeError(f"case {case.case_id}: truth {vol.shape} vs condition {lab.shape}")
    return vol, S.ConditionVolume(lab, [tuple(b) for b in case.boreholes])


def load_split(manifest: io.Manifest, split: str):
    cases = manifest.split(split)
    pairs = [load_case(manifest, c) for c in cases]
    return cases, [p[0] for p in pairs], [p[1] for p in pairs]


# -- training ----------------------------------------------------------------------

def model_name(objective: str, attention: bool) -> str:
    return f"{objective}-{'attn' if attention else 'plain'}"


def state_tensors(state: F.TrainState) -> dict[str, np.ndarray]:
    out = dict(state.model.params.state())
    out.update(state.optimizer.state())
    return out


def _timeless(history: list[dict]) -> list[dict]:
    # wall-clock time lives only in train_log.csv so checkpoints stay reproducible
    return [{k: v for k, v in h.items() if k != "seconds"} for h in history]


def save_state(path, state: F.TrainState) -> None:
    cfg = state.config
    meta = {
        "model": state.model.config.to_dict(),
        "train": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "step": state.step,
        "epoch": state.epoch,
        "adam_step": state.optimizer.step_count,
        "rng": state.rng_state(),
        "history": _timeless(state.history),
    }
    io.write_checkpoint(path, state_tensors(state), meta)


def load_state(path, expect_model: UNetConfig | None = None) -> F.TrainState:
    tensors, meta = io.read_checkpoint(path)
    try:
        mcfg = UNetConfig(**meta["model"])
        tcfg = F.TrainConfig(**meta["train"])
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: checkpoint metadata incomplete: {e}") from e
    if expect_model is not None and mcfg != expect_model:
        raise ConfigError(f"{path}: checkpoint model config differs from the run config")
    state = F.TrainState(UNet(mcfg), tcfg)
    try:
        state.model.params.load(tensors)
        state.optimizer.load(tensors, meta["adam_step"])
    except (ShapeError, KeyError) as e:
        raise ConfigError(f"{path}: checkpoint does not match model config: {e}") from e
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    state.set_rng_state(meta["rng"])
    state.history = list(meta["history"])
    return state


def train(run_dir, objective: str = F.FM, attention: bool = True, name: str | None = None,
          epochs: int | None = None, resume: bool = False, log=None) -> F.TrainState:
    """Train to ``epochs`` total epochs, checkpointing and logging after each one."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir)
    manifest = load_manifest(run_dir)
    name = name or model_name(objective, attention)
    mdir = run_dir / "models" / name
    ckpt = mdir / "checkpoint.gvck"
    mcfg = cfg.unet_config(attention=attention)
    tcfg = cfg.train_config(objective=objective, **({} if epochs is None else {"epochs": epochs}))
    _, vols, conds = load_split(manifest, "train")
    if not vols:
        raise DataError("no training cases in manifest")
    train_xc = F.prepare_batch(vols, conds)
    _, vvols, vconds = load_split(manifest, "val")
    val_xc = F.prepare_batch(vvols, vconds) if vvols else None
    with run_lock(run_dir):
        if resume and ckpt.is_file():
            state = load_state(ckpt, mcfg)
            state.config = tcfg
        else:
            state = F.TrainState(UNet(mcfg, seed=tcfg.seed), tcfg)
            mdir.mkdir(parents=True, exist_ok=True)
            with open(mdir / "train_log.csv", "w", newline="") as f:
                f.write("epoch,step,wall_time,train_loss,val_loss\n")
        t_start = time.time()
        while state.epoch < tcfg.epochs:
            rec = F.fit(state, train_xc, val_xc, epochs=1)[-1]
            with open(mdir / "train_log.csv", "a", newline="") as f:
                csv.writer(f).writerow([rec["epoch"], rec["step"], f"{time.time() - t_start:.3f}",
                                        repr(rec["train_loss"]), repr(rec.get("val_loss", float("nan")))])
            save_state(ckpt, state)
            if log:
                log(rec)
        io.write_json(mdir / "history.json", _timeless(state.history))
    return state


# -- prediction ----------------------------------------------------------------------

def pred_path(run_dir: Path, name: str, case_id: str) -> Path:
    return run_dir / "preds" / name / f"{case_id}.gvl"


def sample(run_dir, name: str, split: str = "ood", steps: int | None = None, seed: int | None = None,
           limit: int | None = None) -> list[Path]:
    run_dir = Path(run_dir)
    cfg = load_config(run_dir)
    manifest = load_manifest(run_dir)
    scfg = cfg.sampler_config(**{k: v for k, v in (("steps", steps), ("seed", seed)) if v is not None})
    state = load_state(run_dir / "models" / name / "checkpoint.gvck")
    schedule = F.NoiseSchedule(scfg.ddpm_T)
    cases = manifest.split(split)[:limit]
    out = []
    with run_lock(run_dir):
        for i, case in enumerate(cases):
            _, cond = load_case(manifest, case)
            s = case_seeds(scfg.seed, i, 1)[0]
            pred = F.sample(state.model, cond, state.config.objective, seed=s, steps=scfg.steps, schedule=schedule)
            p = pred_path(run_dir, name, case.case_id)
            io.write_volume(p, pred, io.CATEGORICAL)
            out.append(p)
    return out


def baseline(run_dir, method: str, split: str = "ood") -> list[Path]:
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    fn = E.baseline_depthwise if method == "depthwise" else E.baseline_polygonal
    out = []
    with run_lock(run_dir):
        for case in manifest.split(split):
            _, cond = load_case(manifest, case)
            p = pred_path(run_dir, method, case.case_id)
            io.write_volume(p, fn(cond), io.CATEGORICAL)
            out.append(p)
    return out


def evaluate(run_dir, name: str, split: str = "ood") -> E.MetricsReport:
    """Pool metrics over the split's predicted cases and write them as JSON."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    reports, per_case = [], {}
    for case in manifest.split(split):
        p = pred_path(run_dir, name, case.case_id)
        if not p.is_file():
            continue
        truth = io.read_volume(manifest.path(case, "truth"), io.CATEGORICAL)
        r = E.compute_metrics(io.read_volume(p, io.CATEGORICAL), truth)
        reports.append(r)
        per_case[case.case_id] = {"acc_incl_air": r.acc_incl_air, "acc_excl_air": r.acc_excl_air,
                                  "miou_excl_air": r.miou_excl_air}
    if not reports:
        raise DataError(f"no predictions found for {name!r} on split {split!r}")
    pooled = E.aggregate(reports)
    io.write_json(run_dir / "metrics" / f"{name}_{split}.json",
                  {"name": name, "split": split, "n_cases": len(reports), "pooled": pooled.to_dict(),
                   "cases": per_case})
    return pooled


def forward_geophys(volume_path, out_dir, voxel_size: float = 25.0, receivers: int = 30, seed: int = 0) -> dict:
    """Noisy gravity and magnetic maps for a categorical volume file."""
    vol = io.read_volume(volume_path, io.CATEGORICAL)
    maps = field_maps(vol, voxel_size, receivers, seed)
    out_dir = Path(out_dir)
    paths = {}
    for kind, fm in maps.items():
        paths[kind] = out_dir / f"{kind}.gvl"
        io.write_volume(paths[kind], fm.to_array().astype(np.float32), io.FIELDMAP)
    return paths

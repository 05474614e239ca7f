import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from geovox import genflow as F
from geovox.errors import ConfigError, DataError, UsageError
from geovox.pipeline import commands as C
from geovox.pipeline import io
from geovox.pipeline import report as R
from geovox.pipeline.cli import main
from geovox.pipeline.config import RunConfig

TINY_MODEL = dict(levels=2, base_channels=4, gn_groups=2, time_embed_dim=8)


def tiny_config(**kw) -> RunConfig:
    base = dict(grid=(8, 8, 8), n_cases=6, n_holes=2, ood_fraction=0.34, val_fraction=0.25,
                model={**RunConfig().model, **TINY_MODEL},
                train={**RunConfig().train, "epochs": 2, "batch_size": 2},
                sampler={"steps": 3, "ddpm_T": 5, "seed": 0})
    base.update(kw)
    return RunConfig(**base)


# -- volume files -------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5)))
def test_categorical_roundtrip(arr):
    back, kind = io.decode_volume(io.encode_volume(arr, io.CATEGORICAL))
    assert kind == io.CATEGORICAL and back.dtype == np.uint8 and np.array_equal(back, arr)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.int8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5)))
def test_condition_roundtrip(arr):
    back, _ = io.decode_volume(io.encode_volume(arr, io.CONDITION))
    assert np.array_equal(back, arr)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(width=32, allow_nan=False)))
def test_continuous_roundtrip_infers_channels(arr):
    back, kind = io.decode_volume(io.encode_volume(arr, io.CONTINUOUS))
    assert kind == io.CONTINUOUS and back.tobytes() == arr.tobytes() and back.shape == arr.shape


def test_fieldmap_roundtrip_and_header(rng):
    arr = rng.standard_normal((30, 30, 4)).astype(np.float32)
    data = io.encode_volume(arr, io.FIELDMAP)
    assert data[:4] == b"GVL1" and len(data) == io.HEADER.size + arr.size * 4
    assert io.decode_volume(data)[0].tobytes() == arr.tobytes()


def test_volume_errors(tmp_path):
    good = io.encode_volume(np.ones((2, 2, 2), np.uint8), io.CATEGORICAL)
    with pytest.raises(DataError):
        io.decode_volume(b"XXXX" + good[4:])
    with pytest.raises(DataError):
        io.decode_volume(good[:-1])
    with pytest.raises(DataError):
        io.read_volume(tmp_path / "absent.gvl")
    with pytest.raises(DataError):
        io.encode_volume(np.ones((2, 2, 2)), io.CATEGORICAL)
    io.write_volume(tmp_path / "v.gvl", np.ones((2, 2, 2), np.uint8), io.CATEGORICAL)
    with pytest.raises(DataError):
        io.read_volume(tmp_path / "v.gvl", io.CONDITION)


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_bytes_roundtrip(rng):
    tensors = {"a.weight": rng.standard_normal((3, 2, 1, 1, 1)).astype(np.float32), "b": np.zeros(4, np.float32)}
    meta = {"step": 3, "nested": {"x": [1, 2]}}
    data = io.encode_checkpoint(tensors, meta)
    back, m2 = io.decode_checkpoint(data)
    assert m2 == meta and list(back) == list(tensors)
    assert all(back[k].tobytes() == tensors[k].tobytes() for k in tensors)
    assert io.encode_checkpoint(back, m2) == data
    with pytest.raises(DataError):
        io.decode_checkpoint(data[:20])


def _train_xc():
    cfg = tiny_config()
    vols, conds = [], []
    for i in range(3):
        case = C.generate_case(cfg, "train", i)
        vols.append(case["truth"])
        conds.append(case["condition"])
    return F.prepare_batch(vols, conds)


def test_train_state_resume_bit_identical(tmp_path):
    from geovox.netmodel import UNet, UNetConfig

    x, c = _train_xc()
    mcfg = UNetConfig(**TINY_MODEL)
    tcfg = F.TrainConfig(batch_size=2, seed=4)
    a = F.TrainState(UNet(mcfg, seed=1), tcfg)
    for _ in range(3):
        F.training_step(a, x[:2], c[:2])
    C.save_state(tmp_path / "ck.gvck", a)
    b = C.load_state(tmp_path / "ck.gvck")
    la = [F.training_step(a, x[1:], c[1:]) for _ in range(3)]
    lb = [F.training_step(b, x[1:], c[1:]) for _ in range(3)]
    assert la == lb
    for (n, p), (_, q) in zip(a.model.params, b.model.params):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_checkpoint_config_mismatch(tmp_path):
    from geovox.netmodel import UNet, UNetConfig

    st_ = F.TrainState(UNet(UNetConfig(**TINY_MODEL)))
    C.save_state(tmp_path / "ck.gvck", st_)
    with pytest.raises(ConfigError):
        C.load_state(tmp_path / "ck.gvck", UNetConfig(**{**TINY_MODEL, "base_channels": 8}))


# -- config and manifest ---------------------------------------------------------------

def test_config_json_roundtrip():
    cfg = RunConfig()
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert cfg.split_counts() == {"train": 108, "val": 12, "ood": 30}


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(n_holes=10_000)
    with pytest.raises(ConfigError):
        RunConfig(ood_overrides={"fold_amplitude": [5.0, 9.0]})
    with pytest.raises(ConfigError):
        RunConfig(model={**RunConfig().model, "levels": 0})
    with pytest.raises(ConfigError):
        RunConfig(train={**RunConfig().train, "objective": "gan"})


def test_manifest_duplicate_ids():
    e = io.CaseEntry("a", "train", 0)
    with pytest.raises(DataError):
        io.Manifest([e, e], (2, 2, 2))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    C.gen_dataset(tiny_config(), d)
    return d


def test_gen_dataset_counts_and_files(run_dir):
    m = C.load_manifest(run_dir)
    assert len(m.cases) == 6
    assert m.counts() == tiny_config().split_counts() == {"train": 3, "val": 1, "ood": 2}
    for c in m.cases:
        assert set(c.files) == set(io.MODALITIES)
        assert io.read_volume(m.path(c, "gravity"), io.FIELDMAP).shape == (30, 30, 4)
    assert RunConfig.from_dict(io.read_json(run_dir / "config.json")).to_dict() == tiny_config().to_dict()


def test_gen_dataset_deterministic(run_dir, tmp_path):
    C.gen_dataset(tiny_config(), tmp_path)
    for p in sorted(run_dir.rglob("*.gvl")):
        q = tmp_path / p.relative_to(run_dir)
        assert p.read_bytes() == q.read_bytes()


def test_ood_cases_use_disjoint_ranges(run_dir):
    cfg = tiny_config()
    lo, hi = cfg.story_ranges("ood").fold_amplitude
    for c in C.load_manifest(run_dir).split("ood"):
        story = io.read_json(run_dir / "data" / c.case_id / "story.json")
        folds = [e for e in story["events"] if e["kind"] == "fold"]
        assert all(lo <= f["amplitude"] <= hi for f in folds)


def test_manifest_missing_file(run_dir, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    (copy / "data" / "case_0000" / "truth.gvl").unlink()
    with pytest.raises(DataError):
        io.Manifest.load(copy / "manifest.json")


def test_lock_prevents_concurrent_writers(tmp_path):
    with C.run_lock(tmp_path):
        with pytest.raises(UsageError):
            with C.run_lock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()


def test_evaluate_truth_is_perfect(run_dir):
    m = C.load_manifest(run_dir)
    for c in m.split("val"):
        io.write_volume(C.pred_path(run_dir, "oracle", c.case_id), io.read_volume(m.path(c, "truth")), io.CATEGORICAL)
    r = C.evaluate(run_dir, "oracle", "val")
    assert r.acc_incl_air == 1.0 and r.acc_excl_air == 1.0 and r.miou_excl_air == 1.0


def test_report_with_only_baselines(run_dir):
    for method in C.BASELINES:
        C.baseline(run_dir, method, "ood")
        C.evaluate(run_dir, method, "ood")
    files = R.build_report(run_dir, "ood")
    t1 = files["table1"].read_text()
    assert "Depth-wise majority" in t1 and "Polygonal nearest" in t1
    assert "flow matching" not in t1.lower() and "DDPM" not in t1
    assert (run_dir / "report" / "slices" / "truth_xy.pgm").is_file()


def test_slice_images_pure_function(rng):
    vol = rng.integers(1, 10, size=(5, 6, 7)).astype(np.uint8)
    a = R.mid_slices(vol)
    assert a["xy"].shape == (6, 5) and a["xz"].shape == (7, 5) and a["yz"].shape == (7, 6)
    assert all(R.pgm_bytes(a[k]) == R.pgm_bytes(R.mid_slices(vol.copy())[k]) for k in a)
    levels = R.gray_levels(np.arange(1, 10, dtype=np.uint8).reshape(9, 1, 1)).ravel()
    assert len(set(levels.tolist())) == 9 and levels[0] == 0 and levels[-1] == 255


def test_slice_golden():
    vol = np.zeros((2, 2, 2), np.uint8)
    vol[:, :, 0] = 2
    vol[:, :, 1] = 1
    vol[1, :, 0] = 9
    img = R.mid_slices(vol)["xz"]
    assert R.pgm_bytes(img) == b"P5\n2 2\n255\n" + bytes([0, 0, 32, 255])


# -- CLI -----------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
    io.write_json(tmp_path / "cfg.json", tiny_config().to_dict())
    assert main(["gen-dataset", "--run", "r", "--config", str(tmp_path / "cfg.json")]) == 0
    assert main(["train", "--run", "r", "--objective", "fm", "--attention", "on"]) == 0
    assert main(["train", "--run", "r", "--objective", "ddpm", "--attention", "off", "--epochs", "1"]) == 0
    assert main(["sample", "--run", "r", "--model", "fm-attn", "--steps", "2"]) == 0
    assert main(["sample", "--run", "r", "--model", "ddpm-plain"]) == 0
    assert main(["baseline", "--run", "r", "--method", "polygonal"]) == 0
    for name in ("fm-attn", "ddpm-plain", "polygonal"):
        assert main(["evaluate", "--run", "r", "--pred", name]) == 0
    capsys.readouterr()
    assert main(["report", "--run", "r"]) == 0
    out = capsys.readouterr().out
    assert "Attention flow matching" in out and "DDPM (plain skips)" in out
    run = tmp_path / "r"
    assert (run / "report" / "loss_fm-attn.csv").read_text().count("\n") == 3
    log = (run / "models" / "fm-attn" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,step,wall_time,train_loss,val_loss" and len(log) == 3
    assert main(["forward-geophys", "--volume", str(run / "data" / "case_0000" / "truth.gvl"),
                 "--out", str(tmp_path / "geo")]) == 0
    assert io.read_volume(tmp_path / "geo" / "gravity.gvl", io.FIELDMAP).shape == (30, 30, 4)


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_cases": 0}))
    assert main(["gen-dataset", "--run", "x", "--config", str(bad)]) == 2
    assert main(["evaluate", "--run", "nowhere", "--pred", "fm-attn"]) == 3
    with pytest.raises(SystemExit) as e:
        main(["train", "--run", "x", "--objective", "gan"])
    assert e.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = tiny_config(train={**tiny_config().train, "epochs": 1, "lr": 1e30})
    io.write_json(tmp_path / "cfg.json", cfg.to_dict())
    assert main(["gen-dataset", "--run", "r", "--config", str(tmp_path / "cfg.json")]) == 0
    assert main(["train", "--run", "r", "--objective", "ddpm", "--epochs", "3"]) == 4


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
    assert C.resolve_path("a/b") == tmp_path / "a" / "b"
    assert C.resolve_path("/abs") == Path("/abs")
    monkeypatch.delenv(C.OUTPUT_ROOT_ENV)
    assert str(C.resolve_path("a")) == "a"

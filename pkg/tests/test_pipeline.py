import json

import numpy as np
import pytest

from aaaseg import pipeline as pl
from aaaseg import unet, volio
from aaaseg.errors import ConfigError, PipelineError

SUBJECTS = {
    "A": {"phantom": {"n_slices": 4, "seed": 1}},
    "B": {"phantom": {"n_slices": 4, "seed": 2, "a": 0.95, "b": 15.0, "offset": [-3, 2]}},
    "C": {"phantom": {"n_slices": 4, "seed": 3, "a": 1.15, "b": -60.0, "offset": [12, -8]}},
}


def tiny_doc(**over):
    doc = {
        "seed": 0,
        "subjects": SUBJECTS,
        "train_subjects": ["A", "B"],
        "test_subject": "C",
        "model": {"preset": "custom", "depth": 2, "base_features": 2},
        "optimizer": {"kind": "adam"},
        "augment": {"kind": "gt", "window": 64, "stride": 16, "n_gray": 2},
        "train": {"max_iterations": 4},
        "postprocess": {"min_size": 1},
        "evaluate": {"icp_max_iter": 5},
        "crossval": {"folds": [{"train": ["A", "B"], "test": "C"}], "policies": ["gt", "rm"]},
    }
    doc.update(over)
    return doc


def test_defaults_carry_published_settings():
    d = pl.DEFAULTS
    assert d["optimizer"]["kind"] == "sgd"
    assert d["optimizer"]["sgd"]["lr"] == 0.1 and d["optimizer"]["sgd"]["momentum"] == 0.9
    assert d["optimizer"]["adam"]["lr"] == 0.001
    assert d["augment"]["window"] == 512
    assert d["resample"]["target_spacing_mm"] == [0.645, 0.645]
    assert d["train"]["max_iterations"] == 110_000
    assert unet.PRESETS[d["model"]["preset"]].counted_layers == 34


def test_derive_seed_is_stable_and_separates_purposes():
    assert pl.derive_seed(0, "train") == pl.derive_seed(0, "train")
    assert pl.derive_seed(0, "train") != pl.derive_seed(0, "init")
    assert pl.derive_seed(0, "train") != pl.derive_seed(1, "train")


def test_config_validation():
    with pytest.raises(ConfigError, match="also a training subject"):
        pl.RunConfig(tiny_doc(test_subject="A"))
    with pytest.raises(ConfigError, match="unknown subject"):
        pl.RunConfig(tiny_doc(train_subjects=["Z"]))
    with pytest.raises(ConfigError, match="preset"):
        pl.RunConfig(tiny_doc(model={"preset": "u99"}))
    with pytest.raises(ConfigError, match="window"):
        pl.RunConfig(tiny_doc(augment={"window": 62}))
    with pytest.raises(ConfigError):
        pl.RunConfig(tiny_doc(optimizer={"kind": "rmsprop"}))


def test_config_hash_tracks_content():
    a, b = pl.RunConfig(tiny_doc()), pl.RunConfig(tiny_doc())
    assert a.hash() == b.hash()
    assert a.hash() != a.with_overrides(seed=1).hash()


def test_bundled_configs_load(configs_dir):
    for path in configs_dir.glob("*.json"):
        cfg = pl.RunConfig.load(path)
        assert pl.make_plan(cfg)


def test_plan_shapes(configs_dir):
    smoke = pl.RunConfig.load(configs_dir / "phantom_smoke.json")
    plan = pl.make_plan(smoke)
    assert len(plan) == 6
    assert {p[1] for p in plan} == {"A", "B", "C"}
    bench = pl.RunConfig.load(configs_dir / "phantom_benchmark.json")
    assert [(p[1], p[2]) for p in pl.make_plan(bench)] == [("C", "gt"), ("C", "rm")]


def test_loo_honours_exclusion():
    subjects = dict(SUBJECTS, A=dict(SUBJECTS["A"], exclude_from_test=True))
    cfg = pl.RunConfig(tiny_doc(subjects=subjects, crossval={"folds": "loo", "policies": ["gt"]}))
    assert [p[1] for p in pl.make_plan(cfg)] == ["B", "C"]


def test_plan_rejects_train_equals_test():
    cfg = pl.RunConfig(tiny_doc(crossval={"folds": [{"train": ["A", "C"], "test": "C"}]}))
    with pytest.raises(ConfigError, match="also in its training set"):
        pl.make_plan(cfg)


def test_predict_without_checkpoint(tmp_path):
    cfg = pl.RunConfig(tiny_doc())
    ws = pl.Workspace(tmp_path)
    with pytest.raises(PipelineError) as err:
        pl.cmd_predict(cfg, ws)
    assert err.value.stage == "train"


def test_resample_without_phantom(tmp_path):
    with pytest.raises(PipelineError, match="phantom"):
        pl.cmd_resample(pl.RunConfig(tiny_doc()), pl.Workspace(tmp_path))


def test_predict_volume_pads_odd_sizes():
    params = unet.build(unet.UNetSpec(depth=2, base_features=2))
    image = volio.Volume(np.zeros((2, 13, 18), np.int16))
    probs = pl.predict_volume(params, image, (-100, 500))
    assert probs.shape == (2, 2, 13, 18)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_run_all_writes_every_artifact(tmp_path):
    cfg = pl.RunConfig(tiny_doc())
    ws = pl.Workspace(tmp_path)
    report = pl.run_all(cfg, ws)
    for p in [ws.subject_raw("A") / "image" / "meta.json", ws.resampled("C") / "mask" / "voxels.raw",
              ws.manifest, ws.checkpoint, ws.loss_csv, ws.probs("C") / "meta.json",
              ws.mask("C") / "meta.json", ws.mesh("C", "stl"), ws.mesh("C", "obj"), ws.metrics,
              tmp_path / "timings.json", tmp_path / "config.resolved.json"]:
        assert p.exists(), p
    man = json.loads(ws.manifest.read_text())
    assert man["factor"] == 2 * 4  # 2 gray maps x (80-64)/16+1 = 2 windows per side
    assert len(man["samples"]) == 8 * 8
    assert 0.0 <= report["dsc"]["mean"] <= 1.0 or np.isnan(report["dsc"]["mean"])
    assert json.loads(ws.metrics.read_text())["config_hash"] == cfg.hash()
    assert volio.read_bundle(ws.probs("C")).dtype_tag == "f32"


def test_rm_manifest_factor(tmp_path):
    cfg = pl.RunConfig(tiny_doc())
    ws = pl.Workspace(tmp_path)
    pl.cmd_phantom(cfg, ws)
    pl.cmd_resample(cfg, ws)
    assert pl.cmd_augment(cfg, ws, kind="rm") == 8 * 8
    assert json.loads(ws.manifest.read_text())["factor"] == 8


def test_crossval_is_deterministic(tmp_path):
    cfg = pl.RunConfig(tiny_doc())
    a = pl.cmd_crossval(cfg, pl.Workspace(tmp_path / "a"))
    pl.cmd_crossval(cfg, pl.Workspace(tmp_path / "b"))
    ma = (tmp_path / "a" / "crossval" / "metrics.json").read_bytes()
    mb = (tmp_path / "b" / "crossval" / "metrics.json").read_bytes()
    assert ma == mb
    assert [r["policy"] for r in a["rows"]] == ["gt", "rm"]
    assert set(a["pooled"]) == {"gt/custom", "rm/custom"}
    table = (tmp_path / "a" / "crossval" / "summary.txt").read_text()
    assert "G.&T." in table and "R.&M." in table
    assert "total" in json.loads((tmp_path / "a" / "crossval" / "timings.json").read_text())


def test_external_bundle_subjects(tmp_path):
    image, mask = volio.make_phantom(volio.PhantomSpec(n_slices=3, spacing_mm=(0.8, 0.8, 1.5)))
    volio.write_bundle(image, tmp_path / "data" / "img")
    volio.write_bundle(mask, tmp_path / "data" / "msk")
    doc = tiny_doc(subjects=dict(SUBJECTS, D={"bundle": {"image": "data/img", "mask": "data/msk"}}))
    (tmp_path / "run.json").write_text(json.dumps(doc))
    cfg = pl.RunConfig.load(tmp_path / "run.json")
    ws = pl.Workspace(tmp_path / "out")
    pl.cmd_phantom(cfg, ws)
    pl.cmd_resample(cfg, ws)
    out = volio.read_bundle(ws.resampled("D") / "image")
    assert out.spacing == (0.645, 0.645, 1.5)
    assert out.data.shape[1] == int(np.floor(79 * 0.8 / 0.645 + 1e-9)) + 1
    with pytest.raises(ConfigError, match="does not exist"):
        pl.RunConfig(dict(doc, subjects={"D": {"bundle": {"image": "nope", "mask": "nope"}}}), tmp_path)


def test_stages_are_idempotent(tmp_path):
    cfg = pl.RunConfig(tiny_doc())
    ws = pl.Workspace(tmp_path)
    pl.run_all(cfg, ws)
    files = ["subjects/A/image/voxels.raw", "resampled/C/image/voxels.raw", "augment/manifest.json",
             "train/model.unet", "predict/C/prob/voxels.raw", "postprocess/C/mask/voxels.raw",
             "reconstruct/C.stl", "evaluate/metrics.json"]
    first = {f: (tmp_path / f).read_bytes() for f in files}
    pl.run_all(cfg, ws)
    assert all((tmp_path / f).read_bytes() == first[f] for f in files)

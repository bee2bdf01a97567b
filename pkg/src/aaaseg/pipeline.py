"""Staged workflow: phantom -> resample -> augment -> train -> predict ->
postprocess -> reconstruct -> evaluate, plus the cross-validation runner.

Every stage reads and writes files under one output directory, so stages can
be rerun independently. A single JSON config drives all of them; defaults
below carry the published training and augmentation settings and the
desk-scale phantom configs override what they need.
"""
import copy
import hashlib
import json
import logging
import time
import zlib
from pathlib import Path

import numpy as np

from . import augment, evalkit, optim, postrecon, unet, volio
from .errors import ConfigError, PipelineError

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "subjects": {},
    "train_subjects": [],
    "test_subject": None,
    "resample": {"target_spacing_mm": [volio.UNIFIED_SPACING_MM, volio.UNIFIED_SPACING_MM]},
    "normalize": {"lo": volio.DEFAULT_WINDOW[0], "hi": volio.DEFAULT_WINDOW[1]},
    "model": {"preset": "u34"},
    "optimizer": {
        "kind": "sgd",
        "sgd": {"lr": 0.1, "momentum": 0.9, "window": 1000, "patience": 3, "threshold": 1e-4,
                "factor": 0.1, "min_lr": 1e-5},
        "adam": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    },
    "augment": {"kind": "gt", "n_gray": 8, "a_range": [0.8, 1.2], "b_range": [-100.0, 100.0],
                "window": 512, "stride": 64},
    "train": {"max_iterations": 110_000, "loss_log_interval": 1, "checkpoint_interval": 0},
    "postprocess": {"min_size": 64},
    "evaluate": {"bins": 20, "pixel_mm": volio.UNIFIED_SPACING_MM, "icp_max_iter": 50, "icp_tol": 1e-6},
    "crossval": {"folds": "loo", "policies": ["gt", "rm"], "presets": None},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "subjects":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def derive_seed(master, name):
    """Stable per-purpose seed derived from the master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


class RunConfig:
    """Resolved configuration (defaults merged with the user document)."""

    def __init__(self, doc=None, base_dir="."):
        self.base_dir = Path(base_dir)
        self.data = _merge(DEFAULTS, doc or {})
        self.validate()

    @classmethod
    def load(cls, path, seed=None):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if seed is not None:
            doc["seed"] = int(seed)
        return cls(doc, base_dir=path.parent)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    def hash(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, **over):
        return RunConfig(_merge(self.data, over), self.base_dir)

    def model_spec(self, preset=None):
        m = dict(self.data["model"])
        if preset is not None:
            m = {"preset": preset}
        name = m.get("preset")
        if name and name != "custom":
            if name not in unet.PRESETS:
                raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(unet.PRESETS)} or 'custom'")
            return unet.PRESETS[name]
        try:
            return unet.UNetSpec(int(m["depth"]), int(m["base_features"]),
                                 feature_cap=int(m.get("feature_cap", 1024)))
        except KeyError as exc:
            raise ConfigError(f"custom model needs {exc.args[0]!r}") from exc

    def policy(self, kind=None):
        a = self.data["augment"]
        return augment.AugPolicy(kind=kind or a["kind"], n_gray=int(a["n_gray"]), a_range=tuple(a["a_range"]),
                                 b_range=tuple(a["b_range"]), window=int(a["window"]), stride=int(a["stride"]),
                                 seed=derive_seed(self.seed, "augment"))

    def optimizer_state(self):
        o = self.data["optimizer"]
        if o["kind"] == "sgd":
            return optim.SgdState(**o["sgd"])
        if o["kind"] == "adam":
            return optim.AdamState(**o["adam"])
        raise ConfigError(f"unknown optimizer {o['kind']!r}")

    def validate(self):
        d = self.data
        subjects = d["subjects"]
        for sid, s in subjects.items():
            if "phantom" in s:
                volio.PhantomSpec.from_dict(s["phantom"])
            elif "bundle" in s:
                for key in ("image", "mask"):
                    p = self.base_dir / s["bundle"][key]
                    if not p.exists():
                        raise ConfigError(f"subject {sid}: {key} bundle {p} does not exist")
            else:
                raise ConfigError(f"subject {sid} needs a 'phantom' or 'bundle' entry")
        for sid in list(d["train_subjects"]) + ([d["test_subject"]] if d["test_subject"] else []):
            if sid not in subjects:
                raise ConfigError(f"unknown subject {sid!r}")
        if d["test_subject"] and d["test_subject"] in d["train_subjects"]:
            raise ConfigError(f"test subject {d['test_subject']!r} is also a training subject")
        if d["optimizer"]["kind"] not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {d['optimizer']['kind']!r}")
        spec = self.model_spec()
        policy = self.policy()
        try:
            spec.check_input(policy.window, policy.window)
        except Exception as exc:
            raise ConfigError(f"augmentation window {policy.window} does not fit the model: {exc}") from exc
        optim.TrainLoopConfig(max_iterations=int(d["train"]["max_iterations"]))
        if d["normalize"]["lo"] >= d["normalize"]["hi"]:
            raise ConfigError("normalize.lo must be below normalize.hi")


class Workspace:
    """Paths of every stage artifact under one output directory."""

    def __init__(self, root, shared=None):
        self.root = Path(root)
        self.shared = Path(shared) if shared else self.root

    def subject_raw(self, sid):
        return self.shared / "subjects" / sid

    def resampled(self, sid):
        return self.shared / "resampled" / sid

    @property
    def manifest(self):
        return self.root / "augment" / "manifest.json"

    @property
    def checkpoint(self):
        return self.root / "train" / "model.unet"

    @property
    def loss_csv(self):
        return self.root / "train" / "loss.csv"

    def probs(self, sid):
        return self.root / "predict" / sid / "prob"

    def mask(self, sid):
        return self.root / "postprocess" / sid / "mask"

    def mesh(self, sid, ext):
        return self.root / "reconstruct" / f"{sid}.{ext}"

    @property
    def metrics(self):
        return self.root / "evaluate" / "metrics.json"


def _require(path, stage):
    if not Path(path).exists():
        raise PipelineError(stage, str(path))


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _echo_config(cfg, ws):
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.resolved.json").write_text(cfg.to_json() + "\n")


def _timed(ws, name, started):
    path = ws.root / "timings.json"
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[name] = round(time.perf_counter() - started, 3)
    _write_json(path, timings)


# -- stages --------------------------------------------------------------------

def cmd_phantom(cfg, ws):
    """Write image/mask bundles for every phantom subject."""
    t0 = time.perf_counter()
    _echo_config(cfg, ws)
    for sid, s in cfg["subjects"].items():
        if "phantom" not in s:
            continue
        image, mask = volio.make_phantom(volio.PhantomSpec.from_dict(s["phantom"]))
        volio.write_bundle(image, ws.subject_raw(sid) / "image")
        volio.write_bundle(mask, ws.subject_raw(sid) / "mask")
    _timed(ws, "phantom", t0)


def _source_bundles(cfg, ws, sid):
    s = cfg["subjects"][sid]
    if "bundle" in s:
        return cfg.base_dir / s["bundle"]["image"], cfg.base_dir / s["bundle"]["mask"]
    return ws.subject_raw(sid) / "image", ws.subject_raw(sid) / "mask"


def cmd_resample(cfg, ws):
    """Bring every subject to the unified in-plane spacing."""
    t0 = time.perf_counter()
    target = cfg["resample"]["target_spacing_mm"]
    for sid in cfg["subjects"]:
        img_p, msk_p = _source_bundles(cfg, ws, sid)
        _require(img_p, "phantom")
        _require(msk_p, "phantom")
        volio.write_bundle(volio.resample_xy(volio.read_bundle(img_p), target), ws.resampled(sid) / "image")
        volio.write_bundle(volio.resample_xy(volio.read_bundle(msk_p), target), ws.resampled(sid) / "mask")
    _timed(ws, "resample", t0)


def _load_resampled(ws, sids):
    vols = {}
    for sid in sids:
        _require(ws.resampled(sid) / "image", "resample")
        _require(ws.resampled(sid) / "mask", "resample")
        vols[sid] = (volio.read_bundle(ws.resampled(sid) / "image"), volio.read_bundle(ws.resampled(sid) / "mask"))
    return vols


def cmd_augment(cfg, ws, kind=None):
    """Enumerate the augmented training samples into a manifest."""
    t0 = time.perf_counter()
    _echo_config(cfg, ws)
    train_ids = list(cfg["train_subjects"])
    if not train_ids:
        raise ConfigError("train_subjects is empty")
    vols = _load_resampled(ws, train_ids)
    policy = cfg.policy(kind)
    refs = augment.build_refs(vols, policy, train_ids)
    n_slices = sum(v[0].data.shape[0] for v in vols.values())
    _write_json(ws.manifest, {
        "policy": {"kind": policy.kind, "n_gray": policy.n_gray, "a_range": list(policy.a_range),
                   "b_range": list(policy.b_range), "window": policy.window, "stride": policy.stride,
                   "seed": policy.seed},
        "subjects": train_ids,
        "n_source_slices": n_slices,
        "factor": len(refs) / max(n_slices, 1),
        "samples": [list(r) for r in refs],
    })
    _timed(ws, "augment", t0)
    return len(refs)


def load_dataset(cfg, ws):
    _require(ws.manifest, "augment")
    man = json.loads(ws.manifest.read_text())
    vols = _load_resampled(ws, man["subjects"])
    refs = [tuple(r) for r in man["samples"]]
    norm = (cfg["normalize"]["lo"], cfg["normalize"]["hi"])
    return augment.AugmentedDataset(vols, refs, man["policy"]["window"], norm)


def cmd_train(cfg, ws, preset=None):
    t0 = time.perf_counter()
    dataset = load_dataset(cfg, ws)
    spec = cfg.model_spec(preset)
    params = unet.build(spec, seed=derive_seed(cfg.seed, "init"))
    tc = cfg["train"]
    loop = optim.TrainLoopConfig(max_iterations=int(tc["max_iterations"]),
                                 loss_log_interval=int(tc["loss_log_interval"]),
                                 checkpoint_interval=int(tc["checkpoint_interval"]),
                                 checkpoint_dir=str(ws.root / "train" / "checkpoints"),
                                 seed=derive_seed(cfg.seed, "train"))
    params, trace = optim.train(params, dataset, cfg.optimizer_state(), loop)
    ws.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    unet.save(params, ws.checkpoint)
    trace.write_csv(ws.loss_csv)
    _timed(ws, "train", t0)
    return trace


def predict_volume(params, image, norm):
    """Foreground probability for every z-slice of an intensity volume.

    Slices are edge-padded up to a multiple of ``2**depth`` and cropped back.
    """
    m = 2 ** params.spec.depth
    nz, ny, nx = image.data.shape
    py, px = (-ny) % m, (-nx) % m
    out = np.empty((nz, 2, ny, nx), dtype=np.float32)
    for k in range(nz):
        x = volio.normalize_intensity(image.data[k], *norm)
        x = np.pad(x, ((0, py), (0, px)), mode="edge")
        out[k] = unet.forward(params, x[None, None])[0, :, :ny, :nx]
    return out


def cmd_predict(cfg, ws):
    t0 = time.perf_counter()
    sid = cfg["test_subject"]
    if not sid:
        raise ConfigError("test_subject is not set")
    _require(ws.checkpoint, "train")
    params = unet.load(ws.checkpoint)
    image = _load_resampled(ws, [sid])[sid][0]
    probs = predict_volume(params, image, (cfg["normalize"]["lo"], cfg["normalize"]["hi"]))
    volio.write_bundle(volio.Volume(probs[:, 1].astype("<f4"), image.spacing), ws.probs(sid))
    _timed(ws, "predict", t0)


def cmd_postprocess(cfg, ws):
    t0 = time.perf_counter()
    sid = cfg["test_subject"]
    _require(ws.probs(sid), "predict")
    fg = volio.read_bundle(ws.probs(sid))
    probs = np.stack([1.0 - fg.data, fg.data], axis=1)
    raw = postrecon.argmax_mask(probs, fg.spacing)
    clean, empty = postrecon.largest_component(raw, int(cfg["postprocess"]["min_size"]))
    volio.write_bundle(clean, ws.mask(sid))
    _write_json(ws.mask(sid).parent / "postprocess.json",
                {"empty": empty, "raw_voxels": int(raw.data.sum()), "kept_voxels": int(clean.data.sum())})
    _timed(ws, "postprocess", t0)


def cmd_reconstruct(cfg, ws):
    t0 = time.perf_counter()
    sid = cfg["test_subject"]
    _require(ws.mask(sid), "postprocess")
    mesh = postrecon.marching_cubes(volio.read_bundle(ws.mask(sid)))
    ws.mesh(sid, "stl").parent.mkdir(parents=True, exist_ok=True)
    postrecon.write_stl(mesh, ws.mesh(sid, "stl"))
    postrecon.write_obj(mesh, ws.mesh(sid, "obj"))
    _timed(ws, "reconstruct", t0)


def evaluate_subject(cfg, ws, sid):
    """DSC of the cleaned mask plus ICP-aligned cloud-to-mesh statistics.

    The cloud is the vertex set of the reconstructed mesh; the reference
    surface is marching cubes of the ground-truth mask.
    """
    _require(ws.mask(sid), "postprocess")
    _require(ws.mesh(sid, "obj"), "reconstruct")
    pred = volio.read_bundle(ws.mask(sid))
    gt = _load_resampled(ws, [sid])[sid][1]
    report = {"subject": sid, "dsc": evalkit.dsc_volume(pred, gt).to_dict()}
    ev = cfg["evaluate"]
    cloud = postrecon.read_obj(ws.mesh(sid, "obj"))
    ref = postrecon.marching_cubes(gt)
    if cloud.is_empty or ref.is_empty or len(cloud.vertices) < 3:
        report.update(c2m=None, transform=None, empty=True)
        return report
    index = evalkit.MeshIndex(ref)
    try:
        t = evalkit.icp_align(cloud.vertices, ref, max_iter=int(ev["icp_max_iter"]),
                              tol=float(ev["icp_tol"]), index=index)
    except evalkit.DegeneracyError:
        report.update(c2m=None, transform=None, empty=True)
        return report
    c2m = evalkit.c2m_distances(cloud.vertices, ref, t, bins=int(ev["bins"]),
                                pixel_mm=float(ev["pixel_mm"]), index=index)
    report.update(c2m=c2m.to_dict(), transform=t.to_dict(), empty=False)
    return report


def cmd_evaluate(cfg, ws):
    t0 = time.perf_counter()
    sid = cfg["test_subject"]
    report = evaluate_subject(cfg, ws, sid)
    report.update(config_hash=cfg.hash(), seed=cfg.seed)
    _write_json(ws.metrics, report)
    _timed(ws, "evaluate", t0)
    return report


def run_all(cfg, ws, kind=None, preset=None, shared_ready=False):
    """Every stage in order for the configured train/test split."""
    if not shared_ready:
        cmd_phantom(cfg, ws)
        cmd_resample(cfg, ws)
    _echo_config(cfg, ws)
    cmd_augment(cfg, ws, kind)
    cmd_train(cfg, ws, preset)
    cmd_predict(cfg, ws)
    cmd_postprocess(cfg, ws)
    cmd_reconstruct(cfg, ws)
    return cmd_evaluate(cfg, ws)


# -- cross-validation ------------------------------------------------------------

def make_plan(cfg):
    """Folds as (train ids, test id, policy, preset) tuples.

    ``crossval.folds`` is either ``"loo"`` (each subject not flagged
    ``exclude_from_test`` is tested once against all others) or an explicit
    list of ``{"train": [...], "test": id}``.
    """
    cv = cfg["crossval"]
    subjects = cfg["subjects"]
    if cv["folds"] == "loo":
        folds = [(sorted(s for s in subjects if s != t), t) for t in sorted(subjects)
                 if not subjects[t].get("exclude_from_test", False)]
    else:
        folds = [(list(f["train"]), f["test"]) for f in cv["folds"]]
    presets = cv["presets"] or [cfg["model"].get("preset", "custom")]
    plan = []
    for train_ids, test in folds:
        if test in train_ids:
            raise ConfigError(f"fold tests on {test!r}, which is also in its training set {train_ids}")
        if not train_ids:
            raise ConfigError(f"fold testing {test!r} has no training subjects")
        for sid in train_ids + [test]:
            if sid not in subjects:
                raise ConfigError(f"fold references unknown subject {sid!r}")
        for policy in cv["policies"]:
            for preset in presets:
                plan.append((list(train_ids), test, policy, preset))
    return plan


def cmd_crossval(cfg, ws):
    """Run every planned fold end to end and write a Table-1 style summary.

    ``crossval/metrics.json`` is the deterministic manifest; wall-clock
    timings go to a separate ``timings.json``.
    """
    t0 = time.perf_counter()
    plan = make_plan(cfg)
    _echo_config(cfg, ws)
    cmd_phantom(cfg, ws)
    cmd_resample(cfg, ws)
    rows = []
    timings = {}
    for train_ids, test, policy, preset in plan:
        name = f"{'+'.join(train_ids)}_to_{test}_{policy}_{preset}"
        fold_cfg = cfg.with_overrides(train_subjects=train_ids, test_subject=test,
                                      augment={"kind": policy},
                                      model=({"preset": preset} if preset != "custom" else cfg["model"]))
        fold_ws = Workspace(ws.root / "crossval" / name, shared=ws.shared)
        f0 = time.perf_counter()
        report = run_all(fold_cfg, fold_ws, shared_ready=True)
        timings[name] = round(time.perf_counter() - f0, 3)
        spec = fold_cfg.model_spec()
        rows.append({"fold": name, "train": train_ids, "test": test, "policy": policy, "preset": preset,
                     "layers": spec.counted_layers, "config_hash": fold_cfg.hash(),
                     "dsc": report["dsc"], "c2m": report["c2m"]})
    pooled = {}
    for r in rows:
        pooled.setdefault(f"{r['policy']}/{r['preset']}", []).extend(r["dsc"]["per_slice"])
    pooled = {k: dict(zip(("mean", "std"), evalkit.summarize(v)), n_slices=len(v)) for k, v in pooled.items()}
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "rows": rows, "pooled": pooled}
    _write_json(ws.root / "crossval" / "metrics.json", manifest)
    (ws.root / "crossval" / "summary.txt").write_text(format_table(rows))
    timings["total"] = round(time.perf_counter() - t0, 3)
    _write_json(ws.root / "crossval" / "timings.json", timings)
    return manifest


def format_table(rows):
    lines = [f"{'Row':>3}  {'Train':<10} {'Test':<5} {'Augment':<8} {'Layers':>6}  DSC avg+-std"]
    names = {"gt": "G.&T.", "rm": "R.&M."}
    for i, r in enumerate(rows, 1):
        d = r["dsc"]
        lines.append(f"{i:>3}  {','.join(r['train']):<10} {r['test']:<5} {names.get(r['policy'], r['policy']):<8} "
                     f"{r['layers']:>6}  {d['mean']:.3f}+-{d['std']:.3f}")
    return "\n".join(lines) + "\n"

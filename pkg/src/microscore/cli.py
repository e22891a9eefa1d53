"""Command-line front end: train, monitor, diagnose, simulate, power-study.

Every run resolves one JSON config (defaults < config file < flags), writes
its artifacts into an output directory, and records ``metadata.json`` with
the resolved config and its hash. Passing that metadata file back through
``--config`` reproduces the run's CSV outputs byte for byte.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, kernels
from .charts import (
    calibrate,
    calibration_from_json,
    calibration_to_json,
    monitor_images,
    score_images,
)
from .diagnostics import (
    diagnose,
    estimate_k_hint,
    label_agreement,
    pca_top3,
    segmentation_accuracy,
)
from .image import (
    NeighborhoodSpec,
    export_dataset_csv,
    extract_dataset,
    load_micrograph,
    save_png16,
    split_reference,
    standardize,
)
from .model import (
    ModelFamily,
    TrainOptions,
    cross_validate_lambda,
    model_from_json,
    model_to_json,
    train,
)
from .rng import derive_seed
from .scores import compute_scores, training_reference_stats
from .simulate import (
    CHARTS,
    ArSpec,
    GammaSweep,
    generate,
    preset_spec,
    paste_quadrant,
    power_study,
    power_table_csv,
    summary_json,
)
from .smoothing import build_kernel

log = logging.getLogger("microscore")

SCHEMA_VERSION = 1
RUN_FORMAT = "microscore.run"
COMMANDS = ("train", "monitor", "diagnose", "simulate", "power-study")
# overlay opacity of the label colors on the grayscale micrograph
OVERLAY_ALPHA = 0.4

_COMMON = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": None,
    "backend": None,
}

DEFAULTS = {
    "train": {
        "window": {"shape": "non-causal", "length_scale": 5},
        "kernel": {"l_w": 30, "sigma_w": None},
        "model": {"kind": "linear", "hidden_nodes": 10, "activation": "tanh", "lambda": 0.01,
                  "lambda_grid": None, "folds": 5, "epochs": 100, "batch_size": 64,
                  "step_size": 0.01, "polish": False},
        "alpha_target": 0.01,
        "train_images": [],
        "cl_images": [],
        "cl_fraction": 0.8,
        "split_granularity": "by-image",
        "export_dataset": False,
    },
    "monitor": {
        "model_file": None,
        "calibration_file": None,
        "images": [],
        "window": None,
        "heatmaps": True,
    },
    "diagnose": {
        "window": {"shape": "non-causal", "length_scale": 5},
        "kernel": {"l_w": 20, "sigma_w": None},
        "model": {"kind": "linear", "hidden_nodes": 10, "activation": "tanh", "lambda": 0.01,
                  "epochs": 100, "batch_size": 64, "step_size": 0.01, "polish": False},
        "images": [],
        "k": None,
        "hint_mode": False,
        "n_seeds": 10,
        "cluster_space": "full",
        "mask": None,
    },
    "simulate": {
        "ar": {"preset": "a", "which": 0},
        "ar_b": None,
        "layout": "single",
        "height": 256,
        "width": 256,
        "name": "simulated",
    },
    "power-study": {
        "sweep": {"preset": "a"},
        "window": {"shape": "non-causal", "length_scale": 5},
        "kernel": {"l_w": 30, "sigma_w": None},
        "model": {"kind": "linear", "hidden_nodes": 10, "activation": "tanh", "lambda": 0.01,
                  "epochs": 100, "batch_size": 64, "step_size": 0.01, "polish": False},
    },
}

# keys holding input file paths, resolved against the config file's directory
_PATH_KEYS = ("train_images", "cl_images", "images", "model_file", "calibration_file", "mask")


class CliError(Exception):
    """Operational failure reported as a machine-readable record."""


# ---------------------------------------------------------------- config


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def config_hash(cfg) -> str:
    text = json.dumps(_hashable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _hashable(cfg):
    # the output location does not change what a run computes
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def _resolve_paths(cfg, base: Path):
    for key in _PATH_KEYS:
        v = cfg.get(key)
        if isinstance(v, str):
            cfg[key] = str((base / v).resolve())
        elif isinstance(v, list):
            cfg[key] = [str((base / p).resolve()) for p in v]
    return cfg


def load_config(command: str, path: str | None):
    """(config dict, was-metadata) from a run config or a previous run's metadata."""
    cfg = copy.deepcopy(_COMMON)
    cfg = _merge(cfg, DEFAULTS[command])
    if path is None:
        return cfg, False
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid config: {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"invalid config: {path} is not a JSON object")
    if doc.get("format") == RUN_FORMAT:
        if doc.get("command") != command:
            raise CliError(f"config mismatch: metadata is for {doc.get('command')!r}, "
                           f"not {command!r}")
        return _merge(cfg, doc["config"]), True
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise CliError(f"config mismatch: unsupported schema_version {doc['schema_version']}")
    if "command" in doc and doc.pop("command") != command:
        raise CliError(f"config mismatch: config is not for {command!r}")
    cfg = _merge(cfg, doc)
    return _resolve_paths(cfg, p.parent), False


def apply_overrides(cfg, args):
    flag_map = {
        "seed": "seed", "out": "output_dir", "backend": "backend", "l_s": "window.length_scale",
        "l_w": "kernel.l_w", "sigma_w": "kernel.sigma_w", "lam": "model.lambda",
        "model_kind": "model.kind", "alpha": "alpha_target", "k": "k",
        "model_file": "model_file", "calibration_file": "calibration_file",
    }
    for attr, dotted in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            _set_path(cfg, dotted, v)
    for attr in ("images", "train_images", "cl_images"):
        v = getattr(args, attr, None)
        if v:
            cfg[attr] = [str(Path(p).resolve()) for p in v]
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(f"bad --set {item!r}: expected key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, key, value)
    for key in ("model_file", "calibration_file", "mask"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


# ---------------------------------------------------------------- helpers


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _family(mc) -> ModelFamily:
    if mc["kind"] == "linear":
        return ModelFamily("linear")
    kind = "mlp" if mc["kind"] in ("mlp", "mlp-1-hidden") else mc["kind"]
    return ModelFamily(kind, int(mc.get("hidden_nodes", 10)), mc.get("activation", "tanh"))


def _train_opts(mc, seed) -> TrainOptions:
    return TrainOptions(epochs=int(mc.get("epochs", 100)), batch_size=int(mc.get("batch_size", 64)),
                        step_size=float(mc.get("step_size", 0.01)), seed=int(seed),
                        polish=bool(mc.get("polish", False)))


def _window(cfg) -> NeighborhoodSpec:
    w = cfg["window"]
    return NeighborhoodSpec(w["shape"], int(w["length_scale"]))


def _kernel(cfg):
    k = cfg["kernel"]
    return build_kernel(int(k["l_w"]), k.get("sigma_w"))


def _load_all(paths, what):
    if not paths:
        raise CliError(f"missing input: no {what} given")
    return [load_micrograph(p) for p in paths]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name) or "image"


# Diverging blue-white-red table for heatmaps.
_CMAP = np.array([[0.23, 0.30, 0.75], [0.55, 0.69, 0.99], [0.87, 0.87, 0.87],
                  [0.96, 0.60, 0.48], [0.71, 0.02, 0.15]])
_LABEL_COLORS = np.array([[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25],
                          [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]],
                         dtype=np.float64)


def heatmap_rgb(values, lo, hi) -> np.ndarray:
    """uint8 RGB image of a scalar grid on the fixed scale [lo, hi]."""
    span = hi - lo if hi > lo else 1.0
    t = np.clip((np.asarray(values, dtype=np.float64) - lo) / span, 0.0, 1.0)
    pos = np.linspace(0.0, 1.0, _CMAP.shape[0])
    rgb = np.stack([np.interp(t, pos, _CMAP[:, c]) for c in range(3)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def _label_rgb(labels) -> np.ndarray:
    return _LABEL_COLORS[np.asarray(labels) % len(_LABEL_COLORS)]


class Run:
    """Output directory, artifact registry and metadata for one command."""

    def __init__(self, command, cfg):
        if not cfg.get("output_dir"):
            raise CliError("missing output: set --out or output_dir")
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        self.extra = {}

    def path(self, name) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_text(self, name, text):
        self.path(name).write_text(text)

    def finish(self, seeds):
        cfg = self.cfg
        inputs = {}
        for key in _PATH_KEYS:
            v = cfg.get(key)
            for p in ([v] if isinstance(v, str) else v or []):
                inputs[p] = _sha256(p)
        meta = {
            "format": RUN_FORMAT,
            "version": SCHEMA_VERSION,
            "command": self.command,
            "package_version": __version__,
            "backend": kernels.BACKEND if cfg.get("backend") is None else cfg["backend"],
            "config": cfg,
            "config_hash": config_hash(cfg),
            "seeds": seeds,
            "inputs": inputs,
            "artifacts": {a: _sha256(self.out / a) for a in sorted(set(self.artifacts))},
        }
        meta.update(self.extra)
        (self.out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return meta


# ---------------------------------------------------------------- commands


def cmd_train(cfg):
    run = Run("train", cfg)
    spec, k = _window(cfg), _kernel(cfg)
    mc = cfg["model"]
    family = _family(mc)
    seed = int(cfg["seed"])
    model_seed = derive_seed(seed, "model") % (2 ** 31)
    opts = _train_opts(mc, model_seed)
    refs = [standardize(m) for m in _load_all(cfg["train_images"], "train_images")]
    if cfg["cl_images"]:
        train_ms = refs
        cl_ms = [standardize(m) for m in _load_all(cfg["cl_images"], "cl_images")]
        d_train = extract_dataset(train_ms, spec)
    else:
        d_all = extract_dataset(refs, spec)
        d_train, d_cl = split_reference(d_all, float(cfg["cl_fraction"]), cfg["split_granularity"])
        cl_ms = None
    lam = float(mc["lambda"])
    cv_table = None
    if mc.get("lambda_grid"):
        lam, cv_table = cross_validate_lambda(d_train, family, mc["lambda_grid"],
                                              int(mc.get("folds", 5)), opts, return_table=True)
    model = train(d_train, family, lam, opts)
    sf_train = compute_scores(model, d_train)
    ref = training_reference_stats(sf_train)
    if cl_ms is not None:
        cl_fields = score_images(model, cl_ms, spec)
    else:
        cl_fields = [compute_scores(model, d_cl)]
    cal = calibrate(cl_fields, k, float(cfg["alpha_target"]), ref, spec, backend=cfg["backend"])
    run.write_text("model.json", model_to_json(model))
    run.write_text("calibration.json", calibration_to_json(cal))
    sd = np.std(sf_train.s_theta, axis=0, ddof=1)
    mean = sf_train.s_theta.mean(axis=0)
    ratio = np.where(sd > 0, np.abs(mean) / np.where(sd > 0, sd, 1.0), 0.0)
    report = {
        "selected_lambda": lam,
        "cv_table": None if cv_table is None else [[g, e] for g, e in sorted(cv_table.items())],
        "score_mean_norm": float(np.linalg.norm(mean)),
        "score_mean_max_ratio": float(ratio.max()),
        "sigma_score_mean": float(sf_train.s_sigma.mean()),
        "sigma_hat": model.sigma_hat,
        "n_train": len(d_train),
        "n_cl": cal.n_cl,
        "achieved_alpha": cal.achieved_alpha,
        "alpha_component": cal.alpha_component,
        "model_meta": model.meta,
    }
    run.write_text("train_report.json", json.dumps(report, indent=1, sort_keys=True))
    if cfg.get("export_dataset"):
        export_dataset_csv(d_train, run.path("train_dataset.csv"))
    run.extra["achieved_alpha"] = cal.achieved_alpha
    print(f"selected lambda {lam:g}; achieved CL false-alarm rate {cal.achieved_alpha:.5f}")
    return run.finish({"seed": seed, "model": model_seed})


_STATS = ("T2_theta", "z_sigma", "C_theta", "C_sigma", "C_M", "rwma")


def cmd_monitor(cfg):
    run = Run("monitor", cfg)
    for key in ("model_file", "calibration_file"):
        if not cfg.get(key):
            raise CliError(f"missing input: {key}")
        if not Path(cfg[key]).is_file():
            raise FileNotFoundError(f"file not found: {cfg[key]}")
    model = model_from_json(Path(cfg["model_file"]).read_text())
    cal = calibration_from_json(Path(cfg["calibration_file"]).read_text())
    spec = None
    if cfg.get("window"):
        spec = NeighborhoodSpec(cfg["window"]["shape"], int(cfg["window"]["length_scale"]))
    ms = _load_all(cfg["images"], "images")
    results = monitor_images(ms, model, cal, spec, backend=cfg["backend"])
    names = []
    summary_rows = []
    for m, r in zip(ms, results):
        name = _safe(m.id)
        while name in names:
            name += "_"
        names.append(name)
        stats = r.statistics()
        rows = []
        nr, nc = r.shape
        for i in range(nr):
            for j in range(nc):
                rows.append([r.top + i, r.left + j] + [_fmt(stats[s][i, j]) for s in _STATS]
                            + [int(r.signals[c][i, j]) for c in CHARTS])
        _write_csv(run.path(f"charts_{name}.csv"),
                   ["r", "c"] + list(_STATS) + [f"signal_{c}" for c in CHARTS], rows)
        for c in CHARTS:
            summary_rows.append([m.id, c, _fmt(r.power[c]), int(r.signals[c].sum()), nr * nc])
    _write_csv(run.path("summary.csv"), ["image", "chart", "power", "signal_pixels", "n_pixels"],
               summary_rows)
    scales = {}
    if cfg.get("heatmaps", True):
        for s in _STATS:
            lo = min(float(r.statistics()[s].min()) for r in results)
            hi = max(float(r.statistics()[s].max()) for r in results)
            if s.startswith("C_"):
                # symmetric about 0 so the +-1 signal boundaries share one color
                hi = max(abs(lo), abs(hi), 1.0)
                lo = -hi
            scales[s] = [lo, hi]
            for name, r in zip(names, results):
                Image.fromarray(heatmap_rgb(r.statistics()[s], lo, hi), "RGB").save(
                    run.path(f"heatmap_{name}_{s}.png"))
    run.extra["color_scales"] = scales
    for row in summary_rows:
        print(f"{row[0]} {row[1]}: power {float(row[2]):.4f} ({row[3]}/{row[4]} pixels)")
    return run.finish({"seed": int(cfg["seed"])})


def cmd_diagnose(cfg):
    run = Run("diagnose", cfg)
    spec, kw = _window(cfg), _kernel(cfg)
    mc = cfg["model"]
    seed = int(cfg["seed"])
    model_seed = derive_seed(seed, "model") % (2 ** 31)
    ms = [standardize(m) for m in _load_all(cfg["images"], "images")]
    n_seeds = int(cfg["n_seeds"])
    if n_seeds < 1:
        raise CliError("config mismatch: n_seeds must be >= 1")
    seeds = [derive_seed(seed, "cluster", i) % (2 ** 31) for i in range(n_seeds)]
    k = cfg.get("k")
    hint = None
    if k is None and not cfg.get("hint_mode"):
        raise CliError("missing input: give k or set hint_mode")
    if cfg.get("hint_mode"):
        # a k=1 pass yields the smoothed fields needed for the hint
        probe = diagnose(ms, spec, kw, 1, _family(mc), float(mc["lambda"]), seeds=seeds[:1],
                         cluster_space="full", train_opts=_train_opts(mc, model_seed),
                         backend=cfg["backend"])
        X = np.concatenate([z.reshape(-1, z.shape[2]) for z in probe.z_fields])
        hint, _ = estimate_k_hint(pca_top3(X))
        if k is None:
            k = hint
    k = int(k)
    dg = diagnose(ms, spec, kw, k, _family(mc), float(mc["lambda"]), seeds=seeds,
                  cluster_space=cfg["cluster_space"], train_opts=_train_opts(mc, model_seed),
                  backend=cfg["backend"])
    truth = load_micrograph(cfg["mask"]).pixels if cfg.get("mask") else None
    report = {"k": k, "k_hint": hint, "hint_advisory": True, "seeds": seeds, "images": []}
    best_seed = dg.best.seed
    names = []
    for idx, (m, z, origin) in enumerate(zip(ms, dg.z_fields, dg.origins)):
        name = _safe(m.id)
        while name in names:
            name += "_"
        names.append(name)
        lab = dg.labelings[best_seed][idx]
        nr, nc = lab.shape
        _write_csv(run.path(f"labels_{name}.csv"), ["r", "c", "label"],
                   [[origin[0] + i, origin[1] + j, int(lab[i, j])]
                    for i in range(nr) for j in range(nc)])
        gray = np.round(lab * (255.0 / max(k - 1, 1))).astype(np.uint8)
        Image.fromarray(gray, "L").save(run.path(f"labels_{name}.png"))
        px = m.pixels[origin[0]:origin[0] + nr, origin[1]:origin[1] + nc]
        lo, hi = float(px.min()), float(px.max())
        base = (px - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(px)
        over = (1 - OVERLAY_ALPHA) * base[:, :, None] + OVERLAY_ALPHA * _label_rgb(lab)
        Image.fromarray(np.round(over).astype(np.uint8), "RGB").save(
            run.path(f"overlay_{name}.png"))
        proj = pca_top3(z, origin)
        img_hint, rows = estimate_k_hint(proj)
        _write_csv(run.path(f"surface_{name}.csv"), ["r", "c", "height", "R", "G", "B"],
                   [[int(a), int(b), _fmt(h), _fmt(r_), _fmt(g), _fmt(b_)]
                    for a, b, h, r_, g, b_ in rows])
        Image.fromarray(np.round(proj.rgb.reshape(nr, nc, 3) * 255).astype(np.uint8), "RGB").save(
            run.path(f"pca_{name}.png"))
        entry = {"image": m.id, "origin": list(origin), "shape": [nr, nc], "k_hint": img_hint,
                 "explained_variance": [float(v) for v in proj.explained]}
        if truth is not None and len(ms) == 1:
            t = truth[origin[0]:origin[0] + nr, origin[1]:origin[1] + nc]
            t = (t > (truth.min() + truth.max()) / 2).astype(np.int64) if k == 2 else t.astype(int)
            entry["accuracy"] = segmentation_accuracy(lab, t, int(cfg["kernel"]["l_w"]))
        report["images"].append(entry)
    flat = {s: np.concatenate([g.ravel() for g in dg.labelings[s]]) for s in seeds}
    agree = [[label_agreement(flat[a], flat[b]) for b in seeds] for a in seeds]
    off = [agree[i][j] for i in range(len(seeds)) for j in range(len(seeds)) if i != j]
    stability = {"seeds": seeds, "pairwise_agreement": agree,
                 "min_pairwise": min(off) if off else 1.0, "selected_seed": best_seed}
    run.write_text("k_hint.json", json.dumps(report, indent=1, sort_keys=True))
    run.write_text("stability.json", json.dumps(stability, indent=1, sort_keys=True))
    print(f"k = {k}; advisory hint {hint}; min pairwise seed agreement {stability['min_pairwise']:.3f}")
    return run.finish({"seed": seed, "model": model_seed, "cluster": seeds})


def _ar_from_config(c, seed) -> ArSpec:
    c = dict(c)
    if "preset" in c:
        model = c.pop("preset")
        which = int(c.pop("which", 0))
        c.pop("seed", None)
        return preset_spec(model, which, seed=seed, **c)
    c["seed"] = seed
    return ArSpec.from_dict(c)


def cmd_simulate(cfg):
    run = Run("simulate", cfg)
    seed = int(cfg["seed"])
    h, w = int(cfg["height"]), int(cfg["width"])
    name = _safe(cfg["name"])
    seeds = {"seed": seed, "a": derive_seed(seed, "sim", "a")}
    spec_a = _ar_from_config(cfg["ar"], seeds["a"])
    side = {"layout": cfg["layout"], "ar": spec_a.to_dict()}
    if cfg["layout"] == "single":
        m = generate(spec_a, h, w, id=name, backend=cfg["backend"])
        mask = None
    elif cfg["layout"] == "pasted":
        if not cfg.get("ar_b"):
            raise CliError("missing input: pasted layout needs ar_b")
        seeds["b"] = derive_seed(seed, "sim", "b")
        spec_b = _ar_from_config(cfg["ar_b"], seeds["b"])
        side["ar_b"] = spec_b.to_dict()
        m, mask = paste_quadrant(spec_a, spec_b, h, w, id=name, backend=cfg["backend"])
    else:
        raise CliError(f"config mismatch: unknown layout {cfg['layout']!r}")
    lo, hi = save_png16(m, run.path(f"{name}.png"))
    side.update({"height": h, "width": w, "png_min": lo, "png_max": hi,
                 "pixel_mean": float(m.pixels.mean()), "pixel_std": float(m.pixels.std()),
                 "package_version": __version__})
    if mask is not None:
        Image.fromarray((mask * 255).astype(np.uint8), "L").save(run.path(f"{name}_mask.png"))
        side["mask"] = f"{name}_mask.png"
        side["mask_convention"] = "0 (black) = ar quadrant, 255 = ar_b"
    run.write_text(f"{name}.json", json.dumps(side, indent=1, sort_keys=True))
    print(f"wrote {run.out / (name + '.png')}")
    return run.finish(seeds)


def _sweep_from_config(c, seed) -> GammaSweep:
    c = dict(c)
    c["seed"] = seed
    if "gammas" in c:
        c["gammas"] = tuple(c["gammas"])
    if "preset" in c:
        return GammaSweep.preset(c.pop("preset"), **c)
    return GammaSweep.from_dict(c)


def cmd_power_study(cfg):
    run = Run("power-study", cfg)
    seed = int(cfg["seed"])
    sweep = _sweep_from_config(cfg["sweep"], seed)
    mc = cfg["model"]
    family = _family(mc)
    opts = None if family.kind == "linear" else _train_opts(mc, derive_seed(seed, "model") % 2 ** 31)
    res = power_study(sweep, family, l_s=int(cfg["window"]["length_scale"]),
                      l_w=int(cfg["kernel"]["l_w"]), sigma_w=cfg["kernel"].get("sigma_w"),
                      lam=float(mc["lambda"]), train_opts=opts, backend=cfg["backend"])
    with open(run.path("power.csv"), "w", newline="") as fh:
        fh.write(power_table_csv(res))
    run.write_text("summary.json", summary_json(res))
    run.extra["achieved_alpha"] = {str(k): v for k, v in res.achieved_alpha.items()}
    run.extra["sweep"] = sweep.to_dict()
    n_err = sum(r.status != "ok" for r in res.rows)
    print(f"{len(res.rows)} power rows ({n_err} flagged errors)")
    return run.finish({"seed": seed, "replicates": {str(k): v for k, v in res.seeds.items()}})


_HANDLERS = {"train": cmd_train, "monitor": cmd_monitor, "diagnose": cmd_diagnose,
             "simulate": cmd_simulate, "power-study": cmd_power_study}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="microscore",
                                 description="Score-based monitoring of stochastic micrographs.")
    ap.add_argument("--version", action="version", version=f"microscore {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON, or metadata.json of a previous run")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--backend", choices=["cython", "python"])
        p.add_argument("--set", action="append", metavar="KEY=JSON",
                       help="override a config entry, e.g. --set kernel.l_w=10")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "diagnose", "power-study"):
            p.add_argument("--l-s", dest="l_s", type=int, help="neighborhood half-width")
            p.add_argument("--l-w", dest="l_w", type=int, help="WMA half-width")
            p.add_argument("--sigma-w", dest="sigma_w", type=float)
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--model-kind", choices=["linear", "mlp"])
        if name == "train":
            p.add_argument("--train-images", nargs="+")
            p.add_argument("--cl-images", nargs="+")
            p.add_argument("--alpha", type=float, help="target false-alarm rate")
        if name in ("monitor", "diagnose"):
            p.add_argument("images", nargs="*")
        if name == "monitor":
            p.add_argument("--model", dest="model_file")
            p.add_argument("--calibration", dest="calibration_file")
        if name == "diagnose":
            p.add_argument("--k", type=int)
    return ap


def _error_record(command, exc):
    msg = str(exc).strip("'\"")
    code = msg.split(":", 1)[0].strip() if msg else type(exc).__name__
    if isinstance(exc, FileNotFoundError):
        code = "file not found"
    return {"error": code, "detail": msg, "type": type(exc).__name__, "command": command}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, _ = load_config(args.command, args.config)
        cfg = apply_overrides(cfg, args)
        _HANDLERS[args.command](cfg)
    except (CliError, ValueError, OSError, OverflowError, FloatingPointError,
            np.linalg.LinAlgError, KeyError, TypeError) as exc:
        if args.verbose:
            log.exception("run failed")
        sys.stderr.write(json.dumps(_error_record(args.command, exc)) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Experiment commands. Each writes a self-describing JSON report into the
output directory and returns a :class:`CommandResult` whose ``passed`` flag
drives the CLI exit code."""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..dacconv import DacLayer
from ..errors import DivergedLoss, MissingCheckpoint
from ..mefem import DeformableLayer, EAConv, PyramidFusion, Roi, RroiPool
from ..pooling import (
    PoolRegionSpec,
    RPPool,
    VoxelFeatureSet,
    legacy_pool,
    peak_transient_bytes,
    replaceable_pool_3d,
    voxel_workload,
)
from ..tensor import Conv2d, grad_check
from ..toy.detector import build_detector
from ..toy.scenes import TIERS, make_dataset
from ..toy.training import epochs_to_converge, evaluate, train
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig

SMOOTH_TOL = 1e-4
KINKED_TOL = 1e-3  # bilinear sampling is piecewise linear in the coordinates
RP_OP_LIMIT = 0.6
RP_ALLOC_LIMIT = 2 / 3 + 0.1
CONVERGE_LIMIT = 0.80
FINAL_LOSS_LIMIT = 1.05


@dataclass
class CommandResult:
    name: str
    report: dict
    passed: bool
    path: Path | None = None
    messages: list = field(default_factory=list)


def _header(name: str, config: ExperimentConfig) -> dict:
    return {"command": name, "version": __version__, "config_hash": config.hash(), "config": config.to_dict()}


def _write(out_dir, name, report) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path


# --- gradcheck ------------------------------------------------------------------

def _deform(rng, c_in, c_out, padding=1):
    layer = DeformableLayer.init(rng, c_in, c_out, 3, padding=padding)
    # non-trivial offsets so samples land between grid points
    layer.offset_weight[...] = rng.normal(0, 0.2, layer.offset_weight.shape)
    layer.offset_bias[...] = rng.uniform(-0.4, 0.4, layer.offset_bias.shape)
    layer.bias[...] = rng.normal(0, 0.1, layer.bias.shape)
    return layer


def _case_conv2d(rng):
    layer = Conv2d.init(rng, 2, 3, 3, stride=int(rng.integers(1, 3)))
    layer.bias[...] = rng.normal(size=layer.bias.shape)
    return [("conv2d", layer, rng.normal(size=(2, 7, 7)), SMOOTH_TOL)]


def _case_dacconv(rng):
    cases = []
    for depth in (4, 9, 12):  # below, at and above kh*kw
        layer = DacLayer.init(rng, 2, 3, 3, depth=depth, kc_noise=0.3)
        cases.append((f"dacconv(D={depth})", layer, rng.normal(size=(2, 6, 6)), SMOOTH_TOL))
    return cases


def _case_rp_pool(rng):
    # distinct values keep max away from ties
    x = rng.permutation(2 * 6 * 6).reshape(2, 6, 6) / 10.0 + rng.uniform(0, 0.01, (2, 6, 6))
    return [(f"rp_pool({fn})", RPPool(PoolRegionSpec.square(2), fn), x, SMOOTH_TOL)
            for fn in ("max", "avg", "lp", "soft")]


def _case_deform_conv(rng):
    return [("deform_conv", _deform(rng, 2, 2), rng.normal(size=(2, 6, 6)), KINKED_TOL)]


def _case_rroi_pool(rng):
    roi = Roi(*rng.uniform(0.3, 1.7, 2), *rng.uniform(3.1, 4.9, 2))
    x = rng.normal(size=(2, 7, 7))
    return [(f"rroi_pool({fn})", RroiPool(roi, 2, fn), x, KINKED_TOL) for fn in ("avg", "max")]


def _case_fusion(rng):
    rois = [Roi(*rng.uniform(0.2, 3.0, 2), *rng.uniform(2.5, 9.0, 2)) for _ in range(3)]
    layer = PyramidFusion(rois, depth=3, grid=2, fn="avg", k0=1, reference=4.0)
    return [("fusion", layer, rng.normal(size=(2, 12, 12)), KINKED_TOL)]


def _case_eaconv(rng):
    block = EAConv(_deform(rng, 1, 2), _deform(rng, 2, 2), grid=2, fn="avg",
                   roi=Roi(*rng.uniform(0.3, 1.0, 2), 4.3, 3.7))
    return [("eaconv", block, rng.normal(size=(1, 6, 6)), KINKED_TOL)]


GRADCHECK_CASES = {
    "conv2d": _case_conv2d,
    "dacconv": _case_dacconv,
    "rp_pool": _case_rp_pool,
    "deform_conv": _case_deform_conv,
    "rroi_pool": _case_rroi_pool,
    "fusion": _case_fusion,
    "eaconv": _case_eaconv,
}


def cmd_gradcheck(config: ExperimentConfig, out_dir) -> CommandResult:
    """Central-difference checks of every listed layer type over every seed."""
    report = _header("gradcheck", config)
    rows = []
    failing = []
    for name in config.gradcheck_layers:
        if name not in GRADCHECK_CASES:
            raise KeyError(f"no gradcheck case for layer {name!r}; known: {sorted(GRADCHECK_CASES)}")
        for seed in config.gradcheck_seeds:
            for label, layer, x, tol in GRADCHECK_CASES[name](np.random.default_rng([seed, 17])):
                res = grad_check(layer, x, tol=tol)
                rows.append({"layer": name, "case": label, "seed": seed, "max_rel_err": res.max_error,
                             "tol": tol, "passed": res.passed})
        ok = all(r["passed"] for r in rows if r["layer"] == name)
        if not ok:
            failing.append(name)
    report["results"] = rows
    report["failing"] = failing
    report["layers_checked"] = len(config.gradcheck_layers)
    messages = [f"{'layer':<22} {'seed':>4} {'max rel err':>12} {'tol':>8}  status"]
    for r in rows:
        messages.append(f"{r['case']:<22} {r['seed']:>4} {r['max_rel_err']:>12.3e} {r['tol']:>8.0e}  "
                        f"{'ok' if r['passed'] else 'FAIL'}")
    if not config.gradcheck_layers:
        messages = ["0 layers checked"]
        report["note"] = "0 layers"
    if failing:
        messages.append("failing layers: " + ", ".join(failing))
    path = _write(out_dir, "gradcheck", report)
    return CommandResult("gradcheck", report, not failing, path, messages)


# --- bench-rp -------------------------------------------------------------------

def bench_workload(k: int, n_rot: int, n: int, seed: int = 0, fn: str = "max") -> dict:
    """Op counts and peak transient bytes of legacy vs replaceable pooling on one workload."""
    v = VoxelFeatureSet.random(np.random.default_rng([seed, n_rot, n]), k, n_rot, n)
    work = voxel_workload(v)
    spec = PoolRegionSpec((1, n), axes=(3, 4))
    (_, legacy_cost), legacy_peak = peak_transient_bytes(legacy_pool, v)
    (_, rp_cost), rp_peak = peak_transient_bytes(replaceable_pool_3d, work, spec, fn)
    return {
        "voxels": k, "n": n, "n_rot": n_rot, "fn": fn,
        "rp_ops": rp_cost.total, "legacy_ops": legacy_cost.total,
        "rp_counter": rp_cost.as_dict(), "legacy_counter": legacy_cost.as_dict(),
        "ratio": rp_cost.total / legacy_cost.total,
        "peak_alloc_rp": rp_peak, "peak_alloc_legacy": legacy_peak,
        "alloc_ratio": rp_peak / legacy_peak if legacy_peak else float("nan"),
    }


def cmd_bench_rp(config: ExperimentConfig, out_dir) -> CommandResult:
    """Op counts and peak allocation of replaceable vs legacy voxel pooling."""
    report = _header("bench-rp", config)
    rows = [bench_workload(config.bench_voxels, n_rot, n, config.data_seed, config.pool3d)
            for n in config.bench_n for n_rot in config.bench_rotations]
    degenerate = bench_workload(1, 1, 1, config.data_seed, config.pool3d)
    for r in rows:
        r["passed"] = r["ratio"] <= RP_OP_LIMIT and r["alloc_ratio"] <= RP_ALLOC_LIMIT
    report.update({
        "workloads": rows,
        "degenerate": degenerate,
        "rp_ops": sum(r["rp_ops"] for r in rows),
        "legacy_ops": sum(r["legacy_ops"] for r in rows),
        "peak_alloc_rp": max((r["peak_alloc_rp"] for r in rows), default=0),
        "peak_alloc_legacy": max((r["peak_alloc_legacy"] for r in rows), default=0),
        "limits": {"ratio": RP_OP_LIMIT, "alloc_ratio": RP_ALLOC_LIMIT},
    })
    report["ratio"] = report["rp_ops"] / report["legacy_ops"] if rows else None
    passed = all(r["passed"] for r in rows)
    messages = [f"n={r['n']:<4} N_rot={r['n_rot']:<2} ops {r['rp_ops']:>8}/{r['legacy_ops']:<8} "
                f"ratio {r['ratio']:.3f}  alloc ratio {r['alloc_ratio']:.3f}  {'ok' if r['passed'] else 'FAIL'}"
                for r in rows]
    path = _write(out_dir, "bench_rp", report)
    return CommandResult("bench-rp", report, passed, path, messages)


# --- training experiments ---------------------------------------------------------

def _datasets(config: ExperimentConfig):
    spec = config.scene_spec()
    return (make_dataset(config.train_scenes, config.data_seed, spec),
            make_dataset(config.eval_scenes, config.data_seed + 1, spec))


def _dac_slots(slots):
    return ["dac" if s == "conv" else s for s in slots]


def _mefem_slots(slots):
    return list(slots[:-1]) + ["eaconv"]


def _train_seed(config, spec, seed, train_set, eval_set, epochs=None, threshold=None):
    det = build_detector(spec, seed)
    try:
        metrics = train(det, train_set, config.train_config(seed, epochs), eval_scenes=eval_set,
                        threshold=threshold)
    except DivergedLoss as exc:
        exc.seed = seed
        raise
    return det, metrics


def _write_curves(path: Path, curves: dict):
    """Long-format CSV: one row per (series, seed, epoch)."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "seed", "epoch", "loss"])
        for (series, seed), curve in sorted(curves.items()):
            for e, loss in enumerate(curve, 1):
                w.writerow([series, seed, e, repr(float(loss))])


def cmd_train_compare(config: ExperimentConfig, out_dir, epochs: int | None = None) -> CommandResult:
    """Train standard and DAC twins per seed and compare epochs to convergence.

    Both twins of a seed share one threshold: 1.10 x the standard twin's best
    epoch loss.
    """
    if len(config.seeds) < 3:
        raise ValueError("train-compare needs at least 3 seeds")
    report = _header("train-compare", config)
    train_set, eval_set = _datasets(config)
    std_spec = config.detector_spec()
    dac_spec = config.detector_spec(slots=_dac_slots(config.slots))
    runs, curves = [], {}
    for seed in config.seeds:
        _, std = _train_seed(config, std_spec, seed, train_set, eval_set, epochs)
        threshold = 1.10 * min(std.loss_curve)
        _, dac = _train_seed(config, dac_spec, seed, train_set, eval_set, epochs)
        e_std = epochs_to_converge(std.loss_curve, threshold)
        e_dac = epochs_to_converge(dac.loss_curve, threshold)
        curves[("standard", seed)] = std.loss_curve
        curves[("dacconv", seed)] = dac.loss_curve
        runs.append({
            "seed": seed, "threshold": threshold,
            "standard": {"epochs_to_converge": e_std, "final_loss": std.loss_curve[-1], **_aps(std)},
            "dacconv": {"epochs_to_converge": e_dac, "final_loss": dac.loss_curve[-1], **_aps(dac)},
            "ratio": e_dac / e_std if e_std and e_dac else None,
            "final_loss_ratio": dac.loss_curve[-1] / std.loss_curve[-1],
        })
    ratios = [r["ratio"] for r in runs if r["ratio"] is not None]
    loss_ratios = [r["final_loss_ratio"] for r in runs]
    report["runs"] = runs
    report["median_ratio"] = statistics.median(ratios) if len(ratios) == len(runs) else None
    report["median_final_loss_ratio"] = statistics.median(loss_ratios)
    report["limits"] = {"ratio": CONVERGE_LIMIT, "final_loss_ratio": FINAL_LOSS_LIMIT}
    passed = (report["median_ratio"] is not None and report["median_ratio"] <= CONVERGE_LIMIT
              and report["median_final_loss_ratio"] <= FINAL_LOSS_LIMIT)
    out = Path(out_dir)
    path = _write(out, "train_compare", report)
    _write_curves(out / "train_compare_curves.csv", curves)
    messages = [f"seed {r['seed']}: standard {r['standard']['epochs_to_converge']} epochs, "
                f"dacconv {r['dacconv']['epochs_to_converge']} epochs, final loss ratio "
                f"{r['final_loss_ratio']:.3f}" for r in runs]
    messages.append(f"median epoch ratio {report['median_ratio']}, "
                    f"median final loss ratio {report['median_final_loss_ratio']:.3f}")
    return CommandResult("train-compare", report, passed, path, messages)


def _aps(metrics) -> dict:
    d = metrics.as_dict()
    return {f"ap_{t}": d[f"ap_{t}"] for t in TIERS}


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


OCCLUSION_SCHEMA = {
    "type": "object",
    "required": ["command", "version", "config_hash", "variants", "medians", "hard_direction"],
    "properties": {
        "command": {"const": "eval-occlusion"},
        "version": {"type": "string"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "variants": {
            "type": "object",
            "required": ["without_mefem", "with_mefem"],
            "additionalProperties": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["seed", "ap_easy", "ap_moderate", "ap_hard"],
                    "properties": {
                        "seed": {"type": "integer"},
                        "ap_easy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "ap_moderate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "ap_hard": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
        "medians": {
            "type": "object",
            "required": ["without_mefem", "with_mefem"],
            "additionalProperties": {
                "type": "object",
                "required": ["ap_easy", "ap_moderate", "ap_hard"],
            },
        },
        "hard_direction": {"type": "boolean"},
    },
}


def validate_occlusion_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, OCCLUSION_SCHEMA)


def cmd_eval_occlusion(config: ExperimentConfig, out_dir, epochs: int | None = None) -> CommandResult:
    """Per-tier AP with and without the MEFEM second stage, across seeds.

    With ``checkpoint_dir`` set, weights are loaded from there and nothing is
    trained; otherwise each run is trained and its checkpoint saved under
    ``out_dir/checkpoints``.
    """
    report = _header("eval-occlusion", config)
    variants = {
        "without_mefem": config.detector_spec(),
        "with_mefem": config.detector_spec(slots=_mefem_slots(config.slots), mefem=True),
    }
    load_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if load_dir is not None and not load_dir.is_dir():
        raise MissingCheckpoint(f"checkpoint directory {load_dir} does not exist")
    train_set, eval_set = _datasets(config) if load_dir is None else (None, None)
    if load_dir is not None:
        eval_set = make_dataset(config.eval_scenes, config.data_seed + 1, config.scene_spec())
    save_dir = Path(out_dir) / "checkpoints"
    results = {}
    for name, spec in variants.items():
        rows = []
        for seed in config.seeds:
            ckpt = f"{name}_seed{seed}.json"
            if load_dir is not None:
                det = build_detector(spec, seed)
                load_checkpoint(load_dir / ckpt, det)
                metrics = evaluate(det, eval_set)
            else:
                det, metrics = _train_seed(config, spec, seed, train_set, eval_set, epochs)
                save_checkpoint(save_dir / ckpt, det, config.to_dict(), metrics.rng_state)
            rows.append({"seed": seed, **_aps(metrics),
                         "final_loss": metrics.loss_curve[-1] if metrics.loss_curve else None})
        results[name] = rows
    medians = {name: {f"ap_{t}": _median([r[f"ap_{t}"] for r in rows]) for t in TIERS}
               for name, rows in results.items()}
    with_hard = medians["with_mefem"]["ap_hard"]
    without_hard = medians["without_mefem"]["ap_hard"]
    report["variants"] = results
    report["medians"] = medians
    report["eval_scenes"] = len(eval_set)
    report["hard_direction"] = bool(with_hard is not None and without_hard is not None
                                    and with_hard >= without_hard)
    validate_occlusion_report(report)
    path = _write(out_dir, "eval_occlusion", report)
    messages = [f"{name:<14} " + "  ".join(f"{t} {m[f'ap_{t}'] if m[f'ap_{t}'] is None else round(m[f'ap_{t}'], 3)}"
                                            for t in TIERS) for name, m in medians.items()]
    return CommandResult("eval-occlusion", report, report["hard_direction"], path, messages)


# --- export-plots -----------------------------------------------------------------

def cmd_export_plots(config: ExperimentConfig, out_dir) -> CommandResult:
    """CSV series for the loss-curve and per-tier AP figures from earlier reports."""
    out = Path(out_dir)
    written = []
    tc = out / "train_compare.json"
    if tc.exists():
        runs = json.loads(tc.read_text())["runs"]
        curves_src = out / "train_compare_curves.csv"
        if curves_src.exists():
            rows = list(csv.DictReader(curves_src.open()))
            by_epoch = {}
            for r in rows:
                by_epoch.setdefault((r["series"], int(r["epoch"])), []).append(float(r["loss"]))
            path = out / "plot_loss_curves.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["series", "epoch", "median_loss", "min_loss", "max_loss"])
                for (series, epoch), vals in sorted(by_epoch.items()):
                    w.writerow([series, epoch, statistics.median(vals), min(vals), max(vals)])
            written.append(path)
        path = out / "plot_convergence.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "standard_epochs", "dacconv_epochs"])
            for r in runs:
                w.writerow([r["seed"], r["standard"]["epochs_to_converge"], r["dacconv"]["epochs_to_converge"]])
        written.append(path)
    eo = out / "eval_occlusion.json"
    if eo.exists():
        medians = json.loads(eo.read_text())["medians"]
        path = out / "plot_ap_bars.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "tier", "median_ap"])
            for variant, m in sorted(medians.items()):
                for t in TIERS:
                    w.writerow([variant, t, "" if m[f"ap_{t}"] is None else m[f"ap_{t}"]])
        written.append(path)
    report = _header("export-plots", config)
    report["files"] = [p.name for p in written]
    messages = [f"wrote {p}" for p in written] or [f"no reports found in {out}; nothing exported"]
    path = _write(out, "export_plots", report)
    return CommandResult("export-plots", report, True, path, messages)


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "bench-rp": cmd_bench_rp,
    "train-compare": cmd_train_compare,
    "eval-occlusion": cmd_eval_occlusion,
    "export-plots": cmd_export_plots,
}

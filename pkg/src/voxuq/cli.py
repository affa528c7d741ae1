"""Command-line entry point: dataset generation, head training, density
fitting, OoD evaluation, calibration, report rendering, and the ablation /
feature-dimension sweeps.

Exit codes: 0 success, 2 usage or configuration error, 3 data or fit error.
"""

import configparser
import csv
import hashlib
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import pipeline, report as report_mod, store, synthworld
from .gda import FitError, collect_features, fit_gda
from .head import HeadConfig
from .ood import MethodBundle, parse_method, run_sweep

WORLD_KEYS = {
    "grid_x": int, "grid_y": int, "grid_z": int, "num_classes": int,
    "feature_dim": int, "objects_min": int, "objects_max": int,
    "anchor_separation": float, "neighborhood_scale": float,
    "noise_scale": float, "pair_offset": float, "seed": int, "train_scenes": int,
    "val_scenes": int, "test_scenes": int,
}
HEAD_KEYS = {"num_layers": int, "skip": bool, "sn_enabled": bool,
             "sn_coefficient": float, "hidden_width": int}
TRAINING_KEYS = {"epochs": int, "batch_size": int, "lr": float}
GDA_KEYS = {"cap_per_class": int}
CALIBRATION_KEYS = {"mode": str, "bins": int, "lambda_grid": str}
BENCHMARK_KEYS = {"severities": str, "corruptions": str, "histogram_bins": int}

SECTION_KEYS = {
    "world": WORLD_KEYS, "head": HEAD_KEYS, "training": TRAINING_KEYS,
    "gda": GDA_KEYS, "calibration": CALIBRATION_KEYS,
    "benchmark": BENCHMARK_KEYS,
}


def usage_error(message):
    click.echo("error: %s" % message, err=True)
    sys.exit(2)


def data_error(message):
    click.echo("error: %s" % message, err=True)
    sys.exit(3)


def _parse_bool(raw):
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % raw)


def load_config(path):
    """Sectioned key-value config; unknown sections/keys are rejected with
    the offending name."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        usage_error("cannot read config file %s" % path)
    out = {section: {} for section in SECTION_KEYS}
    for section in parser.sections():
        if section not in SECTION_KEYS:
            usage_error("unknown config section [%s]" % section)
        for key, raw in parser.items(section):
            if key not in SECTION_KEYS[section]:
                usage_error("unknown config key '%s' in section [%s]" % (key, section))
            caster = SECTION_KEYS[section][key]
            try:
                out[section][key] = _parse_bool(raw) if caster is bool else caster(raw)
            except ValueError:
                usage_error("bad value %r for config key '%s'" % (raw, key))
    return out


def world_config_from(config, seed=None):
    w = dict(config.get("world", {}))
    grid = (w.pop("grid_x", 24), w.pop("grid_y", 24), w.pop("grid_z", 4))
    if seed is not None:
        w["seed"] = seed
    try:
        return synthworld.WorldConfig(grid=grid, **w)
    except (TypeError, ValueError) as e:
        usage_error(str(e))


def head_config_from(config, world_config):
    h = dict(config.get("head", {}))
    return pipeline.head_config_for_world(
        world_config,
        num_layers=h.get("num_layers", 3),
        skip=h.get("skip", True),
        sn_enabled=h.get("sn_enabled", True),
        sn_coefficient=h.get("sn_coefficient", 1.0),
        hidden_width=h.get("hidden_width"),
    )


def _config_hash(obj):
    return hashlib.sha256(repr(sorted(str(obj))).encode()).hexdigest()[:16]


def _load_split(data_dir, split):
    path = Path(data_dir) / split
    if not (path / "manifest.json").exists():
        usage_error("missing dataset split %s under %s" % (split, data_dir))
    return synthworld.load_dataset(path)


@click.group()
def main():
    """Uncertainty quantification toolkit for voxel-grid semantic prediction."""


@main.command("generate-data")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def cmd_generate_data(config_path, out, seed, force):
    """Generate train/val/test splits of the synthetic voxel world."""
    config = load_config(config_path) if config_path else {}
    world_config = world_config_from(config, seed=seed)
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        usage_error("output directory %s is not empty (use --force)" % out)
    world = synthworld.generate_world(world_config)
    for split in ("train", "val", "test"):
        ds = synthworld.generate_dataset(world, split)
        synthworld.save_dataset(ds, out_dir / split)
    click.echo("wrote dataset (train=%d val=%d test=%d scenes) to %s"
               % (world_config.train_scenes, world_config.val_scenes,
                  world_config.test_scenes, out))


@main.command("train")
@click.option("--data", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
@click.option("--epochs", type=int, default=None)
@click.option("--ensemble", type=int, default=0)
def cmd_train(data, config_path, out, seed, epochs, ensemble):
    """Train the prediction head (and optional deep-ensemble members)."""
    config = load_config(config_path) if config_path else {}
    train_ds = _load_split(data, "train")
    val_ds = _load_split(data, "val")
    head_config = head_config_from(config, train_ds.config)
    training = config.get("training", {})
    kwargs = {
        "epochs": epochs if epochs is not None else training.get("epochs",
                                                                 pipeline.DEFAULT_EPOCHS),
        "batch_size": training.get("batch_size", pipeline.DEFAULT_BATCH),
        "lr": training.get("lr", pipeline.DEFAULT_LR),
    }
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    head, log = pipeline.train_on_dataset(head_config, train_ds, seed=seed, **kwargs)
    store.save_head(head, out_dir / "head.ocuq")
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "accuracy"])
        for e, l, a in zip(log.epochs, log.losses, log.accuracies):
            writer.writerow([e, format(l, ".17g"), format(a, ".17g")])
    val_acc = pipeline.validation_accuracy(head, val_ds)
    click.echo("validation accuracy: %.4f" % val_acc)
    for i in range(ensemble):
        member, _ = pipeline.train_on_dataset(head_config, train_ds,
                                              seed=seed + 100 + i, **kwargs)
        store.save_head(member, out_dir / ("member_%d.ocuq" % i))
    if ensemble:
        click.echo("wrote %d ensemble members" % ensemble)


@main.command("fit-gmm")
@click.option("--data", required=True, type=click.Path())
@click.option("--head", "head_path", required=True, type=click.Path())
@click.option("--cap", type=int, default=20000)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
def cmd_fit_gmm(data, head_path, cap, out, seed):
    """Fit the per-class Gaussian density model from penultimate features."""
    if not Path(head_path).exists():
        usage_error("missing head artifact %s" % head_path)
    head = store.load_head(head_path)
    train_ds = _load_split(data, "train")
    bank = collect_features(head, train_ds.iter_scene_arrays(), cap, seed)
    try:
        model = fit_gda(bank)
    except FitError as e:
        data_error(str(e))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    store.save_gda(model, out)
    for c in range(model.num_classes):
        click.echo("class %d: %d vectors" % (c, model.counts[c]))


def _bundle_from_artifacts(head_path, gda_path, members_dir, methods):
    if not Path(head_path).exists():
        usage_error("missing head artifact %s" % head_path)
    head = store.load_head(head_path)
    gda_model = None
    if gda_path:
        if not Path(gda_path).exists():
            usage_error("missing gda artifact %s" % gda_path)
        gda_model = store.load_gda(gda_path)
    members = []
    if members_dir:
        members = [store.load_head(p)
                   for p in sorted(Path(members_dir).glob("member_*.ocuq"))]
    for m in methods:
        name, params = parse_method(m)
        if name == "ours" and gda_model is None:
            usage_error("method 'ours' requires --gda")
        if name == "de" and len(members) < int(params.get("n", 3)):
            usage_error("method %r requires %s ensemble members under --members"
                        % (m, params.get("n", 3)))
    return MethodBundle(head=head, gda_model=gda_model, ensemble_heads=members)


@main.command("eval-ood")
@click.option("--data", required=True, type=click.Path())
@click.option("--head", "head_path", required=True, type=click.Path())
@click.option("--gda", "gda_path", type=click.Path(), default=None)
@click.option("--members", "members_dir", type=click.Path(), default=None)
@click.option("--methods", default="ours,max-softmax,entropy")
@click.option("--corruptions", default=",".join(synthworld.CORRUPTION_KINDS))
@click.option("--severities", default="1,2,3")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
def cmd_eval_ood(data, head_path, gda_path, members_dir, methods, corruptions,
                 severities, out, seed):
    """Run the clean-vs-corrupted sweep and write metrics.json + histograms.csv."""
    method_list = [m.strip() for m in methods.split(",") if m.strip()]
    try:
        for m in method_list:
            parse_method(m)
    except ValueError as e:
        usage_error(str(e))
    kinds = tuple(k.strip() for k in corruptions.split(",") if k.strip())
    for k in kinds:
        if k not in synthworld.CORRUPTION_KINDS:
            usage_error("unknown corruption %r" % k)
    sevs = tuple(int(s) for s in severities.split(",") if s.strip())
    bundle = _bundle_from_artifacts(head_path, gda_path, members_dir, method_list)
    test_ds = _load_split(data, "test")
    world = synthworld.generate_world(test_ds.config)
    rep = run_sweep(method_list, bundle, world, test_ds, seed=seed,
                    corruptions=kinds, severities=sevs)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    param_counts = {m: bundle.head.param_count() for m in method_list}
    doc = report_mod.report_to_metrics(
        rep, config_hash=_config_hash(asdict(test_ds.config)),
        param_counts=param_counts)
    report_mod.write_metrics(doc, out_dir / "metrics.json")
    report_mod.write_histograms_csv(rep, out_dir / "histograms.csv")
    report_mod.write_timings(rep, out_dir / "timing.json")
    for m in method_list:
        agg = rep.aggregates[m]
        click.echo("%s: mAUROC=%.4f mFPR95=%.4f" % (m, agg["mauroc"], agg["mfpr95"]))


@main.command("calibrate")
@click.option("--data", required=True, type=click.Path())
@click.option("--head", "head_path", required=True, type=click.Path())
@click.option("--gda", "gda_path", type=click.Path(), default=None)
@click.option("--members", "members_dir", type=click.Path(), default=None)
@click.option("--method", default="ours")
@click.option("--mode", type=click.Choice(["ts", "ugts"]), default="ugts")
@click.option("--lambda-grid", "lambda_grid", default="0,0.01,0.02,0.05,0.1,0.2,0.5")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
def cmd_calibrate(data, head_path, gda_path, members_dir, method, mode,
                  lambda_grid, out, seed):
    """Fit temperature scaling (and UGTS lambda), then report ECE/NLL on the
    clean and corrupted evaluation sets."""
    try:
        parse_method(method)
    except ValueError as e:
        usage_error(str(e))
    bundle = _bundle_from_artifacts(head_path, gda_path, members_dir, [method])
    train_ds = _load_split(data, "train")
    val_ds = _load_split(data, "val")
    test_ds = _load_split(data, "test")
    world = synthworld.generate_world(test_ds.config)
    grid = [float(x) for x in lambda_grid.split(",") if x.strip()]
    if mode == "ts":
        grid = [0.0]
    params = pipeline.calibrate_method(method, bundle, world, train_ds, val_ds,
                                       lam_grid=grid, seed=seed)
    sigma_z = synthworld.feature_std(train_ds)
    result = pipeline.evaluate_calibration(method, bundle, world, params,
                                           test_ds, sigma_z, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.save_calibration(params, out_dir / "calib.ocuq")
    doc = {
        "schema_version": report_mod.METRICS_SCHEMA_VERSION,
        "method": method, "mode": mode,
        "t_train": params.t_train, "lambda": params.lam,
        "u_bar_train": params.u_bar_train,
        "results": result,
    }
    report_mod.write_metrics(doc, out_dir / "calibration.json")
    click.echo("t_train=%.4f lambda=%.4f" % (params.t_train, params.lam))
    click.echo("clean ECE raw/ts/ugts: %.4f / %.4f / %.4f" % (
        result["clean"]["raw"]["ece"], result["clean"]["ts"]["ece"],
        result["clean"]["ugts"]["ece"]))
    click.echo("corrupt mECE ts/ugts: %.4f / %.4f" % (
        result["corrupted"]["ts"]["mece"], result["corrupted"]["ugts"]["mece"]))


@main.command("report")
@click.option("--metrics", "metrics_path", required=True, type=click.Path())
@click.option("--histograms", "histograms_path", type=click.Path(), default=None)
@click.option("--out-dir", required=True, type=click.Path())
def cmd_report(metrics_path, histograms_path, out_dir):
    """Render markdown tables and SVG histograms from metrics.json."""
    if not Path(metrics_path).exists():
        usage_error("missing metrics file %s" % metrics_path)
    if histograms_path is None:
        histograms_path = str(Path(metrics_path).parent / "histograms.csv")
    try:
        written = report_mod.render_report(metrics_path, histograms_path, out_dir)
    except (ValueError, KeyError) as e:
        usage_error("metrics schema mismatch: %s" % e)
    click.echo("wrote %d files to %s" % (len(written), out_dir))


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
def cmd_ablate(config_path, out, seed):
    """Train {3,5}-layer x {skip} head variants and tabulate OoD performance."""
    config = load_config(config_path) if config_path else {}
    world_config = world_config_from(config, seed=seed)
    rows = pipeline.ablation_table(world_config, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_metrics({"rows": rows}, out_dir / "ablation.json")
    (out_dir / "ablation.md").write_text(report_mod.ablation_table_markdown(rows))
    warning = pipeline.ablation_direction_warning(rows)
    if warning:
        click.echo("warning: %s" % warning, err=True)
    click.echo(report_mod.ablation_table_markdown(rows))


@main.command("dim-sweep")
@click.option("--dims", default="16,32")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
def cmd_dim_sweep(dims, config_path, out, seed):
    """Sweep the feature/penultimate dimension and tabulate OoD metrics plus
    density-model parameter counts."""
    from .ood import feature_dim_sweep
    dim_list = [int(d) for d in dims.split(",") if d.strip()]
    if not dim_list:
        usage_error("empty dims list")
    config = load_config(config_path) if config_path else {}
    world_config = world_config_from(config, seed=seed)
    rows = feature_dim_sweep(dim_list, world_config, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_metrics({"rows": rows}, out_dir / "dim_sweep.json")
    (out_dir / "dim_sweep.md").write_text(report_mod.dim_sweep_table_markdown(rows))
    click.echo(report_mod.dim_sweep_table_markdown(rows))


if __name__ == "__main__":
    main()

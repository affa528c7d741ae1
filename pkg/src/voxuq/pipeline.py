"""End-to-end orchestration: train the head on a synthetic dataset, fit the
density model, assemble method bundles, calibrate, and run the ablation and
feature-dimension sweeps. Shared by the CLI and the acceptance suite.
"""

from dataclasses import replace

import numpy as np

from . import synthworld
from .calibration import (CalibrationParams, ece, fit_temperature, nll,
                          scale_logits, tune_lambda, ugts_temperature)
from .gda import DEFAULT_CAP_PER_CLASS, collect_features, epistemic_score, fit_gda
from .head import HeadConfig, ResidualMlpHead, train_head
from .metrics import EnsembleSpec, ensemble_predict, softmax_entropy
from .nn_core import OptimizerState, softmax
from .ood import MethodBundle, parse_method, run_sweep

DEFAULT_EPOCHS = 6
DEFAULT_BATCH = 512
DEFAULT_LR = 1e-3


def head_config_for_world(config, num_layers=3, skip=True, sn_enabled=True,
                          sn_coefficient=1.0, hidden_width=None):
    return HeadConfig(
        input_dim=config.feature_dim,
        hidden_width=hidden_width or config.feature_dim,
        num_layers=num_layers,
        skip=skip,
        sn_enabled=sn_enabled,
        sn_coefficient=sn_coefficient,
        num_classes=config.num_classes,
    )


def train_on_dataset(head_config, dataset, seed=0, epochs=DEFAULT_EPOCHS,
                     batch_size=DEFAULT_BATCH, lr=DEFAULT_LR):
    head = ResidualMlpHead(head_config, seed=seed)
    feats, labels = dataset.voxel_arrays()
    opt = OptimizerState(kind="adam", lr=lr)
    log = train_head(head, feats, labels, opt=opt, epochs=epochs,
                     batch_size=batch_size, seed=seed)
    return head, log


def train_ensemble(head_config, dataset, n, base_seed=100, **train_kwargs):
    """Deep-ensemble members differing only by training seed."""
    return [train_on_dataset(head_config, dataset, seed=base_seed + i,
                             **train_kwargs)[0] for i in range(n)]


def fit_density(head, dataset, cap_per_class=DEFAULT_CAP_PER_CLASS, seed=0):
    bank = collect_features(head, dataset.iter_scene_arrays(), cap_per_class, seed)
    return fit_gda(bank), bank


def build_bundle(head_config, train_ds, seed=0, ensemble_n=0,
                 cap_per_class=DEFAULT_CAP_PER_CLASS, **train_kwargs):
    head, log = train_on_dataset(head_config, train_ds, seed=seed, **train_kwargs)
    gda_model, _ = fit_density(head, train_ds, cap_per_class=cap_per_class, seed=seed)
    members = (train_ensemble(head_config, train_ds, ensemble_n,
                              base_seed=seed + 100, **train_kwargs)
               if ensemble_n else [])
    return MethodBundle(head=head, gda_model=gda_model, ensemble_heads=members), log


def validation_accuracy(head, dataset):
    feats, labels = dataset.voxel_arrays()
    from .head import predict_classes
    return float((predict_classes(head, feats) == labels).mean())


def build_pipeline_for_dim(base_config, dim, seed):
    """Per-dimension pipeline for the feature-dimension sweep."""
    config = replace(base_config, feature_dim=dim, seed=seed)
    world = synthworld.generate_world(config)
    train_ds = synthworld.generate_dataset(world, "train")
    test_ds = synthworld.generate_dataset(world, "test")
    head_config = head_config_for_world(config)
    bundle, _ = build_bundle(head_config, train_ds, seed=seed)
    return world, bundle, test_ds


# -- uncertainty measure feeding UGTS --------------------------------------

def scene_uncertainty_for_calibration(method, bundle, features, base_seed=0):
    """Per-scene mean uncertainty used to modulate the temperature:
    epistemic density score for 'ours', predictive entropy for mcd/de,
    softmax entropy otherwise."""
    from .ood import voxel_scores
    name, _ = parse_method(method)
    if name in ("ours", "mcd", "de"):
        scores = voxel_scores(method, bundle, features, base_seed=base_seed)
    else:
        from .head import head_probs
        scores = softmax_entropy(head_probs(bundle.head, features))
    return float(np.mean(scores))


def method_logits(method, bundle, features, base_seed=0):
    """Logits used for calibration: the single head's logits for ours and the
    softmax baselines; log of the ensemble-mean probabilities for mcd/de."""
    name, params = parse_method(method)
    if name == "mcd":
        spec = EnsembleSpec(kind="mc-dropout", n=int(params.get("n", 5)),
                            dropout_p=float(params.get("p", 0.1)),
                            base_seed=base_seed)
        mean_probs, _ = ensemble_predict(bundle.head, spec, features)
        return np.log(np.maximum(mean_probs, 1e-12))
    if name == "de":
        n = int(params.get("n", 3))
        spec = EnsembleSpec(kind="deep-ensemble", n=n)
        mean_probs, _ = ensemble_predict(bundle.ensemble_heads[:n], spec, features)
        return np.log(np.maximum(mean_probs, 1e-12))
    return bundle.head.forward(features, update_sn=False).logits


def calibrate_method(method, bundle, world, train_ds, val_ds,
                     lam_grid=(0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5),
                     mode="additive", bins=15, seed=0):
    """Fit t_train on clean validation logits, compute the train-set mean
    uncertainty, and tune lambda on the clean split. Returns
    (CalibrationParams, per-scene validation temperatures)."""
    u_train = [scene_uncertainty_for_calibration(method, bundle, f, base_seed=seed + i)
               for i, (f, _) in enumerate(train_ds.iter_scene_arrays())]
    u_bar_train = float(np.mean(u_train))

    logits_list, labels_list, u_val = [], [], []
    for i, (f, y) in enumerate(val_ds.iter_scene_arrays()):
        logits_list.append(method_logits(method, bundle, f, base_seed=seed + i))
        labels_list.append(y)
        u_val.append(scene_uncertainty_for_calibration(method, bundle, f,
                                                       base_seed=seed + i))
    logits = np.concatenate(logits_list)
    labels = np.concatenate(labels_list)
    voxels = val_ds.config.voxels_per_scene
    u_per_voxel = np.repeat(u_val, voxels)

    t_train = fit_temperature(logits, labels)
    params = CalibrationParams(t_train=t_train, lam=0.0,
                               u_bar_train=u_bar_train, mode=mode)
    lam_star, _ = tune_lambda(logits, labels, u_per_voxel, params, lam_grid, bins=bins)
    params.lam = lam_star
    return params


def evaluate_calibration(method, bundle, world, params, test_ds, sigma_z,
                         corruptions=synthworld.CORRUPTION_KINDS,
                         severities=(1, 2, 3), bins=15, seed=0):
    """ECE/NLL on the clean split and mECE/mNLL over the corruption grid,
    for uncalibrated, fixed-TS and UGTS logit scaling."""

    def split_metrics(ds):
        logits_list, labels_list, u_scene = [], [], []
        for i, (f, y) in enumerate(ds.iter_scene_arrays()):
            logits_list.append(method_logits(method, bundle, f, base_seed=seed + i))
            labels_list.append(y)
            u_scene.append(scene_uncertainty_for_calibration(
                method, bundle, f, base_seed=seed + i))
        logits = np.concatenate(logits_list)
        labels = np.concatenate(labels_list)
        voxels = ds.config.voxels_per_scene
        u_per_voxel = np.repeat(u_scene, voxels)
        out = {}
        probs_raw = softmax(logits)
        out["raw"] = {"ece": ece(probs_raw, labels, bins=bins).ece,
                      "nll": nll(probs_raw, labels)}
        probs_ts = scale_logits(logits, params.t_train)
        out["ts"] = {"ece": ece(probs_ts, labels, bins=bins).ece,
                     "nll": nll(probs_ts, labels)}
        t_new = ugts_temperature(params, u_per_voxel)
        probs_ugts = scale_logits(logits, t_new)
        out["ugts"] = {"ece": ece(probs_ugts, labels, bins=bins).ece,
                       "nll": nll(probs_ugts, labels)}
        return out

    result = {"clean": split_metrics(test_ds)}
    grid = {"raw": {"ece": [], "nll": []}, "ts": {"ece": [], "nll": []},
            "ugts": {"ece": [], "nll": []}}
    for kind in corruptions:
        for severity in severities:
            spec = synthworld.CorruptionSpec(kind=kind, severity=severity)
            scenes = [synthworld.apply_corruption(
                          s, spec,
                          synthworld.corruption_seed(world.config.seed, kind,
                                                     severity, i),
                          world, sigma_z=sigma_z)
                      for i, s in enumerate(test_ds.scenes)]
            corr = synthworld.FeatureDataset(scenes=scenes, config=world.config,
                                             split="corrupted")
            cell = split_metrics(corr)
            for variant in grid:
                grid[variant]["ece"].append(cell[variant]["ece"])
                grid[variant]["nll"].append(cell[variant]["nll"])
    result["corrupted"] = {variant: {"mece": float(np.mean(v["ece"])),
                                     "mnll": float(np.mean(v["nll"]))}
                           for variant, v in grid.items()}
    return result


# -- ablation harness ------------------------------------------------------

def ablation_table(config, seed=42, layer_options=(3, 5), skip_options=(False, True),
                   corruptions=synthworld.CORRUPTION_KINDS, severities=(1, 2, 3),
                   epochs=DEFAULT_EPOCHS):
    """Train {layers} x {skip} head variants and sweep each: rows carry
    mAUROC / mFPR95 / parameter counts, mirroring the head-depth study."""
    world = synthworld.generate_world(config)
    train_ds = synthworld.generate_dataset(world, "train")
    test_ds = synthworld.generate_dataset(world, "test")
    rows = []
    for num_layers in layer_options:
        for skip in skip_options:
            head_config = head_config_for_world(config, num_layers=num_layers,
                                                skip=skip)
            bundle, _ = build_bundle(head_config, train_ds, seed=seed,
                                     epochs=epochs)
            report = run_sweep(["ours"], bundle, world, test_ds, seed=seed,
                               corruptions=corruptions, severities=severities,
                               region_level=False)
            agg = report.aggregates["ours"]
            rows.append({
                "layers": num_layers,
                "skip": skip,
                "mauroc": agg["mauroc"],
                "mfpr95": agg["mfpr95"],
                "params": bundle.head.param_count(),
            })
    return rows


def ablation_direction_warning(rows):
    """Expected ordering: 5 layers with skip beats 5 layers without. Returns
    a warning string when the observed ordering deviates, else None."""
    by_key = {(r["layers"], r["skip"]): r for r in rows}
    if (5, True) in by_key and (5, False) in by_key:
        if by_key[(5, True)]["mauroc"] < by_key[(5, False)]["mauroc"]:
            return ("ablation direction deviates: 5-layer head without skip "
                    "outscored the 5-layer head with skip (mAUROC %.4f vs %.4f)"
                    % (by_key[(5, False)]["mauroc"], by_key[(5, True)]["mauroc"]))
    return None

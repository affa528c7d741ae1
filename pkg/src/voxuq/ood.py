"""OoD detection metrics (AUROC, FPR@95TPR), scene/region aggregation,
severity sweeps over the corruption suite, and histogram export for ID/OoD
separation plots.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import synthworld
from .gda import epistemic_score, gmm_param_count
from .head import head_probs
from .metrics import (EnsembleSpec, ensemble_predict, max_softmax_score,
                      predictive_entropy, softmax_entropy)

HISTOGRAM_BINS = 50
DEFAULT_SEVERITIES = (1, 2, 3)


@dataclass
class ScoredPopulation:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64)
        if self.id_scores.size == 0 or self.ood_scores.size == 0:
            raise ValueError("both populations must be nonempty")
        if not (np.isfinite(self.id_scores).all() and np.isfinite(self.ood_scores).all()):
            raise ValueError("scores must be finite")


@dataclass
class OodResult:
    corruption: str
    severity: int
    auroc: float
    fpr95: float
    n_id: int
    n_ood: int


@dataclass
class BenchmarkReport:
    methods: dict = field(default_factory=dict)   # method -> list of OodResult
    aggregates: dict = field(default_factory=dict)  # method -> {mauroc, mfpr95}
    histograms: list = field(default_factory=list)
    region_methods: dict = field(default_factory=dict)
    region_aggregates: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0


def auroc(pop):
    """Mann-Whitney AUROC with midrank tie handling, OoD as positive class."""
    scores = np.concatenate([pop.id_scores, pop.ood_scores])
    ranks = rankdata(scores, method="average")
    n_id = pop.id_scores.size
    n_ood = pop.ood_scores.size
    rank_sum = ranks[n_id:].sum()
    u = rank_sum - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def fpr_at_95_tpr(pop, tpr_target=0.95):
    """FPR on ID at the largest threshold tau (among observed OoD scores)
    with at least 95% of OoD scores >= tau. Step function, no interpolation."""
    ood = np.sort(pop.ood_scores)[::-1]
    n_ood = ood.size
    need = tpr_target * n_ood
    # descending scan: count of ood >= ood[k] is at least k+1 (ties make it larger)
    tau = None
    for k in range(n_ood):
        candidate = ood[k]
        if np.sum(pop.ood_scores >= candidate) >= need:
            tau = candidate
            break
    if tau is None:
        tau = ood[-1]
    return float(np.mean(pop.id_scores >= tau))


def aggregate_scene(voxel_scores):
    """Mean per-voxel uncertainty over one scene."""
    voxel_scores = np.asarray(voxel_scores, dtype=np.float64)
    if voxel_scores.size == 0:
        raise ValueError("empty scene")
    return float(voxel_scores.mean())


def aggregate_region(voxel_scores, region_mask):
    """Mean uncertainty over the masked voxels only."""
    voxel_scores = np.asarray(voxel_scores, dtype=np.float64)
    region_mask = np.asarray(region_mask, dtype=bool).reshape(voxel_scores.shape)
    if not region_mask.any():
        raise ValueError("empty region mask")
    return float(voxel_scores[region_mask].mean())


def histogram_table(pop, bins=HISTOGRAM_BINS):
    """Shared-edge ID/OoD histograms over the pooled score range."""
    pooled = np.concatenate([pop.id_scores, pop.ood_scores])
    lo, hi = pooled.min(), pooled.max()
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(pop.id_scores, bins=edges)
    ood_counts, _ = np.histogram(pop.ood_scores, bins=edges)
    return edges, id_counts, ood_counts


# -- method scoring --------------------------------------------------------

KNOWN_METHODS = ("ours", "max-softmax", "entropy", "mcd", "de")


def parse_method(spec):
    """Parse a method string of the form name[:key=value...]."""
    parts = spec.split(":")
    name = parts[0]
    if name not in KNOWN_METHODS:
        raise ValueError("unknown method %r" % name)
    params = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ValueError("malformed method parameter %r" % p)
        key, value = p.split("=", 1)
        params[key] = value
    return name, params


@dataclass
class MethodBundle:
    """Trained artifacts a sweep needs: the main head + GDA model, and the
    ensemble member heads for DE baselines."""

    head: object
    gda_model: object = None
    ensemble_heads: list = field(default_factory=list)


def voxel_scores(method_spec, bundle, features, base_seed=0):
    """Per-voxel uncertainty scores for one method on an n x d feature batch."""
    name, params = parse_method(method_spec)
    if name == "ours":
        if bundle.gda_model is None:
            raise ValueError("method 'ours' requires a fitted GDA model")
        pen = bundle.head.forward(features, update_sn=False).penultimate_features
        return epistemic_score(bundle.gda_model, pen)
    if name == "max-softmax":
        return max_softmax_score(head_probs(bundle.head, features))
    if name == "entropy":
        return softmax_entropy(head_probs(bundle.head, features))
    if name == "mcd":
        n = int(params.get("n", 5))
        p = float(params.get("p", 0.1))
        spec = EnsembleSpec(kind="mc-dropout", n=n, dropout_p=p, base_seed=base_seed)
        mean_probs, _ = ensemble_predict(bundle.head, spec, features)
        return predictive_entropy(mean_probs)
    if name == "de":
        n = int(params.get("n", 3))
        if len(bundle.ensemble_heads) < n:
            raise ValueError("method %r needs %d ensemble heads, have %d"
                             % (method_spec, n, len(bundle.ensemble_heads)))
        spec = EnsembleSpec(kind="deep-ensemble", n=n)
        mean_probs, _ = ensemble_predict(bundle.ensemble_heads[:n], spec, features)
        return predictive_entropy(mean_probs)
    raise ValueError("unknown method %r" % name)


def _scene_scores(method_spec, bundle, dataset, seed, region_mask=None):
    out = []
    for i, (features, _) in enumerate(dataset.iter_scene_arrays()):
        sv = voxel_scores(method_spec, bundle, features, base_seed=seed + i)
        if region_mask is None:
            out.append(aggregate_scene(sv))
        else:
            out.append(aggregate_region(sv, region_mask.reshape(-1)))
    return np.array(out)


def run_sweep(methods, bundle, world, clean_test, seed=0,
              corruptions=synthworld.CORRUPTION_KINDS,
              severities=DEFAULT_SEVERITIES,
              region_level=True, histogram_bins=HISTOGRAM_BINS):
    """Score clean vs corrupted test scenes for every (method, corruption,
    severity) cell; fills AUROC/FPR95 grids, unweighted means, histogram
    tables, and (optionally) frontal-sector region-level grids."""
    sigma_z = synthworld.feature_std(clean_test)
    report = BenchmarkReport(seed=seed)
    report.config = {
        "corruptions": list(corruptions),
        "severities": list(severities),
        "n_scenes": len(clean_test.scenes),
        "histogram_bins": histogram_bins,
    }
    mask = synthworld.front_sector_mask(world.config)

    corrupted_cache = {}

    def corrupted_dataset(kind, severity, region):
        key = (kind, severity, region)
        if key not in corrupted_cache:
            spec = synthworld.CorruptionSpec(kind=kind, severity=severity, region=region)
            scenes = [synthworld.apply_corruption(
                          s, spec,
                          synthworld.corruption_seed(world.config.seed, kind, severity, i),
                          world, sigma_z=sigma_z)
                      for i, s in enumerate(clean_test.scenes)]
            corrupted_cache[key] = synthworld.FeatureDataset(
                scenes=scenes, config=world.config, split="corrupted")
        return corrupted_cache[key]

    for method in methods:
        t0 = time.perf_counter()
        clean_scene = _scene_scores(method, bundle, clean_test, seed)
        clean_region = (_scene_scores(method, bundle, clean_test, seed, region_mask=mask)
                        if region_level else None)
        cells = []
        region_cells = []
        for kind in corruptions:
            for severity in severities:
                corr = corrupted_dataset(kind, severity, "full_scene")
                ood_scene = _scene_scores(method, bundle, corr, seed)
                pop = ScoredPopulation(clean_scene, ood_scene)
                cells.append(OodResult(corruption=kind, severity=severity,
                                       auroc=auroc(pop), fpr95=fpr_at_95_tpr(pop),
                                       n_id=clean_scene.size, n_ood=ood_scene.size))
                edges, idc, oodc = histogram_table(pop, bins=histogram_bins)
                report.histograms.append({
                    "method": method, "corruption": kind, "severity": severity,
                    "edges": edges, "count_id": idc, "count_ood": oodc,
                })
                if region_level:
                    rcorr = corrupted_dataset(kind, severity, "front_sector")
                    ood_region = _scene_scores(method, bundle, rcorr, seed,
                                               region_mask=mask)
                    rpop = ScoredPopulation(clean_region, ood_region)
                    region_cells.append(OodResult(
                        corruption=kind, severity=severity,
                        auroc=auroc(rpop), fpr95=fpr_at_95_tpr(rpop),
                        n_id=clean_region.size, n_ood=ood_region.size))
        report.methods[method] = cells
        report.aggregates[method] = {
            "mauroc": float(np.mean([c.auroc for c in cells])),
            "mfpr95": float(np.mean([c.fpr95 for c in cells])),
        }
        if region_level:
            report.region_methods[method] = region_cells
            report.region_aggregates[method] = {
                "mauroc": float(np.mean([c.auroc for c in region_cells])),
                "mfpr95": float(np.mean([c.fpr95 for c in region_cells])),
            }
        report.timings[method] = time.perf_counter() - t0
    return report


def feature_dim_sweep(dims, base_config, seed=42, train_fn=None, **sweep_kwargs):
    """Train one head per feature dimension, fit the density model, run the
    default sweep, and tabulate (dim, mAUROC, mFPR95, gmm params).

    `train_fn(config) -> (world, bundle, clean_test)` builds the per-dim
    pipeline; it lives in the pipeline module to avoid an import cycle.
    """
    if not dims:
        raise ValueError("dims must be nonempty")
    from .pipeline import build_pipeline_for_dim
    if train_fn is None:
        train_fn = build_pipeline_for_dim
    rows = []
    for dim in dims:
        world, bundle, clean_test = train_fn(base_config, dim, seed)
        report = run_sweep(["ours"], bundle, world, clean_test, seed=seed,
                           region_level=False, **sweep_kwargs)
        agg = report.aggregates["ours"]
        rows.append({
            "dim": dim,
            "mauroc": agg["mauroc"],
            "mfpr95": agg["mfpr95"],
            "gmm_params": gmm_param_count(dim, base_config.num_classes),
        })
    return rows

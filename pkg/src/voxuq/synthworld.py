"""Frozen synthetic backbone stand-in: voxel scenes with semantic labels,
class-informative per-voxel features, and a corruption suite with scene-level
and frontal-sector variants at three severities.

Dataset directory layout: manifest.json plus features.bin (little-endian
float32, scenes concatenated, voxel order x -> y -> z then channel) and
labels.bin (little-endian uint16, same voxel order).
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

CORRUPTION_KINDS = ("noise", "blur", "sector_drop", "fog", "bias_shift")
REGIONS = ("full_scene", "front_sector")

# Per-severity corruption magnitudes (scaled by severity m in {1,2,3}).
# Tuned once on the default world so that severity 1 stays ambiguous for the
# density method while severity 3 separates near-completely; frozen here.
NOISE_COEF = 0.012
FOG_COEF = 0.25
BIAS_COEF = 0.4


class GenerationError(RuntimeError):
    """Raised when world generation cannot satisfy its constraints."""


@dataclass
class WorldConfig:
    grid: tuple = (24, 24, 4)
    num_classes: int = 17
    feature_dim: int = 32
    objects_min: int = 4
    objects_max: int = 10
    anchor_separation: float = 4.0
    neighborhood_scale: float = 0.5
    noise_scale: float = 0.5
    pair_offset: float = 1.0
    seed: int = 42
    train_scenes: int = 60
    val_scenes: int = 20
    test_scenes: int = 100

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes (class 0 is Unoccupied)")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")

    @property
    def voxels_per_scene(self):
        gx, gy, gz = self.grid
        return gx * gy * gz


@dataclass
class World:
    """Frozen per-dataset state: class anchors, neighborhood projection and
    the fixed corruption direction vectors."""

    config: WorldConfig
    anchors: np.ndarray        # (K, d)
    projection: np.ndarray     # (d, K) applied to the neighborhood histogram
    fog_vector: np.ndarray     # (d,)
    bias_vector: np.ndarray    # (d,) unit norm


@dataclass
class VoxelScene:
    labels: np.ndarray        # (gx, gy, gz) int
    features: np.ndarray      # (gx, gy, gz, d) float
    scene_id: int
    seed: int


@dataclass
class CorruptionSpec:
    kind: str
    severity: int
    region: str = "full_scene"
    sector_half_angle_deg: float = 45.0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError("unknown corruption kind %r" % self.kind)
        if self.severity not in (0, 1, 2, 3):
            raise ValueError("severity must be in {0,1,2,3}")
        if self.region not in REGIONS:
            raise ValueError("unknown region %r" % self.region)


@dataclass
class FeatureDataset:
    scenes: list
    config: WorldConfig
    split: str = ""

    def voxel_arrays(self):
        """All scenes flattened to (n_voxels, d) features and labels."""
        feats = np.concatenate([s.features.reshape(-1, self.config.feature_dim)
                                for s in self.scenes])
        labels = np.concatenate([s.labels.reshape(-1) for s in self.scenes])
        return feats, labels

    def iter_scene_arrays(self):
        for s in self.scenes:
            yield (s.features.reshape(-1, self.config.feature_dim),
                   s.labels.reshape(-1))


def scene_seed(dataset_seed, split, index):
    """Deterministic per-scene seed from (dataset seed, split, scene index)."""
    split_code = {"train": 1, "val": 2, "test": 3, "": 0}.get(split, hash(split) & 0xFFFF)
    ss = np.random.SeedSequence([dataset_seed, split_code, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def generate_world(config):
    """Draw the frozen world state once per dataset seed.

    Anchor layout: base anchors are rejection-sampled from N(0, s^2 I) until
    all pairwise distances are >= s (the anchor separation). The background
    class keeps its base; object classes are grouped into consecutive
    confusable pairs (1,2), (3,4), ... whose two anchors sit only
    `pair_offset` apart, so pair members genuinely overlap under the feature
    noise and attainable accuracy stays below 1.
    """
    rng = np.random.default_rng(config.seed)
    s = config.anchor_separation
    n_pairs = (config.num_classes - 1) // 2
    leftover = (config.num_classes - 1) % 2
    bases = []
    attempts = 0
    while len(bases) < 1 + n_pairs + leftover:
        cand = rng.standard_normal(config.feature_dim) * s
        attempts += 1
        if attempts > 100000:
            raise GenerationError("could not place class anchors with separation %g" % s)
        if all(np.linalg.norm(cand - b) >= s for b in bases):
            bases.append(cand)
    anchors = [bases[0]]
    for k in range(n_pairs):
        offset = rng.standard_normal(config.feature_dim)
        offset *= config.pair_offset / np.linalg.norm(offset)
        anchors.append(bases[1 + k])
        anchors.append(bases[1 + k] + offset)
    if leftover:
        anchors.append(bases[-1])
    anchors = np.stack(anchors)
    projection = (rng.standard_normal((config.feature_dim, config.num_classes))
                  * config.neighborhood_scale)
    fog_vector = rng.standard_normal(config.feature_dim)
    bias = rng.standard_normal(config.feature_dim)
    bias_vector = bias / np.linalg.norm(bias)
    return World(config=config, anchors=anchors, projection=projection,
                 fog_vector=fog_vector, bias_vector=bias_vector)


def _neighborhood_histogram(labels, num_classes):
    """Per-voxel class histogram over the 3x3x3 neighborhood (border-clamped),
    normalized to proportions. Returns (gx, gy, gz, K)."""
    gx, gy, gz = labels.shape
    onehot = np.zeros((gx, gy, gz, num_classes))
    idx = np.indices(labels.shape)
    onehot[idx[0], idx[1], idx[2], labels] = 1.0
    counts = np.zeros_like(onehot)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                xs = np.clip(np.arange(gx) + dx, 0, gx - 1)
                ys = np.clip(np.arange(gy) + dy, 0, gy - 1)
                zs = np.clip(np.arange(gz) + dz, 0, gz - 1)
                counts += onehot[np.ix_(xs, ys, zs)]
    return counts / 27.0


def generate_scene(world, seed, scene_id=0):
    """Labels: background class 0 plus random boxes and ellipsoids of classes
    1..K-1 (later objects overwrite earlier). Features per voxel:
    anchor[label] + P @ neighborhood_histogram + noise_scale * N(0, I).
    """
    cfg = world.config
    rng = np.random.default_rng(seed)
    gx, gy, gz = cfg.grid
    labels = np.zeros((gx, gy, gz), dtype=np.int64)
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    for _ in range(n_obj):
        cls = int(rng.integers(1, cfg.num_classes))
        cx = rng.uniform(0, gx)
        cy = rng.uniform(0, gy)
        cz = rng.uniform(0, gz)
        sx = rng.uniform(1.0, gx / 5.0)
        sy = rng.uniform(1.0, gy / 5.0)
        sz = rng.uniform(0.8, max(1.0, gz / 2.0))
        shape = rng.integers(0, 2)  # 0 = box, 1 = ellipsoid
        x, y, z = np.indices((gx, gy, gz))
        if shape == 0:
            inside = ((np.abs(x - cx) <= sx) & (np.abs(y - cy) <= sy)
                      & (np.abs(z - cz) <= sz))
        else:
            inside = (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2
                      + ((z - cz) / sz) ** 2) <= 1.0
        labels[inside] = cls
    hist = _neighborhood_histogram(labels, cfg.num_classes)
    features = (world.anchors[labels]
                + hist @ world.projection.T
                + cfg.noise_scale * rng.standard_normal((gx, gy, gz, cfg.feature_dim)))
    return VoxelScene(labels=labels, features=features, scene_id=scene_id, seed=seed)


def generate_dataset(world, split, n_scenes=None):
    cfg = world.config
    if n_scenes is None:
        n_scenes = {"train": cfg.train_scenes, "val": cfg.val_scenes,
                    "test": cfg.test_scenes}[split]
    scenes = [generate_scene(world, scene_seed(cfg.seed, split, i), scene_id=i)
              for i in range(n_scenes)]
    return FeatureDataset(scenes=scenes, config=cfg, split=split)


def front_sector_mask(config, half_angle_deg=45.0):
    """True where the voxel azimuth from the grid center lies within +/- the
    half angle of the +x axis; all z layers included."""
    if not 0.0 < half_angle_deg < 180.0:
        raise ValueError("half angle must be in (0, 180) degrees")
    gx, gy, gz = config.grid
    cx = (gx - 1) / 2.0
    cy = (gy - 1) / 2.0
    x, y = np.indices((gx, gy))
    az = np.arctan2(y - cy, x - cx)
    in_sector = np.abs(az) <= np.deg2rad(half_angle_deg)
    return np.repeat(in_sector[:, :, None], gz, axis=2)


def feature_std(dataset):
    """Per-dataset feature standard deviation (single scalar), used to scale
    the noise corruption."""
    feats, _ = dataset.voxel_arrays()
    return float(feats.std())


def apply_corruption(scene, spec, seed, world, sigma_z=1.0):
    """Return a corrupted copy of `scene`; severity 0 is a bit-exact identity.

    Transforms at severity m in {1,2,3} over the affected voxels:
      noise:      z += NOISE_COEF m sigma_z * N(0, I)
      blur:       z <- spatial mean over the (2m+1)^3 window
      sector_drop z <- 0
      fog:        z <- (1-w) z + w f,  w = min(1, FOG_COEF m r / r_max)
      bias_shift: z += BIAS_COEF m b
    """
    if spec.severity == 0:
        return VoxelScene(labels=scene.labels.copy(), features=scene.features.copy(),
                          scene_id=scene.scene_id, seed=scene.seed)
    cfg = world.config
    gx, gy, gz = cfg.grid
    m = spec.severity
    if spec.region == "front_sector":
        mask = front_sector_mask(cfg, spec.sector_half_angle_deg)
    else:
        mask = np.ones((gx, gy, gz), dtype=bool)
    z = scene.features.copy()
    rng = np.random.default_rng(seed)
    if spec.kind == "noise":
        noise = rng.standard_normal(z.shape)
        z[mask] += NOISE_COEF * m * sigma_z * noise[mask]
    elif spec.kind == "blur":
        blurred = _box_blur(scene.features, m)
        z[mask] = blurred[mask]
    elif spec.kind == "sector_drop":
        z[mask] = 0.0
    elif spec.kind == "fog":
        x, y, zz = np.indices((gx, gy, gz))
        center = np.array([(gx - 1) / 2.0, (gy - 1) / 2.0, (gz - 1) / 2.0])
        r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (zz - center[2]) ** 2)
        r_max = r.max()
        w = np.minimum(1.0, FOG_COEF * m * r / r_max)[..., None]
        fogged = (1.0 - w) * scene.features + w * world.fog_vector
        z[mask] = fogged[mask]
    elif spec.kind == "bias_shift":
        z[mask] += BIAS_COEF * m * world.bias_vector
    else:
        raise ValueError("unknown corruption kind %r" % spec.kind)
    return VoxelScene(labels=scene.labels.copy(), features=z,
                      scene_id=scene.scene_id, seed=scene.seed)


def _box_blur(features, m):
    """Mean over the (2m+1)^3 border-clamped spatial window, per channel."""
    gx, gy, gz, _ = features.shape
    acc = np.zeros_like(features)
    n = 0
    for dx in range(-m, m + 1):
        for dy in range(-m, m + 1):
            for dz in range(-m, m + 1):
                xs = np.clip(np.arange(gx) + dx, 0, gx - 1)
                ys = np.clip(np.arange(gy) + dy, 0, gy - 1)
                zs = np.clip(np.arange(gz) + dz, 0, gz - 1)
                acc += features[np.ix_(xs, ys, zs)]
                n += 1
    return acc / n


def corruption_seed(dataset_seed, kind, severity, scene_index):
    kind_code = CORRUPTION_KINDS.index(kind) + 1
    ss = np.random.SeedSequence([dataset_seed, 7919, kind_code, severity, scene_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


# -- dataset directory I/O -------------------------------------------------

SCHEMA_VERSION = 1


def save_dataset(dataset, out_dir):
    """Write manifest.json / features.bin / labels.bin for one split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    gx, gy, gz = cfg.grid
    voxels = cfg.voxels_per_scene
    feat_bytes = voxels * cfg.feature_dim * 4
    label_bytes = voxels * 2
    index = []
    with open(out_dir / "features.bin", "wb") as ff, \
         open(out_dir / "labels.bin", "wb") as lf:
        for i, s in enumerate(dataset.scenes):
            index.append({"scene_id": s.scene_id, "seed": s.seed,
                          "feature_offset": i * feat_bytes,
                          "label_offset": i * label_bytes})
            ff.write(s.features.astype("<f4").tobytes())
            lf.write(s.labels.astype("<u2").tobytes())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "split": dataset.split,
        "config": asdict(cfg),
        "class_names": ["unoccupied"] + ["class_%d" % c
                                         for c in range(1, cfg.num_classes)],
        "scenes": index,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(in_dir):
    in_dir = Path(in_dir)
    with open(in_dir / "manifest.json") as f:
        manifest = json.load(f)
    if manifest["schema_version"] > SCHEMA_VERSION:
        raise ValueError("unsupported dataset schema version %s"
                         % manifest["schema_version"])
    cfg_dict = dict(manifest["config"])
    cfg = WorldConfig(**cfg_dict)
    gx, gy, gz = cfg.grid
    features = np.fromfile(in_dir / "features.bin", dtype="<f4")
    labels = np.fromfile(in_dir / "labels.bin", dtype="<u2")
    n = len(manifest["scenes"])
    features = features.reshape(n, gx, gy, gz, cfg.feature_dim).astype(np.float64)
    labels = labels.reshape(n, gx, gy, gz).astype(np.int64)
    scenes = [VoxelScene(labels=labels[i], features=features[i],
                         scene_id=entry["scene_id"], seed=entry["seed"])
              for i, entry in enumerate(manifest["scenes"])]
    return FeatureDataset(scenes=scenes, config=cfg, split=manifest["split"])

"""Synthetic articulated skeletons and a simulated baseline keypoint detector.

Each sample is one 2-D person: ground-truth joints from a small kinematic
model, and "baseline" heatmaps rendered at jittered (and sometimes occluded)
joint positions. Distal joints get more jitter and more occlusion than
proximal ones, and the shifted test split is generated in environments of
varying severity, so it is harder than the training distribution.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
from pathlib import Path

import numpy as np

from .heatmap import decode_batch, pck, render_batch

FORMAT_VERSION = 1

KEYPOINTS = (
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)


@dataclass(frozen=True)
class Group:
    name: str
    distal: int
    proximals: tuple  # (anchor, ...) ordered; anchor is what the feedback net reconstructs


@dataclass(frozen=True)
class GroupSchema:
    keypoints: tuple
    groups: tuple
    torso_pair: tuple

    def __post_init__(self):
        k = len(self.keypoints)
        for g in self.groups:
            ids = (g.distal,) + tuple(g.proximals)
            if not 1 <= len(g.proximals) <= 3:
                raise ValueError(f"group {g.name}: needs 1-3 proximals")
            if len(set(ids)) != len(ids) or not all(0 <= i < k for i in ids):
                raise ValueError(f"group {g.name}: members must be distinct valid ids")
        a, b = self.torso_pair
        if a == b or not (0 <= a < k and 0 <= b < k):
            raise ValueError("torso_pair must be two distinct keypoint ids")

    @property
    def K(self):
        return len(self.keypoints)

    @property
    def distal_ids(self):
        return np.array([g.distal for g in self.groups])

    def role_is_distal(self):
        """Boolean per keypoint: distal in at least one group."""
        mask = np.zeros(self.K, bool)
        mask[self.distal_ids] = True
        return mask

    def role_is_tip(self):
        """Distal somewhere and proximal nowhere (wrists and ankles by default)."""
        mask = self.role_is_distal()
        for g in self.groups:
            mask[list(g.proximals)] = False
        return mask

    def gather(self, maps):
        """Split per-keypoint maps (N, K, H, W) into per-group network inputs.

        Returns a dict of arrays with N * G rows (sample-major):
        ``proximals`` (3 channels A, B, C, zero-padded), ``context`` (B, C),
        ``anchor`` (A) and ``distal`` (D), the last two with one channel.
        """
        maps = np.asarray(maps)
        n, _, h, w = maps.shape
        G = len(self.groups)
        prox = np.zeros((n, G, 3, h, w), maps.dtype)
        dist = np.empty((n, G, 1, h, w), maps.dtype)
        for j, g in enumerate(self.groups):
            for c, kp in enumerate(g.proximals):
                prox[:, j, c] = maps[:, kp]
            dist[:, j, 0] = maps[:, g.distal]
        prox = prox.reshape(n * G, 3, h, w)
        return {
            "proximals": prox,
            "context": np.ascontiguousarray(prox[:, 1:]),
            "anchor": np.ascontiguousarray(prox[:, :1]),
            "distal": dist.reshape(n * G, 1, h, w),
        }

    def to_dict(self):
        return {
            "keypoints": list(self.keypoints),
            "groups": [{"name": g.name, "distal": g.distal, "proximals": list(g.proximals)}
                       for g in self.groups],
            "torso_pair": list(self.torso_pair),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["keypoints"]),
                   tuple(Group(g["name"], g["distal"], tuple(g["proximals"])) for g in d["groups"]),
                   tuple(d["torso_pair"]))


def coco_like():
    """Six groups: both arms and legs, plus each hip as the far corner of the torso."""
    ix = {n: i for i, n in enumerate(KEYPOINTS)}
    g = lambda name, d, *p: Group(name, ix[d], tuple(ix[q] for q in p))
    return GroupSchema(KEYPOINTS, (
        g("l_arm", "l_wrist", "l_elbow", "l_shoulder", "l_hip"),
        g("r_arm", "r_wrist", "r_elbow", "r_shoulder", "r_hip"),
        g("l_leg", "l_ankle", "l_knee", "l_hip", "r_hip"),
        g("r_leg", "r_ankle", "r_knee", "r_hip", "l_hip"),
        g("l_torso", "l_hip", "l_shoulder", "r_shoulder", "r_hip"),
        g("r_torso", "r_hip", "r_shoulder", "l_shoulder", "l_hip"),
    ), (ix["l_shoulder"], ix["r_hip"]))


def crowdpose_like():
    """Four limb groups only."""
    s = coco_like()
    return replace(s, groups=s.groups[:4])


SCHEMAS = {"coco": coco_like, "crowdpose": crowdpose_like}


# -- kinematics ----------------------------------------------------------------

@dataclass(frozen=True)
class Kinematics:
    """Pose model, lengths in pixels or as fractions of the torso length."""
    frame: int = 32
    margin: float = 1.5
    torso: tuple = (9.5, 11.0)
    lean_deg: float = 10.0
    shoulder_half: tuple = (0.27, 0.33)
    hip_half: tuple = (0.18, 0.22)
    upper_arm: tuple = (0.45, 0.51)
    forearm: tuple = (0.39, 0.45)
    thigh: tuple = (0.52, 0.58)
    shin: tuple = (0.47, 0.53)
    arm_raise_deg: tuple = (-15.0, 85.0)
    # forearm angle = raise + elbow_gain * raise + elbow_offset + noise
    elbow_gain: float = 0.0
    elbow_offset_deg: float = 20.0
    elbow_noise_deg: float = 3.0
    leg_raise_deg: tuple = (-10.0, 35.0)
    knee_gain: float = -0.6
    knee_offset_deg: float = -3.0
    knee_noise_deg: float = 3.0
    max_tries: int = 50

    def bone_ranges(self):
        return {"upper_arm": self.upper_arm, "forearm": self.forearm,
                "thigh": self.thigh, "shin": self.shin}


BONES = {  # name -> list of (parent, child) keypoint ids
    "upper_arm": [(0, 2), (1, 3)],
    "forearm": [(2, 4), (3, 5)],
    "thigh": [(6, 8), (7, 9)],
    "shin": [(8, 10), (9, 11)],
}


def _pose(rng, kin):
    d2r = np.pi / 180
    T = rng.uniform(*kin.torso)
    lean = np.clip(rng.normal(0, kin.lean_deg), -2 * kin.lean_deg, 2 * kin.lean_deg) * d2r
    up = np.array([np.sin(lean), -np.cos(lean)])
    side = np.array([np.cos(lean), np.sin(lean)])  # towards the person's left
    lo, hi = kin.margin, kin.frame - 1 - kin.margin
    root = rng.uniform([0.38 * kin.frame, 0.44 * kin.frame],
                       [0.62 * kin.frame, 0.56 * kin.frame])
    pts = np.zeros((12, 2))
    sh = root + T * up
    sw = T * rng.uniform(*kin.shoulder_half)
    hw = T * rng.uniform(*kin.hip_half)
    pts[0], pts[1] = sh + sw * side, sh - sw * side
    pts[6], pts[7] = root + hw * side, root - hw * side

    def direction(phi, s):
        return np.cos(phi) * (-up) + np.sin(phi) * (s * side)

    for s, (shi, elb, wri) in ((1, (0, 2, 4)), (-1, (1, 3, 5))):
        a1 = rng.uniform(*kin.arm_raise_deg) * d2r
        a2 = a1 + kin.elbow_gain * a1 + (kin.elbow_offset_deg + rng.normal(0, kin.elbow_noise_deg)) * d2r
        pts[elb] = pts[shi] + T * rng.uniform(*kin.upper_arm) * direction(a1, s)
        pts[wri] = pts[elb] + T * rng.uniform(*kin.forearm) * direction(a2, s)
    for s, (hip, kne, ank) in ((1, (6, 8, 10)), (-1, (7, 9, 11))):
        a1 = rng.uniform(*kin.leg_raise_deg) * d2r
        a2 = a1 + kin.knee_gain * a1 + (kin.knee_offset_deg + rng.normal(0, kin.knee_noise_deg)) * d2r
        pts[kne] = pts[hip] + T * rng.uniform(*kin.thigh) * direction(a1, s)
        pts[ank] = pts[kne] + T * rng.uniform(*kin.shin) * direction(a2, s)
    return pts


def sample_skeleton(rng, schema, kin=Kinematics()):
    """Ground-truth (K, 2) joints inside the frame.

    Out-of-frame poses are redrawn up to ``kin.max_tries`` times; the last
    draw is clamped if none fits.
    """
    if schema.K != 12:
        raise ValueError("the kinematic model defines 12 keypoints")
    lo, hi = kin.margin, kin.frame - 1 - kin.margin
    for _ in range(kin.max_tries):
        pts = _pose(rng, kin)
        if (pts >= lo).all() and (pts <= hi).all():
            return pts
    return np.clip(pts, lo, hi)


def torso_length(coords, schema):
    a, b = schema.torso_pair
    return np.linalg.norm(np.asarray(coords)[..., a, :] - np.asarray(coords)[..., b, :], axis=-1)


# -- baseline detector -------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    proximal_sigma: float = 0.35
    distal_sigma: float = 0.8
    occlusion_rate: tuple = (0.10, 0.10, 0.10, 0.10, 0.05, 0.05)
    occlusion_sigma: float = 2.0
    proximal_occlusion_factor: float = 0.25
    attenuation: tuple = (0.3, 0.7)
    seed: int = 0

    def __post_init__(self):
        if min(self.proximal_sigma, self.distal_sigma, self.occlusion_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.distal_sigma < self.proximal_sigma:
            raise ValueError("distal_sigma must be >= proximal_sigma")
        if any(not 0 <= r <= 1 for r in self.occlusion_rate):
            raise ValueError("occlusion rates must lie in [0, 1]")
        if not 0 <= self.proximal_occlusion_factor <= 1:
            raise ValueError("proximal_occlusion_factor must lie in [0, 1]")

    def scaled_shift(self, other, m):
        """Config moved ``m`` times the way from ``self`` towards ``other``."""
        lerp = lambda a, b: a + m * (b - a)
        return replace(
            self,
            proximal_sigma=max(0.0, lerp(self.proximal_sigma, other.proximal_sigma)),
            distal_sigma=max(0.0, lerp(self.distal_sigma, other.distal_sigma)),
            occlusion_rate=tuple(float(np.clip(lerp(a, b), 0, 1))
                                 for a, b in zip(self.occlusion_rate, other.occlusion_rate)),
            occlusion_sigma=max(0.0, lerp(self.occlusion_sigma, other.occlusion_sigma)),
        )

    def harder_than(self, other):
        mine = (self.proximal_sigma, self.distal_sigma, self.occlusion_sigma) + tuple(self.occlusion_rate)
        theirs = (other.proximal_sigma, other.distal_sigma, other.occlusion_sigma) + tuple(other.occlusion_rate)
        return all(a >= b for a, b in zip(mine, theirs)) and mine != theirs


SHIFTED_TEST = NoiseConfig(
    proximal_sigma=0.5, distal_sigma=1.1,
    occlusion_rate=(0.45, 0.45, 0.45, 0.45, 0.15, 0.15),
    occlusion_sigma=2.5,
)


def occlusion_probability(schema, cfg):
    if len(cfg.occlusion_rate) != len(schema.groups):
        raise ValueError(f"{len(schema.groups)} groups but {len(cfg.occlusion_rate)} occlusion rates")
    p = np.zeros(schema.K)
    for g, rate in zip(schema.groups, cfg.occlusion_rate):
        p[g.distal] = max(p[g.distal], rate)
        for kp in g.proximals:
            p[kp] = max(p[kp], rate * cfg.proximal_occlusion_factor)
    return p


@dataclass(frozen=True)
class HeatmapSpec:
    size: int = 32
    sigma: float = 1.0


def simulate_baseline(gt, schema, cfg, rng, hm=HeatmapSpec()):
    """Render baseline heatmaps for one skeleton.

    Tip joints (see :meth:`GroupSchema.role_is_tip`) are jittered with
    ``distal_sigma``, all others with ``proximal_sigma``; with its occlusion
    probability it is further displaced and its peak attenuated. Returns
    (heatmaps (K, H, W) float32, occluded (K,) bool, observed (K, 2)).
    """
    gt = np.asarray(gt, dtype=np.float64)
    sig = np.where(schema.role_is_tip(), cfg.distal_sigma, cfg.proximal_sigma)
    obs = gt + rng.normal(size=gt.shape) * sig[:, None]
    occluded = rng.random(schema.K) < occlusion_probability(schema, cfg)
    disp = rng.normal(size=gt.shape) * cfg.occlusion_sigma
    att = rng.uniform(*cfg.attenuation, size=schema.K)
    obs = obs + np.where(occluded[:, None], disp, 0.0)
    obs = np.clip(obs, 0, hm.size - 1)
    maps = render_batch(obs, hm.sigma, (hm.size, hm.size), dtype=np.float32)
    maps *= np.where(occluded, att, 1.0).astype(np.float32)[:, None, None]
    return maps, occluded, obs


# -- datasets ---------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DataConfig:
    schema: str = "coco"
    sizes: dict = field(default_factory=lambda: {"train": 2000, "val": 1000, "test": 3200})
    seed: int = 0
    train_noise: NoiseConfig = NoiseConfig()
    test_noise: NoiseConfig = SHIFTED_TEST
    kinematics: Kinematics = Kinematics()
    heatmap: HeatmapSpec = HeatmapSpec()
    # shifted split: consecutive blocks share one environment severity
    env_block: int = 64
    env_severity: tuple = (0.0, 2.0)

    def to_dict(self):
        d = asdict(self)
        d["sizes"] = dict(self.sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train_noise"] = NoiseConfig(**_tuples(d.get("train_noise", {})))
        d["test_noise"] = NoiseConfig(**_tuples(d.get("test_noise", {})))
        d["kinematics"] = Kinematics(**_tuples(d.get("kinematics", {})))
        d["heatmap"] = HeatmapSpec(**d.get("heatmap", {}))
        if "env_severity" in d:
            d["env_severity"] = tuple(d["env_severity"])
        return cls(**d)


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class Split:
    name: str
    gt: np.ndarray          # (N, K, 2)
    heatmaps: np.ndarray    # (N, K, H, W) baseline detector output
    occluded: np.ndarray    # (N, K) bool
    scale: np.ndarray       # (N,) torso length
    severity: np.ndarray    # (N,) environment severity (0 for in-distribution)

    def __len__(self):
        return len(self.gt)

    def subset(self, idx):
        return Split(self.name, self.gt[idx], self.heatmaps[idx], self.occluded[idx],
                     self.scale[idx], self.severity[idx])

    def unlabeled(self):
        return UnlabeledSplit(self.name, self.heatmaps)


@dataclass
class UnlabeledSplit:
    """Test-time view: detector heatmaps only, no ground truth."""
    name: str
    heatmaps: np.ndarray

    def __len__(self):
        return len(self.heatmaps)


def _record_dtype(K, H):
    return np.dtype([
        ("gt", "<f4", (K, 2)),
        ("heatmaps", "<f4", (K, H, H)),
        ("occluded", "<f4", (K,)),
        ("scale", "<f4"),
        ("severity", "<f4"),
    ])


def _sample_rng(seed, split, noise_seed, i):
    return np.random.default_rng([seed, SPLITS.index(split), noise_seed, 0, i])


def _env_rng(seed, split, noise_seed, block):
    return np.random.default_rng([seed, SPLITS.index(split), noise_seed, 1, block])


def generate_split(cfg, split, start=0, stop=None):
    """Generate records ``start:stop`` of a split as a structured array."""
    schema = SCHEMAS[cfg.schema]()
    n = cfg.sizes[split]
    stop = n if stop is None else stop
    hm = cfg.heatmap
    rec = np.zeros(stop - start, _record_dtype(schema.K, hm.size))
    base = cfg.train_noise if split != "test" else cfg.test_noise
    for r, i in enumerate(range(start, stop)):
        if split == "test":
            m = _env_rng(cfg.seed, split, base.seed, i // cfg.env_block).uniform(*cfg.env_severity)
            noise = cfg.train_noise.scaled_shift(cfg.test_noise, m)
        else:
            m, noise = 0.0, base
        rng = _sample_rng(cfg.seed, split, base.seed, i)
        gt = sample_skeleton(rng, schema, cfg.kinematics)
        maps, occ, _ = simulate_baseline(gt, schema, noise, rng, hm)
        rec[r]["gt"] = gt
        rec[r]["heatmaps"] = maps
        rec[r]["occluded"] = occ
        rec[r]["scale"] = torso_length(gt, schema)
        rec[r]["severity"] = m
    return rec


def generate_split_parallel(cfg, split, workers=1, chunk=256):
    """Same records as :func:`generate_split`, built in chunks on a thread pool."""
    n = cfg.sizes[split]
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    with ThreadPoolExecutor(max(1, workers)) as ex:
        parts = list(ex.map(lambda b: generate_split(cfg, split, *b), bounds))
    return np.concatenate(parts)


def make_dataset(cfg, path, workers=1):
    """Write ``manifest.json`` plus one little-endian float32 file per split."""
    for s in SPLITS:
        if cfg.sizes.get(s, 0) <= 0:
            raise ValueError(f"split {s!r} must have a positive size")
    if not cfg.test_noise.harder_than(cfg.train_noise):
        raise ValueError("test noise must be harder than train noise in at least one field")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    schema = SCHEMAS[cfg.schema]()
    files = {}
    for s in SPLITS:
        rec = generate_split_parallel(cfg, s, workers) if workers > 1 else generate_split(cfg, s)
        raw = rec.tobytes()
        (path / f"{s}.bin").write_bytes(raw)
        files[s] = {"file": f"{s}.bin", "count": int(len(rec)),
                    "sha256": hashlib.sha256(raw).hexdigest()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "schema_groups": schema.to_dict(),
        "record_fields": [[name, list(dt.shape)] for name, (dt, _) in
                          _record_dtype(schema.K, cfg.heatmap.size).fields.items()],
        "splits": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


class DatasetError(RuntimeError):
    pass


class Dataset:
    def __init__(self, path):
        self.path = Path(path)
        mpath = self.path / "manifest.json"
        if not mpath.exists():
            raise DatasetError(f"no dataset manifest at {mpath}")
        self.manifest = json.loads(mpath.read_text())
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format {self.manifest.get('format_version')}")
        self.config = DataConfig.from_dict(self.manifest["config"])
        self.schema = SCHEMAS[self.config.schema]()
        self._cache = {}

    def split(self, name):
        if name not in self._cache:
            info = self.manifest["splits"][name]
            dt = _record_dtype(self.schema.K, self.config.heatmap.size)
            rec = np.fromfile(self.path / info["file"], dtype=dt)
            if len(rec) != info["count"]:
                raise DatasetError(f"{name}: {len(rec)} records, manifest says {info['count']}")
            self._cache[name] = Split(
                name,
                rec["gt"].astype(np.float64),
                np.ascontiguousarray(rec["heatmaps"]),
                rec["occluded"] > 0.5,
                rec["scale"].astype(np.float64),
                rec["severity"].astype(np.float64),
            )
        return self._cache[name]


def baseline_pck(split, schema, roles="distal", tau=0.1):
    """PCK of decoding the raw detector heatmaps for one keypoint role."""
    coords, _ = decode_batch(split.heatmaps)
    mask = schema.role_is_distal()
    if roles == "proximal":
        mask = ~mask
    elif roles == "all":
        mask = np.ones_like(mask)
    ref = split.scale[:, None]
    return pck(coords[:, mask], split.gt[:, mask], ref, tau)

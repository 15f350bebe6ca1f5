"""Synthetic articulated-figure scenes plus detection-rate metrics.

Scenes are colored stick figures over smooth textured backgrounds: every limb
gets its own palette entry so left and right are distinguishable, joints get
small bright markers, and optional rectangles occlude parts of the body. All
geometry is sampled from per-sample counter-based streams, so a corpus is a
pure function of (config, n, seed).
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .heatmap import KeypointSet, PersonDescriptor, bilinear_resize
from .tensor import ContractViolation, RngStream


@dataclass(frozen=True)
class JointSchema:
    names: tuple
    flip_pairs: tuple
    torso: tuple  # (left hip index, right shoulder index)
    groups: tuple  # ((label, member indices), ...) in report column order

    @property
    def num_joints(self):
        return len(self.names)


SCHEMA_14 = JointSchema(
    names=(
        "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
        "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
        "neck", "head_top",
    ),
    flip_pairs=((0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9)),
    torso=(3, 8),
    groups=(
        ("head", (12, 13)),
        ("sho", (8, 9)),
        ("elb", (7, 10)),
        ("wri", (6, 11)),
        ("hip", (2, 3)),
        ("knee", (1, 4)),
        ("ank", (0, 5)),
    ),
)

SCHEMA_16 = JointSchema(
    names=(
        "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
        "pelvis", "thorax", "neck", "head_top",
        "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    ),
    flip_pairs=((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)),
    torso=(3, 12),
    groups=(
        ("head", (8, 9)),
        ("sho", (12, 13)),
        ("elb", (11, 14)),
        ("wri", (10, 15)),
        ("hip", (2, 3)),
        ("knee", (1, 4)),
        ("ank", (0, 5)),
    ),
)


def schema_for(num_joints: int) -> JointSchema:
    if num_joints == 14:
        return SCHEMA_14
    if num_joints == 16:
        return SCHEMA_16
    raise ContractViolation(f"no joint schema for M={num_joints}")


@dataclass
class SyntheticSceneConfig:
    num_joints: int = 14
    image_size: int = 128
    height_frac: tuple = (0.5, 0.72)  # person height as a fraction of the image
    torso_tilt: tuple = (-15.0, 15.0)  # degrees away from vertical
    head_tilt: tuple = (-18.0, 18.0)
    shoulder_range: tuple = (-70.0, 70.0)  # upper arm vs torso-down direction
    elbow_range: tuple = (0.0, 135.0)  # forearm vs upper arm
    hip_range: tuple = (-40.0, 40.0)  # thigh vs torso-down direction
    knee_range: tuple = (0.0, 110.0)  # shin vs thigh
    occluder_count: tuple = (0, 0)
    occluder_size: tuple = (10.0, 24.0)
    marker_radius: float = 2.5
    distractor: bool = False

    def validate(self):
        schema_for(self.num_joints)
        if self.image_size < 32:
            raise ContractViolation("image_size must be >= 32")
        for name in ("height_frac", "occluder_size"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ContractViolation(f"{name} must be a positive (lo, hi) range")
        for name in ("elbow_range", "knee_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 175 or lo > hi:
                raise ContractViolation(f"{name} must lie inside [0, 175]")
        if self.occluder_count[0] < 0 or self.occluder_count[0] > self.occluder_count[1]:
            raise ContractViolation("occluder_count must be a non-negative (lo, hi) range")
        if self.marker_radius <= 0:
            raise ContractViolation("marker_radius must be positive")
        return self

    @property
    def schema(self) -> JointSchema:
        return schema_for(self.num_joints)


@dataclass
class AnnotationRecord:
    image: str
    keypoints: KeypointSet  # image space
    person: PersonDescriptor
    head_size: float
    split: str = "train"

    def __post_init__(self):
        if self.head_size <= 0:
            raise ContractViolation("head_size must be positive")
        if self.split not in ("train", "val", "test"):
            raise ContractViolation(f"unknown split {self.split!r}")


# ---------------------------------------------------------------------------
# scene synthesis

_LIMB_COLORS = {
    "torso": (0.20, 0.30, 0.80),
    "shoulder_bar": (0.25, 0.45, 0.85),
    "hip_bar": (0.30, 0.25, 0.75),
    "head": (0.90, 0.74, 0.58),
    "r_upper_arm": (0.85, 0.15, 0.15),
    "r_forearm": (0.95, 0.55, 0.10),
    "l_upper_arm": (0.10, 0.70, 0.20),
    "l_forearm": (0.65, 0.85, 0.10),
    "r_thigh": (0.55, 0.15, 0.70),
    "r_shin": (0.85, 0.20, 0.60),
    "l_thigh": (0.10, 0.65, 0.80),
    "l_shin": (0.10, 0.85, 0.55),
}
_MARKER_COLOR = np.array([0.97, 0.97, 0.97])


def _rot(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _paint_capsule(img, p0, p1, radius, color):
    s = img.shape[1]
    x0 = max(int(min(p0[0], p1[0]) - radius - 1), 0)
    x1 = min(int(max(p0[0], p1[0]) + radius + 2), s)
    y0 = max(int(min(p0[1], p1[1]) - radius - 1), 0)
    y1 = min(int(max(p0[1], p1[1]) + radius + 2), s)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    v = np.asarray(p1, dtype=np.float64) - p0
    len2 = float(v @ v)
    px, py = xs - p0[0], ys - p0[1]
    t = np.clip((px * v[0] + py * v[1]) / len2, 0.0, 1.0) if len2 > 0 else 0.0
    d2 = (px - t * v[0]) ** 2 + (py - t * v[1]) ** 2
    mask = d2 <= radius * radius
    for c in range(3):
        img[c, y0:y1, x0:x1][mask] = color[c]


def _paint_disc(img, center, radius, color):
    _paint_capsule(img, center, center, radius, color)


def _paint_rect(img, x0, y0, x1, y1, color):
    s = img.shape[1]
    xa, xb = max(int(x0), 0), min(int(x1), s)
    ya, yb = max(int(y0), 0), min(int(y1), s)
    if xa >= xb or ya >= yb:
        return
    img[:, ya:yb, xa:xb] = np.asarray(color)[:, None, None]


def _sample_figure(cfg: SyntheticSceneConfig, rng: RngStream, pelvis, h):
    """Joint positions for one figure, respecting the configured angle ranges."""
    up = np.array([0.0, -1.0])
    tilt = rng.uniform(*cfg.torso_tilt)
    axis = _rot(tilt) @ up  # pelvis -> neck direction
    down = -axis

    pts = {}
    pelvis = np.asarray(pelvis, dtype=np.float64)
    neck = pelvis + 0.38 * h * axis
    pts["neck"] = neck
    head_len = 0.16 * h * rng.uniform(0.9, 1.1)
    pts["head_top"] = neck + head_len * (_rot(rng.uniform(*cfg.head_tilt)) @ axis)

    perp = _rot(90.0) @ axis  # left side of the figure
    sho_base = neck - 0.02 * h * axis
    pts["l_shoulder"] = sho_base + 0.14 * h * perp
    pts["r_shoulder"] = sho_base - 0.14 * h * perp
    pts["l_hip"] = pelvis + 0.09 * h * perp
    pts["r_hip"] = pelvis - 0.09 * h * perp

    for side, sgn in (("l", 1.0), ("r", -1.0)):
        alpha = rng.uniform(*cfg.shoulder_range)
        upper_dir = _rot(sgn * alpha) @ down
        elbow = pts[side + "_shoulder"] + 0.15 * h * upper_dir
        beta = rng.uniform(*cfg.elbow_range)
        bend = 1.0 if rng.uniform() < 0.5 else -1.0
        fore_dir = _rot(sgn * bend * beta) @ upper_dir
        pts[side + "_elbow"] = elbow
        pts[side + "_wrist"] = elbow + 0.14 * h * fore_dir

        gamma = rng.uniform(*cfg.hip_range)
        thigh_dir = _rot(sgn * gamma) @ down
        knee = pts[side + "_hip"] + 0.24 * h * thigh_dir
        delta = rng.uniform(*cfg.knee_range)
        shin_dir = _rot(-sgn * delta) @ thigh_dir
        pts[side + "_knee"] = knee
        pts[side + "_ankle"] = knee + 0.22 * h * shin_dir

    pts["pelvis"] = pelvis
    pts["thorax"] = pelvis + 0.24 * h * axis
    return pts


def _draw_figure(img, pts, h, rng: RngStream, marker_joints=None, marker_radius=2.5):
    thick = max(2.0, 0.045 * h)
    jitter = {k: np.clip(np.asarray(v) + rng.normal((3,), std=0.03), 0.02, 0.98)
              for k, v in _LIMB_COLORS.items()}
    segs = [
        ("torso", pts["pelvis"], pts["neck"], 1.3 * thick),
        ("hip_bar", pts["r_hip"], pts["l_hip"], thick),
        ("shoulder_bar", pts["r_shoulder"], pts["l_shoulder"], thick),
        ("r_thigh", pts["r_hip"], pts["r_knee"], thick),
        ("r_shin", pts["r_knee"], pts["r_ankle"], 0.85 * thick),
        ("l_thigh", pts["l_hip"], pts["l_knee"], thick),
        ("l_shin", pts["l_knee"], pts["l_ankle"], 0.85 * thick),
        ("r_upper_arm", pts["r_shoulder"], pts["r_elbow"], 0.85 * thick),
        ("r_forearm", pts["r_elbow"], pts["r_wrist"], 0.7 * thick),
        ("l_upper_arm", pts["l_shoulder"], pts["l_elbow"], 0.85 * thick),
        ("l_forearm", pts["l_elbow"], pts["l_wrist"], 0.7 * thick),
    ]
    for key, a, b, radius in segs:
        _paint_capsule(img, a, b, radius, jitter[key])
    head_mid = 0.5 * (pts["neck"] + pts["head_top"])
    head_r = 0.5 * np.linalg.norm(pts["head_top"] - pts["neck"])
    _paint_disc(img, head_mid, head_r, jitter["head"])
    if marker_joints is not None:
        for name in marker_joints:
            _paint_disc(img, pts[name], marker_radius, _MARKER_COLOR)


def generate_sample(cfg: SyntheticSceneConfig, rng: RngStream):
    """One rendered scene and its annotation (image path left empty)."""
    s = cfg.image_size
    schema = cfg.schema

    bg = rng.uniform(0.12, 0.42, (3, 6, 6))
    img = bilinear_resize(bg, s, s)

    if cfg.distractor:
        corner = np.array([s * rng.uniform(0.1, 0.9), s * rng.uniform(0.78, 0.92)])
        dpts = _sample_figure(cfg, rng, corner, 0.3 * s)
        _draw_figure(img, dpts, 0.3 * s, rng)

    h = s * rng.uniform(*cfg.height_frac)
    pelvis = np.array(
        [s * (0.5 + rng.uniform(-0.06, 0.06)), s * (0.52 + rng.uniform(-0.04, 0.04))]
    )
    pts = _sample_figure(cfg, rng, pelvis, h)
    _draw_figure(img, pts, h, rng, marker_joints=schema.names, marker_radius=cfg.marker_radius)

    n_occ = rng.integers(cfg.occluder_count[0], cfg.occluder_count[1] + 1)
    rects = []
    for _ in range(n_occ):
        target = pts[schema.names[rng.integers(0, schema.num_joints)]]
        cx = target[0] + rng.uniform(-0.08 * h, 0.08 * h)
        cy = target[1] + rng.uniform(-0.08 * h, 0.08 * h)
        w = rng.uniform(*cfg.occluder_size)
        hh = rng.uniform(*cfg.occluder_size)
        rect = (cx - w / 2, cy - hh / 2, cx + w / 2, cy + hh / 2)
        _paint_rect(img, *rect, color=rng.uniform(0.05, 0.95, (3,)))
        rects.append(rect)

    xy = np.stack([pts[name] for name in schema.names])
    visible = _visibility(xy, rects, cfg.marker_radius, s)

    lo, hi = xy.min(axis=0), xy.max(axis=0)
    center = 0.5 * (lo + hi)
    side = 1.25 * max(float(hi[0] - lo[0]), float(hi[1] - lo[1]), 1.0)
    person = PersonDescriptor(center=center, scale=side / 200.0)
    head_size = float(np.linalg.norm(pts["head_top"] - pts["neck"]))

    record = AnnotationRecord(
        image="",
        keypoints=KeypointSet(xy, visible, "image"),
        person=person,
        head_size=head_size,
    )
    return np.clip(img, 0.0, 1.0), record


def _visibility(xy, rects, marker_radius, image_size):
    """A joint stays visible unless occluders cover more than half its marker."""
    m = xy.shape[0]
    visible = np.ones(m, dtype=bool)
    rad = int(math.ceil(marker_radius))
    for j in range(m):
        x, y = xy[j]
        if not (0 <= x <= image_size - 1 and 0 <= y <= image_size - 1):
            visible[j] = False
            continue
        if not rects:
            continue
        gx, gy = np.mgrid[-rad : rad + 1, -rad : rad + 1]
        disc = (gx * gx + gy * gy) <= marker_radius * marker_radius
        px, py = x + gx[disc], y + gy[disc]
        covered = np.zeros(px.shape, dtype=bool)
        for (x0, y0, x1, y1) in rects:
            covered |= (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
        if covered.mean() > 0.5:
            visible[j] = False
    return visible


def generate_dataset(cfg: SyntheticSceneConfig, n: int, seed: int, split: str = "train"):
    """n independent (image, record) samples; sample i depends only on (seed, i)."""
    cfg.validate()
    root = RngStream(seed)
    out = []
    for i in range(n):
        img, rec = generate_sample(cfg, root.child(i))
        out.append((img, replace(rec, split=split)))
    return out


# ---------------------------------------------------------------------------
# disk format: 8-bit PNGs plus one JSON-lines annotation file


def write_dataset(samples, out_dir, annotations_name="annotations.jsonl"):
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, (img, rec) in enumerate(samples):
        name = f"img_{i:05d}.png"
        arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(os.path.join(out_dir, name))
        records.append(replace(rec, image=name))
    write_annotations(records, os.path.join(out_dir, annotations_name))
    return records


def write_annotations(records, path):
    with open(path, "w") as fh:
        for rec in records:
            joints = [
                [float(x), float(y), int(v)]
                for (x, y), v in zip(rec.keypoints.xy, rec.keypoints.visible)
            ]
            fh.write(
                json.dumps(
                    {
                        "image": rec.image,
                        "joints": joints,
                        "center": [float(rec.person.center[0]), float(rec.person.center[1])],
                        "scale": rec.person.scale,
                        "head_size": rec.head_size,
                        "split": rec.split,
                    }
                )
                + "\n"
            )


def load_annotations(path):
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            joints = np.asarray(obj["joints"], dtype=np.float64)
            records.append(
                AnnotationRecord(
                    image=obj["image"],
                    keypoints=KeypointSet(joints[:, :2], joints[:, 2] > 0, "image"),
                    person=PersonDescriptor(obj["center"], obj["scale"]),
                    head_size=float(obj["head_size"]),
                    split=obj.get("split", "train"),
                )
            )
    return records


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_dataset(data_dir, annotations_name="annotations.jsonl"):
    records = load_annotations(os.path.join(data_dir, annotations_name))
    return [(load_image(os.path.join(data_dir, rec.image)), rec) for rec in records]


# ---------------------------------------------------------------------------
# detection-rate metrics


@dataclass
class PckResult:
    per_joint: np.ndarray  # rate per joint, nan where never evaluated
    counts: np.ndarray
    total: float
    groups: dict
    skipped: int

    def csv_row(self, schema: JointSchema) -> str:
        header = ",".join(label for label, _ in schema.groups) + ",total"
        vals = [self.groups[label] for label, _ in schema.groups] + [self.total]
        return header + "\n" + ",".join(f"{v:.6f}" for v in vals) + "\n"


def _detection_rates(preds, records, refs, r, schema):
    if not 0.0 < r <= 1.0:
        raise ContractViolation("threshold r must lie in (0, 1]")
    m = schema.num_joints
    correct = [0] * m
    count = [0] * m
    skipped = 0
    for pred, rec, ref in zip(preds, records, refs):
        if pred.count != m or rec.keypoints.count != m:
            raise ContractViolation(f"keypoint sets must carry {m} joints")
        if not ref > 0:
            skipped += 1
            continue
        gxy = rec.keypoints.xy
        vis = rec.keypoints.visible
        dx = pred.xy[:, 0] - gxy[:, 0]
        dy = pred.xy[:, 1] - gxy[:, 1]
        dist = np.sqrt(dx * dx + dy * dy)
        ok = (dist / ref) <= r
        for j in range(m):
            if vis[j]:
                count[j] += 1
                if ok[j]:
                    correct[j] += 1
    if skipped:
        warnings.warn(f"{skipped} records skipped for degenerate reference length")
    rates = [correct[j] / count[j] if count[j] else float("nan") for j in range(m)]
    evaluated = [rate for rate in rates if not math.isnan(rate)]
    total = sum(evaluated) / len(evaluated) if evaluated else float("nan")
    groups = {}
    for label, members in schema.groups:
        present = [rates[j] for j in members if not math.isnan(rates[j])]
        groups[label] = sum(present) / len(present) if present else float("nan")
    return PckResult(
        per_joint=np.asarray(rates),
        counts=np.asarray(count),
        total=total,
        groups=groups,
        skipped=skipped,
    )


def pck(preds, records, r: float = 0.2, schema: JointSchema = SCHEMA_14) -> PckResult:
    """Detection rate with the left-hip to right-shoulder distance as reference.

    Only visible ground-truth joints are evaluated; predictions are compared in
    image space. Records whose reference length is zero are skipped.
    """
    if len(preds) != len(records):
        raise ContractViolation("pck needs one prediction per record")
    lh, rs = schema.torso
    refs = []
    for rec in records:
        d = rec.keypoints.xy[lh] - rec.keypoints.xy[rs]
        refs.append(math.sqrt(d[0] * d[0] + d[1] * d[1]))
    return _detection_rates(preds, records, refs, r, schema)


def pckh(preds, records, r: float = 0.5, schema: JointSchema = SCHEMA_14) -> PckResult:
    """Detection rate against each record's annotated head size."""
    if len(preds) != len(records):
        raise ContractViolation("pckh needs one prediction per record")
    refs = [rec.head_size for rec in records]
    return _detection_rates(preds, records, refs, r, schema)


def pck_curve(preds, records, rs=None, schema: JointSchema = SCHEMA_14):
    if rs is None:
        rs = [round(0.02 * i, 2) for i in range(1, 11)]
    return [(r, pck(preds, records, r, schema)) for r in rs]

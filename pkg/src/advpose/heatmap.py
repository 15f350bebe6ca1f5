"""Conversions between keypoints, Gaussian heatmaps, and image crops.

Coordinates are (x, y) with x running along columns, pixel centers on the
integer grid. Crops are built from a similarity transform: a square window of
side 200 * scale * jitter around the person center, optionally rotated, maps
onto the output square. Heatmap coordinates relate to crop coordinates by a
pure resolution change (quarter resolution, pixel-center aligned).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractViolation

HEATMAP_STRIDE = 4  # crop resolution over heatmap resolution, fixed by the stem


@dataclass
class KeypointSet:
    """Joint coordinates with visibility flags, tagged with their space."""

    xy: np.ndarray  # (M, 2) float64
    visible: np.ndarray  # (M,) bool
    space: str = "image"  # "image" or "heatmap"

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.xy.shape[0] != self.visible.shape[0]:
            raise ContractViolation("keypoint coords and visibility disagree on M")
        if self.space not in ("image", "heatmap"):
            raise ContractViolation(f"unknown keypoint space {self.space!r}")

    @property
    def count(self) -> int:
        return self.xy.shape[0]

    def copy(self) -> "KeypointSet":
        return KeypointSet(self.xy.copy(), self.visible.copy(), self.space)


@dataclass
class PersonDescriptor:
    """Crop geometry: center in image coords, scale relative to a 200px box."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.scale = float(self.scale)
        if not np.isfinite(self.center).all() or not np.isfinite(self.scale):
            raise ContractViolation("person descriptor must be finite")
        if self.scale <= 0:
            raise ContractViolation("person scale must be positive")


@dataclass
class FlipPairs:
    """Left/right joint index pairs for mirror augmentation and fusion."""

    pairs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        seen = set()
        for a, b in self.pairs:
            if a == b:
                raise ContractViolation("flip pair maps a joint to itself")
            if a in seen or b in seen:
                raise ContractViolation("joint appears in more than one flip pair")
            seen.update((a, b))

    def permutation(self, m: int) -> np.ndarray:
        perm = np.arange(m)
        for a, b in self.pairs:
            if a >= m or b >= m:
                raise ContractViolation("flip pair index out of range")
            perm[a], perm[b] = b, a
        return perm


# ---------------------------------------------------------------------------
# resampling helpers


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at float coords; out-of-bounds reads count as zero."""
    c, h, w = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    out = np.zeros((c,) + xs.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = image[:, yi.clip(0, h - 1), xi.clip(0, w - 1)]
            out += np.where(valid, wgt, 0.0) * vals
    return out


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes; source coords clamp at the border."""
    h, w = arr.shape[-2:]
    lead = arr.shape[:-2]
    flat = arr.reshape(-1, h, w)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    x0 = np.floor(gx).astype(np.int64).clip(0, w - 2) if w > 1 else np.zeros_like(gx, np.int64)
    y0 = np.floor(gy).astype(np.int64).clip(0, h - 2) if h > 1 else np.zeros_like(gy, np.int64)
    fx, fy = gx - x0, gy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    out = (
        flat[:, y0, x0] * (1 - fx) * (1 - fy)
        + flat[:, y0, x1] * fx * (1 - fy)
        + flat[:, y1, x0] * (1 - fx) * fy
        + flat[:, y1, x1] * fx * fy
    )
    return out.reshape(lead + (out_h, out_w))


# ---------------------------------------------------------------------------
# crop geometry


def _crop_matrix(center, side, rotation_deg, out_res):
    """Affine (3,3) taking image coords to crop coords, pixel centers."""
    theta = np.deg2rad(rotation_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    s = out_res / side
    half = (out_res - 1) / 2.0
    # translate(-center), rotate(-theta), scale, translate(+half)
    rot = np.array([[cos, sin, 0.0], [-sin, cos, 0.0], [0.0, 0.0, 1.0]])
    pre = np.array([[1.0, 0.0, -center[0]], [0.0, 1.0, -center[1]], [0.0, 0.0, 1.0]])
    post = np.array([[s, 0.0, half], [0.0, s, half], [0.0, 0.0, 1.0]])
    return post @ rot @ pre


@dataclass
class CropTransform:
    """Invertible map between image, crop, and heatmap coordinates."""

    matrix: np.ndarray  # image -> crop
    crop_res: int

    @property
    def heatmap_res(self) -> int:
        return self.crop_res // HEATMAP_STRIDE

    def _apply(self, mat, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        homo = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
        return (homo @ mat.T)[:, :2]

    def _heatmap_matrix(self):
        s = 1.0 / HEATMAP_STRIDE
        off = (s - 1.0) / 2.0  # keeps pixel centers aligned across resolutions
        hm = np.array([[s, 0.0, off], [0.0, s, off], [0.0, 0.0, 1.0]])
        return hm @ self.matrix

    def image_to_crop(self, pts):
        return self._apply(self.matrix, pts)

    def image_to_heatmap(self, pts):
        return self._apply(self._heatmap_matrix(), pts)

    def heatmap_to_image(self, pts):
        return self._apply(np.linalg.inv(self._heatmap_matrix()), pts)


def crop_input(
    image: np.ndarray,
    person: PersonDescriptor,
    out_res: int,
    rotation_deg: float = 0.0,
    scale_jitter: float = 1.0,
):
    """Cut the person window out of (3,H,W), returning the crop and its transform."""
    if image.ndim != 3:
        raise ContractViolation("crop_input expects a (C,H,W) image")
    if not np.isfinite(scale_jitter) or scale_jitter <= 0:
        raise ContractViolation("scale jitter must be positive and finite")
    side = 200.0 * person.scale * scale_jitter
    if side <= 0 or not np.isfinite(side):
        raise ContractViolation("degenerate crop window")
    mat = _crop_matrix(person.center, side, rotation_deg, out_res)
    inv = np.linalg.inv(mat)
    jj, ii = np.meshgrid(np.arange(out_res, dtype=np.float64), np.arange(out_res, dtype=np.float64))
    src_x = inv[0, 0] * jj + inv[0, 1] * ii + inv[0, 2]
    src_y = inv[1, 0] * jj + inv[1, 1] * ii + inv[1, 2]
    crop = bilinear_sample(image, src_x, src_y)
    return crop, CropTransform(mat, out_res)


def keypoints_to_heatmap_space(kps: KeypointSet, transform: CropTransform) -> KeypointSet:
    """Map image-space joints into heatmap coords, dropping ones that leave the frame."""
    if kps.space != "image":
        raise ContractViolation("expected image-space keypoints")
    xy = transform.image_to_heatmap(kps.xy)
    r = transform.heatmap_res
    inside = (xy[:, 0] >= 0) & (xy[:, 0] <= r - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= r - 1)
    return KeypointSet(xy, kps.visible & inside, "heatmap")


def heatmap_to_image_coords(kps: KeypointSet, transform: CropTransform) -> KeypointSet:
    if kps.space != "heatmap":
        raise ContractViolation("expected heatmap-space keypoints")
    return KeypointSet(transform.heatmap_to_image(kps.xy), kps.visible.copy(), "image")


# ---------------------------------------------------------------------------
# heatmap rendering and decoding


def render_targets(kps: KeypointSet, res: int, sigma: float) -> np.ndarray:
    """Unnormalized Gaussians (peak 1) per joint; invisible joints render as zero."""
    if kps.space != "heatmap":
        raise ContractViolation("targets are rendered from heatmap-space keypoints")
    if sigma <= 0:
        raise ContractViolation("sigma must be positive")
    m = kps.count
    out = np.zeros((m, res, res), dtype=np.float64)
    ys = np.arange(res, dtype=np.float64)[:, None]
    xs = np.arange(res, dtype=np.float64)[None, :]
    for j in range(m):
        if not kps.visible[j]:
            continue
        dx = xs - kps.xy[j, 0]
        dy = ys - kps.xy[j, 1]
        out[j] = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    return out


def decode_argmax(heatmaps: np.ndarray):
    """Peak location and score per joint; all-zero maps decode to (0,0) score 0.

    Ties go to the first maximum in row-major scan order.
    """
    if heatmaps.ndim != 3 or heatmaps.shape[1] != heatmaps.shape[2]:
        raise ContractViolation("decode expects (M, r, r) heatmaps")
    m, r, _ = heatmaps.shape
    flat = heatmaps.reshape(m, r * r)
    idx = flat.argmax(axis=1)
    scores = flat[np.arange(m), idx]
    xy = np.stack([idx % r, idx // r], axis=1).astype(np.float64)
    return KeypointSet(xy, np.ones(m, dtype=bool), "heatmap"), scores


def flip_average(heatmaps: np.ndarray, flipped_heatmaps: np.ndarray, pairs: FlipPairs) -> np.ndarray:
    """Fuse predictions from the original and the mirrored crop.

    ``flipped_heatmaps`` must come from running the net on the horizontally
    mirrored input; it is mirrored back, left/right channels are swapped, and
    the two views are averaged.
    """
    if heatmaps.shape != flipped_heatmaps.shape:
        raise ContractViolation("flip_average expects matching shapes")
    if heatmaps.ndim != 3:
        raise ContractViolation("flip_average expects (M, r, r) heatmaps")
    perm = pairs.permutation(heatmaps.shape[0])
    unflipped = flipped_heatmaps[perm, :, ::-1]
    return 0.5 * (heatmaps + unflipped)


def flip_keypoints(kps: KeypointSet, width: int, pairs: FlipPairs) -> KeypointSet:
    """Mirror image-space joints about the vertical axis of a width-px image."""
    if kps.space != "image":
        raise ContractViolation("flip_keypoints works on image-space joints")
    perm = pairs.permutation(kps.count)
    xy = kps.xy[perm].copy()
    xy[:, 0] = (width - 1) - xy[:, 0]
    return KeypointSet(xy, kps.visible[perm].copy(), "image")

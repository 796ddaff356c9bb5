"""Score-map binarization: global or Otsu thresholding plus small-region
cleanup via connected-component labeling."""

import numpy as np
from dataclasses import dataclass

from .errors import ConfigError, DataError, ShapeError

HISTOGRAM_BINS = 256


def threshold_global(score, tau: float):
    """Binary mask, 1 where score >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {tau}")
    score = np.asarray(score)
    return (score >= tau).astype(np.uint8)


@dataclass(frozen=True)
class OtsuResult:
    tau: float                 # chosen threshold, a bin edge in [0, 1]
    sigma_w2: float            # weighted within-class variance at tau
    histogram: np.ndarray      # 256-bin count histogram


def otsu_threshold(score) -> OtsuResult:
    """Pick the 256-bin threshold minimizing the weighted within-class
    variance; ties break toward the lower threshold.

    Scores are quantized into 256 levels; candidate thresholds are the 255
    interior bin edges t/256, splitting bins < t from bins >= t. A map whose
    histogram occupies a single bin has no two classes to separate.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.min() < 0.0 or score.max() > 1.0:
        raise DataError("score values must lie in [0, 1]")
    bins = np.minimum((score * HISTOGRAM_BINS).astype(np.int64), HISTOGRAM_BINS - 1)
    hist = np.bincount(bins.ravel(), minlength=HISTOGRAM_BINS)
    if np.count_nonzero(hist) < 2:
        raise DataError("degenerate histogram: score map occupies a single level")

    p = hist / hist.sum()
    centers = (np.arange(HISTOGRAM_BINS) + 0.5) / HISTOGRAM_BINS
    # prefix moments; class 0 holds bins < t for candidate t in 1..255
    c0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    q0 = np.cumsum(p * centers ** 2)[:-1]
    c1 = 1.0 - c0
    m1 = m0[-1] + p[-1] * centers[-1] - m0
    q1 = q0[-1] + p[-1] * centers[-1] ** 2 - q0

    with np.errstate(divide="ignore", invalid="ignore"):
        var0 = np.where(c0 > 0, q0 / np.maximum(c0, 1e-300) - (m0 / np.maximum(c0, 1e-300)) ** 2, 0.0)
        var1 = np.where(c1 > 0, q1 / np.maximum(c1, 1e-300) - (m1 / np.maximum(c1, 1e-300)) ** 2, 0.0)
    sigma_w2 = np.where(c0 > 0, c0 * var0, 0.0) + np.where(c1 > 0, c1 * var1, 0.0)
    best = int(np.argmin(sigma_w2))  # first minimum = lowest threshold
    return OtsuResult(
        tau=(best + 1) / HISTOGRAM_BINS,
        sigma_w2=float(max(sigma_w2[best], 0.0)),
        histogram=hist,
    )


def label_components(mask, connectivity: int = 8):
    """Two-pass union-find labeling of foreground components.

    Returns (labels, areas) where labels is 0 for background and areas[k] is
    the pixel count of component k (areas[0] is the background count).
    """
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got shape {mask.shape}")
    h, w = mask.shape
    fg = mask != 0
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    next_label = 1
    for i in range(h):
        row = fg[i]
        for j in range(w):
            if not row[j]:
                continue
            neighbors = []
            if j > 0 and labels[i, j - 1]:
                neighbors.append(labels[i, j - 1])
            if i > 0:
                if labels[i - 1, j]:
                    neighbors.append(labels[i - 1, j])
                if connectivity == 8:
                    if j > 0 and labels[i - 1, j - 1]:
                        neighbors.append(labels[i - 1, j - 1])
                    if j + 1 < w and labels[i - 1, j + 1]:
                        neighbors.append(labels[i - 1, j + 1])
            if not neighbors:
                labels[i, j] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                roots = [find(k) for k in neighbors]
                keep = min(roots)
                labels[i, j] = keep
                for r in roots:
                    parent[r] = keep

    if next_label > 1:
        remap = np.zeros(next_label, dtype=np.int64)
        compact = 0
        for lbl in range(1, next_label):
            root = find(lbl)
            if remap[root] == 0:
                compact += 1
                remap[root] = compact
            remap[lbl] = remap[root]
        labels = remap[labels]
    areas = np.bincount(labels.ravel())
    return labels, areas


def remove_small_regions(mask, min_area: int = 50, connectivity: int = 8):
    """Erase connected foreground components smaller than ``min_area`` pixels;
    a component of exactly ``min_area`` pixels survives."""
    if min_area < 0:
        raise ConfigError(f"min_area must be non-negative, got {min_area}")
    mask = np.asarray(mask)
    out = (mask != 0).astype(np.uint8)
    if min_area == 0 or not out.any():
        return out
    labels, areas = label_components(out, connectivity)
    small = areas < min_area
    small[0] = False
    out[small[labels]] = 0
    return out

"""Sparse depth-label handling: beam structure, decimation, median scaling.

Labels mimic a rotating range sensor: each beam occupies one raster row in
the lower image region, with a configurable number of samples per row.
Beams are discrete row groups rather than 3-D elevation rings; that keeps
the decimation combinatorics intact while staying camera-frame native.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NoSupervisionError


@dataclass
class SparseDepth:
    """Sparse labels: depth raster (0 = no label), per-pixel beam id
    (-1 = no beam) and the nominal beam count of the generating sensor."""

    depth: np.ndarray
    beam_id: np.ndarray
    num_beams: int

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.beam_id = np.asarray(self.beam_id, dtype=np.int64)
        if self.depth.shape != self.beam_id.shape:
            raise DimensionError(
                f"depth {self.depth.shape} and beam_id {self.beam_id.shape} differ"
            )
        labeled = self.depth > 0
        if not ((self.beam_id >= 0) == labeled).all():
            raise ValueError("beam_id must be >= 0 exactly where depth > 0")
        if labeled.any() and int(self.beam_id.max()) >= self.num_beams:
            raise ValueError("beam_id must be < num_beams")

    @property
    def n_labels(self) -> int:
        return int((self.depth > 0).sum())

    def copy(self) -> "SparseDepth":
        return SparseDepth(self.depth.copy(), self.beam_id.copy(), self.num_beams)


@dataclass(frozen=True)
class DecimationSpec:
    """Keep ``keep_beams`` equally spaced beams, the top one shifted by
    ``offset`` rows of the beam grid."""

    keep_beams: int
    offset: int = 0

    def validate(self, num_beams: int) -> int:
        """Check against a sensor's beam count; returns the beam stride."""
        if self.keep_beams < 1 or num_beams % self.keep_beams:
            raise ConfigError(
                f"keep_beams={self.keep_beams} must divide num_beams={num_beams}"
            )
        stride = num_beams // self.keep_beams
        if stride & (stride - 1):
            raise ConfigError(
                f"num_beams/keep_beams={stride} must be a power of two"
            )
        if not 0 <= self.offset < stride:
            raise ConfigError(
                f"offset={self.offset} must be in [0, {stride}) for keep_beams={self.keep_beams}"
            )
        return stride


def decimate(labels: SparseDepth, spec: DecimationSpec) -> SparseDepth:
    """Retain exactly the labels whose beam id is ``offset`` modulo the
    beam stride; everything else is zeroed. num_beams is unchanged."""
    stride = spec.validate(labels.num_beams)
    keep = (labels.beam_id >= 0) & (labels.beam_id % stride == spec.offset)
    return SparseDepth(
        depth=np.where(keep, labels.depth, 0.0),
        beam_id=np.where(keep, labels.beam_id, -1),
        num_beams=labels.num_beams,
    )


def median_scale(pred: np.ndarray, gt: SparseDepth) -> tuple[np.ndarray, float]:
    """Rescale the prediction by median(gt) / median(pred) over shared
    valid pixels; returns (scaled prediction, scale factor)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.depth.shape:
        raise DimensionError(f"pred {pred.shape} does not match labels {gt.depth.shape}")
    shared = (gt.depth > 0) & (pred > 0)
    if not shared.any():
        raise NoSupervisionError("no shared valid pixel for median scaling")
    med_gt = float(np.median(gt.depth[shared]))
    med_pred = float(np.median(pred[shared]))
    if med_gt <= 0 or med_pred <= 0:
        raise NoSupervisionError("non-positive median depth")
    scale = med_gt / med_pred
    return pred * scale, scale


def synth_lidar(
    gt_depth: np.ndarray,
    num_beams: int,
    px_per_beam: int,
    top_row: int | None = None,
    row_spacing: int | None = None,
    seed: int = 0,
) -> SparseDepth:
    """Sample ground-truth depth on a synthetic beam pattern.

    Beam b lands on raster row top_row + b * row_spacing and samples
    px_per_beam evenly spaced columns (phase drawn from the seed, per beam).
    By default beams cover only the lower two thirds of the image, mimicking
    where a forward-facing range sensor actually intersects the camera view.
    """
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    h, w = gt_depth.shape
    if num_beams < 1:
        raise ConfigError(f"num_beams must be >= 1, got {num_beams}")
    if not 1 <= px_per_beam <= w:
        raise ConfigError(f"px_per_beam must be in [1, {w}], got {px_per_beam}")
    if top_row is None:
        top_row = h // 3
    if row_spacing is None:
        row_spacing = max(1, (h - 1 - top_row) // max(num_beams - 1, 1))
    last_row = top_row + (num_beams - 1) * row_spacing
    if top_row < 0 or row_spacing < 1 or last_row > h - 1:
        raise ConfigError(
            f"{num_beams} beams at spacing {row_spacing} from row {top_row} "
            f"do not fit image height {h}"
        )

    rng = np.random.default_rng(seed)
    col_stride = w // px_per_beam
    depth = np.zeros((h, w))
    beam_id = np.full((h, w), -1, dtype=np.int64)
    for b in range(num_beams):
        row = top_row + b * row_spacing
        phase = int(rng.integers(0, col_stride))
        cols = phase + col_stride * np.arange(px_per_beam)
        cols = cols[cols < w]
        good = gt_depth[row, cols] > 0
        cols = cols[good]
        depth[row, cols] = gt_depth[row, cols]
        beam_id[row, cols] = b
    return SparseDepth(depth=depth, beam_id=beam_id, num_beams=num_beams)


def random_labels(gt_depth: np.ndarray, fraction: float, seed: int = 0) -> SparseDepth:
    """Label a random pixel subset (single-beam structure); handy for
    experiments phrased as 'x% labeled pixels' rather than beam counts."""
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    h, w = gt_depth.shape
    n = max(1, int(round(fraction * h * w)))
    rng = np.random.default_rng(seed)
    flat = rng.choice(h * w, size=n, replace=False)
    mask = np.zeros(h * w, dtype=bool)
    mask[flat] = True
    mask = mask.reshape(h, w) & (gt_depth > 0)
    depth = np.where(mask, gt_depth, 0.0)
    beam_id = np.where(mask, 0, -1)
    return SparseDepth(depth=depth, beam_id=beam_id, num_beams=1)

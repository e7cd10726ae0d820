"""Conventional feature pipelines and the CART classifier they feed.

Feature extractors take preprocessed trials (not z-scored). Row order of
every feature vector follows the channel layout.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .dataio import DEFAULT_LAYOUT, ChannelLayout, DataError, Hand, TrialRecord
from .hrf import HrfParams, canonical_hrf, hrf_kernel

log = logging.getLogger(__name__)

GLM_SEGMENT_S = 20.0
N_BETAS = 5
ACTIVE_WINDOW_S = (5.0, 19.0)
BASELINE_WINDOW_S = (0.0, 2.0)

__all__ = [
    "HrfParams", "canonical_hrf", "DesignMatrix", "build_design", "glm_betas", "glm_features",
    "FeatureKind", "FeatureVector", "HpcaProjection", "hpca_fit", "hpca_apply",
    "li_features", "delta_hb_features", "TreeModel", "tree_fit", "tree_predict",
]


class FeatureKind(str, enum.Enum):
    GLM = "GLM"
    GLM_HPCA = "GLMhPCA"
    LI = "LI"
    DELTA_HB = "DeltaHb"

    @property
    def dim(self) -> int:
        return {"GLM": 240, "GLMhPCA": 10, "LI": 24, "DeltaHb": 48}[self.value]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    kind: FeatureKind

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        kind = FeatureKind(self.kind)
        if values.size != kind.dim:
            raise ValueError(f"{kind.value} features have {kind.dim} dims, got {values.size}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", kind)

    def __len__(self) -> int:
        return self.values.size


# ---------------------------------------------------------------------------
# GLM


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    segments: tuple[tuple[int, int], ...]


def build_design(n_samples: int, fs: float, p: HrfParams = HrfParams(), kernel: np.ndarray | None = None) -> DesignMatrix:
    """Five chronological boxcars (one per fifth of the window) convolved with the HRF.

    ``kernel`` overrides the sampled HRF, e.g. ``[1.0]`` for raw boxcars.
    """
    if n_samples < 2 * N_BETAS:
        raise ValueError(f"need at least {2 * N_BETAS} samples, got {n_samples}")
    h = hrf_kernel(fs, p) if kernel is None else np.asarray(kernel, dtype=np.float64)
    bounds = np.linspace(0, n_samples, N_BETAS + 1).round().astype(int)
    segments = tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
    cols = []
    for a, b in segments:
        box = np.zeros(n_samples)
        box[a:b] = 1.0
        cols.append(np.convolve(box, h)[:n_samples])
    D = np.column_stack(cols)
    if np.linalg.matrix_rank(D) < N_BETAS:
        raise ValueError("design matrix is rank deficient after HRF convolution")
    return DesignMatrix(D, segments)


def glm_betas(y, D: DesignMatrix) -> np.ndarray:
    """Least-squares betas of ``y`` (or each row of a 2-D ``y``) on ``D`` plus an intercept."""
    y = np.asarray(y, dtype=np.float64)
    X = np.column_stack([D.matrix, np.ones(D.matrix.shape[0])])
    if y.shape[-1] != X.shape[0]:
        raise ValueError(f"series length {y.shape[-1]} does not match design rows {X.shape[0]}")
    beta, *_ = np.linalg.lstsq(X, y.reshape(-1, X.shape[0]).T, rcond=None)
    beta = beta[:N_BETAS].T
    return beta[0] if y.ndim == 1 else beta


_design_cache: dict = {}


def glm_features(trial: TrialRecord, p: HrfParams = HrfParams()) -> FeatureVector:
    n = int(round(GLM_SEGMENT_S * trial.fs))
    if trial.n_samples < n:
        raise DataError(f"trial {trial.trial_id} shorter than the {GLM_SEGMENT_S}s GLM segment")
    key = (n, trial.fs, p)
    if key not in _design_cache:
        _design_cache[key] = build_design(n, trial.fs, p)
    betas = glm_betas(trial.data[:, :n], _design_cache[key])
    return FeatureVector(betas.ravel(), FeatureKind.GLM)


# ---------------------------------------------------------------------------
# hierarchical PCA


def _first_direction(samples: np.ndarray) -> np.ndarray:
    """Leading principal direction of ``samples`` (n_examples x d), sign-fixed.

    The largest-magnitude loading is made positive; among loadings tied in
    magnitude the first one wins.
    """
    centered = samples - samples.mean(axis=0)
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-12 * max(1.0, np.abs(samples).max() ** 2):
        log.warning("zero-variance group in hPCA fit; using the first unit vector")
        w = np.zeros(samples.shape[1])
        w[0] = 1.0
        return w
    w = evecs[:, -1]
    mag = np.abs(w)
    lead = int(np.flatnonzero(mag >= mag.max() - 1e-12)[0])
    return w if w[lead] > 0 else -w


@dataclass(frozen=True)
class HpcaProjection:
    """Step-1 directions ``(n_channels, 5, 2)`` and step-2 directions ``(2, 5, channels_per_hemisphere)``."""

    pair_dirs: np.ndarray
    hemi_dirs: np.ndarray
    layout: ChannelLayout = DEFAULT_LAYOUT

    def step1(self, glm: np.ndarray) -> np.ndarray:
        """(..., 240) GLM features -> (..., n_channels, 5) pair scores."""
        b = glm.reshape(glm.shape[:-1] + (self.layout.n_optode_channels, 2, N_BETAS))
        return np.einsum("...chj,cjh->...cj", b, self.pair_dirs)

    def step2(self, scores: np.ndarray) -> np.ndarray:
        half = self.layout.channels_per_hemisphere
        left = np.einsum("...cj,jc->...j", scores[..., :half, :], self.hemi_dirs[0])
        right = np.einsum("...cj,jc->...j", scores[..., half:, :], self.hemi_dirs[1])
        return np.concatenate([left, right], axis=-1)


def _as_matrix(fvs, kind: FeatureKind) -> np.ndarray:
    rows = []
    for fv in fvs:
        if isinstance(fv, FeatureVector):
            if fv.kind != kind:
                raise ValueError(f"expected {kind.value} features, got {fv.kind.value}")
            rows.append(fv.values)
        else:
            rows.append(np.asarray(fv, dtype=np.float64))
    return np.vstack(rows)


def hpca_fit(train_features, layout: ChannelLayout = DEFAULT_LAYOUT) -> HpcaProjection:
    """Fit both PCA stages on training GLM vectors only.

    Stage 1: per (channel, beta index) one direction over the (HbO, HbR)
    beta pair. Stage 2: per (hemisphere, beta index) one direction over the
    hemisphere's channel scores.
    """
    G = _as_matrix(train_features, FeatureKind.GLM)
    if G.shape[0] < 2:
        raise ValueError("hPCA needs at least 2 training vectors")
    n_ch = layout.n_optode_channels
    b = G.reshape(-1, n_ch, 2, N_BETAS)
    pair_dirs = np.empty((n_ch, N_BETAS, 2))
    for c in range(n_ch):
        for j in range(N_BETAS):
            pair_dirs[c, j] = _first_direction(b[:, c, :, j])
    partial = HpcaProjection(pair_dirs, np.zeros((2, N_BETAS, layout.channels_per_hemisphere)), layout)
    scores = partial.step1(G)
    half = layout.channels_per_hemisphere
    hemi_dirs = np.empty((2, N_BETAS, half))
    for h, rows in enumerate((slice(0, half), slice(half, n_ch))):
        for j in range(N_BETAS):
            hemi_dirs[h, j] = _first_direction(scores[:, rows, j])
    return HpcaProjection(pair_dirs, hemi_dirs, layout)


def hpca_apply(proj: HpcaProjection, fv) -> FeatureVector:
    g = fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)
    return FeatureVector(proj.step2(proj.step1(g)), FeatureKind.GLM_HPCA)


# ---------------------------------------------------------------------------
# activation features


def _window_mean(data: np.ndarray, fs: float, window: tuple[float, float]) -> np.ndarray:
    a, b = int(round(window[0] * fs)), int(round(window[1] * fs))
    return data[:, a:b].mean(axis=1)


def _activation(trial: TrialRecord) -> np.ndarray:
    need = int(round(ACTIVE_WINDOW_S[1] * trial.fs))
    if trial.n_samples < need:
        raise DataError(f"trial {trial.trial_id} shorter than {ACTIVE_WINDOW_S[1]}s")
    return _window_mean(trial.data, trial.fs, ACTIVE_WINDOW_S) - _window_mean(trial.data, trial.fs, BASELINE_WINDOW_S)


def delta_hb_features(trial: TrialRecord) -> FeatureVector:
    """Baseline-corrected mean concentration change per row."""
    return FeatureVector(_activation(trial), FeatureKind.DELTA_HB)


def li_features(trial: TrialRecord, layout: ChannelLayout = DEFAULT_LAYOUT) -> FeatureVector:
    """Lateralisation index per symmetric pair and Hb type; positive = right dominance.

    Ordered ``[pair0 HbO, pair0 HbR, pair1 HbO, ...]``.
    """
    act = _activation(trial)
    out = np.empty(2 * len(layout.symmetric_pairs))
    for p, (left, right) in enumerate(layout.symmetric_pairs):
        for hb in range(2):
            a_l, a_r = act[2 * left + hb], act[2 * right + hb]
            out[2 * p + hb] = (a_r - a_l) / (abs(a_l) + abs(a_r) + 1e-12)
    return FeatureVector(out, FeatureKind.LI)


# ---------------------------------------------------------------------------
# CART


@dataclass
class TreeNode:
    counts: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def label(self) -> Hand:
        return Hand.RIGHT if self.counts[1] > self.counts[0] else Hand.LEFT


@dataclass
class TreeModel:
    root: TreeNode
    n_features: int

    @property
    def depth(self) -> int:
        def _d(node):
            return 0 if node.is_leaf else 1 + max(_d(node.left), _d(node.right))
        return _d(self.root)

    @property
    def n_leaves(self) -> int:
        def _n(node):
            return 1 if node.is_leaf else _n(node.left) + _n(node.right)
        return _n(self.root)


def _gini(counts: np.ndarray) -> np.ndarray:
    total = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / total[..., None]
    return np.where(total > 0, 1.0 - (p * p).sum(axis=-1), 0.0)


def _best_split(X: np.ndarray, y: np.ndarray):
    """Highest Gini gain over all features and midpoints; ties -> lower feature, lower threshold.

    Zero-gain splits are still returned (XOR-like nodes need them to reach
    purity); ``feature == -1`` means no non-trivial split exists.
    """
    n = y.size
    counts = np.bincount(y, minlength=2).astype(np.float64)
    parent = _gini(counts)
    best = (-np.inf, -1, 0.0)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        valid = np.flatnonzero(xs[1:] > xs[:-1])
        if valid.size == 0:
            continue
        left_right = np.cumsum(ys)[valid]
        n_left = (valid + 1).astype(np.float64)
        left_counts = np.column_stack([n_left - left_right, left_right])
        right_counts = counts - left_counts
        child = (n_left * _gini(left_counts) + (n - n_left) * _gini(right_counts)) / n
        gain = parent - child
        k = int(np.argmax(gain))  # first maximum = lowest threshold
        if gain[k] > best[0] + 1e-12:
            best = (float(gain[k]), f, 0.5 * (xs[valid[k]] + xs[valid[k] + 1]))
    return best


def tree_fit(X, y, min_samples_split: int = 2, max_depth: int | None = None) -> TreeModel:
    """Unpruned CART with Gini impurity on labels 0 = Left, 1 = Right."""
    X = _as_feature_matrix(X)
    y = np.asarray([int(Hand.parse(v)) for v in y], dtype=np.intp)
    if X.shape[0] != y.size or y.size < 2:
        raise ValueError("need at least 2 examples with one label each")
    if np.unique(y).size < 2:
        raise ValueError("tree_fit needs both classes present")

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        yy = y[idx]
        node = TreeNode(np.bincount(yy, minlength=2))
        if idx.size < min_samples_split or node.counts.min() == 0:
            return node
        if max_depth is not None and depth >= max_depth:
            return node
        _, f, thr = _best_split(X[idx], yy)
        if f < 0:
            return node
        go_left = X[idx, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node

    return TreeModel(grow(np.arange(y.size), 0), X.shape[1])


def _as_feature_matrix(X) -> np.ndarray:
    if isinstance(X, np.ndarray):
        return np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.vstack([fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64) for fv in X])


def tree_predict(model: TreeModel, fv) -> Hand:
    x = fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)
    if x.size != model.n_features:
        raise ValueError(f"tree expects {model.n_features} features, got {x.size}")
    node = model.root
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.label


def tree_predict_many(model: TreeModel, X) -> np.ndarray:
    X = _as_feature_matrix(X)
    return np.array([int(tree_predict(model, row)) for row in X], dtype=np.intp)


def export_features_csv(features, labels, path) -> None:
    """One row per trial, label column last."""
    X = _as_feature_matrix(features)
    names = [f"f{i:03d}" for i in range(X.shape[1])] + ["label"]
    lines = [",".join(names)]
    for row, lab in zip(X, labels):
        lines.append(",".join(f"{v:.17g}" for v in row) + "," + Hand.parse(lab).label)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

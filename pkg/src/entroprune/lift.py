"""Lifting a convolutional layer to a linear regression problem.

Each output position of a conv layer is one linear equation: the response
is the M-vector of output channels there, the feature vector gathers the
k x k input window of every channel. Feature layout is fixed throughout
the toolkit: channel-major, row-major inside each window, so row
``d * k^2 + (dy * k + dx)`` of the feature matrix holds input channel d at
window offset (dy, dx). Kernel matrices use the same layout, which makes
``kernels_as_rows(Q) @ features`` reproduce the convolution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dumps import ConvGeometry, LayerDump
from .errors import ValidationError
from .measures import check_distribution

#: positions are gathered into the feature matrix in chunks of this many
#: columns to bound peak memory on wide layers
_GATHER_CHUNK = 8192


@dataclass
class RegressionDataset:
    """Lifted point set for one layer.

    features: (k^2 * D, n) columns of gathered input windows
    responses: (M, n) matching output-channel columns
    origin: (n, 3) int array of (sample, out_row, out_col) provenance triples
    """

    features: np.ndarray
    responses: np.ndarray
    geometry: ConvGeometry
    origin: np.ndarray
    _stats: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        g = self.geometry
        if self.features.shape[0] != g.kernel**2 * g.in_channels:
            raise ValidationError(
                f"feature rows {self.features.shape[0]} != k^2*D "
                f"({g.kernel**2 * g.in_channels})"
            )
        if self.responses.shape[0] != g.out_channels:
            raise ValidationError(
                f"response rows {self.responses.shape[0]} != M ({g.out_channels})"
            )
        if self.features.shape[1] != self.responses.shape[1]:
            raise ValidationError("features and responses disagree on point count")
        if self.origin.shape != (self.features.shape[1], 3):
            raise ValidationError("origin must be an (n, 3) array")

    @property
    def num_points(self) -> int:
        return self.features.shape[1]

    def stats(self) -> dict:
        """Cached point-count-sized contractions reused across solver steps:
        feature Gram, feature/response row sums, feature-response cross, and
        the total response energy. All independent of w and the coefficients.
        """
        if self._stats is None:
            self._stats = {
                "feat_gram": self.features @ self.features.T,
                "feat_sums": self.features.sum(axis=1),
                "resp_sums": self.responses.sum(axis=1),
                "cross": self.features @ self.responses.T,
                "resp_energy": float((self.responses * self.responses).sum()),
            }
        return self._stats


def extract_patches(dump: LayerDump, positions) -> RegressionDataset:
    """Gather input windows and output vectors at the given output positions.

    `positions` is a sequence of (sample, out_row, out_col) triples in the
    output spatial domain. Windows falling outside the image are zero
    (zero padding). Column order follows the positions list.
    """
    g = dump.geometry
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValidationError("positions must be (n, 3) triples")
    t_count = dump.num_samples
    oh, ow = dump.out_shape
    if pos.size and (
        pos.min() < 0
        or pos[:, 0].max() >= t_count
        or pos[:, 1].max() >= oh
        or pos[:, 2].max() >= ow
    ):
        raise IndexError("position outside the dump's output domain")

    k, d = g.kernel, g.in_channels
    n = pos.shape[0]
    _, _, h, w = dump.inputs.shape
    padded = np.pad(
        dump.inputs, ((0, 0), (0, 0), (g.padding, g.padding), (g.padding, g.padding))
    )
    # all valid k x k windows as a zero-copy view: (T, D, H+2p-k+1, W+2p-k+1, k, k)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))

    features = np.empty((k * k * d, n), dtype=np.float64)
    for start in range(0, n, _GATHER_CHUNK):
        sel = pos[start : start + _GATHER_CHUNK]
        gathered = windows[sel[:, 0], :, sel[:, 1] * g.stride, sel[:, 2] * g.stride]
        # (chunk, D, k, k) row-major flatten == channel-major window layout
        features[:, start : start + sel.shape[0]] = gathered.reshape(sel.shape[0], -1).T

    responses = dump.outputs[pos[:, 0], :, pos[:, 1], pos[:, 2]].T.copy()
    return RegressionDataset(features=features, responses=responses, geometry=g, origin=pos)


def all_positions(dump: LayerDump) -> np.ndarray:
    """Every output position of the dump, sample-major then row-major."""
    oh, ow = dump.out_shape
    t = dump.num_samples
    grid = np.indices((t, oh, ow)).reshape(3, -1).T
    return np.ascontiguousarray(grid, dtype=np.int64)


def vectorize_kernels(kernels: np.ndarray) -> np.ndarray:
    """Flatten a (D, M, k, k) kernel stack into an (M, k^2*D) matrix.

    Row j concatenates, over input channels d, the row-major flattening of
    kernel (d, j). Exact inverse of `devectorize_kernels`.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ValidationError(f"kernel stack must be (D, M, k, k), got {kernels.shape}")
    d, m, k, _ = kernels.shape
    # (D, M, k, k) -> (M, D, k*k) -> (M, D*k*k)
    return kernels.transpose(1, 0, 2, 3).reshape(m, d * k * k)


def devectorize_kernels(rows: np.ndarray, geometry: ConvGeometry) -> np.ndarray:
    """Inverse of `vectorize_kernels`: (M, k^2*D) rows back to (D, M, k, k)."""
    rows = np.asarray(rows, dtype=np.float64)
    k = geometry.kernel
    if rows.ndim != 2:
        raise ValidationError("expected a 2-d kernel-row matrix")
    m, cols = rows.shape
    if cols % (k * k) != 0:
        raise ValidationError(f"{cols} columns not divisible by k^2 = {k * k}")
    d = cols // (k * k)
    return rows.reshape(m, d, k, k).transpose(1, 0, 2, 3).copy()


def apply_channel_weights(features: np.ndarray, w) -> np.ndarray:
    """Scale each channel's k^2 feature rows by that channel's weight.

    Equivalent to multiplying by the block diagonal diag(w_1 ... w_1, ...,
    w_D ... w_D) with each weight repeated k^2 times.
    """
    w = check_distribution(w)
    rows = features.shape[0]
    if rows % w.size != 0:
        raise ValidationError(
            f"feature rows {rows} not divisible by channel count {w.size}"
        )
    square = rows // w.size
    return features * np.repeat(w, square)[:, None]


def expand_channel_weights(w: np.ndarray, square: int) -> np.ndarray:
    """The diagonal of D(w): each channel weight repeated `square` times."""
    return np.repeat(np.asarray(w, dtype=np.float64), square)

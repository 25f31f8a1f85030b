"""Periodized Daubechies-4 wavelet packet decomposition and band reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import AlignmentError, ShapeError

DEFAULT_DEPTH = 4
NYQUIST_HZ = 64.0

# db4 (8-tap) orthonormal scaling filter, synthesis orientation.
DB4_LOW = np.array(
    [
        0.2303778133088965,
        0.7148465705529157,
        0.6308807679298589,
        -0.027983769416859854,
        -0.18703481171909309,
        0.030841381835560764,
        0.0328830116668852,
        -0.010597401785069032,
    ]
)


@dataclass(frozen=True)
class FilterPair:
    low: np.ndarray
    high: np.ndarray
    synth_low: np.ndarray
    synth_high: np.ndarray

    @classmethod
    def from_scaling(cls, scaling: np.ndarray) -> "FilterPair":
        g = np.asarray(scaling, dtype=np.float64)
        # quadrature mirror: h[k] = (-1)^k g[N-1-k]
        h = g[::-1] * (-1.0) ** np.arange(len(g))
        return cls(low=g[::-1].copy(), high=h[::-1].copy(), synth_low=g.copy(), synth_high=h)


DB4 = FilterPair.from_scaling(DB4_LOW)


@lru_cache(maxsize=32)
def _analysis_matrix(n: int) -> np.ndarray:
    """Orthogonal n x n one-level split: rows [0, n/2) low-pass, [n/2, n) high-pass.

    Row i of the low half is the synthesis filter shifted by 2i with periodic
    wrap, so the matrix is its own inverse-transpose.
    """
    half = n // 2
    mat = np.zeros((n, n))
    filters = DB4
    taps = len(filters.synth_low)
    for i in range(half):
        for k in range(taps):
            col = (2 * i + k) % n
            mat[i, col] += filters.synth_low[k]
            mat[half + i, col] += filters.synth_high[k]
    mat.setflags(write=False)
    return mat


def _split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[-1]
    y = x @ _analysis_matrix(n).T
    return y[..., : n // 2], y[..., n // 2 :]


def _merge(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    n = 2 * lo.shape[-1]
    return np.concatenate([lo, hi], axis=-1) @ _analysis_matrix(n)


@dataclass
class WaveletPacketTree:
    """Full binary tree of coefficients.

    ``levels[d]`` has shape ``(..., 2**d, L / 2**d)`` with nodes in tree
    (Paley) order: node ``2j`` and ``2j+1`` are the low/high children of node
    ``j`` one level up. Use :func:`frequency_order` to map to frequency order.
    """

    levels: list[np.ndarray]
    sample_rate_hz: float = 2 * NYQUIST_HZ

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def length(self) -> int:
        return self.levels[0].shape[-1]

    def leaves(self, order: str = "freq") -> np.ndarray:
        leaves = self.levels[-1]
        if order == "freq":
            return leaves[..., frequency_order(self.depth), :]
        return leaves


@lru_cache(maxsize=16)
def frequency_order(depth: int) -> np.ndarray:
    """Tree-node indices sorted by frequency: ``out[f]`` is the node covering band f.

    A high-pass branch mirrors the spectrum, so a child's frequency slot is
    ``2f + (bit XOR parity(f))``; this is Gray-code decoding of the path.
    """
    freq_of_node = np.zeros(1, dtype=np.int64)
    for _ in range(depth):
        parity = freq_of_node & 1
        children = np.empty(2 * len(freq_of_node), dtype=np.int64)
        children[0::2] = 2 * freq_of_node + parity
        children[1::2] = 2 * freq_of_node + (1 - parity)
        freq_of_node = children
    out = np.argsort(freq_of_node)
    out.setflags(write=False)
    return out


def wpd_analyze(x: np.ndarray, depth: int = DEFAULT_DEPTH, sample_rate_hz: float = 2 * NYQUIST_HZ) -> WaveletPacketTree:
    """Decompose the last axis of ``x`` into a full packet tree of the given depth."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if depth < 1:
        raise ShapeError(f"depth must be >= 1, got {depth}")
    if n % (2**depth):
        raise ShapeError(f"signal length {n} not divisible by 2**{depth}")
    levels = [x[..., None, :]]
    for _ in range(depth):
        lo, hi = _split(levels[-1])
        nxt = np.empty(lo.shape[:-2] + (2 * lo.shape[-2], lo.shape[-1]))
        nxt[..., 0::2, :] = lo
        nxt[..., 1::2, :] = hi
        levels.append(nxt)
    return WaveletPacketTree(levels, sample_rate_hz)


def wpd_synthesize(leaves: np.ndarray) -> np.ndarray:
    """Invert a tree level given in tree order, shape ``(..., 2**d, m)``."""
    cur = leaves
    while cur.shape[-2] > 1:
        cur = _merge(cur[..., 0::2, :], cur[..., 1::2, :])[..., :, :]
    return cur[..., 0, :]


def leaf_mask(tree_depth: int, band: tuple[float, float], sample_rate_hz: float = 2 * NYQUIST_HZ) -> np.ndarray:
    """Boolean mask over tree-order leaves selecting the band ``[lo, hi)``."""
    lo, hi = band
    nyq = sample_rate_hz / 2
    width = nyq / 2**tree_depth
    start, stop = lo / width, hi / width
    if not (np.isclose(start, round(start)) and np.isclose(stop, round(stop))):
        raise AlignmentError(f"band {lo}-{hi} Hz not aligned to {width} Hz leaves")
    start, stop = int(round(start)), int(round(stop))
    if not 0 <= start <= stop <= 2**tree_depth:
        raise AlignmentError(f"band {lo}-{hi} Hz outside 0-{nyq} Hz")
    mask = np.zeros(2**tree_depth, dtype=bool)
    mask[frequency_order(tree_depth)[start:stop]] = True
    return mask


def band_reconstruct(tree: WaveletPacketTree, band: tuple[float, float]) -> np.ndarray:
    """Inverse transform with every leaf outside ``band`` zeroed."""
    mask = leaf_mask(tree.depth, band, tree.sample_rate_hz)
    leaves = np.where(mask[:, None], tree.levels[-1], 0.0)
    return wpd_synthesize(leaves)


@dataclass(frozen=True)
class BandGrouping:
    """Branch layout. If ``residual_name`` is set the reconstruction residual is
    added to the band of that name, or appended as its own branch when no band
    carries the name."""

    bands: tuple[tuple[str, float, float], ...]
    include_residual: bool = True
    residual_name: str | None = "other"

    def __post_init__(self):
        prev_hi = 0.0
        for name, lo, hi in self.bands:
            if not (0 <= lo < hi <= NYQUIST_HZ) or lo < prev_hi:
                raise ValueError(f"band {name} ({lo}-{hi}) overlaps, is unordered or leaves 0-{NYQUIST_HZ} Hz")
            prev_hi = hi

    @property
    def names(self) -> tuple[str, ...]:
        names = tuple(name for name, _, _ in self.bands)
        if self.include_residual and self.residual_name not in names:
            names += (self.residual_name,)
        return names

    @property
    def num_branches(self) -> int:
        return len(self.names)


def band_grouping_preset(num_branches: int) -> BandGrouping:
    if num_branches == 6:
        return BandGrouping(
            (("delta", 0, 4), ("theta", 4, 8), ("alpha", 8, 16), ("beta", 16, 32), ("gamma", 32, 64)),
            residual_name="other",
        )
    if num_branches == 3:
        return BandGrouping(
            (("delta_theta", 0, 8), ("alpha_beta", 8, 32), ("gamma_other", 32, 64)),
            residual_name="gamma_other",
        )
    if num_branches == 2:
        return BandGrouping((("low", 0, 16), ("high", 16, 64)), residual_name="high")
    raise ValueError(f"no band grouping preset for {num_branches} branches (use 2, 3 or 6)")


@dataclass
class BandSet:
    window_id: str
    signals: dict[str, np.ndarray]


def decompose_array(x: np.ndarray, grouping: BandGrouping, depth: int = DEFAULT_DEPTH) -> np.ndarray:
    """Band signals for the last axis of ``x``; returns shape ``(..., B, L)`` with
    the branch axis inserted just before time."""
    x = np.asarray(x, dtype=np.float64)
    tree = wpd_analyze(x, depth)
    recon = {name: band_reconstruct(tree, (lo, hi)) for name, lo, hi in grouping.bands}
    if grouping.include_residual:
        residual = x - sum(recon.values()) if recon else x.copy()
        if grouping.residual_name in recon:
            recon[grouping.residual_name] = recon[grouping.residual_name] + residual
        else:
            recon[grouping.residual_name] = residual
    return np.stack([recon[name] for name in grouping.names], axis=-2)


def decompose_bands(window, grouping: BandGrouping | None = None, depth: int = DEFAULT_DEPTH) -> BandSet:
    """Per-channel packet decomposition of an :class:`~mbmd.data.EegWindow`."""
    grouping = grouping or band_grouping_preset(6)
    if window.sample_rate_hz != 2 * NYQUIST_HZ:
        raise ShapeError(f"window must be at {2 * NYQUIST_HZ} Hz, got {window.sample_rate_hz}")
    stacked = decompose_array(window.samples, grouping, depth)  # (C, B, L)
    return BandSet(window.window_id, {name: stacked[:, i, :] for i, name in enumerate(grouping.names)})


def attach_bands(windows, grouping: BandGrouping, depth: int = DEFAULT_DEPTH, chunk: int = 256):
    """Fill ``windows.bands`` (a :class:`~mbmd.data.WindowSet`) as ``(n, B, C, L)`` float32."""
    parts = []
    for start in range(0, len(windows), chunk):
        part = decompose_array(windows.x[start : start + chunk], grouping, depth)  # (n, C, B, L)
        parts.append(np.swapaxes(part, 1, 2).astype(np.float32))
    windows.bands = np.concatenate(parts)
    windows.band_names = grouping.names
    return windows

"""SRP-PHAT-HSDA scanning and potential source extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontend import EPSILON, msw_filter, pair_gcc, stft
from .tdoa import GridTables, TdoaTables


@dataclass(frozen=True)
class PotentialSource:
    doa: np.ndarray
    energy: float
    frame: int = 0
    index: int = -1
    valid: bool = True


@dataclass
class GccSet:
    """GCC-PHAT frames of the computed pairs and their MSW-filtered copies.

    ``pairs`` indexes into ``ArrayConfig.pairs``; rows of ``raw``,
    ``coarse`` and ``fine`` follow that order.
    """

    pairs: np.ndarray
    raw: np.ndarray
    coarse: np.ndarray | None
    fine: np.ndarray

    def copy(self) -> "GccSet":
        return GccSet(
            self.pairs,
            self.raw,
            None if self.coarse is None else self.coarse.copy(),
            self.fine.copy(),
        )


@dataclass(frozen=True)
class ScanResult:
    index: int
    direction: np.ndarray
    energy: float
    visited: int
    valid: bool = True


class _SideIndex:
    """Flat gather indices and normalized weights for one grid."""

    def __init__(self, side: GridTables, pairs: np.ndarray, n: int):
        tau = side.tau[pairs]  # (P, K)
        mask = side.masks.per_direction_pair[pairs]
        local = np.arange(len(pairs))[:, None]
        self.index = np.ascontiguousarray((local * n + np.mod(tau, n)).T)  # (K, P)
        count = mask.sum(axis=0)
        self.weight = np.ascontiguousarray((mask / (count + EPSILON)).T)  # (K, P)
        self.active = np.nonzero(count > 0)[0]
        self.points = side.grid.points
        self.half_width = side.half_width[pairs]
        self.tau = tau
        self.mask = mask

    def energies(self, flat: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        if cols is None:
            return np.einsum("kp,kp->k", flat[self.index], self.weight)
        return np.einsum("kp,kp->k", flat[self.index[cols]], self.weight[cols])

    def energies_block(self, flat: np.ndarray, block: tuple) -> np.ndarray:
        index, weight = block
        return np.einsum("kp,kp->k", flat[index], weight)

    def block(self, cols: np.ndarray) -> tuple:
        return np.ascontiguousarray(self.index[cols]), np.ascontiguousarray(self.weight[cols])


def _argmax_lowest(values: np.ndarray) -> int:
    return int(np.argmax(values))


class Localizer:
    """Per-frame potential source extraction from calibrated tables.

    ``mode`` is ``"hsda"`` (coarse then fine scan through the matching
    matrix) or ``"single"`` (exhaustive scan of the fine grid).
    """

    def __init__(self, tables: TdoaTables, n_sources: int = 4, mode: str = "hsda"):
        if mode not in ("hsda", "single"):
            raise ValueError(f"unknown scan mode {mode!r}")
        if n_sources < 1:
            raise ValueError("need at least one potential source per frame")
        self.tables = tables
        self.mode = mode
        self.n_sources = n_sources
        self.n = tables.frame_size
        used = tables.fine.masks.per_pair.copy()
        if mode == "hsda":
            used |= tables.coarse.masks.per_pair
        self.pair_ids = np.nonzero(used)[0]
        self.fine = _SideIndex(tables.fine, self.pair_ids, self.n)
        self.coarse = _SideIndex(tables.coarse, self.pair_ids, self.n) if mode == "hsda" else None
        fine_active = tables.fine.masks.per_direction
        self.rows = [
            np.nonzero(tables.matching[c] & fine_active)[0] for c in range(tables.coarse.size)
        ]
        top = int(max(self.fine.half_width.max(initial=0),
                      0 if self.coarse is None else self.coarse.half_width.max(initial=0)))
        self._offsets = np.arange(-top, top + 1)
        self.visited: list[int] = []
        self._fine_zero: dict = {}
        self._coarse_zero: dict = {}
        self._row_blocks: dict = {}
        self._masked_rows: dict = {}
        self._coarse_masked = (np.nonzero(~tables.coarse.masks.per_direction)[0]
                               if self.coarse is not None else None)
        self._coarse_block = self.coarse.block(self.coarse.active) if self.coarse is not None else None

    # -------------------------------------------------------------- gcc
    def compute_gcc(self, spectra: np.ndarray, pairs: np.ndarray) -> GccSet:
        """GCC-PHAT plus MSW copies for the active pairs of a (M, N/2+1) spectrum set."""
        r = pair_gcc(spectra, pairs[self.pair_ids])
        fine = msw_filter(r, self.fine.half_width)
        coarse = msw_filter(r, self.coarse.half_width) if self.coarse is not None else None
        return GccSet(self.pair_ids, r, coarse, fine)

    # ------------------------------------------------------------- scans
    def _scan_side(self, side: _SideIndex, flat: np.ndarray, cols: np.ndarray, block: tuple):
        if len(cols) == 0:
            return -1, 0.0
        e = side.energies_block(flat, block)
        j = _argmax_lowest(e)
        return int(cols[j]), float(e[j])

    @staticmethod
    def _with_masked(index: int, energy: float, masked: np.ndarray) -> tuple[int, float]:
        # masked directions score exactly zero; ties go to the lowest index
        if len(masked) == 0 or energy > 0.0:
            return index, energy
        first = int(masked[0])
        if energy < 0.0 or first < index:
            return first, 0.0
        return index, energy

    def _row_masked(self, c: int) -> np.ndarray:
        hit = self._masked_rows.get(c)
        if hit is None:
            linked = np.nonzero(self.tables.matching[c])[0]
            hit = self._masked_rows[c] = linked[~self.tables.fine.masks.per_direction[linked]]
        return hit

    def _row_block(self, c: int) -> tuple:
        hit = self._row_blocks.get(c)
        if hit is None:
            hit = self._row_blocks[c] = self.fine.block(self.rows[c])
        return hit

    def scan_single_grid(self, gcc: GccSet) -> ScanResult:
        """Exhaustive scan of every fine direction; masked directions score zero."""
        side = self.fine
        e = side.energies(gcc.fine.ravel())
        idx = _argmax_lowest(e)
        return ScanResult(idx, side.points[idx], float(e[idx]), len(side.points), valid=bool(len(side.active)))

    def scan_hierarchical(self, gcc: GccSet) -> ScanResult:
        if self.coarse is None:
            raise ValueError("hierarchical scan needs a localizer built in 'hsda' mode")
        c, e_c = self._scan_side(self.coarse, gcc.coarse.ravel(), self.coarse.active, self._coarse_block)
        if c < 0:
            return ScanResult(-1, np.array([0.0, 0.0, 1.0]), 0.0, self.coarse_size, valid=False)
        c, _ = self._with_masked(c, e_c, self._coarse_masked)
        cols = self.rows[c]
        visited = self.coarse_size + len(cols)
        f, energy = np.iinfo(np.int64).max, -np.inf
        if len(cols):
            f, energy = self._scan_side(self.fine, gcc.fine.ravel(), cols, self._row_block(c))
        f, energy = self._with_masked(f, energy, self._row_masked(c))
        if energy == -np.inf:
            # no fine direction links to c; the fine grid keeps its parents
            f, energy = c, 0.0
        return ScanResult(f, self.fine.points[f], energy, visited)

    @property
    def coarse_size(self) -> int:
        return self.tables.coarse.size

    def scan(self, gcc: GccSet) -> ScanResult:
        return self.scan_hierarchical(gcc) if self.mode == "hsda" else self.scan_single_grid(gcc)

    # ------------------------------------------------------- extraction
    def _zero_flat(self, f: int, half_width: np.ndarray, cache: dict) -> np.ndarray:
        """Flat indices of the lags within each active pair's window around fine point ``f``."""
        hit = cache.get(f)
        if hit is not None:
            return hit
        active = np.nonzero(self.fine.mask[:, f])[0]
        off = self._offsets
        keep = np.abs(off)[None, :] <= half_width[active][:, None]
        lags = np.mod(self.fine.tau[active, f][:, None] + off[None, :], self.n)
        flat = (active[:, None] * self.n + lags)[keep]
        cache[f] = flat
        return flat

    def extract(self, gcc: GccSet, frame: int = 0, count: int | None = None) -> list[PotentialSource]:
        """Find ``count`` potential sources, removing each one's peaks before the next scan."""
        count = self.n_sources if count is None else count
        work = gcc.copy()
        out = []
        for _ in range(count):
            res = self.scan(work)
            out.append(PotentialSource(res.direction.copy(), res.energy, frame, res.index, res.valid))
            self.visited.append(res.visited)
            if res.index < 0:
                continue
            work.fine.ravel()[self._zero_flat(res.index, self.fine.half_width, self._fine_zero)] = 0.0
            if work.coarse is not None:
                flat = self._zero_flat(res.index, self.coarse.half_width, self._coarse_zero)
                work.coarse.ravel()[flat] = 0.0
        return out

    def process_frame(self, frame: np.ndarray, pairs: np.ndarray, index: int = 0) -> list[PotentialSource]:
        """Windowed (M, N) frame -> potential sources."""
        return self.extract(self.compute_gcc(stft(frame), pairs), frame=index)


def scan_hierarchical(gcc: GccSet, localizer: Localizer) -> ScanResult:
    return localizer.scan_hierarchical(gcc)


def scan_single_grid(gcc: GccSet, localizer: Localizer) -> ScanResult:
    return localizer.scan_single_grid(gcc)


def extract_potential_sources(gcc: GccSet, localizer: Localizer, count: int) -> list[PotentialSource]:
    return localizer.extract(gcc, count=count)


# -------------------------------------------------------------- metrics

def azimuth_direction(phi_deg, r: float = 3.0, h: float = 1.15) -> np.ndarray:
    """Unit DoA of a source at azimuth ``phi_deg``, range ``r`` and height ``h``."""
    phi = np.radians(np.asarray(phi_deg, dtype=np.float64))
    v = np.stack([r * np.cos(phi), r * np.sin(phi), np.full_like(phi, h)], axis=-1)
    return v / np.sqrt(r * r + h * h)


def evaluate_rmse(potentials, truth_azimuths, r: float = 3.0, h: float = 1.15) -> float:
    """Two-source localization error: mean over the first two potentials of
    the distance to the closer of the two true directions."""
    lam = np.stack([np.asarray(getattr(p, "doa", p), dtype=np.float64) for p in potentials[:2]])
    if len(lam) != 2 or len(truth_azimuths) != 2:
        raise ValueError("the two-source error needs exactly two potentials and two azimuths")
    gam = azimuth_direction(np.asarray(truth_azimuths), r, h)
    dist = np.linalg.norm(lam[:, None, :] - gam[None, :, :], axis=2)
    return float(dist.min(axis=1).mean())

"""Chip geometry, timing, and the synthetic per-cell vulnerability ground truth.

A chip is a ``banks x rows_per_bank x bits_per_row`` array of one-bit cells.
Every cell carries a fixed ground truth: whether it is vulnerable to
RowHammer (RH), RowPress (RP), both or neither, the threshold at which it
first flips, and the single direction in which it can flip.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

FORMAT_VERSION = "1.0"

# sentinel for "this cell has no threshold for that mechanism"
NO_THRESHOLD = np.iinfo(np.int64).max


class FingerprintMismatch(RuntimeError):
    """An artifact was measured on a different chip than the one supplied."""


class Mechanism(IntEnum):
    NONE = 0
    RH = 1
    RP = 2
    BOTH = 3


class FlipDirection(Enum):
    ONE_TO_ZERO = "OneToZero"
    ZERO_TO_ONE = "ZeroToOne"

    @property
    def from_bit(self) -> int:
        return 1 if self is FlipDirection.ONE_TO_ZERO else 0

    @classmethod
    def from_from_bit(cls, bit: int) -> "FlipDirection":
        return cls.ONE_TO_ZERO if bit else cls.ZERO_TO_ONE

    def opposite(self) -> "FlipDirection":
        return FlipDirection.from_from_bit(1 - self.from_bit)


@dataclass(frozen=True)
class ChipGeometry:
    banks: int = 1
    rows_per_bank: int = 128
    bits_per_row: int = 1024

    def __post_init__(self):
        for name in ("banks", "rows_per_bank", "bits_per_row"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.bits_per_row % 8:
            raise ValueError("bits_per_row must be a multiple of 8")

    @property
    def total_cells(self) -> int:
        return self.banks * self.rows_per_bank * self.bits_per_row

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.banks, self.rows_per_bank, self.bits_per_row)

    def flat_index(self, bank, row, column):
        """Flat cell index; works elementwise on arrays."""
        return (np.asarray(bank) * self.rows_per_bank + row) * self.bits_per_row + column

    def unflatten(self, index):
        index = np.asarray(index)
        column = index % self.bits_per_row
        global_row = index // self.bits_per_row
        return global_row // self.rows_per_bank, global_row % self.rows_per_bank, column

    def check(self, bank: int, row: int, column: int | None = None) -> None:
        if not 0 <= bank < self.banks:
            raise IndexError(f"bank {bank} out of range [0, {self.banks})")
        if not 0 <= row < self.rows_per_bank:
            raise IndexError(f"row {row} out of range [0, {self.rows_per_bank})")
        if column is not None and not 0 <= column < self.bits_per_row:
            raise IndexError(f"column {column} out of range [0, {self.bits_per_row})")


@dataclass(frozen=True)
class TimingParams:
    freq_mhz: float = 2400.0
    t_ras_cycles: int = 40
    t_rp_cycles: int = 16
    sleep_cycles: int = 5
    t_refw_ms: float = 64.0
    max_hc_per_window: int = 1_360_000

    def __post_init__(self):
        if self.freq_mhz <= 0:
            raise ValueError("freq_mhz must be positive")
        if min(self.t_ras_cycles, self.t_rp_cycles, self.sleep_cycles) < 0:
            raise ValueError("cycle counts must be >= 0")
        if self.t_refw_ms <= 0 or self.max_hc_per_window < 1:
            raise ValueError("refresh window and max hammer count must be positive")

    @property
    def t_ck_ns(self) -> float:
        return 1000.0 / self.freq_mhz

    @property
    def t_refw_cycles(self) -> int:
        return int(round(self.t_refw_ms * self.freq_mhz * 1000))


def cycles_to_ms(cycles: float, timing: TimingParams | None = None) -> float:
    timing = timing or TimingParams()
    return cycles / (timing.freq_mhz * 1000.0)


def ms_to_cycles(duration_ms: float, timing: TimingParams | None = None) -> int:
    timing = timing or TimingParams()
    return int(math.floor(duration_ms * timing.freq_mhz * 1000.0))


def hc_equivalent(duration_ms: float, timing: TimingParams | None = None) -> int:
    """Hammer count that fits in ``duration_ms`` at the window's maximum HC rate."""
    if duration_ms < 0:
        raise ValueError("duration must be non-negative")
    timing = timing or TimingParams()
    return int(math.floor(duration_ms / timing.t_refw_ms * timing.max_hc_per_window))


@dataclass(frozen=True)
class VulnerabilityConfig:
    """Statistics of the synthetic vulnerable-cell population.

    Densities count every cell able to flip under that mechanism, so a cell
    vulnerable to both is counted in each.  ``overlap_fraction`` is the share
    of the union that is vulnerable to both.  The defaults put 19x more
    RP-capable than RH-capable cells, which with the default threshold ranges
    gives roughly a 20x flip ratio at equal attack time.
    """

    rh_cell_density: float = 0.005
    rp_cell_density: float = 0.09
    overlap_fraction: float = 0.002
    rh_direction_bias: float = 0.9
    rp_direction_bias: float = 0.9
    hc_threshold_range: tuple[int, int] = (50_000, 1_360_000)
    press_threshold_range: tuple[int, int] = (1_000_000, 120_000_000)
    seed: int = 0

    def __post_init__(self):
        for name in ("rh_cell_density", "rp_cell_density", "overlap_fraction",
                     "rh_direction_bias", "rp_direction_bias"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.overlap_fraction > min(self.rh_cell_density, self.rp_cell_density):
            raise ValueError("overlap_fraction exceeds the smaller density")
        for name in ("hc_threshold_range", "press_threshold_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= low <= high")
        object.__setattr__(self, "hc_threshold_range", tuple(int(v) for v in self.hc_threshold_range))
        object.__setattr__(self, "press_threshold_range", tuple(int(v) for v in self.press_threshold_range))

    def validate_against(self, timing: TimingParams) -> None:
        if self.hc_threshold_range[1] > timing.max_hc_per_window:
            raise ValueError("hc thresholds cannot exceed max_hc_per_window")
        if self.press_threshold_range[1] >= timing.t_refw_cycles:
            raise ValueError("press thresholds must stay below the refresh window")
        # an activation always stays open at least t_RAS, so lower thresholds are unmeasurable
        if self.press_threshold_range[0] <= timing.t_ras_cycles:
            raise ValueError("press thresholds must exceed t_ras_cycles")


class DramAddress(NamedTuple):
    bank: int
    row: int
    column: int


@dataclass(frozen=True)
class CellTruth:
    mechanism: Mechanism
    hc_threshold: int | None
    press_threshold_cycles: int | None
    flip_direction: FlipDirection


@dataclass
class ChipState:
    """Mutable simulated chip.

    Disturbance is tracked per row because every cell in a row sees the same
    neighbour activity: ``hc_below[b, v]`` and ``hc_above[b, v]`` count
    activations of rows ``v-1`` and ``v+1`` since row ``v`` was last refreshed
    and ``press_max[b, v]`` holds the longest single neighbour open time.  The
    effective hammer count of a cell is the larger of the two sides, i.e. the
    hammer count of its busiest aggressor.
    """

    geometry: ChipGeometry
    timing: TimingParams
    config: VulnerabilityConfig
    stored: np.ndarray
    mechanism: np.ndarray
    hc_threshold: np.ndarray
    press_threshold: np.ndarray
    flip_from: np.ndarray
    act_counter: np.ndarray = field(init=False)
    hc_below: np.ndarray = field(init=False)
    hc_above: np.ndarray = field(init=False)
    press_max: np.ndarray = field(init=False)
    open_row: list = field(init=False)
    open_since: list = field(init=False)
    now_cycles: int = 0

    def __post_init__(self):
        banks, rows, _ = self.geometry.shape
        self.act_counter = np.zeros((banks, rows), dtype=np.int64)
        self.hc_below = np.zeros((banks, rows), dtype=np.int64)
        self.hc_above = np.zeros((banks, rows), dtype=np.int64)
        self.press_max = np.zeros((banks, rows), dtype=np.int64)
        self.open_row = [None] * banks
        self.open_since = [0] * banks

    # -- descriptor ---------------------------------------------------------
    def descriptor(self) -> dict:
        return chip_descriptor(self.geometry, self.timing, self.config)

    def fingerprint(self) -> str:
        return descriptor_fingerprint(self.descriptor())

    def clone(self) -> "ChipState":
        return copy.deepcopy(self)

    # -- ground truth -------------------------------------------------------
    def cell_truth(self, bank: int, row: int, column: int) -> CellTruth:
        self.geometry.check(bank, row, column)
        mech = Mechanism(int(self.mechanism[bank, row, column]))
        hc = int(self.hc_threshold[bank, row, column])
        press = int(self.press_threshold[bank, row, column])
        return CellTruth(
            mechanism=mech,
            hc_threshold=None if hc == NO_THRESHOLD else hc,
            press_threshold_cycles=None if press == NO_THRESHOLD else press,
            flip_direction=FlipDirection.from_from_bit(int(self.flip_from[bank, row, column])),
        )

    def truth_cells(self, mechanism: Mechanism | None = None) -> Iterator[tuple[DramAddress, CellTruth]]:
        """Vulnerable cells in address order; ``RH``/``RP`` include ``BOTH`` cells."""
        mask = self.capable_mask(mechanism) if mechanism is not None else self.mechanism != Mechanism.NONE
        for b, r, c in zip(*np.nonzero(mask)):
            yield DramAddress(int(b), int(r), int(c)), self.cell_truth(int(b), int(r), int(c))

    def capable_mask(self, mechanism: Mechanism) -> np.ndarray:
        if mechanism is Mechanism.RH:
            return self.hc_threshold != NO_THRESHOLD
        if mechanism is Mechanism.RP:
            return self.press_threshold != NO_THRESHOLD
        return self.mechanism == mechanism

    # -- accumulators -------------------------------------------------------
    def disturb_hc(self, bank: int, row: int) -> int:
        return int(max(self.hc_below[bank, row], self.hc_above[bank, row]))

    def disturb_press(self, bank: int, row: int) -> int:
        return int(self.press_max[bank, row])

    def refresh_row(self, bank: int, row: int) -> None:
        self.hc_below[bank, row] = 0
        self.hc_above[bank, row] = 0
        self.press_max[bank, row] = 0

    def refresh_all(self) -> None:
        self.hc_below[:] = 0
        self.hc_above[:] = 0
        self.press_max[:] = 0
        self.act_counter[:] = 0


def _log_uniform(rng: np.random.Generator, bounds: tuple[int, int], size: int) -> np.ndarray:
    lo, hi = bounds
    if lo == hi:
        return np.full(size, lo, dtype=np.int64)
    draws = np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))
    return np.clip(np.floor(draws), lo, hi).astype(np.int64)


def _biased_from_bits(rng: np.random.Generator, n: int, bias: float, biased_from: int) -> np.ndarray:
    """Exactly ``round(bias * n)`` entries equal ``biased_from``, in random order."""
    k = int(round(bias * n))
    bits = np.full(n, 1 - biased_from, dtype=np.uint8)
    bits[:k] = biased_from
    return rng.permutation(bits)


def generate_chip(geometry: ChipGeometry | None = None, timing: TimingParams | None = None,
                  config: VulnerabilityConfig | None = None) -> ChipState:
    """Build a chip whose ground truth is a pure function of the arguments."""
    geometry = geometry or ChipGeometry()
    timing = timing or TimingParams()
    config = config or VulnerabilityConfig()
    config.validate_against(timing)

    n = geometry.total_cells
    n_rh = int(round(config.rh_cell_density * n))
    n_rp = int(round(config.rp_cell_density * n))
    f = config.overlap_fraction
    n_both = min(int(round(f * (n_rh + n_rp) / (1.0 + f))), n_rh, n_rp)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    both = order[:n_both]
    rh_only = order[n_both:n_rh]
    rp_only = order[n_rh:n_rh + n_rp - n_both]

    mechanism = np.zeros(n, dtype=np.uint8)
    mechanism[both] = Mechanism.BOTH
    mechanism[rh_only] = Mechanism.RH
    mechanism[rp_only] = Mechanism.RP

    hc = np.full(n, NO_THRESHOLD, dtype=np.int64)
    press = np.full(n, NO_THRESHOLD, dtype=np.int64)
    rh_cells = np.concatenate([both, rh_only])
    rp_cells = np.concatenate([both, rp_only])
    hc[rh_cells] = _log_uniform(rng, config.hc_threshold_range, len(rh_cells))
    press[rp_cells] = _log_uniform(rng, config.press_threshold_range, len(rp_cells))

    flip_from = np.zeros(n, dtype=np.uint8)
    # RH cells lean 1->0 and RP cells lean 0->1; dual cells get a fair coin
    flip_from[rh_only] = _biased_from_bits(rng, len(rh_only), config.rh_direction_bias, 1)
    flip_from[rp_only] = _biased_from_bits(rng, len(rp_only), config.rp_direction_bias, 0)
    flip_from[both] = rng.integers(0, 2, size=len(both), dtype=np.uint8)

    shape = geometry.shape
    return ChipState(
        geometry=geometry,
        timing=timing,
        config=config,
        stored=np.zeros(shape, dtype=np.uint8),
        mechanism=mechanism.reshape(shape),
        hc_threshold=hc.reshape(shape),
        press_threshold=press.reshape(shape),
        flip_from=flip_from.reshape(shape),
    )


# -- persistence ------------------------------------------------------------

def chip_descriptor(geometry: ChipGeometry, timing: TimingParams, config: VulnerabilityConfig) -> dict:
    vuln = asdict(config)
    seed = vuln.pop("seed")
    vuln["hc_threshold_range"] = list(vuln["hc_threshold_range"])
    vuln["press_threshold_range"] = list(vuln["press_threshold_range"])
    return {
        "format_version": FORMAT_VERSION,
        "geometry": asdict(geometry),
        "timing": asdict(timing),
        "vulnerability_config": vuln,
        "seed": seed,
    }


def descriptor_fingerprint(descriptor: dict) -> str:
    body = {k: v for k, v in descriptor.items() if k != "format_version"}
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def check_format_version(version: str, what: str) -> None:
    major = str(version).split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise ValueError(f"unsupported {what} format_version {version!r}")


def descriptor_to_params(descriptor: dict) -> tuple[ChipGeometry, TimingParams, VulnerabilityConfig]:
    check_format_version(descriptor.get("format_version", "?"), "chip descriptor")
    vuln = dict(descriptor["vulnerability_config"])
    vuln["hc_threshold_range"] = tuple(vuln["hc_threshold_range"])
    vuln["press_threshold_range"] = tuple(vuln["press_threshold_range"])
    return (
        ChipGeometry(**descriptor["geometry"]),
        TimingParams(**descriptor["timing"]),
        VulnerabilityConfig(seed=int(descriptor["seed"]), **vuln),
    )


def save_chip(chip: ChipState, path: str | Path) -> None:
    """Persist only the descriptor; the ground truth is regenerated from the seed."""
    Path(path).write_text(json.dumps(chip.descriptor(), indent=2, sort_keys=True) + "\n")


def load_chip(path: str | Path) -> ChipState:
    return generate_chip(*descriptor_to_params(json.loads(Path(path).read_text())))

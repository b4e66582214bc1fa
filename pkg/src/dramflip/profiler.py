"""Whole-chip vulnerability profiling, flip-vs-budget curves and profile files."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .dram import (FORMAT_VERSION, ChipState, DramAddress, FingerprintMismatch, FlipDirection,
                   Mechanism, check_format_version)
from .engine import write_row
from .injectors import InjectionSpec, rowhammer_inject, rowpress_inject

CSV_HEADER = ["bank", "row", "column", "mechanism", "threshold", "direction"]


@dataclass
class VulnProfile:
    """Discovered vulnerable cells for one mechanism, sorted by address.

    Thresholds are hammer counts for RH profiles and open-duration cycles for
    RP profiles.  ``from_bit`` is the value a cell holds before it flips.
    """

    mechanism: Mechanism
    bank: np.ndarray
    row: np.ndarray
    column: np.ndarray
    threshold: np.ndarray
    from_bit: np.ndarray
    chip_fingerprint: str
    max_budget: int | None = None
    polarity: str = "both"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mechanism = Mechanism(self.mechanism)
        self.bank = np.asarray(self.bank, dtype=np.int64)
        self.row = np.asarray(self.row, dtype=np.int64)
        self.column = np.asarray(self.column, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.int64)
        self.from_bit = np.asarray(self.from_bit, dtype=np.uint8)
        order = np.lexsort((self.column, self.row, self.bank))
        for name in ("bank", "row", "column", "threshold", "from_bit"):
            setattr(self, name, getattr(self, name)[order])
        keys = np.stack([self.bank, self.row, self.column], axis=1)
        if len(keys) and (np.diff(keys, axis=0) == 0).all(axis=1).any():
            raise ValueError("profile addresses must be unique")
        if (self.threshold <= 0).any():
            raise ValueError("measured thresholds must be positive")

    def __len__(self) -> int:
        return len(self.bank)

    @property
    def cells(self) -> list[tuple[DramAddress, int, FlipDirection]]:
        return [(DramAddress(int(b), int(r), int(c)), int(t), FlipDirection.from_from_bit(int(f)))
                for b, r, c, t, f in zip(self.bank, self.row, self.column, self.threshold, self.from_bit)]

    def addresses(self) -> set[DramAddress]:
        return {DramAddress(int(b), int(r), int(c)) for b, r, c in zip(self.bank, self.row, self.column)}

    def flat_indices(self, geometry) -> np.ndarray:
        return geometry.flat_index(self.bank, self.row, self.column)

    def check_chip(self, chip: ChipState) -> None:
        if self.chip_fingerprint != chip.fingerprint():
            raise FingerprintMismatch(
                f"profile was measured on chip {self.chip_fingerprint}, not {chip.fingerprint()}")

    @classmethod
    def empty(cls, mechanism: Mechanism, fingerprint: str) -> "VulnProfile":
        return cls(mechanism, [], [], [], [], [], fingerprint)


@dataclass
class FlipCurve:
    mechanism: Mechanism
    points: list[tuple[int, int]]

    def __post_init__(self):
        budgets = [b for b, _ in self.points]
        flips = [f for _, f in self.points]
        if budgets != sorted(budgets) or flips != sorted(flips):
            raise ValueError("curve points must be sorted with nondecreasing flips")

    def at(self, budget: int) -> int:
        for b, f in self.points:
            if b == budget:
                return f
        raise KeyError(budget)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["budget", "cumulative_flips"])
        writer.writerows(self.points)
        return out.getvalue()


def max_budget_for(chip: ChipState, mechanism: Mechanism) -> int:
    if mechanism is Mechanism.RH:
        return chip.timing.max_hc_per_window
    return chip.timing.t_refw_cycles - 1


def _check_budget(chip: ChipState, mechanism: Mechanism, budget: int) -> None:
    if budget < 1:
        raise ValueError("profiling budget must be >= 1")
    if budget > max_budget_for(chip, mechanism):
        limit = "max_hc_per_window" if mechanism is Mechanism.RH else "the refresh window"
        raise ValueError(f"budget {budget} exceeds {limit}")


def _polarities(polarity: str) -> tuple[int, ...]:
    if polarity == "both":
        return (1, 0)
    if polarity == "single":
        return (1,)
    raise ValueError(f"polarity must be 'both' or 'single', got {polarity!r}")


def _row_probe(chip: ChipState, mechanism: Mechanism, bank: int, victim: int,
               pattern: int) -> Callable[[int], set[int]]:
    """Return ``budget -> flipped columns of victim`` for one row and polarity.

    RH hammers the victim's neighbours with ``pattern`` (victim holds the
    complement) and first copies the pattern into rows two away so that they
    do not flip along.  RP presses one neighbour of the victim, which then
    serves as a pattern row holding ``pattern``.
    """
    rows = chip.geometry.rows_per_bank
    bits = chip.geometry.bits_per_row
    fill = np.full(bits, pattern, dtype=np.uint8)

    if mechanism is Mechanism.RH:
        guards = [g for g in (victim - 2, victim + 2) if 0 <= g < rows]

        def probe(budget: int) -> set[int]:
            for g in guards:
                write_row(chip, bank, g, fill)
            result = rowhammer_inject(chip, InjectionSpec.rowhammer(victim, budget, bank, pattern),
                                      allow_edge=True)
            return set(result.flipped_columns(victim).tolist())
        return probe

    pressed = victim + 1 if victim + 1 < rows else victim - 1

    def probe(budget: int) -> set[int]:
        result = rowpress_inject(chip, InjectionSpec.rowpress(pressed, budget, bank, pattern),
                                 allow_edge=True)
        return set(result.flipped_columns(victim).tolist())
    return probe


def _bisect_thresholds(probe: Callable[[int], set[int]], flipped: set[int], max_budget: int) -> dict[int, int]:
    """Minimal flipping budget of every column in ``flipped``.

    Each probe answers for all cells at once, so cells are bisected together
    and split whenever a probe separates them.
    """
    found: dict[int, int] = {}
    stack = [(0, max_budget, frozenset(flipped))]
    while stack:
        lo, hi, cells = stack.pop()
        if not cells:
            continue
        if hi - lo == 1:
            found.update((c, hi) for c in cells)
            continue
        mid = (lo + hi) // 2
        below = frozenset(probe(mid)) & cells
        stack.append((mid, hi, cells - below))
        stack.append((lo, mid, below))
    return found


def profile_chip(chip: ChipState, mechanism: Mechanism, max_budget: int | None = None,
                 polarity: str = "both", rows: Iterable[int] | None = None,
                 banks: Iterable[int] | None = None) -> VulnProfile:
    """Sweep every row with the matching injector and bisect per-cell thresholds.

    Stored bits are restored and all accumulators cleared afterwards.
    """
    mechanism = Mechanism(mechanism)
    if mechanism not in (Mechanism.RH, Mechanism.RP):
        raise ValueError("mechanism must be RH or RP")
    max_budget = max_budget_for(chip, mechanism) if max_budget is None else int(max_budget)
    _check_budget(chip, mechanism, max_budget)
    pols = _polarities(polarity)
    fingerprint = chip.fingerprint()
    snapshot = chip.stored.copy()
    if any(r is not None for r in chip.open_row):
        raise RuntimeError("profiling needs every bank precharged")

    geometry = chip.geometry
    row_list = list(range(geometry.rows_per_bank)) if rows is None else list(rows)
    bank_list = list(range(geometry.banks)) if banks is None else list(banks)
    cols: dict[str, list] = {k: [] for k in ("bank", "row", "column", "threshold", "from_bit")}
    for bank in bank_list:
        for victim in row_list:
            for pattern in pols:
                probe = _row_probe(chip, mechanism, bank, victim, pattern)
                flipped = probe(max_budget)
                # the victim held `pattern` (RP) or its complement (RH) before flipping
                from_bit = pattern if mechanism is Mechanism.RP else 1 - pattern
                for col, thr in sorted(_bisect_thresholds(probe, flipped, max_budget).items()):
                    cols["bank"].append(bank)
                    cols["row"].append(victim)
                    cols["column"].append(col)
                    cols["threshold"].append(thr)
                    cols["from_bit"].append(from_bit)

    chip.stored[...] = snapshot
    chip.refresh_all()
    if chip.fingerprint() != fingerprint:
        raise FingerprintMismatch("chip descriptor changed while profiling")
    return VulnProfile(mechanism, chip_fingerprint=fingerprint, max_budget=max_budget,
                       polarity=polarity, **cols)


def truth_profile(chip: ChipState, mechanism: Mechanism) -> VulnProfile:
    """Profile read directly off the ground truth (test oracle / fast path)."""
    mechanism = Mechanism(mechanism)
    mask = chip.capable_mask(mechanism)
    b, r, c = np.nonzero(mask)
    thr = (chip.hc_threshold if mechanism is Mechanism.RH else chip.press_threshold)[mask]
    return VulnProfile(mechanism, b, r, c, thr, chip.flip_from[mask], chip.fingerprint(),
                       max_budget=max_budget_for(chip, mechanism), polarity="truth")


def full_profile(chip: ChipState, mechanism: Mechanism = Mechanism.RP) -> VulnProfile:
    """Every cell of the chip, threshold 1, direction taken from the ground truth."""
    b, r, c = np.indices(chip.geometry.shape).reshape(3, -1)
    return VulnProfile(mechanism, b, r, c, np.ones(b.size, dtype=np.int64), chip.flip_from.reshape(-1),
                       chip.fingerprint(), polarity="full")


def log_grid(max_budget: int, points: int = 16, low: int | None = None) -> list[int]:
    low = max(1, max_budget // 1000) if low is None else low
    grid = np.unique(np.round(np.geomspace(low, max_budget, points)).astype(np.int64))
    return [int(g) for g in grid]


def flip_curve(source: VulnProfile | ChipState, budget_grid: Sequence[int],
               mechanism: Mechanism | None = None) -> FlipCurve:
    """Cumulative flips per budget, counted from profile thresholds.

    ``source`` may be a chip, in which case it is profiled at the maximum
    budget first (``mechanism`` required).
    """
    grid = np.asarray(list(budget_grid), dtype=np.int64)
    if grid.size and (np.diff(grid) < 0).any():
        raise ValueError("budget grid must be sorted ascending")
    if isinstance(source, ChipState):
        if mechanism is None:
            raise ValueError("mechanism is required when profiling a chip")
        source = profile_chip(source, mechanism)
    thresholds = np.sort(source.threshold)
    counts = np.searchsorted(thresholds, grid, side="right")
    return FlipCurve(source.mechanism, [(int(b), int(n)) for b, n in zip(grid, counts)])


def overlap_stats(rh: VulnProfile, rp: VulnProfile):
    """``(overlap, rh_direction_histogram, rp_direction_histogram)``."""
    if rh.chip_fingerprint != rp.chip_fingerprint:
        raise FingerprintMismatch("profiles come from different chips")
    a, b = rh.addresses(), rp.addresses()
    union = a | b
    overlap = len(a & b) / len(union) if union else 0.0

    def hist(p: VulnProfile) -> dict[FlipDirection, int]:
        counts = Counter(int(f) for f in p.from_bit)
        return {FlipDirection.ONE_TO_ZERO: counts[1], FlipDirection.ZERO_TO_ONE: counts[0]}

    return overlap, hist(rh), hist(rp)


# -- persistence ----------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def profile_to_csv(profile: VulnProfile) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    name = profile.mechanism.name
    for b, r, c, t, f in zip(profile.bank, profile.row, profile.column, profile.threshold, profile.from_bit):
        writer.writerow([int(b), int(r), int(c), name, int(t), FlipDirection.from_from_bit(int(f)).value])
    return out.getvalue()


def save_profile(profile: VulnProfile, path: str | Path) -> None:
    path = Path(path)
    path.write_text(profile_to_csv(profile))
    meta = {
        "format_version": FORMAT_VERSION,
        "chip_fingerprint": profile.chip_fingerprint,
        "mechanism": profile.mechanism.name,
        "max_budget": profile.max_budget,
        "polarity": profile.polarity,
        "tool_version": __version__,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_profile(path: str | Path) -> VulnProfile:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    check_format_version(meta.get("format_version", "?"), "profile")
    mechanism = Mechanism[meta["mechanism"]]
    cols: dict[str, list] = {k: [] for k in ("bank", "row", "column", "threshold", "from_bit")}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER) or rec[3] != mechanism.name:
                raise ValueError(f"{path}:{lineno}: malformed profile record {rec}")
            cols["bank"].append(int(rec[0]))
            cols["row"].append(int(rec[1]))
            cols["column"].append(int(rec[2]))
            cols["threshold"].append(int(rec[4]))
            cols["from_bit"].append(FlipDirection(rec[5]).from_bit)
    return VulnProfile(mechanism, chip_fingerprint=meta["chip_fingerprint"], max_budget=meta["max_budget"],
                       polarity=meta["polarity"], meta=meta, **cols)

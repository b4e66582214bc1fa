"""RowHammer and RowPress fault-injection procedures built as command traces."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dram import ChipState, DramAddress
from .engine import (CommandTrace, DefenseConfig, DramCommand, ExecutionReport, Repeat,
                     execute_trace)


class InjectionKind(str, Enum):
    ROWHAMMER = "rowhammer"
    ROWPRESS = "rowpress"


@dataclass(frozen=True)
class InjectionSpec:
    """One injection on ``target_row``.

    ``budget`` is the hammer count (double-sided rounds) for RowHammer and the
    open duration in cycles for RowPress.  Rows written with ``pattern`` get
    the all-``pattern`` row, the other row its complement.
    """

    target_row: int
    kind: InjectionKind
    budget: int
    bank: int = 0
    pattern: int = 1

    def __post_init__(self):
        if self.pattern not in (0, 1):
            raise ValueError("pattern must be 0 or 1")
        if self.kind is InjectionKind.ROWHAMMER and self.budget < 0:
            raise ValueError("hammer count must be >= 0")
        if self.kind is InjectionKind.ROWPRESS and self.budget < 0:
            raise ValueError("open duration must be >= 0")

    @classmethod
    def rowhammer(cls, target_row: int, n: int, bank: int = 0, pattern: int = 1) -> "InjectionSpec":
        return cls(target_row, InjectionKind.ROWHAMMER, int(n), bank, pattern)

    @classmethod
    def rowpress(cls, target_row: int, t_cycles: int, bank: int = 0, pattern: int = 1) -> "InjectionSpec":
        return cls(target_row, InjectionKind.ROWPRESS, int(t_cycles), bank, pattern)


@dataclass
class InjectionResult:
    report: ExecutionReport
    trace: CommandTrace
    # monitored row -> (flipped columns, old bits) from the read-back
    diffs: dict[int, tuple[np.ndarray, np.ndarray]]
    bank: int = 0

    @property
    def flips(self) -> list[tuple[DramAddress, int, int]]:
        return [(DramAddress(self.bank, r, int(c)), int(o), 1 - int(o))
                for r, (cols, old) in sorted(self.diffs.items()) for c, o in zip(cols, old)]

    def flipped_columns(self, row: int) -> np.ndarray:
        return self.diffs[row][0]


def detect_bitflips(before, after) -> list[tuple[int, int, int]]:
    """Positional diff of two bit arrays as ``(column, old, new)`` entries."""
    before = np.asarray(before, dtype=np.uint8)
    after = np.asarray(after, dtype=np.uint8)
    if before.shape != after.shape:
        raise ValueError(f"length mismatch: {before.shape} vs {after.shape}")
    return [(int(c), int(before[c]), int(after[c])) for c in np.flatnonzero(before != after)]


def _neighbours(chip: ChipState, row: int, allow_edge: bool) -> list[int]:
    rows = chip.geometry.rows_per_bank
    found = [v for v in (row - 1, row + 1) if 0 <= v < rows]
    if len(found) < 2 and not allow_edge:
        raise ValueError(f"row {row} sits on the bank edge and has no neighbour on one side")
    return found


def rowhammer_trace(chip: ChipState, spec: InjectionSpec, allow_edge: bool = False) -> CommandTrace:
    bits = chip.geometry.bits_per_row
    bank, row = spec.bank, spec.target_row
    chip.geometry.check(bank, row)
    aggressors = _neighbours(chip, row, allow_edge)
    pattern = np.full(bits, spec.pattern, dtype=np.uint8)
    trace = CommandTrace([DramCommand.wr(bank, a, pattern) for a in aggressors])
    trace.append(DramCommand.wr(bank, row, 1 - pattern))
    body = []
    for a in aggressors:
        body += [DramCommand.act(bank, a), DramCommand.pre(bank, a)]
    trace.append(Repeat(spec.budget, tuple(body)))
    trace.extend(DramCommand.rd(bank, r) for r in sorted(aggressors + [row]))
    return trace


def rowpress_trace(chip: ChipState, spec: InjectionSpec, allow_edge: bool = False) -> CommandTrace:
    timing = chip.timing
    if spec.budget >= timing.t_refw_cycles:
        raise ValueError(f"open duration {spec.budget} must stay below the refresh window "
                         f"({timing.t_refw_cycles} cycles)")
    bits = chip.geometry.bits_per_row
    bank, row = spec.bank, spec.target_row
    chip.geometry.check(bank, row)
    monitored = _neighbours(chip, row, allow_edge)
    pattern = np.full(bits, spec.pattern, dtype=np.uint8)
    trace = CommandTrace([DramCommand.wr(bank, p, pattern) for p in monitored])
    trace.append(DramCommand.wr(bank, row, 1 - pattern))
    # ACT itself keeps the row open for t_RAS; sleep for the rest
    trace.append(DramCommand.act(bank, row))
    extra = spec.budget - timing.t_ras_cycles
    if extra > 0:
        trace.append(DramCommand.sleep(extra))
    trace.append(DramCommand.pre(bank, row))
    trace.extend(DramCommand.rd(bank, r) for r in sorted(monitored + [row]))
    return trace


def _diffs(report: ExecutionReport, written: dict[int, int], bank: int):
    diffs = {}
    for b, r, bits in report.reads:
        if b == bank and r in written:
            cols = np.flatnonzero(bits != written[r])
            diffs[r] = (cols, np.full(cols.size, written[r], dtype=np.uint8))
    return diffs


def rowhammer_inject(chip: ChipState, spec: InjectionSpec, defense: DefenseConfig | None = None,
                     allow_edge: bool = False) -> InjectionResult:
    """Double-sided hammering of ``target_row``'s neighbours; reports flips in the target."""
    if spec.kind is not InjectionKind.ROWHAMMER:
        raise ValueError("rowhammer_inject needs a RowHammer spec")
    if spec.budget > chip.timing.max_hc_per_window:
        warnings.warn(f"hammer count {spec.budget} exceeds the per-window maximum "
                      f"{chip.timing.max_hc_per_window}", stacklevel=2)
    trace = rowhammer_trace(chip, spec, allow_edge)
    report = execute_trace(chip, trace, defense)
    written = {spec.target_row: 1 - spec.pattern}
    return InjectionResult(report, trace, _diffs(report, written, spec.bank), spec.bank)


def rowpress_inject(chip: ChipState, spec: InjectionSpec, defense: DefenseConfig | None = None,
                    allow_edge: bool = False) -> InjectionResult:
    """One long activation of ``target_row``; reports flips in its neighbour (pattern) rows."""
    if spec.kind is not InjectionKind.ROWPRESS:
        raise ValueError("rowpress_inject needs a RowPress spec")
    trace = rowpress_trace(chip, spec, allow_edge)
    report = execute_trace(chip, trace, defense)
    monitored = _neighbours(chip, spec.target_row, True)
    written = {p: spec.pattern for p in monitored}
    return InjectionResult(report, trace, _diffs(report, written, spec.bank), spec.bank)


def inject(chip: ChipState, spec: InjectionSpec, defense: DefenseConfig | None = None,
           allow_edge: bool = False) -> InjectionResult:
    if spec.kind is InjectionKind.ROWHAMMER:
        return rowhammer_inject(chip, spec, defense, allow_edge)
    return rowpress_inject(chip, spec, defense, allow_edge)

"""Command-trace execution with cycle accounting, disturbance physics and a
counter-based (MAC + NRR) defense.

Clock costs: ``ACT`` advances ``t_ras_cycles``, ``PRE`` advances
``sleep_cycles + t_rp_cycles`` and ``SLEEP`` its own duration; ``RD``, ``WR``,
``REF`` and ``NRR`` are free.  A row activated at cycle ``t0`` and precharged
at ``t1`` was open for ``t1 - t0`` cycles.

Flip rule, evaluated when row ``a`` is precharged, for each cell of the
neighbour rows ``a-1`` and ``a+1``: the cell must hold a value different from
row ``a`` at that column, must hold its flip direction's "from" value, and
must have crossed its RH threshold (effective hammer count) or its RP
threshold (longest single neighbour open time).

A ``Repeat`` block whose body only opens and closes rows is fast-forwarded:
after one iteration in which nothing flipped or got refreshed, the following
iterations differ only in growing activation counts, so the executor jumps
straight to the iteration where the next threshold crossing, counter trip or
refresh can happen.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

from .dram import NO_THRESHOLD, ChipState, DramAddress


class ProtocolError(RuntimeError):
    """A command sequence violates the DRAM protocol (e.g. ACT on an open bank)."""


class TraceParseError(ValueError):
    pass


class Kind(str, Enum):
    ACT = "ACT"
    PRE = "PRE"
    RD = "RD"
    WR = "WR"
    REF = "REF"
    NRR = "NRR"
    SLEEP = "SLEEP"


@dataclass(frozen=True)
class DramCommand:
    kind: Kind
    bank: int = 0
    row: int | None = None
    payload: np.ndarray | None = field(default=None, compare=False)
    duration_cycles: int = 0

    def __post_init__(self):
        if self.kind is Kind.SLEEP and self.duration_cycles < 0:
            raise ValueError("SLEEP duration must be >= 0")
        if self.kind in (Kind.ACT, Kind.PRE, Kind.RD, Kind.WR, Kind.NRR) and self.row is None:
            raise ValueError(f"{self.kind.value} needs a row")
        if self.kind is Kind.WR and self.payload is None:
            raise ValueError("WR needs a payload")

    @classmethod
    def act(cls, bank: int, row: int) -> "DramCommand":
        return cls(Kind.ACT, bank, row)

    @classmethod
    def pre(cls, bank: int, row: int) -> "DramCommand":
        return cls(Kind.PRE, bank, row)

    @classmethod
    def rd(cls, bank: int, row: int) -> "DramCommand":
        return cls(Kind.RD, bank, row)

    @classmethod
    def wr(cls, bank: int, row: int, payload) -> "DramCommand":
        return cls(Kind.WR, bank, row, payload=np.asarray(payload, dtype=np.uint8))

    @classmethod
    def ref(cls) -> "DramCommand":
        return cls(Kind.REF)

    @classmethod
    def nrr(cls, bank: int, row: int) -> "DramCommand":
        return cls(Kind.NRR, bank, row)

    @classmethod
    def sleep(cls, cycles: int) -> "DramCommand":
        return cls(Kind.SLEEP, duration_cycles=int(cycles))


@dataclass(frozen=True)
class Repeat:
    """``count`` back-to-back executions of a flat command list."""

    count: int
    body: tuple[DramCommand, ...]

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("repeat count must be >= 0")
        object.__setattr__(self, "body", tuple(self.body))


TraceItem = Union[DramCommand, Repeat]


@dataclass
class CommandTrace:
    items: list[TraceItem] = field(default_factory=list)

    def append(self, item: TraceItem) -> "CommandTrace":
        self.items.append(item)
        return self

    def extend(self, items: Iterable[TraceItem]) -> "CommandTrace":
        self.items.extend(items)
        return self

    def count(self, kind: Kind) -> int:
        """Number of commands of ``kind`` that execution will issue."""
        total = 0
        for item in self.items:
            if isinstance(item, Repeat):
                total += item.count * sum(c.kind is kind for c in item.body)
            elif item.kind is kind:
                total += 1
        return total

    def flat(self) -> Iterator[DramCommand]:
        for item in self.items:
            if isinstance(item, Repeat):
                for _ in range(item.count):
                    yield from item.body
            else:
                yield item

    # -- text format ---------------------------------------------------------
    def to_text(self) -> str:
        return "".join(_format_item(item) for item in self.items)

    @classmethod
    def from_text(cls, text: str, bits_per_row: int | None = None) -> "CommandTrace":
        return parse_trace(text, bits_per_row)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, bits_per_row: int | None = None) -> "CommandTrace":
        return parse_trace(Path(path).read_text(), bits_per_row)


class DefenseMode(str, Enum):
    UNLIMITED = "unlimited"
    UNTESTED = "untested"
    MAC = "mac"


@dataclass(frozen=True)
class DefenseConfig:
    mode: DefenseMode = DefenseMode.UNLIMITED
    t_mac: int | None = None
    nrr_on_trip: bool = True

    def __post_init__(self):
        if self.mode is DefenseMode.MAC and (self.t_mac is None or self.t_mac < 1):
            raise ValueError("Mac defense needs t_mac >= 1")

    @classmethod
    def unlimited(cls) -> "DefenseConfig":
        return cls(DefenseMode.UNLIMITED)

    @classmethod
    def mac(cls, t_mac: int, nrr_on_trip: bool = True) -> "DefenseConfig":
        return cls(DefenseMode.MAC, int(t_mac), nrr_on_trip)

    @classmethod
    def parse(cls, text: str) -> "DefenseConfig":
        """Parse ``unlimited``, ``untested`` or ``mac:<N>``."""
        text = text.strip().lower()
        if text.startswith("mac:"):
            return cls.mac(int(text[4:]))
        return cls(DefenseMode(text))

    def to_text(self) -> str:
        return f"mac:{self.t_mac}" if self.mode is DefenseMode.MAC else self.mode.value

    @property
    def trips(self) -> bool:
        return self.mode is DefenseMode.MAC and self.nrr_on_trip


@dataclass
class ExecutionReport:
    nrr_events: list[tuple[int, tuple[tuple[int, int], ...]]] = field(default_factory=list)
    total_cycles: int = 0
    max_row_counter: int = 0
    reads: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    refreshes: int = 0
    # (bank, row, flipped columns, old bits) per flip event, in execution order
    flip_chunks: list[tuple[int, int, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def flips(self) -> list[tuple[DramAddress, int, int]]:
        return [(DramAddress(b, r, int(c)), int(o), 1 - int(o))
                for b, r, cols, old in self.flip_chunks for c, o in zip(cols, old)]

    @property
    def flip_count(self) -> int:
        return sum(len(cols) for _, _, cols, _ in self.flip_chunks)


# -- direct row access --------------------------------------------------------

def write_row(chip: ChipState, bank: int, row: int, payload) -> None:
    """Overwrite a row; clears that row's disturbance accumulators."""
    chip.geometry.check(bank, row)
    if chip.open_row[bank] is not None:
        raise ProtocolError(f"bank {bank} has row {chip.open_row[bank]} open; precharge first")
    payload = np.asarray(payload, dtype=np.uint8)
    if payload.shape != (chip.geometry.bits_per_row,):
        raise ValueError(f"payload must have {chip.geometry.bits_per_row} bits, got {payload.shape}")
    chip.stored[bank, row] = payload
    chip.refresh_row(bank, row)


def read_row(chip: ChipState, bank: int, row: int) -> np.ndarray:
    chip.geometry.check(bank, row)
    return chip.stored[bank, row].copy()


# -- execution ---------------------------------------------------------------

class _Executor:
    def __init__(self, chip: ChipState, defense: DefenseConfig, auto_refresh: bool):
        self.chip = chip
        self.defense = defense
        self.t = chip.timing
        self.rows = chip.geometry.rows_per_bank
        self.report = ExecutionReport()
        self.start = chip.now_cycles
        self.auto_refresh = auto_refresh
        window = self.t.t_refw_cycles
        self.next_ref = (chip.now_cycles // window + 1) * window

    # single commands
    def run(self, cmd: DramCommand) -> None:
        chip = self.chip
        if self.auto_refresh:
            while chip.now_cycles >= self.next_ref:
                self._ref()
                self.next_ref += self.t.t_refw_cycles
        kind = cmd.kind
        if kind is Kind.SLEEP:
            chip.now_cycles += cmd.duration_cycles
            return
        if kind is Kind.REF:
            self._ref()
            return
        chip.geometry.check(cmd.bank, cmd.row)
        if kind is Kind.ACT:
            self._act(cmd.bank, cmd.row)
        elif kind is Kind.PRE:
            self._pre(cmd.bank, cmd.row)
        elif kind is Kind.RD:
            self.report.reads.append((cmd.bank, cmd.row, read_row(chip, cmd.bank, cmd.row)))
        elif kind is Kind.WR:
            write_row(chip, cmd.bank, cmd.row, cmd.payload)
        elif kind is Kind.NRR:
            self._nrr(cmd.bank, cmd.row)

    def _ref(self) -> None:
        self.chip.refresh_all()
        self.report.refreshes += 1

    def _nrr(self, bank: int, row: int) -> None:
        chip = self.chip
        refreshed = []
        for v in (row - 2, row - 1, row + 1, row + 2):
            if 0 <= v < self.rows:
                chip.refresh_row(bank, v)
                refreshed.append((bank, v))
        chip.act_counter[bank, row] = 0
        self.report.nrr_events.append((chip.now_cycles, tuple(refreshed)))

    def _act(self, bank: int, row: int) -> None:
        chip = self.chip
        if chip.open_row[bank] is not None:
            raise ProtocolError(f"ACT on bank {bank} while row {chip.open_row[bank]} is open")
        chip.open_row[bank] = row
        chip.open_since[bank] = chip.now_cycles
        if row > 0:
            chip.hc_above[bank, row - 1] += 1
        if row + 1 < self.rows:
            chip.hc_below[bank, row + 1] += 1
        chip.act_counter[bank, row] += 1
        count = int(chip.act_counter[bank, row])
        if count > self.report.max_row_counter:
            self.report.max_row_counter = count
        if self.defense.trips and count >= self.defense.t_mac:
            self._nrr(bank, row)
        chip.now_cycles += self.t.t_ras_cycles

    def _pre(self, bank: int, row: int) -> None:
        chip = self.chip
        open_row = chip.open_row[bank]
        if open_row is None:
            chip.now_cycles += self.t.sleep_cycles + self.t.t_rp_cycles
            return
        if open_row != row:
            raise ProtocolError(f"PRE of row {row} but bank {bank} has row {open_row} open")
        duration = chip.now_cycles - chip.open_since[bank]
        chip.open_row[bank] = None
        aggressor = chip.stored[bank, row]
        for v in (row - 1, row + 1):
            if 0 <= v < self.rows:
                if duration > chip.press_max[bank, v]:
                    chip.press_max[bank, v] = duration
                self._apply_flips(bank, v, aggressor)
        chip.now_cycles += self.t.sleep_cycles + self.t.t_rp_cycles

    def _apply_flips(self, bank: int, v: int, aggressor: np.ndarray) -> None:
        chip = self.chip
        victim = chip.stored[bank, v]
        hc = max(chip.hc_below[bank, v], chip.hc_above[bank, v])
        crossed = (chip.hc_threshold[bank, v] <= hc) | (chip.press_threshold[bank, v] <= chip.press_max[bank, v])
        mask = crossed & (victim != aggressor) & (victim == chip.flip_from[bank, v])
        if not mask.any():
            return
        cols = np.flatnonzero(mask)
        old = victim[cols].copy()
        victim[cols] = 1 - old
        self.report.flip_chunks.append((bank, v, cols, old))

    # repeat blocks
    def run_repeat(self, rep: Repeat) -> None:
        if not self._fast_forwardable(rep):
            for _ in range(rep.count):
                for cmd in rep.body:
                    self.run(cmd)
            return
        acts = Counter((c.bank, c.row) for c in rep.body if c.kind is Kind.ACT)
        cost = self._iteration_cost(rep.body)
        done, clean = 0, False
        while done < rep.count:
            if clean:
                jump = min(self._safe_iterations(acts, cost), rep.count - done)
                if jump > 0:
                    self._advance(acts, jump, cost)
                    done += jump
                    continue
            marks = (len(self.report.flip_chunks), len(self.report.nrr_events), self.report.refreshes)
            for cmd in rep.body:
                self.run(cmd)
            done += 1
            clean = marks == (len(self.report.flip_chunks), len(self.report.nrr_events), self.report.refreshes)

    def _fast_forwardable(self, rep: Repeat) -> bool:
        open_rows: dict[int, int] = {}
        for cmd in rep.body:
            if cmd.kind is Kind.ACT:
                if cmd.bank in open_rows or self.chip.open_row[cmd.bank] is not None:
                    return False
                self.chip.geometry.check(cmd.bank, cmd.row)
                open_rows[cmd.bank] = cmd.row
            elif cmd.kind is Kind.PRE:
                if open_rows.pop(cmd.bank, None) != cmd.row:
                    return False
            elif cmd.kind is not Kind.SLEEP:
                return False
        return not open_rows and rep.count > 1

    def _iteration_cost(self, body) -> int:
        cost = 0
        for cmd in body:
            if cmd.kind is Kind.ACT:
                cost += self.t.t_ras_cycles
            elif cmd.kind is Kind.PRE:
                cost += self.t.sleep_cycles + self.t.t_rp_cycles
            else:
                cost += cmd.duration_cycles
        return cost

    def _safe_iterations(self, acts: Counter, cost: int) -> int:
        """Iterations that can be skipped without any state change but counters."""
        chip = self.chip
        horizon = np.iinfo(np.int64).max
        if self.auto_refresh and cost > 0:
            horizon = (self.next_ref - 1 - chip.now_cycles) // cost
        if self.defense.trips:
            for (bank, row), n in acts.items():
                remaining = self.defense.t_mac - int(chip.act_counter[bank, row])
                horizon = min(horizon, -(-remaining // n) - 1)
        victims = {(b, v) for (b, r) in acts for v in (r - 1, r + 1) if 0 <= v < self.rows}
        for bank, v in victims:
            inc_below = acts.get((bank, v - 1), 0)
            inc_above = acts.get((bank, v + 1), 0)
            stored = chip.stored[bank, v]
            gated = np.zeros(stored.shape, dtype=bool)
            for a in (v - 1, v + 1):
                if (bank, a) in acts:
                    gated |= stored != chip.stored[bank, a]
            gated &= stored == chip.flip_from[bank, v]
            if not gated.any():
                continue
            if (chip.press_threshold[bank, v][gated] <= chip.press_max[bank, v]).any():
                return 0
            below, above = int(chip.hc_below[bank, v]), int(chip.hc_above[bank, v])
            pending = chip.hc_threshold[bank, v][gated]
            pending = pending[pending != NO_THRESHOLD]
            if pending.size == 0:
                continue
            t_min = int(pending.min())
            if t_min <= max(below, above):
                return 0
            for side, inc in ((below, inc_below), (above, inc_above)):
                if inc:
                    # the crossing iteration itself must run explicitly
                    horizon = min(horizon, -(-(t_min - side) // inc) - 1)
        return max(int(horizon), 0)

    def _advance(self, acts: Counter, iterations: int, cost: int) -> None:
        chip = self.chip
        for (bank, row), n in acts.items():
            chip.act_counter[bank, row] += n * iterations
            self.report.max_row_counter = max(self.report.max_row_counter, int(chip.act_counter[bank, row]))
            if row > 0:
                chip.hc_above[bank, row - 1] += n * iterations
            if row + 1 < self.rows:
                chip.hc_below[bank, row + 1] += n * iterations
        chip.now_cycles += cost * iterations


def execute_trace(chip: ChipState, trace: CommandTrace | Iterable[TraceItem],
                  defense: DefenseConfig | None = None, auto_refresh: bool = False) -> ExecutionReport:
    """Run ``trace`` against ``chip`` (mutated in place) and report what happened."""
    ex = _Executor(chip, defense or DefenseConfig(), auto_refresh)
    items = trace.items if isinstance(trace, CommandTrace) else trace
    for item in items:
        if isinstance(item, Repeat):
            ex.run_repeat(item)
        else:
            ex.run(item)
    ex.report.total_cycles = chip.now_cycles - ex.start
    return ex.report


# -- text format ---------------------------------------------------------------

def _payload_hex(payload: np.ndarray) -> str:
    return np.packbits(payload).tobytes().hex()


def _format_cmd(cmd: DramCommand) -> str:
    if cmd.kind is Kind.SLEEP:
        return f"SLEEP {cmd.duration_cycles}\n"
    if cmd.kind is Kind.REF:
        return "REF\n"
    if cmd.kind is Kind.WR:
        return f"WR {cmd.bank} {cmd.row} {_payload_hex(cmd.payload)}\n"
    return f"{cmd.kind.value} {cmd.bank} {cmd.row}\n"


def _format_item(item: TraceItem) -> str:
    if isinstance(item, Repeat):
        return f"LOOP {item.count}\n" + "".join(_format_cmd(c) for c in item.body) + "ENDLOOP\n"
    return _format_cmd(item)


_INT = re.compile(r"^\d+$")


def parse_trace(text: str, bits_per_row: int | None = None) -> CommandTrace:
    """Parse the line format; ``LOOP n`` / ``ENDLOOP`` wrap a repeated block."""
    trace = CommandTrace()
    loop: tuple[int, list[DramCommand]] | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op, args = parts[0].upper(), parts[1:]

        def fail(msg: str):
            raise TraceParseError(f"line {lineno}: {msg}: {raw!r}")

        def ints(n: int) -> list[int]:
            if len(args) != n or not all(_INT.match(a) for a in args):
                fail(f"{op} expects {n} non-negative integer argument(s)")
            return [int(a) for a in args]

        if op == "LOOP":
            if loop is not None:
                fail("nested LOOP")
            loop = (ints(1)[0], [])
            continue
        if op == "ENDLOOP":
            if loop is None or args:
                fail("ENDLOOP without LOOP")
            trace.append(Repeat(loop[0], tuple(loop[1])))
            loop = None
            continue

        if op in ("ACT", "PRE", "RD", "NRR"):
            bank, row = ints(2)
            cmd = DramCommand(Kind(op), bank, row)
        elif op == "WR":
            if len(args) != 3 or not (_INT.match(args[0]) and _INT.match(args[1])):
                fail("WR expects <bank> <row> <hex payload>")
            try:
                raw_bytes = bytes.fromhex(args[2])
            except ValueError:
                fail("payload is not valid hex")
            bits = np.unpackbits(np.frombuffer(raw_bytes, dtype=np.uint8))
            if bits_per_row is not None and bits.size != bits_per_row:
                fail(f"payload has {bits.size} bits, expected {bits_per_row}")
            cmd = DramCommand.wr(int(args[0]), int(args[1]), bits)
        elif op == "SLEEP":
            cmd = DramCommand.sleep(ints(1)[0])
        elif op == "REF":
            ints(0)
            cmd = DramCommand.ref()
        else:
            fail(f"unknown command {op}")

        if loop is not None:
            loop[1].append(cmd)
        else:
            trace.append(cmd)

    if loop is not None:
        raise TraceParseError("unterminated LOOP at end of trace")
    return trace

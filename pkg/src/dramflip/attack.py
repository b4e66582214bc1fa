"""Profile-constrained progressive bit search against a quantized model.

Weight bits are placed in DRAM cells by a :class:`WeightMap`.  Only bits whose
cell appears in a vulnerability profile may be flipped.  Each iteration picks,
per layer, the feasible bit with the largest loss-increasing bit gradient,
trial-flips it, and commits the candidate of the layer whose trial loss is
highest.  In physical mode every commit is carried out on the simulated chip
with a RowHammer or RowPress trace and checked against the intended bit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .dram import FORMAT_VERSION, ChipState, DramAddress, FingerprintMismatch, Mechanism, check_format_version
from .engine import CommandTrace, DefenseConfig, DramCommand, Repeat, execute_trace, write_row
from .profiler import VulnProfile
from .qnn.data import Dataset
from .qnn.model import accuracy
from .qnn.quant import QuantizedModel, bit_gradients, bit_weights, forward_loss

log = logging.getLogger(__name__)


class ProfileExhausted(RuntimeError):
    """No feasible bit is left; ``partial`` holds the result so far, if any."""

    def __init__(self, message: str, partial: "AttackResult | None" = None):
        super().__init__(message)
        self.partial = partial


class PhysicalFlipMismatch(RuntimeError):
    pass


class CollateralFlipError(RuntimeError):
    pass


# -- weight placement -----------------------------------------------------------

class Layout(str, Enum):
    SEQUENTIAL = "sequential"
    SEEDED_SHUFFLE = "shuffle"


@dataclass
class WeightMap:
    """Flat chip cell index for every ``(layer, weight, bit)``.

    ``cells[l]`` has shape ``(n_weights, n_q)`` with bit 0 (LSB) in column 0.
    """

    cells: list[np.ndarray]
    layout: Layout
    base: tuple[int, int]
    row_stride: int
    seed: int | None
    chip_fingerprint: str
    geometry_shape: tuple[int, int, int]

    def __post_init__(self):
        flat = np.concatenate([c.reshape(-1) for c in self.cells]) if self.cells else np.zeros(0, np.int64)
        if np.unique(flat).size != flat.size:
            raise ValueError("weight map is not injective")
        if flat.size and (flat.min() < 0 or flat.max() >= int(np.prod(self.geometry_shape))):
            raise ValueError("weight map leaves the chip")

    def address(self, layer: int, weight: int, bit: int) -> DramAddress:
        b, r, c = np.unravel_index(int(self.cells[layer][weight, bit]), self.geometry_shape)
        return DramAddress(int(b), int(r), int(c))

    def used_rows(self) -> set[tuple[int, int]]:
        bits = self.geometry_shape[2]
        rows = np.unique(np.concatenate([c.reshape(-1) for c in self.cells]) // bits)
        per_bank = self.geometry_shape[1]
        return {(int(g // per_bank), int(g % per_bank)) for g in rows}

    def all_cells(self) -> np.ndarray:
        return np.concatenate([c.reshape(-1) for c in self.cells])


def build_weight_map(model: QuantizedModel, chip: ChipState, layout: Layout | str = Layout.SEQUENTIAL,
                     base: tuple[int, int] = (0, 0), row_stride: int = 1, seed: int | None = None) -> WeightMap:
    """Place the model's weight bits on the chip.

    Bits are taken in order (layer, weight, LSB..MSB).  Sequential packs them
    into consecutive columns of rows ``base, base + stride, ...``.  The
    seeded shuffle draws the same number of rows at random from that stride
    grid and permutes the 8-bit column slots inside every row.
    """
    layout = Layout(layout)
    if row_stride < 1:
        raise ValueError("row_stride must be >= 1")
    banks, rows, bits = chip.geometry.shape
    base_bank, base_row = base
    chip.geometry.check(base_bank, base_row)
    total = model.total_bits
    grid = np.arange(base_bank * rows + base_row, banks * rows, row_stride)
    needed = -(-total // bits)
    if needed > grid.size:
        raise ValueError(f"model needs {total} bits ({needed} rows at stride {row_stride}) "
                         f"but only {grid.size} rows are available from {base}")
    slots = np.arange(total)
    if layout is Layout.SEQUENTIAL:
        flat = grid[slots // bits] * bits + slots % bits
    else:
        if seed is None:
            raise ValueError("the shuffled layout needs a seed")
        rng = np.random.default_rng(seed)
        chosen = rng.permutation(grid)[:needed]
        group = 8 if bits % 8 == 0 else 1
        perms = np.stack([rng.permutation(bits // group) for _ in range(needed)])
        row_of, offset = slots // bits, slots % bits
        col = perms[row_of, offset // group] * group + offset % group
        flat = chosen[row_of] * bits + col
    cells, start = [], 0
    for codes in model.codes:
        n = codes.size * model.n_q
        cells.append(flat[start:start + n].reshape(codes.size, model.n_q).astype(np.int64))
        start += n
    return WeightMap(cells, layout, (base_bank, base_row), row_stride, seed, chip.fingerprint(),
                     chip.geometry.shape)


def load_model_into_chip(model: QuantizedModel, chip: ChipState, wmap: WeightMap) -> None:
    """Store every weight bit in its mapped cell (other cells are untouched)."""
    if wmap.chip_fingerprint != chip.fingerprint():
        raise FingerprintMismatch("weight map was built for a different chip")
    stored = chip.stored.reshape(-1)
    for layer, cells in enumerate(wmap.cells):
        stored[cells.reshape(-1)] = model.bits(layer).reshape(-1)
    for bank, row in wmap.used_rows():
        chip.refresh_row(bank, row)


def read_model_bits(chip: ChipState, wmap: WeightMap, layer: int) -> np.ndarray:
    return chip.stored.reshape(-1)[wmap.cells[layer]]


# -- feasibility ----------------------------------------------------------------

@dataclass
class FeasibleBitSet:
    """Per-layer masks of bits that may still be flipped."""

    in_profile: list[np.ndarray]
    from_bit: list[np.ndarray]
    threshold: list[np.ndarray]
    direction_aware: bool
    mechanism: Mechanism
    retired: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.retired:
            self.retired = [np.zeros_like(m) for m in self.in_profile]

    def masks(self, model: QuantizedModel) -> list[np.ndarray]:
        out = []
        for layer, base in enumerate(self.in_profile):
            mask = base & ~self.retired[layer]
            if self.direction_aware:
                mask &= model.bits(layer) == self.from_bit[layer]
            out.append(mask)
        return out

    def size(self, model: QuantizedModel) -> int:
        return int(sum(m.sum() for m in self.masks(model)))

    def retire(self, layer: int, weight: int, bit: int) -> None:
        self.retired[layer][weight, bit] = True


def feasible_bits(model: QuantizedModel, wmap: WeightMap, profile: VulnProfile,
                  direction_aware: bool = True) -> FeasibleBitSet:
    if profile.chip_fingerprint != wmap.chip_fingerprint:
        raise FingerprintMismatch(f"profile chip {profile.chip_fingerprint} differs from the weight map's "
                                  f"chip {wmap.chip_fingerprint}")
    n_cells = int(np.prod(wmap.geometry_shape))
    member = np.zeros(n_cells, dtype=bool)
    from_bit = np.zeros(n_cells, dtype=np.uint8)
    threshold = np.zeros(n_cells, dtype=np.int64)
    idx = np.ravel_multi_index((profile.bank, profile.row, profile.column), wmap.geometry_shape)
    member[idx] = True
    from_bit[idx] = profile.from_bit
    threshold[idx] = profile.threshold
    return FeasibleBitSet([member[c] for c in wmap.cells], [from_bit[c] for c in wmap.cells],
                          [threshold[c] for c in wmap.cells], direction_aware, profile.mechanism)


# -- one search step ------------------------------------------------------------

@dataclass
class Candidate:
    layer: int
    weight: int
    bit: int
    trial_loss: float


@dataclass
class IterationRecord:
    candidates: list[Candidate]
    chosen: Candidate
    committed_loss: float


def layer_candidates(model: QuantizedModel, masks: list[np.ndarray], grads, ascent_only: bool = True):
    """Best feasible bit per layer, or ``None`` for layers with nothing feasible.

    A bit's first-order loss change when flipped is its gradient times +1
    (0 -> 1) or -1 (1 -> 0).  With ``ascent_only`` bits that would lower the
    loss are skipped unless a layer has nothing else.  Ties resolve to the
    lowest weight index, then the lowest bit.
    """
    out = []
    for layer, mask in enumerate(masks):
        if not mask.any():
            out.append(None)
            continue
        g = grads.bits[layer]
        score = np.abs(g)
        if ascent_only:
            gain = g * (1.0 - 2.0 * model.bits(layer))
            ascending = mask & (gain > 0)
            if ascending.any():
                mask = ascending
        flat = np.where(mask, score, -np.inf).reshape(-1)
        weight, bit = divmod(int(np.argmax(flat)), model.n_q)
        out.append((weight, bit))
    return out


def bfa_iteration(model: QuantizedModel, feasible: FeasibleBitSet, batch: np.ndarray, labels: np.ndarray,
                  ascent_only: bool = True) -> tuple[Candidate, list[Candidate]]:
    """Choose the next flip; ``model`` is left unchanged.

    Returns the chosen candidate and every layer's candidate with its trial loss.
    """
    masks = feasible.masks(model)
    if not any(m.any() for m in masks):
        raise ProfileExhausted("no feasible bit left in any layer")
    grads = bit_gradients(model, batch, labels)
    candidates = []
    for layer, pick in enumerate(layer_candidates(model, masks, grads, ascent_only)):
        if pick is None:
            continue
        weight, bit = pick
        model.flip_bit(layer, weight, bit)
        _, loss = forward_loss(model, batch, labels)
        model.flip_bit(layer, weight, bit)
        candidates.append(Candidate(layer, weight, bit, loss))
    # first maximum wins, i.e. the lowest layer on ties
    best = max(range(len(candidates)), key=lambda i: (candidates[i].trial_loss, -i))
    return candidates[best], candidates


# -- configuration and results -----------------------------------------------------

class CommitMode(str, Enum):
    LOGICAL = "logical"
    PHYSICAL = "physical"


@dataclass
class AttackConfig:
    objective_accuracy: float | None = None
    objective_margin: float = 0.02
    max_flips: int = 500
    commit_mode: CommitMode = CommitMode.LOGICAL
    direction_aware: bool = True
    ascent_only: bool = True
    forbid_collateral: bool = False
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    def __post_init__(self):
        self.commit_mode = CommitMode(self.commit_mode)
        if self.max_flips < 0:
            raise ValueError("max_flips must be >= 0")

    def objective_for(self, random_guess: float) -> float:
        if self.objective_accuracy is not None:
            return self.objective_accuracy
        return random_guess + self.objective_margin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["commit_mode"] = self.commit_mode.value
        d["defense"] = self.defense.to_text()
        return d


@dataclass
class FlipRecord:
    iteration: int
    layer: int
    weight: int
    bit: int
    address: DramAddress
    old: int
    new: int
    collateral: bool = False


@dataclass
class AttackResult:
    flips: list[FlipRecord]
    loss_trajectory: list[float]
    accuracy_trajectory: list[float]
    iterations: list[IterationRecord]
    baseline_accuracy: float
    objective_accuracy: float
    succeeded: bool
    time_budget_cycles: int
    mechanism: Mechanism
    config: dict
    model: QuantizedModel | None = None
    stop_reason: str = ""

    @property
    def total_flips(self) -> int:
        return len(self.flips)

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_trajectory[-1]

    def greedy_gaps(self) -> list[float]:
        """Committed loss minus the best trial loss, per iteration (0 when exact)."""
        return [it.committed_loss - it.chosen.trial_loss for it in self.iterations]

    def to_json(self) -> str:
        payload = {
            "format_version": FORMAT_VERSION,
            "tool_version": __version__,
            "mechanism": self.mechanism.name,
            "succeeded": self.succeeded,
            "stop_reason": self.stop_reason,
            "total_flips": self.total_flips,
            "baseline_accuracy": self.baseline_accuracy,
            "objective_accuracy": self.objective_accuracy,
            "time_budget_cycles": self.time_budget_cycles,
            "config": self.config,
            "flips": [{"iteration": f.iteration, "layer": f.layer, "weight": f.weight, "bit": f.bit,
                       "address": list(f.address), "old": f.old, "new": f.new, "collateral": f.collateral}
                      for f in self.flips],
            "loss_trajectory": self.loss_trajectory,
            "accuracy_trajectory": self.accuracy_trajectory,
            "trial_losses": [[[c.layer, c.weight, c.bit, c.trial_loss] for c in it.candidates]
                             for it in self.iterations],
            "committed_losses": [it.committed_loss for it in self.iterations],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["iteration", "loss", "accuracy", "cumulative_flips"])
        cumulative = [0]
        for it in range(1, len(self.iterations) + 1):
            cumulative.append(sum(1 for f in self.flips if f.iteration <= it))
        for i, (loss, acc) in enumerate(zip(self.loss_trajectory, self.accuracy_trajectory)):
            writer.writerow([i, repr(loss), repr(acc), cumulative[i]])
        return out.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_json())
        path.with_suffix(".csv").write_text(self.to_csv())


def load_attack_result(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    check_format_version(data.get("format_version", "?"), "attack result")
    return data


# -- physical commits -----------------------------------------------------------------

def _pick_aggressor(chip: ChipState, bank: int, victim: int, mapped: set[tuple[int, int]]) -> tuple[int, int]:
    rows = chip.geometry.rows_per_bank
    for step in (1, -1):
        agg, far = victim + step, victim + 2 * step
        if 0 <= agg < rows and (bank, agg) not in mapped and not (0 <= far < rows and (bank, far) in mapped):
            return agg, far
    raise PhysicalFlipMismatch(f"row {victim} has no free neighbour to drive; build the weight map "
                               f"with row_stride >= 3 for physical commits")


def commit_trace(chip: ChipState, mechanism: Mechanism, bank: int, victim: int, column: int, budget: int,
                 mapped: set[tuple[int, int]]) -> CommandTrace:
    """REF, prime the aggressor and far rows, then hammer or press the aggressor.

    The aggressor copies the victim row with only ``column`` complemented, so
    the data-pattern gate is open for the target cell alone.  The far row
    mirrors the aggressor so nothing on that side is gated open either.
    """
    agg, far = _pick_aggressor(chip, bank, victim, mapped)
    payload = chip.stored[bank, victim].copy()
    payload[column] ^= 1
    trace = CommandTrace([DramCommand.ref(), DramCommand.wr(bank, agg, payload)])
    if 0 <= far < chip.geometry.rows_per_bank:
        trace.append(DramCommand.wr(bank, far, payload))
    if mechanism is Mechanism.RH:
        trace.append(Repeat(int(budget), (DramCommand.act(bank, agg), DramCommand.pre(bank, agg))))
    else:
        trace.append(DramCommand.act(bank, agg))
        extra = int(budget) - chip.timing.t_ras_cycles
        if extra > 0:
            trace.append(DramCommand.sleep(extra))
        trace.append(DramCommand.pre(bank, agg))
    trace.append(DramCommand.rd(bank, victim))
    return trace


# -- the attack loop -------------------------------------------------------------

def _reverse_lookup(wmap: WeightMap) -> dict[int, tuple[int, int, int]]:
    out = {}
    for layer, cells in enumerate(wmap.cells):
        n_w, n_q = cells.shape
        for idx, cell in enumerate(cells.reshape(-1)):
            out[int(cell)] = (layer, idx // n_q, idx % n_q)
    return out


def run_attack(model: QuantizedModel, chip: ChipState | None, profile: VulnProfile, wmap: WeightMap,
               config: AttackConfig, batch: tuple[np.ndarray, np.ndarray], test: Dataset) -> AttackResult:
    """Flip bits until test accuracy falls to the objective or the budget runs out.

    ``model`` is not modified; the attacked copy is returned in ``result.model``.
    In physical mode ``chip`` is loaded with the model and mutated.
    """
    x, y = batch
    model = model.copy()
    profile_fp = profile.chip_fingerprint
    if profile_fp != wmap.chip_fingerprint:
        raise FingerprintMismatch("profile and weight map target different chips")
    physical = config.commit_mode is CommitMode.PHYSICAL
    if physical:
        if chip is None:
            raise ValueError("physical commits need a chip")
        if chip.fingerprint() != profile_fp:
            raise FingerprintMismatch("profile was measured on a different chip")
        load_model_into_chip(model, chip, wmap)
        mapped = wmap.used_rows()
        owner = _reverse_lookup(wmap)

    feasible = feasible_bits(model, wmap, profile, config.direction_aware)
    baseline, guess = accuracy(model, test)
    objective = config.objective_for(guess)
    _, loss0 = forward_loss(model, x, y)
    flips: list[FlipRecord] = []
    losses, accs, iterations = [loss0], [baseline], []
    cycles = 0

    def result(succeeded: bool, reason: str) -> AttackResult:
        return AttackResult(flips, losses, accs, iterations, baseline, objective, succeeded, cycles,
                            profile.mechanism, config.to_dict(), model, reason)

    if baseline <= objective:
        log.info("baseline accuracy %.4f already meets objective %.4f", baseline, objective)
        return result(True, "objective already met")

    it = 0
    while len(flips) < config.max_flips:
        it += 1
        try:
            chosen, candidates = bfa_iteration(model, feasible, x, y, config.ascent_only)
        except ProfileExhausted as exc:
            raise ProfileExhausted(f"{exc} after {len(flips)} flips", result(False, "profile exhausted")) from None
        layer, weight, bit = chosen.layer, chosen.weight, chosen.bit
        address = wmap.address(layer, weight, bit)
        old = model.get_bit(layer, weight, bit)
        if physical:
            threshold = int(feasible.threshold[layer][weight, bit])
            trace = commit_trace(chip, profile.mechanism, address.bank, address.row, address.column,
                                 threshold, mapped)
            report = execute_trace(chip, trace, config.defense)
            cycles += report.total_cycles
            landed = {(b, r, int(c)) for b, r, cols, _ in report.flip_chunks for c in cols}
            if (address.bank, address.row, address.column) not in landed:
                raise PhysicalFlipMismatch(
                    f"intended flip at {address} did not land "
                    f"({len(report.nrr_events)} NRR events, {report.flip_count} flips observed)")
            model.flip_bit(layer, weight, bit)
            feasible.retire(layer, weight, bit)
            flips.append(FlipRecord(it, layer, weight, bit, address, old, 1 - old))
            geo = chip.geometry.shape
            for b, r, cols, olds in report.flip_chunks:
                for c, o in zip(cols, olds):
                    if (b, r, int(c)) == tuple(address):
                        continue
                    cell = int(np.ravel_multi_index((b, r, int(c)), geo))
                    if cell not in owner:
                        continue
                    if config.forbid_collateral:
                        raise CollateralFlipError(f"collateral flip at {(b, r, int(c))} while targeting {address}")
                    cl, cw, cb = owner[cell]
                    model.flip_bit(cl, cw, cb)
                    feasible.retire(cl, cw, cb)
                    flips.append(FlipRecord(it, cl, cw, cb, DramAddress(b, r, int(c)), int(o), 1 - int(o), True))
        else:
            model.flip_bit(layer, weight, bit)
            feasible.retire(layer, weight, bit)
            flips.append(FlipRecord(it, layer, weight, bit, address, old, 1 - old))

        _, committed = forward_loss(model, x, y)
        iterations.append(IterationRecord(candidates, chosen, committed))
        losses.append(committed)
        accs.append(accuracy(model, test).accuracy)
        log.debug("iter %d: flip %s loss %.4f acc %.4f", it, (layer, weight, bit), committed, accs[-1])
        if accs[-1] <= objective:
            return result(True, "objective reached")
    return result(False, "flip budget exhausted")


# -- RH vs RP comparison -----------------------------------------------------------

def effective_flips(result: AttackResult, max_flips: int) -> float:
    """Flips needed to reach the objective, as far as one run can tell.

    A run that stopped on the flip budget needed more than ``max_flips``, so
    it scores ``max_flips + 1`` (a lower bound).  A run that ran out of
    feasible bits can never reach the objective and scores infinity.
    """
    if result.succeeded:
        return float(result.total_flips)
    if result.stop_reason == "profile exhausted":
        return math.inf
    return float(max_flips + 1)


@dataclass
class ComparisonResult:
    seeds: list[int]
    flips: dict[str, list[int]]
    stop_reasons: dict[str, list[str]]
    scores: dict[str, list[float]]
    medians: dict[str, float]
    ratio: float | None
    greedy_max_gap: float

    def to_dict(self) -> dict:
        def num(x):
            return "inf" if x is not None and math.isinf(x) else x

        return {"format_version": FORMAT_VERSION, "seeds": self.seeds, "flips": self.flips,
                "stop_reasons": self.stop_reasons,
                "scores": {k: [num(v) for v in vals] for k, vals in self.scores.items()},
                "medians": {k: num(v) for k, v in self.medians.items()}, "ratio": num(self.ratio),
                "greedy_max_gap": self.greedy_max_gap}


def compare_profiles(model: QuantizedModel, chip: ChipState, profiles: dict[str, VulnProfile],
                     seeds: list[int], test: Dataset, config: AttackConfig | None = None,
                     batch_size: int = 128, layout: Layout | str = Layout.SEEDED_SHUFFLE,
                     row_stride: int = 1) -> ComparisonResult:
    """Paired attacks per seed: the seed drives the weight placement and the attack batch.

    Each run is scored with :func:`effective_flips`.  ``ratio`` is the median
    score of the first profile over that of the second; it is ``None`` when
    the second profile's median run did not reach the objective.
    """
    config = config or AttackConfig()
    names = list(profiles)
    flips: dict[str, list] = {n: [] for n in names}
    reasons: dict[str, list] = {n: [] for n in names}
    scores: dict[str, list] = {n: [] for n in names}
    gap = 0.0
    for seed in seeds:
        wmap = build_weight_map(model, chip, layout, row_stride=row_stride, seed=seed)
        batch = test.batch(batch_size, seed)
        for name in names:
            run_chip = chip.clone() if config.commit_mode is CommitMode.PHYSICAL else None
            try:
                res = run_attack(model, run_chip, profiles[name], wmap, config, batch, test)
            except ProfileExhausted as exc:
                res = exc.partial
            gap = max([gap] + [abs(g) for g in res.greedy_gaps()])
            flips[name].append(res.total_flips)
            reasons[name].append(res.stop_reason)
            scores[name].append(effective_flips(res, config.max_flips))

    medians = {n: float(np.median(v)) for n, v in scores.items()}
    ratio = None
    if len(names) >= 2 and medians[names[1]] <= config.max_flips:
        ratio = medians[names[0]] / medians[names[1]]
    return ComparisonResult(list(seeds), flips, reasons, scores, medians, ratio, gap)


def expected_code_change(model: QuantizedModel, layer: int, weight: int, bit: int) -> float:
    """Dequantized weight change caused by flipping one bit."""
    b = model.get_bit(layer, weight, bit)
    return float(model.scales[layer] * bit_weights(model.n_q)[bit] * (1 - 2 * b))

import json

import numpy as np
import pytest

import dramflip.attack as attack_mod
from dramflip.attack import (AttackConfig, CollateralFlipError, CommitMode, FeasibleBitSet, Layout,
                             PhysicalFlipMismatch, ProfileExhausted, bfa_iteration, build_weight_map,
                             commit_trace, compare_profiles, effective_flips, expected_code_change,
                             feasible_bits, load_attack_result, load_model_into_chip, read_model_bits, run_attack)
from dramflip.dram import ChipGeometry, FingerprintMismatch, Mechanism, VulnerabilityConfig, generate_chip
from dramflip.engine import DefenseConfig
from dramflip.profiler import VulnProfile, full_profile, truth_profile
from dramflip.qnn import QuantizedModel, forward_loss, make_dataset, mlp_spec, quantize, train_float


@pytest.fixture(scope="module")
def tiny():
    """An 8-8-3 MLP: 88 weights, 704 bits."""
    train, test = make_dataset("blobs", 3, 600, seed=4, features=8)
    model = quantize(train_float(mlp_spec(8, [8], 3), train, epochs=10, seed=0, weight_decay=0.1), 8)
    assert model.total_bits == 704
    return model, test


def physical_chip():
    cfg = VulnerabilityConfig(rh_cell_density=0.1, rp_cell_density=0.3, seed=5)
    return generate_chip(ChipGeometry(1, 64, 64), config=cfg)


def one_layer(n_weights):
    return QuantizedModel([{"type": "dense", "in": n_weights, "out": 1}], [np.zeros((1, n_weights), dtype=int)],
                          [1.0], [np.zeros(1)], 8, (n_weights,))


# -- weight maps ----------------------------------------------------------------------

def test_sequential_map_fills_one_row(default_chip):
    wmap = build_weight_map(one_layer(128), default_chip, base=(0, 10))
    assert wmap.used_rows() == {(0, 10)}
    assert sorted(wmap.all_cells() % 1024) == list(range(1024))


def test_shuffle_is_seeded(victim, default_chip):
    a = build_weight_map(victim, default_chip, Layout.SEEDED_SHUFFLE, seed=7)
    b = build_weight_map(victim, default_chip, Layout.SEEDED_SHUFFLE, seed=7)
    c = build_weight_map(victim, default_chip, Layout.SEEDED_SHUFFLE, seed=8)
    assert np.array_equal(a.all_cells(), b.all_cells())
    assert not np.array_equal(a.all_cells(), c.all_cells())
    with pytest.raises(ValueError):
        build_weight_map(victim, default_chip, Layout.SEEDED_SHUFFLE)


@pytest.mark.parametrize("layout,stride", [("sequential", 1), ("shuffle", 1), ("shuffle", 2)])
def test_map_is_injective(victim, default_chip, layout, stride):
    wmap = build_weight_map(victim, default_chip, layout, row_stride=stride, seed=1)
    cells = wmap.all_cells()
    assert cells.size == victim.total_bits == len(set(cells.tolist()))
    rows = {r for _, r in wmap.used_rows()}
    assert all(r % stride == 0 for r in rows)


def test_model_too_large(victim, default_chip):
    with pytest.raises(ValueError, match="rows"):
        build_weight_map(victim, default_chip, row_stride=3)


def test_load_and_read_back(tiny):
    model, _ = tiny
    chip = physical_chip()
    wmap = build_weight_map(model, chip, Layout.SEEDED_SHUFFLE, row_stride=3, seed=2)
    load_model_into_chip(model, chip, wmap)
    for layer in range(len(model.codes)):
        assert np.array_equal(read_model_bits(chip, wmap, layer), model.bits(layer))


# -- feasibility ----------------------------------------------------------------------

def test_empty_profile_has_no_feasible_bits(victim, default_chip):
    wmap = build_weight_map(victim, default_chip)
    feasible = feasible_bits(victim, wmap, VulnProfile.empty(Mechanism.RP, default_chip.fingerprint()))
    assert feasible.size(victim) == 0


def test_full_profile_without_direction_is_everything(victim, default_chip):
    wmap = build_weight_map(victim, default_chip)
    feasible = feasible_bits(victim, wmap, full_profile(default_chip), direction_aware=False)
    assert feasible.size(victim) == victim.total_bits


def test_direction_excludes_mismatched_bit(default_chip):
    model = one_layer(1)
    model.codes[0][0, 0] = 0  # every bit stores 0
    wmap = build_weight_map(model, default_chip)
    addr = wmap.address(0, 0, 3)
    down = VulnProfile(Mechanism.RH, [addr.bank], [addr.row], [addr.column], [100], [1], default_chip.fingerprint())
    up = VulnProfile(Mechanism.RH, [addr.bank], [addr.row], [addr.column], [100], [0], default_chip.fingerprint())
    assert feasible_bits(model, wmap, down).size(model) == 0
    assert feasible_bits(model, wmap, down, direction_aware=False).size(model) == 1
    assert feasible_bits(model, wmap, up).masks(model)[0][0, 3]


def test_feasibility_checks_fingerprint(victim, default_chip, small_chip):
    wmap = build_weight_map(victim, default_chip)
    with pytest.raises(FingerprintMismatch):
        feasible_bits(victim, wmap, truth_profile(small_chip, Mechanism.RP))


# -- one iteration ------------------------------------------------------------------------

def test_single_feasible_bit_is_forced(victim, default_chip, blobs):
    wmap = build_weight_map(victim, default_chip)
    addr = wmap.address(1, 17, 2)
    b = victim.get_bit(1, 17, 2)
    prof = VulnProfile(Mechanism.RP, [addr.bank], [addr.row], [addr.column], [5], [b], default_chip.fingerprint())
    x, y = blobs[1].batch(128, 0)
    chosen, cands = bfa_iteration(victim, feasible_bits(victim, wmap, prof), x, y)
    assert (chosen.layer, chosen.weight, chosen.bit) == (1, 17, 2) and len(cands) == 1
    m = victim.copy()
    m.flip_bit(1, 17, 2)
    assert forward_loss(m, x, y)[1] == chosen.trial_loss


def test_iteration_leaves_model_unchanged(victim, default_chip, blobs):
    wmap = build_weight_map(victim, default_chip)
    x, y = blobs[1].batch(128, 0)
    before = victim.copy()
    bfa_iteration(victim, feasible_bits(victim, wmap, full_profile(default_chip), False), x, y)
    assert victim.hamming(before) == 0


def test_exhausted_feasible_set_raises(victim, default_chip, blobs):
    wmap = build_weight_map(victim, default_chip)
    x, y = blobs[1].batch(16, 0)
    with pytest.raises(ProfileExhausted):
        bfa_iteration(victim, feasible_bits(victim, wmap, VulnProfile.empty(Mechanism.RH, wmap.chip_fingerprint)),
                      x, y)


def test_candidates_are_argmax_of_bit_gradient_without_ascent_filter(victim, default_chip, blobs):
    from dramflip.qnn import bit_gradients
    wmap = build_weight_map(victim, default_chip)
    x, y = blobs[1].batch(128, 0)
    feasible = feasible_bits(victim, wmap, full_profile(default_chip), False)
    _, cands = bfa_iteration(victim, feasible, x, y, ascent_only=False)
    grads = bit_gradients(victim, x, y)
    for c in cands:
        g = np.abs(grads.bits[c.layer])
        assert g[c.weight, c.bit] == g.max()


def test_chosen_flip_ranks_in_top_tenth(tiny):
    model, test = tiny
    chip = physical_chip()
    wmap = build_weight_map(model, chip)
    x, y = test.batch(128, 0)
    chosen, _ = bfa_iteration(model, feasible_bits(model, wmap, full_profile(chip), False), x, y)
    losses = []
    for layer, codes in enumerate(model.codes):
        for w in range(codes.size):
            for bit in range(model.n_q):
                m = model.copy()
                m.flip_bit(layer, w, bit)
                losses.append(forward_loss(m, x, y)[1])
    losses = np.array(losses)
    assert len(losses) == 704
    assert (losses > chosen.trial_loss).mean() <= 0.10


# -- the attack loop --------------------------------------------------------------------

def attack_victim(victim, default_chip, blobs, profile, seed=0, **cfg):
    wmap = build_weight_map(victim, default_chip, Layout.SEEDED_SHUFFLE, seed=seed)
    return run_attack(victim, None, profile, wmap, AttackConfig(**cfg), blobs[1].batch(128, seed), blobs[1])


def test_full_profile_attack_reaches_random_guess(victim, default_chip, blobs):
    res = attack_victim(victim, default_chip, blobs, full_profile(default_chip), direction_aware=False)
    assert res.succeeded and res.stop_reason == "objective reached"
    assert res.final_accuracy <= 0.12 and res.total_flips <= 50
    assert res.model.hamming(victim) == res.total_flips
    assert res.time_budget_cycles == 0


def test_committed_loss_is_the_best_trial(victim, default_chip, blobs):
    res = attack_victim(victim, default_chip, blobs, truth_profile(default_chip, Mechanism.RP), seed=1,
                        max_flips=40)
    for it in res.iterations:
        assert it.committed_loss == max(c.trial_loss for c in it.candidates) == it.chosen.trial_loss
    assert res.greedy_gaps() == [0.0] * len(res.iterations)


def test_flips_stay_inside_profile(victim, default_chip, blobs):
    prof = truth_profile(default_chip, Mechanism.RH)
    res = attack_victim(victim, default_chip, blobs, prof, max_flips=30)
    allowed = prof.addresses()
    assert res.flips and all(f.address in allowed for f in res.flips)
    cells = {(f.layer, f.weight, f.bit) for f in res.flips}
    assert len(cells) == len(res.flips)  # every cell flips at most once
    for f in res.flips:
        assert f.old == int(prof.from_bit[(prof.bank == f.address.bank) & (prof.row == f.address.row)
                                           & (prof.column == f.address.column)][0])


def test_objective_already_met(victim, default_chip, blobs):
    res = attack_victim(victim, default_chip, blobs, full_profile(default_chip), objective_accuracy=1.1)
    assert res.succeeded and res.total_flips == 0 and res.stop_reason == "objective already met"


def test_exhausted_profile_carries_partial_result(victim, default_chip, blobs):
    wmap = build_weight_map(victim, default_chip)
    addr = wmap.address(2, 0, 7)
    prof = VulnProfile(Mechanism.RH, [addr.bank], [addr.row], [addr.column], [10], [victim.get_bit(2, 0, 7)],
                       default_chip.fingerprint())
    with pytest.raises(ProfileExhausted) as info:
        run_attack(victim, None, prof, wmap, AttackConfig(), blobs[1].batch(128, 0), blobs[1])
    partial = info.value.partial
    assert partial.total_flips == 1 and partial.stop_reason == "profile exhausted"
    assert effective_flips(partial, 500) == float("inf")


def test_flip_budget_stop(victim, default_chip, blobs):
    res = attack_victim(victim, default_chip, blobs, truth_profile(default_chip, Mechanism.RP), max_flips=3)
    assert not res.succeeded and res.total_flips == 3 and res.stop_reason == "flip budget exhausted"
    assert effective_flips(res, 3) == 4


def test_full_profile_never_needs_more_flips(victim, default_chip, blobs):
    """The unconstrained search does at least as well as either restricted profile."""
    full = full_profile(default_chip)
    for seed in range(3):
        unrestricted = attack_victim(victim, default_chip, blobs, full, seed=seed, direction_aware=False)
        for mech in (Mechanism.RH, Mechanism.RP):
            try:
                restricted = attack_victim(victim, default_chip, blobs, truth_profile(default_chip, mech), seed=seed)
            except ProfileExhausted as exc:
                restricted = exc.partial
            assert effective_flips(unrestricted, 500) <= effective_flips(restricted, 500)


def test_expected_code_change(victim):
    for bit in (0, 7):
        m = victim.copy()
        before = m.weights()[0].reshape(-1)[5]
        delta = expected_code_change(m, 0, 5, bit)
        m.flip_bit(0, 5, bit)
        assert m.weights()[0].reshape(-1)[5] - before == pytest.approx(delta)


def test_result_serialisation(victim, default_chip, blobs, tmp_path):
    res = attack_victim(victim, default_chip, blobs, full_profile(default_chip), direction_aware=False)
    path = tmp_path / "attack.json"
    res.save(path)
    data = load_attack_result(path)
    assert data["total_flips"] == res.total_flips and len(data["flips"]) == res.total_flips
    assert data["config"]["commit_mode"] == "logical"
    lines = (tmp_path / "attack.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,accuracy,cumulative_flips"
    assert len(lines) == res.total_flips + 2
    last = lines[-1].split(",")
    assert int(last[3]) == res.total_flips and float(last[2]) == res.final_accuracy
    assert json.loads(res.to_json()) == data


# -- physical commits ----------------------------------------------------------------

@pytest.mark.parametrize("mech", [Mechanism.RP, Mechanism.RH])
def test_logical_and_physical_agree(tiny, mech):
    model, test = tiny
    chip = physical_chip()
    wmap = build_weight_map(model, chip, Layout.SEEDED_SHUFFLE, row_stride=3, seed=1)
    prof = truth_profile(chip, mech)
    batch = test.batch(128, 0)
    logical = run_attack(model, None, prof, wmap, AttackConfig(max_flips=25), batch, test)
    phys_chip = chip.clone()
    physical = run_attack(model, phys_chip, prof, wmap,
                          AttackConfig(max_flips=25, commit_mode=CommitMode.PHYSICAL, forbid_collateral=True),
                          batch, test)
    key = [(f.layer, f.weight, f.bit) for f in logical.flips]
    assert key and key == [(f.layer, f.weight, f.bit) for f in physical.flips]
    assert logical.accuracy_trajectory == physical.accuracy_trajectory
    assert physical.time_budget_cycles > 0
    for layer in range(len(model.codes)):
        assert np.array_equal(read_model_bits(phys_chip, wmap, layer), physical.model.bits(layer))


def test_counter_defense_stops_physical_hammering(tiny):
    model, test = tiny
    chip = physical_chip()
    wmap = build_weight_map(model, chip, row_stride=3)
    cfg = AttackConfig(commit_mode="physical", defense=DefenseConfig.mac(10_000))
    with pytest.raises(PhysicalFlipMismatch, match="NRR"):
        run_attack(model, chip.clone(), truth_profile(chip, Mechanism.RH), wmap, cfg, test.batch(128, 0), test)
    res = run_attack(model, chip.clone(), truth_profile(chip, Mechanism.RP), wmap,
                     AttackConfig(commit_mode="physical", defense=DefenseConfig.mac(10_000), max_flips=5),
                     test.batch(128, 0), test)
    assert res.total_flips >= 1


def test_physical_needs_free_neighbours(tiny):
    model, test = tiny
    chip = physical_chip()
    wmap = build_weight_map(model, chip, row_stride=1)
    cfg = AttackConfig(commit_mode="physical")
    with pytest.raises(PhysicalFlipMismatch, match="row_stride"):
        run_attack(model, chip.clone(), truth_profile(chip, Mechanism.RP), wmap, cfg, test.batch(128, 0), test)


def _open_every_gate(chip, mechanism, bank, victim, column, budget, mapped):
    """Complement the whole victim row in the aggressor and press for the full window."""
    trace = commit_trace(chip, mechanism, bank, victim, column, chip.timing.t_refw_cycles - 1, mapped)
    for cmd in trace.items:
        if getattr(cmd, "payload", None) is not None:
            cmd.payload[:] = 1 - chip.stored[bank, victim]
    return trace


def test_collateral_flips_are_applied_or_refused(tiny, monkeypatch):
    model, test = tiny
    chip = physical_chip()
    wmap = build_weight_map(model, chip, row_stride=3)
    prof = truth_profile(chip, Mechanism.RP)
    monkeypatch.setattr(attack_mod, "commit_trace", _open_every_gate)
    cfg = dict(commit_mode="physical", max_flips=10)
    with pytest.raises(CollateralFlipError):
        run_attack(model, chip.clone(), prof, wmap, AttackConfig(forbid_collateral=True, **cfg),
                   test.batch(128, 0), test)
    run_chip = chip.clone()
    res = run_attack(model, run_chip, prof, wmap, AttackConfig(**cfg), test.batch(128, 0), test)
    assert any(f.collateral for f in res.flips)
    assert res.model.hamming(model) == res.total_flips
    for layer in range(len(model.codes)):
        assert np.array_equal(read_model_bits(run_chip, wmap, layer), res.model.bits(layer))


# -- comparison -----------------------------------------------------------------------

def test_compare_profiles_reports_medians(victim, default_chip, blobs):
    profiles = {"RH": truth_profile(default_chip, Mechanism.RH), "RP": truth_profile(default_chip, Mechanism.RP)}
    cmp = compare_profiles(victim, default_chip, profiles, [0, 1], blobs[1], AttackConfig(max_flips=60))
    assert set(cmp.flips) == {"RH", "RP"} and len(cmp.scores["RP"]) == 2
    assert cmp.greedy_max_gap == 0.0
    d = cmp.to_dict()
    assert json.loads(json.dumps(d)) == d
    if cmp.medians["RP"] > 60:
        assert cmp.ratio is None
    else:
        assert cmp.ratio == pytest.approx(cmp.medians["RH"] / cmp.medians["RP"])

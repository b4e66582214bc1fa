"""
Profile-constrained bit-flip attack
===================================

Train and quantize a small classifier, place it on the chip and flip
weight bits until it guesses at random.
"""

from dramflip.attack import AttackConfig, Layout, ProfileExhausted, build_weight_map, compare_profiles, run_attack
from dramflip.dram import Mechanism, generate_chip
from dramflip.profiler import full_profile, truth_profile
from dramflip.qnn import VICTIM_RECIPE, accuracy, make_dataset, mlp_spec, quantize, train_float

train, test = make_dataset("blobs", 10, 2000, seed=0)
model = quantize(train_float(mlp_spec(32, [64, 64], 10), train, seed=0, test=test, **VICTIM_RECIPE), 8)
print("quantized accuracy", accuracy(model, test).accuracy, "bits", model.total_bits)

chip = generate_chip()
wmap = build_weight_map(model, chip, Layout.SEEDED_SHUFFLE, seed=0)
batch = test.batch(128, 0)

# %%
# Any bit may flip: the unconstrained attack.
res = run_attack(model, None, full_profile(chip), wmap, AttackConfig(direction_aware=False), batch, test)
print(f"full profile: {res.total_flips} flips, accuracy {res.final_accuracy:.3f}")

# %%
# Only cells the chip can actually flip, in the direction they flip.
for mech in (Mechanism.RH, Mechanism.RP):
    try:
        res = run_attack(model, None, truth_profile(chip, mech), wmap, AttackConfig(), batch, test)
    except ProfileExhausted as exc:
        res = exc.partial
    print(f"{mech.name}: {res.total_flips} flips, accuracy {res.final_accuracy:.3f}, {res.stop_reason}")

# %%
# Paired over five placements.
cmp = compare_profiles(model, chip, {"RH": truth_profile(chip, Mechanism.RH),
                                     "RP": truth_profile(chip, Mechanism.RP)}, list(range(5)), test)
print("medians", cmp.medians, "ratio", cmp.ratio)
